#pragma once

// Reference 2-D convolution and the layer rewrites that replace a dense
// convolution by a short sequence of cheaper ones:
//
//   D > 1 (CP):   pointwise S->R,  depthwise DxD over R channels,  pointwise R->T
//   D = 1 (SVD):  pointwise S->R,  pointwise R->T
//
// Weights use the (out, in/groups, D, D) layout. Convolution is
// cross-correlation and there are no bias terms.

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lwck/cpd.hpp"
#include "lwck/epc.hpp"
#include "lwck/svd.hpp"
#include "lwck/tensor.hpp"

namespace lwck {

struct ConvLayerSpec {
  std::string name;
  std::size_t in_channels = 1;   // S
  std::size_t out_channels = 1;  // T
  std::size_t kernel_size = 1;   // D (square kernels)
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
  std::optional<std::array<std::size_t, 2>> input_hw;  // (H, W) of the layer input

  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

enum class LayerKind { pointwise, depthwise, standard };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::pointwise: return "pointwise";
    case LayerKind::depthwise: return "depthwise";
    default: return "standard";
  }
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "pointwise") return LayerKind::pointwise;
  if (s == "depthwise") return LayerKind::depthwise;
  if (s == "standard") return LayerKind::standard;
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

/// A convolution with its weights.
struct ConvLayer {
  ConvLayerSpec spec;
  Tensor weights;
};

struct FactorizedLayer {
  LayerKind kind = LayerKind::standard;
  ConvLayerSpec spec;
  Tensor weights;
};

inline void validate(const ConvLayerSpec& s) {
  const auto fail = [&](const std::string& what) {
    throw std::invalid_argument("layer '" + s.name + "': " + what);
  };
  if (s.in_channels == 0 || s.out_channels == 0) fail("channel counts must be positive");
  if (s.kernel_size == 0) fail("kernel size must be positive");
  if (s.stride == 0) fail("stride must be positive");
  if (s.groups == 0) fail("groups must be positive");
  if (s.in_channels % s.groups || s.out_channels % s.groups) fail("channels must be divisible by groups");
  if (s.input_hw && ((*s.input_hw)[0] == 0 || (*s.input_hw)[1] == 0)) fail("input_hw must be positive");
}

inline Dims weight_dims(const ConvLayerSpec& s) {
  return {s.out_channels, s.in_channels / s.groups, s.kernel_size, s.kernel_size};
}

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < kernel)
    throw std::invalid_argument("kernel " + std::to_string(kernel) + " larger than padded input " +
                                std::to_string(in + 2 * pad));
  return (in + 2 * pad - kernel) / stride + 1;
}

inline std::array<std::size_t, 2> output_hw(const ConvLayerSpec& s) {
  if (!s.input_hw) throw std::invalid_argument("layer '" + s.name + "': input_hw is not set");
  return {conv_output_extent((*s.input_hw)[0], s.kernel_size, s.stride, s.padding),
          conv_output_extent((*s.input_hw)[1], s.kernel_size, s.stride, s.padding)};
}

inline void validate(const FactorizedLayer& l) {
  validate(l.spec);
  if (l.weights.dims() != weight_dims(l.spec))
    throw std::invalid_argument("layer '" + l.spec.name + "': weights " + dims_to_string(l.weights.dims()) +
                                " do not match expected " + dims_to_string(weight_dims(l.spec)));
  if (l.kind == LayerKind::pointwise && (l.spec.kernel_size != 1 || l.spec.groups != 1))
    throw std::invalid_argument("layer '" + l.spec.name + "': pointwise layers need D = 1 and groups = 1");
  if (l.kind == LayerKind::depthwise &&
      (l.spec.groups != l.spec.in_channels || l.spec.in_channels != l.spec.out_channels))
    throw std::invalid_argument("layer '" + l.spec.name + "': depthwise layers need groups = S = T");
}

/// Direct grouped 2-D cross-correlation of a C x H x W input.
inline Tensor conv2d_forward(const Tensor& input, const ConvLayerSpec& spec, const Tensor& weights) {
  validate(spec);
  if (input.order() != 3) throw std::invalid_argument("conv2d_forward expects a C x H x W input");
  if (input.dim(0) != spec.in_channels)
    throw std::invalid_argument("layer '" + spec.name + "': input has " + std::to_string(input.dim(0)) +
                                " channels, expected " + std::to_string(spec.in_channels));
  if (weights.dims() != weight_dims(spec))
    throw std::invalid_argument("layer '" + spec.name + "': weights " + dims_to_string(weights.dims()) +
                                " do not match expected " + dims_to_string(weight_dims(spec)));

  const std::size_t H = input.dim(1), W = input.dim(2), D = spec.kernel_size;
  const std::size_t Ho = conv_output_extent(H, D, spec.stride, spec.padding);
  const std::size_t Wo = conv_output_extent(W, D, spec.stride, spec.padding);
  const std::size_t cin_g = spec.in_channels / spec.groups;
  const std::size_t cout_g = spec.out_channels / spec.groups;
  const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
  auto x = input.data();
  auto w = weights.data();

  std::vector<double> out(spec.out_channels * Ho * Wo, 0.0);
  for (std::size_t g = 0; g < spec.groups; ++g)
    for (std::size_t oc = 0; oc < cout_g; ++oc) {
      const std::size_t t = g * cout_g + oc;
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0.0;
          for (std::size_t ic = 0; ic < cin_g; ++ic) {
            const std::size_t s = g * cin_g + ic;
            for (std::size_t ky = 0; ky < D; ++ky) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < D; ++kx) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += x[(s * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] *
                       w[((t * cin_g + ic) * D + ky) * D + kx];
              }
            }
          }
          out[(t * Ho + oy) * Wo + ox] = acc;
        }
    }
  return Tensor({spec.out_channels, Ho, Wo}, std::move(out));
}

inline Tensor conv2d_forward(const Tensor& input, const ConvLayer& layer) {
  return conv2d_forward(input, layer.spec, layer.weights);
}

/// Left-to-right composition; an empty sequence is the identity.
inline Tensor forward_sequence(const Tensor& input, const std::vector<FactorizedLayer>& layers) {
  Tensor x = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0 && layers[i].spec.in_channels != layers[i - 1].spec.out_channels)
      throw std::invalid_argument("sequence chain mismatch at layer " + std::to_string(i) + " ('" +
                                  layers[i].spec.name + "')");
    x = conv2d_forward(x, layers[i].spec, layers[i].weights);
  }
  return x;
}

inline std::size_t max_svd_rank(const ConvLayerSpec& s) { return std::min(s.in_channels, s.out_channels); }

/// Upper end of the CP rank search for the D^2 x S x T reshaped kernel:
/// min(D^2 * min(S, T), product of the two largest of (D^2, S, T)).
inline std::size_t max_cp_rank(const ConvLayerSpec& s) {
  const std::size_t d2 = s.kernel_size * s.kernel_size;
  return std::min(d2 * std::min(s.in_channels, s.out_channels), cp_rank_cap({d2, s.in_channels, s.out_channels}));
}

/// Conv weights (T, S, D, D) -> D x D x S x T kernel.
inline Tensor kernel_from_weights(const Tensor& weights) {
  if (weights.order() != 4) throw std::invalid_argument("conv weights must be 4th-order (T, S, D, D)");
  return permute(weights, {2, 3, 1, 0});
}

/// D x D x S x T kernel -> conv weights (T, S, D, D).
inline Tensor weights_from_kernel(const Tensor& kernel) {
  if (kernel.order() != 4) throw std::invalid_argument("kernel must be 4th-order (D, D, S, T)");
  return permute(kernel, {3, 2, 0, 1});
}

/// 1x1 conv weights (T, S, 1, 1) -> S x T kernel matrix.
inline Matrix pointwise_matrix(const Tensor& weights) {
  if (weights.order() != 4 || weights.dim(2) != 1 || weights.dim(3) != 1)
    throw std::invalid_argument("expected 1x1 conv weights (T, S, 1, 1)");
  const std::size_t T = weights.dim(0), S = weights.dim(1);
  return Matrix::generate(S, T, [&](std::size_t s, std::size_t t) { return weights[t * S + s]; });
}

namespace detail {

inline ConvLayerSpec sublayer_spec(const ConvLayerSpec& base, const std::string& suffix, std::size_t in,
                                   std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad,
                                   std::size_t groups, std::optional<std::array<std::size_t, 2>> hw) {
  ConvLayerSpec s;
  s.name = base.name + suffix;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_size = kernel;
  s.stride = stride;
  s.padding = pad;
  s.groups = groups;
  s.input_hw = hw;
  return s;
}

inline void check_dense_layer(const ConvLayer& layer) {
  validate(layer.spec);
  if (layer.spec.groups != 1) throw std::invalid_argument("layer '" + layer.spec.name + "': grouped layers are not factorized");
  if (layer.weights.dims() != weight_dims(layer.spec))
    throw std::invalid_argument("layer '" + layer.spec.name + "': weights " + dims_to_string(layer.weights.dims()) +
                                " do not match expected " + dims_to_string(weight_dims(layer.spec)));
}

}  // namespace detail

struct FactorizedConv {
  std::vector<FactorizedLayer> layers;
  double kernel_rel_error = 0.0;
};

struct CpFactorizedConv : FactorizedConv {
  CPDecomposition cpd;
  double als_sensitivity = 0.0;
  int corrections = 0;
};

/// Builds the three-layer sequence from a CP decomposition of the reshaped
/// D^2 x S x T kernel with factors (spatial, input, output). Coefficients are
/// folded into the first pointwise layer.
inline std::vector<FactorizedLayer> cp_layers_from_decomposition(const ConvLayerSpec& spec,
                                                                 const CPDecomposition& cpd) {
  const std::size_t R = cpd.rank(), D = spec.kernel_size, S = spec.in_channels, T = spec.out_channels;
  const Matrix& spatial = cpd.factors.at(0);
  const Matrix& input = cpd.factors.at(1);
  const Matrix& output = cpd.factors.at(2);
  if (spatial.rows() != D * D || input.rows() != S || output.rows() != T)
    throw std::invalid_argument("decomposition dims do not match layer '" + spec.name + "'");

  const auto in_hw = spec.input_hw;
  std::optional<std::array<std::size_t, 2>> out_hw;
  if (in_hw) out_hw = output_hw(spec);

  FactorizedLayer first{LayerKind::pointwise, detail::sublayer_spec(spec, ".0", S, R, 1, 1, 0, 1, in_hw),
                        Tensor::generate({R, S, 1, 1}, [&](std::size_t k) {
                          const std::size_t r = k / S, s = k % S;
                          return cpd.coeffs[r] * input(s, r);
                        })};
  FactorizedLayer depthwise{LayerKind::depthwise,
                            detail::sublayer_spec(spec, ".1", R, R, D, spec.stride, spec.padding, R, in_hw),
                            Tensor::generate({R, 1, D, D}, [&](std::size_t k) {
                              const std::size_t r = k / (D * D), ji = k % (D * D);
                              return spatial(ji, r);
                            })};
  FactorizedLayer last{LayerKind::pointwise, detail::sublayer_spec(spec, ".2", R, T, 1, 1, 0, 1, out_hw),
                       Tensor::generate({T, R, 1, 1}, [&](std::size_t k) {
                         const std::size_t t = k / R, r = k % R;
                         return output(t, r);
                       })};
  return {std::move(first), std::move(depthwise), std::move(last)};
}

/// CP rewrite of a D > 1 convolution. With `epc` set the decomposition runs
/// through decompose_with_epc, otherwise plain CP-ALS.
inline CpFactorizedConv cp_factorize_conv(const ConvLayer& layer, std::size_t rank,
                                          const std::optional<EpcConfig>& epc = std::nullopt,
                                          const AlsOptions& als = {}) {
  detail::check_dense_layer(layer);
  if (layer.spec.kernel_size < 2)
    throw std::invalid_argument("layer '" + layer.spec.name + "': 1x1 kernels use svd_factorize_conv");
  if (rank == 0) throw std::invalid_argument("CP rank must be at least 1");

  const Tensor k3 = reshape_kernel(kernel_from_weights(layer.weights));
  CpFactorizedConv out;
  if (epc) {
    auto res = decompose_with_epc(k3, rank, als, *epc);
    out.cpd = std::move(res.cpd);
    out.als_sensitivity = res.als_sensitivity;
    out.corrections = res.corrections;
  } else {
    out.cpd = cp_als(k3, rank, als);
    out.als_sensitivity = sensitivity(out.cpd);
  }
  out.kernel_rel_error = relative_error(k3, reconstruct(out.cpd));
  out.layers = cp_layers_from_decomposition(layer.spec, out.cpd);
  return out;
}

/// SVD rewrite of a 1x1 convolution into pointwise S->R and R->T.
inline FactorizedConv svd_factorize_conv(const ConvLayer& layer, std::size_t rank) {
  detail::check_dense_layer(layer);
  if (layer.spec.kernel_size != 1)
    throw std::invalid_argument("layer '" + layer.spec.name + "': svd_factorize_conv needs a 1x1 kernel");
  const std::size_t S = layer.spec.in_channels, T = layer.spec.out_channels;
  const Matrix a = pointwise_matrix(layer.weights);
  const auto split = svd_split(a, rank);

  // Stride and padding of a 1x1 layer act on the first projection.
  const auto& spec = layer.spec;
  std::optional<std::array<std::size_t, 2>> mid_hw;
  if (spec.input_hw) mid_hw = output_hw(spec);

  FactorizedConv out;
  out.layers.push_back({LayerKind::pointwise,
                        detail::sublayer_spec(spec, ".0", S, rank, 1, spec.stride, spec.padding, 1, spec.input_hw),
                        Tensor::generate({rank, S, 1, 1}, [&](std::size_t k) {
                          return split.first(k % S, k / S);
                        })});
  out.layers.push_back({LayerKind::pointwise, detail::sublayer_spec(spec, ".1", rank, T, 1, 1, 0, 1, mid_hw),
                        Tensor::generate({T, rank, 1, 1}, [&](std::size_t k) {
                          return split.second(k % rank, k / rank);
                        })});
  const Matrix approx = matmul(split.first, split.second);
  const double ref = frobenius_norm(a);
  out.kernel_rel_error = ref > 0.0 ? frobenius_norm(subtract(a, approx)) / ref : 0.0;
  return out;
}

}  // namespace lwck
