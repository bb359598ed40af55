#pragma once

// Umbrella header.

#include "lwck/tensor.hpp"
#include "lwck/linalg.hpp"
#include "lwck/cpd.hpp"
#include "lwck/epc.hpp"
#include "lwck/svd.hpp"
#include "lwck/conv.hpp"
#include "lwck/planner.hpp"
#include "lwck/objectives.hpp"
#include "lwck/calibration.hpp"
#include "lwck/io.hpp"
