#pragma once

#include "autodiff.hpp"
#include "baselines.hpp"
#include "data.hpp"
#include "experiment.hpp"
#include "gan.hpp"
#include "gradcheck.hpp"
#include "io.hpp"
#include "measurement.hpp"
#include "metrics.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "solver.hpp"
#include "surrogate.hpp"
#include "tensor.hpp"
