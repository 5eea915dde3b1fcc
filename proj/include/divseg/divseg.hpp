#pragma once

#include "divseg/dataset.hpp"
#include "divseg/denoiser.hpp"
#include "divseg/diversity.hpp"
#include "divseg/experiment.hpp"
#include "divseg/grid.hpp"
#include "divseg/metrics.hpp"
#include "divseg/mlp.hpp"
#include "divseg/pruning.hpp"
#include "divseg/rng.hpp"
#include "divseg/sampler.hpp"
