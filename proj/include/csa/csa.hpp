#pragma once

// Umbrella header: the whole library in one include.

#include "csa/criterion.hpp"
#include "csa/dataset.hpp"
#include "csa/errors.hpp"
#include "csa/estimators.hpp"
#include "csa/inference.hpp"
#include "csa/projection.hpp"
#include "csa/rng.hpp"
#include "csa/simulation.hpp"
#include "csa/subsets.hpp"
#include "csa/version.hpp"
