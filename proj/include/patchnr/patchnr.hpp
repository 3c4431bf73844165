#pragma once
// Umbrella header: the full library.

#include "patchnr/analysis.hpp"
#include "patchnr/diffcore.hpp"
#include "patchnr/error.hpp"
#include "patchnr/fidelity.hpp"
#include "patchnr/flow.hpp"
#include "patchnr/io.hpp"
#include "patchnr/metrics.hpp"
#include "patchnr/operators.hpp"
#include "patchnr/patchops.hpp"
#include "patchnr/priors.hpp"
#include "patchnr/random.hpp"
#include "patchnr/solver.hpp"
