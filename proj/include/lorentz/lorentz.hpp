#pragma once

#include "lorentz/coefficients.hpp"
#include "lorentz/harness.hpp"
#include "lorentz/kinetic.hpp"
#include "lorentz/markov.hpp"
#include "lorentz/medium.hpp"
#include "lorentz/metrics.hpp"
#include "lorentz/parallel.hpp"
#include "lorentz/quadrature.hpp"
#include "lorentz/rng.hpp"
#include "lorentz/scattering.hpp"
#include "lorentz/vec2.hpp"
