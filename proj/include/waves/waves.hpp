#pragma once

#include "waves/core.hpp"
#include "waves/quadrature.hpp"
#include "waves/philox.hpp"
#include "waves/lattice.hpp"
#include "waves/surface.hpp"
#include "waves/randomwave.hpp"
#include "waves/nodal.hpp"
#include "waves/kacrice.hpp"
