#pragma once

#include "atmle/core.hpp"
#include "atmle/data_model.hpp"
#include "atmle/hal_basis.hpp"
#include "atmle/solvers.hpp"
#include "atmle/nuisance.hpp"
#include "atmle/working_model.hpp"
#include "atmle/eif.hpp"
#include "atmle/estimators.hpp"
#include "atmle/oracle.hpp"
#include "atmle/simulation.hpp"
#include "atmle/config.hpp"

namespace atmle {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace atmle
