#pragma once

#include "rbsde/errors.hpp"
#include "rbsde/rng.hpp"
#include "rbsde/control_space.hpp"
#include "rbsde/summary.hpp"
#include "rbsde/problem.hpp"
#include "rbsde/parallel.hpp"
#include "rbsde/forward_sim.hpp"
#include "rbsde/randomization.hpp"
#include "rbsde/regression.hpp"
#include "rbsde/bsde_solver.hpp"
#include "rbsde/hjb_oracle.hpp"
#include "rbsde/zoo.hpp"
#include "rbsde/ensemble_io.hpp"
#include "rbsde/expression.hpp"
#include "rbsde/config.hpp"
#include "rbsde/experiment.hpp"
