#pragma once

#include "parseq/chain.hpp"
#include "parseq/errors.hpp"
#include "parseq/eval.hpp"
#include "parseq/grad.hpp"
#include "parseq/invert.hpp"
#include "parseq/io.hpp"
#include "parseq/parallel.hpp"
#include "parseq/predictor.hpp"
#include "parseq/random.hpp"
#include "parseq/sampler.hpp"
#include "parseq/schedule.hpp"
#include "parseq/solver.hpp"
#include "parseq/types.hpp"
