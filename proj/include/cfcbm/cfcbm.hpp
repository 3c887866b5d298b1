#pragma once

#include "cfcbm/concept_hierarchy.hpp"
#include "cfcbm/discovery.hpp"
#include "cfcbm/embedding_store.hpp"
#include "cfcbm/error.hpp"
#include "cfcbm/evaluator.hpp"
#include "cfcbm/model.hpp"
#include "cfcbm/noise.hpp"
#include "cfcbm/numerics.hpp"
#include "cfcbm/synthetic.hpp"
#include "cfcbm/trainer.hpp"
