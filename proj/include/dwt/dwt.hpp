#pragma once

#include "dwt/checkpoint.hpp"
#include "dwt/corpus.hpp"
#include "dwt/distill.hpp"
#include "dwt/error.hpp"
#include "dwt/experiments.hpp"
#include "dwt/graph.hpp"
#include "dwt/model.hpp"
#include "dwt/ops.hpp"
#include "dwt/prob.hpp"
#include "dwt/remap.hpp"
#include "dwt/run_config.hpp"
#include "dwt/tensor.hpp"
#include "dwt/trainer.hpp"
