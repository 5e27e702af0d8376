#pragma once

#include "gcnas/autodiff.hpp"
#include "gcnas/experiment_config.hpp"
#include "gcnas/experiments.hpp"
#include "gcnas/few_shot.hpp"
#include "gcnas/graph_data.hpp"
#include "gcnas/mask.hpp"
#include "gcnas/modules.hpp"
#include "gcnas/optimizer.hpp"
#include "gcnas/partition.hpp"
#include "gcnas/rank_stats.hpp"
#include "gcnas/search_darts.hpp"
#include "gcnas/search_ga.hpp"
#include "gcnas/supernet.hpp"
#include "gcnas/tensor.hpp"
