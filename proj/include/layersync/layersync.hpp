#pragma once

#include "layersync/tensor.hpp"
#include "layersync/ops.hpp"
#include "layersync/rng.hpp"
#include "layersync/gradcheck.hpp"
#include "layersync/interpolant.hpp"
#include "layersync/backbone.hpp"
#include "layersync/regularizers.hpp"
#include "layersync/samplers.hpp"
#include "layersync/data.hpp"
#include "layersync/metrics.hpp"
#include "layersync/optim.hpp"
#include "layersync/analysis.hpp"
#include "layersync/io.hpp"
#include "layersync/config.hpp"
#include "layersync/metrics_log.hpp"
#include "layersync/train.hpp"
#include "layersync/experiments.hpp"
