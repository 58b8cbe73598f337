#pragma once

#include "pyramidflow/checkpoint.hpp"
#include "pyramidflow/config.hpp"
#include "pyramidflow/dataset.hpp"
#include "pyramidflow/errors.hpp"
#include "pyramidflow/flow_blocks.hpp"
#include "pyramidflow/gradients.hpp"
#include "pyramidflow/io.hpp"
#include "pyramidflow/metrics.hpp"
#include "pyramidflow/model.hpp"
#include "pyramidflow/netpbm.hpp"
#include "pyramidflow/pyramid.hpp"
#include "pyramidflow/reversible.hpp"
#include "pyramidflow/synth.hpp"
#include "pyramidflow/tensor.hpp"
#include "pyramidflow/training.hpp"
