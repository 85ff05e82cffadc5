// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.
#pragma once

#include "elastic/autodiff.hpp"
#include "elastic/backbone.hpp"
#include "elastic/checkpoint.hpp"
#include "elastic/config.hpp"
#include "elastic/config_space.hpp"
#include "elastic/csv.hpp"
#include "elastic/curriculum.hpp"
#include "elastic/dataset.hpp"
#include "elastic/errors.hpp"
#include "elastic/gate_layout.hpp"
#include "elastic/importance.hpp"
#include "elastic/metrics.hpp"
#include "elastic/nn_ops.hpp"
#include "elastic/optimizer.hpp"
#include "elastic/pareto.hpp"
#include "elastic/pipeline.hpp"
#include "elastic/router.hpp"
#include "elastic/tensor.hpp"
