#pragma once

#include "hcrnn/analytics.hpp"
#include "hcrnn/attention.hpp"
#include "hcrnn/autodiff.hpp"
#include "hcrnn/baselines.hpp"
#include "hcrnn/cells.hpp"
#include "hcrnn/checkpoint.hpp"
#include "hcrnn/config.hpp"
#include "hcrnn/data.hpp"
#include "hcrnn/evaluation.hpp"
#include "hcrnn/global_context.hpp"
#include "hcrnn/gradcheck.hpp"
#include "hcrnn/metrics.hpp"
#include "hcrnn/model.hpp"
#include "hcrnn/optimizer.hpp"
#include "hcrnn/parallel.hpp"
#include "hcrnn/params.hpp"
#include "hcrnn/random.hpp"
#include "hcrnn/tensor.hpp"
#include "hcrnn/training.hpp"
#include "hcrnn/gradient_suite.hpp"
