#pragma once

#include "dissect/core/error.hpp"
#include "dissect/core/kv.hpp"
#include "dissect/core/param_store.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/core/types.hpp"
#include "dissect/datagen/augment.hpp"
#include "dissect/datagen/corpus.hpp"
#include "dissect/datagen/phantom.hpp"
#include "dissect/eval/auc.hpp"
#include "dissect/eval/linear.hpp"
#include "dissect/eval/protocols.hpp"
#include "dissect/eval/report.hpp"
#include "dissect/eval/split.hpp"
#include "dissect/momentum/schedule.hpp"
#include "dissect/nn/encoder.hpp"
#include "dissect/nn/layers.hpp"
#include "dissect/objective/objective.hpp"
#include "dissect/serf/serf.hpp"
#include "dissect/trainer/checkpoint.hpp"
#include "dissect/trainer/config.hpp"
#include "dissect/trainer/fit.hpp"
#include "dissect/trainer/metrics.hpp"
#include "dissect/trainer/optimizer.hpp"
#include "dissect/trainer/trainer.hpp"
#include "dissect/vq/codebook.hpp"
