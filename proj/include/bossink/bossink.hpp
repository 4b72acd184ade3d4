#pragma once

#include "bossink/analysis.hpp"
#include "bossink/corpus.hpp"
#include "bossink/error.hpp"
#include "bossink/eval.hpp"
#include "bossink/io.hpp"
#include "bossink/metrics.hpp"
#include "bossink/model.hpp"
#include "bossink/parallel.hpp"
#include "bossink/pruning.hpp"
#include "bossink/synthetic.hpp"
#include "bossink/tensor.hpp"
