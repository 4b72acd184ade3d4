#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bossink/corpus.hpp"
#include "bossink/error.hpp"
#include "bossink/metrics.hpp"
#include "bossink/model.hpp"
#include "bossink/parallel.hpp"
#include "bossink/pruning.hpp"
#include "bossink/synthetic.hpp"

namespace bossink {

// Natural-log softmax of one logits row, in double.
inline std::vector<double> log_softmax(std::span<const float> logits) {
  double max = -std::numeric_limits<double>::infinity();
  for (float v : logits) max = std::max(max, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - max);
  const double lse = max + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

struct PerplexityResult {
  double perplexity = 0.0;
  std::size_t n_tokens = 0;  // predicted tokens
};

// exp(mean next-token NLL) over non-overlapping windows of seq_len inputs.
// Window w reads stream[w*seq_len, (w+1)*seq_len) and predicts the stream
// shifted by one, so a window needs seq_len + 1 tokens.
inline PerplexityResult perplexity(const Checkpoint& ck, const std::vector<TokenId>& stream,
                                   std::size_t seq_len, int threads = 1) {
  if (seq_len == 0) throw InputError("perplexity: seq_len must be positive");
  if (stream.size() < seq_len + 1) {
    throw InputError("perplexity: stream of " + std::to_string(stream.size()) +
                     " tokens is shorter than seq_len + 1 = " + std::to_string(seq_len + 1));
  }
  const std::size_t windows = (stream.size() - 1) / seq_len;
  const auto nll = parallel_map(windows, threads, [&](std::size_t w) {
    const auto begin = stream.begin() + static_cast<std::ptrdiff_t>(w * seq_len);
    const std::vector<TokenId> input(begin, begin + static_cast<std::ptrdiff_t>(seq_len));
    const Tensor logits = forward(ck, input).logits;
    double sum = 0.0;
    for (std::size_t t = 0; t < seq_len; ++t) {
      const auto lp = log_softmax(logits.row(t));
      sum -= lp[static_cast<std::size_t>(stream[w * seq_len + t + 1])];
    }
    return sum;
  });
  double total = 0.0;
  for (double v : nll) total += v;
  const std::size_t n = windows * seq_len;
  return {std::exp(total / static_cast<double>(n)), n};
}

struct ChoiceItem {
  Prompt prompt;
  std::vector<std::vector<TokenId>> options;
  std::size_t answer = 0;
};

struct ChoiceResult {
  double accuracy = 0.0;
  std::vector<std::size_t> predicted;
  std::vector<std::vector<double>> option_scores;
};

// Length-normalized log-likelihood of `option` continuing `prompt`.
inline double option_score(const Checkpoint& ck, const Prompt& prompt,
                           const std::vector<TokenId>& option) {
  if (option.empty()) throw InputError("choice_eval: empty option");
  if (prompt.empty()) throw InputError("choice_eval: empty prompt");
  std::vector<TokenId> seq = prompt;
  seq.insert(seq.end(), option.begin(), option.end());
  seq.pop_back();  // the last option token is only a target
  const Tensor logits = forward(ck, seq).logits;
  double sum = 0.0;
  for (std::size_t j = 0; j < option.size(); ++j) {
    const auto lp = log_softmax(logits.row(prompt.size() - 1 + j));
    sum += lp[static_cast<std::size_t>(option[j])];
  }
  return sum / static_cast<double>(option.size());
}

// Zero-shot multiple choice: the highest-scoring option wins, ties go to the
// lowest index.
inline ChoiceResult choice_eval(const Checkpoint& ck, const std::vector<ChoiceItem>& items,
                                int threads = 1) {
  if (items.empty()) throw InputError("choice_eval: no items");
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].options.size() < 2) {
      throw InputError("choice_eval: item " + std::to_string(i) + " has fewer than 2 options");
    }
    if (items[i].answer >= items[i].options.size()) {
      throw InputError("choice_eval: item " + std::to_string(i) + " answer index out of range");
    }
    for (const auto& o : items[i].options) {
      if (o.empty()) throw InputError("choice_eval: item " + std::to_string(i) + " has an empty option");
    }
  }
  ChoiceResult r;
  r.option_scores = parallel_map(items.size(), threads, [&](std::size_t i) {
    std::vector<double> scores;
    for (const auto& o : items[i].options) scores.push_back(option_score(ck, items[i].prompt, o));
    return scores;
  });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& s = r.option_scores[i];
    std::size_t best = 0;
    for (std::size_t j = 1; j < s.size(); ++j) {
      if (s[j] > s[best]) best = j;
    }
    r.predicted.push_back(best);
    if (best == items[i].answer) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
  return r;
}

// First-token recall items for the planted fixtures:
//   prompt  = [answer, filler..., '?'],  options = single tokens
// The answer sits at position 0 and only a routing head can carry it to the
// marker position.
inline std::vector<ChoiceItem> make_recall_items(std::size_t n_items, std::size_t prompt_len,
                                                 std::size_t n_options, std::uint64_t seed,
                                                 std::size_t vocab_size = 256) {
  if (prompt_len < 2) throw InputError("recall items: prompt_len must be >= 2");
  if (n_options < 2 || n_options + 1 > vocab_size) {
    throw InputError("recall items: bad option count " + std::to_string(n_options));
  }
  std::mt19937_64 rng(seed);
  auto draw = [&]() {
    TokenId t;
    do {
      t = static_cast<TokenId>(rng() % vocab_size);
    } while (t == kQueryMarker);
    return t;
  };
  std::vector<ChoiceItem> items;
  for (std::size_t i = 0; i < n_items; ++i) {
    ChoiceItem item;
    const TokenId answer = draw();
    item.prompt.push_back(answer);
    while (item.prompt.size() + 1 < prompt_len) item.prompt.push_back(draw());
    item.prompt.push_back(kQueryMarker);
    std::vector<TokenId> opts{answer};
    while (opts.size() < n_options) {
      const TokenId t = draw();
      if (std::find(opts.begin(), opts.end(), t) == opts.end()) opts.push_back(t);
    }
    item.answer = static_cast<std::size_t>(rng() % n_options);
    std::swap(opts[0], opts[item.answer]);
    for (auto t : opts) item.options.push_back({t});
    items.push_back(std::move(item));
  }
  return items;
}

struct EvalData {
  std::vector<TokenId> stream;  // perplexity corpus
  std::size_t seq_len = 64;
  std::vector<ChoiceItem> items;
};

struct EvalReport {
  std::string model_id;
  std::string strategy = "dense";
  double prune_ratio = 0.0;
  std::size_t n_removed = 0;
  double perplexity = 0.0;
  double choice_accuracy = 0.0;
  std::size_t seq_len = 0;
  std::size_t n_eval_tokens = 0;
  std::vector<std::size_t> per_item_predicted;
};

inline EvalReport evaluate(const Checkpoint& ck, const EvalData& data, int threads = 1) {
  EvalReport r;
  const auto ppl = perplexity(ck, data.stream, data.seq_len, threads);
  r.perplexity = ppl.perplexity;
  r.n_eval_tokens = ppl.n_tokens;
  r.seq_len = data.seq_len;
  const auto choice = choice_eval(ck, data.items, threads);
  r.choice_accuracy = choice.accuracy;
  r.per_item_predicted = choice.predicted;
  return r;
}

// Scalar quality measure of a checkpoint on fixed data.
using Evaluator = std::function<double(const Checkpoint&)>;

inline Evaluator choice_evaluator(std::vector<ChoiceItem> items) {
  return [items = std::move(items)](const Checkpoint& ck) { return choice_eval(ck, items).accuracy; };
}

inline Evaluator perplexity_evaluator(std::vector<TokenId> stream, std::size_t seq_len) {
  return [stream = std::move(stream), seq_len](const Checkpoint& ck) {
    return perplexity(ck, stream, seq_len).perplexity;
  };
}

struct AblationSweepRow {
  std::optional<std::size_t> layer;  // empty for the dense reference row
  std::optional<std::size_t> head;
  double score = 0.0;
  double metric_delta = 0.0;
};

struct SweepResult {
  double dense_value = 0.0;
  std::vector<AblationSweepRow> rows;  // dense row first, then table order
  std::map<std::size_t, double> layer_mean_delta;
};

// Ablates each unit of `scores` on its own (head: zero its W_O slice;
// layer: zero the whole block) and records the evaluator delta against the
// dense model.
inline SweepResult single_target_sweep(const Checkpoint& ck, const ScoreTable& scores,
                                       const Evaluator& evaluator, int threads = 1) {
  SweepResult out;
  if (scores.entries.empty()) return out;
  out.dense_value = evaluator(ck);
  out.rows.push_back({std::nullopt, std::nullopt, 0.0, 0.0});
  const auto deltas = parallel_map(scores.entries.size(), threads, [&](std::size_t i) {
    const auto& e = scores.entries[i];
    const Checkpoint ablated = e.head ? ablate_heads(ck, {{e.layer, *e.head}})
                                      : zero_layers(ck, {e.layer});
    return evaluator(ablated) - out.dense_value;
  });
  std::map<std::size_t, std::pair<double, std::size_t>> per_layer;
  for (std::size_t i = 0; i < scores.entries.size(); ++i) {
    const auto& e = scores.entries[i];
    out.rows.push_back({e.layer, e.head, e.score, deltas[i]});
    auto& acc = per_layer[e.layer];
    acc.first += deltas[i];
    ++acc.second;
  }
  for (const auto& [l, acc] : per_layer) {
    out.layer_mean_delta[l] = acc.first / static_cast<double>(acc.second);
  }
  return out;
}

// One report per ratio, each pruned from the dense checkpoint. `scores` is
// the dense model's table for score-based strategies and ignored for the
// positional ones.
inline std::vector<EvalReport> ratio_sweep(const Checkpoint& ck, Strategy strategy,
                                           const std::vector<double>& ratios,
                                           const ScoreTable* scores, const EvalData& data,
                                           int threads = 1) {
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] >= 0.0 && ratios[i] < 1.0)) {
      throw ConfigError("ratio_sweep: ratio " + std::to_string(ratios[i]) + " outside [0, 1)");
    }
    if (i && ratios[i] <= ratios[i - 1]) throw ConfigError("ratio_sweep: ratios must ascend");
  }
  if (!is_positional(strategy) && !scores) {
    throw ConfigError("ratio_sweep: strategy '" + to_string(strategy) + "' needs a score table");
  }
  return parallel_map(ratios.size(), threads, [&](std::size_t i) {
    const PruneSpec spec = is_positional(strategy)
                               ? rank_positional(ck.config.n_layers, strategy, ratios[i])
                               : rank_targets(*scores, strategy, ratios[i]);
    EvalReport r = evaluate(apply_prune(ck, spec), data);
    r.strategy = to_string(strategy);
    r.prune_ratio = ratios[i];
    r.n_removed = spec.targets.size();
    return r;
  });
}

}  // namespace bossink
