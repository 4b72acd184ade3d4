#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bossink/corpus.hpp"
#include "bossink/error.hpp"
#include "bossink/model.hpp"
#include "bossink/parallel.hpp"
#include "bossink/tensor.hpp"

namespace bossink {



enum class Granularity { head, layer };

inline std::string to_string(Granularity g) { return g == Granularity::head ? "head" : "layer"; }

enum class Metric { bos_head, bos_layer, bi, mag, wanda };

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::bos_head: return "bos_head";
    case Metric::bos_layer: return "bos_layer";
    case Metric::bi: return "bi";
    case Metric::mag: return "mag";
    case Metric::wanda: return "wanda";
  }
  return "?";
}

inline Metric metric_from_string(const std::string& s) {
  if (s == "bos_head") return Metric::bos_head;
  if (s == "bos_layer") return Metric::bos_layer;
  if (s == "bi") return Metric::bi;
  if (s == "mag") return Metric::mag;
  if (s == "wanda") return Metric::wanda;
  throw ConfigError("unknown metric '" + s + "' (expected bos_head, bos_layer, bi, mag, wanda)");
}

inline Granularity granularity_of(Metric m) {
  return (m == Metric::bos_layer || m == Metric::bi) ? Granularity::layer : Granularity::head;
}

struct ScoreEntry {
  std::size_t layer = 0;
  std::optional<std::size_t> head;  // empty for layer-granularity tables
  double score = 0.0;

  friend bool operator==(const ScoreEntry&, const ScoreEntry&) = default;
};

// Scores for every head or every layer of one model, in ascending
// (layer, head) order.
struct ScoreTable {
  Granularity granularity = Granularity::head;
  std::string metric;
  std::vector<ScoreEntry> entries;
  std::size_t n_samples = 0;
  std::vector<std::size_t> seq_lens;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<std::string> warnings;

  const ScoreEntry* find(std::size_t layer, std::optional<std::size_t> head = std::nullopt) const {
    for (const auto& e : entries) {
      if (e.layer == layer && e.head == head) return &e;
    }
    return nullptr;
  }

  double at(std::size_t layer, std::optional<std::size_t> head = std::nullopt) const {
    const auto* e = find(layer, head);
    if (!e) throw IndexError("score table has no entry for layer " + std::to_string(layer));
    return e->score;
  }
};

// Mean attention weight key position k receives over all T queries. Only the
// causal (k <= t) part of the map is read.
inline double sink_score(const Tensor& attn, std::size_t k) {
  if (attn.rank() != 2 || attn.rows() != attn.cols()) {
    throw DimensionError("sink_score: attention map must be square, got " +
                         shape_str(attn.shape()));
  }
  const std::size_t T = attn.rows();
  if (k >= T) {
    throw IndexError("sink_score: key " + std::to_string(k) + " out of range for T=" +
                     std::to_string(T));
  }
  double sum = 0.0;
  for (std::size_t t = k; t < T; ++t) sum += attn(t, k);
  return sum / static_cast<double>(T);
}

inline double bos_head_score(const Tensor& attn) { return sink_score(attn, 0); }

// Equal-weight mean of the per-prompt BOS scores of one head.
inline double bos_head_score(std::span<const Tensor> maps) {
  if (maps.empty()) throw InputError("bos_head_score: no attention maps");
  double sum = 0.0;
  for (const auto& m : maps) sum += bos_head_score(m);
  return sum / static_cast<double>(maps.size());
}

inline double bos_layer_score(std::span<const double> head_scores) {
  if (head_scores.empty()) throw InputError("bos_layer_score: no head scores");
  double sum = 0.0;
  for (double s : head_scores) sum += s;
  return sum / static_cast<double>(head_scores.size());
}

struct CosineSums {
  double sum = 0.0;
  std::size_t valid = 0;
  std::size_t skipped = 0;
};

// Per-token cosine similarities between two [T x d] hidden-state matrices.
// Tokens where either row has zero norm are skipped.
inline CosineSums cosine_sums(const Tensor& x_in, const Tensor& x_out) {
  if (x_in.shape() != x_out.shape() || x_in.rank() != 2) {
    throw DimensionError("block_influence: hidden states " + shape_str(x_in.shape()) +
                         " and " + shape_str(x_out.shape()) + " do not match");
  }
  CosineSums acc;
  for (std::size_t t = 0; t < x_in.rows(); ++t) {
    auto a = x_in.row(t);
    auto b = x_out.row(t);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += static_cast<double>(a[i]) * b[i];
      na += static_cast<double>(a[i]) * a[i];
      nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
      ++acc.skipped;
      continue;
    }
    acc.sum += dot / (std::sqrt(na) * std::sqrt(nb));
    ++acc.valid;
  }
  return acc;
}

struct BlockInfluence {
  double score = 0.0;
  std::size_t skipped_tokens = 0;
};

inline BlockInfluence block_influence_from(const CosineSums& acc) {
  if (acc.valid == 0) {
    throw UndefinedScoreError("block_influence: every token has a zero-norm hidden state");
  }
  return {1.0 - acc.sum / static_cast<double>(acc.valid), acc.skipped};
}

// 1 - mean token-wise cosine(x_in[t], x_out[t]).
inline BlockInfluence block_influence(const Tensor& x_in, const Tensor& x_out) {
  return block_influence_from(cosine_sums(x_in, x_out));
}

// Several prompts: every valid token carries equal weight.
inline BlockInfluence block_influence(std::span<const std::pair<Tensor, Tensor>> pairs) {
  CosineSums total;
  for (const auto& [in, out] : pairs) {
    const auto s = cosine_sums(in, out);
    total.sum += s.sum;
    total.valid += s.valid;
    total.skipped += s.skipped;
  }
  return block_influence_from(total);
}

// L1 mass of a head's output-projection slice (Mag-SP).
inline double mag_head_score(const Tensor& wo_slice) {
  double sum = 0.0;
  for (float v : wo_slice.data()) sum += std::fabs(static_cast<double>(v));
  return sum;
}

// Activation-weighted L1 mass (Wanda-SP at head granularity): row j of the
// slice is weighted by the calibration L2 norm of head output dimension j.
inline double wanda_head_score(const Tensor& wo_slice, std::span<const double> act_norms) {
  if (wo_slice.rank() != 2 || act_norms.size() != wo_slice.rows()) {
    throw InputError("wanda_head_score: " + std::to_string(act_norms.size()) +
                     " activation norms for a slice of shape " + shape_str(wo_slice.shape()));
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < wo_slice.rows(); ++j) {
    double row = 0.0;
    for (float v : wo_slice.row(j)) row += std::fabs(static_cast<double>(v));
    sum += act_norms[j] * row;
  }
  return sum;
}

namespace detail {

inline std::vector<std::size_t> prompt_lengths(const std::vector<Prompt>& prompts) {
  std::vector<std::size_t> lens;
  for (const auto& p : prompts) {
    bool seen = false;
    for (auto l : lens) seen = seen || l == p.size();
    if (!seen) lens.push_back(p.size());
  }
  std::sort(lens.begin(), lens.end());
  return lens;
}

// Per-prompt BOS scores, laid out [layer * H + head].
inline std::vector<std::vector<double>> bos_scores_per_prompt(const Checkpoint& ck,
                                                              const std::vector<Prompt>& prompts,
                                                              int threads) {
  const auto& c = ck.config;
  return parallel_map(prompts.size(), threads, [&](std::size_t i) {
    const auto r = forward(ck, prompts[i], InstrumentationSpec::attention());
    std::vector<double> s(c.n_layers * c.n_heads);
    for (const auto& [id, m] : r.trace.attention) {
      s[id.first * c.n_heads + id.second] = bos_head_score(m);
    }
    return s;
  });
}

}  // namespace detail

// Per-dimension L2 norms of every head's attention output over a calibration
// set, laid out [layer][head * d_head + j].
inline std::vector<std::vector<double>> head_activation_norms(const Checkpoint& ck,
                                                              const std::vector<Prompt>& prompts,
                                                              int threads = 1) {
  const auto& c = ck.config;
  InstrumentationSpec spec;
  spec.capture_head_outputs = true;
  auto per_prompt = parallel_map(prompts.size(), threads, [&](std::size_t i) {
    const auto r = forward(ck, prompts[i], spec);
    std::vector<std::vector<double>> sq(c.n_layers, std::vector<double>(c.attn_width(), 0.0));
    for (const auto& [l, out] : r.trace.head_outputs) {
      for (std::size_t t = 0; t < out.rows(); ++t) {
        for (std::size_t j = 0; j < c.attn_width(); ++j) {
          sq[l][j] += static_cast<double>(out(t, j)) * out(t, j);
        }
      }
    }
    return sq;
  });
  std::vector<std::vector<double>> norms(c.n_layers, std::vector<double>(c.attn_width(), 0.0));
  for (const auto& sq : per_prompt) {
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t j = 0; j < c.attn_width(); ++j) norms[l][j] += sq[l][j];
    }
  }
  for (auto& layer : norms) {
    for (auto& v : layer) v = std::sqrt(v);
  }
  return norms;
}

// Runs the forward passes a metric needs over `prompts` and aggregates them
// into a complete table. Prompts may be evaluated concurrently; reductions
// always run in prompt order.
inline ScoreTable scan_model(const Checkpoint& ck, const std::vector<Prompt>& prompts,
                             Metric metric, int threads = 1) {
  const auto& c = ck.config;
  if (prompts.empty() && metric != Metric::mag) {
    throw InputError("scan_model: at least one prompt is required");
  }
  ScoreTable table;
  table.granularity = granularity_of(metric);
  table.metric = to_string(metric);
  table.n_samples = metric == Metric::mag ? 0 : prompts.size();
  table.seq_lens = metric == Metric::mag ? std::vector<std::size_t>{} : detail::prompt_lengths(prompts);
  table.n_layers = c.n_layers;
  table.n_heads = c.n_heads;

  switch (metric) {
    case Metric::bos_head:
    case Metric::bos_layer: {
      const auto per_prompt = detail::bos_scores_per_prompt(ck, prompts, threads);
      std::vector<double> mean(c.n_layers * c.n_heads, 0.0);
      for (const auto& s : per_prompt) {
        for (std::size_t i = 0; i < s.size(); ++i) mean[i] += s[i];
      }
      for (auto& v : mean) v /= static_cast<double>(prompts.size());
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        std::span<const double> heads(mean.data() + l * c.n_heads, c.n_heads);
        if (metric == Metric::bos_head) {
          for (std::size_t h = 0; h < c.n_heads; ++h) table.entries.push_back({l, h, heads[h]});
        } else {
          table.entries.push_back({l, std::nullopt, bos_layer_score(heads)});
        }
      }
      break;
    }
    case Metric::bi: {
      auto per_prompt = parallel_map(prompts.size(), threads, [&](std::size_t i) {
        const auto r = forward(ck, prompts[i], InstrumentationSpec::hidden_states());
        std::vector<CosineSums> sums(c.n_layers);
        for (std::size_t l = 0; l < c.n_layers; ++l) {
          sums[l] = cosine_sums(r.trace.hidden_in.at(l), r.trace.hidden_out.at(l));
        }
        return sums;
      });
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        CosineSums total;
        for (const auto& s : per_prompt) {
          total.sum += s[l].sum;
          total.valid += s[l].valid;
          total.skipped += s[l].skipped;
        }
        const auto bi = block_influence_from(total);
        if (bi.skipped_tokens) {
          table.warnings.push_back("layer " + std::to_string(l) + ": skipped " +
                                   std::to_string(bi.skipped_tokens) + " zero-norm tokens");
        }
        table.entries.push_back({l, std::nullopt, bi.score});
      }
      break;
    }
    case Metric::mag: {
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
          table.entries.push_back({l, h, mag_head_score(wo_slice(ck, l, h))});
        }
      }
      break;
    }
    case Metric::wanda: {
      const auto norms = head_activation_norms(ck, prompts, threads);
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
          std::span<const double> head_norms(norms[l].data() + h * c.d_head, c.d_head);
          table.entries.push_back({l, h, wanda_head_score(wo_slice(ck, l, h), head_norms)});
        }
      }
      break;
    }
  }
  return table;
}

}  // namespace bossink
