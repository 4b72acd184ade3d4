#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bossink/error.hpp"
#include "bossink/metrics.hpp"
#include "bossink/model.hpp"

namespace bossink {

enum class Strategy { bos_head_desc, bos_layer_desc, bi_asc, mag_asc, wanda_asc, bottom_up, top_down };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::bos_head_desc: return "bos_head_desc";
    case Strategy::bos_layer_desc: return "bos_layer_desc";
    case Strategy::bi_asc: return "bi_asc";
    case Strategy::mag_asc: return "mag_asc";
    case Strategy::wanda_asc: return "wanda_asc";
    case Strategy::bottom_up: return "bottom_up";
    case Strategy::top_down: return "top_down";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  for (auto st : {Strategy::bos_head_desc, Strategy::bos_layer_desc, Strategy::bi_asc,
                  Strategy::mag_asc, Strategy::wanda_asc, Strategy::bottom_up, Strategy::top_down}) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown strategy '" + s +
                    "' (expected bos_head_desc, bos_layer_desc, bi_asc, mag_asc, wanda_asc, "
                    "bottom_up, top_down)");
}

inline Granularity granularity_of(Strategy s) {
  switch (s) {
    case Strategy::bos_head_desc:
    case Strategy::mag_asc:
    case Strategy::wanda_asc:
      return Granularity::head;
    default:
      return Granularity::layer;
  }
}

inline bool is_positional(Strategy s) {
  return s == Strategy::bottom_up || s == Strategy::top_down;
}

// Metric a score-based strategy ranks by.
inline Metric metric_of(Strategy s) {
  switch (s) {
    case Strategy::bos_head_desc: return Metric::bos_head;
    case Strategy::bos_layer_desc: return Metric::bos_layer;
    case Strategy::bi_asc: return Metric::bi;
    case Strategy::mag_asc: return Metric::mag;
    case Strategy::wanda_asc: return Metric::wanda;
    default: break;
  }
  throw ConfigError("strategy '" + to_string(s) + "' does not use a score table");
}

struct PruneTarget {
  std::size_t layer = 0;
  std::optional<std::size_t> head;

  friend bool operator==(const PruneTarget&, const PruneTarget&) = default;
};

struct PruneSpec {
  Granularity granularity = Granularity::head;
  Strategy strategy = Strategy::bos_head_desc;
  std::vector<PruneTarget> targets;  // removal order
  double ratio = 0.0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  // Layer protection applies to whole-layer removal only; heads of the
  // first and last layers stay candidates.
  std::set<std::size_t> protected_layers;
  bool heads_protected = false;

  std::vector<HeadId> heads() const {
    std::vector<HeadId> out;
    for (const auto& t : targets) out.emplace_back(t.layer, t.head.value_or(0));
    return out;
  }

  std::vector<std::size_t> layers() const {
    std::vector<std::size_t> out;
    for (const auto& t : targets) out.push_back(t.layer);
    return out;
  }

  friend bool operator==(const PruneSpec&, const PruneSpec&) = default;
};

namespace detail {

inline void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ConfigError("prune ratio " + std::to_string(ratio) + " outside [0, 1]");
  }
}

inline std::size_t units_for_ratio(double ratio, std::size_t denominator) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(denominator) + 1e-9));
}

inline std::size_t layer_budget(double ratio, std::size_t n_layers) {
  const std::size_t count = units_for_ratio(ratio, n_layers);
  const std::size_t candidates = n_layers >= 2 ? n_layers - 2 : 0;
  if (count > candidates) {
    throw ConfigError("prune ratio " + std::to_string(ratio) + " removes " +
                      std::to_string(count) + " of " + std::to_string(n_layers) +
                      " layers but only " + std::to_string(candidates) +
                      " are unprotected");
  }
  return count;
}

inline PruneSpec empty_spec(Strategy s, double ratio, std::size_t n_layers, std::size_t n_heads) {
  PruneSpec spec;
  spec.granularity = granularity_of(s);
  spec.strategy = s;
  spec.ratio = ratio;
  spec.n_layers = n_layers;
  spec.n_heads = n_heads;
  if (n_layers > 0) spec.protected_layers = {0, n_layers - 1};
  return spec;
}

}  // namespace detail

// Bottom-up / top-down layer order; needs no scores.
inline PruneSpec rank_positional(std::size_t n_layers, Strategy strategy, double ratio) {
  if (!is_positional(strategy)) {
    throw ConfigError("strategy '" + to_string(strategy) + "' needs a score table");
  }
  detail::check_ratio(ratio);
  PruneSpec spec = detail::empty_spec(strategy, ratio, n_layers, 0);
  const std::size_t count = detail::layer_budget(ratio, n_layers);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t layer = strategy == Strategy::bottom_up ? 1 + i : n_layers - 2 - i;
    spec.targets.push_back({layer, std::nullopt});
  }
  return spec;
}

// Orders the units of `scores` by redundancy under `strategy` and keeps the
// first floor(ratio * denominator). Descending for BOS scores, ascending for
// the BI / magnitude baselines; ties go to the lower (layer, head).
inline PruneSpec rank_targets(const ScoreTable& scores, Strategy strategy, double ratio) {
  if (is_positional(strategy)) return rank_positional(scores.n_layers, strategy, ratio);
  detail::check_ratio(ratio);
  const Metric wanted = metric_of(strategy);
  if (scores.metric != to_string(wanted) || scores.granularity != granularity_of(strategy)) {
    throw ConfigError("strategy '" + to_string(strategy) + "' needs a '" + to_string(wanted) +
                      "' score table, got '" + scores.metric + "'");
  }
  PruneSpec spec = detail::empty_spec(strategy, ratio, scores.n_layers, scores.n_heads);

  std::vector<ScoreEntry> candidates;
  for (const auto& e : scores.entries) {
    if (std::isnan(e.score)) {
      throw InputError("score table '" + scores.metric + "' contains NaN at layer " +
                       std::to_string(e.layer));
    }
    if (spec.granularity == Granularity::layer && spec.protected_layers.count(e.layer)) continue;
    candidates.push_back(e);
  }
  std::sort(candidates.begin(), candidates.end(), [](const ScoreEntry& a, const ScoreEntry& b) {
    return std::pair(a.layer, a.head.value_or(0)) < std::pair(b.layer, b.head.value_or(0));
  });
  const bool descending = strategy == Strategy::bos_head_desc || strategy == Strategy::bos_layer_desc;
  std::stable_sort(candidates.begin(), candidates.end(),
                   [descending](const ScoreEntry& a, const ScoreEntry& b) {
                     return descending ? a.score > b.score : a.score < b.score;
                   });

  std::size_t count = 0;
  if (spec.granularity == Granularity::head) {
    count = detail::units_for_ratio(ratio, scores.n_layers * scores.n_heads);
    if (count > candidates.size()) {
      throw ConfigError("prune ratio " + std::to_string(ratio) + " asks for " +
                        std::to_string(count) + " heads but the table scores " +
                        std::to_string(candidates.size()));
    }
  } else {
    count = detail::layer_budget(ratio, scores.n_layers);
    count = std::min(count, candidates.size());
  }
  for (std::size_t i = 0; i < count; ++i) {
    spec.targets.push_back({candidates[i].layer, candidates[i].head});
  }
  return spec;
}

// Zeroes the output-projection row-block of every listed head. Shapes are
// unchanged; nothing outside those rows is touched.
inline Checkpoint ablate_heads(const Checkpoint& ck, const std::vector<HeadId>& heads) {
  const auto& c = ck.config;
  for (const auto& [l, h] : heads) {
    if (l >= c.n_layers || h >= c.n_heads) {
      throw IndexError("ablate_heads: head (" + std::to_string(l) + "," + std::to_string(h) +
                       ") out of range for " + std::to_string(c.n_layers) + " layers x " +
                       std::to_string(c.n_heads) + " heads");
    }
  }
  Checkpoint out = ck;
  std::string record = "ablate_heads";
  for (const auto& [l, h] : heads) {
    auto& wo = out.blocks[l].wo;
    for (std::size_t j = 0; j < c.d_head; ++j) {
      auto row = wo.row(h * c.d_head + j);
      std::fill(row.begin(), row.end(), 0.0f);
    }
    record += " " + std::to_string(l) + ":" + std::to_string(h);
  }
  if (heads.empty()) record += " (none)";
  out.provenance.push_back(record);
  return out;
}

// Removes whole blocks and renumbers the rest in their original order.
inline Checkpoint drop_layers(const Checkpoint& ck, const std::vector<std::size_t>& layers) {
  const std::size_t L = ck.config.n_layers;
  std::set<std::size_t> drop;
  for (auto l : layers) {
    if (l >= L) {
      throw IndexError("drop_layers: layer " + std::to_string(l) + " out of range for " +
                       std::to_string(L) + " layers");
    }
    if (l == 0 || l == L - 1) {
      throw PolicyError("drop_layers: layer " + std::to_string(l) +
                        " is protected (first and last layers are never dropped)");
    }
    if (!drop.insert(l).second) {
      throw IndexError("drop_layers: layer " + std::to_string(l) + " listed twice");
    }
  }
  if (L - drop.size() < 3) {
    throw PolicyError("drop_layers: dropping " + std::to_string(drop.size()) + " of " +
                      std::to_string(L) + " layers would leave fewer than 3");
  }
  Checkpoint out = ck;
  out.blocks.clear();
  std::string kept;
  for (std::size_t l = 0; l < L; ++l) {
    if (drop.count(l)) continue;
    out.blocks.push_back(ck.blocks[l]);
    kept += (kept.empty() ? "" : ",") + std::to_string(l);
  }
  out.config.n_layers = out.blocks.size();
  std::string record = "drop_layers";
  for (auto l : layers) record += " " + std::to_string(l);
  if (layers.empty()) record += " (none)";
  record += " of " + std::to_string(L) + " kept=" + kept;
  out.provenance.push_back(record);
  return out;
}

// Zeroes every weight of the listed blocks, turning each into the identity
// on the residual stream while keeping the layer count. Protected layers are
// allowed; this is an analysis tool, not a pruning strategy.
inline Checkpoint zero_layers(const Checkpoint& ck, const std::vector<std::size_t>& layers) {
  Checkpoint out = ck;
  std::string record = "zero_layers";
  for (auto l : layers) {
    if (l >= ck.config.n_layers) {
      throw IndexError("zero_layers: layer " + std::to_string(l) + " out of range");
    }
    BlockWeights::for_each(out.blocks[l], [](const char*, Tensor& t) { t.fill(0.0f); });
    record += " " + std::to_string(l);
  }
  out.provenance.push_back(record);
  return out;
}

inline Checkpoint apply_prune(const Checkpoint& ck, const PruneSpec& spec) {
  Checkpoint out = spec.granularity == Granularity::head ? ablate_heads(ck, spec.heads())
                                                         : drop_layers(ck, spec.layers());
  char ratio[32];
  std::snprintf(ratio, sizeof ratio, "%.9g", spec.ratio);
  out.provenance.push_back("prune strategy=" + to_string(spec.strategy) + " ratio=" + ratio +
                           " removed=" + std::to_string(spec.targets.size()));
  return out;
}

}  // namespace bossink
