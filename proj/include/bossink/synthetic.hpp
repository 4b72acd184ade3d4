#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "bossink/error.hpp"
#include "bossink/model.hpp"

namespace bossink {

// Roles a fixture head can be planted with.
//   sink      attends to position 0 from every query
//   diagonal  attends to itself
//   uniform   zero scores, uniform over the causal prefix
//   routing   uniform everywhere except at query-marker tokens, where it
//             attends to position 0 and copies that token's identity into
//             the answer subspace read by the LM head
//   random    data-dependent query with no planted structure
enum class HeadRole { sink, diagonal, uniform, routing, random };

inline std::string to_string(HeadRole r) {
  switch (r) {
    case HeadRole::sink: return "sink";
    case HeadRole::diagonal: return "diagonal";
    case HeadRole::uniform: return "uniform";
    case HeadRole::routing: return "routing";
    case HeadRole::random: return "random";
  }
  return "?";
}

inline HeadRole head_role_from_string(const std::string& s) {
  if (s == "sink") return HeadRole::sink;
  if (s == "diagonal") return HeadRole::diagonal;
  if (s == "uniform") return HeadRole::uniform;
  if (s == "routing") return HeadRole::routing;
  if (s == "random") return HeadRole::random;
  throw ConfigError("unknown head role '" + s + "'");
}

struct PlantedHead {
  std::size_t layer = 0;
  std::size_t head = 0;
  HeadRole role = HeadRole::sink;
};

// What unplanted weights look like.
//   zero           unplanted heads and all MLPs contribute nothing
//   random         every weight Gaussian, planted heads written on top
//   random_values  zero queries everywhere (uniform attention) but random
//                  values, output projections and MLPs
enum class Background { zero, random, random_values };

struct SinkRecipe {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<PlantedHead> heads;
  Background background = Background::zero;
};

// Token whose presence switches routing heads on.
inline constexpr TokenId kQueryMarker = '?';

// Architecture of the planted fixtures. rope_theta is low so the slowest
// rotary pair turns by less than one radian over max_seq_len.
inline ModelConfig planted_fixture_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 64;
  c.n_heads = 8;
  c.n_kv_heads = 2;
  c.d_head = 16;
  c.d_ff = 128;
  c.vocab_size = 256;
  c.rope_theta = 256.0;
  c.norm_eps = 1e-6f;
  c.max_seq_len = 128;
  return c;
}

inline ModelConfig random_fixture_config() {
  ModelConfig c = planted_fixture_config();
  c.rope_theta = 10000.0;
  return c;
}

// Two sink heads and one routing head behind them.
inline SinkRecipe default_planted_recipe(std::uint64_t seed = 0) {
  SinkRecipe r;
  r.config = planted_fixture_config();
  r.seed = seed;
  r.heads = {{1, 5, HeadRole::sink}, {2, 0, HeadRole::sink}, {3, 1, HeadRole::routing}};
  return r;
}

inline SinkRecipe uniform_recipe(std::uint64_t seed = 0) {
  SinkRecipe r;
  r.config = planted_fixture_config();
  r.seed = seed;
  r.background = Background::random_values;
  return r;
}

inline SinkRecipe random_recipe(std::uint64_t seed = 0) {
  SinkRecipe r;
  r.config = random_fixture_config();
  r.seed = seed;
  r.background = Background::random;
  return r;
}

// Residual-stream layout used by planted heads.
struct PlantedLayout {
  std::size_t constant = 0;
  std::size_t marker = 1;
  std::size_t sink_scratch = 2;
  std::size_t misc_scratch = 3;
  std::size_t token_begin = 4;
  std::size_t answer_begin = 0;
  std::size_t width = 0;  // dims per token / answer subspace

  static PlantedLayout for_config(const ModelConfig& c) {
    PlantedLayout l;
    l.width = std::min(c.d_head - 1, (c.d_model - 4) / 2);
    l.answer_begin = l.token_begin + l.width;
    return l;
  }
};

namespace detail {

inline void fill_normal(Tensor& t, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<float>(dist(rng));
}

inline void check_recipe(const SinkRecipe& r) {
  const auto& c = r.config;
  c.validate();
  if (r.heads.size() > c.n_layers * c.n_heads) {
    throw ConfigError("recipe: " + std::to_string(r.heads.size()) +
                      " planted heads exceed the " + std::to_string(c.n_layers * c.n_heads) +
                      " heads of the model");
  }
  std::set<HeadId> seen;
  std::size_t last_positional = 0, first_routing = c.n_layers;
  bool any_positional = false;
  for (const auto& p : r.heads) {
    if (p.layer >= c.n_layers || p.head >= c.n_heads) {
      throw ConfigError("recipe: planted head (" + std::to_string(p.layer) + "," +
                        std::to_string(p.head) + ") out of range");
    }
    if (!seen.insert({p.layer, p.head}).second) {
      throw ConfigError("recipe: head (" + std::to_string(p.layer) + "," +
                        std::to_string(p.head) + ") planted twice");
    }
    if (p.role == HeadRole::routing) first_routing = std::min(first_routing, p.layer);
    if (p.role == HeadRole::sink || p.role == HeadRole::diagonal) {
      any_positional = true;
      last_positional = std::max(last_positional, p.layer);
    }
  }
  if (any_positional && first_routing < last_positional) {
    throw ConfigError("recipe: routing heads must not precede sink or diagonal heads");
  }
  if (!r.heads.empty()) {
    if (c.d_head < 4 || c.d_model < 8) {
      throw ConfigError("recipe: planted heads need d_head >= 4 and d_model >= 8");
    }
    if (c.vocab_size <= static_cast<std::size_t>(kQueryMarker)) {
      throw ConfigError("recipe: vocabulary too small for the query marker token");
    }
  }
}

}  // namespace detail

// Builds a deterministic checkpoint from `recipe`.
//
// Every embedding row has the same norm and carries a constant channel, so
// with a zero background the normalized constant channel is identical at
// every position of every planted layer. Keys read that channel into the
// slowest rotary pair; the query sign then makes the score an increasing
// (sink) or decreasing (diagonal) function of query-key distance, with a
// margin of at least kMargin logits between neighbouring keys up to
// max_seq_len.
inline Checkpoint build_synthetic_model(const SinkRecipe& recipe) {
  detail::check_recipe(recipe);
  const auto& c = recipe.config;
  std::mt19937_64 rng(recipe.seed);
  Checkpoint ck = zero_checkpoint(c);
  const bool random_bg = recipe.background != Background::zero;

  const double s_model = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  const double s_attn = 1.0 / std::sqrt(static_cast<double>(c.attn_width()));
  const double s_ff = 1.0 / std::sqrt(static_cast<double>(c.d_ff));

  if (random_bg) {
    detail::fill_normal(ck.embedding, rng, 1.0);
    detail::fill_normal(ck.lm_head, rng, s_model);
    for (auto& b : ck.blocks) {
      if (recipe.background == Background::random) detail::fill_normal(b.wq, rng, s_model);
      detail::fill_normal(b.wk, rng, s_model);
      detail::fill_normal(b.wv, rng, s_model);
      detail::fill_normal(b.wo, rng, 0.5 * s_attn);
      detail::fill_normal(b.w_up, rng, s_model);
      detail::fill_normal(b.w_gate, rng, s_model);
      detail::fill_normal(b.w_down, rng, 0.5 * s_ff);
    }
  }

  const bool layout_needed = !recipe.heads.empty() || !random_bg;
  if (!layout_needed) {
    ck.provenance.push_back("synthetic seed=" + std::to_string(recipe.seed));
    return ck;
  }

  const PlantedLayout lay = PlantedLayout::for_config(c);
  const std::size_t dh = c.d_head;

  if (!random_bg) {
    // Equal-norm embeddings: constant channel, marker channel, token vector.
    const double total_sq = static_cast<double>(c.d_model);
    const double konst = std::sqrt(total_sq) / 2.0;
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> tv(lay.width);
    Tensor tokvec = Tensor::matrix(c.vocab_size, lay.width);
    for (std::size_t v = 0; v < c.vocab_size; ++v) {
      double nrm = 0.0;
      for (auto& x : tv) {
        x = gauss(rng);
        nrm += x * x;
      }
      nrm = std::sqrt(nrm);
      for (std::size_t i = 0; i < lay.width; ++i) tokvec(v, i) = static_cast<float>(tv[i] / nrm);
    }
    for (std::size_t v = 0; v < c.vocab_size; ++v) {
      const bool is_marker = static_cast<TokenId>(v) == kQueryMarker;
      const double marker = is_marker ? konst : 0.0;
      const double r = std::sqrt(total_sq - konst * konst - marker * marker);
      ck.embedding(v, lay.constant) = static_cast<float>(konst);
      ck.embedding(v, lay.marker) = static_cast<float>(marker);
      for (std::size_t i = 0; i < lay.width; ++i) {
        ck.embedding(v, lay.token_begin + i) = static_cast<float>(r * tokvec(v, i));
      }
    }
    // LM head reads the answer subspace against each token's direction.
    constexpr float kReadout = 4.0f;
    for (std::size_t i = 0; i < lay.width; ++i) {
      for (std::size_t v = 0; v < c.vocab_size; ++v) {
        ck.lm_head(lay.answer_begin + i, v) = kReadout * tokvec(v, i);
      }
    }
  }

  if (recipe.heads.empty()) {
    ck.provenance.push_back("synthetic seed=" + std::to_string(recipe.seed));
    return ck;
  }

  // Positional gain: neighbouring keys differ by at least kMargin logits.
  constexpr double kMargin = 16.0;
  const double theta = rope_frequency(dh / 2 - 1, dh, c.rope_theta);
  const double sweep = static_cast<double>(c.max_seq_len - 1) * theta;
  if (sweep > 1.2) {
    throw ConfigError("recipe: rope_theta " + std::to_string(c.rope_theta) +
                      " turns the slowest rotary pair by " + std::to_string(sweep) +
                      " rad over max_seq_len; planted heads need <= 1.2");
  }
  const double gain = kMargin / (theta * std::max(std::cos(sweep), 1e-3));
  // Normalized constant channel is sqrt(d)/2 / rms; allow rms up to 1.25.
  const double channel = (std::sqrt(static_cast<double>(c.d_model)) / 2.0) / 1.25;
  const float w = static_cast<float>(std::sqrt(gain * std::sqrt(static_cast<double>(dh))) / channel);
  const std::size_t re = dh - 2, im = dh - 1;  // slowest rotary pair
  constexpr float kScratchWrite = 0.125f;

  std::set<std::size_t> planted_layers;
  for (const auto& p : recipe.heads) planted_layers.insert(p.layer);
  for (std::size_t l : planted_layers) {
    auto& b = ck.blocks[l];
    for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
      const std::size_t ko = g * dh;
      for (std::size_t r = 0; r < c.d_model; ++r) {
        for (std::size_t i = 0; i < dh; ++i) {
          b.wk(r, ko + i) = 0.0f;
          b.wv(r, ko + i) = 0.0f;
        }
      }
      b.wk(lay.constant, ko + re) = w;
      b.wv(lay.constant, ko + 0) = 1.0f;
      for (std::size_t i = 0; i < lay.width; ++i) b.wv(lay.token_begin + i, ko + 1 + i) = 1.0f;
    }
  }

  for (const auto& p : recipe.heads) {
    auto& b = ck.blocks[p.layer];
    const std::size_t qo = p.head * dh;
    for (std::size_t r = 0; r < c.d_model; ++r) {
      for (std::size_t i = 0; i < dh; ++i) b.wq(r, qo + i) = 0.0f;
    }
    for (std::size_t j = 0; j < dh; ++j) {
      for (std::size_t o = 0; o < c.d_model; ++o) b.wo(qo + j, o) = 0.0f;
    }
    switch (p.role) {
      case HeadRole::sink:
        b.wq(lay.constant, qo + im) = -w;
        b.wo(qo + 0, lay.sink_scratch) = kScratchWrite;
        break;
      case HeadRole::diagonal:
        b.wq(lay.constant, qo + im) = w;
        b.wo(qo + 0, lay.misc_scratch) = kScratchWrite;
        break;
      case HeadRole::uniform:
        b.wo(qo + 0, lay.misc_scratch) = kScratchWrite;
        break;
      case HeadRole::random: {
        std::normal_distribution<double> dist(0.0, 0.5);
        for (std::size_t i = 0; i < lay.width; ++i) {
          for (std::size_t j = 0; j < dh; ++j) {
            b.wq(lay.token_begin + i, qo + j) = static_cast<float>(dist(rng));
          }
        }
        b.wo(qo + 0, lay.misc_scratch) = kScratchWrite;
        break;
      }
      case HeadRole::routing:
        b.wq(lay.marker, qo + im) = -w;
        for (std::size_t i = 0; i < lay.width; ++i) b.wo(qo + 1 + i, lay.answer_begin + i) = 1.0f;
        break;
    }
  }

  std::string record = "synthetic seed=" + std::to_string(recipe.seed) + " planted=";
  for (std::size_t i = 0; i < recipe.heads.size(); ++i) {
    const auto& p = recipe.heads[i];
    if (i) record += ",";
    record += to_string(p.role) + "@" + std::to_string(p.layer) + ":" + std::to_string(p.head);
  }
  ck.provenance.push_back(record);
  return ck;
}

// Random embedding and LM head around all-zero blocks: every block is the
// identity on the residual stream.
inline Checkpoint build_zero_block_model(const ModelConfig& config, std::uint64_t seed) {
  Checkpoint ck = zero_checkpoint(config);
  std::mt19937_64 rng(seed);
  detail::fill_normal(ck.embedding, rng, 1.0);
  detail::fill_normal(ck.lm_head, rng, 1.0 / std::sqrt(static_cast<double>(config.d_model)));
  for (auto& b : ck.blocks) {
    b.attn_norm.fill(0.0f);
    b.mlp_norm.fill(0.0f);
  }
  ck.provenance.push_back("zero-block seed=" + std::to_string(seed));
  return ck;
}

}  // namespace bossink
