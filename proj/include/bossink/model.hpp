#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bossink/error.hpp"
#include "bossink/tensor.hpp"

namespace bossink {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 8;
  std::size_t n_kv_heads = 2;
  std::size_t d_head = 16;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 256;
  double rope_theta = 10000.0;
  float norm_eps = 1e-6f;
  std::size_t max_seq_len = 128;

  std::size_t attn_width() const { return n_heads * d_head; }
  std::size_t kv_width() const { return n_kv_heads * d_head; }
  std::size_t group_size() const { return n_heads / n_kv_heads; }
  std::size_t kv_head_of(std::size_t head) const { return head / group_size(); }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (n_layers < 3) fail("n_layers must be >= 3");
    if (d_model == 0 || d_head == 0 || d_ff == 0 || vocab_size == 0) {
      fail("dimensions must be positive");
    }
    if (n_heads == 0 || n_kv_heads == 0) fail("head counts must be positive");
    if (n_heads % n_kv_heads != 0) fail("n_heads must be a multiple of n_kv_heads");
    if (d_head % 2 != 0) fail("d_head must be even for rotary embeddings");
    if (max_seq_len == 0) fail("max_seq_len must be positive");
    if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) fail("rope_theta must be positive");
    if (!(norm_eps >= 0.0f) || !std::isfinite(norm_eps)) fail("norm_eps must be non-negative");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Weights of one pre-norm block. Projections are stored input-major, so
// y = x * W. Row-block h of `wo` (rows h*d_head .. (h+1)*d_head-1) is the
// output-projection slice of query head h.
struct BlockWeights {
  Tensor attn_norm;
  Tensor wq;
  Tensor wk;
  Tensor wv;
  Tensor wo;
  Tensor mlp_norm;
  Tensor w_up;
  Tensor w_gate;
  Tensor w_down;

  static BlockWeights zeros(const ModelConfig& c) {
    BlockWeights b;
    b.attn_norm = Tensor::vector(c.d_model);
    b.attn_norm.fill(1.0f);
    b.wq = Tensor::matrix(c.d_model, c.attn_width());
    b.wk = Tensor::matrix(c.d_model, c.kv_width());
    b.wv = Tensor::matrix(c.d_model, c.kv_width());
    b.wo = Tensor::matrix(c.attn_width(), c.d_model);
    b.mlp_norm = Tensor::vector(c.d_model);
    b.mlp_norm.fill(1.0f);
    b.w_up = Tensor::matrix(c.d_model, c.d_ff);
    b.w_gate = Tensor::matrix(c.d_model, c.d_ff);
    b.w_down = Tensor::matrix(c.d_ff, c.d_model);
    return b;
  }

  // Visits (suffix, tensor) in canonical serialization order.
  template <typename Self, typename Fn>
  static void for_each(Self& self, Fn&& fn) {
    fn("wq", self.wq);
    fn("wk", self.wk);
    fn("wv", self.wv);
    fn("wo", self.wo);
    fn("attn_norm", self.attn_norm);
    fn("mlp_norm", self.mlp_norm);
    fn("w_up", self.w_up);
    fn("w_gate", self.w_gate);
    fn("w_down", self.w_down);
  }

  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

struct Checkpoint {
  ModelConfig config;
  Tensor embedding;  // [vocab x d_model]
  std::vector<BlockWeights> blocks;
  Tensor final_norm;  // [d_model]
  Tensor lm_head;     // [d_model x vocab]
  std::vector<std::string> provenance;

  // Shape and finiteness check of every tensor against `config`.
  void validate() const {
    config.validate();
    const auto& c = config;
    auto expect = [](const Tensor& t, const Shape& shape, const std::string& name) {
      if (t.shape() != shape) {
        throw DimensionError("checkpoint: tensor '" + name + "' has shape " +
                             shape_str(t.shape()) + ", expected " + shape_str(shape));
      }
      if (!t.all_finite()) {
        throw CorruptWeightsError("checkpoint: tensor '" + name +
                                  "' contains NaN or Inf");
      }
    };
    expect(embedding, {c.vocab_size, c.d_model}, "embedding");
    if (blocks.size() != c.n_layers) {
      throw DimensionError("checkpoint: " + std::to_string(blocks.size()) +
                           " blocks for n_layers=" + std::to_string(c.n_layers));
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      expect(b.attn_norm, {c.d_model}, p + "attn_norm");
      expect(b.wq, {c.d_model, c.attn_width()}, p + "wq");
      expect(b.wk, {c.d_model, c.kv_width()}, p + "wk");
      expect(b.wv, {c.d_model, c.kv_width()}, p + "wv");
      expect(b.wo, {c.attn_width(), c.d_model}, p + "wo");
      expect(b.mlp_norm, {c.d_model}, p + "mlp_norm");
      expect(b.w_up, {c.d_model, c.d_ff}, p + "w_up");
      expect(b.w_gate, {c.d_model, c.d_ff}, p + "w_gate");
      expect(b.w_down, {c.d_ff, c.d_model}, p + "w_down");
    }
    expect(final_norm, {c.d_model}, "final_norm");
    expect(lm_head, {c.d_model, c.vocab_size}, "lm_head");
  }

  // Tensors are compared bitwise; provenance is ignored.
  bool same_weights(const Checkpoint& other) const {
    return config == other.config && embedding == other.embedding &&
           blocks == other.blocks && final_norm == other.final_norm &&
           lm_head == other.lm_head;
  }
};

inline Checkpoint zero_checkpoint(const ModelConfig& config) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  ck.embedding = Tensor::matrix(config.vocab_size, config.d_model);
  ck.blocks.assign(config.n_layers, BlockWeights::zeros(config));
  ck.final_norm = Tensor::vector(config.d_model);
  ck.final_norm.fill(1.0f);
  ck.lm_head = Tensor::matrix(config.d_model, config.vocab_size);
  return ck;
}

// W_O slice of query head `head`: a [d_head x d_model] copy.
inline Tensor wo_slice(const Checkpoint& ck, std::size_t layer, std::size_t head) {
  const auto& c = ck.config;
  if (layer >= c.n_layers || head >= c.n_heads) {
    throw IndexError("wo_slice: head (" + std::to_string(layer) + "," +
                     std::to_string(head) + ") out of range");
  }
  const Tensor& wo = ck.blocks[layer].wo;
  Tensor slice = Tensor::matrix(c.d_head, c.d_model);
  for (std::size_t j = 0; j < c.d_head; ++j) {
    auto src = wo.row(head * c.d_head + j);
    std::copy(src.begin(), src.end(), slice.row(j).begin());
  }
  return slice;
}

struct InstrumentationSpec {
  bool capture_attention = false;
  bool capture_hidden_states = false;
  // Per-head attention outputs before the output projection, [T x H*d_head].
  bool capture_head_outputs = false;
  std::optional<std::vector<std::size_t>> layers;  // default: all layers

  static InstrumentationSpec attention() {
    InstrumentationSpec s;
    s.capture_attention = true;
    return s;
  }
  static InstrumentationSpec hidden_states() {
    InstrumentationSpec s;
    s.capture_hidden_states = true;
    return s;
  }
  static InstrumentationSpec none() { return {}; }

  bool wants_layer(std::size_t layer) const {
    if (!layers) return true;
    for (auto l : *layers) {
      if (l == layer) return true;
    }
    return false;
  }
};

using HeadId = std::pair<std::size_t, std::size_t>;  // (layer, head)

struct AttentionTrace {
  std::size_t seq_len = 0;
  std::map<HeadId, Tensor> attention;            // [T x T] post-softmax
  std::map<std::size_t, Tensor> hidden_in;       // block input,  [T x d_model]
  std::map<std::size_t, Tensor> hidden_out;      // block output, [T x d_model]
  std::map<std::size_t, Tensor> head_outputs;    // [T x H*d_head]
};

struct ForwardResult {
  Tensor logits;  // [T x vocab]
  AttentionTrace trace;
};

namespace detail {

inline Tensor project(const Tensor& x, const Tensor& w) { return matmul(x, w); }

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

// Grouped-query causal attention over normalized input `h`. Returns the
// concatenated per-head outputs [T x H*d_head].
inline Tensor attention_heads(const ModelConfig& c, const BlockWeights& b, const Tensor& h,
                              std::size_t layer, bool capture,
                              std::map<HeadId, Tensor>* maps) {
  const std::size_t T = h.rows();
  Tensor q = project(h, b.wq);
  Tensor k = project(h, b.wk);
  const Tensor v = project(h, b.wv);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      rope_rotate_inplace(q.row(t).subspan(hd * c.d_head, c.d_head), t, c.rope_theta);
    }
    for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
      rope_rotate_inplace(k.row(t).subspan(g * c.d_head, c.d_head), t, c.rope_theta);
    }
  }
  const float scale = 1.0f / std::sqrt(static_cast<float>(c.d_head));
  Tensor out = Tensor::matrix(T, c.attn_width());
  Tensor scores = Tensor::matrix(T, T);
  for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
    const std::size_t g = c.kv_head_of(hd);
    const std::size_t qo = hd * c.d_head, ko = g * c.d_head;
    scores.fill(0.0f);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t s = 0; s <= t; ++s) {
        float dot = 0.0f;
        for (std::size_t i = 0; i < c.d_head; ++i) dot += q(t, qo + i) * k(s, ko + i);
        scores(t, s) = dot * scale;
      }
    }
    Tensor probs = masked_softmax_rows(scores, true);
    for (std::size_t t = 0; t < T; ++t) {
      float* o = &out(t, qo);
      for (std::size_t s = 0; s <= t; ++s) {
        const float p = probs(t, s);
        for (std::size_t i = 0; i < c.d_head; ++i) o[i] += p * v(s, ko + i);
      }
    }
    if (capture) maps->emplace(HeadId{layer, hd}, std::move(probs));
  }
  return out;
}

inline void add_inplace(Tensor& x, const Tensor& delta) {
  auto xd = x.data();
  auto dd = delta.data();
  for (std::size_t i = 0; i < xd.size(); ++i) xd[i] += dd[i];
}

}  // namespace detail

// Runs one pre-norm block on the residual stream `x` in place:
//   x += Attn(RMSNorm(x));  x += MLP(RMSNorm(x))
inline void forward_block(const ModelConfig& c, const BlockWeights& b, std::size_t layer,
                          Tensor& x, const InstrumentationSpec& spec, AttentionTrace& trace) {
  const bool here = spec.wants_layer(layer);
  if (here && spec.capture_hidden_states) trace.hidden_in.emplace(layer, x);

  const Tensor h = rmsnorm_rows(x, b.attn_norm, c.norm_eps);
  Tensor heads = detail::attention_heads(c, b, h, layer, here && spec.capture_attention,
                                         &trace.attention);
  detail::add_inplace(x, matmul(heads, b.wo));
  if (here && spec.capture_head_outputs) trace.head_outputs.emplace(layer, std::move(heads));

  const Tensor h2 = rmsnorm_rows(x, b.mlp_norm, c.norm_eps);
  Tensor gate = matmul(h2, b.w_gate);
  const Tensor up = matmul(h2, b.w_up);
  auto gd = gate.data();
  auto ud = up.data();
  for (std::size_t i = 0; i < gd.size(); ++i) gd[i] = detail::silu(gd[i]) * ud[i];
  detail::add_inplace(x, matmul(gate, b.w_down));

  if (here && spec.capture_hidden_states) trace.hidden_out.emplace(layer, x);
}

inline void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > c.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= c.vocab_size) {
      throw InputError("forward: token id " + std::to_string(tokens[t]) +
                       " at position " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(c.vocab_size));
    }
  }
}

inline Tensor embed(const Checkpoint& ck, std::span<const TokenId> tokens) {
  Tensor x = Tensor::matrix(tokens.size(), ck.config.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto src = ck.embedding.row(static_cast<std::size_t>(tokens[t]));
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  return x;
}

inline Tensor lm_logits(const Checkpoint& ck, const Tensor& x) {
  return matmul(rmsnorm_rows(x, ck.final_norm, ck.config.norm_eps), ck.lm_head);
}

// Prefill forward pass over the whole prompt. Position 0 is the BOS position
// whatever its token id. Captured attention maps are the post-softmax causal
// [T x T] probabilities of every requested layer and head.
inline ForwardResult forward(const Checkpoint& ck, std::span<const TokenId> tokens,
                             const InstrumentationSpec& spec = {}) {
  const auto& c = ck.config;
  check_tokens(c, tokens);
  if (spec.layers) {
    for (auto l : *spec.layers) {
      if (l >= c.n_layers) {
        throw IndexError("forward: instrumented layer " + std::to_string(l) +
                         " out of range");
      }
    }
  }
  ForwardResult r;
  r.trace.seq_len = tokens.size();
  Tensor x = embed(ck, tokens);
  for (std::size_t l = 0; l < ck.blocks.size(); ++l) {
    forward_block(c, ck.blocks[l], l, x, spec, r.trace);
  }
  r.logits = lm_logits(ck, x);
  return r;
}

}  // namespace bossink
