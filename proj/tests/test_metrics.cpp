#include <gtest/gtest.h>

#include <random>

#include "bossink/metrics.hpp"
#include "bossink/synthetic.hpp"

using namespace bossink;

namespace {

Tensor bos_map(std::size_t T) {
  Tensor m = Tensor::matrix(T, T);
  for (std::size_t t = 0; t < T; ++t) m(t, 0) = 1.0f;
  return m;
}

Tensor uniform_map(std::size_t T) {
  Tensor m = Tensor::matrix(T, T);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k <= t; ++k) m(t, k) = 1.0f / static_cast<float>(t + 1);
  return m;
}

Tensor random_causal_map(std::size_t T, std::mt19937& rng) {
  Tensor s = Tensor::matrix(T, T);
  std::normal_distribution<float> d(0.0f, 3.0f);
  for (auto& v : s.data()) v = d(rng);
  return masked_softmax_rows(s, true);
}

std::vector<Prompt> random_prompts(std::size_t n, std::size_t T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Prompt> p(n, Prompt(T));
  for (auto& pr : p)
    for (auto& t : pr) t = static_cast<TokenId>(rng() % 256);
  return p;
}

}  // namespace

TEST(SinkScore, Examples) {
  EXPECT_DOUBLE_EQ(sink_score(bos_map(6), 0), 1.0);
  EXPECT_DOUBLE_EQ(sink_score(Tensor::identity(5), 0), 1.0 / 5.0);
  EXPECT_NEAR(sink_score(uniform_map(4), 0), 25.0 / 48.0, 1e-7);
}

TEST(SinkScore, Errors) {
  EXPECT_THROW(sink_score(uniform_map(4), 4), IndexError);
  EXPECT_THROW(sink_score(Tensor::matrix(2, 3), 0), DimensionError);
}

TEST(SinkScore, ColumnScoresSumToOne) {
  std::mt19937 rng(1);
  for (int i = 0; i < 10; ++i) {
    const Tensor m = random_causal_map(1 + i * 5, rng);
    double s = 0.0;
    for (std::size_t k = 0; k < m.rows(); ++k) s += sink_score(m, k);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(BosHeadScore, Aggregation) {
  const Tensor maps_a[] = {uniform_map(4)};
  EXPECT_EQ(bos_head_score(maps_a), sink_score(uniform_map(4), 0));
  // Scores 0.2 and 0.8 from maps with 20% / 80% of every row on BOS.
  Tensor a = Tensor::matrix(5, 5), b = Tensor::matrix(5, 5);
  for (std::size_t t = 0; t < 5; ++t) {
    a(t, 0) = t ? 0.2f : 1.0f;
    b(t, 0) = t ? 0.8f : 1.0f;
    if (t) {
      a(t, t) = 0.8f;
      b(t, t) = 0.2f;
    }
  }
  const double sa = bos_head_score(a), sb = bos_head_score(b);
  const Tensor both[] = {a, b};
  EXPECT_NEAR(bos_head_score(both), (sa + sb) / 2.0, 1e-12);
  EXPECT_THROW(bos_head_score(std::span<const Tensor>{}), InputError);
}

TEST(BosHeadScore, IgnoresNonBosColumnPermutation) {
  std::mt19937 rng(2);
  const Tensor m = random_causal_map(8, rng);
  Tensor p = m;
  for (std::size_t t = 0; t < 8; ++t) {
    // reverse columns 1..t within each row
    for (std::size_t k = 1; k <= t; ++k) p(t, k) = m(t, t + 1 - k);
  }
  EXPECT_EQ(bos_head_score(m), bos_head_score(p));
}

TEST(BosLayerScore, Examples) {
  const double a[] = {1, 1, 1, 1}, b[] = {0, 1}, c[] = {0.1, 0.2, 0.6};
  EXPECT_DOUBLE_EQ(bos_layer_score(a), 1.0);
  EXPECT_DOUBLE_EQ(bos_layer_score(b), 0.5);
  EXPECT_NEAR(bos_layer_score(c), 0.3, 1e-12);
  EXPECT_THROW(bos_layer_score(std::span<const double>{}), InputError);
}

TEST(BlockInfluence, Identities) {
  std::mt19937 rng(3);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor x = Tensor::matrix(6, 4);
  for (auto& v : x.data()) v = d(rng);
  Tensor neg = x, orth = Tensor::matrix(6, 4);
  for (auto& v : neg.data()) v = -v;
  for (std::size_t t = 0; t < 6; ++t) {
    orth(t, 0) = -x(t, 1);
    orth(t, 1) = x(t, 0);
    orth(t, 2) = -x(t, 3);
    orth(t, 3) = x(t, 2);
  }
  EXPECT_NEAR(block_influence(x, x).score, 0.0, 1e-6);
  EXPECT_NEAR(block_influence(x, neg).score, 2.0, 1e-6);
  EXPECT_NEAR(block_influence(x, orth).score, 1.0, 1e-6);
}

TEST(BlockInfluence, ScaleInvariant) {
  std::mt19937 rng(4);
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor a = Tensor::matrix(5, 8), b = Tensor::matrix(5, 8);
  for (auto& v : a.data()) v = d(rng);
  for (auto& v : b.data()) v = d(rng);
  Tensor a2 = a, b2 = b;
  for (auto& v : a2.data()) v *= 4.0f;
  for (auto& v : b2.data()) v *= 4.0f;
  EXPECT_NEAR(block_influence(a, b).score, block_influence(a2, b2).score, 1e-9);
}

TEST(BlockInfluence, ZeroRows) {
  Tensor a({2, 2}, {1, 0, 0, 0}), b({2, 2}, {1, 0, 3, 3});
  const auto bi = block_influence(a, b);
  EXPECT_NEAR(bi.score, 0.0, 1e-12);
  EXPECT_EQ(bi.skipped_tokens, 1u);
  EXPECT_THROW(block_influence(Tensor::matrix(2, 2), b), UndefinedScoreError);
  EXPECT_THROW(block_influence(Tensor::matrix(2, 2), Tensor::matrix(2, 3)), DimensionError);
}

TEST(BlockInfluence, PoolsTokensAcrossPrompts) {
  // Prompt 1: one token with cosine 1; prompt 2: three tokens with cosine -1.
  const std::pair<Tensor, Tensor> pairs[] = {
      {Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {2, 0})},
      {Tensor({3, 2}, {1, 0, 0, 1, 1, 1}), Tensor({3, 2}, {-1, 0, 0, -1, -1, -1})}};
  EXPECT_NEAR(block_influence(pairs).score, 1.0 - (1.0 - 3.0) / 4.0, 1e-12);
}

TEST(MagScore, Examples) {
  EXPECT_EQ(mag_head_score(Tensor::matrix(2, 3)), 0.0);
  Tensor ones = Tensor::matrix(2, 3);
  ones.fill(1.0f);
  EXPECT_EQ(mag_head_score(ones), 6.0);
  EXPECT_EQ(mag_head_score(Tensor({2, 2}, {1, -2, 3, -4})), 10.0);
}

TEST(WandaScore, Examples) {
  const Tensor w({2, 2}, {1, -2, 3, -4});
  const double zero[] = {0, 0}, one[] = {1, 1}, two[] = {2, 0};
  EXPECT_EQ(wanda_head_score(w, zero), 0.0);
  EXPECT_EQ(wanda_head_score(w, one), mag_head_score(w));
  EXPECT_EQ(wanda_head_score(Tensor({2, 2}, {1, 2, 2, 3}), two), 6.0);
  const double bad[] = {1, 1, 1};
  EXPECT_THROW(wanda_head_score(w, bad), InputError);
}

TEST(WandaScore, RowPermutationInvariant) {
  const Tensor w({3, 2}, {1, -2, 3, -4, 0.5f, 7}), p({3, 2}, {0.5f, 7, 1, -2, 3, -4});
  const double n[] = {0.3, 1.5, 2.0}, np[] = {2.0, 0.3, 1.5};
  EXPECT_DOUBLE_EQ(wanda_head_score(w, n), wanda_head_score(p, np));
}

TEST(ScanModel, PlantedSinkIsMaximum) {
  SinkRecipe r;
  r.config = planted_fixture_config();
  r.heads = {{2, 0, HeadRole::sink}};
  const Checkpoint ck = build_synthetic_model(r);
  const auto t = scan_model(ck, random_prompts(4, 16, 1), Metric::bos_head);
  ASSERT_EQ(t.entries.size(), 32u);
  const auto best = std::max_element(t.entries.begin(), t.entries.end(),
                                     [](auto& a, auto& b) { return a.score < b.score; });
  EXPECT_EQ(best->layer, 2u);
  EXPECT_EQ(best->head, std::optional<std::size_t>(0));
  EXPECT_GE(best->score, 0.9);
  for (const auto& e : t.entries)
    if (&e != &*best) { EXPECT_LT(e.score, 0.5); }
  EXPECT_EQ(t.n_samples, 4u);
  EXPECT_EQ(t.seq_lens, std::vector<std::size_t>{16});
}

TEST(ScanModel, UniformAttentionClosedForm) {
  SinkRecipe r;
  r.config = planted_fixture_config();
  const Checkpoint ck = build_synthetic_model(r);
  const std::size_t T = 12;
  double want = 0.0;
  for (std::size_t t = 0; t < T; ++t) want += 1.0 / (t + 1);
  want /= T;
  for (const auto& e : scan_model(ck, random_prompts(3, T, 2), Metric::bos_head).entries) {
    EXPECT_NEAR(e.score, want, 1e-6);
  }
  const auto layers = scan_model(ck, random_prompts(3, T, 2), Metric::bos_layer);
  ASSERT_EQ(layers.entries.size(), 4u);
  EXPECT_EQ(layers.granularity, Granularity::layer);
  for (const auto& e : layers.entries) EXPECT_NEAR(e.score, want, 1e-6);
}

TEST(ScanModel, BiOfZeroBlockModel) {
  const Checkpoint ck = build_zero_block_model(planted_fixture_config(), 1);
  for (const auto& e : scan_model(ck, random_prompts(3, 10, 3), Metric::bi).entries) {
    EXPECT_LT(std::fabs(e.score), 1e-6);
  }
}

TEST(ScanModel, SinglePromptEqualsSingleMap) {
  const Checkpoint ck = build_synthetic_model(random_recipe(2));
  const auto prompts = random_prompts(1, 9, 4);
  const auto t = scan_model(ck, prompts, Metric::bos_head);
  const auto tr = forward(ck, prompts[0], InstrumentationSpec::attention()).trace;
  for (const auto& e : t.entries) EXPECT_EQ(e.score, bos_head_score(tr.attention.at({e.layer, *e.head})));
  const auto bi = scan_model(ck, prompts, Metric::bi);
  const auto hs = forward(ck, prompts[0], InstrumentationSpec::hidden_states()).trace;
  for (const auto& e : bi.entries) {
    EXPECT_EQ(e.score, block_influence(hs.hidden_in.at(e.layer), hs.hidden_out.at(e.layer)).score);
  }
}

TEST(ScanModel, MagAndWanda) {
  const Checkpoint ck = build_synthetic_model(random_recipe(2));
  const auto prompts = random_prompts(3, 8, 5);
  const auto mag = scan_model(ck, prompts, Metric::mag);
  const auto wanda = scan_model(ck, prompts, Metric::wanda);
  ASSERT_EQ(mag.entries.size(), 32u);
  ASSERT_EQ(wanda.entries.size(), 32u);
  EXPECT_EQ(mag.at(1, 3), mag_head_score(wo_slice(ck, 1, 3)));
  // Independent activation norms for head (1, 3).
  const auto& c = ck.config;
  std::vector<double> sq(c.d_head, 0.0);
  InstrumentationSpec spec;
  spec.capture_head_outputs = true;
  for (const auto& p : prompts) {
    const auto out = forward(ck, p, spec).trace.head_outputs.at(1);
    for (std::size_t t = 0; t < out.rows(); ++t)
      for (std::size_t j = 0; j < c.d_head; ++j) sq[j] += std::pow(out(t, 3 * c.d_head + j), 2.0);
  }
  for (auto& v : sq) v = std::sqrt(v);
  EXPECT_NEAR(wanda.at(1, 3), wanda_head_score(wo_slice(ck, 1, 3), sq), 1e-9);
  EXPECT_THROW(scan_model(ck, {}, Metric::bos_head), InputError);
  EXPECT_THROW(metric_from_string("entropy"), ConfigError);
}
