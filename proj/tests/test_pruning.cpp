#include <gtest/gtest.h>

#include <random>

#include "bossink/pruning.hpp"
#include "bossink/synthetic.hpp"
#include "support/reference_forward.hpp"

using namespace bossink;

namespace {

ScoreTable head_table(const std::string& metric, std::size_t L, std::size_t H,
                      std::vector<double> scores) {
  ScoreTable t;
  t.granularity = Granularity::head;
  t.metric = metric;
  t.n_layers = L;
  t.n_heads = H;
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < H; ++h) t.entries.push_back({l, h, scores[l * H + h]});
  return t;
}

ScoreTable layer_table(const std::string& metric, std::vector<double> scores) {
  ScoreTable t;
  t.granularity = Granularity::layer;
  t.metric = metric;
  t.n_layers = scores.size();
  for (std::size_t l = 0; l < scores.size(); ++l) t.entries.push_back({l, std::nullopt, scores[l]});
  return t;
}

std::vector<TokenId> tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenId> t(n);
  for (auto& v : t) v = static_cast<TokenId>(rng() % 256);
  return t;
}

std::vector<std::size_t> layers_of(const PruneSpec& s) { return s.layers(); }

}  // namespace

TEST(RankTargets, PositionalOrders) {
  const auto bu = rank_positional(6, Strategy::bottom_up, 2.0 / 6.0);
  EXPECT_EQ(layers_of(bu), (std::vector<std::size_t>{1, 2}));
  const auto td = rank_positional(6, Strategy::top_down, 2.0 / 6.0);
  EXPECT_EQ(layers_of(td), (std::vector<std::size_t>{4, 3}));
  EXPECT_EQ(td.protected_layers, (std::set<std::size_t>{0, 5}));
  // Via a score table the positional strategies ignore the scores.
  const auto t = layer_table("bi", {0, 0, 0, 0, 0, 0});
  EXPECT_EQ(rank_targets(t, Strategy::bottom_up, 2.0 / 6.0), bu);
}

TEST(RankTargets, HeadExampleWithTies) {
  const auto t = head_table("bos_head", 3, 2, {0.0, 0.0, 0.9, 0.1, 0.9, 0.0});
  const auto s = rank_targets(t, Strategy::bos_head_desc, 2.0 / 6.0);
  ASSERT_EQ(s.targets.size(), 2u);
  EXPECT_EQ(s.targets[0], (PruneTarget{1, 0}));
  EXPECT_EQ(s.targets[1], (PruneTarget{2, 0}));
  EXPECT_FALSE(s.heads_protected);
}

TEST(RankTargets, AscendingBaselinesAndLayerProtection) {
  const auto bi = layer_table("bi", {0.0, 0.5, 0.1, 0.1, 0.7, 0.0});
  const auto s = rank_targets(bi, Strategy::bi_asc, 0.5);
  EXPECT_EQ(layers_of(s), (std::vector<std::size_t>{2, 3, 1}));
  const auto bos = layer_table("bos_layer", {0.99, 0.5, 0.1, 0.8, 0.7, 0.99});
  EXPECT_EQ(layers_of(rank_targets(bos, Strategy::bos_layer_desc, 2.0 / 6.0)),
            (std::vector<std::size_t>{3, 4}));
  const auto mag = head_table("mag", 3, 2, {0.0, 5.0, 1.0, 1.0, 9.0, 0.5});
  const auto m = rank_targets(mag, Strategy::mag_asc, 0.5);
  EXPECT_EQ(m.heads(), (std::vector<HeadId>{{0, 0}, {2, 1}, {1, 0}}));
}

TEST(RankTargets, UnitCounts) {
  const auto t = head_table("bos_head", 4, 8, std::vector<double>(32, 0.5));
  EXPECT_EQ(rank_targets(t, Strategy::bos_head_desc, 0.0).targets.size(), 0u);
  EXPECT_EQ(rank_targets(t, Strategy::bos_head_desc, 0.25).targets.size(), 8u);
  EXPECT_EQ(rank_targets(t, Strategy::bos_head_desc, 0.1).targets.size(), 3u);
  EXPECT_EQ(rank_targets(t, Strategy::bos_head_desc, 1.0).targets.size(), 32u);
  // 0.125 of 8 layers is exactly one layer.
  EXPECT_EQ(rank_positional(8, Strategy::bottom_up, 0.125).targets.size(), 1u);
}

TEST(RankTargets, Errors) {
  EXPECT_THROW(strategy_from_string("random_drop"), ConfigError);
  const auto t = head_table("bos_head", 4, 2, std::vector<double>(8, 0.5));
  EXPECT_THROW(rank_targets(t, Strategy::bos_head_desc, 1.5), ConfigError);
  EXPECT_THROW(rank_targets(t, Strategy::bos_head_desc, -0.1), ConfigError);
  EXPECT_THROW(rank_targets(t, Strategy::mag_asc, 0.5), ConfigError);
  EXPECT_THROW(rank_positional(4, Strategy::bottom_up, 1.0), ConfigError);
  EXPECT_THROW(rank_positional(4, Strategy::top_down, 0.75), ConfigError);
  EXPECT_NO_THROW(rank_positional(4, Strategy::top_down, 0.5));
  auto nan = t;
  nan.entries[3].score = std::nan("");
  EXPECT_THROW(rank_targets(nan, Strategy::bos_head_desc, 0.5), InputError);
}

TEST(RankTargets, PositiveRescalingKeepsSpec) {
  std::mt19937 rng(1);
  std::uniform_int_distribution<int> d(0, 4);
  std::vector<double> scores(40);
  for (auto& v : scores) v = d(rng) / 4.0;
  const auto t = head_table("wanda", 5, 8, scores);
  auto scaled = t;
  for (auto& e : scaled.entries) e.score *= 3.7;
  for (double r : {0.1, 0.25, 0.5}) {
    EXPECT_EQ(rank_targets(t, Strategy::wanda_asc, r), rank_targets(scaled, Strategy::wanda_asc, r));
  }
}

TEST(AblateHeads, TouchesOnlyTargetRows) {
  const Checkpoint ck = build_synthetic_model(random_recipe(2));
  const Checkpoint out = ablate_heads(ck, {{1, 3}});
  const auto& c = ck.config;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& a = ck.blocks[l];
    const auto& b = out.blocks[l];
    EXPECT_EQ(a.wq, b.wq);
    EXPECT_EQ(a.w_down, b.w_down);
    for (std::size_t r = 0; r < c.attn_width(); ++r) {
      const bool target = l == 1 && r / c.d_head == 3;
      for (std::size_t j = 0; j < c.d_model; ++j) {
        if (target) {
          EXPECT_EQ(b.wo(r, j), 0.0f);
        } else {
          EXPECT_EQ(b.wo(r, j), a.wo(r, j));
        }
      }
    }
  }
  EXPECT_EQ(out.provenance.back(), "ablate_heads 1:3");
  EXPECT_THROW(ablate_heads(ck, {{4, 0}}), IndexError);
  EXPECT_THROW(ablate_heads(ck, {{0, 8}}), IndexError);
}

TEST(AblateHeads, EmptyListIsNoOp) {
  const Checkpoint ck = build_synthetic_model(random_recipe(2));
  const Checkpoint out = ablate_heads(ck, {});
  EXPECT_TRUE(out.same_weights(ck));
  EXPECT_EQ(out.provenance.size(), ck.provenance.size() + 1);
}

TEST(AblateHeads, MatchesMaskedOracle) {
  const Checkpoint ck = build_synthetic_model(random_recipe(4));
  const auto tk = tokens(16, 3);
  for (HeadId h : {HeadId{0, 0}, HeadId{2, 5}, HeadId{3, 7}}) {
    const auto logits = forward(ck, tk).logits;
    const auto ablated = forward(ablate_heads(ck, {h}), tk).logits;
    EXPECT_LT(oracle::max_abs_diff(ablated, oracle::forward_masked(ck, tk, {h})), 1e-6);
    EXPECT_GT(oracle::max_abs_diff(logits, oracle::forward_masked(ck, tk, {h})), 1e-6);
  }
}

TEST(AblateHeads, WholeLayerLeavesMlpOnly) {
  const Checkpoint ck = build_synthetic_model(random_recipe(4));
  std::vector<HeadId> all;
  for (std::size_t h = 0; h < 8; ++h) all.push_back({2, h});
  Checkpoint out = ablate_heads(ck, all);
  const auto tr = forward(out, tokens(10, 1), InstrumentationSpec::hidden_states()).trace;
  // Block 2 output equals input plus the MLP path computed on the input.
  Tensor x = tr.hidden_in.at(2);
  BlockWeights b = out.blocks[2];
  AttentionTrace scratch;
  forward_block(out.config, b, 2, x, InstrumentationSpec::none(), scratch);
  EXPECT_EQ(x, tr.hidden_out.at(2));
  Checkpoint no_mlp = out;
  no_mlp.blocks[2].w_down.fill(0.0f);
  const auto tr2 = forward(no_mlp, tokens(10, 1), InstrumentationSpec::hidden_states()).trace;
  EXPECT_EQ(tr2.hidden_in.at(2), tr2.hidden_out.at(2));
}

TEST(AblateHeads, Commutes) {
  const Checkpoint ck = build_synthetic_model(random_recipe(4));
  const auto ab = ablate_heads(ablate_heads(ck, {{1, 2}}), {{3, 0}});
  const auto ba = ablate_heads(ablate_heads(ck, {{3, 0}}), {{1, 2}});
  const auto both = ablate_heads(ck, {{1, 2}, {3, 0}});
  EXPECT_TRUE(ab.same_weights(both));
  EXPECT_TRUE(ba.same_weights(both));
}

TEST(DropLayers, Renumbers) {
  ModelConfig c = random_fixture_config();
  c.n_layers = 6;
  SinkRecipe r{c, 3, {}, Background::random};
  const Checkpoint ck = build_synthetic_model(r);
  const Checkpoint out = drop_layers(ck, {2, 4});
  EXPECT_EQ(out.config.n_layers, 4u);
  ASSERT_EQ(out.blocks.size(), 4u);
  EXPECT_EQ(out.blocks[0], ck.blocks[0]);
  EXPECT_EQ(out.blocks[1], ck.blocks[1]);
  EXPECT_EQ(out.blocks[2], ck.blocks[3]);
  EXPECT_EQ(out.blocks[3], ck.blocks[5]);
  EXPECT_EQ(out.provenance.back(), "drop_layers 2 4 of 6 kept=0,1,3,5");
}

TEST(DropLayers, Errors) {
  const Checkpoint ck = build_synthetic_model(random_recipe(1));
  EXPECT_THROW(drop_layers(ck, {0}), PolicyError);
  EXPECT_THROW(drop_layers(ck, {3}), PolicyError);
  EXPECT_THROW(drop_layers(ck, {5}), IndexError);
  EXPECT_THROW(drop_layers(ck, {1, 1}), IndexError);
  EXPECT_THROW(drop_layers(ck, {1, 2}), PolicyError);  // would leave 2 layers
}

TEST(DropLayers, ZeroBlockRemovalIsExact) {
  ModelConfig c = random_fixture_config();
  c.n_layers = 5;
  Checkpoint ck = build_synthetic_model(SinkRecipe{c, 7, {}, Background::random});
  BlockWeights::for_each(ck.blocks[2], [](const char*, Tensor& t) { t.fill(0.0f); });
  const auto tk = tokens(20, 2);
  EXPECT_EQ(forward(drop_layers(ck, {2}), tk).logits, forward(ck, tk).logits);
  EXPECT_EQ(forward(drop_layers(ck, {}), tk).logits, forward(ck, tk).logits);
}

TEST(DropLayers, EqualsSkippingBlocks) {
  ModelConfig c = random_fixture_config();
  c.n_layers = 5;
  const Checkpoint ck = build_synthetic_model(SinkRecipe{c, 7, {}, Background::random});
  const auto tk = tokens(12, 4);
  Tensor x = embed(ck, tk);
  AttentionTrace scratch;
  for (std::size_t l : {0, 1, 3, 4}) forward_block(ck.config, ck.blocks[l], l, x, {}, scratch);
  EXPECT_EQ(forward(drop_layers(ck, {2}), tk).logits, lm_logits(ck, x));
}

TEST(ApplyPrune, RecordsProvenance) {
  const Checkpoint ck = build_synthetic_model(random_recipe(1));
  const auto t = head_table("bos_head", 4, 8, std::vector<double>(32, 0.1));
  const auto out = apply_prune(ck, rank_targets(t, Strategy::bos_head_desc, 0.0625));
  EXPECT_EQ(out.provenance.back(), "prune strategy=bos_head_desc ratio=0.0625 removed=2");
  EXPECT_EQ(out.provenance[out.provenance.size() - 2], "ablate_heads 0:0 0:1");
  const auto dropped = apply_prune(ck, rank_positional(4, Strategy::top_down, 0.25));
  EXPECT_EQ(dropped.config.n_layers, 3u);
}
