#include <gtest/gtest.h>

#include <cmath>

#include "par/decode.hpp"
#include "test_util.hpp"

using namespace par;
using namespace par::testing;

namespace {

// Re-runs the full forward over every slot fed so far at each step.
std::vector<int> no_cache_greedy(const Model<float>& m, const SequenceLayout& L, int label, MaskPattern pattern,
                                 std::vector<Mat<float>>* rows_out = nullptr) {
  const AttentionMask full = build_attention_mask(L, pattern);
  std::vector<int> seq(L.plan.token_count(), 0);
  for (int g = 0; g + 1 < L.group_count(); ++g) {
    const int end = L.groups[g].end;
    const auto slots = make_slot_inputs(L, m.config, seq, label, end);
    const Mat<float> logits = forward(m, slots, full.prefix(end));
    Mat<float> rows = logits.bottomRows(L.groups[g].size());
    if (rows_out) rows_out->push_back(rows);
    for (int s = L.groups[g].begin; s < end; ++s)
      if (L.target_of[s] >= 0) seq[L.target_of[s]] = argmax_row(logits, s);
  }
  return seq;
}

}  // namespace

TEST(Sampler, Validation) {
  SamplerConfig s;
  s.temperature = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = {};
  s.top_k = -1;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = {};
  s.guidance_scale = -0.5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Sampler, CfgCombine) {
  Mat<float> c(1, 2), u(1, 2);
  c << 2, 0;
  u << 1, 0;
  EXPECT_EQ(cfg_combine(c, u, 1.0), c);
  EXPECT_EQ(cfg_combine(c, u, 0.0), u);
  const Mat<float> r = cfg_combine(c, u, 1.5);
  EXPECT_FLOAT_EQ(r(0, 0), 2.5f);
  EXPECT_FLOAT_EQ(r(0, 1), 0.0f);
  EXPECT_THROW(cfg_combine(c, Mat<float>(2, 2), 1.0), std::invalid_argument);
}

TEST(Sampler, TopOneIsArgmaxWithLowIdTies) {
  SamplerConfig s;
  s.top_k = 1;
  const std::vector<float> row{0.1f, 3.0f, 3.0f, -1.0f};
  for (double u : {0.0, 0.3, 0.999}) EXPECT_EQ(sample_row(row, s, u), 1);
  s.top_k = 2;
  int saw2 = 0;
  for (int i = 0; i < 100; ++i) {
    const int id = sample_row(row, s, (i + 0.5) / 100);
    EXPECT_TRUE(id == 1 || id == 2);
    saw2 += id == 2;
  }
  EXPECT_EQ(saw2, 50);
}

TEST(Sampler, TopKLargerThanVocabIsUnrestricted) {
  SamplerConfig a, b;
  b.top_k = 8000;
  std::vector<float> row{0.5f, -0.2f, 1.3f, 0.0f, 2.0f};
  for (int i = 0; i < 200; ++i) {
    const double u = (i + 0.5) / 200;
    EXPECT_EQ(sample_row(row, a, u), sample_row(row, b, u));
  }
}

TEST(Sampler, RejectsAllNegInf) {
  const float ninf = -std::numeric_limits<float>::infinity();
  EXPECT_THROW(sample_row(std::vector<float>{ninf, ninf}, SamplerConfig{}, 0.5), std::invalid_argument);
  EXPECT_EQ(sample_row(std::vector<float>{ninf, 0.0f}, SamplerConfig{}, 0.01), 1);
}

TEST(Sampler, ChiSquareAgainstSoftmax) {
  const int N = 100000;
  Mat<float> logits(N, 2);
  for (int r = 0; r < N; ++r) {
    logits(r, 0) = std::log(3.0f);
    logits(r, 1) = 0.0f;
  }
  const auto ids = sample_tokens(logits, SamplerConfig{}, CounterRng(77), 0);
  int zeros = 0;
  for (int id : ids) zeros += id == 0;
  const double f = static_cast<double>(zeros) / N;
  EXPECT_NEAR(f, 0.75, 0.01);
  const double e0 = 0.75 * N, e1 = 0.25 * N;
  const double chi2 = std::pow(zeros - e0, 2) / e0 + std::pow(N - zeros - e1, 2) / e1;
  EXPECT_LT(chi2, 10.83);  // p = 0.001, one degree of freedom
}

TEST(Sampler, TemperatureSharpens) {
  SamplerConfig cold;
  cold.temperature = 0.25;
  const std::vector<float> row{std::log(3.0f), 0.0f};
  int zeros = 0;
  const CounterRng rng(3);
  for (int i = 0; i < 20000; ++i) zeros += sample_row(row, cold, rng.uniform(i)) == 0;
  EXPECT_NEAR(zeros / 20000.0, 81.0 / 82.0, 0.005);
}

TEST(CounterRngTest, StatelessAndStreamed) {
  const CounterRng a(5), b(5), c(5, 1), d(6);
  EXPECT_EQ(a.uniform(17), b.uniform(17));
  EXPECT_NE(a.uniform(17), c.uniform(17));
  EXPECT_NE(a.uniform(17), d.uniform(17));
  double mean = 0;
  for (int i = 0; i < 10000; ++i) {
    const double u = a.uniform(i);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    mean += u / 10000;
  }
  EXPECT_NEAR(mean, 0.5, 0.01);
}

TEST(Decode, ChunkMatchesFullForwardBitwise) {
  struct Width {
    int hidden, heads;
  };
  // head_dim 12, 16, 32, 48 and 64 reach every attention kernel branch.
  for (Width w : {Width{24, 2}, Width{32, 2}, Width{64, 2}, Width{48, 1}, Width{128, 2}})
  for (GridShape s : {GridShape{1, 4, 4, 2}, GridShape{1, 8, 8, 4}, GridShape{2, 4, 4, 2}}) {
    SCOPED_TRACE("hidden " + std::to_string(w.hidden) + " heads " + std::to_string(w.heads));
    if (s.t > 1 && (w.hidden / w.heads) % 6 != 0) continue;  // three rotary axes
    const ModelConfig cfg = tiny_config(s, 2, w.hidden, w.heads, 70);
    const auto m = random_model<float>(cfg, 5);
    const auto L = build_sequence_layout(build_order_plan(s));
    const auto seq = random_tokens(s.token_count(), cfg.vocab, 4);
    const auto all = make_slot_inputs(L, cfg, seq, 1);
    const Mat<float> full = forward(m, all, build_attention_mask(L));
    DecodeEngine e(m, L);
    for (int g = 0; g < L.group_count(); ++g) {
      const SlotRange r = L.groups[g];
      const Mat<float> rows =
          e.decode_chunk(std::span<const SlotInput>(all.data() + r.begin, static_cast<size_t>(r.size())));
      ASSERT_EQ(rows, full.middleRows(r.begin, r.size())) << "group " << g;
      EXPECT_EQ(e.cache().length, r.end);
    }
    EXPECT_EQ(e.invocations(), L.group_count());
  }
}

TEST(Decode, CacheEntriesNeverMutate) {
  const GridShape s{1, 4, 4, 2};
  const ModelConfig cfg = tiny_config(s);
  const auto m = random_model<float>(cfg, 1);
  const auto L = build_sequence_layout(build_order_plan(s));
  const auto all = make_slot_inputs(L, cfg, random_tokens(16, cfg.vocab, 1), 0);
  DecodeEngine e(m, L);
  e.decode_chunk(std::span<const SlotInput>(all.data(), 1));
  const Mat<float> k0 = e.cache().key_row(1, 0);
  for (int g = 1; g < L.group_count(); ++g) {
    const SlotRange r = L.groups[g];
    e.decode_chunk(std::span<const SlotInput>(all.data() + r.begin, static_cast<size_t>(r.size())));
    ASSERT_EQ(e.cache().key_row(1, 0), k0);
  }
}

TEST(Decode, ChunkMustBeNextGroup) {
  const GridShape s{1, 4, 4, 2};
  const ModelConfig cfg = tiny_config(s);
  const auto m = random_model<float>(cfg, 1);
  const auto L = build_sequence_layout(build_order_plan(s));
  const auto all = make_slot_inputs(L, cfg, random_tokens(16, cfg.vocab, 1), 0);
  DecodeEngine e(m, L);
  EXPECT_THROW(e.decode_chunk(std::span<const SlotInput>(all.data(), 2)), DecodeError);
  e.decode_chunk(std::span<const SlotInput>(all.data(), 1));
  for (int i = 1; i < 4; ++i) e.decode_chunk(std::span<const SlotInput>(all.data() + i, 1));
  // Group 4 is the transition chunk of four slots.
  EXPECT_THROW(e.decode_chunk(std::span<const SlotInput>(all.data() + 4, 3)), DecodeError);
  EXPECT_THROW(e.decode_chunk(std::span<const SlotInput>(all.data() + 3, 4)), DecodeError);
  e.decode_chunk(std::span<const SlotInput>(all.data() + 4, 4));
  e.reset();
  EXPECT_EQ(e.cache().length, 0);
  EXPECT_EQ(e.next_group(), 0);
}

TEST(Decode, ReversedChunkPermutesRows) {
  const GridShape s{1, 4, 4, 2};
  const ModelConfig cfg = tiny_config(s);
  const auto m = random_model<float>(cfg, 2);
  const auto L = build_sequence_layout(build_order_plan(s));
  const auto all = make_slot_inputs(L, cfg, random_tokens(16, cfg.vocab, 5), 0);
  DecodeEngine a(m, L), b(m, L);
  for (int g = 0; g < 5; ++g) {
    const SlotRange r = L.groups[g];
    a.decode_chunk(std::span<const SlotInput>(all.data() + r.begin, static_cast<size_t>(r.size())));
    b.decode_chunk(std::span<const SlotInput>(all.data() + r.begin, static_cast<size_t>(r.size())));
  }
  std::vector<SlotInput> chunk(all.begin() + 8, all.begin() + 12);
  const Mat<float> fwd = a.decode_chunk(chunk);
  std::reverse(chunk.begin(), chunk.end());
  const Mat<float> rev = b.decode_chunk(chunk);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < cfg.vocab; ++j) EXPECT_NEAR(fwd(i, j), rev(3 - i, j), 1e-5);
}

TEST(Generate, GreedyMatchesNoCache) {
  for (int seed = 0; seed < 6; ++seed)
    for (GridShape s : {GridShape{1, 4, 4, 2}, GridShape{1, 6, 6, 3}, GridShape{2, 4, 4, 2}}) {
      const ModelConfig cfg = tiny_config(s);
      const auto m = random_model<float>(cfg, 100 + seed);
      const auto L = build_sequence_layout(build_order_plan(s));
      SamplerConfig sc;
      sc.top_k = 1;
      GenerateStats st;
      const TokenGrid g = generate(m, L, seed % 3, sc, MaskPattern::GroupBidirectional, &st);
      EXPECT_EQ(st.sequence, no_cache_greedy(m, L, seed % 3, MaskPattern::GroupBidirectional));
      EXPECT_EQ(st.invocations_per_branch, step_count(s));
      EXPECT_EQ(g.tokens, from_sequence(L.plan, st.sequence));
    }
}

TEST(Generate, CausalPatternMatchesNoCache) {
  const GridShape s{1, 4, 4, 2};
  const ModelConfig cfg = tiny_config(s);
  const auto m = random_model<float>(cfg, 9);
  const auto L = build_sequence_layout(build_order_plan(s));
  SamplerConfig sc;
  sc.top_k = 1;
  GenerateStats st;
  generate(m, L, 0, sc, MaskPattern::Causal, &st);
  EXPECT_EQ(st.sequence, no_cache_greedy(m, L, 0, MaskPattern::Causal));
}

TEST(Generate, DeterministicAndSeedSensitive) {
  const GridShape s{1, 4, 4, 2};
  const ModelConfig cfg = tiny_config(s);
  const auto m = random_model<float>(cfg, 3);
  const auto L = build_sequence_layout(build_order_plan(s));
  SamplerConfig sc;
  sc.seed = 4;
  const TokenGrid a = generate(m, L, 1, sc), b = generate(m, L, 1, sc);
  EXPECT_EQ(a, b);
  sc.seed = 5;
  EXPECT_NE(generate(m, L, 1, sc).tokens, a.tokens);
  for (int t : a.tokens) {
    EXPECT_GE(t, 0);
    EXPECT_LT(t, cfg.vocab);
  }
}

TEST(Generate, GuidanceUsesTwoStreams) {
  const GridShape s{1, 4, 4, 2};
  const ModelConfig cfg = tiny_config(s);
  const auto m = random_model<float>(cfg, 3);
  const auto L = build_sequence_layout(build_order_plan(s));
  SamplerConfig sc;
  sc.top_k = 1;
  sc.guidance_scale = 0.0;
  GenerateStats st;
  generate(m, L, 1, sc, MaskPattern::GroupBidirectional, &st);
  EXPECT_EQ(st.branches, 2);
  EXPECT_EQ(st.invocations_per_branch, 7);
  // s = 0 decodes from the null label alone.
  EXPECT_EQ(st.sequence, no_cache_greedy(m, L, cfg.null_label(), MaskPattern::GroupBidirectional));
  sc.guidance_scale = 1.0;
  generate(m, L, 1, sc, MaskPattern::GroupBidirectional, &st);
  EXPECT_EQ(st.branches, 1);
}

TEST(Generate, InvocationCount24x24) {
  const GridShape s{1, 24, 24, 2};
  ModelConfig cfg = tiny_config(s, 1, 8, 2, 5, 2);
  const auto m = random_model<float>(cfg, 1);
  const auto L = build_sequence_layout(build_order_plan(s));
  SamplerConfig sc;
  sc.guidance_scale = 2.0;
  GenerateStats st;
  generate(m, L, 0, sc, MaskPattern::GroupBidirectional, &st);
  EXPECT_EQ(st.invocations_per_branch, 147);
  EXPECT_EQ(st.branches, 2);
}

TEST(Generate, NoPrefixLayout) {
  const GridShape s{1, 4, 4, 2};
  const ModelConfig cfg = tiny_config(s);
  const auto m = random_model<float>(cfg, 3);
  OrderOptions o;
  o.sequential_prefix = false;
  const auto L = build_sequence_layout(build_order_plan(s, o));
  SamplerConfig sc;
  sc.top_k = 1;
  GenerateStats st;
  generate(m, L, 0, sc, MaskPattern::GroupBidirectional, &st);
  EXPECT_EQ(st.invocations_per_branch, 4);
  EXPECT_EQ(st.sequence, no_cache_greedy(m, L, 0, MaskPattern::GroupBidirectional));
}
