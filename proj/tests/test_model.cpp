#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "par/model.hpp"
#include "test_util.hpp"

using namespace par;
using namespace par::testing;

namespace {

struct Fixture {
  SequenceLayout layout;
  AttentionMask mask;
  ModelConfig cfg;
};

Fixture setup(GridShape s, int vocab = 11, int hidden = 24, int heads = 2) {
  Fixture out{build_sequence_layout(build_order_plan(s)), {}, tiny_config(s, 2, hidden, heads, vocab)};
  out.mask = build_attention_mask(out.layout);
  return out;
}

template <class S>
std::vector<SlotInput> inputs(const Fixture& st, const std::vector<int>& seq, int label = 1) {
  return make_slot_inputs(st.layout, st.cfg, seq, label);
}

double max_abs_diff(const Mat<float>& a, const Mat<float>& b, int row_a, int row_b) {
  double m = 0;
  for (int j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(static_cast<double>(a(row_a, j)) - b(row_b, j)));
  return m;
}

}  // namespace

TEST(ModelConfig, ParameterCountClosedForm) {
  ModelConfig c = ModelConfig::for_grid(GridShape{1, 12, 12, 2}, 2, 64, 4, 64, 4);
  // tok 64*64, labels 5*64, transitions 3*64, per layer 2*64 + 64*192 + 64*64 + 64*512 + 256*64,
  // final norm 64, head 64*64.
  EXPECT_EQ(parameter_count(c), 140096);
  EXPECT_EQ(init_model<float>(c, 1).params.size(), 140096);
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.hidden = 30;
  c.heads = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(init_model<float>(c, 0), std::invalid_argument);
  ModelConfig d;
  d.hidden = 36;
  d.heads = 6;  // head_dim 6 is not divisible by 4
  EXPECT_THROW(d.validate(), std::invalid_argument);
  ModelConfig e;
  e.dropout = 1.0;
  EXPECT_THROW(e.validate(), std::invalid_argument);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = ModelConfig::for_grid(GridShape{2, 8, 8, 2}, 3, 48, 2, 17, 5);
  c.transition_rope = TransitionRope::InheritTarget;
  c.dropout = 0.25;
  EXPECT_EQ(model_config_from_json(to_json_string(c)), c);
}

TEST(Model, InitDeterministic) {
  const ModelConfig c = tiny_config(GridShape{1, 4, 4, 2});
  const auto a = init_model<float>(c, 9), b = init_model<float>(c, 9), d = init_model<float>(c, 10);
  bool same = true, differs = false;
  std::vector<const Mat<float>*> pa, pb, pd;
  a.params.visit([&](const ParamInfo&, const Mat<float>& m) { pa.push_back(&m); });
  b.params.visit([&](const ParamInfo&, const Mat<float>& m) { pb.push_back(&m); });
  d.params.visit([&](const ParamInfo&, const Mat<float>& m) { pd.push_back(&m); });
  for (size_t i = 0; i < pa.size(); ++i) {
    same = same && (*pa[i] == *pb[i]);
    differs = differs || (*pa[i] != *pd[i]);
  }
  EXPECT_TRUE(same);
  EXPECT_TRUE(differs);
  double sq = 0;
  for (Eigen::Index i = 0; i < a.params.tok_emb.size(); ++i) sq += std::pow(a.params.tok_emb.data()[i], 2);
  EXPECT_NEAR(std::sqrt(sq / a.params.tok_emb.size()), 0.02, 0.005);
}

TEST(Model, ForwardMatchesReference) {
  for (GridShape s : {GridShape{1, 4, 4, 2}, GridShape{1, 3, 3, 1}, GridShape{2, 4, 4, 2}}) {
    Fixture st = setup(s, 70, 24, 2);
    const auto m = random_model<float>(st.cfg, 4);
    const auto seq = random_tokens(s.token_count(), st.cfg.vocab, 8);
    const auto slots = inputs<float>(st, seq);
    const Mat<float> got = forward(m, slots, st.mask);
    const auto ref = reference_forward(m, slots, st.mask);
    for (int r = 0; r < got.rows(); ++r)
      for (int j = 0; j < got.cols(); ++j) ASSERT_NEAR(got(r, j), ref[r][j], 1e-4) << r << "," << j;

    const auto md = cast_model<double>(m);
    const Mat<double> gd = forward(md, slots, st.mask);
    for (int r = 0; r < gd.rows(); ++r)
      for (int j = 0; j < gd.cols(); ++j) ASSERT_NEAR(gd(r, j), ref[r][j], 1e-9);
  }
}

TEST(Model, ForwardRejectsMismatch) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  const auto m = random_model<float>(st.cfg, 1);
  auto slots = inputs<float>(st, random_tokens(16, st.cfg.vocab, 1));
  EXPECT_THROW(forward(m, slots, causal_mask(5)), std::invalid_argument);
  slots[3].id = st.cfg.vocab;
  EXPECT_THROW(forward(m, slots, st.mask), std::invalid_argument);
}

TEST(Model, DeterministicWithoutDropout) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  st.cfg.dropout = 0.3;
  st.cfg.attn_dropout = 0.3;
  const auto m = random_model<float>(st.cfg, 2);
  const auto slots = inputs<float>(st, random_tokens(16, st.cfg.vocab, 2));
  EXPECT_EQ(forward(m, slots, st.mask), forward(m, slots, st.mask));
  std::mt19937_64 r1(5), r2(5);
  EXPECT_EQ(forward(m, slots, st.mask, &r1), forward(m, slots, st.mask, &r2));
  std::mt19937_64 r3(5);
  EXPECT_NE(forward(m, slots, st.mask, &r3), forward(m, slots, st.mask));
}

TEST(Model, Stage1MaskEqualsVanillaCausal) {
  Fixture st = setup(GridShape{1, 3, 4, 1});
  const auto m = random_model<float>(st.cfg, 3);
  const auto slots = inputs<float>(st, random_tokens(12, st.cfg.vocab, 3));
  const AttentionMask causal = causal_mask(st.layout.slot_count());
  EXPECT_EQ(forward(m, slots, st.mask), forward(m, slots, causal));
  const auto ref = reference_forward(m, slots, causal);
  const Mat<float> got = forward(m, slots, st.mask);
  for (int r = 0; r < got.rows(); ++r)
    for (int j = 0; j < got.cols(); ++j) EXPECT_NEAR(got(r, j), ref[r][j], 1e-4);
}

TEST(Model, MaskedKeyDoesNotLeak) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  const auto m = random_model<float>(st.cfg, 6);
  auto seq = random_tokens(16, st.cfg.vocab, 6);
  const int key = 9;  // slot holding sequence index 5
  AttentionMask mask = st.mask;
  for (int q = 0; q < mask.size(); ++q)
    if (q != key) mask.set(q, key, false);
  const Mat<float> a = forward(m, inputs<float>(st, seq), mask);
  seq[5] = (seq[5] + 1) % st.cfg.vocab;
  const Mat<float> b = forward(m, inputs<float>(st, seq), mask);
  for (int r = 0; r < a.rows(); ++r) {
    if (r == key) {
      EXPECT_GT(max_abs_diff(a, b, r, r), 0.0);
      continue;
    }
    EXPECT_EQ(max_abs_diff(a, b, r, r), 0.0) << "row " << r;
  }
}

TEST(Model, WithinGroupSwapPermutesRows) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  const auto m = random_model<float>(st.cfg, 7);
  const auto seq = random_tokens(16, st.cfg.vocab, 7);
  auto slots = inputs<float>(st, seq);
  const Mat<float> a = forward(m, slots, st.mask);
  // Slots 8 and 10 share a bidirectional group.
  std::swap(slots[8], slots[10]);
  const Mat<float> b = forward(m, slots, st.mask);
  EXPECT_LT(max_abs_diff(a, b, 8, 10), 1e-5);
  EXPECT_LT(max_abs_diff(a, b, 10, 8), 1e-5);
  for (int r = 0; r < 8; ++r) EXPECT_EQ(max_abs_diff(a, b, r, r), 0.0);
  for (int r : {9, 11}) EXPECT_LT(max_abs_diff(a, b, r, r), 1e-5);
  for (int r = 12; r < a.rows(); ++r) EXPECT_LT(max_abs_diff(a, b, r, r), 1e-5);
}

TEST(ModelProperty, CausalityAcrossGroups) {
  std::mt19937_64 rng(12);
  for (int m : {1, 2}) {
    Fixture st = setup(GridShape{1, 4, 4, m});
    const auto model = random_model<float>(st.cfg, 12 + m);
    for (int trial = 0; trial < 20; ++trial) {
      auto seq = random_tokens(16, st.cfg.vocab, rng());
      const Mat<float> a = forward(model, inputs<float>(st, seq), st.mask);
      const int pos = static_cast<int>(rng() % 16);
      seq[pos] = (seq[pos] + 1 + static_cast<int>(rng() % (st.cfg.vocab - 1))) % st.cfg.vocab;
      const Mat<float> b = forward(model, inputs<float>(st, seq), st.mask);
      int slot = -1;
      for (int s = 0; s < st.layout.slot_count(); ++s)
        if (st.layout.slots[s].kind == SlotKind::Token && st.layout.slots[s].index == pos) slot = s;
      const int g = st.layout.group_of[slot];
      for (int r = 0; r < st.layout.groups[g].begin; ++r) ASSERT_EQ(max_abs_diff(a, b, r, r), 0.0);
    }
  }
}

TEST(Loss, UniformAndOneHot) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  const auto seq = random_tokens(16, st.cfg.vocab, 1);
  Mat<float> uniform = Mat<float>::Zero(st.layout.slot_count(), st.cfg.vocab);
  EXPECT_NEAR(par_loss(uniform, st.layout, seq), std::log(st.cfg.vocab), 1e-6);
  Mat<float> peaked = Mat<float>::Zero(st.layout.slot_count(), st.cfg.vocab);
  for (int s = 0; s < st.layout.slot_count(); ++s)
    if (st.layout.target_of[s] >= 0) peaked(s, seq[st.layout.target_of[s]]) = 50.0f;
  EXPECT_LT(par_loss(peaked, st.layout, seq), 1e-12);
  auto bad = seq;
  bad[0] = st.cfg.vocab;
  EXPECT_THROW(par_loss(uniform, st.layout, bad), std::invalid_argument);
}

TEST(Loss, OnlyTargetedSlotsContribute) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  const auto seq = random_tokens(16, st.cfg.vocab, 1);
  Mat<double> logits = Mat<double>::Random(st.layout.slot_count(), st.cfg.vocab);
  Mat<double> d;
  par_loss(logits, st.layout, seq, &d);
  int contributing = 0;
  for (int s = 0; s < d.rows(); ++s) {
    const bool nz = d.row(s).cwiseAbs().sum() > 0;
    contributing += nz;
    EXPECT_EQ(nz, st.layout.target_of[s] >= 0);
    EXPECT_NEAR(d.row(s).sum(), 0.0, 1e-12);
  }
  EXPECT_EQ(contributing, 16);
}

TEST(ModelProperty, SoftmaxRowsSumToOne) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  const auto m = random_model<float>(st.cfg, 5, 1.0);
  const Mat<float> logits = forward(m, inputs<float>(st, random_tokens(16, st.cfg.vocab, 5)), st.mask);
  for (int r = 0; r < logits.rows(); ++r) {
    const float mx = logits.row(r).maxCoeff();
    double z = 0;
    for (int j = 0; j < logits.cols(); ++j) z += std::exp(static_cast<double>(logits(r, j) - mx));
    float sum = 0;
    for (int j = 0; j < logits.cols(); ++j) sum += static_cast<float>(std::exp(logits(r, j) - mx) / z);
    EXPECT_NEAR(sum, 1.0f, 1e-5);
  }
}

namespace {

// Central differences on every tensor at a few entries.
void gradient_check(Fixture st, std::uint64_t seed, bool dropout) {
  if (dropout) {
    st.cfg.dropout = 0.2;
    st.cfg.attn_dropout = 0.2;
  }
  auto m = random_model<double>(st.cfg, seed, 0.4);
  const auto seq = random_tokens(st.layout.plan.token_count(), st.cfg.vocab, seed);
  const auto slots = make_slot_inputs(st.layout, st.cfg, seq, 2);
  auto loss = [&](const Model<double>& mm) {
    std::mt19937_64 r(seed);
    return par_loss(forward(mm, slots, st.mask, dropout ? &r : nullptr), st.layout, seq);
  };
  Params<double> g = Params<double>::zeros_like(m.params);
  std::mt19937_64 r(seed);
  loss_and_grad(m, slots, st.mask, st.layout, seq, g, 1.0, dropout ? &r : nullptr);

  std::vector<Mat<double>*> ps, gs;
  std::vector<std::string> names;
  m.params.visit([&](const ParamInfo& i, Mat<double>& t) {
    ps.push_back(&t);
    names.push_back(i.name);
  });
  g.visit([&](const ParamInfo&, Mat<double>& t) { gs.push_back(&t); });
  std::mt19937_64 pick(seed + 1);
  int checked = 0;
  int nonempty = 0;
  for (size_t t = 0; t < ps.size(); ++t) {
    if (ps[t]->size() == 0) continue;
    ++nonempty;
    for (int e = 0; e < 5; ++e) {
      const Eigen::Index idx = static_cast<Eigen::Index>(pick() % ps[t]->size());
      double& w = ps[t]->data()[idx];
      const double orig = w, h = 1e-5;
      w = orig + h;
      const double lp = loss(m);
      w = orig - h;
      const double lm = loss(m);
      w = orig;
      const double fd = (lp - lm) / (2 * h);
      const double an = gs[t]->data()[idx];
      if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;
      EXPECT_LT(std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)), 1e-3)
          << names[t] << "[" << idx << "] fd=" << fd << " an=" << an;
      ++checked;
    }
  }
  EXPECT_GT(checked, nonempty * 3);
}

}  // namespace

TEST(Gradient, FiniteDifferences) {
  gradient_check(setup(GridShape{1, 4, 4, 2}, 9, 8, 2), 21, false);
  gradient_check(setup(GridShape{1, 2, 3, 1}, 7, 8, 2), 22, false);
}

TEST(Gradient, FiniteDifferencesWithDropout) { gradient_check(setup(GridShape{1, 4, 4, 2}, 9, 8, 2), 23, true); }

TEST(Gradient, InheritTargetRope) {
  Fixture st = setup(GridShape{1, 4, 4, 2}, 9, 8, 2);
  st.cfg.transition_rope = TransitionRope::InheritTarget;
  const auto slots = make_slot_inputs(st.layout, st.cfg, random_tokens(16, 9, 1), 0);
  EXPECT_FALSE(slots[5].coord.identity);
  EXPECT_EQ(slots[5].coord, rope_coord(st.layout.plan.perm[5], 2));
  gradient_check(st, 24, false);
}

namespace {

std::vector<TokenGrid> toy_batch(const GridShape& s, int vocab, int count, std::uint64_t seed) {
  std::vector<TokenGrid> out;
  for (int i = 0; i < count; ++i) out.push_back(TokenGrid{s, random_tokens(s.token_count(), vocab, seed + i), i % 3});
  return out;
}

}  // namespace

TEST(Trainer, ZeroLearningRateLeavesParameters) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  auto m = init_model<float>(st.cfg, 1);
  const auto before = m.params;
  TrainConfig tc;
  tc.lr = 0.0;
  tc.total_steps = 3;
  Trainer tr(m, st.layout, tc);
  std::mt19937_64 rng(1);
  const auto batch = toy_batch(GridShape{1, 4, 4, 2}, st.cfg.vocab, 2, 3);
  for (int i = 0; i < 3; ++i) tr.train_step(batch, rng);
  std::vector<const Mat<float>*> a, b;
  before.visit([&](const ParamInfo&, const Mat<float>& t) { a.push_back(&t); });
  m.params.visit([&](const ParamInfo&, const Mat<float>& t) { b.push_back(&t); });
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i], *b[i]);
}

TEST(Trainer, ClipAndSchedule) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  auto m = random_model<float>(st.cfg, 2, 1.0);
  TrainConfig tc;
  tc.total_steps = 100;
  tc.warmup_fraction = 0.1;
  Trainer tr(m, st.layout, tc);
  EXPECT_NEAR(tr.learning_rate(0), tc.lr / 10, 1e-12);
  EXPECT_NEAR(tr.learning_rate(9), tc.lr, 1e-12);
  EXPECT_NEAR(tr.learning_rate(55), tc.lr * 0.5, 1e-12);
  EXPECT_NEAR(tr.learning_rate(100), 0.0, 1e-12);
  std::mt19937_64 rng(2);
  const auto stats = tr.train_step(toy_batch(GridShape{1, 4, 4, 2}, st.cfg.vocab, 4, 9), rng);
  EXPECT_GT(stats.grad_norm, 1.0);
  EXPECT_LE(stats.clipped_grad_norm, 1.0 + 1e-9);
}

TEST(Trainer, OverfitsTwoSamples) {
  const GridShape s{1, 4, 4, 2};
  Fixture st = setup(s, 11, 32, 2);
  auto m = init_model<float>(st.cfg, 3);
  TrainConfig tc;
  tc.lr = 3e-3;
  tc.total_steps = 200;
  tc.weight_decay = 0.0;
  Trainer tr(m, st.layout, tc);
  const auto data = toy_batch(s, st.cfg.vocab, 2, 17);
  std::mt19937_64 rng(3);
  const double first = mean_nll(m, st.layout, st.mask, data);
  for (int i = 0; i < 200; ++i) tr.train_step(data, rng);
  const double last = mean_nll(m, st.layout, st.mask, data);
  EXPECT_LT(last, 0.5 * first);
  EXPECT_EQ(tr.step(), 200);
}

TEST(Trainer, NonFiniteLossAborts) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  auto m = init_model<float>(st.cfg, 1);
  m.params.head(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const auto before = m.params.tok_emb;
  Trainer tr(m, st.layout, TrainConfig{});
  std::mt19937_64 rng(1);
  EXPECT_THROW(tr.train_step(toy_batch(GridShape{1, 4, 4, 2}, st.cfg.vocab, 1, 1), rng), NonFiniteLoss);
  EXPECT_EQ(m.params.tok_emb, before);
  EXPECT_EQ(tr.step(), 0);
}

TEST(Trainer, RejectsMismatchedLayout) {
  Fixture st = setup(GridShape{1, 4, 4, 2});
  auto m = init_model<float>(st.cfg, 1);
  const auto other = build_sequence_layout(build_order_plan(GridShape{1, 4, 4, 1}));
  EXPECT_THROW(Trainer(m, other, TrainConfig{}), std::invalid_argument);
}
