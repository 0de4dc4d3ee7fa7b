#include "par/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "json.hpp"
#include "model_ops.hpp"

namespace par {

// ---------------------------------------------------------------- config

ModelConfig ModelConfig::for_grid(const GridShape& shape, int layers, int hidden, int heads,
                                  int vocab, int labels) {
  shape.validate();
  ModelConfig c;
  c.layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.vocab = vocab;
  c.labels = labels;
  c.group_size = shape.group_size();
  c.max_slots = shape.token_count() + shape.group_size();
  c.rope_axes = shape.t > 1 ? 3 : 2;
  c.grid_extent = {shape.t, shape.h, shape.w};
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (layers < 1 || hidden < 1 || heads < 1) fail("layers, hidden, heads must be positive");
  if (hidden % heads != 0) fail("hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  if (head_dim() % (2 * rope_axes) != 0) fail("head_dim not divisible by 2*rope_axes");
  if (vocab < 2) fail("vocab must be >= 2");
  if (labels < 1) fail("labels must be >= 1");
  if (group_size < 1) fail("group_size must be >= 1");
  if (max_slots < group_size + 1) fail("max_slots too small");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (rope_axes < 2 || rope_axes > 3) fail("rope_axes must be 2 or 3");
  for (int e : grid_extent)
    if (e < 1) fail("grid extent must be positive");
  for (double p : {dropout, attn_dropout, label_dropout})
    if (p < 0.0 || p >= 1.0) fail("dropout rates must lie in [0, 1)");
}

std::string to_json_string(const ModelConfig& c) {
  nlohmann::json j;
  j["layers"] = c.layers;
  j["hidden"] = c.hidden;
  j["heads"] = c.heads;
  j["vocab"] = c.vocab;
  j["labels"] = c.labels;
  j["group_size"] = c.group_size;
  j["max_slots"] = c.max_slots;
  j["mlp_ratio"] = c.mlp_ratio;
  j["rope_axes"] = c.rope_axes;
  j["grid_extent"] = c.grid_extent;
  j["rope_base"] = c.rope_base;
  j["dropout"] = c.dropout;
  j["attn_dropout"] = c.attn_dropout;
  j["label_dropout"] = c.label_dropout;
  j["init_std"] = c.init_std;
  j["norm_eps"] = c.norm_eps;
  j["transition_rope"] = c.transition_rope == TransitionRope::Identity ? "identity" : "inherit_target";
  j["norm"] = "rmsnorm_pre";
  j["ffn"] = "swiglu";
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.layers = j.at("layers");
  c.hidden = j.at("hidden");
  c.heads = j.at("heads");
  c.vocab = j.at("vocab");
  c.labels = j.at("labels");
  c.group_size = j.at("group_size");
  c.max_slots = j.at("max_slots");
  c.mlp_ratio = j.at("mlp_ratio");
  c.rope_axes = j.at("rope_axes");
  c.grid_extent = j.at("grid_extent").get<std::array<int, 3>>();
  c.rope_base = j.at("rope_base");
  c.dropout = j.at("dropout");
  c.attn_dropout = j.at("attn_dropout");
  c.label_dropout = j.at("label_dropout");
  c.init_std = j.at("init_std");
  c.norm_eps = j.at("norm_eps");
  c.transition_rope = j.at("transition_rope") == "identity" ? TransitionRope::Identity
                                                             : TransitionRope::InheritTarget;
  c.validate();
  return c;
}

std::int64_t parameter_count(const ModelConfig& c) {
  const std::int64_t d = c.hidden, f = c.ffn_dim(), V = c.vocab;
  const std::int64_t per_layer = d + 3 * d * d + d * d + d + 2 * d * f + f * d;
  return V * d + (c.labels + 1) * d + (c.group_size - 1) * d + c.layers * per_layer + d + d * V;
}

// ---------------------------------------------------------------- init

RopeTable make_rope_table(const ModelConfig& c) {
  std::array<int, 3> extent{1, 1, 1};
  if (c.rope_axes == 3) {
    extent = c.grid_extent;
  } else {
    extent = {c.grid_extent[1], c.grid_extent[2], 1};
  }
  return RopeTable(c.head_dim(), c.rope_axes, extent, c.rope_base);
}

RopeCoord rope_coord(const Coord& c, int axes) {
  if (axes == 3) return RopeCoord{{c.t, c.y, c.x}, false};
  return RopeCoord{{c.y, c.x, 0}, false};
}

template <class S>
Model<S> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<S> model;
  model.config = config;
  model.rope = make_rope_table(config);
  const int d = config.hidden, f = config.ffn_dim();
  auto& p = model.params;
  p.tok_emb.resize(config.vocab, d);
  p.label_emb.resize(config.labels + 1, d);
  p.transition_emb.resize(config.group_size - 1, d);
  p.layers.resize(config.layers);
  for (auto& L : p.layers) {
    L.attn_norm.setOnes(1, d);
    L.wqkv.resize(d, 3 * d);
    L.wo.resize(d, d);
    L.mlp_norm.setOnes(1, d);
    L.w_gate_up.resize(d, 2 * f);
    L.w_down.resize(f, d);
  }
  p.final_norm.setOnes(1, d);
  p.head.resize(d, config.vocab);

  // Normal(0, init_std) everywhere except norm gains; output projections of
  // each residual branch are scaled down by sqrt(2 * layers).
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  const double branch_scale = 1.0 / std::sqrt(2.0 * config.layers);
  p.visit([&](const ParamInfo& info, Mat<S>& m) {
    if (info.rank == 1) return;
    const bool branch_out = info.name.ends_with(".wo") || info.name.ends_with(".w_down");
    const double scale = branch_out ? branch_scale : 1.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(normal(rng) * scale);
  });
  return model;
}

template <class To, class From>
Model<To> cast_model(const Model<From>& model) {
  Model<To> out;
  out.config = model.config;
  out.rope = model.rope;
  auto& dst = out.params;
  const auto& src = model.params;
  dst.tok_emb = src.tok_emb.template cast<To>();
  dst.label_emb = src.label_emb.template cast<To>();
  dst.transition_emb = src.transition_emb.template cast<To>();
  dst.final_norm = src.final_norm.template cast<To>();
  dst.head = src.head.template cast<To>();
  dst.layers.resize(src.layers.size());
  for (size_t l = 0; l < src.layers.size(); ++l) {
    dst.layers[l].attn_norm = src.layers[l].attn_norm.template cast<To>();
    dst.layers[l].wqkv = src.layers[l].wqkv.template cast<To>();
    dst.layers[l].wo = src.layers[l].wo.template cast<To>();
    dst.layers[l].mlp_norm = src.layers[l].mlp_norm.template cast<To>();
    dst.layers[l].w_gate_up = src.layers[l].w_gate_up.template cast<To>();
    dst.layers[l].w_down = src.layers[l].w_down.template cast<To>();
  }
  return out;
}

// ---------------------------------------------------------------- inputs

std::vector<int> to_sequence(const OrderPlan& plan, const std::vector<int>& grid_tokens) {
  if (static_cast<int>(grid_tokens.size()) != plan.token_count())
    throw std::invalid_argument("grid has " + std::to_string(grid_tokens.size()) + " tokens, plan expects " +
                                std::to_string(plan.token_count()));
  std::vector<int> seq(grid_tokens.size());
  for (int i = 0; i < plan.token_count(); ++i) seq[i] = grid_tokens[plan.flat_index(plan.perm[i])];
  return seq;
}

std::vector<int> from_sequence(const OrderPlan& plan, const std::vector<int>& seq_tokens) {
  if (static_cast<int>(seq_tokens.size()) != plan.token_count())
    throw std::invalid_argument("sequence length does not match plan");
  std::vector<int> grid(seq_tokens.size());
  for (int i = 0; i < plan.token_count(); ++i) grid[plan.flat_index(plan.perm[i])] = seq_tokens[i];
  return grid;
}

std::vector<SlotInput> make_slot_inputs(const SequenceLayout& layout, const ModelConfig& config,
                                        std::span<const int> seq_tokens, int label, int count) {
  if (count < 0) count = layout.slot_count();
  if (count > layout.slot_count()) throw std::out_of_range("slot count exceeds layout");
  std::vector<SlotInput> out(count);
  for (int s = 0; s < count; ++s) {
    const Slot& slot = layout.slots[s];
    SlotInput& in = out[s];
    in.kind = slot.kind;
    switch (slot.kind) {
      case SlotKind::Label:
        in.id = label;
        break;
      case SlotKind::Token:
        if (slot.index >= static_cast<int>(seq_tokens.size()))
          throw std::out_of_range("slot " + std::to_string(s) + " needs token " + std::to_string(slot.index));
        in.id = seq_tokens[slot.index];
        in.coord = rope_coord(layout.plan.perm[slot.index], config.rope_axes);
        break;
      case SlotKind::Transition:
        in.id = slot.index;
        if (config.transition_rope == TransitionRope::InheritTarget && layout.target_of[s] >= 0) {
          in.coord = rope_coord(layout.plan.perm[layout.target_of[s]], config.rope_axes);
        }
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- forward

namespace {

template <class S>
struct LayerTape {
  Mat<S> x_in, h1, qkv, ctx, x_mid, h2, gu, act;
  std::vector<S> r1, r2;
  std::vector<S> probs;  // heads x rows x rows
  std::vector<std::uint8_t> attn_keep;
  std::vector<std::uint8_t> keep1, keep2;
};

template <class S>
struct Tape {
  std::vector<LayerTape<S>> layers;
  Mat<S> x_final, h_final;
  std::vector<S> r_final;
  std::vector<RopeCoord> coords;
  double p_resid = 0.0;
  double p_attn = 0.0;
};

inline bool bernoulli_keep(std::mt19937_64& rng, double p) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53 >= p;
}

template <class S>
void residual_dropout(Mat<S>& m, double p, std::mt19937_64& rng, std::vector<std::uint8_t>* keep) {
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  if (keep) keep->resize(m.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const bool k = bernoulli_keep(rng, p);
    if (keep) (*keep)[i] = k;
    m.data()[i] = k ? m.data()[i] * scale : S(0);
  }
}

template <class S>
Mat<S> forward_impl(const Model<S>& model, std::span<const SlotInput> slots, const AttentionMask& mask,
                    std::mt19937_64* rng, Tape<S>* tape) {
  const ModelConfig& cfg = model.config;
  const Params<S>& P = model.params;
  const int rows = static_cast<int>(slots.size());
  if (rows == 0) throw std::invalid_argument("forward: empty slot sequence");
  if (mask.size() != rows)
    throw std::invalid_argument("forward: mask size " + std::to_string(mask.size()) + " != slots " +
                                std::to_string(rows));
  if (rows > cfg.max_slots) throw std::invalid_argument("forward: slot count exceeds max_slots");
  const int d = cfg.hidden, H = cfg.heads, hd = cfg.head_dim();
  const double p_resid = rng ? cfg.dropout : 0.0;
  const double p_attn = rng ? cfg.attn_dropout : 0.0;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  std::vector<RopeCoord> coords(rows);
  for (int r = 0; r < rows; ++r) coords[r] = slots[r].coord;
  if (tape) {
    tape->layers.resize(cfg.layers);
    tape->coords = coords;
    tape->p_resid = p_resid;
    tape->p_attn = p_attn;
  }

  Mat<S> x;
  detail::embed(P, cfg, slots, x);
  Mat<S> h, qkv, ctx(rows, d), o, gu, act, dn;
  std::vector<S> scratch(rows), dropped(rows);

  for (int l = 0; l < cfg.layers; ++l) {
    const LayerParams<S>& L = P.layers[l];
    LayerTape<S>* lt = tape ? &tape->layers[l] : nullptr;
    if (lt) {
      lt->x_in = x;
      lt->probs.assign(static_cast<size_t>(H) * rows * rows, S(0));
      if (p_attn > 0) lt->attn_keep.assign(static_cast<size_t>(H) * rows * rows, 0);
    }
    detail::rmsnorm_rows(x, L.attn_norm, cfg.norm_eps, h, lt ? &lt->r1 : nullptr);
    matmul(h, L.wqkv, qkv);
    detail::rotate_qk(qkv, coords, H, hd, model.rope);
    for (int head = 0; head < H; ++head) {
      for (int q = 0; q < rows; ++q) {
        S* pr = lt ? &lt->probs[(static_cast<size_t>(head) * rows + q) * rows] : scratch.data();
        const S* qp = qkv.data() + static_cast<size_t>(q) * 3 * d + head * hd;
        detail::attention_probs(qp, qkv.data() + d + head * hd, 3 * d, mask.row(q), rows, hd, scale, pr);
        const S* use = pr;
        if (p_attn > 0) {
          const S inv_keep = static_cast<S>(1.0 / (1.0 - p_attn));
          std::uint8_t* keep = lt ? &lt->attn_keep[(static_cast<size_t>(head) * rows + q) * rows] : nullptr;
          for (int k = 0; k < rows; ++k) {
            const bool kk = bernoulli_keep(*rng, p_attn);
            if (keep) keep[k] = kk;
            dropped[k] = kk ? pr[k] * inv_keep : S(0);
          }
          use = dropped.data();
        }
        detail::weighted_sum(use, mask.row(q), rows, qkv.data() + 2 * d + head * hd, 3 * d, hd,
                             ctx.data() + static_cast<size_t>(q) * d + head * hd);
      }
    }
    matmul(ctx, L.wo, o);
    if (p_resid > 0) residual_dropout(o, p_resid, *rng, lt ? &lt->keep1 : nullptr);
    x += o;
    if (lt) {
      lt->qkv = qkv;
      lt->ctx = ctx;
      lt->h1 = h;
      lt->x_mid = x;
    }

    detail::rmsnorm_rows(x, L.mlp_norm, cfg.norm_eps, h, lt ? &lt->r2 : nullptr);
    matmul(h, L.w_gate_up, gu);
    detail::swiglu_rows(gu, act);
    matmul(act, L.w_down, dn);
    if (p_resid > 0) residual_dropout(dn, p_resid, *rng, lt ? &lt->keep2 : nullptr);
    x += dn;
    if (lt) {
      lt->h2 = h;
      lt->gu = gu;
      lt->act = act;
    }
  }

  detail::rmsnorm_rows(x, P.final_norm, cfg.norm_eps, h, tape ? &tape->r_final : nullptr);
  Mat<S> logits;
  matmul(h, P.head, logits);
  if (tape) {
    tape->x_final = x;
    tape->h_final = h;
  }
  return logits;
}

// dx for y = x * rinv * gain; accumulates dgain.
template <class S>
Mat<S> rmsnorm_backward(const Mat<S>& x, const std::vector<S>& rinv, const Mat<S>& gain,
                        const Mat<S>& dy, Mat<S>& dgain) {
  const int rows = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  Mat<S> dx(rows, d);
  for (int r = 0; r < rows; ++r) {
    const S ri = rinv[r];
    S dot = 0;
    for (int j = 0; j < d; ++j) {
      const S gdy = dy(r, j) * gain(0, j);
      dot += gdy * x(r, j);
      dgain(0, j) += dy(r, j) * x(r, j) * ri;
    }
    const S c = ri * ri * ri * dot / static_cast<S>(d);
    for (int j = 0; j < d; ++j) dx(r, j) = ri * dy(r, j) * gain(0, j) - c * x(r, j);
  }
  return dx;
}

template <class S>
void backward(const Model<S>& model, const Tape<S>& tape, std::span<const SlotInput> slots,
              const AttentionMask& mask, const Mat<S>& dlogits, Params<S>& g) {
  const ModelConfig& cfg = model.config;
  const Params<S>& P = model.params;
  const int rows = static_cast<int>(slots.size());
  const int d = cfg.hidden, H = cfg.heads, hd = cfg.head_dim(), f = cfg.ffn_dim();
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  g.head.noalias() += tape.h_final.transpose() * dlogits;
  Mat<S> dh = dlogits * P.head.transpose();
  Mat<S> dx = rmsnorm_backward(tape.x_final, tape.r_final, P.final_norm, dh, g.final_norm);

  std::vector<S> dprob(rows);
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerParams<S>& L = P.layers[l];
    LayerParams<S>& G = g.layers[l];
    const LayerTape<S>& t = tape.layers[l];

    // Feedforward branch.
    Mat<S> dm = dx;
    if (tape.p_resid > 0) {
      const S inv = static_cast<S>(1.0 / (1.0 - tape.p_resid));
      for (Eigen::Index i = 0; i < dm.size(); ++i) dm.data()[i] = t.keep2[i] ? dm.data()[i] * inv : S(0);
    }
    G.w_down.noalias() += t.act.transpose() * dm;
    Mat<S> dact = dm * L.w_down.transpose();
    Mat<S> dgu(rows, 2 * f);
    for (int r = 0; r < rows; ++r) {
      for (int j = 0; j < f; ++j) {
        const S gt = t.gu(r, j);
        const S up = t.gu(r, f + j);
        const S sg = detail::sigmoid(gt);
        const S silu = gt * sg;
        dgu(r, j) = dact(r, j) * up * sg * (S(1) + gt * (S(1) - sg));
        dgu(r, f + j) = dact(r, j) * silu;
      }
    }
    G.w_gate_up.noalias() += t.h2.transpose() * dgu;
    Mat<S> dh2 = dgu * L.w_gate_up.transpose();
    Mat<S> dx_mid = dx + rmsnorm_backward(t.x_mid, t.r2, L.mlp_norm, dh2, G.mlp_norm);

    // Attention branch.
    Mat<S> da = dx_mid;
    if (tape.p_resid > 0) {
      const S inv = static_cast<S>(1.0 / (1.0 - tape.p_resid));
      for (Eigen::Index i = 0; i < da.size(); ++i) da.data()[i] = t.keep1[i] ? da.data()[i] * inv : S(0);
    }
    G.wo.noalias() += t.ctx.transpose() * da;
    Mat<S> dctx = da * L.wo.transpose();
    Mat<S> dqkv = Mat<S>::Zero(rows, 3 * d);
    const S inv_keep = static_cast<S>(tape.p_attn > 0 ? 1.0 / (1.0 - tape.p_attn) : 1.0);
    for (int head = 0; head < H; ++head) {
      for (int q = 0; q < rows; ++q) {
        const size_t base = (static_cast<size_t>(head) * rows + q) * rows;
        const S* pr = &t.probs[base];
        const std::uint8_t* vis = mask.row(q);
        const S* dc = dctx.data() + static_cast<size_t>(q) * d + head * hd;
        const S* qrow = t.qkv.data() + static_cast<size_t>(q) * 3 * d + head * hd;
        S* dq = dqkv.data() + static_cast<size_t>(q) * 3 * d + head * hd;
        S sum = 0;
        for (int k = 0; k < rows; ++k) {
          if (!vis[k]) {
            dprob[k] = 0;
            continue;
          }
          S drop_scale = S(1);
          if (tape.p_attn > 0) drop_scale = t.attn_keep[base + k] ? inv_keep : S(0);
          const S* vrow = t.qkv.data() + static_cast<size_t>(k) * 3 * d + 2 * d + head * hd;
          S* dv = dqkv.data() + static_cast<size_t>(k) * 3 * d + 2 * d + head * hd;
          S dp = 0;
          const S pd = pr[k] * drop_scale;
          for (int i = 0; i < hd; ++i) {
            dp += dc[i] * vrow[i];
            dv[i] += pd * dc[i];
          }
          dprob[k] = dp * drop_scale;
          sum += pr[k] * dprob[k];
        }
        for (int k = 0; k < rows; ++k) {
          if (!vis[k]) continue;
          const S ds = pr[k] * (dprob[k] - sum) * scale;
          if (ds == S(0)) continue;
          const S* krow = t.qkv.data() + static_cast<size_t>(k) * 3 * d + d + head * hd;
          S* dk = dqkv.data() + static_cast<size_t>(k) * 3 * d + d + head * hd;
          for (int i = 0; i < hd; ++i) {
            dq[i] += ds * krow[i];
            dk[i] += ds * qrow[i];
          }
        }
      }
    }
    for (int r = 0; r < rows; ++r) {
      S* row = dqkv.data() + static_cast<size_t>(r) * 3 * d;
      for (int head = 0; head < H; ++head) {
        model.rope.apply_inverse(std::span<S>(row + head * hd, hd), tape.coords[r]);
        model.rope.apply_inverse(std::span<S>(row + d + head * hd, hd), tape.coords[r]);
      }
    }
    G.wqkv.noalias() += t.h1.transpose() * dqkv;
    Mat<S> dh1 = dqkv * L.wqkv.transpose();
    dx = dx_mid + rmsnorm_backward(t.x_in, t.r1, L.attn_norm, dh1, G.attn_norm);
  }

  for (int r = 0; r < rows; ++r) {
    const SlotInput& s = slots[r];
    switch (s.kind) {
      case SlotKind::Token:
        g.tok_emb.row(s.id) += dx.row(r);
        break;
      case SlotKind::Label:
        g.label_emb.row(s.id) += dx.row(r);
        break;
      case SlotKind::Transition:
        g.transition_emb.row(s.id - 1) += dx.row(r);
        break;
    }
  }
}

}  // namespace

template <class S>
Mat<S> forward(const Model<S>& model, std::span<const SlotInput> slots, const AttentionMask& mask,
               std::mt19937_64* dropout_rng) {
  return forward_impl<S>(model, slots, mask, dropout_rng, nullptr);
}

template <class S>
double par_loss(const Mat<S>& logits, const SequenceLayout& layout, std::span<const int> seq_tokens,
                Mat<S>* dlogits) {
  const int rows = layout.slot_count();
  if (logits.rows() != rows) throw std::invalid_argument("par_loss: logits rows do not match layout");
  const int V = static_cast<int>(logits.cols());
  const int count = layout.targeted_count();
  if (dlogits) dlogits->setZero(rows, V);
  double total = 0.0;
  for (int s = 0; s < rows; ++s) {
    const int target = layout.target_of[s];
    if (target < 0) continue;
    const int tok = seq_tokens[target];
    if (tok < 0 || tok >= V)
      throw std::invalid_argument("par_loss: token id " + std::to_string(tok) + " outside vocab " + std::to_string(V));
    double mx = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(logits(s, v)));
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(static_cast<double>(logits(s, v)) - mx);
    const double lse = mx + std::log(sum);
    total += lse - static_cast<double>(logits(s, tok));
    if (dlogits) {
      for (int v = 0; v < V; ++v) {
        const double p = std::exp(static_cast<double>(logits(s, v)) - lse);
        (*dlogits)(s, v) = static_cast<S>((p - (v == tok ? 1.0 : 0.0)) / count);
      }
    }
  }
  return total / count;
}

template <class S>
double loss_and_grad(const Model<S>& model, std::span<const SlotInput> slots, const AttentionMask& mask,
                     const SequenceLayout& layout, std::span<const int> seq_tokens, Params<S>& grads,
                     double weight, std::mt19937_64* dropout_rng) {
  Tape<S> tape;
  Mat<S> logits = forward_impl<S>(model, slots, mask, dropout_rng, &tape);
  Mat<S> dlogits;
  const double loss = par_loss<S>(logits, layout, seq_tokens, &dlogits);
  if (!std::isfinite(loss)) return loss;
  if (weight != 1.0) dlogits *= static_cast<S>(weight);
  backward<S>(model, tape, slots, mask, dlogits, grads);
  return loss;
}

// ---------------------------------------------------------------- training

int TrainConfig::warmup_steps() const {
  return static_cast<int>(std::round(warmup_fraction * total_steps));
}

void TrainConfig::validate() const {
  if (lr < 0.0) throw std::invalid_argument("train config: lr must be >= 0");
  if (total_steps < 1 || batch_size < 1) throw std::invalid_argument("train config: steps and batch must be positive");
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) throw std::invalid_argument("train config: warmup fraction outside [0, 1]");
  if (max_grad_norm <= 0.0 || weight_decay < 0.0) throw std::invalid_argument("train config: invalid clip or decay");
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) throw std::invalid_argument("train config: betas outside (0, 1)");
}

Trainer::Trainer(Model<float>& model, const SequenceLayout& layout, TrainConfig config, MaskPattern pattern)
    : model_(model), layout_(layout), mask_(build_attention_mask(layout, pattern)), config_(config) {
  config_.validate();
  if (model.config.group_size != layout.n)
    throw std::invalid_argument("trainer: model group size " + std::to_string(model.config.group_size) +
                                " != layout n " + std::to_string(layout.n));
  if (layout.slot_count() > model.config.max_slots) throw std::invalid_argument("trainer: layout exceeds max_slots");
  grads_ = Params<float>::zeros_like(model.params);
  m_ = Params<float>::zeros_like(model.params);
  v_ = Params<float>::zeros_like(model.params);
}

double Trainer::learning_rate(int step) const {
  const int warm = config_.warmup_steps();
  if (step < warm) return config_.lr * static_cast<double>(step + 1) / warm;
  const int decay_steps = std::max(1, config_.total_steps - warm);
  const double progress = std::min(1.0, static_cast<double>(step - warm) / decay_steps);
  return config_.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

StepStats Trainer::train_step(std::span<const TokenGrid> batch, std::mt19937_64& rng) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const ModelConfig& cfg = model_.config;
  grads_.visit([](const ParamInfo&, Mat<float>& m) { m.setZero(); });
  const bool dropout = cfg.dropout > 0.0 || cfg.attn_dropout > 0.0;
  const double weight = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const TokenGrid& g : batch) {
    int label = g.label;
    if (cfg.label_dropout > 0.0 && !bernoulli_keep(rng, cfg.label_dropout)) label = cfg.null_label();
    const std::vector<int> seq = to_sequence(layout_.plan, g.tokens);
    const auto slots = make_slot_inputs(layout_, cfg, seq, label);
    const double l = loss_and_grad<float>(model_, slots, mask_, layout_, seq, grads_, weight,
                                          dropout ? &rng : nullptr);
    if (!std::isfinite(l)) throw NonFiniteLoss("train_step: non-finite loss at step " + std::to_string(step_));
    loss += l * weight;
  }

  double sq = 0.0;
  grads_.visit([&](const ParamInfo&, const Mat<float>& m) { sq += m.template cast<double>().squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteLoss("train_step: non-finite gradient norm");
  const double clip = norm > config_.max_grad_norm ? config_.max_grad_norm / (norm + 1e-12) : 1.0;

  const double lr = learning_rate(step_);
  const int t = step_ + 1;
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const float b1 = static_cast<float>(config_.beta1), b2 = static_cast<float>(config_.beta2);

  // Walk parameters, gradients and moments in lockstep.
  std::vector<std::pair<ParamInfo, Mat<float>*>> ps, gs, ms, vs;
  auto collect = [](auto& params, auto& out) {
    params.visit([&](const ParamInfo& info, Mat<float>& m) { out.emplace_back(info, &m); });
  };
  collect(model_.params, ps);
  collect(grads_, gs);
  collect(m_, ms);
  collect(v_, vs);
  for (size_t i = 0; i < ps.size(); ++i) {
    float* p = ps[i].second->data();
    const float* gr = gs[i].second->data();
    float* m1 = ms[i].second->data();
    float* m2 = vs[i].second->data();
    const double decay = ps[i].first.decay ? config_.weight_decay : 0.0;
    for (Eigen::Index j = 0; j < ps[i].second->size(); ++j) {
      const float gj = static_cast<float>(gr[j] * clip);
      m1[j] = b1 * m1[j] + (1.0f - b1) * gj;
      m2[j] = b2 * m2[j] + (1.0f - b2) * gj * gj;
      const double mhat = m1[j] / bc1;
      const double vhat = m2[j] / bc2;
      p[j] = static_cast<float>(p[j] - lr * (mhat / (std::sqrt(vhat) + config_.eps) + decay * p[j]));
    }
  }
  ++step_;
  return StepStats{loss, norm, norm * clip, lr};
}

double mean_nll(const Model<float>& model, const SequenceLayout& layout, const AttentionMask& mask,
                std::span<const TokenGrid> data) {
  if (data.empty()) throw std::invalid_argument("mean_nll: empty dataset");
  double total = 0.0;
  for (const TokenGrid& g : data) {
    const std::vector<int> seq = to_sequence(layout.plan, g.tokens);
    const auto slots = make_slot_inputs(layout, model.config, seq, g.label);
    total += par_loss<float>(forward<float>(model, slots, mask), layout, seq);
  }
  return total / static_cast<double>(data.size());
}

// ---------------------------------------------------------------- instantiations

template Model<float> init_model<float>(const ModelConfig&, std::uint64_t);
template Model<double> init_model<double>(const ModelConfig&, std::uint64_t);
template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);
template Mat<float> forward<float>(const Model<float>&, std::span<const SlotInput>, const AttentionMask&, std::mt19937_64*);
template Mat<double> forward<double>(const Model<double>&, std::span<const SlotInput>, const AttentionMask&, std::mt19937_64*);
template double par_loss<float>(const Mat<float>&, const SequenceLayout&, std::span<const int>, Mat<float>*);
template double par_loss<double>(const Mat<double>&, const SequenceLayout&, std::span<const int>, Mat<double>*);
template double loss_and_grad<float>(const Model<float>&, std::span<const SlotInput>, const AttentionMask&,
                                     const SequenceLayout&, std::span<const int>, Params<float>&, double,
                                     std::mt19937_64*);
template double loss_and_grad<double>(const Model<double>&, std::span<const SlotInput>, const AttentionMask&,
                                      const SequenceLayout&, std::span<const int>, Params<double>&, double,
                                      std::mt19937_64*);

}  // namespace par
