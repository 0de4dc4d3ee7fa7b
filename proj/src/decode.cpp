#include "par/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>

#include "model_ops.hpp"

namespace par {

KVCache::KVCache(int layers, int capacity, int heads_, int head_dim) : heads(heads_) {
  k.assign(layers, Mat<float>::Zero(static_cast<Eigen::Index>(heads_) * capacity, head_dim));
  v.assign(layers, Mat<float>::Zero(static_cast<Eigen::Index>(heads_) * capacity, head_dim));
}

Mat<float> KVCache::key_row(int layer, int slot) const {
  const int hd = static_cast<int>(k[layer].cols());
  Mat<float> out(1, heads * hd);
  for (int h = 0; h < heads; ++h) out.block(0, h * hd, 1, hd) = k[layer].row(h * capacity() + slot);
  return out;
}

void SamplerConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("sampler: temperature must be > 0");
  if (top_k < 0) throw std::invalid_argument("sampler: top_k must be >= 0");
  if (!(guidance_scale >= 0.0)) throw std::invalid_argument("sampler: guidance scale must be >= 0");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

double CounterRng::uniform(std::uint64_t counter) const {
  const std::uint64_t h = splitmix64(splitmix64(splitmix64(seed_) ^ stream_) ^ counter);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

Mat<float> cfg_combine(const Mat<float>& cond, const Mat<float>& uncond, double s) {
  if (cond.rows() != uncond.rows() || cond.cols() != uncond.cols())
    throw std::invalid_argument("cfg_combine: shape mismatch");
  if (s == 1.0) return cond;
  if (s == 0.0) return uncond;
  Mat<float> out(cond.rows(), cond.cols());
  const float sf = static_cast<float>(s);
  for (Eigen::Index i = 0; i < cond.size(); ++i)
    out.data()[i] = uncond.data()[i] + sf * (cond.data()[i] - uncond.data()[i]);
  return out;
}

int sample_row(std::span<const float> logits, const SamplerConfig& sampler, double u) {
  const int V = static_cast<int>(logits.size());
  if (V == 0) throw std::invalid_argument("sample_row: empty logit row");
  const double inv_t = 1.0 / sampler.temperature;
  std::vector<int> ids;
  ids.reserve(V);
  for (int i = 0; i < V; ++i)
    if (logits[i] != -std::numeric_limits<float>::infinity() && !std::isnan(logits[i])) ids.push_back(i);
  if (ids.empty()) throw std::invalid_argument("sample_row: every logit is -inf");

  if (sampler.top_k > 0 && sampler.top_k < static_cast<int>(ids.size())) {
    std::nth_element(ids.begin(), ids.begin() + sampler.top_k, ids.end(), [&](int a, int b) {
      return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
    });
    ids.resize(sampler.top_k);
    std::sort(ids.begin(), ids.end());
  }
  if (ids.size() == 1) return ids[0];

  double mx = -std::numeric_limits<double>::infinity();
  for (int i : ids) mx = std::max(mx, static_cast<double>(logits[i]) * inv_t);
  std::vector<double> w(ids.size());
  double sum = 0.0;
  for (size_t j = 0; j < ids.size(); ++j) {
    w[j] = std::exp(static_cast<double>(logits[ids[j]]) * inv_t - mx);
    sum += w[j];
  }
  const double target = u * sum;
  double acc = 0.0;
  for (size_t j = 0; j < ids.size(); ++j) {
    acc += w[j];
    if (target < acc) return ids[j];
  }
  return ids.back();
}

std::vector<int> sample_tokens(const Mat<float>& logits, const SamplerConfig& sampler,
                               const CounterRng& rng, std::uint64_t first_counter) {
  sampler.validate();
  std::vector<int> out(logits.rows());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    std::span<const float> row(logits.data() + r * logits.cols(), logits.cols());
    out[r] = sample_row(row, sampler, rng.uniform(first_counter + r));
  }
  return out;
}

// ---------------------------------------------------------------- engine

namespace {

kernels::PackedWeights pack(const Mat<float>& w) {
  return kernels::pack_weights(w.data(), static_cast<int>(w.rows()), static_cast<int>(w.cols()));
}

void packed_matmul(const Mat<float>& x, const kernels::PackedWeights& w, Mat<float>& y) {
  y.resize(x.rows(), w.cols);
  kernels::matmul_packed_f32(x.data(), static_cast<int>(x.rows()), w, y.data());
}

}  // namespace

PackedModel::PackedModel(const Model<float>& model) : model_(model) {
  for (const LayerParams<float>& L : model.params.layers)
    layers_.push_back(Layer{pack(L.wqkv), pack(L.wo), pack(L.w_gate_up), pack(L.w_down)});
  head_ = pack(model.params.head);
}

DecodeEngine::DecodeEngine(const Model<float>& model, const SequenceLayout& layout, MaskPattern pattern)
    : owned_(std::make_shared<const PackedModel>(model)),
      packed_(owned_.get()),
      model_(model),
      layout_(layout),
      mask_(build_attention_mask(layout, pattern)) {
  init();
}

DecodeEngine::DecodeEngine(const PackedModel& packed, const SequenceLayout& layout, MaskPattern pattern)
    : packed_(&packed), model_(packed.model()), layout_(layout), mask_(build_attention_mask(layout, pattern)) {
  init();
}

void DecodeEngine::init() {
  const Model<float>& model = model_;
  const SequenceLayout& layout = layout_;
  if (model.config.group_size != layout.n)
    throw std::invalid_argument("decode: model group size " + std::to_string(model.config.group_size) +
                                " != layout n " + std::to_string(layout.n));
  if (layout.slot_count() > model.config.max_slots)
    throw std::invalid_argument("decode: layout needs " + std::to_string(layout.slot_count()) +
                                " slots, model supports " + std::to_string(model.config.max_slots));
  cache_ = KVCache(model.config.layers, layout.slot_count(), model.config.heads, model.config.head_dim());
}

void DecodeEngine::reset() {
  cache_.length = 0;
  next_group_ = 0;
  invocations_ = 0;
}

Mat<float> DecodeEngine::decode_chunk(std::span<const SlotInput> chunk) {
  const ModelConfig& cfg = model_.config;
  const Params<float>& P = model_.params;
  if (next_group_ >= layout_.group_count()) throw DecodeError("decode_chunk: every group has been fed");
  const SlotRange group = layout_.groups[next_group_];
  if (group.begin != cache_.length)
    throw DecodeError("decode_chunk: cache length " + std::to_string(cache_.length) + " but group " +
                      std::to_string(next_group_) + " starts at slot " + std::to_string(group.begin));
  const int c = static_cast<int>(chunk.size());
  if (c != group.size())
    throw DecodeError("decode_chunk: chunk of " + std::to_string(c) + " slots, group " +
                      std::to_string(next_group_) + " has " + std::to_string(group.size()));
  for (int i = 0; i < c; ++i) {
    if (chunk[i].kind != layout_.slots[group.begin + i].kind)
      throw DecodeError("decode_chunk: slot " + std::to_string(group.begin + i) + " kind does not match layout");
  }

  const int d = cfg.hidden, H = cfg.heads, hd = cfg.head_dim();
  const int base = cache_.length;
  const int nkeys = base + c;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<RopeCoord> coords(c);
  for (int i = 0; i < c; ++i) coords[i] = chunk[i].coord;

  Mat<float> x, h, qkv, ctx(c, d), o, gu, act, dn;
  detail::embed(P, cfg, chunk, x);
  std::vector<float> probs(nkeys);
  for (int l = 0; l < cfg.layers; ++l) {
    const LayerParams<float>& L = P.layers[l];
    const PackedModel::Layer& W = packed_->layer(l);
    detail::rmsnorm_rows(x, L.attn_norm, cfg.norm_eps, h);
    packed_matmul(h, W.wqkv, qkv);
    detail::rotate_qk(qkv, coords, H, hd, model_.rope);
    Mat<float>& K = cache_.k[l];
    Mat<float>& Vc = cache_.v[l];
    const int cap = cache_.capacity();
    for (int i = 0; i < c; ++i) {
      const float* row = qkv.data() + static_cast<size_t>(i) * 3 * d;
      for (int head = 0; head < H; ++head) {
        const size_t at = (static_cast<size_t>(head) * cap + base + i) * hd;
        std::copy_n(row + d + head * hd, hd, K.data() + at);
        std::copy_n(row + 2 * d + head * hd, hd, Vc.data() + at);
      }
    }
    for (int head = 0; head < H; ++head) {
      const float* kh = K.data() + static_cast<size_t>(head) * cap * hd;
      const float* vh = Vc.data() + static_cast<size_t>(head) * cap * hd;
      for (int i = 0; i < c; ++i) {
        const std::uint8_t* vis = mask_.row(base + i);
        const float* qp = qkv.data() + static_cast<size_t>(i) * 3 * d + head * hd;
        detail::attention_probs(qp, kh, hd, vis, nkeys, hd, scale, probs.data());
        detail::weighted_sum(probs.data(), vis, nkeys, vh, hd, hd,
                             ctx.data() + static_cast<size_t>(i) * d + head * hd);
      }
    }
    packed_matmul(ctx, W.wo, o);
    x += o;
    detail::rmsnorm_rows(x, L.mlp_norm, cfg.norm_eps, h);
    packed_matmul(h, W.w_gate_up, gu);
    detail::swiglu_rows(gu, act);
    packed_matmul(act, W.w_down, dn);
    x += dn;
  }
  detail::rmsnorm_rows(x, P.final_norm, cfg.norm_eps, h);
  Mat<float> logits;
  packed_matmul(h, packed_->head(), logits);
  cache_.length = nkeys;
  ++next_group_;
  ++invocations_;
  return logits;
}

// ---------------------------------------------------------------- generate

namespace {

std::vector<SlotInput> chunk_inputs(const SequenceLayout& layout, const ModelConfig& cfg, const SlotRange& g,
                                    const std::vector<int>& seq, const std::vector<char>& have, int label) {
  std::vector<SlotInput> out(g.size());
  for (int s = g.begin; s < g.end; ++s) {
    const Slot& slot = layout.slots[s];
    SlotInput& in = out[s - g.begin];
    in.kind = slot.kind;
    switch (slot.kind) {
      case SlotKind::Label:
        in.id = label;
        break;
      case SlotKind::Token:
        if (!have[slot.index])
          throw DecodeError("generate: slot " + std::to_string(s) + " needs token " + std::to_string(slot.index) +
                            " which has not been sampled");
        in.id = seq[slot.index];
        in.coord = rope_coord(layout.plan.perm[slot.index], cfg.rope_axes);
        break;
      case SlotKind::Transition:
        in.id = slot.index;
        if (cfg.transition_rope == TransitionRope::InheritTarget && layout.target_of[s] >= 0)
          in.coord = rope_coord(layout.plan.perm[layout.target_of[s]], cfg.rope_axes);
        break;
    }
  }
  return out;
}

}  // namespace

TokenGrid generate(const Model<float>& model, const SequenceLayout& layout, int label,
                   const SamplerConfig& sampler, MaskPattern pattern, GenerateStats* stats) {
  return generate(PackedModel(model), layout, label, sampler, pattern, stats);
}

TokenGrid generate(const PackedModel& packed, const SequenceLayout& layout, int label,
                   const SamplerConfig& sampler, MaskPattern pattern, GenerateStats* stats) {
  sampler.validate();
  const ModelConfig& cfg = packed.model().config;
  if (label < 0 || label > cfg.labels) throw std::invalid_argument("generate: label outside [0, C]");
  const bool guided = sampler.guidance_scale != 1.0;
  DecodeEngine cond(packed, layout, pattern);
  std::optional<DecodeEngine> uncond;
  if (guided) uncond.emplace(packed, layout, pattern);
  const CounterRng rng(sampler.seed);

  const int K = layout.plan.token_count();
  std::vector<int> seq(K, 0);
  std::vector<char> have(K, 0);
  int sampled = 0;
  // The final group's predictions fall past the end, so it is never fed.
  for (int g = 0; g + 1 < layout.group_count(); ++g) {
    const SlotRange& range = layout.groups[g];
    Mat<float> logits = cond.decode_chunk(chunk_inputs(layout, cfg, range, seq, have, label));
    if (guided) {
      Mat<float> u = uncond->decode_chunk(chunk_inputs(layout, cfg, range, seq, have, cfg.null_label()));
      logits = cfg_combine(logits, u, sampler.guidance_scale);
    }
    for (int s = range.begin; s < range.end; ++s) {
      const int target = layout.target_of[s];
      if (target < 0) continue;
      if (have[target]) throw DecodeError("generate: token " + std::to_string(target) + " sampled twice");
      std::span<const float> row(logits.data() + static_cast<size_t>(s - range.begin) * logits.cols(),
                                 logits.cols());
      seq[target] = sample_row(row, sampler, rng.uniform(static_cast<std::uint64_t>(target)));
      have[target] = 1;
      ++sampled;
    }
  }
  if (sampled != K)
    throw DecodeError("generate: sampled " + std::to_string(sampled) + " of " + std::to_string(K) + " tokens");

  if (stats) {
    stats->invocations_per_branch = cond.invocations();
    stats->branches = guided ? 2 : 1;
    stats->sequence = seq;
  }
  TokenGrid grid;
  grid.shape = layout.plan.shape;
  grid.tokens = from_sequence(layout.plan, seq);
  grid.label = label;
  return grid;
}

}  // namespace par
