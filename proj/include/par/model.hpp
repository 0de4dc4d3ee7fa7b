#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "par/kernels.hpp"
#include "par/layout.hpp"
#include "par/rope.hpp"
#include "par/token_grid.hpp"

namespace par {

enum class TransitionRope : std::uint8_t {
  Identity,       // transition slots are not rotated
  InheritTarget,  // transition slot i uses the coordinate of the token it predicts
};

// Decoder-only transformer: pre-norm RMSNorm blocks, rotary multi-head
// attention, SiLU-gated feedforward with ffn_dim = mlp_ratio * hidden.
struct ModelConfig {
  int layers = 6;
  int hidden = 256;
  int heads = 8;
  int vocab = 64;
  int labels = 4;
  int group_size = 4;
  int max_slots = 148;
  int mlp_ratio = 4;
  int rope_axes = 2;
  std::array<int, 3> grid_extent{1, 12, 12};  // t, h, w covered by the rotary table
  double rope_base = 10000.0;
  double dropout = 0.1;
  double attn_dropout = 0.1;
  double label_dropout = 0.1;
  double init_std = 0.02;
  double norm_eps = 1e-5;
  TransitionRope transition_rope = TransitionRope::Identity;

  int head_dim() const { return hidden / heads; }
  int ffn_dim() const { return mlp_ratio * hidden; }
  int null_label() const { return labels; }

  // Sized for a grid: group size m^2, slot capacity K + n, rotary extent.
  static ModelConfig for_grid(const GridShape& shape, int layers, int hidden, int heads, int vocab,
                              int labels);

  // Throws std::invalid_argument.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::string to_json_string(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

// Closed-form parameter count.
std::int64_t parameter_count(const ModelConfig& config);

template <class S>
struct LayerParams {
  Mat<S> attn_norm;  // 1 x d
  Mat<S> wqkv;       // d x 3d, columns [q | k | v]
  Mat<S> wo;         // d x d
  Mat<S> mlp_norm;   // 1 x d
  Mat<S> w_gate_up;  // d x 2f, columns [gate | up]
  Mat<S> w_down;     // f x d
};

struct ParamInfo {
  std::string name;
  int rank = 2;
  bool decay = true;
};

template <class S>
struct Params {
  Mat<S> tok_emb;         // V x d
  Mat<S> label_emb;       // (C + 1) x d, last row is the null label
  Mat<S> transition_emb;  // (n - 1) x d
  std::vector<LayerParams<S>> layers;
  Mat<S> final_norm;  // 1 x d
  Mat<S> head;        // d x V

  // Visits every tensor in checkpoint order.
  template <class F>
  void visit(F&& fn);
  template <class F>
  void visit(F&& fn) const;

  static Params zeros_like(const Params& other);
  std::int64_t size() const;
};

template <class S>
struct Model {
  ModelConfig config;
  Params<S> params;
  RopeTable rope;
};

template <class S>
Model<S> init_model(const ModelConfig& config, std::uint64_t seed);

template <class To, class From>
Model<To> cast_model(const Model<From>& model);

RopeTable make_rope_table(const ModelConfig& config);
RopeCoord rope_coord(const Coord& c, int axes);

// One input slot as seen by the model.
struct SlotInput {
  SlotKind kind = SlotKind::Token;
  int id = 0;  // token id, label id, or transition index 1..n-1
  RopeCoord coord = RopeCoord::none();
};

// The first `count` slots of the layout (all when count < 0). seq_tokens holds
// tokens in sequence order; only positions held by those slots are read.
std::vector<SlotInput> make_slot_inputs(const SequenceLayout& layout, const ModelConfig& config,
                                        std::span<const int> seq_tokens, int label,
                                        int count = -1);

// Logits (slots x V). Dropout is active only when dropout_rng is non-null.
template <class S>
Mat<S> forward(const Model<S>& model, std::span<const SlotInput> slots, const AttentionMask& mask,
               std::mt19937_64* dropout_rng = nullptr);

// Mean cross-entropy over slots with a target. Writes d(loss)/d(logits) when
// dlogits is non-null.
template <class S>
double par_loss(const Mat<S>& logits, const SequenceLayout& layout, std::span<const int> seq_tokens,
                Mat<S>* dlogits = nullptr);

// Loss of one sample and gradient accumulation: grads += weight * dL/dparams.
template <class S>
double loss_and_grad(const Model<S>& model, std::span<const SlotInput> slots,
                     const AttentionMask& mask, const SequenceLayout& layout,
                     std::span<const int> seq_tokens, Params<S>& grads, double weight = 1.0,
                     std::mt19937_64* dropout_rng = nullptr);

struct TrainConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 5e-2;
  double warmup_fraction = 0.05;
  int total_steps = 1000;
  int batch_size = 8;
  double max_grad_norm = 1.0;

  int warmup_steps() const;
  void validate() const;
};

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;          // before clipping
  double clipped_grad_norm = 0.0;  // after clipping
  double lr = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// AdamW with linear warmup and cosine decay to zero. Owns the optimizer state;
// the model is updated in place and must not be read concurrently with a step.
class Trainer {
 public:
  Trainer(Model<float>& model, const SequenceLayout& layout, TrainConfig config,
          MaskPattern pattern = MaskPattern::GroupBidirectional);

  // Throws NonFiniteLoss without touching the parameters.
  StepStats train_step(std::span<const TokenGrid> batch, std::mt19937_64& rng);

  double learning_rate(int step) const;
  int step() const { return step_; }
  const SequenceLayout& layout() const { return layout_; }
  const AttentionMask& mask() const { return mask_; }

 private:
  Model<float>& model_;
  SequenceLayout layout_;
  AttentionMask mask_;
  TrainConfig config_;
  Params<float> grads_;
  Params<float> m_;
  Params<float> v_;
  int step_ = 0;
};

// Mean held-out negative log-likelihood per token.
double mean_nll(const Model<float>& model, const SequenceLayout& layout, const AttentionMask& mask,
                std::span<const TokenGrid> data);

// ---------------------------------------------------------------------------

template <class S>
template <class F>
void Params<S>::visit(F&& fn) {
  fn(ParamInfo{"tok_emb", 2, true}, tok_emb);
  fn(ParamInfo{"label_emb", 2, true}, label_emb);
  fn(ParamInfo{"transition_emb", 2, true}, transition_emb);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& L = layers[l];
    fn(ParamInfo{p + "attn_norm", 1, false}, L.attn_norm);
    fn(ParamInfo{p + "wqkv", 2, true}, L.wqkv);
    fn(ParamInfo{p + "wo", 2, true}, L.wo);
    fn(ParamInfo{p + "mlp_norm", 1, false}, L.mlp_norm);
    fn(ParamInfo{p + "w_gate_up", 2, true}, L.w_gate_up);
    fn(ParamInfo{p + "w_down", 2, true}, L.w_down);
  }
  fn(ParamInfo{"final_norm", 1, false}, final_norm);
  fn(ParamInfo{"head", 2, true}, head);
}

template <class S>
template <class F>
void Params<S>::visit(F&& fn) const {
  const_cast<Params<S>*>(this)->visit(
      [&](const ParamInfo& info, Mat<S>& m) { fn(info, static_cast<const Mat<S>&>(m)); });
}

template <class S>
Params<S> Params<S>::zeros_like(const Params& other) {
  Params out = other;
  out.visit([](const ParamInfo&, Mat<S>& m) { m.setZero(); });
  return out;
}

template <class S>
std::int64_t Params<S>::size() const {
  std::int64_t n = 0;
  visit([&](const ParamInfo&, const Mat<S>& m) { n += m.size(); });
  return n;
}

}  // namespace par
