#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "par/layout.hpp"
#include "par/model.hpp"
#include "par/token_grid.hpp"

namespace par {

// Per-layer rotated keys and values of every slot fed so far.
// Head-major: row head * capacity + slot of k[layer] holds that head's key.
struct KVCache {
  std::vector<Mat<float>> k;  // layers x (heads * capacity x head_dim)
  std::vector<Mat<float>> v;
  int length = 0;
  int heads = 0;

  KVCache() = default;
  KVCache(int layers, int capacity, int heads, int head_dim);
  int capacity() const { return k.empty() || heads == 0 ? 0 : static_cast<int>(k[0].rows()) / heads; }
  // Concatenated heads of one slot, laid out like a hidden-sized row.
  Mat<float> key_row(int layer, int slot) const;
};

struct SamplerConfig {
  double temperature = 1.0;
  int top_k = 0;  // 0 keeps the whole vocabulary
  double guidance_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Stateless uniform stream: draw(i) depends only on (seed, stream, i).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}
  double uniform(std::uint64_t counter) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
};

// uncond + s * (cond - uncond).
Mat<float> cfg_combine(const Mat<float>& cond, const Mat<float>& uncond, double s);

// Samples one id from a logit row using the single uniform u in [0, 1).
int sample_row(std::span<const float> logits, const SamplerConfig& sampler, double u);

// One id per row; row r consumes draw first_counter + r.
std::vector<int> sample_tokens(const Mat<float>& logits, const SamplerConfig& sampler,
                               const CounterRng& rng, std::uint64_t first_counter);

class DecodeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// The model's projection weights re-laid out for the decode kernels. Holds a
// reference to the model; repack after its parameters change.
class PackedModel {
 public:
  struct Layer {
    kernels::PackedWeights wqkv, wo, w_gate_up, w_down;
  };

  explicit PackedModel(const Model<float>& model);
  const Model<float>& model() const { return model_; }
  const Layer& layer(int l) const { return layers_[l]; }
  const kernels::PackedWeights& head() const { return head_; }

 private:
  const Model<float>& model_;
  std::vector<Layer> layers_;
  kernels::PackedWeights head_;
};

// Incremental decoder over one layout. Single consumer: the cache mutates.
// The model (and packed model, when given) must outlive the engine.
class DecodeEngine {
 public:
  DecodeEngine(const Model<float>& model, const SequenceLayout& layout,
               MaskPattern pattern = MaskPattern::GroupBidirectional);
  DecodeEngine(const PackedModel& packed, const SequenceLayout& layout,
               MaskPattern pattern = MaskPattern::GroupBidirectional);

  // Feeds exactly the next attention group; returns its logit rows.
  Mat<float> decode_chunk(std::span<const SlotInput> chunk);

  void reset();
  int next_group() const { return next_group_; }
  int invocations() const { return invocations_; }
  const KVCache& cache() const { return cache_; }
  const SequenceLayout& layout() const { return layout_; }
  const AttentionMask& mask() const { return mask_; }

 private:
  void init();

  std::shared_ptr<const PackedModel> owned_;
  const PackedModel* packed_;
  const Model<float>& model_;
  SequenceLayout layout_;
  AttentionMask mask_;
  KVCache cache_;
  int next_group_ = 0;
  int invocations_ = 0;
};

struct GenerateStats {
  int invocations_per_branch = 0;
  int branches = 1;
  std::vector<int> sequence;  // sampled tokens in sequence order
};

// Stage 1 one token per step, then n tokens per step. Guidance runs a second
// null-label stream when s != 1.
TokenGrid generate(const Model<float>& model, const SequenceLayout& layout, int label,
                   const SamplerConfig& sampler, MaskPattern pattern = MaskPattern::GroupBidirectional,
                   GenerateStats* stats = nullptr);
TokenGrid generate(const PackedModel& packed, const SequenceLayout& layout, int label,
                   const SamplerConfig& sampler, MaskPattern pattern = MaskPattern::GroupBidirectional,
                   GenerateStats* stats = nullptr);

}  // namespace par
