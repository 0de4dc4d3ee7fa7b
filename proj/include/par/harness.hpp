#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "par/decode.hpp"
#include "par/entropy.hpp"
#include "par/model.hpp"
#include "par/token_grid.hpp"

namespace par {

// ---------------------------------------------------------------- synthetic data

// Per label a stripe texture A cos(2 pi (x cos a + y sin a) / period + phase)
// with a random phase, plus a Gaussian field with covariance
// noise^2 exp(-dist / corr_length). Values are quantized to `vocab` uniform
// levels of one scalar codebook shared by every position.
struct SyntheticConfig {
  GridShape shape{1, 12, 12, 1};
  int vocab = 64;
  int labels = 4;
  int samples = 1000;
  std::vector<double> periods{4.0, 6.0, 4.0, 6.0};
  std::vector<double> angles{0.0, 1.5707963267948966, 0.7853981633974483, 2.356194490192345};
  double amplitude = 1.0;
  double corr_length = 2.0;  // 0 gives independent positions
  double noise = 0.5;
  double range = 0.0;  // codebook covers [-range, range]; 0 picks amplitude + 3 noise
  std::uint64_t seed = 0;

  void validate() const;
  double codebook_range() const;
};

struct SyntheticDataset {
  std::vector<TokenGrid> grids;
  FeatureDataset features;  // pre-quantization values, dim 1
  std::vector<double> codebook;
};

SyntheticDataset gen_synthetic_dataset(const SyntheticConfig& config);

// Codebook value of every token of a grid, flat raster order.
std::vector<double> dequantize(const TokenGrid& grid, const std::vector<double>& codebook);

// ---------------------------------------------------------------- quality proxies

// Total-variation distance between adjacent-pair frequency tables, averaged
// over horizontal and vertical pairs.
double bigram_divergence(const std::vector<TokenGrid>& samples, const std::vector<TokenGrid>& reference, int vocab);

// Phase-free fit of a grid's centered values to its label's stripe frequency;
// 1 is a perfect stripe, 0 none.
double structure_score(const TokenGrid& grid, const std::vector<double>& codebook, const SyntheticConfig& config);

struct LabelStructure {
  std::vector<double> per_label;  // mean per label, NaN when a label has no samples
  double mean = 0.0;              // mean over labels present
};
LabelStructure label_structure_score(const std::vector<TokenGrid>& samples, const std::vector<double>& codebook,
                                     const SyntheticConfig& config);

struct QualityProxy {
  double nll = 0.0;
  double bigram = 0.0;
  double structure = 0.0;
};

// ---------------------------------------------------------------- training loop

struct FitOptions {
  TrainConfig train;
  MaskPattern pattern = MaskPattern::GroupBidirectional;
  std::uint64_t seed = 0;  // init, batch order and dropout
  std::function<void(const StepStats&, int step)> on_step;
};

// Fresh model trained for train.total_steps minibatches drawn by reshuffling
// the data every epoch.
Model<float> fit_model(const ModelConfig& config, const SequenceLayout& layout, std::span<const TokenGrid> data,
                       const FitOptions& options);

// per_label samples for every label; sample i uses seed sampler.seed + i.
std::vector<TokenGrid> sample_grids(const Model<float>& model, const SequenceLayout& layout, int per_label,
                                    const SamplerConfig& sampler,
                                    MaskPattern pattern = MaskPattern::GroupBidirectional);

// ---------------------------------------------------------------- bench

struct BenchRow {
  GridShape shape;
  int n = 1;
  int steps = 0;
  double seconds = 0.0;  // median wall-clock per sample
  double tokens_per_second = 0.0;
  double speedup = 1.0;  // time(n = 1) / time(n) on the same grid size
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::string to_csv() const;
};

// Random-weight models built from `base` for each group size; batch size 1,
// single guidance stream. Group sizes must be perfect squares dividing the grid.
BenchReport bench(const ModelConfig& base, const std::vector<GridShape>& shapes, const std::vector<int>& n_values,
                  int reps, std::uint64_t seed = 0);

// ---------------------------------------------------------------- persistence

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path);
Model<float> load_checkpoint(const std::filesystem::path& path);
// Header plus every tensor record, in bytes.
std::uint64_t checkpoint_size(const ModelConfig& config);

struct TokenFile {
  int vocab = 0;
  GridShape shape;  // m unused
  std::vector<TokenGrid> grids;
};

// Writes `path` and the label sidecar `path`.labels.
void save_tokens(const TokenFile& file, const std::filesystem::path& path);
TokenFile load_tokens(const std::filesystem::path& path);
inline constexpr std::uint64_t kTokenHeaderBytes = 28;

// ---------------------------------------------------------------- images

// Binary P6 image.
void write_ppm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb);
// Grey levels by token id, each token drawn as a scale x scale block; frames side by side.
void write_grid_ppm(const std::filesystem::path& path, const TokenGrid& grid, int vocab, int scale = 8);
// Blue-white-red ramp between the finite min and max; non-finite cells are black.
void write_heatmap_ppm(const std::filesystem::path& path, const std::vector<double>& values, int height, int width,
                       int scale = 8);

}  // namespace par
