#include "par/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <list>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"

namespace par {

// ---------------------------------------------------------------- synthetic data

void SyntheticConfig::validate() const {
  shape.validate();
  if (vocab < 2) throw std::invalid_argument("synthetic: vocab must be >= 2");
  if (labels < 1) throw std::invalid_argument("synthetic: labels must be >= 1");
  if (samples < 1) throw std::invalid_argument("synthetic: samples must be >= 1");
  if (periods.empty() || angles.empty()) throw std::invalid_argument("synthetic: periods and angles must be non-empty");
  for (double p : periods)
    if (!(p > 0)) throw std::invalid_argument("synthetic: periods must be positive");
  if (corr_length < 0 || noise < 0 || amplitude < 0 || range < 0)
    throw std::invalid_argument("synthetic: amplitude, noise, range and corr_length must be >= 0");
  if (codebook_range() <= 0) throw std::invalid_argument("synthetic: codebook range is zero");
}

double SyntheticConfig::codebook_range() const { return range > 0 ? range : amplitude + 3.0 * noise; }

namespace {

double stripe(const SyntheticConfig& c, int label, int y, int x, double phase) {
  const double period = c.periods[label % c.periods.size()];
  const double a = c.angles[label % c.angles.size()];
  return c.amplitude * std::cos(2.0 * std::numbers::pi * (x * std::cos(a) + y * std::sin(a)) / period + phase);
}

Coord coord_of(const GridShape& s, int flat) { return {flat / (s.h * s.w), flat / s.w % s.h, flat % s.w}; }

}  // namespace

SyntheticDataset gen_synthetic_dataset(const SyntheticConfig& c) {
  c.validate();
  const int P = c.shape.token_count();
  Eigen::MatrixXd chol;
  if (c.corr_length > 0) {
    Eigen::MatrixXd cov(P, P);
    for (int a = 0; a < P; ++a)
      for (int b = 0; b < P; ++b) {
        const Coord ca = coord_of(c.shape, a), cb = coord_of(c.shape, b);
        const double d = std::sqrt(double((ca.t - cb.t) * (ca.t - cb.t) + (ca.y - cb.y) * (ca.y - cb.y) +
                                          (ca.x - cb.x) * (ca.x - cb.x)));
        cov(a, b) = std::exp(-d / c.corr_length);
      }
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw std::runtime_error("synthetic: covariance is not positive definite");
    chol = llt.matrixL();
  }

  const double R = c.codebook_range();
  SyntheticDataset out;
  out.codebook.resize(c.vocab);
  for (int j = 0; j < c.vocab; ++j) out.codebook[j] = -R + (j + 0.5) * 2.0 * R / c.vocab;
  out.features.shape = c.shape;
  out.features.samples = c.samples;
  out.features.dim = 1;
  out.features.values.resize(static_cast<size_t>(c.samples) * P);
  out.grids.reserve(c.samples);

  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> uphase(0.0, 2.0 * std::numbers::pi);
  Eigen::VectorXd z(P);
  for (int s = 0; s < c.samples; ++s) {
    TokenGrid g;
    g.shape = c.shape;
    g.label = s % c.labels;
    g.tokens.resize(P);
    const double phase = uphase(rng);
    for (int p = 0; p < P; ++p) z(p) = nd(rng);
    const Eigen::VectorXd e = c.corr_length > 0 ? Eigen::VectorXd(chol * z) : z;
    for (int p = 0; p < P; ++p) {
      const Coord q = coord_of(c.shape, p);
      const double f = stripe(c, g.label, q.y, q.x, phase) + c.noise * e(p);
      out.features.at(s, p, 0) = f;
      const int id = static_cast<int>(std::floor((f + R) / (2.0 * R) * c.vocab));
      g.tokens[p] = std::clamp(id, 0, c.vocab - 1);
    }
    out.grids.push_back(std::move(g));
  }
  return out;
}

std::vector<double> dequantize(const TokenGrid& grid, const std::vector<double>& codebook) {
  std::vector<double> v(grid.tokens.size());
  for (size_t i = 0; i < v.size(); ++i) {
    const int id = grid.tokens[i];
    if (id < 0 || id >= static_cast<int>(codebook.size())) throw std::out_of_range("dequantize: token outside codebook");
    v[i] = codebook[id];
  }
  return v;
}

// ---------------------------------------------------------------- quality proxies

namespace {

struct PairTables {
  std::vector<double> horizontal, vertical;
};

PairTables pair_tables(const std::vector<TokenGrid>& grids, int V) {
  PairTables t{std::vector<double>(static_cast<size_t>(V) * V, 0.0), std::vector<double>(static_cast<size_t>(V) * V, 0.0)};
  double nh = 0, nv = 0;
  for (const TokenGrid& g : grids) {
    const GridShape& s = g.shape;
    if (static_cast<int>(g.tokens.size()) != s.token_count()) throw std::invalid_argument("bigram: malformed grid");
    for (int f = 0; f < s.t; ++f)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const int a = g.at({f, y, x});
          if (a < 0 || a >= V) throw std::out_of_range("bigram: token id outside vocabulary");
          if (x + 1 < s.w) {
            t.horizontal[static_cast<size_t>(a) * V + g.at({f, y, x + 1})] += 1;
            nh += 1;
          }
          if (y + 1 < s.h) {
            t.vertical[static_cast<size_t>(a) * V + g.at({f, y + 1, x})] += 1;
            nv += 1;
          }
        }
  }
  if (nh > 0)
    for (double& v : t.horizontal) v /= nh;
  if (nv > 0)
    for (double& v : t.vertical) v /= nv;
  return t;
}

double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

}  // namespace

double bigram_divergence(const std::vector<TokenGrid>& samples, const std::vector<TokenGrid>& reference, int vocab) {
  if (vocab < 1) throw std::invalid_argument("bigram: vocab must be positive");
  if (samples.empty() || reference.empty()) throw std::invalid_argument("bigram: empty sample set");
  const PairTables a = pair_tables(samples, vocab), b = pair_tables(reference, vocab);
  return 0.5 * (total_variation(a.horizontal, b.horizontal) + total_variation(a.vertical, b.vertical));
}

double structure_score(const TokenGrid& grid, const std::vector<double>& codebook, const SyntheticConfig& c) {
  const std::vector<double> v = dequantize(grid, codebook);
  const int P = static_cast<int>(v.size());
  Eigen::VectorXd y(P);
  Eigen::MatrixXd basis(P, 2);
  for (int p = 0; p < P; ++p) {
    const Coord q = coord_of(grid.shape, p);
    y(p) = v[p];
    basis(p, 0) = stripe(c, grid.label, q.y, q.x, 0.0);
    basis(p, 1) = stripe(c, grid.label, q.y, q.x, std::numbers::pi / 2);
  }
  y.array() -= y.mean();
  basis.rowwise() -= basis.colwise().mean();
  const double total = y.squaredNorm();
  if (total <= 0) return 0.0;
  const Eigen::VectorXd coef = basis.colPivHouseholderQr().solve(y);
  const double rss = (y - basis * coef).squaredNorm();
  return std::sqrt(std::clamp(1.0 - rss / total, 0.0, 1.0));
}

LabelStructure label_structure_score(const std::vector<TokenGrid>& samples, const std::vector<double>& codebook,
                                     const SyntheticConfig& c) {
  std::vector<double> sum(c.labels, 0.0);
  std::vector<int> count(c.labels, 0);
  for (const TokenGrid& g : samples) {
    if (g.label < 0 || g.label >= c.labels) throw std::out_of_range("structure: label out of range");
    sum[g.label] += structure_score(g, codebook, c);
    count[g.label] += 1;
  }
  LabelStructure out;
  out.per_label.assign(c.labels, std::numeric_limits<double>::quiet_NaN());
  double total = 0;
  int present = 0;
  for (int l = 0; l < c.labels; ++l) {
    if (count[l] == 0) continue;
    out.per_label[l] = sum[l] / count[l];
    total += out.per_label[l];
    ++present;
  }
  out.mean = present ? total / present : std::numeric_limits<double>::quiet_NaN();
  return out;
}

// ---------------------------------------------------------------- training loop

Model<float> fit_model(const ModelConfig& config, const SequenceLayout& layout, std::span<const TokenGrid> data,
                       const FitOptions& o) {
  if (data.empty()) throw std::invalid_argument("fit_model: empty training set");
  Model<float> model = init_model<float>(config, o.seed);
  Trainer trainer(model, layout, o.train, o.pattern);
  std::mt19937_64 rng(o.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  size_t cursor = order.size();
  std::vector<TokenGrid> batch(o.train.batch_size);
  for (int step = 0; step < o.train.total_steps; ++step) {
    for (TokenGrid& g : batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      g = data[order[cursor++]];
    }
    const StepStats st = trainer.train_step(batch, rng);
    if (o.on_step) o.on_step(st, step);
  }
  return model;
}

std::vector<TokenGrid> sample_grids(const Model<float>& model, const SequenceLayout& layout, int per_label,
                                    const SamplerConfig& sampler, MaskPattern pattern) {
  std::vector<TokenGrid> out;
  const PackedModel packed(model);
  SamplerConfig s = sampler;
  int i = 0;
  for (int label = 0; label < model.config.labels; ++label)
    for (int k = 0; k < per_label; ++k, ++i) {
      s.seed = sampler.seed + i;
      out.push_back(generate(packed, layout, label, s, pattern));
    }
  return out;
}

// ---------------------------------------------------------------- bench

std::string BenchReport::to_csv() const {
  std::ostringstream os;
  os << "t,h,w,n,steps,seconds,tokens_per_second,speedup\n";
  for (const BenchRow& r : rows)
    os << r.shape.t << ',' << r.shape.h << ',' << r.shape.w << ',' << r.n << ',' << r.steps << ',' << r.seconds << ','
       << r.tokens_per_second << ',' << r.speedup << '\n';
  return os.str();
}

namespace {

int square_side(int n) {
  const int m = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (n < 1 || m * m != n) throw std::invalid_argument("bench: group size " + std::to_string(n) + " is not a square");
  return m;
}

ModelConfig bench_config(const ModelConfig& base, GridShape shape) {
  ModelConfig cfg = ModelConfig::for_grid(shape, base.layers, base.hidden, base.heads, base.vocab, base.labels);
  cfg.mlp_ratio = base.mlp_ratio;
  cfg.rope_base = base.rope_base;
  cfg.norm_eps = base.norm_eps;
  cfg.init_std = base.init_std;
  cfg.transition_rope = base.transition_rope;
  return cfg;
}

GridShape with_group(GridShape shape, int n) {
  shape.m = square_side(n);
  shape.validate();
  return shape;
}

struct TimedSetup {
  TimedSetup(const ModelConfig& base, GridShape shape, int n_, std::uint64_t seed)
      : n(n_),
        model(init_model<float>(bench_config(base, with_group(shape, n_)), seed)),
        packed(model),
        layout(build_sequence_layout(build_order_plan(with_group(shape, n_)))) {}

  int n;
  Model<float> model;
  PackedModel packed;
  SequenceLayout layout;
  std::vector<double> times;
};

double median(std::vector<double> t) {
  std::sort(t.begin(), t.end());
  return t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
}

}  // namespace

// Repetitions are interleaved across group sizes so drift in machine speed
// affects every n alike.
BenchReport bench(const ModelConfig& base, const std::vector<GridShape>& shapes, const std::vector<int>& n_values,
                  int reps, std::uint64_t seed) {
  if (reps < 1) throw std::invalid_argument("bench: reps must be >= 1");
  BenchReport rep;
  for (const GridShape& shape : shapes) {
    std::list<TimedSetup> setups;
    for (int n : n_values) setups.emplace_back(base, shape, n, seed);
    if (std::find(n_values.begin(), n_values.end(), 1) == n_values.end()) setups.emplace_back(base, shape, 1, seed);
    SamplerConfig sampler;
    for (TimedSetup& s : setups) {
      sampler.seed = seed;
      generate(s.packed, s.layout, 0, sampler);  // warm-up
    }
    for (int r = 0; r < reps; ++r) {
      sampler.seed = seed + 1 + r;
      for (TimedSetup& s : setups) {
        const auto t0 = std::chrono::steady_clock::now();
        generate(s.packed, s.layout, r % s.model.config.labels, sampler);
        s.times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
    }
    double base_time = 0;
    for (const TimedSetup& s : setups)
      if (s.n == 1) base_time = median(s.times);
    auto it = setups.begin();
    for (size_t i = 0; i < n_values.size(); ++i, ++it) {
      BenchRow row;
      row.shape = shape;
      row.shape.m = square_side(n_values[i]);
      row.n = n_values[i];
      row.steps = it->layout.plan.step_count();
      row.seconds = median(it->times);
      row.tokens_per_second = shape.token_count() / row.seconds;
      row.speedup = base_time / row.seconds;
      rep.rows.push_back(row);
    }
  }
  return rep;
}

// ---------------------------------------------------------------- persistence

namespace {

constexpr char kCheckpointMagic[4] = {'P', 'A', 'R', 'C'};
constexpr char kTokenMagic[4] = {'P', 'T', 'O', 'K'};
constexpr char kLabelMagic[4] = {'P', 'L', 'A', 'B'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!f) throw std::runtime_error("write failed: " + path.string());
  }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::filesystem::path& path, std::string what) : what_(std::move(what)) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    buf_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    name_ = path.string();
  }
  [[noreturn]] void fail(const std::string& msg) const { fail_at(pos_, msg); }
  [[noreturn]] void fail_at(size_t off, const std::string& msg) const {
    throw FormatError(what_ + " " + name_ + ": " + msg + " at offset " + std::to_string(off));
  }
  void need(size_t n) const {
    if (buf_.size() - pos_ < n) fail("truncated, need " + std::to_string(n) + " more bytes");
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void read(void* dst, size_t n) {
    need(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  void magic(const char (&m)[4]) {
    need(4);
    if (std::memcmp(buf_.data() + pos_, m, 4) != 0) fail("bad magic");
    pos_ += 4;
  }
  size_t pos() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }
  size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::string what_;
  std::string name_;
  std::vector<char> buf_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path) {
  Writer w;
  const std::string blob = to_json_string(model.config);
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));
  w.bytes(blob.data(), blob.size());
  model.params.visit([&](const ParamInfo& info, const Mat<float>& t) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(info.name.size()));
    w.bytes(info.name.data(), info.name.size());
    w.put<std::uint8_t>(0);  // float32
    w.put<std::uint8_t>(static_cast<std::uint8_t>(info.rank));
    if (info.rank == 2) w.put<std::uint64_t>(static_cast<std::uint64_t>(t.rows()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(t.cols()));
    w.bytes(t.data(), sizeof(float) * static_cast<size_t>(t.size()));
  });
  w.save(path);
}

std::uint64_t checkpoint_size(const ModelConfig& config) {
  const Model<float> m = init_model<float>(config, 0);
  std::uint64_t n = 12 + to_json_string(config).size();
  m.params.visit([&](const ParamInfo& info, const Mat<float>& t) {
    n += 2 + info.name.size() + 2 + 8 * static_cast<std::uint64_t>(info.rank) + 4 * static_cast<std::uint64_t>(t.size());
  });
  return n;
}

Model<float> load_checkpoint(const std::filesystem::path& path) {
  Reader r(path, "checkpoint");
  r.magic(kCheckpointMagic);
  const size_t version_at = r.pos();
  if (r.get<std::uint32_t>() != kVersion) r.fail_at(version_at, "unsupported version");
  const auto blob_len = r.get<std::uint32_t>();
  const size_t blob_at = r.pos();
  r.need(blob_len);
  std::string blob(blob_len, '\0');
  r.read(blob.data(), blob_len);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(blob);
  } catch (const std::exception& e) {
    r.fail_at(blob_at, std::string("bad config: ") + e.what());
  }
  Model<float> model = init_model<float>(cfg, 0);
  model.params.visit([&](const ParamInfo& info, Mat<float>& t) {
    const size_t at = r.pos();
    const auto len = r.get<std::uint16_t>();
    std::string name(len, '\0');
    r.read(name.data(), len);
    if (name != info.name) r.fail_at(at, "expected tensor '" + info.name + "', found '" + name + "'");
    const size_t dtype_at = r.pos();
    if (r.get<std::uint8_t>() != 0) r.fail_at(dtype_at, "unsupported dtype for " + name);
    const size_t rank_at = r.pos();
    if (r.get<std::uint8_t>() != info.rank) r.fail_at(rank_at, "rank mismatch for " + name);
    const size_t dims_at = r.pos();
    const std::uint64_t rows = info.rank == 2 ? r.get<std::uint64_t>() : 1;
    const std::uint64_t cols = r.get<std::uint64_t>();
    if (rows != static_cast<std::uint64_t>(t.rows()) || cols != static_cast<std::uint64_t>(t.cols()))
      r.fail_at(dims_at, "shape mismatch for " + name);
    r.read(t.data(), sizeof(float) * static_cast<size_t>(t.size()));
  });
  if (!r.done()) r.fail(std::to_string(r.remaining()) + " trailing bytes");
  return model;
}

void save_tokens(const TokenFile& file, const std::filesystem::path& path) {
  if (file.vocab < 1) throw std::invalid_argument("save_tokens: vocab must be positive");
  const int P = file.shape.token_count();
  Writer w;
  w.bytes(kTokenMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.vocab));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.grids.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.shape.t));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.shape.h));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(file.shape.w));
  Writer labels;
  labels.bytes(kLabelMagic, 4);
  labels.put<std::uint32_t>(kVersion);
  labels.put<std::uint32_t>(static_cast<std::uint32_t>(file.grids.size()));
  for (const TokenGrid& g : file.grids) {
    if (static_cast<int>(g.tokens.size()) != P) throw std::invalid_argument("save_tokens: grid size differs from header");
    for (int id : g.tokens) {
      if (id < 0 || id >= file.vocab) throw std::out_of_range("save_tokens: token id outside vocabulary");
      w.put<std::uint32_t>(static_cast<std::uint32_t>(id));
    }
    labels.put<std::int32_t>(g.label);
  }
  w.save(path);
  labels.save(path.string() + ".labels");
}

TokenFile load_tokens(const std::filesystem::path& path) {
  Reader r(path, "tokens");
  r.magic(kTokenMagic);
  const size_t version_at = r.pos();
  if (r.get<std::uint32_t>() != kVersion) r.fail_at(version_at, "unsupported version");
  TokenFile out;
  const size_t vocab_at = r.pos();
  out.vocab = static_cast<int>(r.get<std::uint32_t>());
  if (out.vocab < 1) r.fail_at(vocab_at, "vocab must be positive");
  const std::uint32_t count = r.get<std::uint32_t>();
  const size_t shape_at = r.pos();
  out.shape.t = static_cast<int>(r.get<std::uint32_t>());
  out.shape.h = static_cast<int>(r.get<std::uint32_t>());
  out.shape.w = static_cast<int>(r.get<std::uint32_t>());
  if (out.shape.t < 1 || out.shape.h < 1 || out.shape.w < 1) r.fail_at(shape_at, "non-positive grid extent");
  const std::uint64_t P = static_cast<std::uint64_t>(out.shape.t) * out.shape.h * out.shape.w;
  if (r.remaining() != P * count * 4)
    r.fail("payload of " + std::to_string(r.remaining()) + " bytes, expected " + std::to_string(P * count * 4));
  out.grids.resize(count);
  for (TokenGrid& g : out.grids) {
    g.shape = out.shape;
    g.tokens.resize(P);
    for (int& id : g.tokens) {
      const size_t at = r.pos();
      const std::uint32_t v = r.get<std::uint32_t>();
      if (v >= static_cast<std::uint32_t>(out.vocab)) r.fail_at(at, "token id " + std::to_string(v) + " >= vocab");
      id = static_cast<int>(v);
    }
  }
  const std::filesystem::path side = path.string() + ".labels";
  if (std::filesystem::exists(side)) {
    Reader l(side, "labels");
    l.magic(kLabelMagic);
    const size_t lv_at = l.pos();
    if (l.get<std::uint32_t>() != kVersion) l.fail_at(lv_at, "unsupported version");
    const size_t count_at = l.pos();
    if (l.get<std::uint32_t>() != count) l.fail_at(count_at, "label count differs from token file");
    for (TokenGrid& g : out.grids) {
      const size_t at = l.pos();
      g.label = l.get<std::int32_t>();
      if (g.label < 0) l.fail_at(at, "negative label");
    }
    if (!l.done()) l.fail(std::to_string(l.remaining()) + " trailing bytes");
  }
  return out;
}

// ---------------------------------------------------------------- images

void write_ppm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  if (width < 1 || height < 1) throw std::invalid_argument("ppm: empty image");
  if (rgb.size() != static_cast<size_t>(width) * height * 3) throw std::invalid_argument("ppm: pixel buffer size mismatch");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << "P6\n" << width << ' ' << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

void write_grid_ppm(const std::filesystem::path& path, const TokenGrid& grid, int vocab, int scale) {
  const GridShape& s = grid.shape;
  if (scale < 1 || vocab < 1) throw std::invalid_argument("ppm: scale and vocab must be positive");
  const int W = s.w * s.t * scale, H = s.h * scale;
  std::vector<std::uint8_t> rgb(static_cast<size_t>(W) * H * 3);
  for (int py = 0; py < H; ++py)
    for (int px = 0; px < W; ++px) {
      const int f = px / (s.w * scale), x = px / scale % s.w, y = py / scale;
      const int id = grid.at({f, y, x});
      const auto g = static_cast<std::uint8_t>(vocab > 1 ? std::lround(255.0 * id / (vocab - 1)) : 0);
      std::uint8_t* p = &rgb[(static_cast<size_t>(py) * W + px) * 3];
      p[0] = p[1] = p[2] = g;
    }
  write_ppm(path, W, H, rgb);
}

void write_heatmap_ppm(const std::filesystem::path& path, const std::vector<double>& values, int height, int width,
                       int scale) {
  if (static_cast<int>(values.size()) != height * width) throw std::invalid_argument("ppm: value count mismatch");
  if (scale < 1) throw std::invalid_argument("ppm: scale must be positive");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : values)
    if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  const int W = width * scale, H = height * scale;
  std::vector<std::uint8_t> rgb(static_cast<size_t>(W) * H * 3);
  for (int py = 0; py < H; ++py)
    for (int px = 0; px < W; ++px) {
      const double v = values[static_cast<size_t>(py / scale) * width + px / scale];
      std::uint8_t* p = &rgb[(static_cast<size_t>(py) * W + px) * 3];
      if (!std::isfinite(v)) {
        p[0] = p[1] = p[2] = 0;
        continue;
      }
      const double u = hi > lo ? (v - lo) / (hi - lo) : 0.5;
      const double r = u < 0.5 ? 2 * u : 1.0, b = u < 0.5 ? 1.0 : 2 * (1 - u), g = std::min(r, b);
      p[0] = static_cast<std::uint8_t>(std::lround(255 * r));
      p[1] = static_cast<std::uint8_t>(std::lround(255 * g));
      p[2] = static_cast<std::uint8_t>(std::lround(255 * b));
    }
  write_ppm(path, W, H, rgb);
}

}  // namespace par
