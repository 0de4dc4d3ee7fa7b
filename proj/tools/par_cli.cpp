#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "par/decode.hpp"
#include "par/entropy.hpp"
#include "par/harness.hpp"
#include "par/layout.hpp"
#include "par/model.hpp"
#include "par/order.hpp"

using namespace par;
namespace fs = std::filesystem;

namespace {

GridShape parse_shape(const std::string& text, int m) {
  std::vector<int> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) v.push_back(std::stoi(part));
  if (v.size() == 2) v.insert(v.begin(), 1);
  if (v.size() != 3) throw CLI::ValidationError("--shape", "expected T,H,W or H,W");
  GridShape s{v[0], v[1], v[2], m};
  s.validate();
  return s;
}

std::vector<int> parse_ints(const std::string& text) {
  std::vector<int> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) v.push_back(std::stoi(part));
  return v;
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw std::runtime_error("cannot open " + path);
  return file;
}

OrderOptions order_options(bool raster, bool no_prefix) {
  OrderOptions o;
  o.scan = raster ? ScanOrder::Raster : ScanOrder::Par;
  o.sequential_prefix = !no_prefix;
  return o;
}

// Token ids mapped onto a uniform scalar codebook over [-1, 1].
FeatureDataset token_features(const TokenFile& file) {
  FeatureDataset fd;
  fd.shape = file.shape;
  fd.samples = static_cast<int>(file.grids.size());
  fd.dim = 1;
  fd.values.reserve(static_cast<size_t>(fd.samples) * fd.positions());
  for (const TokenGrid& g : file.grids)
    for (int id : g.tokens) fd.values.push_back(-1.0 + (id + 0.5) * 2.0 / file.vocab);
  return fd;
}

GridShape shape_of(const ModelConfig& c) {
  const int m = static_cast<int>(std::lround(std::sqrt(static_cast<double>(c.group_size))));
  return {c.grid_extent[0], c.grid_extent[1], c.grid_extent[2], m};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallelized autoregressive generation on token grids"};
  app.require_subcommand(1);

  std::string shape_text = "1,12,12";
  int m = 2, vocab = 64, labels = 4, steps = 1000, count = 8;
  std::uint64_t seed = 0;
  double lr = 3e-4, guidance = 1.0, temperature = 1.0;
  int top_k = 0;
  std::string out, ckpt, data;
  bool raster = false, no_prefix = false, causal = false;
  int layers = 6, hidden = 256, heads = 8, batch = 8;

  auto shape_flags = [&](CLI::App* c) {
    c->add_option("--shape", shape_text, "Grid extent T,H,W")->capture_default_str();
    c->add_option("--m", m, "Regions per side")->capture_default_str();
  };
  auto order_flags = [&](CLI::App* c) {
    c->add_flag("--raster", raster, "Raster order with adjacent parallel groups");
    c->add_flag("--no-prefix", no_prefix, "Predict the first group in parallel too");
  };
  auto model_flags = [&](CLI::App* c) {
    c->add_option("--vocab", vocab)->capture_default_str();
    c->add_option("--labels", labels)->capture_default_str();
    c->add_option("--layers", layers)->capture_default_str();
    c->add_option("--hidden", hidden)->capture_default_str();
    c->add_option("--heads", heads)->capture_default_str();
  };

  // synth
  CLI::App* synth = app.add_subcommand("synth", "Write a striped synthetic token dataset");
  SyntheticConfig sc;
  shape_flags(synth);
  synth->add_option("--vocab", vocab)->capture_default_str();
  synth->add_option("--labels", labels)->capture_default_str();
  synth->add_option("--seed", seed)->capture_default_str();
  synth->add_option("--count", count, "Number of grids")->capture_default_str();
  synth->add_option("--corr-length", sc.corr_length)->capture_default_str();
  synth->add_option("--noise", sc.noise)->capture_default_str();
  synth->add_option("--amplitude", sc.amplitude)->capture_default_str();
  synth->add_option("--out", out, "Token file")->required();
  synth->add_option("--image-dir", data, "Also render the first grids as PPM");

  // train
  CLI::App* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  shape_flags(train);
  order_flags(train);
  model_flags(train);
  train->add_option("--seed", seed)->capture_default_str();
  train->add_option("--steps", steps)->capture_default_str();
  train->add_option("--lr", lr)->capture_default_str();
  train->add_option("--batch", batch)->capture_default_str();
  train->add_flag("--causal", causal, "Causal attention inside groups");
  train->add_option("--data", data, "Token file; a synthetic set is generated when omitted");
  train->add_option("--count", count, "Synthetic grids when --data is omitted")->capture_default_str();
  train->add_option("--ckpt", ckpt, "Checkpoint to write")->required();

  // generate
  CLI::App* gen = app.add_subcommand("generate", "Sample grids from a checkpoint");
  int label = -1;
  gen->add_option("--ckpt", ckpt)->required();
  order_flags(gen);
  gen->add_flag("--causal", causal);
  gen->add_option("--seed", seed)->capture_default_str();
  gen->add_option("--count", count, "Samples per label")->capture_default_str();
  gen->add_option("--label", label, "Single label instead of all");
  gen->add_option("--temperature", temperature)->capture_default_str();
  gen->add_option("--top-k", top_k)->capture_default_str();
  gen->add_option("--guidance-scale", guidance)->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  // bench
  CLI::App* bn = app.add_subcommand("bench", "Time batch-1 generation for several group sizes");
  std::string n_text = "1,4,16";
  int reps = 5;
  bn->add_option("--shape", shape_text)->capture_default_str();
  bn->add_option("--n", n_text, "Group sizes")->capture_default_str();
  bn->add_option("--reps", reps)->capture_default_str();
  bn->add_option("--seed", seed)->capture_default_str();
  model_flags(bn);
  bn->add_option("--out", out, "CSV path (stdout when omitted)");

  // entropy
  CLI::App* ent = app.add_subcommand("entropy", "Conditional-entropy analysis of a token file");
  int reference = -1, cap = 32;
  double lambda = 1e-6;
  ent->add_option("--data", data, "Token file")->required();
  ent->add_option("--m", m)->capture_default_str();
  order_flags(ent);
  ent->add_option("--cap", cap)->capture_default_str();
  ent->add_option("--lambda", lambda)->capture_default_str();
  ent->add_option("--ref", reference, "Also write the pairwise map for this flat position");
  ent->add_option("--out", out, "Output prefix")->required();

  // order-dump
  CLI::App* od = app.add_subcommand("order-dump", "Print the generation order as CSV");
  shape_flags(od);
  order_flags(od);
  od->add_option("--out", out);

  // mask-dump
  CLI::App* md = app.add_subcommand("mask-dump", "Print the attention mask and groups as CSV");
  shape_flags(md);
  order_flags(md);
  md->add_flag("--causal", causal);
  md->add_option("--out", out, "Mask CSV; groups go to <out>.groups.csv");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      sc.shape = parse_shape(shape_text, 1);
      sc.vocab = vocab;
      sc.labels = labels;
      sc.samples = count;
      sc.seed = seed;
      const SyntheticDataset ds = gen_synthetic_dataset(sc);
      save_tokens(TokenFile{vocab, sc.shape, ds.grids}, out);
      if (!data.empty()) {
        fs::create_directories(data);
        for (int i = 0; i < std::min<int>(count, 16); ++i)
          write_grid_ppm(fs::path(data) / ("synth_" + std::to_string(i) + ".ppm"), ds.grids[i], vocab);
      }
      std::cout << "wrote " << ds.grids.size() << " grids to " << out << "\n";
    } else if (*train) {
      const GridShape shape = parse_shape(shape_text, m);
      std::vector<TokenGrid> grids;
      if (data.empty()) {
        SyntheticConfig c;
        c.shape = shape;
        c.shape.m = 1;
        c.vocab = vocab;
        c.labels = labels;
        c.samples = count;
        c.seed = seed;
        grids = gen_synthetic_dataset(c).grids;
      } else {
        TokenFile f = load_tokens(data);
        if (f.shape.t != shape.t || f.shape.h != shape.h || f.shape.w != shape.w)
          throw std::invalid_argument("train: --shape does not match the token file");
        vocab = f.vocab;
        grids = std::move(f.grids);
      }
      for (TokenGrid& g : grids) g.shape = shape;
      const SequenceLayout layout = build_sequence_layout(build_order_plan(shape, order_options(raster, no_prefix)));
      const ModelConfig mc = ModelConfig::for_grid(shape, layers, hidden, heads, vocab, labels);
      FitOptions fo;
      fo.train.lr = lr;
      fo.train.total_steps = steps;
      fo.train.batch_size = batch;
      fo.pattern = causal ? MaskPattern::Causal : MaskPattern::GroupBidirectional;
      fo.seed = seed;
      fo.on_step = [&](const StepStats& st, int step) {
        if (step % 50 == 0 || step + 1 == steps)
          std::cout << "step " << step << " loss " << st.loss << " grad_norm " << st.grad_norm << " lr " << st.lr
                    << "\n";
      };
      const Model<float> model = fit_model(mc, layout, grids, fo);
      save_checkpoint(model, ckpt);
      std::cout << "wrote " << ckpt << "\n";
    } else if (*gen) {
      const Model<float> model = load_checkpoint(ckpt);
      const GridShape shape = shape_of(model.config);
      const SequenceLayout layout = build_sequence_layout(build_order_plan(shape, order_options(raster, no_prefix)));
      SamplerConfig s;
      s.temperature = temperature;
      s.top_k = top_k;
      s.guidance_scale = guidance;
      s.seed = seed;
      s.validate();
      const MaskPattern pattern = causal ? MaskPattern::Causal : MaskPattern::GroupBidirectional;
      std::vector<TokenGrid> grids;
      if (label >= 0) {
        if (label >= model.config.labels) throw std::invalid_argument("generate: --label out of range");
        const PackedModel packed(model);
        for (int i = 0; i < count; ++i) {
          s.seed = seed + i;
          grids.push_back(generate(packed, layout, label, s, pattern));
        }
      } else {
        grids = sample_grids(model, layout, count, s, pattern);
      }
      fs::create_directories(out);
      save_tokens(TokenFile{model.config.vocab, shape, grids}, fs::path(out) / "samples.ptok");
      for (size_t i = 0; i < grids.size(); ++i)
        write_grid_ppm(fs::path(out) / ("sample_" + std::to_string(i) + "_label" + std::to_string(grids[i].label) + ".ppm"),
                       grids[i], model.config.vocab);
      std::cout << "wrote " << grids.size() << " samples to " << out << "\n";
    } else if (*bn) {
      const GridShape shape = parse_shape(shape_text, 1);
      ModelConfig base = ModelConfig::for_grid(shape, layers, hidden, heads, vocab, labels);
      const BenchReport rep = bench(base, {shape}, parse_ints(n_text), reps, seed);
      std::ofstream f;
      open_out(out, f) << rep.to_csv();
    } else if (*ent) {
      const TokenFile file = load_tokens(data);
      GridShape shape = file.shape;
      shape.m = m;
      shape.validate();
      FeatureDataset fd = token_features(file);
      fd.shape = shape;
      EntropyConfig ec;
      ec.cap = cap;
      ec.lambda = lambda;
      const EntropyReport rep = parallel_entropy_diff(fd, build_order_plan(shape, order_options(raster, no_prefix)), ec);
      std::ofstream csv(out + "_diff.csv");
      csv << "flat,t,y,x,parallel,h_par,h_seq,diff\n";
      for (int p = 0; p < shape.token_count(); ++p)
        csv << p << ',' << p / (shape.h * shape.w) << ',' << p / shape.w % shape.h << ',' << p % shape.w << ','
            << int(rep.parallel[p]) << ',' << rep.h_par[p] << ',' << rep.h_seq[p] << ',' << rep.diff[p] << '\n';
      std::ofstream(out + "_meta.json") << rep.metadata << '\n';
      for (int t = 0; t < shape.t; ++t) {
        const auto first = rep.diff.begin() + static_cast<long>(t) * shape.h * shape.w;
        write_heatmap_ppm(out + "_diff_t" + std::to_string(t) + ".ppm",
                          std::vector<double>(first, first + shape.h * shape.w), shape.h, shape.w);
      }
      if (reference >= 0) {
        const std::vector<double> h = pairwise_entropy_map(fd, reference, ec);
        std::ofstream pc(out + "_pairwise.csv");
        pc << "flat,h\n";
        for (size_t p = 0; p < h.size(); ++p) pc << p << ',' << h[p] << '\n';
        std::vector<double> shown = h;
        shown[reference] = std::nan("");
        for (int t = 0; t < shape.t; ++t) {
          const auto first = shown.begin() + static_cast<long>(t) * shape.h * shape.w;
          write_heatmap_ppm(out + "_pairwise_t" + std::to_string(t) + ".ppm",
                            std::vector<double>(first, first + shape.h * shape.w), shape.h, shape.w);
        }
      }
      std::cout << "mean diff " << rep.mean_diff << " +- " << rep.diff_stderr << "\n";
    } else if (*od) {
      const OrderPlan plan = build_order_plan(parse_shape(shape_text, m), order_options(raster, no_prefix));
      std::vector<int> step_of(plan.token_count());
      for (int s = 0; s < plan.step_count(); ++s)
        for (int k = plan.schedule.steps[s].begin; k < plan.schedule.steps[s].end(); ++k) step_of[k] = s;
      std::ofstream f;
      std::ostream& os = open_out(out, f);
      os << "seq,t,y,x,step,stage\n";
      for (int k = 0; k < plan.token_count(); ++k) {
        const Coord c = plan.perm[k];
        os << k << ',' << c.t << ',' << c.y << ',' << c.x << ',' << step_of[k] << ','
           << (plan.schedule.steps[step_of[k]].stage == Stage::Parallel ? "parallel" : "sequential") << '\n';
      }
      os << "step_count," << plan.step_count() << '\n';
    } else if (*md) {
      const SequenceLayout layout =
          build_sequence_layout(build_order_plan(parse_shape(shape_text, m), order_options(raster, no_prefix)));
      const AttentionMask mask =
          build_attention_mask(layout, causal ? MaskPattern::Causal : MaskPattern::GroupBidirectional);
      std::ofstream f;
      std::ostream& os = open_out(out, f);
      for (int q = 0; q < mask.size(); ++q)
        for (int k = 0; k < mask.size(); ++k) os << (mask.visible(q, k) ? '1' : '0') << (k + 1 < mask.size() ? ',' : '\n');
      std::ofstream gf;
      std::ostream& gs = out.empty() || out == "-" ? std::cout : (gf.open(out + ".groups.csv"), gf);
      gs << "slot,kind,index,group,target\n";
      for (int s = 0; s < layout.slot_count(); ++s) {
        const Slot& sl = layout.slots[s];
        const char* kind = sl.kind == SlotKind::Label ? "label" : sl.kind == SlotKind::Token ? "token" : "transition";
        gs << s << ',' << kind << ',' << sl.index << ',' << layout.group_of[s] << ',' << layout.target_of[s] << '\n';
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
