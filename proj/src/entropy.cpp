#include "par/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace par {

void FeatureDataset::validate() const {
  shape.validate();
  if (samples < 1 || dim < 1) throw std::invalid_argument("feature dataset: samples and dim must be positive");
  if (values.size() != static_cast<size_t>(samples) * positions() * dim)
    throw std::invalid_argument("feature dataset: value count does not match samples x positions x dim");
}

Eigen::MatrixXd FeatureDataset::gather(const std::vector<int>& pos) const {
  Eigen::MatrixXd out(samples, static_cast<Eigen::Index>(pos.size()) * dim);
  for (int s = 0; s < samples; ++s)
    for (size_t j = 0; j < pos.size(); ++j)
      for (int k = 0; k < dim; ++k) out(s, static_cast<Eigen::Index>(j) * dim + k) = at(s, pos[j], k);
  return out;
}

Eigen::MatrixXd fit_residuals(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda, RidgeModel* model) {
  const Eigen::Index m = y.rows(), d = y.cols(), p = x.cols();
  if (x.rows() != m) throw std::invalid_argument("fit_residuals: X and Y row counts differ");
  if (lambda < 0.0) throw std::invalid_argument("fit_residuals: lambda must be >= 0");
  if (m <= d + p)
    throw std::invalid_argument("fit_residuals: ill-posed, need m > d + p (m=" + std::to_string(m) +
                                ", d=" + std::to_string(d) + ", p=" + std::to_string(p) + ")");
  const Eigen::RowVectorXd ymean = y.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - ymean;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(p, d);
  Eigen::RowVectorXd xmean = Eigen::RowVectorXd::Zero(p);
  if (p > 0) {
    xmean = x.colwise().mean();
    const Eigen::MatrixXd xc = x.rowwise() - xmean;
    if (lambda == 0.0) {
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xc);
      qr.setThreshold(1e-10);
      if (qr.rank() < p)
        throw std::invalid_argument("fit_residuals: conditioning matrix has rank " + std::to_string(qr.rank()) +
                                    " < " + std::to_string(p) + "; use lambda > 0");
      w = qr.solve(yc);
    } else {
      Eigen::MatrixXd gram = xc.transpose() * xc;
      gram.diagonal().array() += lambda;
      w = gram.ldlt().solve(xc.transpose() * yc);
    }
  }
  if (model) {
    model->weights = w;
    model->bias = ymean - xmean * w;
    model->lambda = lambda;
  }
  Eigen::MatrixXd r = yc;
  if (p > 0) r.noalias() -= (x.rowwise() - xmean) * w;
  // Exact least squares leaves a zero-mean residual; remove rounding drift.
  r.rowwise() -= r.colwise().mean();
  return r;
}

Eigen::MatrixXd fit_residuals_mlp(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda,
                                  const MlpOptions& o) {
  Eigen::MatrixXd r = fit_residuals(x, y, lambda);
  const Eigen::Index m = x.rows(), p = x.cols(), d = y.cols();
  if (p == 0 || o.hidden < 1 || o.epochs < 1) return r;

  const Eigen::RowVectorXd mu = x.colwise().mean();
  Eigen::RowVectorXd sd = ((x.rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < p; ++j)
    if (sd(j) < 1e-12) sd(j) = 1.0;
  const Eigen::MatrixXd xs = (x.rowwise() - mu).array().rowwise() / sd.array();

  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd w1(p, o.hidden), w2 = Eigen::MatrixXd::Zero(o.hidden, d);
  for (Eigen::Index i = 0; i < w1.size(); ++i) w1.data()[i] = nd(rng) / std::sqrt(static_cast<double>(p));
  Eigen::RowVectorXd b1 = Eigen::RowVectorXd::Zero(o.hidden), b2 = Eigen::RowVectorXd::Zero(d);

  // Full-batch Adam on mean squared error.
  struct Moments {
    Eigen::MatrixXd m, v;
  };
  auto moments = [](Eigen::Index r, Eigen::Index c) {
    return Moments{Eigen::MatrixXd::Zero(r, c), Eigen::MatrixXd::Zero(r, c)};
  };
  Moments mw1 = moments(p, o.hidden), mw2 = moments(o.hidden, d), mb1 = moments(1, o.hidden), mb2 = moments(1, d);
  auto adam = [&](auto& param, const Eigen::MatrixXd& g, Moments& st, int t) {
    st.m = 0.9 * st.m + 0.1 * g;
    st.v = 0.999 * st.v + 0.001 * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(0.9, t), c2 = 1.0 - std::pow(0.999, t);
    param.array() -= o.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + 1e-8);
  };
  for (int t = 1; t <= o.epochs; ++t) {
    const Eigen::MatrixXd h = ((xs * w1).rowwise() + b1).array().tanh();
    const Eigen::MatrixXd err = ((h * w2).rowwise() + b2) - r;
    const Eigen::MatrixXd g_out = (2.0 / static_cast<double>(m)) * err;
    const Eigen::MatrixXd g_h = (g_out * w2.transpose()).array() * (1.0 - h.array().square());
    const Eigen::MatrixXd gw2 = h.transpose() * g_out;
    const Eigen::MatrixXd gb2 = g_out.colwise().sum();
    const Eigen::MatrixXd gw1 = xs.transpose() * g_h;
    const Eigen::MatrixXd gb1 = g_h.colwise().sum();
    adam(w2, gw2, mw2, t);
    adam(b2, gb2, mb2, t);
    adam(w1, gw1, mw1, t);
    adam(b1, gb1, mb1, t);
  }
  const Eigen::MatrixXd h = ((xs * w1).rowwise() + b1).array().tanh();
  Eigen::MatrixXd out = r - ((h * w2).rowwise() + b2);
  out.rowwise() -= out.colwise().mean();
  return out;
}

double residual_log_det(const Eigen::MatrixXd& residuals, double floor, int dof) {
  const Eigen::Index m = residuals.rows();
  if (m == 0 || residuals.cols() == 0) throw std::invalid_argument("entropy: empty residual matrix");
  if (dof < 0 || dof >= m) throw std::invalid_argument("entropy: degrees of freedom must lie in [0, m)");
  const Eigen::MatrixXd c = residuals.rowwise() - residuals.colwise().mean();
  const Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(m - dof);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) logdet += std::log(std::max(es.eigenvalues()(i), floor));
  return logdet;
}

double floored_entropy(int d, double floor) {
  return 0.5 * (d * std::log(2.0 * std::numbers::pi * std::numbers::e) + d * std::log(floor));
}

double entropy_upper_bound(const Eigen::MatrixXd& residuals, double floor, int dof) {
  const double d = static_cast<double>(residuals.cols());
  return 0.5 * (d * std::log(2.0 * std::numbers::pi * std::numbers::e) + residual_log_det(residuals, floor, dof));
}

namespace {

Eigen::MatrixXd residuals_for(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const EntropyConfig& c) {
  if (c.predictor == Predictor::Mlp) return fit_residuals_mlp(x, y, c.lambda, c.mlp);
  return fit_residuals(x, y, c.lambda);
}

// Parameters fitted per target column: slope per conditioning column plus the bias.
int fitted_dof(const Eigen::MatrixXd& x) { return static_cast<int>(x.cols()) + 1; }

}  // namespace

std::vector<double> pairwise_entropy_map(const FeatureDataset& data, int reference, const EntropyConfig& config) {
  data.validate();
  const int P = data.positions();
  if (reference < 0 || reference >= P) throw std::out_of_range("pairwise_entropy_map: reference position out of range");
  if (data.samples <= 2 * data.dim + 1)
    throw std::invalid_argument("pairwise_entropy_map: insufficient samples (" + std::to_string(data.samples) + ")");
  const Eigen::MatrixXd x = data.gather({reference});
  std::vector<double> out(P);
  for (int i = 0; i < P; ++i) {
    if (i == reference) {
      out[i] = floored_entropy(data.dim, config.floor);
      continue;
    }
    const Eigen::MatrixXd r = residuals_for(x, data.gather({i}), config);
    out[i] = entropy_upper_bound(r, config.floor, fitted_dof(x));
  }
  return out;
}

EntropyReport parallel_entropy_diff(const FeatureDataset& data, const OrderPlan& plan, const EntropyConfig& config) {
  data.validate();
  if (!(data.shape == plan.shape)) throw std::invalid_argument("parallel_entropy_diff: dataset and plan shapes differ");
  if (config.cap < 1) throw std::invalid_argument("parallel_entropy_diff: cap must be >= 1");
  const int P = data.positions();
  const int n = plan.n;
  const int largest = (config.cap + n - 1) * data.dim;
  if (data.samples <= data.dim + largest + 1)
    throw std::invalid_argument("parallel_entropy_diff: conditioning dimension up to " + std::to_string(largest) +
                                " needs more than " + std::to_string(data.dim + largest + 1) + " samples, have " +
                                std::to_string(data.samples) + "; lower the cap or add samples");

  EntropyReport rep;
  rep.shape = plan.shape;
  rep.d = data.dim;
  rep.m = data.samples;
  rep.h_seq.assign(P, 0.0);
  rep.h_par.assign(P, 0.0);
  rep.diff.assign(P, 0.0);
  rep.logdet_seq.assign(P, 0.0);
  rep.logdet_par.assign(P, 0.0);
  rep.parallel.assign(P, 0);

  auto dist2 = [](const Coord& a, const Coord& b) {
    const int dt = a.t - b.t, dy = a.y - b.y, dx = a.x - b.x;
    return dt * dt + dy * dy + dx * dx;
  };

  std::vector<double> diffs;
  for (const Step& step : plan.schedule.steps) {
    for (int k = step.begin; k < step.end(); ++k) {
      const Coord ck = plan.perm[k];
      const int flat = plan.flat_index(ck);
      const Eigen::MatrixXd y = data.gather({flat});

      std::vector<int> prior(step.begin);
      for (int i = 0; i < step.begin; ++i) prior[i] = i;
      std::stable_sort(prior.begin(), prior.end(),
                       [&](int a, int b) { return dist2(plan.perm[a], ck) < dist2(plan.perm[b], ck); });
      if (static_cast<int>(prior.size()) > config.cap) prior.resize(config.cap);
      std::vector<int> par_set, seq_set;
      for (int i : prior) par_set.push_back(plan.flat_index(plan.perm[i]));
      seq_set = par_set;
      for (int i = step.begin; i < k; ++i) seq_set.push_back(plan.flat_index(plan.perm[i]));

      const Eigen::MatrixXd xp = data.gather(par_set);
      const Eigen::MatrixXd rp = residuals_for(xp, y, config);
      rep.logdet_par[flat] = residual_log_det(rp, config.floor, fitted_dof(xp));
      rep.h_par[flat] = entropy_upper_bound(rp, config.floor, fitted_dof(xp));
      if (seq_set.size() == par_set.size()) {
        rep.logdet_seq[flat] = rep.logdet_par[flat];
        rep.h_seq[flat] = rep.h_par[flat];
      } else {
        const Eigen::MatrixXd xs = data.gather(seq_set);
        const Eigen::MatrixXd rs = residuals_for(xs, y, config);
        rep.logdet_seq[flat] = residual_log_det(rs, config.floor, fitted_dof(xs));
        rep.h_seq[flat] = entropy_upper_bound(rs, config.floor, fitted_dof(xs));
      }
      if (step.stage == Stage::Parallel) {
        rep.parallel[flat] = 1;
        rep.diff[flat] = rep.h_par[flat] - rep.h_seq[flat];
        diffs.push_back(rep.diff[flat]);
      }
    }
  }
  if (!diffs.empty()) {
    double mean = 0.0;
    for (double v : diffs) mean += v;
    mean /= static_cast<double>(diffs.size());
    double var = 0.0;
    for (double v : diffs) var += (v - mean) * (v - mean);
    var /= std::max<size_t>(1, diffs.size() - 1);
    rep.mean_diff = mean;
    rep.diff_stderr = std::sqrt(var / static_cast<double>(diffs.size()));
  }

  nlohmann::json meta;
  meta["predictor"] = config.predictor == Predictor::Ridge ? "ridge" : "ridge+mlp";
  meta["lambda"] = config.lambda;
  meta["floor"] = config.floor;
  meta["cap"] = config.cap;
  meta["neighbour_metric"] = "euclidean(t,y,x)";
  meta["covariance_normalization"] = "1/(m - p - 1)";
  meta["order"] = plan.options.scan == ScanOrder::Par ? "par" : "raster";
  meta["n"] = n;
  if (config.predictor == Predictor::Mlp) {
    meta["mlp_hidden"] = config.mlp.hidden;
    meta["mlp_epochs"] = config.mlp.epochs;
    meta["mlp_lr"] = config.mlp.lr;
  }
  rep.metadata = meta.dump();
  return rep;
}

}  // namespace par
