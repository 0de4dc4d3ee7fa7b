#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "par/order.hpp"

namespace par {

// Continuous per-position features: samples x positions x dim, positions in
// flat raster order of `shape`.
struct FeatureDataset {
  GridShape shape;
  int samples = 0;
  int dim = 1;
  std::vector<double> values;

  int positions() const { return shape.token_count(); }
  double& at(int s, int p, int k) { return values[(static_cast<size_t>(s) * positions() + p) * dim + k]; }
  double at(int s, int p, int k) const { return values[(static_cast<size_t>(s) * positions() + p) * dim + k]; }
  // m x (|positions| * dim) design matrix.
  Eigen::MatrixXd gather(const std::vector<int>& positions) const;
  void validate() const;
};

enum class Predictor : std::uint8_t { Ridge, Mlp };

struct RidgeModel {
  Eigen::MatrixXd weights;  // p x d
  Eigen::RowVectorXd bias;  // 1 x d
  double lambda = 0.0;
};

struct MlpOptions {
  int hidden = 16;
  int epochs = 200;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

// Residuals Y - f(X) of a ridge fit with centering and an unpenalized bias.
// Requires m > d + p; with lambda = 0 a rank-deficient X is rejected.
Eigen::MatrixXd fit_residuals(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda,
                              RidgeModel* model = nullptr);

// Ridge first, then a one-hidden-layer tanh network fitted to what is left.
Eigen::MatrixXd fit_residuals_mlp(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda,
                                  const MlpOptions& options);

inline constexpr double kEigenFloor = 1e-9;

// 0.5 * log((2 pi e)^d * prod max(eig_i, floor)) of the residual covariance.
// The covariance is normalized by 1/(m - dof); dof = 0 gives the plain 1/m
// sample covariance, dof = p + 1 removes the bias of a fitted regression.
double entropy_upper_bound(const Eigen::MatrixXd& residuals, double floor = kEigenFloor, int dof = 0);
double residual_log_det(const Eigen::MatrixXd& residuals, double floor = kEigenFloor, int dof = 0);
// Value returned for a fully determined d-dimensional target.
double floored_entropy(int d, double floor = kEigenFloor);

struct EntropyConfig {
  double lambda = 1e-6;
  double floor = kEigenFloor;
  int cap = 32;  // nearest prior positions kept in the parallel conditioning set
  Predictor predictor = Predictor::Ridge;
  MlpOptions mlp;
};

// H(v_i | v_j) for every position i; the reference position gets the floor.
std::vector<double> pairwise_entropy_map(const FeatureDataset& data, int reference, const EntropyConfig& config = {});

struct EntropyReport {
  GridShape shape;
  // Indexed by flat raster position.
  std::vector<double> h_seq;
  std::vector<double> h_par;
  std::vector<double> diff;
  std::vector<double> logdet_seq;
  std::vector<double> logdet_par;
  std::vector<char> parallel;  // stage-2 position
  int d = 1;
  int m = 0;
  double mean_diff = 0.0;  // over stage-2 positions
  double diff_stderr = 0.0;
  std::string metadata;  // JSON: predictor, lambda, floor, cap, normalization, order
};

// Per position k: H(v_k | V_par) - H(v_k | V_seq), with V_par the `cap`
// spatially nearest tokens of earlier steps and V_seq = V_par plus the earlier
// tokens of k's own step. Stage-1 positions report 0.
EntropyReport parallel_entropy_diff(const FeatureDataset& data, const OrderPlan& plan, const EntropyConfig& config = {});

}  // namespace par
