#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowppf/core/common.hpp"

namespace flowppf {

struct GmmComponent {
  double weight = 1.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Multivariate Gaussian mixture. Immutable after construction; covariances
// are required to be symmetric positive definite (Cholesky must succeed).
class Gmm {
 public:
  Gmm(int dim, std::vector<GmmComponent> components);

  int dim() const { return dim_; }
  int component_count() const { return static_cast<int>(comps_.size()); }
  const std::vector<GmmComponent>& components() const { return comps_; }

  double density(const std::vector<double>& x) const;
  double log_density(const std::vector<double>& x) const;
  double log_density(const Eigen::VectorXd& x) const;

  // log N(x; mu_k, Sigma_k) for component k
  double component_log_density(int k, const Eigen::VectorXd& x) const;

  std::vector<std::vector<double>> sample(int n, std::uint64_t seed) const;
  std::vector<double> sample_one(Rng& rng) const;

  Gmm marginal(const std::vector<int>& keep_dims) const;

  // Conditional mixture of the unobserved dims given observed values; weights
  // are reweighted by the marginal component densities at the observation
  // (log-sum-exp normalized).
  Gmm condition(const std::vector<int>& observed_dims,
                const std::vector<double>& observed_values) const;

  double log_likelihood(const std::vector<std::vector<double>>& samples) const;

  // 1-D helpers (valid when dim() == 1)
  double cdf_1d(double x) const;
  double inverse_cdf_1d(double u, double tol = 1e-10) const;

  std::string to_json_text() const;
  static Gmm from_json_text(const std::string& text);
  static Gmm from_json_file(const std::string& path);
  void save_json_file(const std::string& path) const;

 private:
  void prepare();

  int dim_ = 0;
  std::vector<GmmComponent> comps_;
  std::vector<Eigen::MatrixXd> chol_;      // lower Cholesky factors
  std::vector<double> log_norm_;           // -d/2 log(2pi) - sum log L_ii
  std::vector<double> log_weight_;
};

struct EmOptions {
  int max_iter = 300;
  double rel_tol = 1e-9;
  double cov_floor = 1e-8;
};

// EM fit; best of `restarts` runs by final log-likelihood. Components whose
// weight collapses below 1e-6 trigger a refit with K-1 (with a warning).
Gmm fit_em(const std::vector<std::vector<double>>& samples, int k, int restarts,
           std::uint64_t seed, const EmOptions& opts = {});

// BIC-selected K over 1..k_max.
Gmm fit_em_bic(const std::vector<std::vector<double>>& samples, int k_max, int restarts,
               std::uint64_t seed, const EmOptions& opts = {});

double bic_score(const Gmm& gmm, const std::vector<std::vector<double>>& samples);

}  // namespace flowppf
