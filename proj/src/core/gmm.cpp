#include "flowppf/core/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace flowppf {

using json = nlohmann::json;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double logsumexp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace

Gmm::Gmm(int dim, std::vector<GmmComponent> components) : dim_(dim), comps_(std::move(components)) {
  require(dim_ >= 1, ErrorCode::argument, "gmm: dimension must be >= 1");
  require(!comps_.empty(), ErrorCode::argument, "gmm: at least one component required");
  prepare();
}

void Gmm::prepare() {
  double wsum = 0;
  for (const auto& c : comps_) {
    require(c.weight > 0, ErrorCode::data, "gmm: component weights must be positive");
    require(c.mean.size() == dim_, ErrorCode::data, "gmm: mean dimension mismatch");
    require(c.cov.rows() == dim_ && c.cov.cols() == dim_, ErrorCode::data,
            "gmm: covariance dimension mismatch");
    wsum += c.weight;
  }
  require(std::abs(wsum - 1.0) < 1e-6, ErrorCode::data, "gmm: weights must sum to 1");
  for (auto& c : comps_) c.weight /= wsum;

  chol_.clear();
  log_norm_.clear();
  log_weight_.clear();
  for (const auto& c : comps_) {
    Eigen::LLT<Eigen::MatrixXd> llt(c.cov);
    if (llt.info() != Eigen::Success)
      raise(ErrorCode::data, "gmm: covariance is not positive definite (Cholesky failed)");
    Eigen::MatrixXd l = llt.matrixL();
    double logdet_half = 0;
    for (int i = 0; i < dim_; ++i) logdet_half += std::log(l(i, i));
    chol_.push_back(std::move(l));
    log_norm_.push_back(-0.5 * dim_ * kLog2Pi - logdet_half);
    log_weight_.push_back(std::log(c.weight));
  }
}

double Gmm::component_log_density(int k, const Eigen::VectorXd& x) const {
  const auto& c = comps_[static_cast<std::size_t>(k)];
  Eigen::VectorXd d = x - c.mean;
  // solve L y = d
  chol_[static_cast<std::size_t>(k)].triangularView<Eigen::Lower>().solveInPlace(d);
  return log_norm_[static_cast<std::size_t>(k)] - 0.5 * d.squaredNorm();
}

double Gmm::log_density(const Eigen::VectorXd& x) const {
  require(x.size() == dim_, ErrorCode::argument, "gmm: point dimension mismatch");
  std::vector<double> terms(comps_.size());
  for (std::size_t k = 0; k < comps_.size(); ++k)
    terms[k] = log_weight_[k] + component_log_density(static_cast<int>(k), x);
  return logsumexp(terms);
}

double Gmm::log_density(const std::vector<double>& x) const {
  return log_density(Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<long>(x.size())));
}

double Gmm::density(const std::vector<double>& x) const { return std::exp(log_density(x)); }

std::vector<double> Gmm::sample_one(Rng& rng) const {
  // component by weight, then Gaussian draw through the Cholesky factor
  double u = rng.uniform01();
  std::size_t k = 0;
  double acc = 0;
  for (; k < comps_.size(); ++k) {
    acc += comps_[k].weight;
    if (u <= acc) break;
  }
  if (k == comps_.size()) k = comps_.size() - 1;
  Eigen::VectorXd z(dim_);
  for (int i = 0; i < dim_; ++i) z(i) = rng.normal();
  Eigen::VectorXd x = comps_[k].mean + chol_[k] * z;
  return std::vector<double>(x.data(), x.data() + dim_);
}

std::vector<std::vector<double>> Gmm::sample(int n, std::uint64_t seed) const {
  require(n >= 0, ErrorCode::argument, "gmm: sample count must be >= 0");
  Rng rng(derive_seed(seed, 0x9333u));
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(sample_one(rng));
  return out;
}

Gmm Gmm::marginal(const std::vector<int>& keep_dims) const {
  require(!keep_dims.empty(), ErrorCode::argument, "gmm: marginal needs a non-empty index set");
  for (int d : keep_dims)
    require(d >= 0 && d < dim_, ErrorCode::argument, "gmm: marginal index out of range");
  const int m = static_cast<int>(keep_dims.size());
  std::vector<GmmComponent> out;
  for (const auto& c : comps_) {
    GmmComponent oc;
    oc.weight = c.weight;
    oc.mean = Eigen::VectorXd(m);
    oc.cov = Eigen::MatrixXd(m, m);
    for (int i = 0; i < m; ++i) {
      oc.mean(i) = c.mean(keep_dims[static_cast<std::size_t>(i)]);
      for (int j = 0; j < m; ++j)
        oc.cov(i, j) = c.cov(keep_dims[static_cast<std::size_t>(i)],
                             keep_dims[static_cast<std::size_t>(j)]);
    }
    out.push_back(std::move(oc));
  }
  return Gmm(m, std::move(out));
}

Gmm Gmm::condition(const std::vector<int>& observed_dims,
                   const std::vector<double>& observed_values) const {
  require(!observed_dims.empty(), ErrorCode::argument, "gmm: condition needs observed dims");
  require(observed_dims.size() == observed_values.size(), ErrorCode::argument,
          "gmm: observed dims and values must match");
  require(static_cast<int>(observed_dims.size()) < dim_, ErrorCode::argument,
          "gmm: cannot condition on all dims");
  std::vector<char> is_obs(static_cast<std::size_t>(dim_), 0);
  for (int d : observed_dims) {
    require(d >= 0 && d < dim_, ErrorCode::argument, "gmm: condition index out of range");
    require(!is_obs[static_cast<std::size_t>(d)], ErrorCode::argument,
            "gmm: duplicate condition index");
    is_obs[static_cast<std::size_t>(d)] = 1;
  }
  for (double v : observed_values)
    require(std::isfinite(v), ErrorCode::argument, "gmm: observed values must be finite");

  std::vector<int> free_dims;
  for (int d = 0; d < dim_; ++d)
    if (!is_obs[static_cast<std::size_t>(d)]) free_dims.push_back(d);
  const int nf = static_cast<int>(free_dims.size());
  const int no = static_cast<int>(observed_dims.size());

  Eigen::VectorXd s(no);
  for (int i = 0; i < no; ++i) s(i) = observed_values[static_cast<std::size_t>(i)];

  std::vector<GmmComponent> out;
  std::vector<double> log_w(comps_.size());
  for (std::size_t k = 0; k < comps_.size(); ++k) {
    const auto& c = comps_[k];
    Eigen::VectorXd mu_o(no), mu_f(nf);
    Eigen::MatrixXd s_oo(no, no), s_ff(nf, nf), s_fo(nf, no);
    for (int i = 0; i < no; ++i) {
      mu_o(i) = c.mean(observed_dims[static_cast<std::size_t>(i)]);
      for (int j = 0; j < no; ++j)
        s_oo(i, j) = c.cov(observed_dims[static_cast<std::size_t>(i)],
                           observed_dims[static_cast<std::size_t>(j)]);
    }
    for (int i = 0; i < nf; ++i) {
      mu_f(i) = c.mean(free_dims[static_cast<std::size_t>(i)]);
      for (int j = 0; j < nf; ++j)
        s_ff(i, j) = c.cov(free_dims[static_cast<std::size_t>(i)],
                           free_dims[static_cast<std::size_t>(j)]);
      for (int j = 0; j < no; ++j)
        s_fo(i, j) = c.cov(free_dims[static_cast<std::size_t>(i)],
                           observed_dims[static_cast<std::size_t>(j)]);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(s_oo);
    if (llt.info() != Eigen::Success)
      raise(ErrorCode::data, "gmm: observed-block covariance singular in condition");
    Eigen::VectorXd diff = s - mu_o;
    Eigen::VectorXd alpha = llt.solve(diff);           // Sigma_oo^{-1} (s - mu_o)
    Eigen::MatrixXd beta = llt.solve(s_fo.transpose());  // Sigma_oo^{-1} Sigma_of

    GmmComponent oc;
    oc.weight = c.weight;  // replaced below
    oc.mean = mu_f + s_fo * alpha;
    oc.cov = s_ff - s_fo * beta;
    // symmetrize against roundoff
    oc.cov = 0.5 * (oc.cov + oc.cov.transpose());
    out.push_back(std::move(oc));

    // marginal density of the observation under component k, in log space
    Eigen::MatrixXd l = llt.matrixL();
    double logdet_half = 0;
    for (int i = 0; i < no; ++i) logdet_half += std::log(l(i, i));
    Eigen::VectorXd y = diff;
    l.triangularView<Eigen::Lower>().solveInPlace(y);
    log_w[k] = std::log(c.weight) - 0.5 * no * kLog2Pi - logdet_half - 0.5 * y.squaredNorm();
  }
  double lse = logsumexp(log_w);
  require(std::isfinite(lse), ErrorCode::numeric,
          "gmm: conditional weights underflowed to zero for all components");
  for (std::size_t k = 0; k < out.size(); ++k) out[k].weight = std::exp(log_w[k] - lse);
  // guard against exact zeros after normalization
  double wsum = 0;
  for (auto& c : out) {
    c.weight = std::max(c.weight, 1e-300);
    wsum += c.weight;
  }
  for (auto& c : out) c.weight /= wsum;
  return Gmm(nf, std::move(out));
}

double Gmm::log_likelihood(const std::vector<std::vector<double>>& samples) const {
  double ll = 0;
  for (const auto& s : samples) ll += log_density(s);
  return ll;
}

double Gmm::cdf_1d(double x) const {
  require(dim_ == 1, ErrorCode::argument, "gmm: cdf_1d requires a 1-D mixture");
  double acc = 0;
  for (std::size_t k = 0; k < comps_.size(); ++k) {
    double mu = comps_[k].mean(0);
    double sd = std::sqrt(comps_[k].cov(0, 0));
    acc += comps_[k].weight * 0.5 * std::erfc(-(x - mu) / (sd * M_SQRT2));
  }
  return acc;
}

double Gmm::inverse_cdf_1d(double u, double tol) const {
  require(dim_ == 1, ErrorCode::argument, "gmm: inverse_cdf_1d requires a 1-D mixture");
  require(u > 0.0 && u < 1.0, ErrorCode::argument, "gmm: quantile level must be in (0,1)");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& c : comps_) {
    double sd = std::sqrt(c.cov(0, 0));
    lo = std::min(lo, c.mean(0) - 12 * sd);
    hi = std::max(hi, c.mean(0) + 12 * sd);
  }
  // widen until the bracket contains u
  int guard = 0;
  while (cdf_1d(lo) > u) {
    lo -= (hi - lo);
    if (++guard > 64) raise(ErrorCode::numeric, "gmm: inverse cdf bracket failure (low)");
  }
  guard = 0;
  while (cdf_1d(hi) < u) {
    hi += (hi - lo);
    if (++guard > 64) raise(ErrorCode::numeric, "gmm: inverse cdf bracket failure (high)");
  }
  while (hi - lo > tol) {
    double mid = 0.5 * (lo + hi);
    if (cdf_1d(mid) < u)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

std::string Gmm::to_json_text() const {
  json j;
  j["dim"] = dim_;
  j["components"] = json::array();
  for (const auto& c : comps_) {
    json jc;
    jc["weight"] = c.weight;
    jc["mean"] = std::vector<double>(c.mean.data(), c.mean.data() + dim_);
    json cov = json::array();
    for (int r = 0; r < dim_; ++r) {
      json row = json::array();
      for (int cc = 0; cc < dim_; ++cc) row.push_back(c.cov(r, cc));
      cov.push_back(row);
    }
    jc["cov"] = cov;
    j["components"].push_back(jc);
  }
  return j.dump(2);
}

Gmm Gmm::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::data, std::string("gmm: invalid JSON: ") + e.what());
  }
  try {
    int dim = j.at("dim").get<int>();
    std::vector<GmmComponent> comps;
    for (const auto& jc : j.at("components")) {
      GmmComponent c;
      c.weight = jc.at("weight").get<double>();
      auto mean = jc.at("mean").get<std::vector<double>>();
      c.mean = Eigen::Map<Eigen::VectorXd>(mean.data(), static_cast<long>(mean.size()));
      const auto& cov = jc.at("cov");
      c.cov = Eigen::MatrixXd(dim, dim);
      for (int r = 0; r < dim; ++r)
        for (int cc = 0; cc < dim; ++cc) c.cov(r, cc) = cov.at(r).at(cc).get<double>();
      comps.push_back(std::move(c));
    }
    return Gmm(dim, std::move(comps));
  } catch (const json::exception& e) {
    raise(ErrorCode::data, std::string("gmm: malformed JSON document: ") + e.what());
  }
}

Gmm Gmm::from_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::data, "gmm: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

void Gmm::save_json_file(const std::string& path) const {
  std::ofstream out(path);
  require(out.good(), ErrorCode::data, "gmm: cannot write '" + path + "'");
  out << to_json_text() << '\n';
}

namespace {

struct EmResult {
  std::vector<GmmComponent> comps;
  double loglik = -std::numeric_limits<double>::infinity();
  bool degenerate = false;
};

EmResult run_em_once(const std::vector<std::vector<double>>& samples, int k, Rng& rng,
                     const EmOptions& opts) {
  const int n = static_cast<int>(samples.size());
  const int d = static_cast<int>(samples[0].size());

  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = samples[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];

  Eigen::VectorXd data_mean = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - data_mean.transpose();
  Eigen::MatrixXd data_cov = (centered.transpose() * centered) / std::max(1, n - 1);
  data_cov += opts.cov_floor * Eigen::MatrixXd::Identity(d, d);

  // init: random distinct sample points as means, shared data covariance
  std::vector<GmmComponent> comps(static_cast<std::size_t>(k));
  std::vector<int> picks;
  for (int c = 0; c < k; ++c) {
    int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    // nudge duplicates instead of rejecting so tiny datasets still work
    picks.push_back(pick);
    comps[static_cast<std::size_t>(c)].weight = 1.0 / k;
    comps[static_cast<std::size_t>(c)].mean = x.row(pick).transpose();
    if (c > 0) {
      for (int prev = 0; prev < c; ++prev)
        if (picks[static_cast<std::size_t>(prev)] == pick) {
          for (int j = 0; j < d; ++j)
            comps[static_cast<std::size_t>(c)].mean(j) +=
                1e-3 * rng.normal() * std::sqrt(data_cov(j, j));
          break;
        }
    }
    comps[static_cast<std::size_t>(c)].cov = data_cov;
  }

  Eigen::MatrixXd resp(n, k);
  double prev_ll = -std::numeric_limits<double>::infinity();
  double ll = prev_ll;
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    Gmm model(d, comps);
    // E-step
    ll = 0;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd xi = x.row(i).transpose();
      std::vector<double> lw(static_cast<std::size_t>(k));
      for (int c = 0; c < k; ++c)
        lw[static_cast<std::size_t>(c)] =
            std::log(comps[static_cast<std::size_t>(c)].weight) + model.component_log_density(c, xi);
      double lse = logsumexp(lw);
      ll += lse;
      for (int c = 0; c < k; ++c) resp(i, c) = std::exp(lw[static_cast<std::size_t>(c)] - lse);
    }
    // M-step
    for (int c = 0; c < k; ++c) {
      double nk = resp.col(c).sum();
      if (nk < 1e-10) nk = 1e-10;
      Eigen::VectorXd mu = (resp.col(c).transpose() * x).transpose() / nk;
      Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
      for (int i = 0; i < n; ++i) {
        Eigen::VectorXd diff = x.row(i).transpose() - mu;
        cov += resp(i, c) * diff * diff.transpose();
      }
      cov /= nk;
      cov += opts.cov_floor * Eigen::MatrixXd::Identity(d, d);
      comps[static_cast<std::size_t>(c)].weight = nk / n;
      comps[static_cast<std::size_t>(c)].mean = mu;
      comps[static_cast<std::size_t>(c)].cov = 0.5 * (cov + cov.transpose());
    }
    if (std::abs(ll - prev_ll) < opts.rel_tol * std::max(1.0, std::abs(ll))) break;
    prev_ll = ll;
  }
  EmResult res;
  for (const auto& c : comps)
    if (c.weight < 1e-6) res.degenerate = true;
  res.comps = std::move(comps);
  res.loglik = ll;
  return res;
}

}  // namespace

Gmm fit_em(const std::vector<std::vector<double>>& samples, int k, int restarts,
           std::uint64_t seed, const EmOptions& opts) {
  require(k >= 1, ErrorCode::argument, "fit_em: k must be >= 1");
  require(restarts >= 1, ErrorCode::argument, "fit_em: restarts must be >= 1");
  require(!samples.empty(), ErrorCode::argument, "fit_em: no samples");
  const int d = static_cast<int>(samples[0].size());
  for (const auto& s : samples)
    require(static_cast<int>(s.size()) == d, ErrorCode::argument, "fit_em: ragged samples");
  require(static_cast<int>(samples.size()) >= 10 * k * d, ErrorCode::data,
          "fit_em: need at least 10*K*d samples (have " + std::to_string(samples.size()) + ")");

  EmResult best;
  for (int r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(seed, 0xE300u + static_cast<std::uint64_t>(r)));
    EmResult res = run_em_once(samples, k, rng, opts);
    if (res.loglik > best.loglik) best = std::move(res);
  }
  if (best.degenerate && k > 1) {
    std::cerr << "fit_em: degenerate component (weight < 1e-6); refitting with K=" << (k - 1)
              << "\n";
    return fit_em(samples, k - 1, restarts, seed, opts);
  }
  // renormalize weights exactly
  double wsum = 0;
  for (const auto& c : best.comps) wsum += c.weight;
  for (auto& c : best.comps) c.weight /= wsum;
  return Gmm(d, std::move(best.comps));
}

double bic_score(const Gmm& gmm, const std::vector<std::vector<double>>& samples) {
  const int d = gmm.dim();
  const int k = gmm.component_count();
  const double n_params = (k - 1) + k * d + k * d * (d + 1) / 2.0;
  return -2.0 * gmm.log_likelihood(samples) +
         n_params * std::log(static_cast<double>(samples.size()));
}

Gmm fit_em_bic(const std::vector<std::vector<double>>& samples, int k_max, int restarts,
               std::uint64_t seed, const EmOptions& opts) {
  require(k_max >= 1, ErrorCode::argument, "fit_em_bic: k_max must be >= 1");
  const int d = static_cast<int>(samples.empty() ? 0 : samples[0].size());
  require(d > 0, ErrorCode::argument, "fit_em_bic: no samples");
  double best_bic = std::numeric_limits<double>::infinity();
  std::unique_ptr<Gmm> best;
  for (int k = 1; k <= k_max; ++k) {
    if (static_cast<int>(samples.size()) < 10 * k * d) break;
    Gmm fit = fit_em(samples, k, restarts, seed, opts);
    double b = bic_score(fit, samples);
    if (b < best_bic) {
      best_bic = b;
      best = std::make_unique<Gmm>(std::move(fit));
    }
  }
  require(best != nullptr, ErrorCode::data, "fit_em_bic: not enough samples for K=1");
  return *best;
}

}  // namespace flowppf
