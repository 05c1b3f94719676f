#include <doctest.h>

#include <cmath>

#include "flowppf/core/gmm.hpp"

using namespace flowppf;

namespace {

Gmm standard_2d() {
  GmmComponent c;
  c.weight = 1.0;
  c.mean = Eigen::Vector2d(0, 0);
  c.cov = Eigen::Matrix2d::Identity();
  return Gmm(2, {c});
}

Gmm random_two_component(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GmmComponent> comps;
  for (int k = 0; k < 2; ++k) {
    GmmComponent c;
    c.weight = k == 0 ? 0.4 : 0.6;
    c.mean = Eigen::Vector2d(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const double a = rng.uniform(0.3, 1.0), b = rng.uniform(0.3, 1.0), r = rng.uniform(-0.5, 0.5);
    Eigen::Matrix2d cov;
    cov << a * a, r * a * b, r * a * b, b * b;
    c.cov = cov;
    comps.push_back(c);
  }
  return Gmm(2, comps);
}

double grid_integral_2d(const Gmm& g, double lo, double hi, int n) {
  const double h = (hi - lo) / n;
  double acc = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      acc += g.density({lo + (i + 0.5) * h, lo + (j + 0.5) * h}) * h * h;
  return acc;
}

}  // namespace

TEST_CASE("standard normal density at the mode") {
  Gmm g = standard_2d();
  CHECK(g.density({0, 0}) == doctest::Approx(1.0 / (2.0 * M_PI)).epsilon(1e-12));
  CHECK(g.density({50, 50}) < 1e-300);
  CHECK(g.density({3, -2}) >= 0);
}

TEST_CASE("density integrates to one by quadrature") {
  Gmm g = random_two_component(17);
  CHECK(grid_integral_2d(g, -8, 8, 400) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("log density and density agree") {
  Gmm g = random_two_component(3);
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> x{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    const double d = g.density(x);
    if (d > 1e-300) CHECK(std::exp(g.log_density(x)) == doctest::Approx(d).epsilon(1e-12));
  }
}

TEST_CASE("weights must be normalized and covariances positive definite") {
  GmmComponent c;
  c.weight = 0.5;
  c.mean = Eigen::Vector2d(0, 0);
  c.cov = Eigen::Matrix2d::Identity();
  CHECK_THROWS_AS(Gmm(2, {c}), Error);  // weights sum to 0.5

  GmmComponent bad = c;
  bad.weight = 1.0;
  bad.cov << 1.0, 2.0, 2.0, 1.0;  // indefinite
  CHECK_THROWS_AS(Gmm(2, {bad}), Error);
}

TEST_CASE("em fit of constant data recovers the point with floored covariance") {
  std::vector<std::vector<double>> samples(25, {1.5, -2.0});
  Gmm g = fit_em(samples, 1, 1, 9);
  CHECK(g.components()[0].mean(0) == doctest::Approx(1.5).epsilon(1e-9));
  CHECK(g.components()[0].mean(1) == doctest::Approx(-2.0).epsilon(1e-9));
  CHECK(g.components()[0].cov(0, 0) == doctest::Approx(1e-8).epsilon(1e-6));
}

TEST_CASE("em fit reaches the generating model's likelihood") {
  Gmm gen = random_two_component(23);
  auto samples = gen.sample(5000, 77);
  Gmm fit = fit_em(samples, 2, 3, 5);
  const double ll_fit = fit.log_likelihood(samples);
  const double ll_gen = gen.log_likelihood(samples);
  CHECK(ll_fit >= ll_gen - 0.01 * static_cast<double>(samples.size()));
}

TEST_CASE("em fit is deterministic under a fixed seed") {
  Gmm gen = random_two_component(31);
  auto samples = gen.sample(600, 13);
  Gmm a = fit_em(samples, 2, 2, 55);
  Gmm b = fit_em(samples, 2, 2, 55);
  for (int k = 0; k < 2; ++k) {
    CHECK(a.components()[k].weight == b.components()[k].weight);
    CHECK(a.components()[k].mean(0) == b.components()[k].mean(0));
    CHECK(a.components()[k].cov(1, 1) == b.components()[k].cov(1, 1));
  }
}

TEST_CASE("sampling statistics") {
  CHECK(standard_2d().sample(0, 1).empty());

  Gmm g = standard_2d();
  const int n = 50000;
  auto s = g.sample(n, 99);
  double m0 = 0, m1 = 0;
  for (const auto& x : s) {
    m0 += x[0];
    m1 += x[1];
  }
  m0 /= n;
  m1 /= n;
  const double bound = 3.0 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(m0) < bound);
  CHECK(std::abs(m1) < bound);
}

TEST_CASE("component frequencies match the weights") {
  // well-separated components classified by nearest mean
  GmmComponent a, b;
  a.weight = 0.3;
  a.mean = Eigen::Vector2d(-10, 0);
  a.cov = 0.01 * Eigen::Matrix2d::Identity();
  b.weight = 0.7;
  b.mean = Eigen::Vector2d(10, 0);
  b.cov = 0.01 * Eigen::Matrix2d::Identity();
  Gmm g(2, {a, b});
  const int n = 50000;
  auto s = g.sample(n, 123);
  int count_a = 0;
  for (const auto& x : s)
    if (x[0] < 0) ++count_a;
  const double p = 0.3;
  const double sigma = std::sqrt(p * (1 - p) * n);
  CHECK(std::abs(count_a - p * n) < 3 * sigma);
}

TEST_CASE("marginal keeps means and covariance blocks") {
  Gmm g = random_two_component(41);
  Gmm all = g.marginal({0, 1});
  for (int k = 0; k < g.component_count(); ++k) {
    CHECK(all.components()[k].mean == g.components()[k].mean);
    CHECK(all.components()[k].cov == g.components()[k].cov);
  }

  GmmComponent c;
  c.weight = 1;
  c.mean = Eigen::Vector2d(1, 2);
  Eigen::Matrix2d cov;
  cov << 0.5, 0.0, 0.0, 2.0;
  c.cov = cov;
  Gmm diag(2, {c});
  Gmm m = diag.marginal({0});
  CHECK(m.dim() == 1);
  CHECK(m.components()[0].mean(0) == doctest::Approx(1.0));
  CHECK(m.components()[0].cov(0, 0) == doctest::Approx(0.5));

  CHECK_THROWS_AS(g.marginal({}), Error);
  CHECK_THROWS_AS(g.marginal({5}), Error);
}

TEST_CASE("marginal density equals quadrature over the dropped dimension") {
  Gmm g = random_two_component(53);
  Gmm m = g.marginal({0});
  for (double x : {-0.8, 0.1, 0.9}) {
    double quad = 0;
    const int n = 4000;
    const double lo = -10, hi = 10;
    const double h = (hi - lo) / n;
    for (int i = 0; i < n; ++i) quad += g.density({x, lo + (i + 0.5) * h}) * h;
    CHECK(m.density({x}) == doctest::Approx(quad).epsilon(1e-3));
  }
}

TEST_CASE("conditioning on an independent block reduces to the marginal") {
  GmmComponent a, b;
  a.weight = 0.45;
  a.mean = Eigen::Vector3d(1, 2, 3);
  a.cov = Eigen::Vector3d(0.4, 0.9, 1.6).asDiagonal();
  b.weight = 0.55;
  b.mean = Eigen::Vector3d(-1, 0, 1);
  b.cov = Eigen::Vector3d(0.8, 0.5, 0.7).asDiagonal();
  Gmm g(3, {a, b});

  const std::vector<double> obs{0.25};
  Gmm cond = g.condition({2}, obs);
  Gmm marg = g.marginal({0, 1});
  for (int k = 0; k < 2; ++k) {
    CHECK(cond.components()[k].mean == marg.components()[k].mean);
    CHECK(cond.components()[k].cov == marg.components()[k].cov);
  }
  // weights reweighted by the marginal densities of the observed dim only
  Gmm obs_marg = g.marginal({2});
  double w0 = g.components()[0].weight *
              std::exp(obs_marg.component_log_density(0, Eigen::VectorXd::Constant(1, obs[0])));
  double w1 = g.components()[1].weight *
              std::exp(obs_marg.component_log_density(1, Eigen::VectorXd::Constant(1, obs[0])));
  CHECK(cond.components()[0].weight == doctest::Approx(w0 / (w0 + w1)).epsilon(1e-12));
}

TEST_CASE("single-component conditional weight is one") {
  Gmm g = standard_2d();
  Gmm cond = g.condition({1}, {4.2});
  CHECK(cond.component_count() == 1);
  CHECK(cond.components()[0].weight == doctest::Approx(1.0));
}

TEST_CASE("bayes identity: conditional times marginal equals joint") {
  Gmm g = random_two_component(67);
  Gmm marg = g.marginal({1});
  Rng rng(68);
  for (int i = 0; i < 100; ++i) {
    const double s = rng.uniform(-2, 2);
    const double x = rng.uniform(-2, 2);
    Gmm cond = g.condition({1}, {s});
    const double lhs = cond.density({x}) * marg.density({s});
    const double rhs = g.density({x, s});
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
  }
}

TEST_CASE("conditional weights match the direct ratio formula") {
  Gmm g = random_two_component(71);
  Gmm marg = g.marginal({1});
  Rng rng(72);
  for (int i = 0; i < 20; ++i) {
    const double s = rng.uniform(-3, 3);
    Gmm cond = g.condition({1}, {s});
    double denom = 0;
    std::vector<double> num(2);
    for (int k = 0; k < 2; ++k) {
      num[k] = g.components()[k].weight *
               std::exp(marg.component_log_density(k, Eigen::VectorXd::Constant(1, s)));
      denom += num[k];
    }
    for (int k = 0; k < 2; ++k)
      CHECK(cond.components()[k].weight == doctest::Approx(num[k] / denom).epsilon(1e-10));
  }
}

TEST_CASE("conditional weights survive far-tail scenarios via log-sum-exp") {
  Gmm g = random_two_component(73);
  Gmm cond = g.condition({1}, {40.0});  // direct N() evaluation underflows here
  double wsum = 0;
  for (const auto& c : cond.components()) {
    CHECK(std::isfinite(c.weight));
    wsum += c.weight;
  }
  CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("condition-then-marginalize consistency by quadrature") {
  Gmm g = random_two_component(79);
  Gmm mx = g.marginal({0});
  Gmm ms = g.marginal({1});
  for (double x : {-0.5, 0.4}) {
    double integral = 0;
    const int n = 1500;
    const double lo = -9, hi = 9;
    const double h = (hi - lo) / n;
    for (int i = 0; i < n; ++i) {
      const double s = lo + (i + 0.5) * h;
      Gmm cond = g.condition({1}, {s});
      integral += cond.density({x}) * ms.density({s}) * h;
    }
    CHECK(integral == doctest::Approx(mx.density({x})).epsilon(1e-2));
  }
}

TEST_CASE("returned mixtures satisfy the type invariants") {
  Gmm g = random_two_component(83);
  Gmm cond = g.condition({0}, {0.7});
  double wsum = 0;
  for (const auto& c : cond.components()) {
    CHECK(c.weight > 0);
    wsum += c.weight;
    Eigen::LLT<Eigen::MatrixXd> llt(c.cov);
    CHECK(llt.info() == Eigen::Success);
  }
  CHECK(wsum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("bic selection picks a parsimonious component count") {
  Gmm gen = standard_2d();
  auto samples = gen.sample(800, 5);
  Gmm fit = fit_em_bic(samples, 4, 2, 6);
  CHECK(fit.component_count() <= 2);
}

TEST_CASE("json round-trip preserves the model") {
  Gmm g = random_two_component(91);
  Gmm back = Gmm::from_json_text(g.to_json_text());
  CHECK(back.component_count() == g.component_count());
  for (int k = 0; k < g.component_count(); ++k) {
    CHECK(back.components()[k].weight == doctest::Approx(g.components()[k].weight).epsilon(1e-15));
    CHECK(back.components()[k].mean(0) == g.components()[k].mean(0));
    CHECK(back.components()[k].cov(0, 1) == g.components()[k].cov(0, 1));
  }
}

TEST_CASE("1-d inverse cdf round-trips the cdf") {
  GmmComponent a, b;
  a.weight = 0.35;
  a.mean = Eigen::VectorXd::Constant(1, -1.0);
  a.cov = Eigen::MatrixXd::Constant(1, 1, 0.3);
  b.weight = 0.65;
  b.mean = Eigen::VectorXd::Constant(1, 2.0);
  b.cov = Eigen::MatrixXd::Constant(1, 1, 0.8);
  Gmm g(1, {a, b});
  for (double u : {0.01, 0.25, 0.5, 0.9, 0.999}) {
    const double x = g.inverse_cdf_1d(u);
    CHECK(g.cdf_1d(x) == doctest::Approx(u).epsilon(1e-7));
  }
}
