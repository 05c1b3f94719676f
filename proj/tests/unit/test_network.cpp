#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdlib>

#include "flowppf/core/gmm.hpp"
#include "flowppf/core/network.hpp"

using namespace flowppf;

namespace {

std::string data_dir() {
  const char* env = std::getenv("FLOWPPF_DATA");
  return env ? env : "../data";
}

Network two_bus() {
  return Network(100.0,
                 {{1, BusKind::slack, 0, 0}, {2, BusKind::pq, 0, 0}},
                 {{1, 2, 0.01, 0.1, 0.0, 1.0}});
}

Network six_bus() { return Network::from_json_file(data_dir() + "/net_6bus_radial.json"); }

Gmm six_bus_gmm() { return Gmm::from_json_file(data_dir() + "/gmm_6bus_radial.json"); }

// fixed-point oracle for a 2-bus system: V2 iteration of the PQ bus equation
std::pair<double, double> gauss_seidel_2bus(const Network& net, double p, double q, int sweeps) {
  ComplexMatrix y = build_admittance(net);
  std::complex<double> v2(1.0, 0.0);
  const std::complex<double> v1(1.0, 0.0);
  const std::complex<double> s(p, q);
  for (int i = 0; i < sweeps; ++i)
    v2 = (std::conj(s / v2) - y(1, 0) * v1) / y(1, 1);
  return {std::abs(v2), std::arg(v2)};
}

}  // namespace

TEST_CASE("admittance of a single purely reactive branch") {
  Network net(100.0, {{1, BusKind::slack, 0, 0}, {2, BusKind::pq, 0, 0}},
              {{1, 2, 0.0, 0.1, 0.0, 1.0}});
  ComplexMatrix y = build_admittance(net);
  CHECK(y(0, 0).imag() == doctest::Approx(-10.0));
  CHECK(y(0, 1).imag() == doctest::Approx(10.0));
  CHECK(y(1, 0).imag() == doctest::Approx(10.0));
  CHECK(y(1, 1).imag() == doctest::Approx(-10.0));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(y(i, j).real() == doctest::Approx(0.0));
}

TEST_CASE("bus shunt contributes only to its own diagonal") {
  Network base(100.0, {{1, BusKind::slack, 0, 0}, {2, BusKind::pq, 0, 0}},
               {{1, 2, 0.0, 0.1, 0.0, 1.0}});
  Network shunted(100.0, {{1, BusKind::slack, 0, 0}, {2, BusKind::pq, 0, 0.05}},
                  {{1, 2, 0.0, 0.1, 0.0, 1.0}});
  ComplexMatrix y0 = build_admittance(base);
  ComplexMatrix y1 = build_admittance(shunted);
  CHECK((y1(1, 1) - y0(1, 1)).imag() == doctest::Approx(0.05));
  CHECK(std::abs(y1(0, 0) - y0(0, 0)) == doctest::Approx(0.0));
  CHECK(std::abs(y1(0, 1) - y0(0, 1)) == doctest::Approx(0.0));
}

TEST_CASE("six-bus admittance matches an independent branch-stamp assembly") {
  Network net = six_bus();
  ComplexMatrix y = build_admittance(net);
  const int n = net.bus_count();
  ComplexMatrix oracle = ComplexMatrix::Zero(n, n);
  for (const Branch& br : net.branches()) {
    const int f = net.index_of_bus_id(br.from);
    const int t = net.index_of_bus_id(br.to);
    const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
    const std::complex<double> bc(0.0, br.b / 2.0);
    // 2x2 stamp
    oracle(f, f) += (ys + bc) / (br.tap * br.tap);
    oracle(t, t) += ys + bc;
    oracle(f, t) -= ys / br.tap;
    oracle(t, f) -= ys / br.tap;
  }
  for (int i = 0; i < n; ++i)
    oracle(i, i) += std::complex<double>(net.buses()[static_cast<std::size_t>(i)].gs,
                                         net.buses()[static_cast<std::size_t>(i)].bs);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) CHECK(std::abs(y(i, j) - oracle(i, j)) < 1e-15);
}

TEST_CASE("zero-impedance branches are rejected") {
  CHECK_THROWS_AS(Network(100.0, {{1, BusKind::slack, 0, 0}, {2, BusKind::pq, 0, 0}},
                          {{1, 2, 0.0, 0.0, 0.0, 1.0}}),
                  Error);
}

TEST_CASE("network validation catches structural problems") {
  // two slack buses
  CHECK_THROWS_AS(Network(100.0, {{1, BusKind::slack, 0, 0}, {2, BusKind::slack, 0, 0}},
                          {{1, 2, 0.01, 0.1, 0, 1}}),
                  Error);
  // disconnected graph
  CHECK_THROWS_AS(Network(100.0,
                          {{1, BusKind::slack, 0, 0},
                           {2, BusKind::pq, 0, 0},
                           {3, BusKind::pq, 0, 0}},
                          {{1, 2, 0.01, 0.1, 0, 1}}),
                  Error);
  // unknown endpoint
  CHECK_THROWS_AS(Network(100.0, {{1, BusKind::slack, 0, 0}, {2, BusKind::pq, 0, 0}},
                          {{1, 9, 0.01, 0.1, 0, 1}}),
                  Error);
}

TEST_CASE("zero injection solves to the flat state in one iteration") {
  Network net(100.0, {{1, BusKind::slack, 0, 0}, {2, BusKind::pq, 0, 0}},
              {{1, 2, 0.01, 0.1, 0.0, 1.0}});
  PfSolution sol = solve_pf(net, {{0.0}, {0.0}});
  CHECK(sol.state.vm[0] == doctest::Approx(1.0));
  CHECK(sol.state.vm[1] == doctest::Approx(1.0));
  CHECK(sol.state.va[1] == doctest::Approx(0.0));
  CHECK(sol.iterations == 1);
}

TEST_CASE("two-bus load case matches the gauss-seidel oracle") {
  Network net = two_bus();
  const double p = -0.1, q = -0.05;
  PfSolution sol = solve_pf(net, {{p}, {q}});
  auto [vm_o, va_o] = gauss_seidel_2bus(net, p, q, 1000);
  CHECK(std::abs(sol.state.vm[1] - vm_o) < 1e-6);
  CHECK(std::abs(sol.state.va[1] - va_o) < 1e-6);
}

TEST_CASE("six-bus nominal load converges tightly and re-checks") {
  Network net = six_bus();
  Injection inj;
  inj.p = {-0.1, -0.12, -0.1, -0.13, -0.11};
  inj.q = {-0.03, -0.04, -0.03, -0.05, -0.04};
  PfSolution sol = solve_pf(net, inj, 1e-10, 30);
  auto [dp, dq] = pf_residual(net, sol.state, inj);
  for (double v : dp) CHECK(std::abs(v) < 1e-10);
  for (double v : dq) CHECK(std::abs(v) < 1e-10);
}

TEST_CASE("residual of the flat state on a lossless network is zero") {
  Network net(100.0, {{1, BusKind::slack, 0, 0}, {2, BusKind::pq, 0, 0}},
              {{1, 2, 0.0, 0.1, 0.0, 1.0}});
  PfState flat{{1.0, 1.0}, {0.0, 0.0}};
  auto [dp, dq] = pf_residual(net, flat, {{0.0}, {0.0}});
  CHECK(dp[0] == doctest::Approx(0.0));
  CHECK(dq[0] == doctest::Approx(0.0));
}

TEST_CASE("residual responds to voltage perturbations like the power equations") {
  Network net = six_bus();
  Injection inj;
  inj.p = {-0.1, -0.1, -0.1, -0.1, -0.1};
  inj.q = {-0.03, -0.03, -0.03, -0.03, -0.03};
  PfSolution sol = solve_pf(net, inj);
  const int bus = 2;  // position of a PQ bus
  const double h = 1e-6;
  PfState plus = sol.state, minus = sol.state;
  plus.vm[bus] += h;
  minus.vm[bus] -= h;
  auto [dpp, dqp] = pf_residual(net, plus, inj);
  auto [dpm, dqm] = pf_residual(net, minus, inj);
  // central difference of dQ at the same bus
  const int k = 1;  // bus position 2 == pq index 1 (ids ascending from 2)
  const double fd = (dqp[k] - dqm[k]) / (2 * h);

  PfState big = sol.state;
  big.vm[bus] += 0.01;
  auto [dpb, dqb] = pf_residual(net, big, inj);
  CHECK(dqb[k] == doctest::Approx(0.01 * fd).epsilon(0.02));
}

TEST_CASE("complex power balance holds at converged states") {
  Network net = six_bus();
  Injection inj;
  inj.p = {-0.15, -0.18, -0.15, -0.2, -0.16};
  inj.q = {-0.05, -0.06, -0.05, -0.07, -0.05};
  PfSolution sol = solve_pf(net, inj, 1e-10, 30);

  // independent per-branch absorption
  std::complex<double> absorbed = 0;
  const int n = net.bus_count();
  std::vector<std::complex<double>> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    v[static_cast<std::size_t>(i)] =
        std::polar(sol.state.vm[static_cast<std::size_t>(i)], sol.state.va[static_cast<std::size_t>(i)]);
  for (const Branch& br : net.branches()) {
    const auto f = static_cast<std::size_t>(net.index_of_bus_id(br.from));
    const auto t = static_cast<std::size_t>(net.index_of_bus_id(br.to));
    const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
    const std::complex<double> bc(0.0, br.b / 2.0);
    const std::complex<double> i_f = v[f] * (ys + bc) / (br.tap * br.tap) - v[t] * ys / br.tap;
    const std::complex<double> i_t = v[t] * (ys + bc) - v[f] * ys / br.tap;
    absorbed += v[f] * std::conj(i_f) + v[t] * std::conj(i_t);
  }
  for (int i = 0; i < n; ++i) {
    const Bus& b = net.buses()[static_cast<std::size_t>(i)];
    const std::complex<double> ysh(b.gs, b.bs);
    absorbed += v[static_cast<std::size_t>(i)] * std::conj(ysh * v[static_cast<std::size_t>(i)]);
  }
  const std::complex<double> total = power_balance(net, sol.state);
  CHECK(std::abs(total - absorbed) < 1e-8);
}

TEST_CASE("solve_pf is deterministic and locally bijective") {
  Network net = six_bus();
  Injection inj;
  inj.p = {-0.1, -0.1, -0.1, -0.1, -0.1};
  inj.q = {-0.03, -0.03, -0.03, -0.03, -0.03};
  PfSolution a = solve_pf(net, inj);
  PfSolution b = solve_pf(net, inj);
  for (std::size_t i = 0; i < a.state.vm.size(); ++i) {
    CHECK(a.state.vm[i] == b.state.vm[i]);
    CHECK(a.state.va[i] == b.state.va[i]);
  }

  Rng rng(17);
  for (int rep = 0; rep < 5; ++rep) {
    Injection pert = inj;
    for (double& v : pert.p) v += 0.01 * rng.normal();
    for (double& v : pert.q) v += 0.005 * rng.normal();
    PfSolution sol = solve_pf(net, pert, 1e-10, 30);
    auto [dp, dq] = pf_residual(net, sol.state, pert);
    for (double v : dp) CHECK(std::abs(v) < 1e-6);
    for (double v : dq) CHECK(std::abs(v) < 1e-6);
  }
}

TEST_CASE("non-convergent cases raise a numeric error") {
  Network net = two_bus();
  CHECK_THROWS_AS(solve_pf(net, {{-30.0}, {-10.0}}), Error);  // far beyond loadability
  try {
    solve_pf(net, {{-30.0}, {-10.0}});
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::numeric);
  }
}

TEST_CASE("dataset generation contracts") {
  Network net = six_bus();
  Gmm gmm = six_bus_gmm();

  Dataset empty = generate_dataset(net, gmm, 0, 1);
  CHECK(empty.rows.empty());

  Dataset a = generate_dataset(net, gmm, 40, 7);
  Dataset b = generate_dataset(net, gmm, 40, 7);
  REQUIRE(a.rows.size() == 40);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].inj.p == b.rows[i].inj.p);
    CHECK(a.rows[i].vm == b.rows[i].vm);
  }

  for (const DatasetRow& row : a.rows) {
    PfState st = to_full_state(net, row.vm, row.va);
    auto [dp, dq] = pf_residual(net, st, row.inj);
    for (double v : dp) CHECK(std::abs(v) < 1e-8);
    for (double v : dq) CHECK(std::abs(v) < 1e-8);
  }
}

TEST_CASE("dataset csv round-trip") {
  Network net = six_bus();
  Gmm gmm = six_bus_gmm();
  Dataset ds = generate_dataset(net, gmm, 10, 3);
  const std::string path = "/tmp/flowppf_test_dataset.csv";
  write_dataset_csv(ds, path);
  Dataset back = read_dataset_csv(path);
  REQUIRE(back.rows.size() == ds.rows.size());
  CHECK(back.pq_ids == ds.pq_ids);
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    CHECK(back.rows[i].inj.p == ds.rows[i].inj.p);
    CHECK(back.rows[i].inj.q == ds.rows[i].inj.q);
    CHECK(back.rows[i].vm == ds.rows[i].vm);
    CHECK(back.rows[i].va == ds.rows[i].va);
  }
}

TEST_CASE("network json round-trip") {
  Network net = six_bus();
  Network back = Network::from_json_text(net.to_json_text());
  CHECK(back.bus_count() == net.bus_count());
  CHECK(back.pq_ids() == net.pq_ids());
  ComplexMatrix y0 = build_admittance(net);
  ComplexMatrix y1 = build_admittance(back);
  CHECK((y0 - y1).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}
