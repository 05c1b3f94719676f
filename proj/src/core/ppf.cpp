#include "flowppf/core/ppf.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <thread>

#include "flowppf/core/csv.hpp"

namespace flowppf {

double DensityGrid::cell_area() const {
  require(vm_axis.size() >= 2 && va_axis.size() >= 2, ErrorCode::argument,
          "density grid: need at least a 2x2 grid");
  const double dv = vm_axis[1] - vm_axis[0];
  const double da = va_axis[1] - va_axis[0];
  return dv * da;
}

double DensityGrid::mass() const {
  double s = 0;
  for (std::size_t i = 0; i < values.size(); ++i) s += values[i];
  return s * cell_area();
}

void DensityGrid::validate_normalized(const std::string& label) const {
  const double m = mass();
  require(m > 0.5 && m < 2.0, ErrorCode::data,
          label + ": grid mass " + std::to_string(m) + " is far from 1");
  if (m < 0.9 || m > 1.1)
    std::cerr << label << ": warning: grid mass " << m << " outside [0.9, 1.1]\n";
}

GridSpec spec_from_mixture(const Gmm& mix2d, int n_vm, int n_va) {
  require(mix2d.dim() == 2, ErrorCode::argument, "spec_from_mixture: mixture must be 2-D");
  GridSpec spec;
  spec.n_vm = n_vm;
  spec.n_va = n_va;
  spec.auto_range = false;
  double vm_lo = std::numeric_limits<double>::infinity(), vm_hi = -vm_lo;
  double va_lo = vm_lo, va_hi = -vm_lo;
  for (const auto& c : mix2d.components()) {
    const double s0 = std::sqrt(c.cov(0, 0));
    const double s1 = std::sqrt(c.cov(1, 1));
    vm_lo = std::min(vm_lo, c.mean(0) - 4 * s0);
    vm_hi = std::max(vm_hi, c.mean(0) + 4 * s0);
    va_lo = std::min(va_lo, c.mean(1) - 4 * s1);
    va_hi = std::max(va_hi, c.mean(1) + 4 * s1);
  }
  spec.vm_min = vm_lo;
  spec.vm_max = vm_hi;
  spec.va_min = va_lo;
  spec.va_max = va_hi;
  return spec;
}

namespace {

std::vector<double> linspace(double lo, double hi, int n) {
  require(n >= 2, ErrorCode::argument, "grid axis needs at least 2 points");
  require(hi > lo, ErrorCode::argument, "grid axis range is empty");
  std::vector<double> out(static_cast<std::size_t>(n));
  const double step = (hi - lo) / (n - 1);
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = lo + step * i;
  return out;
}

// flat 2-D mixture evaluator for hot loops
struct Mix2d {
  struct Comp {
    double logw, m0, m1, l00, l10, l11, lognorm;
  };
  std::vector<Comp> comps;

  static Mix2d from(const Gmm& g) {
    require(g.dim() == 2, ErrorCode::internal, "Mix2d: mixture must be 2-D");
    Mix2d m;
    for (const auto& c : g.components()) {
      Eigen::LLT<Eigen::Matrix2d> llt(Eigen::Matrix2d(c.cov));
      require(llt.info() == Eigen::Success, ErrorCode::data, "Mix2d: covariance not PD");
      Eigen::Matrix2d l = llt.matrixL();
      Comp cc{};
      cc.logw = std::log(c.weight);
      cc.m0 = c.mean(0);
      cc.m1 = c.mean(1);
      cc.l00 = l(0, 0);
      cc.l10 = l(1, 0);
      cc.l11 = l(1, 1);
      cc.lognorm = -std::log(2.0 * M_PI) - std::log(cc.l00 * cc.l11);
      m.comps.push_back(cc);
    }
    return m;
  }

  double log_density(double x0, double x1) const {
    double mx = -std::numeric_limits<double>::infinity();
    double terms[64];
    const std::size_t k = comps.size();
    for (std::size_t i = 0; i < k; ++i) {
      const Comp& c = comps[i];
      const double d0 = x0 - c.m0;
      const double d1 = x1 - c.m1;
      const double y0 = d0 / c.l00;
      const double y1 = (d1 - c.l10 * y0) / c.l11;
      const double t = c.logw + c.lognorm - 0.5 * (y0 * y0 + y1 * y1);
      terms[i] = t;
      mx = std::max(mx, t);
    }
    if (!std::isfinite(mx)) return mx;
    double s = 0;
    for (std::size_t i = 0; i < k; ++i) s += std::exp(terms[i] - mx);
    return mx + std::log(s);
  }
};

}  // namespace

DensityGrid grid_from_mixture(const Gmm& mix2d, const GridSpec& spec_in) {
  GridSpec spec = spec_in;
  if (spec.auto_range) spec = spec_from_mixture(mix2d, spec_in.n_vm, spec_in.n_va);
  DensityGrid g;
  g.vm_axis = linspace(spec.vm_min, spec.vm_max, spec.n_vm);
  g.va_axis = linspace(spec.va_min, spec.va_max, spec.n_va);
  g.values = Tensor(g.vm_axis.size(), g.va_axis.size());
  Mix2d m = Mix2d::from(mix2d);
  for (std::size_t i = 0; i < g.vm_axis.size(); ++i)
    for (std::size_t j = 0; j < g.va_axis.size(); ++j)
      g.values.at(i, j) = std::exp(m.log_density(g.vm_axis[i], g.va_axis[j]));
  return g;
}

std::vector<int> bus_dims(int n_pq, int bus_pq) {
  require(bus_pq >= 0 && bus_pq < n_pq, ErrorCode::argument, "bus index out of range");
  return {bus_pq, n_pq + bus_pq};
}

std::vector<int> other_dims(int n_pq, int bus_pq) {
  require(bus_pq >= 0 && bus_pq < n_pq, ErrorCode::argument, "bus index out of range");
  std::vector<int> dims;
  for (int j = 0; j < n_pq; ++j)
    if (j != bus_pq) dims.push_back(j);
  for (int j = 0; j < n_pq; ++j)
    if (j != bus_pq) dims.push_back(n_pq + j);
  return dims;
}

DensityGrid estimate_bus_density(const ImnfModel& model, const Gmm& joint, int bus_pq,
                                 const ScenarioSet& scenarios, const GridSpec& spec_in,
                                 int threads) {
  require(scenarios.count() >= 1, ErrorCode::argument,
          "estimate_bus_density: empty scenario set");
  const int npq = model.n_pq();
  require(joint.dim() == 2 * npq, ErrorCode::argument,
          "estimate_bus_density: joint mixture dimension mismatch");
  require(scenarios.dim() == 2 * (npq - 1), ErrorCode::argument,
          "estimate_bus_density: scenario dimension mismatch");
  require(!spec_in.auto_range, ErrorCode::argument,
          "estimate_bus_density: grid spec must carry explicit ranges");

  DensityGrid g;
  g.vm_axis = linspace(spec_in.vm_min, spec_in.vm_max, spec_in.n_vm);
  g.va_axis = linspace(spec_in.va_min, spec_in.va_max, spec_in.n_va);
  g.values = Tensor(g.vm_axis.size(), g.va_axis.size());

  const int t_count = scenarios.count();
  const std::vector<int> obs = other_dims(npq, bus_pq);

  // per-scenario conditioning data, built once
  ImnfModel::Resolved resolved = model.resolve();
  std::vector<ScenarioContext> ctxs;
  std::vector<ImnfModel::EvalCache> caches;
  std::vector<Mix2d> conds;
  ctxs.reserve(static_cast<std::size_t>(t_count));
  caches.reserve(static_cast<std::size_t>(t_count));
  conds.reserve(static_cast<std::size_t>(t_count));
  for (int t = 0; t < t_count; ++t) {
    const auto& s = scenarios.scenarios[static_cast<std::size_t>(t)];
    ctxs.push_back(model.make_scenario(s, bus_pq));
    caches.push_back(model.make_eval_cache(resolved, ctxs.back()));
    conds.push_back(Mix2d::from(joint.condition(obs, s)));
  }

  const std::size_t n_vm = g.vm_axis.size();
  const std::size_t n_va = g.va_axis.size();
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(n_vm)));

  auto worker = [&](std::size_t row_begin, std::size_t row_end) {
    const std::size_t chunk = n_va;
    std::vector<double> pts(2 * chunk), zs(2 * chunk), lds(chunk);
    std::vector<double> run_max(chunk), run_sum(chunk);
    for (std::size_t i = row_begin; i < row_end; ++i) {
      std::fill(run_max.begin(), run_max.end(), -std::numeric_limits<double>::infinity());
      std::fill(run_sum.begin(), run_sum.end(), 0.0);
      for (std::size_t j = 0; j < chunk; ++j) {
        pts[2 * j] = g.vm_axis[i];
        pts[2 * j + 1] = g.va_axis[j];
      }
      for (int t = 0; t < t_count; ++t) {
        model.apply_batch(resolved, FlowDirection::inverse, ctxs[static_cast<std::size_t>(t)],
                          caches[static_cast<std::size_t>(t)], pts.data(), chunk, zs.data(),
                          lds.data());
        const Mix2d& cond = conds[static_cast<std::size_t>(t)];
        for (std::size_t j = 0; j < chunk; ++j) {
          const double lp = cond.log_density(zs[2 * j], zs[2 * j + 1]) + lds[j];
          // online log-sum-exp, scenario order fixed for determinism
          if (lp <= run_max[j]) {
            run_sum[j] += std::exp(lp - run_max[j]);
          } else {
            if (std::isfinite(run_max[j]))
              run_sum[j] = run_sum[j] * std::exp(run_max[j] - lp) + 1.0;
            else
              run_sum[j] = 1.0;
            run_max[j] = lp;
          }
        }
      }
      const double logt = std::log(static_cast<double>(t_count));
      for (std::size_t j = 0; j < chunk; ++j) {
        g.values.at(i, j) = std::isfinite(run_max[j])
                                ? std::exp(run_max[j] + std::log(run_sum[j]) - logt)
                                : 0.0;
      }
    }
  };

  if (n_threads == 1) {
    worker(0, n_vm);
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (n_vm + static_cast<std::size_t>(n_threads) - 1) /
                            static_cast<std::size_t>(n_threads);
    for (int w = 0; w < n_threads; ++w) {
      const std::size_t b = static_cast<std::size_t>(w) * per;
      const std::size_t e = std::min(n_vm, b + per);
      if (b >= e) break;
      pool.emplace_back(worker, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return g;
}

Gmm fit_reference(const std::vector<std::array<double, 2>>& voltage_samples, int k,
                  std::uint64_t seed) {
  require(!voltage_samples.empty(), ErrorCode::argument, "fit_reference: no samples");
  std::vector<std::vector<double>> rows;
  rows.reserve(voltage_samples.size());
  for (const auto& s : voltage_samples) rows.push_back({s[0], s[1]});
  if (k > 0) return fit_em(rows, k, 3, seed);
  return fit_em_bic(rows, 5, 3, seed);
}

LinearPpfModel fit_linear_baseline(const Dataset& ds) {
  require(ds.rows.size() >= 2, ErrorCode::argument, "fit_linear_baseline: need at least 2 rows");
  const int npq = static_cast<int>(ds.rows[0].inj.p.size());
  const int d = 2 * npq;
  const int n = static_cast<int>(ds.rows.size());
  Eigen::MatrixXd x(n, d + 1), y(n, d);
  for (int i = 0; i < n; ++i) {
    const DatasetRow& r = ds.rows[static_cast<std::size_t>(i)];
    for (int j = 0; j < npq; ++j) {
      x(i, j) = r.inj.p[static_cast<std::size_t>(j)];
      x(i, npq + j) = r.inj.q[static_cast<std::size_t>(j)];
      y(i, j) = r.vm[static_cast<std::size_t>(j)];
      y(i, npq + j) = r.va[static_cast<std::size_t>(j)];
    }
    x(i, d) = 1.0;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < d + 1)
    raise(ErrorCode::data, "fit_linear_baseline: rank-deficient regression (rank " +
                               std::to_string(qr.rank()) + " of " + std::to_string(d + 1) + ")");
  Eigen::MatrixXd beta = qr.solve(y);  // (d+1) x d
  LinearPpfModel model;
  model.a = beta.topRows(d).transpose();
  model.b = beta.row(d).transpose();
  Eigen::MatrixXd resid = y - x * beta;
  model.residual_mae = resid.array().abs().mean();
  return model;
}

namespace {

Gmm affine_pushforward_bus(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const Gmm& joint,
                           const std::vector<GmmComponent>& comps, int n_pq, int bus_pq) {
  (void)joint;
  std::vector<GmmComponent> out;
  const auto dims = bus_dims(n_pq, bus_pq);
  for (const auto& c : comps) {
    Eigen::VectorXd mean = a * c.mean + b;
    Eigen::MatrixXd cov = a * c.cov * a.transpose();
    GmmComponent oc;
    oc.weight = c.weight;
    oc.mean = Eigen::Vector2d(mean(dims[0]), mean(dims[1]));
    Eigen::Matrix2d cc;
    cc << cov(dims[0], dims[0]), cov(dims[0], dims[1]), cov(dims[1], dims[0]),
        cov(dims[1], dims[1]);
    oc.cov = 0.5 * (cc + cc.transpose());
    out.push_back(std::move(oc));
  }
  return Gmm(2, std::move(out));
}

}  // namespace

Gmm linear_pushforward_bus(const LinearPpfModel& model, const Gmm& joint, int bus_pq) {
  const int npq = joint.dim() / 2;
  require(model.a.rows() == joint.dim(), ErrorCode::argument,
          "linear_pushforward: dimension mismatch");
  return affine_pushforward_bus(model.a, model.b, joint, joint.components(), npq, bus_pq);
}

DensityGrid linear_density(const LinearPpfModel& model, const Gmm& joint, int bus_pq,
                           const GridSpec& spec) {
  return grid_from_mixture(linear_pushforward_bus(model, joint, bus_pq), spec);
}

PiecewiseLinearModel fit_plinear_baseline(const Dataset& ds, const Gmm& joint) {
  require(!ds.rows.empty(), ErrorCode::argument, "fit_plinear_baseline: empty dataset");
  const int npq = static_cast<int>(ds.rows[0].inj.p.size());
  require(joint.dim() == 2 * npq, ErrorCode::argument,
          "fit_plinear_baseline: mixture dimension mismatch");
  const int k = joint.component_count();
  const int n = static_cast<int>(ds.rows.size());
  const int d = 2 * npq;

  // maximum-responsibility assignment
  std::vector<int> assign(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const DatasetRow& r = ds.rows[static_cast<std::size_t>(i)];
    Eigen::VectorXd x(d);
    for (int j = 0; j < npq; ++j) {
      x(j) = r.inj.p[static_cast<std::size_t>(j)];
      x(npq + j) = r.inj.q[static_cast<std::size_t>(j)];
    }
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int c = 0; c < k; ++c) {
      const double lp = std::log(joint.components()[static_cast<std::size_t>(c)].weight) +
                        joint.component_log_density(c, x);
      if (lp > best) {
        best = lp;
        arg = c;
      }
    }
    assign[static_cast<std::size_t>(i)] = arg;
  }

  // merge undersized regimes into the nearest component by mean distance
  std::vector<int> regime_of(static_cast<std::size_t>(k));
  std::iota(regime_of.begin(), regime_of.end(), 0);
  const int min_rows = 10 * d;
  for (;;) {
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int a : assign) ++counts[static_cast<std::size_t>(regime_of[static_cast<std::size_t>(a)])];
    int worst = -1;
    for (int c = 0; c < k; ++c) {
      const bool active = regime_of[static_cast<std::size_t>(c)] == c;
      if (active && counts[static_cast<std::size_t>(c)] > 0 &&
          counts[static_cast<std::size_t>(c)] < min_rows)
        worst = c;
    }
    int active_count = 0;
    for (int c = 0; c < k; ++c)
      if (regime_of[static_cast<std::size_t>(c)] == c && counts[static_cast<std::size_t>(c)] > 0)
        ++active_count;
    if (worst < 0 || active_count <= 1) break;
    // nearest active regime by component-mean distance
    double best_dist = std::numeric_limits<double>::infinity();
    int best_c = -1;
    for (int c = 0; c < k; ++c) {
      if (c == worst || regime_of[static_cast<std::size_t>(c)] != c ||
          counts[static_cast<std::size_t>(c)] == 0)
        continue;
      const double dist = (joint.components()[static_cast<std::size_t>(c)].mean -
                           joint.components()[static_cast<std::size_t>(worst)].mean)
                              .norm();
      if (dist < best_dist) {
        best_dist = dist;
        best_c = c;
      }
    }
    if (best_c < 0) break;
    std::cerr << "fit_plinear_baseline: regime " << worst << " has fewer than " << min_rows
              << " rows; merging into regime " << best_c << "\n";
    for (int c = 0; c < k; ++c)
      if (regime_of[static_cast<std::size_t>(c)] == worst) regime_of[static_cast<std::size_t>(c)] = best_c;
  }

  // fit one affine map per surviving regime
  PiecewiseLinearModel model;
  model.map_of_component.assign(static_cast<std::size_t>(k), -1);
  std::vector<int> regime_map(static_cast<std::size_t>(k), -1);
  for (int c = 0; c < k; ++c) {
    const int reg = regime_of[static_cast<std::size_t>(c)];
    if (regime_map[static_cast<std::size_t>(reg)] >= 0) continue;
    Dataset sub;
    sub.pq_ids = ds.pq_ids;
    for (int i = 0; i < n; ++i)
      if (regime_of[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])] == reg)
        sub.rows.push_back(ds.rows[static_cast<std::size_t>(i)]);
    if (sub.rows.empty()) continue;
    LinearPpfModel lm = fit_linear_baseline(sub);
    regime_map[static_cast<std::size_t>(reg)] = static_cast<int>(model.maps.size());
    model.residual_mae.push_back(lm.residual_mae);
    model.maps.push_back(std::move(lm));
  }
  for (int c = 0; c < k; ++c) {
    int reg = regime_of[static_cast<std::size_t>(c)];
    int m = regime_map[static_cast<std::size_t>(reg)];
    if (m < 0) {
      // component drew no data at all; fall back to the first map
      m = 0;
    }
    model.map_of_component[static_cast<std::size_t>(c)] = m;
  }
  require(!model.maps.empty(), ErrorCode::data, "fit_plinear_baseline: no regime could be fit");
  return model;
}

Gmm plinear_pushforward_bus(const PiecewiseLinearModel& model, const Gmm& joint, int bus_pq) {
  const int npq = joint.dim() / 2;
  std::vector<GmmComponent> out;
  const auto dims = bus_dims(npq, bus_pq);
  for (int c = 0; c < joint.component_count(); ++c) {
    const auto& comp = joint.components()[static_cast<std::size_t>(c)];
    const LinearPpfModel& lm =
        model.maps[static_cast<std::size_t>(model.map_of_component[static_cast<std::size_t>(c)])];
    Eigen::VectorXd mean = lm.a * comp.mean + lm.b;
    Eigen::MatrixXd cov = lm.a * comp.cov * lm.a.transpose();
    GmmComponent oc;
    oc.weight = comp.weight;
    oc.mean = Eigen::Vector2d(mean(dims[0]), mean(dims[1]));
    Eigen::Matrix2d cc;
    cc << cov(dims[0], dims[0]), cov(dims[0], dims[1]), cov(dims[1], dims[0]),
        cov(dims[1], dims[1]);
    oc.cov = 0.5 * (cc + cc.transpose());
    out.push_back(std::move(oc));
  }
  return Gmm(2, std::move(out));
}

DensityGrid plinear_density(const PiecewiseLinearModel& model, const Gmm& joint, int bus_pq,
                            const GridSpec& spec) {
  return grid_from_mixture(plinear_pushforward_bus(model, joint, bus_pq), spec);
}

namespace {

void check_axes_match(const DensityGrid& p, const DensityGrid& q, const char* what) {
  require(p.vm_axis.size() == q.vm_axis.size() && p.va_axis.size() == q.va_axis.size(),
          ErrorCode::argument, std::string(what) + ": grid shapes differ");
  for (std::size_t i = 0; i < p.vm_axis.size(); ++i)
    require(std::abs(p.vm_axis[i] - q.vm_axis[i]) < 1e-12, ErrorCode::argument,
            std::string(what) + ": vm axes differ");
  for (std::size_t i = 0; i < p.va_axis.size(); ++i)
    require(std::abs(p.va_axis[i] - q.va_axis[i]) < 1e-12, ErrorCode::argument,
            std::string(what) + ": va axes differ");
}

}  // namespace

double jsd(const DensityGrid& p, const DensityGrid& q) {
  check_axes_match(p, q, "jsd");
  constexpr double kFloor = 1e-12;
  const double area = p.cell_area();
  double acc = 0;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double pv = std::max(p.values[i], kFloor);
    const double qv = std::max(q.values[i], kFloor);
    const double mv = 0.5 * (pv + qv);
    acc += 0.5 * pv * std::log(pv / mv) + 0.5 * qv * std::log(qv / mv);
  }
  return acc * area;
}

double tvd(const DensityGrid& p, const DensityGrid& q) {
  check_axes_match(p, q, "tvd");
  const double area = p.cell_area();
  double acc = 0;
  for (std::size_t i = 0; i < p.values.size(); ++i) acc += std::abs(p.values[i] - q.values[i]);
  return 0.5 * acc * area;
}

std::vector<double> mae_normalized(const Tensor& pred, const Tensor& truth) {
  require(pred.rows() == truth.rows() && pred.cols() == truth.cols(), ErrorCode::argument,
          "mae: shape mismatch");
  require(truth.rows() >= 1, ErrorCode::argument, "mae: empty arrays");
  const std::size_t n = truth.rows(), d = truth.cols();
  std::vector<double> out(d, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += truth.at(i, c);
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dlt = truth.at(i, c) - mean;
      var += dlt * dlt;
    }
    const double scale = std::max(std::sqrt(var / static_cast<double>(n)), 1e-12);
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i)
      acc += std::abs((pred.at(i, c) - mean) / scale - (truth.at(i, c) - mean) / scale);
    out[c] = acc / static_cast<double>(n);
  }
  return out;
}

void write_density_csv(const DensityGrid& grid, const std::string& path) {
  CsvWriter w(path);
  w.write_header({"vm", "va", "density"});
  for (std::size_t i = 0; i < grid.vm_axis.size(); ++i)
    for (std::size_t j = 0; j < grid.va_axis.size(); ++j)
      w.write_row({grid.vm_axis[i], grid.va_axis[j], grid.values.at(i, j)});
  w.close();
}

DensityGrid read_density_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  const int cv = t.column("vm"), ca = t.column("va"), cd = t.column("density");
  require(cv >= 0 && ca >= 0 && cd >= 0, ErrorCode::data,
          "density csv: expected vm, va, density columns in '" + path + "'");
  std::vector<double> vms, vas;
  for (const auto& r : t.rows) {
    vms.push_back(r[static_cast<std::size_t>(cv)]);
    vas.push_back(r[static_cast<std::size_t>(ca)]);
  }
  auto uniq = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  };
  DensityGrid g;
  g.vm_axis = uniq(vms);
  g.va_axis = uniq(vas);
  require(g.vm_axis.size() >= 2 && g.va_axis.size() >= 2, ErrorCode::data,
          "density csv: degenerate grid in '" + path + "'");
  require(t.rows.size() == g.vm_axis.size() * g.va_axis.size(), ErrorCode::data,
          "density csv: incomplete grid in '" + path + "'");
  g.values = Tensor(g.vm_axis.size(), g.va_axis.size());
  const double dv = g.vm_axis[1] - g.vm_axis[0];
  const double da = g.va_axis[1] - g.va_axis[0];
  for (const auto& r : t.rows) {
    const auto i = static_cast<std::size_t>(
        std::llround((r[static_cast<std::size_t>(cv)] - g.vm_axis[0]) / dv));
    const auto j = static_cast<std::size_t>(
        std::llround((r[static_cast<std::size_t>(ca)] - g.va_axis[0]) / da));
    require(i < g.vm_axis.size() && j < g.va_axis.size(), ErrorCode::data,
            "density csv: off-grid point in '" + path + "'");
    g.values.at(i, j) = r[static_cast<std::size_t>(cd)];
  }
  return g;
}

}  // namespace flowppf
