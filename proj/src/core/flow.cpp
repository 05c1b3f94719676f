#include "flowppf/core/flow.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace flowppf {

using json = nlohmann::json;

namespace {

// softplus(kDerivShift) == 1, so zero raw outputs give unit knot derivatives
const double kDerivShift = std::log(std::expm1(1.0));

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

void spline_create_into(const double* raw, int k, double bound, double min_bin_frac,
                        SplineParams& sp) {
  sp.bound = bound;
  sp.knots_x.resize(static_cast<std::size_t>(k) + 1);
  sp.knots_y.resize(static_cast<std::size_t>(k) + 1);
  sp.derivs.resize(static_cast<std::size_t>(k) + 1);

  auto fill_knots = [&](const double* r, std::vector<double>& knots) {
    double mx = r[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, r[i]);
    double sum = 0;
    for (int i = 0; i < k; ++i) sum += std::exp(r[i] - mx);
    knots[0] = -bound;
    double acc = 0;
    const double scale = (1.0 - k * min_bin_frac) * 2.0 * bound;
    const double offset = min_bin_frac * 2.0 * bound;
    for (int i = 0; i < k; ++i) {
      double w = std::exp(r[i] - mx) / sum * scale + offset;
      acc += w;
      knots[static_cast<std::size_t>(i) + 1] = -bound + acc;
    }
    knots[static_cast<std::size_t>(k)] = bound;  // pin the endpoint exactly
  };
  fill_knots(raw, sp.knots_x);
  fill_knots(raw + k, sp.knots_y);
  sp.derivs[0] = 1.0;
  sp.derivs[static_cast<std::size_t>(k)] = 1.0;
  for (int i = 0; i < k - 1; ++i)
    sp.derivs[static_cast<std::size_t>(i) + 1] = softplus(raw[2 * k + i] + kDerivShift);
}

int find_bin(const std::vector<double>& knots, double v) {
  // largest b with knots[b] <= v, clamped into [0, K-1]
  auto it = std::upper_bound(knots.begin(), knots.end(), v);
  int b = static_cast<int>(it - knots.begin()) - 1;
  return std::clamp(b, 0, static_cast<int>(knots.size()) - 2);
}

struct BinQuantities {
  double xk, wk, yk, hk, sk, d0, d1;
};

BinQuantities bin_quantities(const SplineParams& sp, int b) {
  BinQuantities q;
  q.xk = sp.knots_x[static_cast<std::size_t>(b)];
  q.wk = sp.knots_x[static_cast<std::size_t>(b) + 1] - q.xk;
  q.yk = sp.knots_y[static_cast<std::size_t>(b)];
  q.hk = sp.knots_y[static_cast<std::size_t>(b) + 1] - q.yk;
  q.sk = q.hk / q.wk;
  q.d0 = sp.derivs[static_cast<std::size_t>(b)];
  q.d1 = sp.derivs[static_cast<std::size_t>(b) + 1];
  return q;
}

double rq_derivative(const BinQuantities& q, double xi) {
  const double om = 1.0 - xi;
  const double den = q.sk + (q.d1 + q.d0 - 2.0 * q.sk) * xi * om;
  return q.sk * q.sk * (q.d1 * xi * xi + 2.0 * q.sk * xi * om + q.d0 * om * om) / (den * den);
}

}  // namespace

SplineParams spline_create(const std::vector<double>& raw, int k_bins, double bound,
                           double min_bin_frac) {
  require(k_bins >= 2, ErrorCode::argument, "spline: need at least 2 bins");
  require(bound > 0, ErrorCode::argument, "spline: bound must be positive");
  require(static_cast<int>(raw.size()) == 3 * k_bins - 1, ErrorCode::argument,
          "spline: raw parameter vector must have length 3*K-1");
  for (double v : raw)
    require(std::isfinite(v), ErrorCode::numeric, "spline: non-finite raw parameter");
  SplineParams sp;
  spline_create_into(raw.data(), k_bins, bound, min_bin_frac, sp);
  return sp;
}

std::pair<double, double> spline_forward(const SplineParams& sp, double x) {
  if (x < -sp.bound || x > sp.bound) return {x, 0.0};
  const int b = find_bin(sp.knots_x, x);
  const BinQuantities q = bin_quantities(sp, b);
  const double xi = (x - q.xk) / q.wk;
  const double om = 1.0 - xi;
  const double den = q.sk + (q.d1 + q.d0 - 2.0 * q.sk) * xi * om;
  const double y = q.yk + q.hk * (q.sk * xi * xi + q.d0 * xi * om) / den;
  return {y, std::log(rq_derivative(q, xi))};
}

std::pair<double, double> spline_inverse(const SplineParams& sp, double y) {
  if (y < -sp.bound || y > sp.bound) return {y, 0.0};
  const int b = find_bin(sp.knots_y, y);
  const BinQuantities q = bin_quantities(sp, b);
  const double yr = y - q.yk;
  const double dsum = q.d1 + q.d0 - 2.0 * q.sk;
  const double a = q.hk * (q.sk - q.d0) + yr * dsum;
  const double bb = q.hk * q.d0 - yr * dsum;
  const double c = -q.sk * yr;
  const double disc = bb * bb - 4.0 * a * c;
  if (disc < 0)
    raise(ErrorCode::internal, "spline: negative discriminant in inverse (non-monotone spline)");
  const double xi = (2.0 * c) / (-bb - std::sqrt(disc));
  const double x = q.xk + xi * q.wk;
  return {x, -std::log(rq_derivative(q, xi))};
}

ImnfModel::ImnfModel(FlowConfig config, Topology topo, NormStats stats, std::uint64_t seed)
    : config_(std::move(config)), topo_(std::move(topo)), stats_(std::move(stats)) {
  require(config_.n_sfcp >= 0 && config_.n_spline >= 0 && config_.n_sfcp + config_.n_spline > 0,
          ErrorCode::argument, "imnf: at least one layer required");
  require(config_.spline_bins >= 2, ErrorCode::argument, "imnf: spline_bins must be >= 2");
  require(config_.spline_bound > 0, ErrorCode::argument, "imnf: spline_bound must be positive");
  const int npq = n_pq();
  require(npq >= 2, ErrorCode::argument, "imnf: need at least two PQ buses");
  require(static_cast<int>(topo_.pq_positions.size()) == npq, ErrorCode::argument,
          "imnf: pq_positions/pq_ids mismatch");
  auto check_stats = [&](const std::vector<double>& m, const std::vector<double>& s) {
    require(static_cast<int>(m.size()) == 2 * npq && static_cast<int>(s.size()) == 2 * npq,
            ErrorCode::argument, "imnf: normalization statistics have wrong length");
    for (double v : s)
      require(v > 0, ErrorCode::argument, "imnf: normalization scales must be positive");
  };
  check_stats(stats_.inj_mean, stats_.inj_scale);
  check_stats(stats_.state_mean, stats_.state_scale);

  build_conditioners();
  Rng rng(derive_seed(seed, 0xF10Du));
  for (int l = 0; l < config_.n_sfcp; ++l)
    params_.add("sfcp" + std::to_string(l) + ".A", Tensor(1, 4));  // identity start
  for (const Conditioner& c : conds_) c.init_params(params_, rng);
}

ImnfModel ImnfModel::create(const FlowConfig& config, const Network& net, std::uint64_t seed) {
  Topology topo;
  topo.n_bus = net.bus_count();
  topo.pq_ids = net.pq_ids();
  topo.pq_positions = net.pq_index();
  topo.edges = net.edges();
  NormStats stats;
  const std::size_t n2 = 2 * topo.pq_ids.size();
  stats.inj_mean.assign(n2, 0.0);
  stats.inj_scale.assign(n2, 1.0);
  stats.state_mean.assign(n2, 0.0);
  stats.state_scale.assign(n2, 1.0);
  return ImnfModel(config, std::move(topo), std::move(stats), seed);
}

void ImnfModel::build_conditioners() {
  conds_.clear();
  const int sd = scen_dim();
  const int npq = n_pq();
  const int raw_dim = 3 * config_.spline_bins - 1;
  for (int l = 0; l < config_.n_sfcp; ++l) {
    const std::string base = "sfcp" + std::to_string(l);
    for (const char* name : {".s1", ".t1", ".s2", ".t2"})
      conds_.emplace_back(base + name, config_.conditioner, 1, sd, npq, topo_.n_bus, topo_.edges);
  }
  for (int l = 0; l < config_.n_spline; ++l) {
    const std::string base = "sf" + std::to_string(l);
    for (const char* name : {".u1", ".u2"})
      conds_.emplace_back(base + name, config_.conditioner, raw_dim, sd, npq, topo_.n_bus,
                          topo_.edges);
  }
}

std::vector<double> ImnfModel::drop_bus(const std::vector<double>& full, int target_pq) const {
  const int npq = n_pq();
  require(static_cast<int>(full.size()) == 2 * npq, ErrorCode::argument,
          "imnf: full injection vector has wrong length");
  require(target_pq >= 0 && target_pq < npq, ErrorCode::argument, "imnf: bad target index");
  std::vector<double> out;
  out.reserve(2 * static_cast<std::size_t>(npq - 1));
  for (int j = 0; j < npq; ++j)
    if (j != target_pq) out.push_back(full[static_cast<std::size_t>(j)]);
  for (int j = 0; j < npq; ++j)
    if (j != target_pq) out.push_back(full[static_cast<std::size_t>(npq + j)]);
  return out;
}

ScenarioContext ImnfModel::make_scenario(const std::vector<double>& scen_raw,
                                         int target_pq) const {
  const int npq = n_pq();
  require(target_pq >= 0 && target_pq < npq, ErrorCode::argument, "imnf: bad target index");
  require(static_cast<int>(scen_raw.size()) == scen_dim(), ErrorCode::argument,
          "imnf: scenario vector has wrong length (expected " + std::to_string(scen_dim()) + ")");
  ScenarioContext ctx;
  ctx.target_pq = target_pq;
  ctx.target_pos = topo_.pq_positions[static_cast<std::size_t>(target_pq)];
  ctx.scen_norm.resize(scen_raw.size());
  ctx.tok_p.assign(static_cast<std::size_t>(topo_.n_bus), 0.0);
  ctx.tok_q.assign(static_cast<std::size_t>(topo_.n_bus), 0.0);
  int slot = 0;
  for (int j = 0; j < npq; ++j) {
    if (j == target_pq) continue;
    const auto sj = static_cast<std::size_t>(j);
    const auto snj = static_cast<std::size_t>(npq + j);
    const double pn =
        (scen_raw[static_cast<std::size_t>(slot)] - stats_.inj_mean[sj]) / stats_.inj_scale[sj];
    const double qn = (scen_raw[static_cast<std::size_t>(npq - 1 + slot)] - stats_.inj_mean[snj]) /
                      stats_.inj_scale[snj];
    ctx.scen_norm[static_cast<std::size_t>(slot)] = pn;
    ctx.scen_norm[static_cast<std::size_t>(npq - 1 + slot)] = qn;
    const auto pos = static_cast<std::size_t>(topo_.pq_positions[sj]);
    ctx.tok_p[pos] = pn;
    ctx.tok_q[pos] = qn;
    ++slot;
  }
  return ctx;
}

std::array<double, 2> ImnfModel::normalize_injection(int k, const std::array<double, 2>& pq) const {
  const auto i0 = static_cast<std::size_t>(k);
  const auto i1 = static_cast<std::size_t>(n_pq() + k);
  return {(pq[0] - stats_.inj_mean[i0]) / stats_.inj_scale[i0],
          (pq[1] - stats_.inj_mean[i1]) / stats_.inj_scale[i1]};
}

std::array<double, 2> ImnfModel::denormalize_injection(int k,
                                                       const std::array<double, 2>& z) const {
  const auto i0 = static_cast<std::size_t>(k);
  const auto i1 = static_cast<std::size_t>(n_pq() + k);
  return {z[0] * stats_.inj_scale[i0] + stats_.inj_mean[i0],
          z[1] * stats_.inj_scale[i1] + stats_.inj_mean[i1]};
}

std::array<double, 2> ImnfModel::normalize_state(int k, const std::array<double, 2>& vmva) const {
  const auto i0 = static_cast<std::size_t>(k);
  const auto i1 = static_cast<std::size_t>(n_pq() + k);
  return {(vmva[0] - stats_.state_mean[i0]) / stats_.state_scale[i0],
          (vmva[1] - stats_.state_mean[i1]) / stats_.state_scale[i1]};
}

std::array<double, 2> ImnfModel::denormalize_state(int k, const std::array<double, 2>& z) const {
  const auto i0 = static_cast<std::size_t>(k);
  const auto i1 = static_cast<std::size_t>(n_pq() + k);
  return {z[0] * stats_.state_scale[i0] + stats_.state_mean[i0],
          z[1] * stats_.state_scale[i1] + stats_.state_mean[i1]};
}

double ImnfModel::norm_logdet(int k, FlowDirection dir) const {
  const auto i0 = static_cast<std::size_t>(k);
  const auto i1 = static_cast<std::size_t>(n_pq() + k);
  const double fwd = std::log(stats_.state_scale[i0]) + std::log(stats_.state_scale[i1]) -
                     std::log(stats_.inj_scale[i0]) - std::log(stats_.inj_scale[i1]);
  return dir == FlowDirection::forward ? fwd : -fwd;
}

ImnfModel::Resolved ImnfModel::resolve() const {
  Resolved r;
  for (const Conditioner& c : conds_) r.cond.push_back(c.resolve(params_));
  for (int l = 0; l < config_.n_sfcp; ++l) {
    const Tensor& a = params_.value("sfcp" + std::to_string(l) + ".A");
    const double l21 = a[0], u12 = a[1], d1 = a[2], d2 = a[3];
    SfcpMatrix m{};
    m.a11 = std::exp(d1);
    m.a12 = u12;
    m.a21 = l21 * std::exp(d1);
    m.a22 = l21 * u12 + std::exp(d2);
    const double det = std::exp(d1 + d2);
    m.i11 = m.a22 / det;
    m.i12 = -m.a12 / det;
    m.i21 = -m.a21 / det;
    m.i22 = m.a11 / det;
    m.log_det = d1 + d2;
    r.sfcp_a.push_back(m);
  }
  return r;
}

ImnfModel::EvalCache ImnfModel::make_eval_cache(const Resolved& r,
                                                const ScenarioContext& scen) const {
  EvalCache cache;
  cache.per_cond.reserve(conds_.size());
  for (std::size_t i = 0; i < conds_.size(); ++i)
    cache.per_cond.push_back(conds_[i].make_cache(r.cond[i], scen));
  return cache;
}

void ImnfModel::apply_batch(const Resolved& r, FlowDirection dir, const ScenarioContext& scen,
                            const EvalCache& cache, const double* in, std::size_t n, double* out,
                            double* logdet) const {
  const int k = scen.target_pq;
  std::vector<double> p(n), q(n), ld(n, 0.0);
  if (dir == FlowDirection::forward) {
    for (std::size_t i = 0; i < n; ++i) {
      auto z = normalize_injection(k, {in[2 * i], in[2 * i + 1]});
      p[i] = z[0];
      q[i] = z[1];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto z = normalize_state(k, {in[2 * i], in[2 * i + 1]});
      p[i] = z[0];
      q[i] = z[1];
    }
  }

  const double clamp = config_.scale_clamp;
  std::vector<double> buf1(n), buf2(n);
  const auto raw_dim = static_cast<std::size_t>(3 * config_.spline_bins - 1);
  std::vector<double> raw(n * raw_dim);
  SplineParams sp;

  auto eval_cond = [&](int idx, const std::vector<double>& coord, double* out_buf) {
    conds_[static_cast<std::size_t>(idx)].eval(r.cond[static_cast<std::size_t>(idx)],
                                               cache.per_cond[static_cast<std::size_t>(idx)], scen,
                                               coord.data(), n, out_buf);
  };

  auto sfcp_fwd = [&](int l) {
    const SfcpMatrix& m = r.sfcp_a[static_cast<std::size_t>(l)];
    for (std::size_t i = 0; i < n; ++i) {
      const double p1 = m.a11 * p[i] + m.a12 * q[i];
      const double q1 = m.a21 * p[i] + m.a22 * q[i];
      p[i] = p1;
      q[i] = q1;
      ld[i] += m.log_det;
    }
    const int c0 = cond_index_sfcp(l, 0);
    eval_cond(c0 + 0, p, buf1.data());  // s1(p1, s)
    eval_cond(c0 + 1, p, buf2.data());  // t1(p1, s)
    for (std::size_t i = 0; i < n; ++i) {
      const double s = clamp * std::tanh(buf1[i]);
      q[i] = q[i] * std::exp(s) + buf2[i];
      ld[i] += s;
    }
    eval_cond(c0 + 2, q, buf1.data());  // s2(q2, s)
    eval_cond(c0 + 3, q, buf2.data());  // t2(q2, s)
    for (std::size_t i = 0; i < n; ++i) {
      const double s = clamp * std::tanh(buf1[i]);
      p[i] = p[i] * std::exp(s) + buf2[i];
      ld[i] += s;
    }
  };

  auto sfcp_inv = [&](int l) {
    const SfcpMatrix& m = r.sfcp_a[static_cast<std::size_t>(l)];
    const int c0 = cond_index_sfcp(l, 0);
    eval_cond(c0 + 2, q, buf1.data());
    eval_cond(c0 + 3, q, buf2.data());
    for (std::size_t i = 0; i < n; ++i) {
      const double s = clamp * std::tanh(buf1[i]);
      p[i] = (p[i] - buf2[i]) * std::exp(-s);
      ld[i] -= s;
    }
    eval_cond(c0 + 0, p, buf1.data());
    eval_cond(c0 + 1, p, buf2.data());
    for (std::size_t i = 0; i < n; ++i) {
      const double s = clamp * std::tanh(buf1[i]);
      q[i] = (q[i] - buf2[i]) * std::exp(-s);
      ld[i] -= s;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double p0 = m.i11 * p[i] + m.i12 * q[i];
      const double q0 = m.i21 * p[i] + m.i22 * q[i];
      p[i] = p0;
      q[i] = q0;
      ld[i] -= m.log_det;
    }
  };

  auto spline_pass = [&](int cond_idx, const std::vector<double>& driver,
                         std::vector<double>& tgt, bool inverse) {
    eval_cond(cond_idx, driver, raw.data());
    for (std::size_t i = 0; i < n; ++i) {
      spline_create_into(raw.data() + i * raw_dim, config_.spline_bins, config_.spline_bound,
                         config_.min_bin_frac, sp);
      auto [v, dld] = inverse ? spline_inverse(sp, tgt[i]) : spline_forward(sp, tgt[i]);
      tgt[i] = v;
      ld[i] += dld;
    }
  };

  if (dir == FlowDirection::forward) {
    for (int l = 0; l < config_.n_sfcp; ++l) sfcp_fwd(l);
    for (int l = 0; l < config_.n_spline; ++l) {
      spline_pass(cond_index_spline(l, 0), p, q, false);  // q via u1(p, s)
      spline_pass(cond_index_spline(l, 1), q, p, false);  // p via u2(q_new, s)
    }
  } else {
    for (int l = config_.n_spline - 1; l >= 0; --l) {
      spline_pass(cond_index_spline(l, 1), q, p, true);
      spline_pass(cond_index_spline(l, 0), p, q, true);
    }
    for (int l = config_.n_sfcp - 1; l >= 0; --l) sfcp_inv(l);
  }

  const double nld = norm_logdet(k, dir);
  if (dir == FlowDirection::forward) {
    for (std::size_t i = 0; i < n; ++i) {
      auto v = denormalize_state(k, {p[i], q[i]});
      out[2 * i] = v[0];
      out[2 * i + 1] = v[1];
      if (logdet) logdet[i] = ld[i] + nld;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto v = denormalize_injection(k, {p[i], q[i]});
      out[2 * i] = v[0];
      out[2 * i + 1] = v[1];
      if (logdet) logdet[i] = ld[i] + nld;
    }
  }
}

std::pair<std::array<double, 2>, double> ImnfModel::transform(const std::array<double, 2>& xy,
                                                              const std::vector<double>& scen_raw,
                                                              int target_pq,
                                                              FlowDirection dir) const {
  ScenarioContext scen = make_scenario(scen_raw, target_pq);
  Resolved r = resolve();
  EvalCache cache = make_eval_cache(r, scen);
  std::array<double, 2> out{};
  double ld = 0;
  apply_batch(r, dir, scen, cache, xy.data(), 1, out.data(), &ld);
  for (double v : out)
    require(std::isfinite(v), ErrorCode::numeric, "imnf: non-finite transform output");
  return {out, ld};
}

// ---------------------------------------------------------------------------
// training-path graph construction
// ---------------------------------------------------------------------------

namespace {

struct SfcpVars {
  ad::Var a11, a12, a21, a22, det, logdet;
};

SfcpVars sfcp_matrix_vars(ad::Tape& t, ad::GraphParams& params, int layer) {
  ad::Var a = params.get("sfcp" + std::to_string(layer) + ".A");
  ad::Var l21 = t.slice_cols(a, 0, 1);
  ad::Var u12 = t.slice_cols(a, 1, 1);
  ad::Var d1 = t.slice_cols(a, 2, 1);
  ad::Var d2 = t.slice_cols(a, 3, 1);
  SfcpVars v{};
  v.a11 = t.exp(d1);
  v.a12 = u12;
  v.a21 = t.mul(l21, v.a11);
  v.a22 = t.add(t.mul(l21, u12), t.exp(d2));
  v.logdet = t.add(d1, d2);
  v.det = t.exp(v.logdet);
  return v;
}

}  // namespace

ad::Var ImnfModel::build_chain(ad::Tape& t, ad::GraphParams& params, ad::Var in,
                               const CondBatchContext& ctx, FlowDirection dir,
                               ad::Var* logdet_out) const {
  const std::size_t rows = in.rows();
  require(in.cols() == 2, ErrorCode::internal, "imnf: chain input must be (R x 2)");
  require(rows == ctx.rows, ErrorCode::internal, "imnf: batch context row mismatch");

  ad::Var p = t.slice_cols(in, 0, 1);
  ad::Var q = t.slice_cols(in, 1, 1);
  ad::Var ld = t.constant(Tensor(rows, 1));
  const bool want_ld = logdet_out != nullptr;
  ad::Var clamp = t.constant_scalar(config_.scale_clamp);

  auto cond_build = [&](int idx, ad::Var coord) {
    return conds_[static_cast<std::size_t>(idx)].build(t, params, coord, ctx);
  };
  auto scale_of = [&](ad::Var raw_s) { return t.mul(clamp, t.tanh(raw_s)); };

  auto sfcp_fwd = [&](int l) {
    SfcpVars a = sfcp_matrix_vars(t, params, l);
    ad::Var p1 = t.add(t.mul(p, a.a11), t.mul(q, a.a12));
    ad::Var q1 = t.add(t.mul(p, a.a21), t.mul(q, a.a22));
    p = p1;
    q = q1;
    if (want_ld) ld = t.add(ld, a.logdet);
    const int c0 = cond_index_sfcp(l, 0);
    ad::Var s1 = scale_of(cond_build(c0 + 0, p));
    ad::Var t1 = cond_build(c0 + 1, p);
    q = t.add(t.mul(q, t.exp(s1)), t1);
    if (want_ld) ld = t.add(ld, s1);
    ad::Var s2 = scale_of(cond_build(c0 + 2, q));
    ad::Var t2 = cond_build(c0 + 3, q);
    p = t.add(t.mul(p, t.exp(s2)), t2);
    if (want_ld) ld = t.add(ld, s2);
  };

  auto sfcp_inv = [&](int l) {
    SfcpVars a = sfcp_matrix_vars(t, params, l);
    const int c0 = cond_index_sfcp(l, 0);
    ad::Var s2 = scale_of(cond_build(c0 + 2, q));
    ad::Var t2 = cond_build(c0 + 3, q);
    p = t.mul(t.sub(p, t2), t.exp(t.sub(t.constant_scalar(0.0), s2)));
    if (want_ld) ld = t.sub(ld, s2);
    ad::Var s1 = scale_of(cond_build(c0 + 0, p));
    ad::Var t1 = cond_build(c0 + 1, p);
    q = t.mul(t.sub(q, t1), t.exp(t.sub(t.constant_scalar(0.0), s1)));
    if (want_ld) ld = t.sub(ld, s1);
    ad::Var p0 = t.div(t.sub(t.mul(p, a.a22), t.mul(q, a.a12)), a.det);
    ad::Var q0 = t.div(t.sub(t.mul(q, a.a11), t.mul(p, a.a21)), a.det);
    p = p0;
    q = q0;
    if (want_ld) ld = t.sub(ld, a.logdet);
  };

  if (dir == FlowDirection::forward) {
    for (int l = 0; l < config_.n_sfcp; ++l) sfcp_fwd(l);
    for (int l = 0; l < config_.n_spline; ++l) {
      q = build_spline_ad(t, q, cond_build(cond_index_spline(l, 0), p), false,
                          want_ld ? &ld : nullptr);
      p = build_spline_ad(t, p, cond_build(cond_index_spline(l, 1), q), false,
                          want_ld ? &ld : nullptr);
    }
  } else {
    for (int l = config_.n_spline - 1; l >= 0; --l) {
      p = build_spline_ad(t, p, cond_build(cond_index_spline(l, 1), q), true,
                          want_ld ? &ld : nullptr);
      q = build_spline_ad(t, q, cond_build(cond_index_spline(l, 0), p), true,
                          want_ld ? &ld : nullptr);
    }
    for (int l = config_.n_sfcp - 1; l >= 0; --l) sfcp_inv(l);
  }

  if (logdet_out) *logdet_out = ld;
  return t.concat_cols(p, q);
}

ad::Var ImnfModel::build_spline_ad(ad::Tape& t, ad::Var coord, ad::Var raw, bool inverse,
                                   ad::Var* ld) const {
  const std::size_t rows = coord.rows();
  const int k = config_.spline_bins;
  const double bound = config_.spline_bound;
  const auto uk = static_cast<std::size_t>(k);

  ad::Var raw_w = t.slice_cols(raw, 0, uk);
  ad::Var raw_h = t.slice_cols(raw, uk, uk);
  ad::Var raw_d = t.slice_cols(raw, 2 * uk, uk - 1);

  const double scale = (1.0 - k * config_.min_bin_frac) * 2.0 * bound;
  const double offset = config_.min_bin_frac * 2.0 * bound;
  ad::Var w =
      t.add(t.mul(t.softmax_rows(raw_w), t.constant_scalar(scale)), t.constant_scalar(offset));
  ad::Var h =
      t.add(t.mul(t.softmax_rows(raw_h), t.constant_scalar(scale)), t.constant_scalar(offset));
  ad::Var d_inner = t.softplus(t.add(raw_d, t.constant_scalar(kDerivShift)));
  ad::Var ones_col = t.constant(Tensor(rows, 1, 1.0));
  ad::Var derivs = t.concat_cols(t.concat_cols(ones_col, d_inner), ones_col);  // (R x K+1)

  // cumulative knot positions
  Tensor ut(uk, uk);
  for (std::size_t i = 0; i < uk; ++i)
    for (std::size_t j = i; j < uk; ++j) ut.at(i, j) = 1.0;
  ad::Var cum_w = t.matmul(w, t.constant(ut));
  ad::Var cum_h = t.matmul(h, t.constant(ut));
  ad::Var zeros_col = t.constant(Tensor(rows, 1));
  ad::Var kx = t.sub(t.concat_cols(zeros_col, cum_w), t.constant_scalar(bound));  // (R x K+1)
  ad::Var ky = t.sub(t.concat_cols(zeros_col, cum_h), t.constant_scalar(bound));

  // bin selection from current values; gradients do not flow through masks
  const Tensor knots = t.value(inverse ? ky : kx);
  const Tensor cv = t.value(coord);
  Tensor inr(rows, 1), oor(rows, 1);
  Tensor mbin(rows, uk), mleft(rows, uk + 1), mright(rows, uk + 1);
  for (std::size_t i = 0; i < rows; ++i) {
    const double x = cv[i];
    const bool inside = x >= -bound && x <= bound;
    inr[i] = inside ? 1.0 : 0.0;
    oor[i] = inside ? 0.0 : 1.0;
    const double xb = inside ? x : 0.0;  // out-of-range rows evaluate the spline at 0
    int b = 0;
    for (int j = 1; j < k; ++j)
      if (knots.at(i, static_cast<std::size_t>(j)) <= xb) b = j;
    mbin.at(i, static_cast<std::size_t>(b)) = 1.0;
    mleft.at(i, static_cast<std::size_t>(b)) = 1.0;
    mright.at(i, static_cast<std::size_t>(b) + 1) = 1.0;
  }
  ad::Var v_inr = t.constant(inr);
  ad::Var v_oor = t.constant(oor);
  ad::Var x_safe = t.mul(coord, v_inr);

  ad::Var ones_k = t.constant(Tensor(uk, 1, 1.0));
  ad::Var ones_k1 = t.constant(Tensor(uk + 1, 1, 1.0));
  ad::Var m_bin = t.constant(mbin);
  ad::Var m_left = t.constant(mleft);
  ad::Var m_right = t.constant(mright);
  auto select_k = [&](ad::Var m, ad::Var vals) { return t.matmul(t.mul(vals, m), ones_k); };
  auto select_k1 = [&](ad::Var m, ad::Var vals) { return t.matmul(t.mul(vals, m), ones_k1); };

  ad::Var wk = select_k(m_bin, w);
  ad::Var hk = select_k(m_bin, h);
  ad::Var xk = select_k1(m_left, kx);
  ad::Var yk = select_k1(m_left, ky);
  ad::Var d0 = select_k1(m_left, derivs);
  ad::Var d1 = select_k1(m_right, derivs);
  ad::Var sk = t.div(hk, wk);
  ad::Var two = t.constant_scalar(2.0);
  ad::Var one = t.constant_scalar(1.0);
  ad::Var dsum = t.sub(t.add(d1, d0), t.mul(two, sk));

  ad::Var out_sp, xi;
  if (!inverse) {
    xi = t.div(t.sub(x_safe, xk), wk);
    ad::Var om = t.sub(one, xi);
    ad::Var xiom = t.mul(xi, om);
    ad::Var den = t.add(sk, t.mul(dsum, xiom));
    ad::Var num = t.mul(hk, t.add(t.mul(sk, t.mul(xi, xi)), t.mul(d0, xiom)));
    out_sp = t.add(yk, t.div(num, den));
  } else {
    ad::Var yr = t.sub(x_safe, yk);
    ad::Var aq = t.add(t.mul(hk, t.sub(sk, d0)), t.mul(yr, dsum));
    ad::Var bq = t.sub(t.mul(hk, d0), t.mul(yr, dsum));
    ad::Var cq = t.sub(t.constant_scalar(0.0), t.mul(sk, yr));
    ad::Var disc = t.sub(t.mul(bq, bq), t.mul(t.constant_scalar(4.0), t.mul(aq, cq)));
    ad::Var sq = t.exp(t.mul(t.constant_scalar(0.5), t.log(disc)));
    xi = t.div(t.mul(two, cq), t.sub(t.sub(t.constant_scalar(0.0), bq), sq));
    out_sp = t.add(xk, t.mul(xi, wk));
  }
  ad::Var om = t.sub(one, xi);
  ad::Var xiom = t.mul(xi, om);
  ad::Var den = t.add(sk, t.mul(dsum, xiom));
  ad::Var dnum =
      t.mul(t.mul(sk, sk), t.add(t.add(t.mul(d1, t.mul(xi, xi)), t.mul(two, t.mul(sk, xiom))),
                                 t.mul(d0, t.mul(om, om))));
  ad::Var dydx = t.div(dnum, t.mul(den, den));

  if (ld) {
    ad::Var term = t.mul(t.log(dydx), v_inr);
    *ld = inverse ? t.sub(*ld, term) : t.add(*ld, term);
  }
  return t.add(t.mul(out_sp, v_inr), t.mul(coord, v_oor));
}

CondBatchContext ImnfModel::make_batch_context(const std::vector<ScenarioContext>& rows) const {
  return flowppf::make_batch_context(rows, config_.conditioner, scen_dim(), n_pq(), topo_.n_bus,
                                     topo_.edges);
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

std::string ImnfModel::to_json_text() const {
  json j;
  j["version"] = 1;
  json cc;
  cc["kind"] = config_.conditioner.kind == ConditionerKind::fnn ? "fnn" : "gat";
  cc["fnn_hidden"] = config_.conditioner.fnn_hidden;
  cc["gat_embed_dim"] = config_.conditioner.gat_embed_dim;
  cc["gat_out_dim"] = config_.conditioner.gat_out_dim;
  cc["gat_layers"] = config_.conditioner.gat_layers;
  cc["gat_head_hidden"] = config_.conditioner.gat_head_hidden;
  cc["leaky_slope"] = config_.conditioner.leaky_slope;
  j["config"] = {{"n_sfcp", config_.n_sfcp},
                 {"n_spline", config_.n_spline},
                 {"spline_bins", config_.spline_bins},
                 {"spline_bound", config_.spline_bound},
                 {"min_bin_frac", config_.min_bin_frac},
                 {"scale_clamp", config_.scale_clamp},
                 {"conditioner", cc}};
  json edges = json::array();
  for (auto [f, tt] : topo_.edges) edges.push_back({f, tt});
  j["topology"] = {{"n_bus", topo_.n_bus},
                   {"pq_ids", topo_.pq_ids},
                   {"pq_positions", topo_.pq_positions},
                   {"edges", edges}};
  j["normalization"] = {{"inj_mean", stats_.inj_mean},
                        {"inj_scale", stats_.inj_scale},
                        {"state_mean", stats_.state_mean},
                        {"state_scale", stats_.state_scale}};
  json params = json::object();
  for (const auto& e : params_.entries()) params[e.name] = e.value.vec();
  j["params"] = params;
  return j.dump();
}

ImnfModel ImnfModel::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::data, std::string("imnf: invalid checkpoint JSON: ") + e.what());
  }
  try {
    require(j.at("version").get<int>() == 1, ErrorCode::data,
            "imnf: unsupported checkpoint version");
    const auto& jc = j.at("config");
    FlowConfig cfg;
    cfg.n_sfcp = jc.at("n_sfcp").get<int>();
    cfg.n_spline = jc.at("n_spline").get<int>();
    cfg.spline_bins = jc.at("spline_bins").get<int>();
    cfg.spline_bound = jc.at("spline_bound").get<double>();
    cfg.min_bin_frac = jc.at("min_bin_frac").get<double>();
    cfg.scale_clamp = jc.at("scale_clamp").get<double>();
    const auto& cc = jc.at("conditioner");
    cfg.conditioner.kind =
        cc.at("kind").get<std::string>() == "gat" ? ConditionerKind::gat : ConditionerKind::fnn;
    cfg.conditioner.fnn_hidden = cc.at("fnn_hidden").get<std::vector<int>>();
    cfg.conditioner.gat_embed_dim = cc.at("gat_embed_dim").get<int>();
    cfg.conditioner.gat_out_dim = cc.at("gat_out_dim").get<int>();
    cfg.conditioner.gat_layers = cc.at("gat_layers").get<int>();
    cfg.conditioner.gat_head_hidden = cc.at("gat_head_hidden").get<std::vector<int>>();
    cfg.conditioner.leaky_slope = cc.at("leaky_slope").get<double>();

    const auto& jt = j.at("topology");
    Topology topo;
    topo.n_bus = jt.at("n_bus").get<int>();
    topo.pq_ids = jt.at("pq_ids").get<std::vector<int>>();
    topo.pq_positions = jt.at("pq_positions").get<std::vector<int>>();
    for (const auto& e : jt.at("edges"))
      topo.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());

    const auto& jn = j.at("normalization");
    NormStats stats;
    stats.inj_mean = jn.at("inj_mean").get<std::vector<double>>();
    stats.inj_scale = jn.at("inj_scale").get<std::vector<double>>();
    stats.state_mean = jn.at("state_mean").get<std::vector<double>>();
    stats.state_scale = jn.at("state_scale").get<std::vector<double>>();

    ImnfModel model(cfg, std::move(topo), std::move(stats), 0);
    const auto& jp = j.at("params");
    for (auto& e : model.params_.entries()) {
      require(jp.contains(e.name), ErrorCode::data,
              "imnf: checkpoint missing parameter '" + e.name + "'");
      auto vals = jp.at(e.name).get<std::vector<double>>();
      require(vals.size() == e.value.size(), ErrorCode::data,
              "imnf: checkpoint parameter '" + e.name + "' has wrong size");
      e.value.vec() = std::move(vals);
    }
    require(jp.size() == model.params_.count(), ErrorCode::data,
            "imnf: checkpoint has unexpected extra parameters");
    return model;
  } catch (const json::exception& e) {
    raise(ErrorCode::data, std::string("imnf: malformed checkpoint: ") + e.what());
  }
}

ImnfModel ImnfModel::from_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::data, "imnf: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

void ImnfModel::save_json_file(const std::string& path) const {
  std::ofstream out(path);
  require(out.good(), ErrorCode::data, "imnf: cannot write '" + path + "'");
  out << to_json_text() << '\n';
}

double conditional_log_density(const ImnfModel& model, const std::array<double, 2>& v,
                               int target_pq, const std::vector<double>& scen_raw,
                               const Gmm& base) {
  require(base.dim() == 2, ErrorCode::argument,
          "conditional_log_density: base mixture must be 2-D");
  auto [z, ld] = model.transform(v, scen_raw, target_pq, FlowDirection::inverse);
  return base.log_density(std::vector<double>{z[0], z[1]}) + ld;
}

}  // namespace flowppf
