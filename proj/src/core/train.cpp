#include "flowppf/core/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flowppf/core/csv.hpp"

namespace flowppf {

using json = nlohmann::json;

double lr_at(const LrSchedule& s, std::int64_t step) {
  require(step >= 0, ErrorCode::argument, "lr_at: step must be >= 0");
  if (s.kind == LrKind::constant) return s.lr;
  require(s.period > 0, ErrorCode::argument, "lr_at: circular schedule needs a positive period");
  require(s.lr_min <= s.lr_max, ErrorCode::argument, "lr_at: lr_min must not exceed lr_max");
  const double frac =
      static_cast<double>(step % s.period) / static_cast<double>(s.period);
  const double tri = 1.0 - std::abs(2.0 * frac - 1.0);
  return s.lr_min + (s.lr_max - s.lr_min) * tri;
}

TrainConfig pf_task_preset() {
  TrainConfig cfg;
  cfg.omega = 0.5;
  cfg.batch = 64;
  cfg.lr.kind = LrKind::constant;
  cfg.lr.lr = 1e-3;
  cfg.optimizer.kind = ad::OptimizerKind::adam;
  return cfg;
}

TrainConfig ppf_task_preset() {
  TrainConfig cfg;
  cfg.omega = 0.5;
  cfg.batch = 240;
  cfg.lr.kind = LrKind::circular;
  cfg.lr.lr_max = 5e-4;
  cfg.lr.lr_min = 5e-6;
  cfg.lr.period = 1000;
  cfg.optimizer.kind = ad::OptimizerKind::adamw;
  return cfg;
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
  CsvWriter w(path);
  w.write_header({"step", "lr", "loss", "loss_w2o", "loss_o2w"});
  for (const TraceRow& r : trace)
    w.write_row({static_cast<double>(r.step), r.lr, r.loss, r.loss_w2o, r.loss_o2w});
  w.close();
}

std::vector<TrainRow> rows_from_dataset(const Dataset& ds, int n_pq) {
  std::vector<TrainRow> out;
  out.reserve(ds.rows.size() * static_cast<std::size_t>(n_pq));
  for (const DatasetRow& r : ds.rows) {
    std::vector<double> full(2 * static_cast<std::size_t>(n_pq));
    for (int j = 0; j < n_pq; ++j) {
      full[static_cast<std::size_t>(j)] = r.inj.p[static_cast<std::size_t>(j)];
      full[static_cast<std::size_t>(n_pq + j)] = r.inj.q[static_cast<std::size_t>(j)];
    }
    for (int k = 0; k < n_pq; ++k) {
      TrainRow tr;
      tr.target_pq = k;
      tr.inj = {r.inj.p[static_cast<std::size_t>(k)], r.inj.q[static_cast<std::size_t>(k)]};
      tr.state = {r.vm[static_cast<std::size_t>(k)], r.va[static_cast<std::size_t>(k)]};
      tr.scen_raw.reserve(2 * static_cast<std::size_t>(n_pq - 1));
      for (int j = 0; j < n_pq; ++j)
        if (j != k) tr.scen_raw.push_back(full[static_cast<std::size_t>(j)]);
      for (int j = 0; j < n_pq; ++j)
        if (j != k) tr.scen_raw.push_back(full[static_cast<std::size_t>(n_pq + j)]);
      out.push_back(std::move(tr));
    }
  }
  return out;
}

NormStats compute_norm_stats(const Dataset& ds) {
  require(!ds.rows.empty(), ErrorCode::argument, "compute_norm_stats: empty dataset");
  const std::size_t npq = ds.rows[0].inj.p.size();
  NormStats st;
  st.inj_mean.assign(2 * npq, 0.0);
  st.inj_scale.assign(2 * npq, 0.0);
  st.state_mean.assign(2 * npq, 0.0);
  st.state_scale.assign(2 * npq, 0.0);
  const double n = static_cast<double>(ds.rows.size());
  for (const DatasetRow& r : ds.rows) {
    for (std::size_t j = 0; j < npq; ++j) {
      st.inj_mean[j] += r.inj.p[j];
      st.inj_mean[npq + j] += r.inj.q[j];
      st.state_mean[j] += r.vm[j];
      st.state_mean[npq + j] += r.va[j];
    }
  }
  for (double& v : st.inj_mean) v /= n;
  for (double& v : st.state_mean) v /= n;
  for (const DatasetRow& r : ds.rows) {
    for (std::size_t j = 0; j < npq; ++j) {
      const double dp = r.inj.p[j] - st.inj_mean[j];
      const double dq = r.inj.q[j] - st.inj_mean[npq + j];
      const double dv = r.vm[j] - st.state_mean[j];
      const double da = r.va[j] - st.state_mean[npq + j];
      st.inj_scale[j] += dp * dp;
      st.inj_scale[npq + j] += dq * dq;
      st.state_scale[j] += dv * dv;
      st.state_scale[npq + j] += da * da;
    }
  }
  for (double& v : st.inj_scale) v = std::max(std::sqrt(v / n), 1e-6);
  for (double& v : st.state_scale) v = std::max(std::sqrt(v / n), 1e-6);
  return st;
}

namespace {

struct NormalizedBatch {
  Tensor x_norm;  // R x 2
  Tensor y_norm;  // R x 2
  std::vector<ScenarioContext> scen;
};

NormalizedBatch normalize_batch(const ImnfModel& model, const std::vector<TrainRow>& batch) {
  NormalizedBatch nb;
  const std::size_t r = batch.size();
  nb.x_norm = Tensor(r, 2);
  nb.y_norm = Tensor(r, 2);
  nb.scen.reserve(r);
  for (std::size_t i = 0; i < r; ++i) {
    const TrainRow& row = batch[i];
    auto x = model.normalize_injection(row.target_pq, row.inj);
    auto y = model.normalize_state(row.target_pq, row.state);
    nb.x_norm.at(i, 0) = x[0];
    nb.x_norm.at(i, 1) = x[1];
    nb.y_norm.at(i, 0) = y[0];
    nb.y_norm.at(i, 1) = y[1];
    nb.scen.push_back(model.make_scenario(row.scen_raw, row.target_pq));
  }
  return nb;
}

double mse_of(const Tensor& pred, const Tensor& target) {
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

}  // namespace

LossBreakdown bidirectional_loss(const ImnfModel& model, const std::vector<TrainRow>& batch,
                                 double omega) {
  require(omega >= 0.0 && omega <= 1.0, ErrorCode::argument,
          "bidirectional_loss: omega must be in [0, 1]");
  require(!batch.empty(), ErrorCode::argument, "bidirectional_loss: empty batch");
  ImnfModel::Resolved r = model.resolve();
  double w2o = 0, o2w = 0;
  for (const TrainRow& row : batch) {
    ScenarioContext scen = model.make_scenario(row.scen_raw, row.target_pq);
    ImnfModel::EvalCache cache = model.make_eval_cache(r, scen);
    std::array<double, 2> fwd{}, inv{};
    model.apply_batch(r, FlowDirection::forward, scen, cache, row.inj.data(), 1, fwd.data(),
                      nullptr);
    model.apply_batch(r, FlowDirection::inverse, scen, cache, row.state.data(), 1, inv.data(),
                      nullptr);
    auto fn = model.normalize_state(row.target_pq, fwd);
    auto yn = model.normalize_state(row.target_pq, row.state);
    auto in = model.normalize_injection(row.target_pq, inv);
    auto xn = model.normalize_injection(row.target_pq, row.inj);
    for (int c = 0; c < 2; ++c) {
      const double df = fn[static_cast<std::size_t>(c)] - yn[static_cast<std::size_t>(c)];
      const double di = in[static_cast<std::size_t>(c)] - xn[static_cast<std::size_t>(c)];
      require(std::isfinite(df) && std::isfinite(di), ErrorCode::numeric,
              "bidirectional_loss: non-finite transform output in batch row");
      w2o += df * df;
      o2w += di * di;
    }
  }
  const double denom = 2.0 * static_cast<double>(batch.size());
  LossBreakdown out;
  out.loss_w2o = w2o / denom;
  out.loss_o2w = o2w / denom;
  out.loss = omega * out.loss_w2o + (1.0 - omega) * out.loss_o2w;
  return out;
}

double heldout_forward_mae(const ImnfModel& model, const std::vector<TrainRow>& rows) {
  require(!rows.empty(), ErrorCode::argument, "heldout_forward_mae: no rows");
  ImnfModel::Resolved r = model.resolve();
  double acc = 0;
  for (const TrainRow& row : rows) {
    ScenarioContext scen = model.make_scenario(row.scen_raw, row.target_pq);
    ImnfModel::EvalCache cache = model.make_eval_cache(r, scen);
    std::array<double, 2> fwd{};
    model.apply_batch(r, FlowDirection::forward, scen, cache, row.inj.data(), 1, fwd.data(),
                      nullptr);
    auto fn = model.normalize_state(row.target_pq, fwd);
    auto yn = model.normalize_state(row.target_pq, row.state);
    acc += std::abs(fn[0] - yn[0]) + std::abs(fn[1] - yn[1]);
  }
  return acc / (2.0 * static_cast<double>(rows.size()));
}

// ---------------------------------------------------------------------------
// surrogate
// ---------------------------------------------------------------------------

std::vector<std::size_t> Surrogate::layer_dims() const {
  std::vector<std::size_t> dims;
  dims.push_back(2 * static_cast<std::size_t>(n_pq_));
  for (int h : hidden_) dims.push_back(static_cast<std::size_t>(h));
  dims.push_back(2 * static_cast<std::size_t>(n_pq_));
  return dims;
}

Surrogate::Surrogate(int n_pq, std::vector<int> hidden, std::uint64_t seed)
    : n_pq_(n_pq), hidden_(std::move(hidden)) {
  require(n_pq_ >= 1, ErrorCode::argument, "surrogate: n_pq must be >= 1");
  if (hidden_.empty()) hidden_.assign(3, 4 * n_pq_);
  const std::size_t n2 = 2 * static_cast<std::size_t>(n_pq_);
  stats_.inj_mean.assign(n2, 0.0);
  stats_.inj_scale.assign(n2, 1.0);
  stats_.state_mean.assign(n2, 0.0);
  stats_.state_scale.assign(n2, 1.0);
  Rng rng(derive_seed(seed, 0x5A11u));
  auto dims = layer_dims();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Tensor w(dims[l], dims[l + 1]);
    const double std = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std * rng.normal();
    params_.add("surr.w" + std::to_string(l), std::move(w));
    params_.add("surr.b" + std::to_string(l), Tensor(1, dims[l + 1]));
  }
}

std::vector<double> Surrogate::predict(const std::vector<double>& inj_full) const {
  const std::size_t n2 = 2 * static_cast<std::size_t>(n_pq_);
  require(inj_full.size() == n2, ErrorCode::argument, "surrogate: injection vector length");
  Tensor x(1, n2);
  for (std::size_t i = 0; i < n2; ++i)
    x[i] = (inj_full[i] - stats_.inj_mean[i]) / stats_.inj_scale[i];
  auto dims = layer_dims();
  Tensor h = x;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const Tensor& w = params_.value("surr.w" + std::to_string(l));
    const Tensor& b = params_.value("surr.b" + std::to_string(l));
    Tensor nh(1, dims[l + 1]);
    for (std::size_t j = 0; j < dims[l + 1]; ++j) {
      double acc = b[j];
      for (std::size_t i = 0; i < dims[l]; ++i) acc += h[i] * w.at(i, j);
      nh[j] = (l + 2 < dims.size()) ? std::tanh(acc) : acc;
    }
    h = std::move(nh);
  }
  std::vector<double> out(n2);
  for (std::size_t i = 0; i < n2; ++i)
    out[i] = h[i] * stats_.state_scale[i] + stats_.state_mean[i];
  return out;
}

std::string Surrogate::to_json_text() const {
  json j;
  j["version"] = 1;
  j["n_pq"] = n_pq_;
  j["hidden"] = hidden_;
  j["normalization"] = {{"inj_mean", stats_.inj_mean},
                        {"inj_scale", stats_.inj_scale},
                        {"state_mean", stats_.state_mean},
                        {"state_scale", stats_.state_scale}};
  j["val_mae"] = val_mae_;
  json params = json::object();
  for (const auto& e : params_.entries()) params[e.name] = e.value.vec();
  j["params"] = params;
  return j.dump();
}

Surrogate Surrogate::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::data, std::string("surrogate: invalid JSON: ") + e.what());
  }
  try {
    Surrogate s(j.at("n_pq").get<int>(), j.at("hidden").get<std::vector<int>>(), 0);
    const auto& jn = j.at("normalization");
    s.stats_.inj_mean = jn.at("inj_mean").get<std::vector<double>>();
    s.stats_.inj_scale = jn.at("inj_scale").get<std::vector<double>>();
    s.stats_.state_mean = jn.at("state_mean").get<std::vector<double>>();
    s.stats_.state_scale = jn.at("state_scale").get<std::vector<double>>();
    s.val_mae_ = j.value("val_mae", 0.0);
    const auto& jp = j.at("params");
    for (auto& e : s.params_.entries()) {
      require(jp.contains(e.name), ErrorCode::data,
              "surrogate: missing parameter '" + e.name + "'");
      auto vals = jp.at(e.name).get<std::vector<double>>();
      require(vals.size() == e.value.size(), ErrorCode::data,
              "surrogate: parameter '" + e.name + "' has wrong size");
      e.value.vec() = std::move(vals);
    }
    return s;
  } catch (const json::exception& e) {
    raise(ErrorCode::data, std::string("surrogate: malformed JSON: ") + e.what());
  }
}

Surrogate Surrogate::from_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::data, "surrogate: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

void Surrogate::save_json_file(const std::string& path) const {
  std::ofstream out(path);
  require(out.good(), ErrorCode::data, "surrogate: cannot write '" + path + "'");
  out << to_json_text() << '\n';
}

std::pair<Surrogate, SurrogateReport> train_surrogate(const Dataset& ds,
                                                      const SurrogateConfig& cfg) {
  require(!ds.rows.empty(), ErrorCode::argument, "train_surrogate: empty dataset");
  const int npq = static_cast<int>(ds.rows[0].inj.p.size());
  Surrogate surr(npq, cfg.hidden, cfg.seed);
  surr.stats() = compute_norm_stats(ds);

  // deterministic shuffled split
  Rng rng(derive_seed(cfg.seed, 0x51u));
  std::vector<std::size_t> order(ds.rows.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.below(i)]);
  std::size_t n_val = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(order.size()));
  if (order.size() > 1 && n_val == 0) n_val = 1;
  const std::size_t n_train = order.size() - n_val;
  require(n_train >= 1, ErrorCode::argument, "train_surrogate: no training rows after split");

  const std::size_t n2 = 2 * static_cast<std::size_t>(npq);
  const NormStats& st = surr.stats();
  auto norm_row = [&](const DatasetRow& r, Tensor& x, Tensor& y, std::size_t row) {
    for (std::size_t j = 0; j < static_cast<std::size_t>(npq); ++j) {
      x.at(row, j) = (r.inj.p[j] - st.inj_mean[j]) / st.inj_scale[j];
      x.at(row, static_cast<std::size_t>(npq) + j) =
          (r.inj.q[j] - st.inj_mean[static_cast<std::size_t>(npq) + j]) /
          st.inj_scale[static_cast<std::size_t>(npq) + j];
      y.at(row, j) = (r.vm[j] - st.state_mean[j]) / st.state_scale[j];
      y.at(row, static_cast<std::size_t>(npq) + j) =
          (r.va[j] - st.state_mean[static_cast<std::size_t>(npq) + j]) /
          st.state_scale[static_cast<std::size_t>(npq) + j];
    }
  };

  auto dims_count = surr.hidden().size() + 1;
  LrSchedule sched;
  sched.kind = LrKind::constant;
  sched.lr = cfg.lr;
  ad::OptimizerConfig opt;

  for (int step = 0; step < cfg.max_steps; ++step) {
    const std::size_t bsz = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), n_train);
    Tensor x(bsz, n2), y(bsz, n2);
    for (std::size_t i = 0; i < bsz; ++i) {
      const DatasetRow& r = ds.rows[order[rng.below(n_train)]];
      norm_row(r, x, y, i);
    }
    ad::Tape tape;
    ad::GraphParams gp(tape, surr.params());
    ad::Var h = tape.constant(x);
    for (std::size_t l = 0; l < dims_count; ++l) {
      h = tape.add(tape.matmul(h, gp.get("surr.w" + std::to_string(l))),
                   gp.get("surr.b" + std::to_string(l)));
      if (l + 1 < dims_count) h = tape.tanh(h);
    }
    ad::Var diff = tape.sub(h, tape.constant(y));
    ad::Var loss = tape.mean(tape.mul(diff, diff));
    tape.backward(loss);
    gp.apply_step(lr_at(sched, step), opt);
  }

  // normalized-MAE report
  auto mae_over = [&](std::size_t begin, std::size_t end) {
    if (begin == end) return 0.0;
    double acc = 0;
    Tensor x(1, n2), y(1, n2);
    for (std::size_t i = begin; i < end; ++i) {
      const DatasetRow& r = ds.rows[order[i]];
      norm_row(r, x, y, 0);
      std::vector<double> inj(n2);
      for (std::size_t j = 0; j < static_cast<std::size_t>(npq); ++j) {
        inj[j] = r.inj.p[j];
        inj[static_cast<std::size_t>(npq) + j] = r.inj.q[j];
      }
      std::vector<double> pred = surr.predict(inj);
      for (std::size_t j = 0; j < n2; ++j) {
        const double pn = (pred[j] - st.state_mean[j]) / st.state_scale[j];
        acc += std::abs(pn - y[j]);
      }
    }
    return acc / (static_cast<double>(end - begin) * static_cast<double>(n2));
  };

  SurrogateReport rep;
  rep.steps = cfg.max_steps;
  rep.train_mae = mae_over(0, n_train);
  rep.val_mae = n_val > 0 ? mae_over(n_train, order.size()) : rep.train_mae;
  surr.set_validation_mae(rep.val_mae);
  if (rep.val_mae > cfg.val_mae_threshold)
    raise(ErrorCode::numeric, "train_surrogate: validation MAE " + std::to_string(rep.val_mae) +
                                  " exceeds threshold " + std::to_string(cfg.val_mae_threshold));
  return {std::move(surr), rep};
}

// ---------------------------------------------------------------------------
// IMNF training loop
// ---------------------------------------------------------------------------

TrainResult train_imnf(ImnfModel& model, const Network* net, const Gmm& joint,
                       const Dataset* dataset, const Surrogate* surrogate,
                       const TrainConfig& cfg) {
  require(cfg.omega >= 0.0 && cfg.omega <= 1.0, ErrorCode::argument,
          "train_imnf: omega must be in [0, 1]");
  require(cfg.batch >= 1, ErrorCode::argument, "train_imnf: batch must be >= 1");
  require(cfg.max_steps >= 0, ErrorCode::argument, "train_imnf: max_steps must be >= 0");
  const int npq = model.n_pq();
  switch (cfg.source) {
    case DataSource::dataset:
      require(dataset != nullptr && !dataset->rows.empty(), ErrorCode::argument,
              "train_imnf: dataset source requires a dataset");
      break;
    case DataSource::surrogate:
      require(surrogate != nullptr && surrogate->n_pq() == npq, ErrorCode::argument,
              "train_imnf: surrogate source requires a matching surrogate");
      break;
    case DataSource::pf_solver:
      require(net != nullptr && net->pq_count() == npq, ErrorCode::argument,
              "train_imnf: pf source requires a matching network");
      break;
  }
  require(joint.dim() == 2 * npq, ErrorCode::argument,
          "train_imnf: joint mixture dimension must be 2 * n_pq");

  TrainResult res;
  Rng rng(derive_seed(cfg.seed, 0x7EA1u));
  const std::size_t bsz = static_cast<std::size_t>(cfg.batch);

  // snapshot for NaN recovery
  std::vector<Tensor> good_values;
  auto snapshot = [&]() {
    good_values.clear();
    for (const auto& e : model.params().entries()) good_values.push_back(e.value);
  };
  auto restore = [&]() {
    for (std::size_t i = 0; i < good_values.size(); ++i)
      model.params().entries()[i].value = good_values[i];
  };
  snapshot();

  std::vector<TrainRow> batch(bsz);
  for (int step = 0; step < cfg.max_steps; ++step) {
    // assemble the batch from the configured source
    for (std::size_t i = 0; i < bsz; ++i) {
      TrainRow& row = batch[i];
      std::vector<double> full;
      std::vector<double> state_full;
      if (cfg.source == DataSource::dataset) {
        const DatasetRow& dr = dataset->rows[rng.below(dataset->rows.size())];
        full.resize(2 * static_cast<std::size_t>(npq));
        state_full.resize(2 * static_cast<std::size_t>(npq));
        for (int j = 0; j < npq; ++j) {
          full[static_cast<std::size_t>(j)] = dr.inj.p[static_cast<std::size_t>(j)];
          full[static_cast<std::size_t>(npq + j)] = dr.inj.q[static_cast<std::size_t>(j)];
          state_full[static_cast<std::size_t>(j)] = dr.vm[static_cast<std::size_t>(j)];
          state_full[static_cast<std::size_t>(npq + j)] = dr.va[static_cast<std::size_t>(j)];
        }
      } else if (cfg.source == DataSource::surrogate) {
        full = joint.sample_one(rng);
        state_full = surrogate->predict(full);
      } else {
        for (;;) {
          full = joint.sample_one(rng);
          Injection inj;
          inj.p.assign(full.begin(), full.begin() + npq);
          inj.q.assign(full.begin() + npq, full.end());
          try {
            PfSolution sol = solve_pf(*net, inj, cfg.pf_tol, cfg.pf_max_iter);
            state_full.resize(2 * static_cast<std::size_t>(npq));
            for (int j = 0; j < npq; ++j) {
              const int pos = net->pq_index()[static_cast<std::size_t>(j)];
              state_full[static_cast<std::size_t>(j)] = sol.state.vm[static_cast<std::size_t>(pos)];
              state_full[static_cast<std::size_t>(npq + j)] =
                  sol.state.va[static_cast<std::size_t>(pos)];
            }
            break;
          } catch (const Error& e) {
            if (e.code() != ErrorCode::numeric) throw;
            ++res.pf_rejections;
            require(res.pf_rejections < 1000000, ErrorCode::data,
                    "train_imnf: excessive PF rejections");
          }
        }
      }
      const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(npq)));
      row.target_pq = k;
      row.inj = {full[static_cast<std::size_t>(k)], full[static_cast<std::size_t>(npq + k)]};
      row.state = {state_full[static_cast<std::size_t>(k)],
                   state_full[static_cast<std::size_t>(npq + k)]};
      row.scen_raw = model.drop_bus(full, k);
    }

    NormalizedBatch nb = normalize_batch(model, batch);
    CondBatchContext ctx = model.make_batch_context(nb.scen);

    ad::Tape tape;
    ad::GraphParams gp(tape, model.params());
    ad::Var xin = tape.constant(nb.x_norm);
    ad::Var yin = tape.constant(nb.y_norm);
    ad::Var pred_fwd = model.build_chain(tape, gp, xin, ctx, FlowDirection::forward);
    ad::Var dfwd = tape.sub(pred_fwd, yin);
    ad::Var loss_w2o = tape.mean(tape.mul(dfwd, dfwd));
    ad::Var pred_inv = model.build_chain(tape, gp, yin, ctx, FlowDirection::inverse);
    ad::Var dinv = tape.sub(pred_inv, xin);
    ad::Var loss_o2w = tape.mean(tape.mul(dinv, dinv));
    ad::Var loss = tape.add(tape.mul(tape.constant_scalar(cfg.omega), loss_w2o),
                            tape.mul(tape.constant_scalar(1.0 - cfg.omega), loss_o2w));

    TraceRow tr;
    tr.step = step;
    tr.lr = lr_at(cfg.lr, step);
    tr.loss = tape.value(loss).item();
    tr.loss_w2o = tape.value(loss_w2o).item();
    tr.loss_o2w = tape.value(loss_o2w).item();
    if (!std::isfinite(tr.loss)) {
      restore();
      res.aborted = true;
      res.abort_reason = "non-finite loss at step " + std::to_string(step) +
                         "; parameters restored to the last good checkpoint";
      break;
    }
    res.trace.push_back(tr);

    tape.backward(loss);
    gp.apply_step(tr.lr, cfg.optimizer);
    res.steps_done = step + 1;
    snapshot();

    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
        (step + 1) % cfg.checkpoint_every == 0)
      model.save_json_file(cfg.checkpoint_path);
  }
  return res;
}

}  // namespace flowppf
