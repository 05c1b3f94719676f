#include "flowppf/core/conditioner.hpp"

#include <algorithm>
#include <cmath>

namespace flowppf {

namespace {

using MapRM =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

MapRM map(const Tensor& t) {
  return MapRM(t.data(), static_cast<long>(t.rows()), static_cast<long>(t.cols()));
}

double leaky(double x, double slope) { return x >= 0 ? x : slope * x; }

Tensor random_tensor(std::size_t rows, std::size_t cols, double std, Rng& rng) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std * rng.normal();
  return t;
}

}  // namespace

Conditioner::Conditioner(std::string prefix, ConditionerConfig cfg, int out_dim, int scen_dim,
                         int n_pq, int n_bus, std::vector<std::pair<int, int>> edges)
    : prefix_(std::move(prefix)),
      cfg_(std::move(cfg)),
      out_dim_(out_dim),
      scen_dim_(scen_dim),
      n_pq_(n_pq),
      n_bus_(n_bus) {
  require(out_dim_ >= 1, ErrorCode::argument, "conditioner: output dimension must be >= 1");
  neighbors_.assign(static_cast<std::size_t>(n_bus_), {});
  for (auto [f, t] : edges) {
    require(f >= 0 && f < n_bus_ && t >= 0 && t < n_bus_, ErrorCode::argument,
            "conditioner: edge endpoint out of range");
    neighbors_[static_cast<std::size_t>(f)].push_back(t);
    neighbors_[static_cast<std::size_t>(t)].push_back(f);
  }
  for (int i = 0; i < n_bus_; ++i) {
    auto& nb = neighbors_[static_cast<std::size_t>(i)];
    nb.push_back(i);  // self-loop
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
  }
}

void Conditioner::fnn_dims(std::vector<int>& dims) const {
  dims.clear();
  dims.push_back(1 + scen_dim_ + n_pq_);
  for (int h : cfg_.fnn_hidden) dims.push_back(h);
  dims.push_back(out_dim_);
}

std::vector<std::string> Conditioner::param_names() const {
  std::vector<std::string> names;
  if (cfg_.kind == ConditionerKind::fnn) {
    std::vector<int> dims;
    fnn_dims(dims);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      names.push_back(prefix_ + ".w" + std::to_string(l));
      names.push_back(prefix_ + ".b" + std::to_string(l));
    }
    return names;
  }
  names.push_back(prefix_ + ".embed_w");
  names.push_back(prefix_ + ".embed_b");
  for (int l = 0; l < cfg_.gat_layers; ++l) {
    names.push_back(prefix_ + ".gat" + std::to_string(l) + "_w");
    names.push_back(prefix_ + ".gat" + std::to_string(l) + "_asrc");
    names.push_back(prefix_ + ".gat" + std::to_string(l) + "_adst");
  }
  for (std::size_t l = 0; l <= cfg_.gat_head_hidden.size(); ++l) {
    names.push_back(prefix_ + ".head_w" + std::to_string(l));
    names.push_back(prefix_ + ".head_b" + std::to_string(l));
  }
  return names;
}

void Conditioner::init_params(ad::ParamStore& store, Rng& rng) const {
  if (cfg_.kind == ConditionerKind::fnn) {
    std::vector<int> dims;
    fnn_dims(dims);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const bool last = (l + 2 == dims.size());
      const auto rows = static_cast<std::size_t>(dims[l]);
      const auto cols = static_cast<std::size_t>(dims[l + 1]);
      // zero-initialized final layer so the owning flow layer starts as identity
      const double std = last ? 0.0 : 1.0 / std::sqrt(static_cast<double>(dims[l]));
      store.add(prefix_ + ".w" + std::to_string(l), random_tensor(rows, cols, std, rng));
      store.add(prefix_ + ".b" + std::to_string(l), Tensor(1, cols));
    }
    return;
  }
  const auto f = static_cast<std::size_t>(cfg_.gat_embed_dim);
  const auto fp = static_cast<std::size_t>(cfg_.gat_out_dim);
  store.add(prefix_ + ".embed_w", random_tensor(4, f, 0.5, rng));
  store.add(prefix_ + ".embed_b", Tensor(1, f));
  std::size_t in = f;
  for (int l = 0; l < cfg_.gat_layers; ++l) {
    const std::string p = prefix_ + ".gat" + std::to_string(l);
    store.add(p + "_w", random_tensor(in, fp, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    store.add(p + "_asrc", random_tensor(fp, 1, 1.0 / std::sqrt(static_cast<double>(fp)), rng));
    store.add(p + "_adst", random_tensor(fp, 1, 1.0 / std::sqrt(static_cast<double>(fp)), rng));
    in = fp;
  }
  std::vector<int> dims{cfg_.gat_out_dim};
  for (int h : cfg_.gat_head_hidden) dims.push_back(h);
  dims.push_back(out_dim_);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const bool last = (l + 2 == dims.size());
    const double std = last ? 0.0 : 1.0 / std::sqrt(static_cast<double>(dims[l]));
    store.add(prefix_ + ".head_w" + std::to_string(l),
              random_tensor(static_cast<std::size_t>(dims[l]), static_cast<std::size_t>(dims[l + 1]),
                            std, rng));
    store.add(prefix_ + ".head_b" + std::to_string(l),
              Tensor(1, static_cast<std::size_t>(dims[l + 1])));
  }
}

CondWeights Conditioner::resolve(const ad::ParamStore& store) const {
  CondWeights w;
  if (cfg_.kind == ConditionerKind::fnn) {
    std::vector<int> dims;
    fnn_dims(dims);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      w.w.push_back(&store.value(prefix_ + ".w" + std::to_string(l)));
      w.b.push_back(&store.value(prefix_ + ".b" + std::to_string(l)));
    }
    return w;
  }
  w.w.push_back(&store.value(prefix_ + ".embed_w"));
  w.b.push_back(&store.value(prefix_ + ".embed_b"));
  for (int l = 0; l < cfg_.gat_layers; ++l) {
    const std::string p = prefix_ + ".gat" + std::to_string(l);
    w.w.push_back(&store.value(p + "_w"));
    w.a_src.push_back(&store.value(p + "_asrc"));
    w.a_dst.push_back(&store.value(p + "_adst"));
  }
  for (std::size_t l = 0; l <= cfg_.gat_head_hidden.size(); ++l) {
    w.w.push_back(&store.value(prefix_ + ".head_w" + std::to_string(l)));
    w.b.push_back(&store.value(prefix_ + ".head_b" + std::to_string(l)));
  }
  return w;
}

ad::Var Conditioner::build(ad::Tape& tape, ad::GraphParams& params, ad::Var coord,
                           const CondBatchContext& ctx) const {
  const std::size_t r = ctx.rows;
  require(coord.rows() == r && coord.cols() == 1, ErrorCode::internal,
          "conditioner: coord must be (R x 1)");
  if (cfg_.kind == ConditionerKind::fnn) {
    ad::Var in = tape.concat_cols(coord, tape.constant(ctx.fnn_ctx));
    std::vector<int> dims;
    fnn_dims(dims);
    ad::Var h = in;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      ad::Var wl = params.get(prefix_ + ".w" + std::to_string(l));
      ad::Var bl = params.get(prefix_ + ".b" + std::to_string(l));
      h = tape.add(tape.matmul(h, wl), bl);
      if (l + 2 < dims.size()) h = tape.tanh(h);
    }
    return h;
  }

  const auto n = static_cast<std::size_t>(n_bus_);
  ad::Var coord_exp = tape.gather_rows(coord, ctx.coord_expand_idx);      // (R*N x 1)
  ad::Var coord_col = tape.mul(coord_exp, tape.constant(ctx.gat_flag));   // target slots only
  ad::Var tokens = tape.concat_cols(tape.concat_cols(tape.constant(ctx.gat_pq), coord_col),
                                    tape.constant(ctx.gat_flag));         // (R*N x 4)
  ad::Var h = tape.tanh(tape.add(tape.matmul(tokens, params.get(prefix_ + ".embed_w")),
                                 params.get(prefix_ + ".embed_b")));
  ad::Var mask = tape.constant(ctx.attn_mask);
  ad::Var ones_n = tape.constant(Tensor(n, 1, 1.0));
  for (int l = 0; l < cfg_.gat_layers; ++l) {
    const std::string p = prefix_ + ".gat" + std::to_string(l);
    ad::Var wh = tape.matmul(h, params.get(p + "_w"));                    // (R*N x F')
    ad::Var u = tape.matmul(wh, params.get(p + "_asrc"));                 // (R*N x 1)
    ad::Var wv = tape.matmul(wh, params.get(p + "_adst"));                // (R*N x 1)
    ad::Var wmat = tape.reshape(tape.gather_rows(wv, ctx.attn_dst_idx), r * n, n);
    ad::Var e = tape.leaky_relu(tape.add(u, wmat), cfg_.leaky_slope);
    ad::Var em = tape.mul(e, mask);
    // constant per-row shift keeps exp() bounded; softmax is shift-invariant
    Tensor shift(r * n, 1);
    const Tensor& emv = tape.value(em);
    for (std::size_t row = 0; row < r * n; ++row) {
      double mx = 0;
      for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, emv.at(row, c));
      shift[row] = mx;
    }
    ad::Var z = tape.mul(tape.exp(tape.sub(em, tape.constant(shift))), mask);
    ad::Var denom = tape.matmul(z, ones_n);                               // (R*N x 1)
    ad::Var alpha = tape.div(z, denom);                                   // (R*N x N)
    ad::Var whg = tape.gather_rows(wh, ctx.attn_dst_idx);                 // (R*N*N x F')
    ad::Var alpha_rs = tape.reshape(alpha, r * n * n, 1);
    ad::Var agg = tape.segsum_rows(tape.mul(whg, alpha_rs), n);           // (R*N x F')
    h = tape.tanh(agg);
  }
  ad::Var out = tape.gather_rows(h, ctx.target_row_idx);                  // (R x F')
  for (std::size_t l = 0; l <= cfg_.gat_head_hidden.size(); ++l) {
    ad::Var wl = params.get(prefix_ + ".head_w" + std::to_string(l));
    ad::Var bl = params.get(prefix_ + ".head_b" + std::to_string(l));
    out = tape.add(tape.matmul(out, wl), bl);
    if (l < cfg_.gat_head_hidden.size()) out = tape.tanh(out);
  }
  return out;
}

CondScenCache Conditioner::make_cache(const CondWeights& w, const ScenarioContext& scen) const {
  CondScenCache cache;
  if (cfg_.kind == ConditionerKind::fnn) {
    const Tensor& w0 = *w.w[0];
    Eigen::RowVectorXd ctx(scen_dim_ + n_pq_);
    for (int i = 0; i < scen_dim_; ++i) ctx(i) = scen.scen_norm[static_cast<std::size_t>(i)];
    for (int i = 0; i < n_pq_; ++i) ctx(scen_dim_ + i) = (i == scen.target_pq) ? 1.0 : 0.0;
    cache.fnn_first = ctx * map(w0).bottomRows(static_cast<long>(w0.rows()) - 1) + map(*w.b[0]);
    return cache;
  }
  require(cfg_.gat_layers == 1, ErrorCode::internal,
          "conditioner: scenario cache only valid for single-layer GAT");
  const int fp = cfg_.gat_out_dim;
  cache.gat_wh = Eigen::MatrixXd::Zero(n_bus_, fp);
  cache.gat_wdst = Eigen::VectorXd::Zero(n_bus_);
  Eigen::RowVectorXd tok(4);
  for (int i = 0; i < n_bus_; ++i) {
    tok << scen.tok_p[static_cast<std::size_t>(i)], scen.tok_q[static_cast<std::size_t>(i)], 0.0,
        0.0;
    Eigen::RowVectorXd h = (tok * map(*w.w[0]) + map(*w.b[0])).array().tanh().matrix();
    Eigen::RowVectorXd wh = h * map(*w.w[1]);
    cache.gat_wh.row(i) = wh;
    cache.gat_wdst(i) = (wh * map(*w.a_dst[0]))(0, 0);
  }
  return cache;
}

void Conditioner::eval(const CondWeights& w, const CondScenCache& cache,
                       const ScenarioContext& scen, const double* coords, std::size_t n,
                       double* out) const {
  if (cfg_.kind == ConditionerKind::fnn) {
    Eigen::Map<const Eigen::VectorXd> x(coords, static_cast<long>(n));
    Eigen::RowVectorXd w0row = map(*w.w[0]).row(0);
    Eigen::MatrixXd h = ((x * w0row).rowwise() + cache.fnn_first).array().tanh().matrix();
    for (std::size_t l = 1; l < w.w.size(); ++l) {
      h = ((h * map(*w.w[l])).rowwise() + map(*w.b[l]).row(0)).eval();
      if (l + 1 < w.w.size()) h = h.array().tanh().matrix();
    }
    for (std::size_t i = 0; i < n; ++i)
      for (int j = 0; j < out_dim_; ++j)
        out[i * static_cast<std::size_t>(out_dim_) + static_cast<std::size_t>(j)] =
            h(static_cast<long>(i), j);
    return;
  }

  require(cfg_.gat_layers == 1, ErrorCode::internal,
          "conditioner: cached eval requires a single-layer GAT");
  const int tgt = scen.target_pos;
  const auto& nb = neighbors_[static_cast<std::size_t>(tgt)];
  const int fp = cfg_.gat_out_dim;
  Eigen::RowVectorXd tok(4);
  std::vector<double> e(nb.size());
  for (std::size_t i = 0; i < n; ++i) {
    tok << 0.0, 0.0, coords[i], 1.0;
    Eigen::RowVectorXd ht = (tok * map(*w.w[0]) + map(*w.b[0])).array().tanh().matrix();
    Eigen::RowVectorXd wht = ht * map(*w.w[1]);
    const double u_t = (wht * map(*w.a_src[0]))(0, 0);
    const double wdst_t = (wht * map(*w.a_dst[0]))(0, 0);
    double mx = -HUGE_VAL;
    for (std::size_t k = 0; k < nb.size(); ++k) {
      const double wd = nb[k] == tgt ? wdst_t : cache.gat_wdst(nb[k]);
      e[k] = leaky(u_t + wd, cfg_.leaky_slope);
      mx = std::max(mx, e[k]);
    }
    double denom = 0;
    for (double& ek : e) {
      ek = std::exp(ek - mx);
      denom += ek;
    }
    Eigen::RowVectorXd agg = Eigen::RowVectorXd::Zero(fp);
    for (std::size_t k = 0; k < nb.size(); ++k) {
      const double a = e[k] / denom;
      if (nb[k] == tgt)
        agg += a * wht;
      else
        agg += a * cache.gat_wh.row(nb[k]);
    }
    Eigen::RowVectorXd h = agg.array().tanh().matrix();
    for (std::size_t l = 2; l < w.w.size(); ++l) {
      h = (h * map(*w.w[l]) + map(*w.b[l - 1])).eval();
      if (l + 1 < w.w.size()) h = h.array().tanh().matrix();
    }
    for (int j = 0; j < out_dim_; ++j)
      out[i * static_cast<std::size_t>(out_dim_) + static_cast<std::size_t>(j)] = h(j);
  }
}

std::vector<double> Conditioner::eval_one(const CondWeights& w, double coord,
                                          const ScenarioContext& scen) const {
  std::vector<double> out(static_cast<std::size_t>(out_dim_));
  if (cacheable()) {
    CondScenCache cache = make_cache(w, scen);
    eval(w, cache, scen, &coord, 1, out.data());
    return out;
  }
  // multi-layer GAT: full token propagation
  const int tgt = scen.target_pos;
  Tensor tokens(static_cast<std::size_t>(n_bus_), 4);
  for (int i = 0; i < n_bus_; ++i) {
    tokens.at(static_cast<std::size_t>(i), 0) = scen.tok_p[static_cast<std::size_t>(i)];
    tokens.at(static_cast<std::size_t>(i), 1) = scen.tok_q[static_cast<std::size_t>(i)];
  }
  tokens.at(static_cast<std::size_t>(tgt), 0) = 0.0;
  tokens.at(static_cast<std::size_t>(tgt), 1) = 0.0;
  tokens.at(static_cast<std::size_t>(tgt), 2) = coord;
  tokens.at(static_cast<std::size_t>(tgt), 3) = 1.0;

  Eigen::MatrixXd h =
      ((map(tokens) * map(*w.w[0])).rowwise() + map(*w.b[0]).row(0)).array().tanh().matrix();
  for (int l = 0; l < cfg_.gat_layers; ++l) {
    Tensor ht(static_cast<std::size_t>(n_bus_), static_cast<std::size_t>(h.cols()));
    for (int i = 0; i < n_bus_; ++i)
      for (long j = 0; j < h.cols(); ++j)
        ht.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = h(i, j);
    const auto fp = static_cast<std::size_t>(cfg_.gat_out_dim);
    Tensor attn(2 * fp, 1);
    for (std::size_t j = 0; j < fp; ++j) {
      attn[j] = (*w.a_src[static_cast<std::size_t>(l)])[j];
      attn[fp + j] = (*w.a_dst[static_cast<std::size_t>(l)])[j];
    }
    Tensor agg = gat_layer_forward(ht, neighbors_, *w.w[static_cast<std::size_t>(1 + l)], attn,
                                   cfg_.leaky_slope);
    h = map(agg).array().tanh().matrix();
  }
  Eigen::RowVectorXd r = h.row(tgt);
  std::size_t bias = 1;
  for (std::size_t l = 1 + static_cast<std::size_t>(cfg_.gat_layers); l < w.w.size(); ++l) {
    r = (r * map(*w.w[l]) + map(*w.b[bias++])).eval();
    if (l + 1 < w.w.size()) r = r.array().tanh().matrix();
  }
  for (int j = 0; j < out_dim_; ++j) out[static_cast<std::size_t>(j)] = r(j);
  return out;
}

Tensor gat_layer_forward(const Tensor& tokens, const std::vector<std::vector<int>>& neighbors,
                         const Tensor& weight, const Tensor& attn, double leaky_slope) {
  const std::size_t n = tokens.rows();
  require(neighbors.size() == n, ErrorCode::argument, "gat_layer: neighbor list size mismatch");
  require(weight.rows() == tokens.cols(), ErrorCode::argument, "gat_layer: weight shape mismatch");
  const std::size_t fp = weight.cols();
  require(attn.size() == 2 * fp, ErrorCode::argument,
          "gat_layer: attention vector length mismatch");

  Eigen::MatrixXd wh = map(tokens) * map(weight);  // N x F'
  Eigen::VectorXd asrc(static_cast<long>(fp)), adst(static_cast<long>(fp));
  for (std::size_t j = 0; j < fp; ++j) {
    asrc(static_cast<long>(j)) = attn[j];
    adst(static_cast<long>(j)) = attn[fp + j];
  }
  Eigen::VectorXd u = wh * asrc;
  Eigen::VectorXd v = wh * adst;

  Tensor out(n, fp);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& nb = neighbors[i];
    const bool has_self = std::find(nb.begin(), nb.end(), static_cast<int>(i)) != nb.end();
    require(!nb.empty() && has_self, ErrorCode::data,
            "gat_layer: token " + std::to_string(i) + " lacks a self-loop");
    double mx = -HUGE_VAL;
    std::vector<double> e(nb.size());
    for (std::size_t k = 0; k < nb.size(); ++k) {
      e[k] = leaky(u(static_cast<long>(i)) + v(nb[k]), leaky_slope);
      mx = std::max(mx, e[k]);
    }
    double denom = 0;
    for (double& ek : e) {
      ek = std::exp(ek - mx);
      denom += ek;
    }
    Eigen::RowVectorXd agg = Eigen::RowVectorXd::Zero(static_cast<long>(fp));
    for (std::size_t k = 0; k < nb.size(); ++k) agg += (e[k] / denom) * wh.row(nb[k]);
    for (std::size_t j = 0; j < fp; ++j) out.at(i, j) = agg(static_cast<long>(j));
  }
  return out;
}

CondBatchContext make_batch_context(const std::vector<ScenarioContext>& rows,
                                    const ConditionerConfig& cfg, int scen_dim, int n_pq,
                                    int n_bus, const std::vector<std::pair<int, int>>& edges) {
  CondBatchContext ctx;
  const std::size_t r = rows.size();
  ctx.rows = r;
  ctx.n_bus = n_bus;
  if (cfg.kind == ConditionerKind::fnn) {
    ctx.fnn_ctx = Tensor(r, static_cast<std::size_t>(scen_dim + n_pq));
    for (std::size_t i = 0; i < r; ++i) {
      for (int j = 0; j < scen_dim; ++j)
        ctx.fnn_ctx.at(i, static_cast<std::size_t>(j)) =
            rows[i].scen_norm[static_cast<std::size_t>(j)];
      ctx.fnn_ctx.at(i, static_cast<std::size_t>(scen_dim + rows[i].target_pq)) = 1.0;
    }
    return ctx;
  }

  const auto n = static_cast<std::size_t>(n_bus);
  ctx.gat_pq = Tensor(r * n, 2);
  ctx.gat_flag = Tensor(r * n, 1);
  ctx.attn_mask = Tensor(r * n, n);
  auto coord_idx = std::make_shared<std::vector<std::size_t>>(r * n);
  auto dst_idx = std::make_shared<std::vector<std::size_t>>(r * n * n);
  auto tgt_idx = std::make_shared<std::vector<std::size_t>>(r);

  std::vector<std::vector<char>> adj(n, std::vector<char>(n, 0));
  for (auto [f, t] : edges) {
    adj[static_cast<std::size_t>(f)][static_cast<std::size_t>(t)] = 1;
    adj[static_cast<std::size_t>(t)][static_cast<std::size_t>(f)] = 1;
  }
  for (std::size_t b = 0; b < n; ++b) adj[b][b] = 1;

  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t b = 0; b < n; ++b) {
      ctx.gat_pq.at(i * n + b, 0) = rows[i].tok_p[b];
      ctx.gat_pq.at(i * n + b, 1) = rows[i].tok_q[b];
      (*coord_idx)[i * n + b] = i;
      for (std::size_t j = 0; j < n; ++j) {
        (*dst_idx)[(i * n + b) * n + j] = i * n + j;
        ctx.attn_mask.at(i * n + b, j) = adj[b][j] ? 1.0 : 0.0;
      }
    }
    const auto tpos = static_cast<std::size_t>(rows[i].target_pos);
    ctx.gat_flag.at(i * n + tpos, 0) = 1.0;
    (*tgt_idx)[i] = i * n + tpos;
    ctx.gat_pq.at(i * n + tpos, 0) = 0.0;
    ctx.gat_pq.at(i * n + tpos, 1) = 0.0;
  }
  ctx.coord_expand_idx = coord_idx;
  ctx.attn_dst_idx = dst_idx;
  ctx.target_row_idx = tgt_idx;
  return ctx;
}

}  // namespace flowppf
