#include "flowppf/core/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace flowppf::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::tanh: return "tanh";
    case Op::leaky_relu: return "leaky_relu";
    case Op::softplus: return "softplus";
    case Op::softmax_rows: return "softmax_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::slice_cols: return "slice_cols";
    case Op::sum_all: return "sum";
    case Op::mean_all: return "mean";
    case Op::reshape: return "reshape";
    case Op::gather_rows: return "gather_rows";
    case Op::segsum_rows: return "segsum_rows";
  }
  return "?";
}

const Tensor& Var::value() const { return tape->value(*this); }

namespace {

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
  raise(ErrorCode::internal,
        std::string("autodiff: shape mismatch in ") + op_name(op) + ": (" +
            std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + ") vs (" +
            std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
}

bool broadcast_ok(const Tensor& a, const Tensor& b) {
  auto dim_ok = [](std::size_t x, std::size_t y) { return x == y || x == 1 || y == 1; };
  return dim_ok(a.rows(), b.rows()) && dim_ok(a.cols(), b.cols());
}

double softplus_val(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

int Tape::push(Node&& n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size() - 1);
}

Node& Tape::node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
const Node& Tape::node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

const Tensor& Tape::value(Var v) const {
  require(v.tape == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()),
          ErrorCode::internal, "autodiff: var does not belong to this tape");
  return node(v.id).value;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v.id);
  require(n.grad_alloc, ErrorCode::internal, "autodiff: gradient not computed for node");
  return n.grad;
}

bool Tape::has_grad(Var v) const { return node(v.id).grad_alloc; }

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = Op::leaf;
  n.needs_grad = grad_enabled_;
  n.value = std::move(value);
  return {this, push(std::move(n))};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = Op::constant;
  n.needs_grad = false;
  n.value = std::move(value);
  return {this, push(std::move(n))};
}

Var Tape::elementwise_binary(Op op, Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!broadcast_ok(va, vb)) shape_error(op, va, vb);
  std::size_t rows = std::max(va.rows(), vb.rows());
  std::size_t cols = std::max(va.cols(), vb.cols());
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = node(a.id).needs_grad || node(b.id).needs_grad;
  n.value = Tensor(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double x = va.at(va.rows() == 1 ? 0 : r, va.cols() == 1 ? 0 : c);
      double y = vb.at(vb.rows() == 1 ? 0 : r, vb.cols() == 1 ? 0 : c);
      double& out = n.value.at(r, c);
      switch (op) {
        case Op::add: out = x + y; break;
        case Op::sub: out = x - y; break;
        case Op::mul: out = x * y; break;
        case Op::div: out = x / y; break;
        default: raise(ErrorCode::internal, "autodiff: bad binary op");
      }
    }
  }
  return {this, push(std::move(n))};
}

Var Tape::add(Var a, Var b) { return elementwise_binary(Op::add, a, b); }
Var Tape::sub(Var a, Var b) { return elementwise_binary(Op::sub, a, b); }
Var Tape::mul(Var a, Var b) { return elementwise_binary(Op::mul, a, b); }
Var Tape::div(Var a, Var b) { return elementwise_binary(Op::div, a, b); }

Var Tape::elementwise_unary(Op op, Var a, double scalar) {
  const Tensor& va = value(a);
  Node n;
  n.op = op;
  n.a = a.id;
  n.scalar = scalar;
  n.needs_grad = node(a.id).needs_grad;
  n.value = Tensor(va.rows(), va.cols());
  for (std::size_t i = 0; i < va.size(); ++i) {
    double x = va[i];
    double& out = n.value[i];
    switch (op) {
      case Op::exp: out = std::exp(x); break;
      case Op::log: out = std::log(x); break;
      case Op::tanh: out = std::tanh(x); break;
      case Op::leaky_relu: out = x >= 0 ? x : scalar * x; break;
      case Op::softplus: out = softplus_val(x); break;
      default: raise(ErrorCode::internal, "autodiff: bad unary op");
    }
  }
  return {this, push(std::move(n))};
}

Var Tape::exp(Var a) { return elementwise_unary(Op::exp, a); }
Var Tape::log(Var a) { return elementwise_unary(Op::log, a); }
Var Tape::tanh(Var a) { return elementwise_unary(Op::tanh, a); }
Var Tape::leaky_relu(Var a, double slope) { return elementwise_unary(Op::leaky_relu, a, slope); }
Var Tape::softplus(Var a) { return elementwise_unary(Op::softplus, a); }

Var Tape::matmul(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.cols() != vb.rows()) shape_error(Op::matmul, va, vb);
  Node n;
  n.op = Op::matmul;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = node(a.id).needs_grad || node(b.id).needs_grad;
  n.value = Tensor(va.rows(), vb.cols());
  const std::size_t m = va.rows(), k = va.cols(), p = vb.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* out = n.value.data() + i * p;
    const double* arow = va.data() + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      double av = arow[t];
      if (av == 0.0) continue;
      const double* brow = vb.data() + t * p;
      for (std::size_t j = 0; j < p; ++j) out[j] += av * brow[j];
    }
  }
  return {this, push(std::move(n))};
}

Var Tape::softmax_rows(Var a) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::softmax_rows;
  n.a = a.id;
  n.needs_grad = node(a.id).needs_grad;
  n.value = Tensor(va.rows(), va.cols());
  for (std::size_t r = 0; r < va.rows(); ++r) {
    double mx = -HUGE_VAL;
    for (std::size_t c = 0; c < va.cols(); ++c) mx = std::max(mx, va.at(r, c));
    double sum = 0;
    for (std::size_t c = 0; c < va.cols(); ++c) {
      double e = std::exp(va.at(r, c) - mx);
      n.value.at(r, c) = e;
      sum += e;
    }
    for (std::size_t c = 0; c < va.cols(); ++c) n.value.at(r, c) /= sum;
  }
  return {this, push(std::move(n))};
}

Var Tape::concat_cols(Var a, Var b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rows() != vb.rows()) shape_error(Op::concat_cols, va, vb);
  Node n;
  n.op = Op::concat_cols;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = node(a.id).needs_grad || node(b.id).needs_grad;
  n.value = Tensor(va.rows(), va.cols() + vb.cols());
  for (std::size_t r = 0; r < va.rows(); ++r) {
    for (std::size_t c = 0; c < va.cols(); ++c) n.value.at(r, c) = va.at(r, c);
    for (std::size_t c = 0; c < vb.cols(); ++c) n.value.at(r, va.cols() + c) = vb.at(r, c);
  }
  return {this, push(std::move(n))};
}

Var Tape::slice_cols(Var a, std::size_t start, std::size_t len) {
  const Tensor& va = value(a);
  require(start + len <= va.cols(), ErrorCode::internal, "autodiff: slice out of range");
  Node n;
  n.op = Op::slice_cols;
  n.a = a.id;
  n.i0 = start;
  n.i1 = len;
  n.needs_grad = node(a.id).needs_grad;
  n.value = Tensor(va.rows(), len);
  for (std::size_t r = 0; r < va.rows(); ++r)
    for (std::size_t c = 0; c < len; ++c) n.value.at(r, c) = va.at(r, start + c);
  return {this, push(std::move(n))};
}

Var Tape::sum(Var a) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::sum_all;
  n.a = a.id;
  n.needs_grad = node(a.id).needs_grad;
  double s = 0;
  for (std::size_t i = 0; i < va.size(); ++i) s += va[i];
  n.value = Tensor::scalar(s);
  return {this, push(std::move(n))};
}

Var Tape::mean(Var a) {
  const Tensor& va = value(a);
  require(va.size() > 0, ErrorCode::internal, "autodiff: mean of empty tensor");
  Node n;
  n.op = Op::mean_all;
  n.a = a.id;
  n.needs_grad = node(a.id).needs_grad;
  double s = 0;
  for (std::size_t i = 0; i < va.size(); ++i) s += va[i];
  n.value = Tensor::scalar(s / static_cast<double>(va.size()));
  return {this, push(std::move(n))};
}

Var Tape::reshape(Var a, std::size_t rows, std::size_t cols) {
  const Tensor& va = value(a);
  require(rows * cols == va.size(), ErrorCode::internal, "autodiff: reshape size mismatch");
  Node n;
  n.op = Op::reshape;
  n.a = a.id;
  n.i0 = rows;
  n.i1 = cols;
  n.needs_grad = node(a.id).needs_grad;
  n.value = Tensor(rows, cols);
  n.value.vec() = va.vec();
  return {this, push(std::move(n))};
}

Var Tape::gather_rows(Var a, std::shared_ptr<const std::vector<std::size_t>> idx) {
  const Tensor& va = value(a);
  Node n;
  n.op = Op::gather_rows;
  n.a = a.id;
  n.idx = std::move(idx);
  n.needs_grad = node(a.id).needs_grad;
  n.value = Tensor(n.idx->size(), va.cols());
  for (std::size_t r = 0; r < n.idx->size(); ++r) {
    std::size_t src = (*n.idx)[r];
    require(src < va.rows(), ErrorCode::internal, "autodiff: gather index out of range");
    for (std::size_t c = 0; c < va.cols(); ++c) n.value.at(r, c) = va.at(src, c);
  }
  return {this, push(std::move(n))};
}

Var Tape::segsum_rows(Var a, std::size_t group) {
  const Tensor& va = value(a);
  require(group > 0 && va.rows() % group == 0, ErrorCode::internal,
          "autodiff: segsum group must divide row count");
  Node n;
  n.op = Op::segsum_rows;
  n.a = a.id;
  n.i0 = group;
  n.needs_grad = node(a.id).needs_grad;
  n.value = Tensor(va.rows() / group, va.cols());
  for (std::size_t r = 0; r < va.rows(); ++r)
    for (std::size_t c = 0; c < va.cols(); ++c) n.value.at(r / group, c) += va.at(r, c);
  return {this, push(std::move(n))};
}

void Tape::accumulate(int id, const Tensor& g, bool reduce_broadcast) {
  Node& n = node(id);
  if (!n.needs_grad) return;
  if (!n.grad_alloc) {
    n.grad = Tensor(n.value.rows(), n.value.cols());
    n.grad_alloc = true;
  }
  if (!reduce_broadcast || n.grad.same_shape(g)) {
    require(n.grad.same_shape(g), ErrorCode::internal, "autodiff: gradient shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    return;
  }
  // sum-reduce the broadcast dimensions
  for (std::size_t r = 0; r < g.rows(); ++r) {
    std::size_t rr = n.grad.rows() == 1 ? 0 : r;
    for (std::size_t c = 0; c < g.cols(); ++c) {
      std::size_t cc = n.grad.cols() == 1 ? 0 : c;
      n.grad.at(rr, cc) += g.at(r, c);
    }
  }
}

void Tape::backward(Var root) {
  require(root.tape == this, ErrorCode::internal, "autodiff: root from another tape");
  require(!backward_done_, ErrorCode::internal,
          "autodiff: backward called twice without zero_grad");
  const Tensor& rv = value(root);
  require(rv.size() == 1, ErrorCode::internal, "autodiff: backward root must be scalar");
  backward_done_ = true;
  if (!node(root.id).needs_grad) return;
  accumulate(root.id, Tensor::scalar(1.0));

  auto broadcast_read = [](const Tensor& t, std::size_t r, std::size_t c) {
    return t.at(t.rows() == 1 ? 0 : r, t.cols() == 1 ? 0 : c);
  };

  for (int id = root.id; id >= 0; --id) {
    Node& n = node(id);
    if (!n.grad_alloc || !n.needs_grad) continue;
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::leaf:
      case Op::constant:
        break;
      case Op::add: {
        accumulate(n.a, g, true);
        accumulate(n.b, g, true);
        break;
      }
      case Op::sub: {
        accumulate(n.a, g, true);
        Tensor neg(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
        accumulate(n.b, neg, true);
        break;
      }
      case Op::mul: {
        const Tensor& va = node(n.a).value;
        const Tensor& vb = node(n.b).value;
        Tensor da(g.rows(), g.cols()), db(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) {
            da.at(r, c) = g.at(r, c) * broadcast_read(vb, r, c);
            db.at(r, c) = g.at(r, c) * broadcast_read(va, r, c);
          }
        accumulate(n.a, da, true);
        accumulate(n.b, db, true);
        break;
      }
      case Op::div: {
        const Tensor& va = node(n.a).value;
        const Tensor& vb = node(n.b).value;
        Tensor da(g.rows(), g.cols()), db(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) {
            double bv = broadcast_read(vb, r, c);
            double av = broadcast_read(va, r, c);
            da.at(r, c) = g.at(r, c) / bv;
            db.at(r, c) = -g.at(r, c) * av / (bv * bv);
          }
        accumulate(n.a, da, true);
        accumulate(n.b, db, true);
        break;
      }
      case Op::matmul: {
        const Tensor& va = node(n.a).value;
        const Tensor& vb = node(n.b).value;
        // dA = g * B^T
        Tensor da(va.rows(), va.cols());
        const std::size_t m = va.rows(), k = va.cols(), p = vb.cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t t = 0; t < k; ++t) {
            double s = 0;
            const double* grow = g.data() + i * p;
            const double* brow = vb.data() + t * p;
            for (std::size_t j = 0; j < p; ++j) s += grow[j] * brow[j];
            da.at(i, t) = s;
          }
        accumulate(n.a, da);
        // dB = A^T * g
        Tensor db(vb.rows(), vb.cols());
        for (std::size_t t = 0; t < k; ++t) {
          double* drow = db.data() + t * p;
          for (std::size_t i = 0; i < m; ++i) {
            double av = va.at(i, t);
            if (av == 0.0) continue;
            const double* grow = g.data() + i * p;
            for (std::size_t j = 0; j < p; ++j) drow[j] += av * grow[j];
          }
        }
        accumulate(n.b, db);
        break;
      }
      case Op::exp: {
        Tensor da(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * n.value[i];
        accumulate(n.a, da);
        break;
      }
      case Op::log: {
        const Tensor& va = node(n.a).value;
        Tensor da(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] / va[i];
        accumulate(n.a, da);
        break;
      }
      case Op::tanh: {
        Tensor da(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * (1.0 - n.value[i] * n.value[i]);
        accumulate(n.a, da);
        break;
      }
      case Op::leaky_relu: {
        const Tensor& va = node(n.a).value;
        Tensor da(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * (va[i] >= 0 ? 1.0 : n.scalar);
        accumulate(n.a, da);
        break;
      }
      case Op::softplus: {
        const Tensor& va = node(n.a).value;
        Tensor da(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * sigmoid(va[i]);
        accumulate(n.a, da);
        break;
      }
      case Op::softmax_rows: {
        Tensor da(g.rows(), g.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          double dot = 0;
          for (std::size_t c = 0; c < g.cols(); ++c) dot += g.at(r, c) * n.value.at(r, c);
          for (std::size_t c = 0; c < g.cols(); ++c)
            da.at(r, c) = n.value.at(r, c) * (g.at(r, c) - dot);
        }
        accumulate(n.a, da);
        break;
      }
      case Op::concat_cols: {
        const Tensor& va = node(n.a).value;
        const Tensor& vb = node(n.b).value;
        Tensor da(va.rows(), va.cols()), db(vb.rows(), vb.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < va.cols(); ++c) da.at(r, c) = g.at(r, c);
          for (std::size_t c = 0; c < vb.cols(); ++c) db.at(r, c) = g.at(r, va.cols() + c);
        }
        accumulate(n.a, da);
        accumulate(n.b, db);
        break;
      }
      case Op::slice_cols: {
        const Tensor& va = node(n.a).value;
        Tensor da(va.rows(), va.cols());
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) da.at(r, n.i0 + c) = g.at(r, c);
        accumulate(n.a, da);
        break;
      }
      case Op::sum_all: {
        const Tensor& va = node(n.a).value;
        Tensor da(va.rows(), va.cols(), g.item());
        accumulate(n.a, da);
        break;
      }
      case Op::mean_all: {
        const Tensor& va = node(n.a).value;
        Tensor da(va.rows(), va.cols(), g.item() / static_cast<double>(va.size()));
        accumulate(n.a, da);
        break;
      }
      case Op::reshape: {
        const Tensor& va = node(n.a).value;
        Tensor da(va.rows(), va.cols());
        da.vec() = g.vec();
        accumulate(n.a, da);
        break;
      }
      case Op::gather_rows: {
        const Tensor& va = node(n.a).value;
        Tensor da(va.rows(), va.cols());
        for (std::size_t r = 0; r < g.rows(); ++r) {
          std::size_t dst = (*n.idx)[r];
          for (std::size_t c = 0; c < g.cols(); ++c) da.at(dst, c) += g.at(r, c);
        }
        accumulate(n.a, da);
        break;
      }
      case Op::segsum_rows: {
        const Tensor& va = node(n.a).value;
        Tensor da(va.rows(), va.cols());
        for (std::size_t r = 0; r < va.rows(); ++r)
          for (std::size_t c = 0; c < va.cols(); ++c) da.at(r, c) = g.at(r / n.i0, c);
        accumulate(n.a, da);
        break;
      }
    }
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    if (n.grad_alloc) n.grad.fill(0.0);
  }
  backward_done_ = false;
}

void ParamStore::add(const std::string& name, Tensor init) {
  require(!has(name), ErrorCode::argument, "ParamStore: duplicate parameter '" + name + "'");
  ParamEntry e;
  e.name = name;
  e.moment1 = Tensor(init.rows(), init.cols());
  e.moment2 = Tensor(init.rows(), init.cols());
  e.value = std::move(init);
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
}

Tensor& ParamStore::value(const std::string& name) {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorCode::argument, "ParamStore: unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorCode::argument, "ParamStore: unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

Var GraphParams::get(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_->leaf(store_->value(name));
  bound_[name] = v;
  return v;
}

void GraphParams::apply_step(double lr, const OptimizerConfig& cfg) {
  store_->advance_step();
  const double t = static_cast<double>(store_->step_count());
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, var] : bound_) {
    auto idx = store_->index_.find(name);
    ParamEntry& e = store_->entries_[idx->second];
    // grads may be absent if nothing depended on this leaf
    Tensor zeros;
    const Tensor* g;
    if (tape_->has_grad(var)) {
      g = &tape_->grad(var);
    } else {
      zeros = Tensor(e.value.rows(), e.value.cols());
      g = &zeros;
    }
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      double gi = (*g)[i];
      if (cfg.kind == OptimizerKind::adamw && cfg.weight_decay > 0)
        e.value[i] -= lr * cfg.weight_decay * e.value[i];
      e.moment1[i] = cfg.beta1 * e.moment1[i] + (1 - cfg.beta1) * gi;
      e.moment2[i] = cfg.beta2 * e.moment2[i] + (1 - cfg.beta2) * gi * gi;
      double mhat = e.moment1[i] / bc1;
      double vhat = e.moment2[i] / bc2;
      e.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double grad_check(const GradFn& f, const std::vector<double>& point, double step) {
  std::vector<double> analytic(point.size(), 0.0);
  double f0 = f(point, &analytic);
  require(std::isfinite(f0), ErrorCode::numeric, "grad_check: non-finite function value");
  std::vector<double> x = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    x[i] = point[i] + step;
    double fp = f(x, nullptr);
    x[i] = point[i] - step;
    double fm = f(x, nullptr);
    x[i] = point[i];
    require(std::isfinite(fp) && std::isfinite(fm), ErrorCode::numeric,
            "grad_check: non-finite function value at perturbed point");
    double fd = (fp - fm) / (2.0 * step);
    double err = std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace flowppf::ad
