#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowppf/core/tensor.hpp"

namespace flowppf::ad {

enum class Op : std::uint8_t {
  leaf,
  constant,
  matmul,
  add,
  sub,
  mul,
  div,
  exp,
  log,
  tanh,
  leaky_relu,
  softplus,
  softmax_rows,
  concat_cols,
  slice_cols,
  sum_all,
  mean_all,
  reshape,
  gather_rows,
  segsum_rows,
};

const char* op_name(Op op);

class Tape;

// Cheap handle into a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

struct Node {
  Op op = Op::leaf;
  int a = -1, b = -1;
  Tensor value;
  Tensor grad;
  bool needs_grad = false;
  bool grad_alloc = false;
  double scalar = 0.0;               // leaky_relu slope
  std::size_t i0 = 0, i1 = 0;        // slice start/len, reshape rows/cols, segsum group size
  std::shared_ptr<const std::vector<std::size_t>> idx;  // gather_rows indices
};

// Eager reverse-mode tape. Values are computed as ops are recorded; backward
// runs a single reverse sweep. Single-threaded per instance.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var exp(Var a);
  Var log(Var a);
  Var tanh(Var a);
  Var leaky_relu(Var a, double slope);
  Var softplus(Var a);
  Var softmax_rows(Var a);
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, std::size_t start, std::size_t len);
  Var sum(Var a);
  Var mean(Var a);
  Var reshape(Var a, std::size_t rows, std::size_t cols);
  Var gather_rows(Var a, std::shared_ptr<const std::vector<std::size_t>> idx);
  Var segsum_rows(Var a, std::size_t group);

  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool has_grad(Var v) const;

  // Returns the root value; provided mainly to make the forward/backward
  // lifecycle explicit in calling code and tests.
  const Tensor& forward(Var root) const { return value(root); }

  // Reverse sweep from a scalar root. Calling twice without zero_grad is an error.
  void backward(Var root);
  void zero_grad();

  std::size_t node_count() const { return nodes_.size(); }

 private:
  int push(Node&& n);
  Node& node(int id);
  const Node& node(int id) const;
  Var elementwise_binary(Op op, Var a, Var b);
  Var elementwise_unary(Op op, Var a, double scalar = 0.0);
  void accumulate(int id, const Tensor& g, bool reduce_broadcast = false);

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

// Named parameters plus optimizer state.
struct ParamEntry {
  std::string name;
  Tensor value;
  Tensor moment1;
  Tensor moment2;
};

enum class OptimizerKind { adam, adamw };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // adamw only
};

class ParamStore {
 public:
  void add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  std::size_t count() const { return entries_.size(); }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }

  std::size_t total_size() const;

  // One optimizer step from gradients accumulated on `tape` for the leaves
  // bound through a GraphParams instance.
  void advance_step() { ++step_; }

 private:
  friend class GraphParams;
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::int64_t step_ = 0;
};

// Binds store parameters into a tape as leaves (one leaf per parameter per
// tape) and reads gradients back after backward.
class GraphParams {
 public:
  GraphParams(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}

  Var get(const std::string& name);

  // Applies Adam/AdamW with the given learning rate using gradients of the
  // bound leaves. Parameters never bound on this tape are left untouched.
  void apply_step(double lr, const OptimizerConfig& cfg);

 private:
  Tape* tape_;
  ParamStore* store_;
  std::unordered_map<std::string, Var> bound_;
};

// Scalar function with analytic gradient, as produced by an AD evaluation.
using GradFn = std::function<double(const std::vector<double>&, std::vector<double>* grad)>;

// Max over coordinates of |analytic - central difference| / (|central difference| + 1e-12).
double grad_check(const GradFn& f, const std::vector<double>& point, double step);

}  // namespace flowppf::ad
