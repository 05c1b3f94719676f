#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowppf/core/autodiff.hpp"
#include "flowppf/core/tensor.hpp"

namespace flowppf {

enum class ConditionerKind { fnn, gat };

struct ConditionerConfig {
  ConditionerKind kind = ConditionerKind::fnn;
  std::vector<int> fnn_hidden = {64, 64};
  int gat_embed_dim = 16;
  int gat_out_dim = 16;
  int gat_layers = 1;
  std::vector<int> gat_head_hidden = {32};
  double leaky_slope = 0.2;
};

// Per-scenario conditioning data in normalized coordinates.
struct ScenarioContext {
  int target_pq = 0;              // index into PQ order of the target bus
  int target_pos = 0;             // bus position of the target bus
  std::vector<double> scen_norm;  // 2*(n_pq-1): [p of others..., q of others...]
  std::vector<double> tok_p;      // per bus position; 0 at slack and target
  std::vector<double> tok_q;
};

// Constant per-batch data shared by all conditioner graph builds of a step.
struct CondBatchContext {
  std::size_t rows = 0;
  int n_bus = 0;
  Tensor fnn_ctx;  // (R x scen_dim + n_pq): scenario ++ target one-hot
  // GAT token constants, laid out token-major per row: (R*N x ...)
  Tensor gat_pq;    // (R*N x 2)
  Tensor gat_flag;  // (R*N x 1)
  Tensor attn_mask;  // (R*N x N), adjacency with self-loops, tiled per row
  std::shared_ptr<const std::vector<std::size_t>> coord_expand_idx;  // len R*N -> r
  std::shared_ptr<const std::vector<std::size_t>> attn_dst_idx;      // len R*N*N -> r*N+j
  std::shared_ptr<const std::vector<std::size_t>> target_row_idx;    // len R -> r*N + target(r)
};

// Resolved raw weights for the fast numeric path; values point into a
// ParamStore that must outlive this view.
struct CondWeights {
  std::vector<const Tensor*> w;  // layer weights in order
  std::vector<const Tensor*> b;  // layer biases in order
  // gat: w = [We, W_l..., head...], a vectors kept separately
  std::vector<const Tensor*> a_src;
  std::vector<const Tensor*> a_dst;
};

// Numeric cache of the scenario-dependent part of a conditioner, reused
// across many coordinate evaluations against one scenario.
struct CondScenCache {
  // fnn: first-layer contribution of the scenario block
  Eigen::RowVectorXd fnn_first;
  // gat (single attention layer): cached per-token quantities
  Eigen::MatrixXd gat_wh;    // N x F'
  Eigen::VectorXd gat_wdst;  // N
};

// One trainable conditioner network (one of s1/t1/s2/t2/u1/u2 of a flow
// layer), in FNN or masked-attention (GAT) flavor. The GAT flavor scatters
// the scenario into per-bus tokens; the target token carries the transformed
// coordinate and a flag.
class Conditioner {
 public:
  Conditioner(std::string prefix, ConditionerConfig cfg, int out_dim, int scen_dim, int n_pq,
              int n_bus, std::vector<std::pair<int, int>> edges);

  const std::string& prefix() const { return prefix_; }
  int out_dim() const { return out_dim_; }

  void init_params(ad::ParamStore& store, Rng& rng) const;

  // training path: coord is (R x 1); returns (R x out_dim)
  ad::Var build(ad::Tape& tape, ad::GraphParams& params, ad::Var coord,
                const CondBatchContext& ctx) const;

  CondWeights resolve(const ad::ParamStore& store) const;
  CondScenCache make_cache(const CondWeights& w, const ScenarioContext& scen) const;

  // fast numeric path: n coordinates against one cached scenario
  void eval(const CondWeights& w, const CondScenCache& cache, const ScenarioContext& scen,
            const double* coords, std::size_t n, double* out) const;

  // convenience for tests and spot evaluations
  std::vector<double> eval_one(const CondWeights& w, double coord,
                               const ScenarioContext& scen) const;

  std::vector<std::string> param_names() const;

 private:
  void fnn_dims(std::vector<int>& dims) const;
  bool cacheable() const { return cfg_.kind == ConditionerKind::fnn || cfg_.gat_layers == 1; }

  std::string prefix_;
  ConditionerConfig cfg_;
  int out_dim_;
  int scen_dim_;
  int n_pq_;
  int n_bus_;
  std::vector<std::vector<int>> neighbors_;  // per bus position, self-loop included
};

// Plain masked-attention layer on a token matrix; exposed for direct tests.
// neighbors must include self-loops; a is the concatenated attention vector
// [a_src; a_dst] of length 2*F'.
Tensor gat_layer_forward(const Tensor& tokens, const std::vector<std::vector<int>>& neighbors,
                         const Tensor& weight, const Tensor& attn, double leaky_slope);

// Builds the shared constant context for a training batch.
CondBatchContext make_batch_context(const std::vector<ScenarioContext>& rows,
                                    const ConditionerConfig& cfg, int scen_dim, int n_pq,
                                    int n_bus, const std::vector<std::pair<int, int>>& edges);

}  // namespace flowppf
