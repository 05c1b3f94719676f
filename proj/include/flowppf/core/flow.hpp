#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "flowppf/core/autodiff.hpp"
#include "flowppf/core/conditioner.hpp"
#include "flowppf/core/gmm.hpp"
#include "flowppf/core/network.hpp"

namespace flowppf {

enum class FlowDirection { forward, inverse };

struct FlowConfig {
  int n_sfcp = 4;
  int n_spline = 4;
  int spline_bins = 8;        // K_b
  double spline_bound = 4.0;  // B; inputs are z-scored first
  double min_bin_frac = 1e-3;
  double scale_clamp = 3.0;   // s-outputs pass through scale_clamp * tanh(.)
  ConditionerConfig conditioner;
};

// Per-feature statistics of the training dataset, frozen into the checkpoint.
// Layout follows the dataset columns: [p..., q...] and [vm..., va...].
struct NormStats {
  std::vector<double> inj_mean, inj_scale;
  std::vector<double> state_mean, state_scale;
};

// Monotonic rational-quadratic spline on [-B, B] with identity tails.
struct SplineParams {
  std::vector<double> knots_x;  // K+1, ascending, spanning [-B, B]
  std::vector<double> knots_y;  // K+1
  std::vector<double> derivs;   // K+1, boundary entries fixed at 1
  double bound = 4.0;
};

// Converts 3*K-1 raw conditioner outputs into valid spline parameters.
// raw = 0 yields the identity spline: uniform bins, all derivatives 1.
SplineParams spline_create(const std::vector<double>& raw, int k_bins, double bound,
                           double min_bin_frac);

// Returns (y, log dy/dx). Outside [-B, B] the map is the identity with zero
// log-derivative.
std::pair<double, double> spline_forward(const SplineParams& sp, double x);
std::pair<double, double> spline_inverse(const SplineParams& sp, double y);

// The invertible mixed flow: n_sfcp coupling blocks followed by n_spline
// elementwise spline blocks, all conditioned on the scenario vector, with
// per-feature normalization on both sides.
class ImnfModel {
 public:
  struct Topology {
    int n_bus = 0;
    std::vector<int> pq_ids;
    std::vector<int> pq_positions;
    std::vector<std::pair<int, int>> edges;
  };

  ImnfModel(FlowConfig config, Topology topo, NormStats stats, std::uint64_t seed);

  static ImnfModel create(const FlowConfig& config, const Network& net, std::uint64_t seed);

  const FlowConfig& config() const { return config_; }
  const Topology& topology() const { return topo_; }
  const NormStats& stats() const { return stats_; }
  NormStats& stats() { return stats_; }
  int n_pq() const { return static_cast<int>(topo_.pq_ids.size()); }
  int scen_dim() const { return 2 * (n_pq() - 1); }

  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  // --- scenario handling -------------------------------------------------
  // scen_raw layout: [p of other PQ buses ascending, q of other PQ buses]
  ScenarioContext make_scenario(const std::vector<double>& scen_raw, int target_pq) const;
  // drops bus k's (p, q) from a full injection vector [p..., q...]
  std::vector<double> drop_bus(const std::vector<double>& full, int target_pq) const;

  // --- numeric path -------------------------------------------------------
  struct SfcpMatrix {
    double a11, a12, a21, a22;
    double i11, i12, i21, i22;
    double log_det;
  };
  struct Resolved {
    std::vector<CondWeights> cond;  // conditioner order: per sfcp {s1,t1,s2,t2}, per spline {u1,u2}
    std::vector<SfcpMatrix> sfcp_a;
  };
  struct EvalCache {
    std::vector<CondScenCache> per_cond;
  };

  Resolved resolve() const;
  EvalCache make_eval_cache(const Resolved& r, const ScenarioContext& scen) const;

  // Raw-coordinate transform of n points (row-major n x 2). logdet may be
  // null; when present it receives the log |det Jacobian| of the applied map
  // (normalization terms included).
  void apply_batch(const Resolved& r, FlowDirection dir, const ScenarioContext& scen,
                   const EvalCache& cache, const double* in, std::size_t n, double* out,
                   double* logdet) const;

  // single-point convenience
  std::pair<std::array<double, 2>, double> transform(const std::array<double, 2>& xy,
                                                     const std::vector<double>& scen_raw,
                                                     int target_pq, FlowDirection dir) const;

  // --- training path -------------------------------------------------------
  // Chain over an (R x 2) normalized input; conditioners read `ctx`.
  // When logdet_out is non-null it receives an (R x 1) log|det J| of the
  // normalized-space chain.
  ad::Var build_chain(ad::Tape& tape, ad::GraphParams& params, ad::Var in,
                      const CondBatchContext& ctx, FlowDirection dir,
                      ad::Var* logdet_out = nullptr) const;

  CondBatchContext make_batch_context(const std::vector<ScenarioContext>& rows) const;

  // normalization helpers (bus-local 2-vectors)
  std::array<double, 2> normalize_injection(int target_pq, const std::array<double, 2>& pq) const;
  std::array<double, 2> denormalize_injection(int target_pq, const std::array<double, 2>& z) const;
  std::array<double, 2> normalize_state(int target_pq, const std::array<double, 2>& vmva) const;
  std::array<double, 2> denormalize_state(int target_pq, const std::array<double, 2>& z) const;
  // log scale sums entering the Jacobian of the full raw-space map
  double norm_logdet(int target_pq, FlowDirection dir) const;

  const std::vector<Conditioner>& conditioners() const { return conds_; }

  // --- checkpoint ----------------------------------------------------------
  std::string to_json_text() const;
  static ImnfModel from_json_text(const std::string& text);
  static ImnfModel from_json_file(const std::string& path);
  void save_json_file(const std::string& path) const;

 private:
  void build_conditioners();
  ad::Var build_spline_ad(ad::Tape& tape, ad::Var coord, ad::Var raw, bool inverse,
                          ad::Var* ld) const;
  int cond_index_sfcp(int layer, int which) const { return 4 * layer + which; }
  int cond_index_spline(int layer, int which) const {
    return 4 * config_.n_sfcp + 2 * layer + which;
  }

  FlowConfig config_;
  Topology topo_;
  NormStats stats_;
  ad::ParamStore params_;
  std::vector<Conditioner> conds_;
};

// Change-of-variables density: log p(v | s) with the injection mixture `base`
// (the 2-D conditional of the joint at the scenario) pulled back through the
// inverse transform.
double conditional_log_density(const ImnfModel& model, const std::array<double, 2>& v,
                               int target_pq, const std::vector<double>& scen_raw,
                               const Gmm& base);

}  // namespace flowppf
