#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "flowppf/core/flow.hpp"

namespace flowppf {

enum class LrKind { constant, circular };

struct LrSchedule {
  LrKind kind = LrKind::constant;
  double lr = 1e-3;       // constant
  double lr_max = 5e-4;   // circular
  double lr_min = 5e-6;
  int period = 1000;
};

// constant -> lr; circular -> triangular wave starting at lr_min, peaking at
// half period.
double lr_at(const LrSchedule& schedule, std::int64_t step);

enum class DataSource { dataset, surrogate, pf_solver };

struct TrainConfig {
  double omega = 0.5;
  int batch = 64;
  int max_steps = 5000;
  LrSchedule lr;
  ad::OptimizerConfig optimizer;
  std::uint64_t seed = 1;
  DataSource source = DataSource::pf_solver;
  int checkpoint_every = 0;  // steps; 0 disables periodic checkpoints
  std::string checkpoint_path;
  double pf_tol = 1e-8;
  int pf_max_iter = 30;
};

// Defaults mirroring the reported experimental setups.
TrainConfig pf_task_preset();
TrainConfig ppf_task_preset();

struct TraceRow {
  std::int64_t step = 0;
  double lr = 0, loss = 0, loss_w2o = 0, loss_o2w = 0;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  int steps_done = 0;
  bool aborted = false;  // NaN loss; model holds the last good parameters
  std::string abort_reason;
  int pf_rejections = 0;
};

void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path);

// One per-bus training example.
struct TrainRow {
  int target_pq = 0;
  std::array<double, 2> inj{};    // (p_i, q_i)
  std::array<double, 2> state{};  // (vm_i, va_i)
  std::vector<double> scen_raw;   // other buses' injections [p..., q...]
};

struct LossBreakdown {
  double loss = 0, loss_w2o = 0, loss_o2w = 0;
};

// Numeric evaluation of the bidirectional objective in normalized
// coordinates: omega * MSE(f(x|s), y) + (1-omega) * MSE(f^{-1}(y|s), x).
LossBreakdown bidirectional_loss(const ImnfModel& model, const std::vector<TrainRow>& batch,
                                 double omega);

// Held-out forward mean absolute error in normalized coordinates.
double heldout_forward_mae(const ImnfModel& model, const std::vector<TrainRow>& rows);

// Expands dataset rows into per-bus training rows (all buses per row).
std::vector<TrainRow> rows_from_dataset(const Dataset& ds, int n_pq);

NormStats compute_norm_stats(const Dataset& ds);

// ---------------------------------------------------------------------------
// surrogate
// ---------------------------------------------------------------------------

// Plain feed-forward map from the full injection vector to the full state
// vector, used to substitute PF solves during pretraining.
class Surrogate {
 public:
  Surrogate(int n_pq, std::vector<int> hidden, std::uint64_t seed);

  int n_pq() const { return n_pq_; }
  const std::vector<int>& hidden() const { return hidden_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  NormStats& stats() { return stats_; }
  const NormStats& stats() const { return stats_; }
  double validation_mae() const { return val_mae_; }
  void set_validation_mae(double v) { val_mae_ = v; }

  // raw injections [p..., q...] -> raw states [vm..., va...]
  std::vector<double> predict(const std::vector<double>& inj_full) const;

  std::string to_json_text() const;
  static Surrogate from_json_text(const std::string& text);
  static Surrogate from_json_file(const std::string& path);
  void save_json_file(const std::string& path) const;

 private:
  std::vector<std::size_t> layer_dims() const;

  int n_pq_;
  std::vector<int> hidden_;
  ad::ParamStore params_;
  NormStats stats_;
  double val_mae_ = 0.0;
};

struct SurrogateConfig {
  std::vector<int> hidden;  // empty -> 3 layers of width 4*n_pq
  int batch = 64;
  int max_steps = 3000;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  double val_fraction = 0.1;
  double val_mae_threshold = std::numeric_limits<double>::infinity();
};

struct SurrogateReport {
  double train_mae = 0;
  double val_mae = 0;
  int steps = 0;
};

std::pair<Surrogate, SurrogateReport> train_surrogate(const Dataset& ds,
                                                      const SurrogateConfig& cfg);

// ---------------------------------------------------------------------------
// IMNF training loop
// ---------------------------------------------------------------------------

// Bidirectional training per the sampled-bus scheme: draw injections, draw a
// bus index per row, obtain states from the configured source, and take one
// optimizer step on the weighted two-direction MSE. Deterministic given
// (config, seed). Normalization statistics must be set before calling.
TrainResult train_imnf(ImnfModel& model, const Network* net, const Gmm& joint,
                       const Dataset* dataset, const Surrogate* surrogate,
                       const TrainConfig& cfg);

}  // namespace flowppf
