#pragma once

#include <complex>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowppf/core/common.hpp"

namespace flowppf {

class Gmm;

enum class BusKind { slack, pq };

struct Bus {
  int id = 0;
  BusKind kind = BusKind::pq;
  double gs = 0.0;  // shunt conductance, p.u.
  double bs = 0.0;  // shunt susceptance, p.u.
};

struct Branch {
  int from = 0;
  int to = 0;
  double r = 0.0;
  double x = 0.0;
  double b = 0.0;    // total line charging susceptance, p.u.
  double tap = 1.0;  // off-nominal tap ratio on the from side
};

// Bus/branch network model. Exactly one slack bus; all others are PQ.
class Network {
 public:
  Network(double base_mva, std::vector<Bus> buses, std::vector<Branch> branches);

  static Network from_json_file(const std::string& path);
  static Network from_json_text(const std::string& text);
  std::string to_json_text() const;

  double base_mva() const { return base_mva_; }
  const std::vector<Bus>& buses() const { return buses_; }
  const std::vector<Branch>& branches() const { return branches_; }
  int bus_count() const { return static_cast<int>(buses_.size()); }
  int pq_count() const { return static_cast<int>(pq_index_.size()); }
  int slack_index() const { return slack_index_; }

  // PQ buses in ascending bus-id order, as positions into buses().
  const std::vector<int>& pq_index() const { return pq_index_; }
  const std::vector<int>& pq_ids() const { return pq_ids_; }
  int index_of_bus_id(int id) const;

  // adjacency over bus positions, self-loops excluded
  std::vector<std::pair<int, int>> edges() const;

 private:
  void validate();

  double base_mva_ = 100.0;
  std::vector<Bus> buses_;
  std::vector<Branch> branches_;
  std::vector<int> pq_index_;
  std::vector<int> pq_ids_;
  int slack_index_ = -1;
};

struct PfState {
  std::vector<double> vm;  // p.u., indexed by bus position
  std::vector<double> va;  // radians
};

// Per-PQ-bus net injections (generation positive), ascending bus-id order.
struct Injection {
  std::vector<double> p;
  std::vector<double> q;
};

struct PfSolution {
  PfState state;
  int iterations = 0;
  double mismatch = 0.0;
};

using ComplexMatrix = Eigen::MatrixXcd;

// Standard bus-admittance assembly with pi-model branches and bus shunts.
ComplexMatrix build_admittance(const Network& net);

// Newton-Raphson in polar coordinates from a flat start.
PfSolution solve_pf(const Network& net, const Injection& inj, double tol = 1e-8,
                    int max_iter = 30);

// Per-PQ-bus (dP, dQ) mismatch of a candidate state; slack excluded.
std::pair<std::vector<double>, std::vector<double>> pf_residual(const Network& net,
                                                                const PfState& state,
                                                                const Injection& inj);

// Total complex-power imbalance (generation - load - losses) at a state.
std::complex<double> power_balance(const Network& net, const PfState& state);

// PQ-bus quantities only, ascending bus-id order (the CSV column layout).
struct DatasetRow {
  Injection inj;
  std::vector<double> vm;
  std::vector<double> va;
};

// Rebuilds a full per-position state from PQ-bus values (slack fixed at 1/0).
PfState to_full_state(const Network& net, const std::vector<double>& vm_pq,
                      const std::vector<double>& va_pq);

struct Dataset {
  std::vector<int> pq_ids;
  std::vector<DatasetRow> rows;
  int rejected = 0;

  std::size_t size() const { return rows.size(); }
};

// Samples injections from `gmm` (dimension 2*n_pq, layout [p..., q...]) and
// solves PF for each; non-convergent draws are rejected and resampled.
Dataset generate_dataset(const Network& net, const Gmm& gmm, int n, std::uint64_t seed,
                         double tol = 1e-8, int max_iter = 30);

void write_dataset_csv(const Dataset& ds, const std::string& path);
Dataset read_dataset_csv(const std::string& path);

}  // namespace flowppf
