#pragma once

#include <string>
#include <vector>

#include "flowppf/core/gmm.hpp"

namespace flowppf {

enum class QmcKind { sobol, halton };

// First T points of a low-discrepancy sequence in the open unit cube.
// seed = 0 disables scrambling (plain sequence); otherwise Sobol applies a
// digital shift and Halton a per-dimension digit permutation.
std::vector<std::vector<double>> qmc_points(int d, int t, QmcKind kind, std::uint64_t seed);

int sobol_max_dims();
int halton_max_dims();

// Latin Supercube Sampling: disjoint dimension groups, one QMC set per group,
// a single shared row permutation per group, concatenation across groups.
struct LssConfig {
  std::vector<std::vector<int>> groups;
  int t = 0;
  QmcKind kind = QmcKind::sobol;
  std::uint64_t scramble_seed = 0;  // QMC scrambling
  std::uint64_t perm_seed = 0;      // shared row permutations

  int dim() const;
  void validate() const;  // disjoint, covering 0..dim-1, t >= 1
};

// Pairs dimension j with dimension scen_dim/2 + j, the (p, q) block layout of
// a scenario vector.
std::vector<std::vector<int>> scenario_pair_grouping(int scen_dim);

std::vector<std::vector<double>> lss_uniform(const LssConfig& config);

enum class ScenarioMethod { mc, lss };

struct ScenarioSet {
  std::vector<std::vector<double>> scenarios;
  ScenarioMethod method = ScenarioMethod::mc;
  std::vector<double> log_density;  // log p_{w/i}(s_t) cache

  int count() const { return static_cast<int>(scenarios.size()); }
  int dim() const { return scenarios.empty() ? 0 : static_cast<int>(scenarios[0].size()); }
};

// Sequential conditional (Rosenblatt) transform of uniform points through the
// target mixture: coordinate j is mapped by the inverse CDF of the 1-D
// mixture conditional on coordinates 0..j-1.
ScenarioSet to_scenarios(const std::vector<std::vector<double>>& uniforms, const Gmm& target);

// Ancestral mixture draws via Gmm::sample (shared path), density cache filled.
ScenarioSet mc_scenarios(const Gmm& target, int t, std::uint64_t seed);

ScenarioSet lss_scenarios(const Gmm& target, int t, QmcKind kind, std::uint64_t seed);

void write_scenarios_csv(const ScenarioSet& set, const std::vector<std::string>& column_names,
                         const std::string& path);

}  // namespace flowppf
