#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowppf/core/flow.hpp"
#include "flowppf/core/sampling.hpp"

namespace flowppf {

// 2-D density over a uniform (vm, va) grid.
struct DensityGrid {
  std::vector<double> vm_axis;  // ascending, uniform
  std::vector<double> va_axis;
  Tensor values;  // (n_vm x n_va), >= 0

  double cell_area() const;
  double mass() const;  // sum(values) * cell_area
  // warns to stderr outside [0.9, 1.1]; raises a data error outside [0.5, 2]
  void validate_normalized(const std::string& label) const;
};

struct GridSpec {
  int n_vm = 200;
  int n_va = 200;
  double vm_min = 0, vm_max = 0;
  double va_min = 0, va_max = 0;
  bool auto_range = true;  // derive the range from the evaluated mixture
};

// [min - 4 sigma, max + 4 sigma] of a 2-D mixture, per axis.
GridSpec spec_from_mixture(const Gmm& mix2d, int n_vm, int n_va);

DensityGrid grid_from_mixture(const Gmm& mix2d, const GridSpec& spec);

// Scenario-marginalized per-bus voltage density: the average over scenarios
// of the conditional change-of-variables density, evaluated in log space.
DensityGrid estimate_bus_density(const ImnfModel& model, const Gmm& joint, int bus_pq,
                                 const ScenarioSet& scenarios, const GridSpec& spec,
                                 int threads = 1);

// joint-dim index helpers for bus k in the [p..., q...] layout
std::vector<int> bus_dims(int n_pq, int bus_pq);
std::vector<int> other_dims(int n_pq, int bus_pq);

// EM fit of MC voltage samples; k = 0 selects K in 1..5 by BIC.
Gmm fit_reference(const std::vector<std::array<double, 2>>& voltage_samples, int k,
                  std::uint64_t seed);

// state = A * injection + b over the dataset, by least squares.
struct LinearPpfModel {
  Eigen::MatrixXd a;  // 2*n_pq x 2*n_pq
  Eigen::VectorXd b;
  double residual_mae = 0;  // raw units, all state entries
};

LinearPpfModel fit_linear_baseline(const Dataset& ds);

// exact affine pushforward of the injection mixture, marginalized to bus k
Gmm linear_pushforward_bus(const LinearPpfModel& model, const Gmm& joint, int bus_pq);
DensityGrid linear_density(const LinearPpfModel& model, const Gmm& joint, int bus_pq,
                           const GridSpec& spec);

// one affine map per mixture regime (max-responsibility assignment)
struct PiecewiseLinearModel {
  std::vector<LinearPpfModel> maps;      // per surviving regime
  std::vector<int> map_of_component;     // joint component -> regime map index
  std::vector<double> residual_mae;      // per regime
};

PiecewiseLinearModel fit_plinear_baseline(const Dataset& ds, const Gmm& joint);
Gmm plinear_pushforward_bus(const PiecewiseLinearModel& model, const Gmm& joint, int bus_pq);
DensityGrid plinear_density(const PiecewiseLinearModel& model, const Gmm& joint, int bus_pq,
                            const GridSpec& spec);

// Jensen-Shannon divergence in nats by grid quadrature; densities floored at
// 1e-12 inside the KL terms. Axes must match.
double jsd(const DensityGrid& p, const DensityGrid& q);
// half the integrated absolute difference
double tvd(const DensityGrid& p, const DensityGrid& q);

// column-wise mean absolute error after z-scoring both arrays by the truth
// statistics
std::vector<double> mae_normalized(const Tensor& pred, const Tensor& truth);

void write_density_csv(const DensityGrid& grid, const std::string& path);
DensityGrid read_density_csv(const std::string& path);

}  // namespace flowppf
