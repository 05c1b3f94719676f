#include "flowppf/core/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowppf/core/csv.hpp"

namespace flowppf {

namespace {

// Direction-number table: degree, primitive polynomial (inner coefficient
// bits), initial m values (odd, m_i < 2^i). The first six entries are the
// classic table used by many Sobol implementations; the rest extend the
// dimension count with the remaining primitive polynomials of degrees 5-6.
struct SobolDim {
  int degree;
  unsigned poly;
  std::vector<unsigned> m;
};

const std::vector<SobolDim>& sobol_table() {
  static const std::vector<SobolDim> table = {
      {1, 0, {1}},
      {2, 1, {1, 1}},
      {3, 1, {1, 3, 7}},
      {3, 2, {1, 3, 3}},
      {4, 1, {1, 1, 3, 13}},
      {4, 4, {1, 1, 5, 9}},
      {5, 2, {1, 1, 5, 5, 17}},
      {5, 4, {1, 1, 5, 5, 5}},
      {5, 7, {1, 1, 7, 11, 19}},
      {5, 11, {1, 1, 5, 1, 1}},
      {5, 13, {1, 3, 7, 9, 25}},
      {5, 14, {1, 3, 3, 13, 7}},
      {6, 1, {1, 3, 7, 13, 29, 49}},
      {6, 13, {1, 1, 3, 13, 11, 47}},
      {6, 16, {1, 3, 3, 5, 17, 23}},
      {6, 19, {1, 1, 7, 13, 25, 5}},
      {6, 22, {1, 1, 1, 3, 13, 39}},
      {6, 25, {1, 3, 5, 11, 27, 63}},
  };
  return table;
}

constexpr int kSobolBits = 32;

// per-dimension direction integers v_j, j = 0..kSobolBits-1 (already shifted)
std::vector<std::uint32_t> sobol_directions(int dim_index) {
  std::vector<std::uint32_t> v(kSobolBits);
  if (dim_index == 0) {
    // van der Corput base 2
    for (int j = 0; j < kSobolBits; ++j) v[static_cast<std::size_t>(j)] = 1u << (31 - j);
    return v;
  }
  const SobolDim& sd = sobol_table()[static_cast<std::size_t>(dim_index - 1)];
  const int s = sd.degree;
  std::vector<std::uint32_t> m(sd.m.begin(), sd.m.end());
  m.resize(kSobolBits);
  for (int j = s; j < kSobolBits; ++j) {
    std::uint32_t val = m[static_cast<std::size_t>(j - s)] ^
                        (m[static_cast<std::size_t>(j - s)] << s);
    for (int i = 1; i < s; ++i)
      if ((sd.poly >> (s - 1 - i)) & 1u) val ^= m[static_cast<std::size_t>(j - i)] << i;
    m[static_cast<std::size_t>(j)] = val;
  }
  for (int j = 0; j < kSobolBits; ++j)
    v[static_cast<std::size_t>(j)] = m[static_cast<std::size_t>(j)] << (31 - j);
  return v;
}

double to_open_unit(std::uint32_t x) {
  double u = static_cast<double>(x) * 0x1.0p-32;
  if (u == 0.0) u = 0x1.0p-33;  // midpoint offset instead of 0
  return u;
}

// Matousek linear-matrix scramble plus digital shift: y_i = (+)_{j<=i} L_ij b_j,
// then XOR with a random shift. Digits are MSB-first: digit i sits at bit 32-i.
struct DigitalScramble {
  std::array<std::uint32_t, 32> rows{};
  std::uint32_t shift = 0;

  static DigitalScramble random(Rng& rng) {
    DigitalScramble s;
    for (int i = 1; i <= 32; ++i) {
      const std::uint32_t diag = 1u << (32 - i);
      std::uint32_t above = 0;
      if (i > 1) {
        // digits 1..i-1 occupy bits 31 down to 33-i
        const std::uint32_t mask = ~((1u << (32 - i + 1)) - 1u);
        above = static_cast<std::uint32_t>(rng.next_u64() >> 32) & mask;
      }
      s.rows[static_cast<std::size_t>(i - 1)] = above | diag;
    }
    s.shift = static_cast<std::uint32_t>(rng.next_u64() >> 32);
    return s;
  }

  std::uint32_t apply(std::uint32_t x) const {
    std::uint32_t y = 0;
    for (int i = 1; i <= 32; ++i) {
      const std::uint32_t parity =
          static_cast<std::uint32_t>(__builtin_popcount(rows[static_cast<std::size_t>(i - 1)] & x)) & 1u;
      y |= parity << (32 - i);
    }
    return y ^ shift;
  }
};

std::vector<std::vector<double>> sobol_points(int d, int t, std::uint64_t seed) {
  require(d >= 1, ErrorCode::argument, "qmc: dimension must be >= 1");
  require(d <= sobol_max_dims(), ErrorCode::argument,
          "qmc: sobol direction-number table supports up to " +
              std::to_string(sobol_max_dims()) + " dimensions (requested " + std::to_string(d) +
              ")");
  std::vector<std::vector<std::uint32_t>> dirs;
  for (int k = 0; k < d; ++k) dirs.push_back(sobol_directions(k));
  std::vector<DigitalScramble> scramble;
  if (seed != 0) {
    Rng rng(derive_seed(seed, 0x50B0u));
    for (int k = 0; k < d; ++k) scramble.push_back(DigitalScramble::random(rng));
  }
  std::vector<std::vector<double>> out(static_cast<std::size_t>(t),
                                       std::vector<double>(static_cast<std::size_t>(d)));
  std::vector<std::uint32_t> state(static_cast<std::size_t>(d), 0);
  for (int n = 1; n <= t; ++n) {
    // gray-code step: flip the direction of the lowest set bit of n
    int c = 0;
    while (!((n >> c) & 1)) ++c;
    for (int k = 0; k < d; ++k) {
      state[static_cast<std::size_t>(k)] ^= dirs[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
      const std::uint32_t raw = state[static_cast<std::size_t>(k)];
      const std::uint32_t val = seed != 0 ? scramble[static_cast<std::size_t>(k)].apply(raw) : raw;
      out[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(k)] = to_open_unit(val);
    }
  }
  return out;
}

std::vector<int> first_primes(int n) {
  std::vector<int> primes;
  int candidate = 2;
  while (static_cast<int>(primes.size()) < n) {
    bool ok = true;
    for (int p : primes) {
      if (p * p > candidate) break;
      if (candidate % p == 0) {
        ok = false;
        break;
      }
    }
    if (ok) primes.push_back(candidate);
    ++candidate;
  }
  return primes;
}

std::vector<std::vector<double>> halton_points(int d, int t, std::uint64_t seed) {
  require(d >= 1, ErrorCode::argument, "qmc: dimension must be >= 1");
  require(d <= halton_max_dims(), ErrorCode::argument,
          "qmc: halton supports up to " + std::to_string(halton_max_dims()) + " dimensions");
  const std::vector<int> primes = first_primes(d);
  // per-dimension digit permutation fixing 0, so trailing zeros stay silent
  std::vector<std::vector<int>> perms(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) {
    const int p = primes[static_cast<std::size_t>(k)];
    std::vector<int>& perm = perms[static_cast<std::size_t>(k)];
    perm.resize(static_cast<std::size_t>(p));
    std::iota(perm.begin(), perm.end(), 0);
    if (seed != 0) {
      Rng rng(derive_seed(seed, 0xA170u + static_cast<std::uint64_t>(k)));
      for (std::size_t i = perm.size() - 1; i >= 2; --i)
        std::swap(perm[i], perm[1 + rng.below(i)]);  // keep perm[0] == 0
    }
  }
  std::vector<std::vector<double>> out(static_cast<std::size_t>(t),
                                       std::vector<double>(static_cast<std::size_t>(d)));
  for (int n = 1; n <= t; ++n) {
    for (int k = 0; k < d; ++k) {
      const int p = primes[static_cast<std::size_t>(k)];
      const auto& perm = perms[static_cast<std::size_t>(k)];
      double f = 1.0, val = 0.0;
      int i = n;
      while (i > 0) {
        f /= p;
        val += f * perm[static_cast<std::size_t>(i % p)];
        i /= p;
      }
      if (val == 0.0) val = 0x1.0p-33;
      out[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(k)] = val;
    }
  }
  return out;
}

}  // namespace

int sobol_max_dims() { return static_cast<int>(sobol_table().size()) + 1; }
int halton_max_dims() { return 64; }

std::vector<std::vector<double>> qmc_points(int d, int t, QmcKind kind, std::uint64_t seed) {
  require(t >= 1, ErrorCode::argument, "qmc: point count must be >= 1");
  return kind == QmcKind::sobol ? sobol_points(d, t, seed) : halton_points(d, t, seed);
}

int LssConfig::dim() const {
  int d = 0;
  for (const auto& g : groups) d += static_cast<int>(g.size());
  return d;
}

void LssConfig::validate() const {
  require(t >= 1, ErrorCode::argument, "lss: scenario count must be >= 1");
  require(!groups.empty(), ErrorCode::argument, "lss: at least one group required");
  const int d = dim();
  std::vector<char> seen(static_cast<std::size_t>(d), 0);
  for (const auto& g : groups) {
    require(!g.empty(), ErrorCode::argument, "lss: empty group");
    for (int idx : g) {
      require(idx >= 0 && idx < d, ErrorCode::argument,
              "lss: group index out of range (groups must cover 0..d-1)");
      require(!seen[static_cast<std::size_t>(idx)], ErrorCode::argument,
              "lss: groups overlap at dimension " + std::to_string(idx));
      seen[static_cast<std::size_t>(idx)] = 1;
    }
  }
}

std::vector<std::vector<int>> scenario_pair_grouping(int scen_dim) {
  require(scen_dim >= 1, ErrorCode::argument, "lss: scenario dimension must be >= 1");
  std::vector<std::vector<int>> groups;
  if (scen_dim % 2 == 0) {
    const int half = scen_dim / 2;
    for (int j = 0; j < half; ++j) groups.push_back({j, half + j});
  } else {
    for (int j = 0; j < scen_dim; ++j) groups.push_back({j});
  }
  return groups;
}

std::vector<std::vector<double>> lss_uniform(const LssConfig& config) {
  config.validate();
  const int d = config.dim();
  const int t = config.t;
  std::vector<std::vector<double>> out(static_cast<std::size_t>(t),
                                       std::vector<double>(static_cast<std::size_t>(d)));
  for (std::size_t k = 0; k < config.groups.size(); ++k) {
    const auto& g = config.groups[k];
    auto pts = qmc_points(static_cast<int>(g.size()), t, config.kind,
                          derive_seed(config.scramble_seed, 0x9C0u + k));
    // one shared permutation for all coordinates of the group
    std::vector<std::size_t> perm(static_cast<std::size_t>(t));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(config.perm_seed, 0x5E9u + k));
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (int row = 0; row < t; ++row)
      for (std::size_t j = 0; j < g.size(); ++j)
        out[static_cast<std::size_t>(row)][static_cast<std::size_t>(g[j])] =
            pts[perm[static_cast<std::size_t>(row)]][j];
  }
  return out;
}

ScenarioSet to_scenarios(const std::vector<std::vector<double>>& uniforms, const Gmm& target) {
  require(!uniforms.empty(), ErrorCode::argument, "to_scenarios: no points");
  const int d = target.dim();
  require(static_cast<int>(uniforms[0].size()) == d, ErrorCode::argument,
          "to_scenarios: point dimension does not match the target mixture");
  ScenarioSet set;
  set.method = ScenarioMethod::lss;
  set.scenarios.reserve(uniforms.size());
  std::vector<int> obs_dims;
  for (const auto& u : uniforms) {
    std::vector<double> s(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
      require(u[static_cast<std::size_t>(j)] > 0.0 && u[static_cast<std::size_t>(j)] < 1.0,
              ErrorCode::argument, "to_scenarios: uniforms must lie in (0,1)");
      if (j == 0) {
        Gmm m = target.marginal({0});
        s[0] = m.inverse_cdf_1d(u[0]);
      } else {
        obs_dims.assign(static_cast<std::size_t>(j), 0);
        std::iota(obs_dims.begin(), obs_dims.end(), 0);
        std::vector<double> vals(s.begin(), s.begin() + j);
        Gmm cond = target.condition(obs_dims, vals);
        Gmm m = cond.marginal({0});  // first free dim == dim j
        s[static_cast<std::size_t>(j)] = m.inverse_cdf_1d(u[static_cast<std::size_t>(j)]);
      }
    }
    set.scenarios.push_back(std::move(s));
  }
  set.log_density.reserve(set.scenarios.size());
  for (const auto& s : set.scenarios) set.log_density.push_back(target.log_density(s));
  return set;
}

ScenarioSet mc_scenarios(const Gmm& target, int t, std::uint64_t seed) {
  require(t >= 1, ErrorCode::argument, "mc_scenarios: scenario count must be >= 1");
  ScenarioSet set;
  set.method = ScenarioMethod::mc;
  set.scenarios = target.sample(t, seed);
  set.log_density.reserve(set.scenarios.size());
  for (const auto& s : set.scenarios) set.log_density.push_back(target.log_density(s));
  return set;
}

ScenarioSet lss_scenarios(const Gmm& target, int t, QmcKind kind, std::uint64_t seed) {
  LssConfig cfg;
  cfg.groups = scenario_pair_grouping(target.dim());
  cfg.t = t;
  cfg.kind = kind;
  cfg.scramble_seed = derive_seed(seed, 0xACADu);
  cfg.perm_seed = derive_seed(seed, 0xBEEFu);
  ScenarioSet set = to_scenarios(lss_uniform(cfg), target);
  set.method = ScenarioMethod::lss;
  return set;
}

void write_scenarios_csv(const ScenarioSet& set, const std::vector<std::string>& column_names,
                         const std::string& path) {
  require(set.dim() == static_cast<int>(column_names.size()), ErrorCode::argument,
          "write_scenarios_csv: column names do not match scenario dimension");
  CsvWriter w(path);
  std::vector<std::string> header = column_names;
  header.push_back("log_density");
  w.write_header(header);
  for (std::size_t i = 0; i < set.scenarios.size(); ++i) {
    std::vector<double> row = set.scenarios[i];
    row.push_back(set.log_density[i]);
    w.write_row(row);
  }
  w.close();
}

}  // namespace flowppf
