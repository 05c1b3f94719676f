#include "flowppf/core/network.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "flowppf/core/csv.hpp"
#include "flowppf/core/gmm.hpp"

namespace flowppf {

using json = nlohmann::json;

Network::Network(double base_mva, std::vector<Bus> buses, std::vector<Branch> branches)
    : base_mva_(base_mva), buses_(std::move(buses)), branches_(std::move(branches)) {
  validate();
}

void Network::validate() {
  require(base_mva_ > 0, ErrorCode::data, "network: base_mva must be positive");
  require(!buses_.empty(), ErrorCode::data, "network: no buses");

  std::map<int, int> id_to_pos;
  for (std::size_t i = 0; i < buses_.size(); ++i) {
    auto [it, fresh] = id_to_pos.emplace(buses_[i].id, static_cast<int>(i));
    (void)it;
    require(fresh, ErrorCode::data,
            "network: duplicate bus id " + std::to_string(buses_[i].id));
  }

  slack_index_ = -1;
  for (std::size_t i = 0; i < buses_.size(); ++i) {
    if (buses_[i].kind == BusKind::slack) {
      require(slack_index_ < 0, ErrorCode::data, "network: more than one slack bus");
      slack_index_ = static_cast<int>(i);
    }
  }
  require(slack_index_ >= 0, ErrorCode::data, "network: no slack bus");

  for (const Branch& br : branches_) {
    require(id_to_pos.count(br.from) && id_to_pos.count(br.to), ErrorCode::data,
            "network: branch references unknown bus");
    require(br.from != br.to, ErrorCode::data, "network: branch endpoints identical");
    require(br.r >= 0, ErrorCode::data, "network: negative branch resistance");
    require(br.tap > 0, ErrorCode::data, "network: tap ratio must be positive");
    require(br.r != 0.0 || br.x != 0.0, ErrorCode::data, "network: zero-impedance branch");
  }

  // connectivity
  std::vector<std::vector<int>> adj(buses_.size());
  for (const Branch& br : branches_) {
    int f = id_to_pos[br.from], t = id_to_pos[br.to];
    adj[f].push_back(t);
    adj[t].push_back(f);
  }
  std::vector<char> seen(buses_.size(), 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    for (int v : adj[u])
      if (!seen[v]) {
        seen[v] = 1;
        stack.push_back(v);
      }
  }
  require(std::all_of(seen.begin(), seen.end(), [](char c) { return c != 0; }),
          ErrorCode::data, "network: graph is not connected");

  // PQ buses in ascending id order
  std::vector<std::pair<int, int>> pq;  // (id, pos)
  for (std::size_t i = 0; i < buses_.size(); ++i)
    if (buses_[i].kind == BusKind::pq) pq.emplace_back(buses_[i].id, static_cast<int>(i));
  std::sort(pq.begin(), pq.end());
  pq_index_.clear();
  pq_ids_.clear();
  for (auto& [id, pos] : pq) {
    pq_ids_.push_back(id);
    pq_index_.push_back(pos);
  }
  require(!pq_index_.empty(), ErrorCode::data, "network: no PQ buses");
}

int Network::index_of_bus_id(int id) const {
  for (std::size_t i = 0; i < buses_.size(); ++i)
    if (buses_[i].id == id) return static_cast<int>(i);
  raise(ErrorCode::argument, "network: unknown bus id " + std::to_string(id));
}

std::vector<std::pair<int, int>> Network::edges() const {
  std::vector<std::pair<int, int>> out;
  for (const Branch& br : branches_) {
    int f = index_of_bus_id(br.from);
    int t = index_of_bus_id(br.to);
    out.emplace_back(f, t);
  }
  return out;
}

Network Network::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::data, std::string("network: invalid JSON: ") + e.what());
  }
  try {
    double base = j.at("base_mva").get<double>();
    std::vector<Bus> buses;
    for (const auto& jb : j.at("buses")) {
      Bus b;
      b.id = jb.at("id").get<int>();
      std::string kind = jb.at("kind").get<std::string>();
      if (kind == "slack")
        b.kind = BusKind::slack;
      else if (kind == "pq")
        b.kind = BusKind::pq;
      else
        raise(ErrorCode::data, "network: unknown bus kind '" + kind + "'");
      b.gs = jb.value("gs", 0.0);
      b.bs = jb.value("bs", 0.0);
      buses.push_back(b);
    }
    std::vector<Branch> branches;
    for (const auto& jb : j.at("branches")) {
      Branch br;
      br.from = jb.at("from").get<int>();
      br.to = jb.at("to").get<int>();
      br.r = jb.at("r").get<double>();
      br.x = jb.at("x").get<double>();
      br.b = jb.value("b", 0.0);
      br.tap = jb.value("tap", 1.0);
      branches.push_back(br);
    }
    return Network(base, std::move(buses), std::move(branches));
  } catch (const json::exception& e) {
    raise(ErrorCode::data, std::string("network: malformed JSON document: ") + e.what());
  }
}

Network Network::from_json_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::data, "network: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string Network::to_json_text() const {
  json j;
  j["base_mva"] = base_mva_;
  j["buses"] = json::array();
  for (const Bus& b : buses_) {
    j["buses"].push_back({{"id", b.id},
                          {"kind", b.kind == BusKind::slack ? "slack" : "pq"},
                          {"gs", b.gs},
                          {"bs", b.bs}});
  }
  j["branches"] = json::array();
  for (const Branch& br : branches_) {
    j["branches"].push_back(
        {{"from", br.from}, {"to", br.to}, {"r", br.r}, {"x", br.x}, {"b", br.b}, {"tap", br.tap}});
  }
  return j.dump(2);
}

ComplexMatrix build_admittance(const Network& net) {
  const int n = net.bus_count();
  ComplexMatrix y = ComplexMatrix::Zero(n, n);
  for (const Branch& br : net.branches()) {
    require(br.r != 0.0 || br.x != 0.0, ErrorCode::data, "admittance: zero-impedance branch");
    const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
    const std::complex<double> bc(0.0, br.b / 2.0);
    const double tap = br.tap;
    const int f = net.index_of_bus_id(br.from);
    const int t = net.index_of_bus_id(br.to);
    y(f, f) += (ys + bc) / (tap * tap);
    y(t, t) += ys + bc;
    y(f, t) += -ys / tap;
    y(t, f) += -ys / tap;
  }
  for (int i = 0; i < n; ++i) {
    const Bus& b = net.buses()[static_cast<std::size_t>(i)];
    y(i, i) += std::complex<double>(b.gs, b.bs);
  }
  return y;
}

namespace {

// Net complex injection at every bus implied by the voltage state.
std::vector<std::complex<double>> injected_power(const ComplexMatrix& y, const PfState& st) {
  const int n = static_cast<int>(st.vm.size());
  std::vector<std::complex<double>> v(n), s(n);
  for (int i = 0; i < n; ++i) v[i] = std::polar(st.vm[i], st.va[i]);
  for (int i = 0; i < n; ++i) {
    std::complex<double> acc = 0;
    for (int j = 0; j < n; ++j) acc += std::conj(y(i, j)) * std::conj(v[j]);
    s[i] = v[i] * acc;
  }
  return s;
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> pf_residual(const Network& net,
                                                                const PfState& state,
                                                                const Injection& inj) {
  const int npq = net.pq_count();
  require(static_cast<int>(inj.p.size()) == npq && static_cast<int>(inj.q.size()) == npq,
          ErrorCode::argument, "pf_residual: injection length mismatch");
  require(static_cast<int>(state.vm.size()) == net.bus_count() &&
              static_cast<int>(state.va.size()) == net.bus_count(),
          ErrorCode::argument, "pf_residual: state length mismatch");
  ComplexMatrix y = build_admittance(net);
  auto s = injected_power(y, state);
  std::vector<double> dp(npq), dq(npq);
  for (int k = 0; k < npq; ++k) {
    int pos = net.pq_index()[static_cast<std::size_t>(k)];
    dp[k] = inj.p[static_cast<std::size_t>(k)] - s[pos].real();
    dq[k] = inj.q[static_cast<std::size_t>(k)] - s[pos].imag();
  }
  return {dp, dq};
}

std::complex<double> power_balance(const Network& net, const PfState& state) {
  ComplexMatrix y = build_admittance(net);
  auto s = injected_power(y, state);
  std::complex<double> total = 0;
  for (const auto& si : s) total += si;
  // total = sum of net injections = losses; balance holds when the slack
  // injection absorbs exactly (losses - sum of PQ injections)
  return total;
}

PfSolution solve_pf(const Network& net, const Injection& inj, double tol, int max_iter) {
  require(tol > 0, ErrorCode::argument, "solve_pf: tol must be positive");
  require(max_iter >= 1, ErrorCode::argument, "solve_pf: max_iter must be >= 1");
  const int n = net.bus_count();
  const int npq = net.pq_count();
  require(static_cast<int>(inj.p.size()) == npq && static_cast<int>(inj.q.size()) == npq,
          ErrorCode::argument, "solve_pf: injection length mismatch");

  const ComplexMatrix y = build_admittance(net);
  Eigen::MatrixXd g(n, n), b(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      g(i, j) = y(i, j).real();
      b(i, j) = y(i, j).imag();
    }

  PfState st;
  st.vm.assign(static_cast<std::size_t>(n), 1.0);
  st.va.assign(static_cast<std::size_t>(n), 0.0);

  const auto& pq = net.pq_index();
  auto mismatch = [&](Eigen::VectorXd& f) {
    // f = [dP; dQ] over PQ buses
    double worst = 0;
    for (int k = 0; k < npq; ++k) {
      int i = pq[static_cast<std::size_t>(k)];
      double pi = 0, qi = 0;
      for (int j = 0; j < n; ++j) {
        double th = st.va[i] - st.va[j];
        double c = std::cos(th), s = std::sin(th);
        pi += st.vm[i] * st.vm[j] * (g(i, j) * c + b(i, j) * s);
        qi += st.vm[i] * st.vm[j] * (g(i, j) * s - b(i, j) * c);
      }
      f(k) = inj.p[static_cast<std::size_t>(k)] - pi;
      f(npq + k) = inj.q[static_cast<std::size_t>(k)] - qi;
      worst = std::max({worst, std::abs(f(k)), std::abs(f(npq + k))});
    }
    return worst;
  };

  Eigen::VectorXd f(2 * npq);
  double worst = mismatch(f);
  int iter = 0;
  while (worst >= tol) {
    if (iter >= max_iter)
      raise(ErrorCode::numeric, "solve_pf: no convergence after " + std::to_string(max_iter) +
                                    " iterations (mismatch " + std::to_string(worst) + ")");
    // Jacobian of [P; Q] wrt [va; vm] over PQ buses
    Eigen::MatrixXd jac(2 * npq, 2 * npq);
    for (int k = 0; k < npq; ++k) {
      int i = pq[static_cast<std::size_t>(k)];
      double pi = 0, qi = 0;
      for (int j = 0; j < n; ++j) {
        double th = st.va[i] - st.va[j];
        double c = std::cos(th), s = std::sin(th);
        pi += st.vm[i] * st.vm[j] * (g(i, j) * c + b(i, j) * s);
        qi += st.vm[i] * st.vm[j] * (g(i, j) * s - b(i, j) * c);
      }
      for (int l = 0; l < npq; ++l) {
        int j = pq[static_cast<std::size_t>(l)];
        double th = st.va[i] - st.va[j];
        double c = std::cos(th), s = std::sin(th);
        if (i == j) {
          jac(k, l) = -qi - b(i, i) * st.vm[i] * st.vm[i];
          jac(k, npq + l) = pi / st.vm[i] + g(i, i) * st.vm[i];
          jac(npq + k, l) = pi - g(i, i) * st.vm[i] * st.vm[i];
          jac(npq + k, npq + l) = qi / st.vm[i] - b(i, i) * st.vm[i];
        } else {
          double gij = g(i, j), bij = b(i, j);
          jac(k, l) = st.vm[i] * st.vm[j] * (gij * s - bij * c);
          jac(k, npq + l) = st.vm[i] * (gij * c + bij * s);
          jac(npq + k, l) = -st.vm[i] * st.vm[j] * (gij * c + bij * s);
          jac(npq + k, npq + l) = st.vm[i] * (gij * s - bij * c);
        }
      }
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
    if (!lu.isInvertible())
      raise(ErrorCode::numeric, "solve_pf: singular Jacobian at iteration " + std::to_string(iter));
    Eigen::VectorXd dx = lu.solve(f);
    for (int k = 0; k < npq; ++k) {
      int i = pq[static_cast<std::size_t>(k)];
      st.va[i] += dx(k);
      st.vm[i] += dx(npq + k);
      if (st.vm[i] <= 0)
        raise(ErrorCode::numeric, "solve_pf: voltage magnitude collapsed at bus position " +
                                      std::to_string(i));
    }
    ++iter;
    worst = mismatch(f);
  }
  return {st, iter == 0 ? 1 : iter, worst};
}

PfState to_full_state(const Network& net, const std::vector<double>& vm_pq,
                      const std::vector<double>& va_pq) {
  require(vm_pq.size() == net.pq_index().size() && va_pq.size() == vm_pq.size(),
          ErrorCode::argument, "to_full_state: length mismatch");
  PfState st;
  st.vm.assign(static_cast<std::size_t>(net.bus_count()), 1.0);
  st.va.assign(static_cast<std::size_t>(net.bus_count()), 0.0);
  for (std::size_t k = 0; k < vm_pq.size(); ++k) {
    int pos = net.pq_index()[k];
    st.vm[static_cast<std::size_t>(pos)] = vm_pq[k];
    st.va[static_cast<std::size_t>(pos)] = va_pq[k];
  }
  return st;
}

Dataset generate_dataset(const Network& net, const Gmm& gmm, int n, std::uint64_t seed,
                         double tol, int max_iter) {
  require(n >= 0, ErrorCode::argument, "generate_dataset: n must be >= 0");
  const int npq = net.pq_count();
  require(gmm.dim() == 2 * npq, ErrorCode::argument,
          "generate_dataset: gmm dimension must equal 2 * n_pq");
  Dataset ds;
  ds.pq_ids = net.pq_ids();
  Rng rng(derive_seed(seed, 0x6474u));
  int rejected = 0;
  while (static_cast<int>(ds.rows.size()) < n) {
    std::vector<double> draw = gmm.sample_one(rng);
    Injection inj;
    inj.p.assign(draw.begin(), draw.begin() + npq);
    inj.q.assign(draw.begin() + npq, draw.end());
    try {
      PfSolution sol = solve_pf(net, inj, tol, max_iter);
      DatasetRow row;
      row.inj = std::move(inj);
      for (int pos : net.pq_index()) {
        row.vm.push_back(sol.state.vm[static_cast<std::size_t>(pos)]);
        row.va.push_back(sol.state.va[static_cast<std::size_t>(pos)]);
      }
      ds.rows.push_back(std::move(row));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::numeric) throw;
      ++rejected;
      int attempted = static_cast<int>(ds.rows.size()) + rejected;
      if (attempted >= 50 && rejected * 5 > attempted)
        raise(ErrorCode::data,
              "generate_dataset: rejection rate above 20% (" + std::to_string(rejected) + "/" +
                  std::to_string(attempted) + "); injection distribution incompatible with network");
    }
  }
  ds.rejected = rejected;
  return ds;
}

void write_dataset_csv(const Dataset& ds, const std::string& path) {
  CsvWriter w(path);
  std::vector<std::string> header;
  for (int id : ds.pq_ids) header.push_back("p_" + std::to_string(id));
  for (int id : ds.pq_ids) header.push_back("q_" + std::to_string(id));
  for (int id : ds.pq_ids) header.push_back("vm_" + std::to_string(id));
  for (int id : ds.pq_ids) header.push_back("va_" + std::to_string(id));
  w.write_header(header);
  const std::size_t npq = ds.pq_ids.size();
  for (const DatasetRow& row : ds.rows) {
    std::vector<double> vals;
    vals.reserve(4 * npq);
    for (double v : row.inj.p) vals.push_back(v);
    for (double v : row.inj.q) vals.push_back(v);
    for (double v : row.vm) vals.push_back(v);
    for (double v : row.va) vals.push_back(v);
    w.write_row(vals);
  }
}

Dataset read_dataset_csv(const std::string& path) {
  CsvTable t = read_csv(path);
  Dataset ds;
  std::vector<int> p_cols, q_cols, vm_cols, va_cols;
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    const std::string& h = t.header[c];
    if (h.rfind("p_", 0) == 0) {
      ds.pq_ids.push_back(std::stoi(h.substr(2)));
      p_cols.push_back(static_cast<int>(c));
    } else if (h.rfind("q_", 0) == 0) {
      q_cols.push_back(static_cast<int>(c));
    } else if (h.rfind("vm_", 0) == 0) {
      vm_cols.push_back(static_cast<int>(c));
    } else if (h.rfind("va_", 0) == 0) {
      va_cols.push_back(static_cast<int>(c));
    }
  }
  require(!p_cols.empty() && p_cols.size() == q_cols.size() && p_cols.size() == vm_cols.size() &&
              p_cols.size() == va_cols.size(),
          ErrorCode::data, "dataset: expected matching p_/q_/vm_/va_ column groups in " + path);
  for (const auto& r : t.rows) {
    DatasetRow row;
    for (int c : p_cols) row.inj.p.push_back(r[static_cast<std::size_t>(c)]);
    for (int c : q_cols) row.inj.q.push_back(r[static_cast<std::size_t>(c)]);
    for (int c : vm_cols) row.vm.push_back(r[static_cast<std::size_t>(c)]);
    for (int c : va_cols) row.va.push_back(r[static_cast<std::size_t>(c)]);
    ds.rows.push_back(std::move(row));
  }
  return ds;
}

}  // namespace flowppf
