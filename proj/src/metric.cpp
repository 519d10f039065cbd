#include "gcb/metric.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "gcb/ot.hpp"

namespace gcb {

void MetricForm::validate() const {
  std::vector<std::string> errors;
  if (mode == MetricMode::Convex && !(c > 0.0 && c < 1.0))
    errors.push_back("convex metric discount c must lie in (0,1)");
  if (wasserstein_order != 1 && wasserstein_order != 2)
    errors.push_back("wasserstein order must be 1 or 2");
  if (!errors.empty()) throw ValidationError(errors);
}

nlohmann::json to_json(const MetricForm& f) {
  return {{"mode", f.mode == MetricMode::Convex ? "convex" : "unweighted"},
          {"c", f.c},
          {"wasserstein_order", f.wasserstein_order}};
}

MetricForm metric_form_from_json(const nlohmann::json& j) {
  MetricForm f;
  std::vector<std::string> errors;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "mode") {
        const auto m = it->get<std::string>();
        if (m == "unweighted") f.mode = MetricMode::Unweighted;
        else if (m == "convex") f.mode = MetricMode::Convex;
        else errors.push_back("unknown metric mode '" + m + "'");
      } else if (k == "c") {
        f.c = it->get<double>();
      } else if (k == "wasserstein_order") {
        f.wasserstein_order = it->get<int>();
      } else {
        errors.push_back("unknown metric field '" + k + "'");
      }
    } catch (const nlohmann::json::exception&) {
      errors.push_back("metric field '" + k + "' has the wrong type");
    }
  }
  if (!errors.empty()) throw ValidationError(errors);
  f.validate();
  return f;
}

std::vector<int> all_goal_ks(const Gcmdp& m) {
  std::vector<int> ks(m.num_goals());
  for (int k = 0; k < m.num_goals(); ++k) ks[k] = k;
  return ks;
}

std::vector<int> signature_goal_ks(const Gcmdp& m) {
  std::vector<int> ks;
  std::map<int, int> seen;
  for (int k = 0; k < m.num_goals(); ++k)
    if (seen.emplace(m.signature(m.goal(k)), k).second) ks.push_back(k);
  return ks;
}

namespace {

void check_goal_ks(const Gcmdp& m, const std::vector<int>& goal_ks) {
  if (goal_ks.empty()) throw ValidationError({"goal subset is empty"});
  for (int k : goal_ks)
    if (k < 0 || k >= m.num_goals())
      throw ValidationError({"goal position " + std::to_string(k) + " out of range"});
}

// Shared kernel: one operator application from reward/successor tables.
class OperatorKernel {
 public:
  OperatorKernel(const std::vector<double>& reward,
                 const std::vector<std::vector<std::pair<int, double>>>& next, MetricForm form,
                 double discount)
      : reward_(reward), next_(next), form_(form), discount_(discount), n_(int(reward.size())) {}

  // Writes F(d_in) into d_out; returns the sup-norm change.
  double apply(const std::vector<double>& d_in, std::vector<double>& d_out) {
    const std::size_t n = n_;
    const double wr = form_.mode == MetricMode::Convex ? 1.0 - form_.c : 1.0;
    const double ww = form_.mode == MetricMode::Convex ? form_.c : discount_;
    double change = 0.0;
    for (int i = 0; i < n_; ++i) {
      d_out[i * n + i] = 0.0;
      change = std::max(change, std::abs(d_in[i * n + i]));
      for (int j = i + 1; j < n_; ++j) {
        const double v = wr * std::abs(reward_[i] - reward_[j]) + ww * transport(d_in, i, j);
        d_out[i * n + j] = v;
        d_out[j * n + i] = v;
        change = std::max(change, std::abs(v - d_in[i * n + j]));
      }
    }
    return change;
  }

 private:
  double transport(const std::vector<double>& d, int i, int j) {
    const std::size_t n = n_;
    const auto& a = next_[i];
    const auto& b = next_[j];
    const bool squared = form_.wasserstein_order == 2;
    auto cost = [&](int x, int y) {
      const double c = d[std::size_t(x) * n + y];
      return squared ? c * c : c;
    };
    double w;
    if (a.size() == 1 && b.size() == 1) {
      w = cost(a[0].first, b[0].first);
    } else if (a.size() == 1) {
      w = 0.0;
      for (const auto& [y, q] : b) w += q * cost(a[0].first, y);
    } else if (b.size() == 1) {
      w = 0.0;
      for (const auto& [x, p] : a) w += p * cost(x, b[0].first);
    } else {
      mu_.resize(a.size());
      nu_.resize(b.size());
      c_.resize(a.size() * b.size());
      for (std::size_t x = 0; x < a.size(); ++x) mu_[x] = a[x].second;
      for (std::size_t y = 0; y < b.size(); ++y) nu_[y] = b[y].second;
      for (std::size_t x = 0; x < a.size(); ++x)
        for (std::size_t y = 0; y < b.size(); ++y) c_[x * b.size() + y] = cost(a[x].first, b[y].first);
      w = simplex_.solve(mu_, nu_, c_);
    }
    return squared ? std::sqrt(std::max(0.0, w)) : w;
  }

  const std::vector<double>& reward_;
  const std::vector<std::vector<std::pair<int, double>>>& next_;
  MetricForm form_;
  double discount_;
  int n_;
  TransportSimplex simplex_;
  std::vector<double> mu_, nu_, c_;
};

std::vector<double> iterate_to_fixed_point(OperatorKernel& kernel, std::size_t n, double tol,
                                           int max_iter, std::vector<double>& residuals) {
  std::vector<double> d(n * n, 0.0), next(n * n, 0.0);
  for (int it = 0; it < max_iter; ++it) {
    const double change = kernel.apply(d, next);
    residuals.push_back(change);
    d.swap(next);
    if (change < tol) return d;
  }
  throw ConvergenceError("metric fixed point did not converge",
                         residuals.empty() ? 0.0 : residuals.back(), max_iter);
}

}  // namespace

PairedDynamics paired_dynamics(const Gcmdp& m, const GoalPolicy& pi, const std::vector<int>& goal_ks) {
  pi.validate_for(m);
  check_goal_ks(m, goal_ks);
  const int G = static_cast<int>(goal_ks.size());
  const int n = m.num_states() * G;
  PairedDynamics dyn;
  dyn.reward.assign(n, 0.0);
  dyn.next.resize(n);
  std::vector<double> acc(m.num_states(), 0.0);
  std::vector<int> touched;
  for (StateId s = 0; s < m.num_states(); ++s)
    for (int kk = 0; kk < G; ++kk) {
      const int k = goal_ks[kk];
      const StateId g = m.goal(k);
      const int i = s * G + kk;
      touched.clear();
      double r = 0.0;
      for (ActionId a = 0; a < m.num_actions(); ++a) {
        const double pa = pi.prob(s, k, a);
        if (pa == 0.0) continue;
        for (const auto& o : m.outcomes(s, a)) {
          const double w = pa * o.prob;
          if (acc[o.next] == 0.0) touched.push_back(o.next);
          acc[o.next] += w;
          if (m.matches(o.next, g)) r += w;
        }
      }
      dyn.reward[i] = r;
      std::sort(touched.begin(), touched.end());
      for (StateId sp : touched) {
        if (acc[sp] > 0.0) dyn.next[i].push_back({sp * G + kk, acc[sp]});
        acc[sp] = 0.0;
      }
    }
  return dyn;
}

PairedMetric zero_metric(const Gcmdp& m, const std::vector<int>& goal_ks, const MetricForm& form) {
  check_goal_ks(m, goal_ks);
  PairedMetric out;
  out.num_states = m.num_states();
  out.goal_ks = goal_ks;
  out.form = form;
  out.discount = m.discount();
  out.d.assign(std::size_t(out.n()) * out.n(), 0.0);
  return out;
}

PairedMetric gcb_operator(const PairedMetric& d, const GoalPolicy& pi, const Gcmdp& m,
                          const MetricForm& form) {
  form.validate();
  const auto dyn = paired_dynamics(m, pi, d.goal_ks);
  if (d.num_states != m.num_states() || d.d.size() != dyn.reward.size() * dyn.reward.size())
    throw ValidationError({"metric shape does not match the model"});
  PairedMetric out = d;
  out.form = form;
  OperatorKernel kernel(dyn.reward, dyn.next, form, m.discount());
  out.residuals.push_back(kernel.apply(d.d, out.d));
  return out;
}

PairedMetric gcb_fixed_point(const GoalPolicy& pi, const Gcmdp& m, const MetricForm& form,
                             double tol, int max_iter, std::vector<int> goal_ks) {
  if (!(tol > 0.0)) throw ValidationError({"tol must be positive"});
  form.validate();
  if (goal_ks.empty()) goal_ks = all_goal_ks(m);
  PairedMetric out = zero_metric(m, goal_ks, form);
  const auto dyn = paired_dynamics(m, pi, goal_ks);
  OperatorKernel kernel(dyn.reward, dyn.next, form, m.discount());
  out.d = iterate_to_fixed_point(kernel, out.n(), tol, max_iter, out.residuals);
  return out;
}

std::vector<double> paired_values(const Gcmdp& m, const GoalPolicy& pi,
                                  const std::vector<int>& goal_ks, double tol) {
  check_goal_ks(m, goal_ks);
  const int G = static_cast<int>(goal_ks.size());
  std::vector<double> v(std::size_t(m.num_states()) * G);
  for (int kk = 0; kk < G; ++kk) {
    const auto vk = policy_evaluation(m, pi, goal_ks[kk], tol);
    for (StateId s = 0; s < m.num_states(); ++s) v[std::size_t(s) * G + kk] = vk[s];
  }
  return v;
}

nlohmann::json BoundReport::to_json() const {
  return {{"pairs_checked", pairs_checked},
          {"violations", violations},
          {"max_violation", max_violation},
          {"worst_pair", {worst_i, worst_j}},
          {"tight_pairs", tight_pairs},
          {"tightness_histogram", tightness_histogram},
          {"slack", slack},
          {"passed", passed()}};
}

namespace {

void record(BoundReport& r, double lhs, double rhs, int i, int j) {
  ++r.pairs_checked;
  const double excess = lhs - rhs;
  if (r.worst_i < 0 || excess > r.max_violation) {
    r.max_violation = excess;
    r.worst_i = i;
    r.worst_j = j;
  }
  if (excess > r.slack) ++r.violations;
  if (rhs > 1e-12) {
    if (rhs - lhs <= 1e-3) ++r.tight_pairs;
    const int bin = std::clamp(static_cast<int>(lhs / rhs * 10.0), 0, 9);
    ++r.tightness_histogram[bin];
  }
}

void require_unweighted_w1(const PairedMetric& metric) {
  if (!metric.form.is_unweighted_w1())
    throw ValidationError({"value bounds are only stated for the unweighted W1 metric form"});
}

}  // namespace

BoundReport verify_value_bound(const PairedMetric& metric, std::span<const double> values,
                               double slack) {
  require_unweighted_w1(metric);
  const int n = metric.n();
  if (static_cast<int>(values.size()) != n)
    throw ValidationError({"value table has " + std::to_string(values.size()) +
                           " entries, metric has " + std::to_string(n)});
  BoundReport r;
  r.slack = slack;
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) record(r, std::abs(values[i] - values[j]), metric(i, j), i, j);
  return r;
}

BoundReport verify_linear_reward_bound(const PairedMetric& metric, const Gcmdp& m,
                                       const GoalPolicy& pi, std::span<const double> alphas,
                                       double slack, double tol) {
  require_unweighted_w1(metric);
  const int G = metric.num_goals();
  if (static_cast<int>(alphas.size()) != G)
    throw ValidationError({"alpha vector length does not match the metric's goal subset"});
  for (double a : alphas)
    if (!(a >= 0.0) || !std::isfinite(a)) throw ValidationError({"alpha weights must be nonnegative"});

  const int S = m.num_states();
  // V_R as the alpha-weighted sum of per-goal values, each evaluated under the
  // goal's own reward indicator.
  std::vector<double> vr(S, 0.0), indicator(S);
  for (int kk = 0; kk < G; ++kk) {
    if (alphas[kk] == 0.0) continue;
    const int k = metric.goal_ks[kk];
    for (StateId s = 0; s < S; ++s) indicator[s] = m.matches(s, m.goal(k)) ? 1.0 : 0.0;
    const auto v = policy_evaluation_reward(m, pi, k, indicator, tol);
    for (StateId s = 0; s < S; ++s) vr[s] += alphas[kk] * v[s];
  }

  BoundReport r;
  r.slack = slack;
  for (StateId si = 0; si < S; ++si)
    for (StateId sj = si; sj < S; ++sj) {
      double rhs = 0.0;
      for (int kk = 0; kk < G; ++kk)
        if (alphas[kk] != 0.0) rhs += alphas[kk] * metric(metric.index(si, kk), metric.index(sj, kk));
      record(r, std::abs(vr[si] - vr[sj]), rhs, si, sj);
    }
  return r;
}

double sampled_metric_target(int r_i, int r_j, double d_next, double gamma) {
  return std::abs(static_cast<double>(r_i - r_j)) + gamma * d_next;
}

FlatMdp super_mdp(const Gcmdp& m, const std::vector<int>& goal_ks) {
  check_goal_ks(m, goal_ks);
  const int G = static_cast<int>(goal_ks.size());
  FlatMdp f;
  f.num_states = m.num_states() * G;
  f.num_actions = m.num_actions();
  f.discount = m.discount();
  f.rows.resize(std::size_t(f.num_states) * f.num_actions);
  f.reward.assign(f.rows.size(), 0.0);
  for (int x = 0; x < f.num_states; ++x) {
    const StateId s = x / G;
    const int kk = x % G;
    const StateId g = m.goal(goal_ks[kk]);
    for (ActionId a = 0; a < f.num_actions; ++a) {
      auto& row = f.rows[std::size_t(x) * f.num_actions + a];
      double r = 0.0;
      for (const auto& o : m.outcomes(s, a)) {
        row.push_back({o.next * G + kk, o.prob});
        if (sparse_reward(m, s, a, o.next, g)) r += o.prob;
      }
      f.reward[std::size_t(x) * f.num_actions + a] = r;
    }
  }
  return f;
}

std::vector<double> super_policy(const GoalPolicy& pi, const std::vector<int>& goal_ks) {
  const int G = static_cast<int>(goal_ks.size());
  const int A = pi.num_actions();
  std::vector<double> out(std::size_t(pi.num_states()) * G * A);
  for (StateId s = 0; s < pi.num_states(); ++s)
    for (int kk = 0; kk < G; ++kk)
      for (ActionId a = 0; a < A; ++a)
        out[(std::size_t(s) * G + kk) * A + a] = pi.prob(s, goal_ks[kk], a);
  return out;
}

OnPolicyMetric on_policy_metric(const FlatMdp& mdp, std::span<const double> policy,
                                const MetricForm& form, double tol, int max_iter) {
  form.validate();
  const int n = mdp.num_states, A = mdp.num_actions;
  if (policy.size() != std::size_t(n) * A) throw ValidationError({"policy table has the wrong size"});
  std::vector<double> reward(n, 0.0);
  std::vector<std::vector<std::pair<int, double>>> next(n);
  for (int x = 0; x < n; ++x) {
    std::map<int, double> dist;
    for (ActionId a = 0; a < A; ++a) {
      const double pa = policy[std::size_t(x) * A + a];
      if (pa == 0.0) continue;
      reward[x] += pa * mdp.reward[std::size_t(x) * A + a];
      for (const auto& o : mdp.rows[std::size_t(x) * A + a]) dist[o.next] += pa * o.prob;
    }
    for (const auto& [y, w] : dist)
      if (w > 0.0) next[x].push_back({y, w});
  }
  OnPolicyMetric out;
  out.n = n;
  OperatorKernel kernel(reward, next, form, mdp.discount);
  out.d = iterate_to_fixed_point(kernel, n, tol, max_iter, out.residuals);
  return out;
}

void write_metric(const PairedMetric& metric, const std::string& path,
                  const nlohmann::json& extra_header) {
  nlohmann::json h = extra_header;
  h["kind"] = "gcb-metric";
  h["num_states"] = metric.num_states;
  h["goal_ks"] = metric.goal_ks;
  h["form"] = to_json(metric.form);
  h["discount"] = metric.discount;
  h["n"] = metric.n();
  h["residuals"] = metric.residuals;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << h.dump() << '\n';
  out.write(reinterpret_cast<const char*>(metric.d.data()),
            static_cast<std::streamsize>(metric.d.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for " + path);
}

PairedMetric read_metric(const std::string& path, nlohmann::json* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open metric file " + path);
  std::string line;
  std::getline(in, line);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw ValidationError({"metric header is not valid JSON"});
  }
  if (h.value("kind", "") != "gcb-metric") throw ValidationError({path + " is not a metric file"});
  PairedMetric m;
  m.num_states = h.at("num_states");
  m.goal_ks = h.at("goal_ks").get<std::vector<int>>();
  m.form = metric_form_from_json(h.at("form"));
  m.discount = h.at("discount");
  m.residuals = h.at("residuals").get<std::vector<double>>();
  m.d.resize(std::size_t(m.n()) * m.n());
  in.read(reinterpret_cast<char*>(m.d.data()), static_cast<std::streamsize>(m.d.size() * sizeof(double)));
  if (!in) throw ValidationError({"metric file " + path + " is truncated"});
  if (header) *header = h;
  return m;
}

void write_metric_csv(const PairedMetric& metric, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "state_i,goal_i,state_j,goal_j,d\n";
  out.precision(17);
  const int n = metric.n(), G = metric.num_goals();
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j)
      out << i / G << ',' << metric.goal_ks[i % G] << ',' << j / G << ',' << metric.goal_ks[j % G]
          << ',' << metric(i, j) << '\n';
}

}  // namespace gcb
