#pragma once

// Exact goal-conditioned bisimulation metric over paired (state, goal)
// indices and the bound checks built on it.

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcb/gcmdp.hpp"

namespace gcb {

enum class MetricMode { Unweighted, Convex };

struct MetricForm {
  MetricMode mode = MetricMode::Unweighted;
  double c = 0.5;  ///< metric discount, convex mode only
  int wasserstein_order = 1;

  void validate() const;
  bool is_unweighted_w1() const { return mode == MetricMode::Unweighted && wasserstein_order == 1; }
  /// Contraction factor of the operator.
  double contraction(double discount) const { return mode == MetricMode::Convex ? c : discount; }
};

nlohmann::json to_json(const MetricForm& f);
MetricForm metric_form_from_json(const nlohmann::json& j);

/// Symmetric matrix over paired indices i = s * G + kk, where kk indexes
/// goal_ks (positions in the model's goal list).
struct PairedMetric {
  int num_states = 0;
  std::vector<int> goal_ks;
  MetricForm form;
  double discount = 0.0;
  std::vector<double> d;          ///< n x n, row-major
  std::vector<double> residuals;  ///< sup-norm change per application

  int num_goals() const { return static_cast<int>(goal_ks.size()); }
  int n() const { return num_states * num_goals(); }
  int index(StateId s, int kk) const { return s * num_goals() + kk; }
  double operator()(int i, int j) const { return d[std::size_t(i) * n() + j]; }
  double& at(int i, int j) { return d[std::size_t(i) * n() + j]; }
};

/// Expected reward and successor distribution per paired index under pi.
/// The goal coordinate of every successor equals that of its source.
struct PairedDynamics {
  std::vector<double> reward;
  std::vector<std::vector<std::pair<int, double>>> next;
};

/// All goal positions 0..G-1.
std::vector<int> all_goal_ks(const Gcmdp& m);
/// One goal position per distinct goal signature (the first in goal order).
std::vector<int> signature_goal_ks(const Gcmdp& m);

PairedDynamics paired_dynamics(const Gcmdp& m, const GoalPolicy& pi, const std::vector<int>& goal_ks);

/// Zero metric with the shape implied by the arguments.
PairedMetric zero_metric(const Gcmdp& m, const std::vector<int>& goal_ks, const MetricForm& form);

/// One application of the operator to d.
PairedMetric gcb_operator(const PairedMetric& d, const GoalPolicy& pi, const Gcmdp& m,
                          const MetricForm& form);

/// Iterates the operator from zero until the sup-norm change is below tol.
/// Throws ConvergenceError after max_iter applications. An empty goal_ks
/// means every goal.
PairedMetric gcb_fixed_point(const GoalPolicy& pi, const Gcmdp& m, const MetricForm& form,
                             double tol, int max_iter = 100000, std::vector<int> goal_ks = {});

/// V^pi at every paired index of the given goal subset.
std::vector<double> paired_values(const Gcmdp& m, const GoalPolicy& pi,
                                  const std::vector<int>& goal_ks, double tol);

struct BoundReport {
  long long pairs_checked = 0;
  long long violations = 0;
  double max_violation = 0.0;  ///< max over pairs of lhs - rhs (negative when slack remains)
  int worst_i = -1, worst_j = -1;
  long long tight_pairs = 0;   ///< rhs > 0 and rhs - lhs <= 1e-3
  std::array<long long, 10> tightness_histogram{};  ///< lhs / rhs in tenths, rhs > 0
  double slack = 1e-6;

  bool passed() const { return violations == 0; }
  nlohmann::json to_json() const;
};

/// |V(i) - V(j)| <= d(i, j) + slack over all pairs. Rejects metrics that are
/// not in unweighted W1 form.
BoundReport verify_value_bound(const PairedMetric& metric, std::span<const double> values,
                               double slack = 1e-6);

/// For R(s') = sum_k alpha_k 1(proj(s') = proj(g_k)) over the metric's goal
/// subset: |V_R(s_i) - V_R(s_j)| <= sum_k alpha_k d(s_i, g_k; s_j, g_k) over
/// all state pairs, with V_R = sum_k alpha_k V^pi(., g_k).
BoundReport verify_linear_reward_bound(const PairedMetric& metric, const Gcmdp& m,
                                       const GoalPolicy& pi, std::span<const double> alphas,
                                       double slack = 1e-6, double tol = 1e-11);

/// |r_i - r_j| + gamma * d_next.
double sampled_metric_target(int r_i, int r_j, double d_next, double gamma);

// ---------------------------------------------------------------------------
// Single-task view over the concatenated state space

/// Ordinary MDP with expected rewards per (state, action).
struct FlatMdp {
  int num_states = 0;
  int num_actions = 0;
  std::vector<std::vector<Outcome>> rows;  ///< x * A + a
  std::vector<double> reward;              ///< x * A + a
  double discount = 0.0;
};

/// States (s, g_k) for k in goal_ks; transitions keep the goal; reward is
/// the probability that the successor matches g_k.
FlatMdp super_mdp(const Gcmdp& m, const std::vector<int>& goal_ks);
/// pi(a | (s, g_k)) laid out as x * A + a.
std::vector<double> super_policy(const GoalPolicy& pi, const std::vector<int>& goal_ks);

struct OnPolicyMetric {
  int n = 0;
  std::vector<double> d;
  std::vector<double> residuals;
};

/// On-policy bisimulation metric of a single-task MDP.
OnPolicyMetric on_policy_metric(const FlatMdp& mdp, std::span<const double> policy,
                                const MetricForm& form, double tol, int max_iter = 100000);

// ---------------------------------------------------------------------------
// Files

/// JSON header line followed by n*n native doubles.
void write_metric(const PairedMetric& metric, const std::string& path,
                  const nlohmann::json& extra_header = nlohmann::json::object());
PairedMetric read_metric(const std::string& path, nlohmann::json* header = nullptr);
void write_metric_csv(const PairedMetric& metric, const std::string& path);

}  // namespace gcb
