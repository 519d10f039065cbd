#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcb/common.hpp"

namespace gcb {

struct Outcome {
  StateId next;
  double prob;
};

/// How goal matching compares states: on the task-relevant signature, or on
/// exact state identity.
enum class Projection { Relevant, Full };

std::string to_string(Projection p);
Projection projection_from_string(const std::string& s);

/// Unvalidated description of a goal-conditioned MDP. Transition rows are
/// stored sparsely, indexed by s * num_actions + a.
struct RawGcmdp {
  int num_states = 0;
  int num_actions = 0;
  std::vector<std::vector<Outcome>> rows;
  std::vector<StateId> goals;
  double discount = 0.0;
  Projection projection = Projection::Full;
  /// Task-relevant signature per state. Required when projection is Relevant.
  std::vector<int> signatures;
};

/// A validated finite goal-conditioned MDP. Immutable after construction.
class Gcmdp {
 public:
  int num_states() const { return num_states_; }
  int num_actions() const { return num_actions_; }
  int num_goals() const { return static_cast<int>(goals_.size()); }
  double discount() const { return discount_; }
  Projection projection() const { return projection_; }
  const std::vector<StateId>& goals() const { return goals_; }
  StateId goal(int k) const { return goals_[k]; }
  /// Position of state g in the goal list, or -1.
  int goal_index(StateId g) const;

  std::span<const Outcome> outcomes(StateId s, ActionId a) const {
    return rows_[static_cast<std::size_t>(s) * num_actions_ + a];
  }
  /// Goal projection of a state: its task-relevant signature, or the state
  /// itself under full projection.
  int signature(StateId s) const { return signatures_[s]; }
  bool matches(StateId s, StateId g) const { return signatures_[s] == signatures_[g]; }

  /// Expected one-step reward r(s, a, ., g) under the transition distribution.
  double expected_reward(StateId s, ActionId a, StateId g) const;

  RawGcmdp to_raw() const;

 private:
  friend Gcmdp validate_gcmdp(RawGcmdp raw);
  Gcmdp() = default;

  int num_states_ = 0;
  int num_actions_ = 0;
  std::vector<std::vector<Outcome>> rows_;
  std::vector<StateId> goals_;
  std::vector<int> goal_index_;
  double discount_ = 0.0;
  Projection projection_ = Projection::Full;
  std::vector<int> signatures_;
};

/// Checks every invariant and returns the validated model. Throws
/// ValidationError listing all violations (non-stochastic rows, empty goal
/// set, discount outside (0,1), dimension mismatches).
Gcmdp validate_gcmdp(RawGcmdp raw);

/// 1 iff goal_projection(s_next) == goal_projection(g). Throws
/// std::out_of_range on bad indices.
int sparse_reward(const Gcmdp& m, StateId s, ActionId a, StateId s_next, StateId g);

/// Goal-conditioned stochastic policy pi(a | s, g_k), one row per
/// (state, goal index) pair.
class GoalPolicy {
 public:
  GoalPolicy(int num_states, int num_goals, int num_actions);
  static GoalPolicy uniform(int num_states, int num_goals, int num_actions);

  int num_states() const { return num_states_; }
  int num_goals() const { return num_goals_; }
  int num_actions() const { return num_actions_; }

  std::span<const double> row(StateId s, int k) const {
    return {probs_.data() + offset(s, k), static_cast<std::size_t>(num_actions_)};
  }
  std::span<double> row(StateId s, int k) {
    return {probs_.data() + offset(s, k), static_cast<std::size_t>(num_actions_)};
  }
  double prob(StateId s, int k, ActionId a) const { return probs_[offset(s, k) + a]; }
  void set_deterministic(StateId s, int k, ActionId a);

  /// Mixture (1 - eps) * this + eps * uniform.
  GoalPolicy epsilon_mixture(double eps) const;

  /// Throws ValidationError if any row is not a distribution within 1e-12.
  void validate() const;
  /// Throws ValidationError if the shape does not match the model.
  void validate_for(const Gcmdp& m) const;

 private:
  std::size_t offset(StateId s, int k) const {
    return (static_cast<std::size_t>(s) * num_goals_ + k) * num_actions_;
  }
  int num_states_, num_goals_, num_actions_;
  std::vector<double> probs_;
};

struct ValueIterationResult {
  std::vector<double> values;      ///< V*(s, g)
  std::vector<double> q;           ///< Q*(s, a, g), index s * A + a
  std::vector<ActionId> greedy;    ///< argmax_a Q*, lowest index on ties
  std::vector<double> residuals;   ///< sup-norm change per sweep
};

inline constexpr int kDefaultMaxIterations = 200000;
/// Q-values within this distance of the maximum count as tied.
inline constexpr double kTieTolerance = 1e-9;

/// Optimal values for a single goal state g. Throws ConvergenceError if the
/// sup-norm Bellman residual is still >= tol after max_iter sweeps.
ValueIterationResult value_iteration(const Gcmdp& m, StateId g, double tol,
                                     int max_iter = kDefaultMaxIterations);

/// V^pi(., g) for goal index k. Iterates the policy Bellman operator until
/// the sup-norm residual is below tol.
std::vector<double> policy_evaluation(const Gcmdp& m, const GoalPolicy& pi, int goal_k,
                                      double tol, int max_iter = kDefaultMaxIterations);

/// Policy evaluation under an arbitrary reward on the next state, using the
/// policy rows of goal index k: V(s) = sum_a pi(a|s,g_k) sum_s' P(s'|s,a)
/// (reward[s'] + gamma V(s')).
std::vector<double> policy_evaluation_reward(const Gcmdp& m, const GoalPolicy& pi, int goal_k,
                                             std::span<const double> next_state_reward,
                                             double tol, int max_iter = kDefaultMaxIterations);

/// Greedy policy for every goal. One value iteration per distinct goal
/// signature; goals sharing a signature share rows.
GoalPolicy optimal_goal_policy(const Gcmdp& m, double tol = 1e-10);

nlohmann::json gcmdp_to_json(const Gcmdp& m);
/// Parses the serialized form and validates it.
Gcmdp gcmdp_from_json(const nlohmann::json& j);

}  // namespace gcb
