#pragma once

// Discrete factored drawer-grid environments.
//
// An agent walks an N x N grid. The drawer handle sits in the top-left cell
// and the button in the top-right cell. Two interact actions (open-step,
// close-step) move the drawer one level when the agent stands on the handle
// cell; either interact action on the button cell presses the button, which
// latches it down and toggles the bottom-drawer latch. Colour tag and
// distractor layout are nuisance factors that no action changes.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcb/common.hpp"
#include "gcb/gcmdp.hpp"

namespace gcb {

struct FactorSpec {
  int grid_size = 3;       ///< N
  int drawer_levels = 2;   ///< K; openness takes values 0..K
  bool has_button = false;
  int num_colors = 2;      ///< C
  int num_distractor_layouts = 1;  ///< D
  double slip = 0.0;       ///< probability that an action leaves the state unchanged
  int state_cap = 5000;
  double discount = 0.99;
  Projection projection = Projection::Relevant;

  /// Throws ValidationError on any out-of-range field.
  void validate() const;
  int num_states() const;
};

nlohmann::json to_json(const FactorSpec& spec);
FactorSpec factor_spec_from_json(const nlohmann::json& j);

struct FactoredState {
  int agent_cell = 0;
  int drawer_open = 0;
  int button = 0;
  int latch = 0;
  int color = 0;
  int distractor_layout = 0;

  bool operator==(const FactoredState&) const = default;
};

enum Action : ActionId { kUp = 0, kDown, kLeft, kRight, kOpenStep, kCloseStep, kNumActions };

/// Bijection between factored states and flat indices, plus the per-factor
/// one-hot feature encoding.
class DrawerGridCodec {
 public:
  explicit DrawerGridCodec(FactorSpec spec);

  const FactorSpec& spec() const { return spec_; }
  int num_states() const { return num_states_; }
  StateId encode(const FactoredState& f) const;
  FactoredState decode(StateId s) const;

  int drawer_cell() const { return 0; }
  int button_cell() const { return spec_.grid_size - 1; }

  /// Length N^2 + (K+1) + 2 + 2 + C + D.
  int feature_dim() const;
  void features(StateId s, std::span<double> out) const;
  std::vector<double> features(StateId s) const;

  /// Drawer openness, button and latch packed into one integer.
  int relevant_signature(const FactoredState& f) const;
  int relevant_signature(StateId s) const { return relevant_signature(decode(s)); }
  bool same_nuisance(const FactoredState& a, const FactoredState& b) const {
    return a.color == b.color && a.distractor_layout == b.distractor_layout;
  }

  /// Successor when the action does not slip.
  FactoredState step(const FactoredState& f, ActionId a) const;
  StateId step(StateId s, ActionId a) const { return encode(step(decode(s), a)); }

 private:
  FactorSpec spec_;
  int num_states_;
  int buttons_;  // 2 with a button, else 1
};

struct DrawerGrid {
  FactorSpec spec;
  DrawerGridCodec codec;
  Gcmdp mdp;  ///< goals = all states
};

/// Throws ValidationError if the spec is invalid or |S| exceeds the cap.
DrawerGrid build_drawer_grid(const FactorSpec& spec);

/// Optimal goal-reaching policy, solved once per relevant goal signature.
class Expert {
 public:
  explicit Expert(const DrawerGrid& env, double tol = 1e-10);

  ActionId optimal_action(StateId s, StateId g) const;
  double optimal_value(StateId s, StateId g) const;
  /// Table over (state, goal index) for all goals of the model.
  GoalPolicy goal_policy() const;
  /// Greedy action toward any state with the given relevant signature,
  /// regardless of the environment's goal projection.
  ActionId scripted_action(StateId s, int relevant_signature) const;
  const DrawerGrid& env() const { return *env_; }

 private:
  const std::vector<ActionId>& greedy_for(StateId g) const;

  const DrawerGrid* env_;
  std::vector<int> signature_slot_;  // signature -> slot
  std::vector<std::vector<ActionId>> greedy_;
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<ActionId>> script_greedy_;
};

inline constexpr int kDefaultHorizon = 75;

/// One environment step including slip.
StateId env_step(const DrawerGrid& env, StateId s, ActionId a, Rng& rng);

struct Task {
  StateId s0;
  StateId g;
};

/// Relevant signatures reachable from s within the horizon (breadth-first
/// search over the deterministic dynamics).
std::vector<int> reachable_signatures(const DrawerGrid& env, StateId s, int horizon = kDefaultHorizon);

/// Rolls the expert from s toward any state with the target signature and
/// returns the state where it first matches. Throws if not reached in time.
StateId scripted_goal(const Expert& expert, StateId s, int target_signature,
                      int horizon = kDefaultHorizon);

/// s0 uniform over states; g's relevant factors uniform over the reachable
/// signatures other than s0's own; g itself is the final state of the
/// scripted expert rollout, so it shares s0's nuisance factors.
Task sample_task(const Expert& expert, Rng& rng, int horizon = kDefaultHorizon);

/// Change in task-relevant factors between a start and a goal.
struct TaskDelta {
  int drawer = 0;        ///< change in openness
  int button = 0;        ///< 0 or +1
  int latch_toggle = 0;  ///< 0 or 1

  bool operator==(const TaskDelta&) const = default;
  bool is_zero() const { return drawer == 0 && button == 0 && latch_toggle == 0; }
  std::string describe() const;
};

TaskDelta task_delta(const DrawerGridCodec& codec, StateId from, StateId to);
/// True if the resulting relevant configuration exists and is reachable from s.
bool delta_applicable(const DrawerGridCodec& codec, const FactoredState& s, const TaskDelta& d);
/// Applies the delta to the relevant factors; all other factors are kept.
FactoredState apply_delta(const DrawerGridCodec& codec, FactoredState s, const TaskDelta& d);
/// All nonzero deltas the environment admits.
std::vector<TaskDelta> all_deltas(const FactorSpec& spec);

struct AnalogyCase {
  StateId s;
  StateId s_a;
  StateId g_a;
  StateId g_true;
  TaskDelta delta;
};

/// Builds an analogous task for s. s_a keeps s's relevant factors but has its
/// agent cell and nuisance factors resampled (nuisance forced to differ from
/// s's); g_a is the scripted expert's final state for the delta; g_true is s
/// with the delta applied. A forced delta that never applies to s ends in an
/// error after max_retries attempts; a random delta is resampled.
AnalogyCase sample_analogy(const Expert& expert, Rng& rng, StateId s,
                           std::optional<TaskDelta> forced = std::nullopt, int max_retries = 100,
                           int horizon = kDefaultHorizon);

/// With probability 1 - epsilon the expert's action, otherwise uniform.
ActionId noisy_expert_action(const Expert& expert, StateId s, StateId g, double epsilon, Rng& rng);

// ---------------------------------------------------------------------------
// Offline datasets

struct Transition {
  int ep;
  int t;
  StateId s;
  ActionId a;
  StateId sp;
  int r;
  StateId g;
};

struct Dataset {
  nlohmann::json meta;
  std::vector<Transition> transitions;

  std::size_t size() const { return transitions.size(); }
  /// True for the last transition of an episode that ended on the goal.
  bool terminal(std::size_t i) const { return transitions[i].r == 1; }
};

Dataset generate_dataset(const Expert& expert, std::size_t num_transitions, double epsilon,
                         int horizon, std::uint64_t seed);

/// Fraction of noisy-expert episodes that reach their goal within the horizon.
double demonstrator_success(const Expert& expert, double epsilon, int episodes, int horizon,
                            std::uint64_t seed);

/// Bisection on epsilon for a target demonstrator success rate.
double calibrate_epsilon(const Expert& expert, double target_success, int episodes, int horizon,
                         std::uint64_t seed, double tol = 1e-3);

/// Line-delimited JSON: a header line, then one transition per line.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace gcb
