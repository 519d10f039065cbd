#pragma once

// Expectile-regression Q-learning over learned (or raw) goal-conditioned
// inputs, advantage-softmax policy extraction, and rollout evaluation.

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcb/envs.hpp"
#include "gcb/nn.hpp"
#include "gcb/repr.hpp"

namespace gcb {

enum class InputMode { PsiPsi, PsiPhi, Raw };
std::string to_string(InputMode m);
InputMode input_mode_from_string(const std::string& s);

inline constexpr double kGreedy = std::numeric_limits<double>::infinity();

struct IqlConfig {
  InputMode input = InputMode::PsiPhi;
  int hidden = 64;
  int hidden_layers = 2;
  double gamma = 0.99;
  double quantile = 0.7;
  double tau = 0.005;
  double beta_adv = 3.0;
  bool critic_grads = false;
  bool concurrent = true;  ///< interleave with representation updates
  bool normalize_inputs = true;
  double norm_momentum = 0.01;
  int epochs = 100;
  int batch_size = 256;
  AdamConfig q_opt{1e-4, 0.9, 0.999, 1e-8, 0.0};
  AdamConfig v_opt{1e-4, 0.9, 0.999, 1e-8, 0.0};

  void validate() const;
};

nlohmann::json to_json(const IqlConfig& c);
IqlConfig iql_config_from_json(const nlohmann::json& j);

int policy_input_dim(InputMode mode, int feature_dim, int latent_dim);

/// Policy inputs for pairs (s_b, g_b), one column per pair.
Matrix policy_input(InputMode mode, const Encoders& enc, const FeatureTable& feats,
                    std::span<const int> s, std::span<const int> g);

struct Critic {
  Mlp q;         ///< input + one-hot action -> 1
  Mlp v;         ///< input -> 1
  Mlp q_target;  ///< same shape as q
  /// Per-dimension input standardization (x - mean) * scale; empty means
  /// identity.
  Vector in_mean, in_scale;

  Matrix normalize(const Matrix& x) const;
  /// Exponential moving average of the batch mean and variance.
  void track_inputs(const Matrix& x, double momentum);

  bool operator==(const Critic& o) const {
    return q == o.q && v == o.v && q_target == o.q_target && in_mean == o.in_mean &&
           in_scale == o.in_scale;
  }
};

Critic init_critic(int input_dim, int num_actions, const IqlConfig& cfg, Rng& rng);

/// Q(x, a) for every action, (num_actions x B).
Matrix q_values(const Mlp& q, const Matrix& x, int num_actions);

/// mean |tau - 1(u < 0)| u^2 over the entries of u; optional gradient.
double expectile_loss(const Matrix& u, double tau, Matrix* du = nullptr);

/// target <- (1 - tau) target + tau online.
void soft_update(Mlp& target, const Mlp& online, double tau);

struct IqlLosses {
  double v = 0.0, q = 0.0;
};

class IqlLearner {
 public:
  IqlLearner(int num_actions, IqlConfig cfg, Critic init);

  /// V-step toward the target Q, Q-step toward r + gamma V(x'), then a soft
  /// target update. terminal[b] drops the bootstrap term. Inputs are raw;
  /// the critic's standardization is applied (and, when enabled, tracked)
  /// here. If dx is given it receives dL/dx of both steps (for critic
  /// gradients into the encoders).
  IqlLosses update(const Matrix& x, std::span<const int> a, std::span<const int> r,
                   std::span<const int> terminal, const Matrix& xp, Matrix* dx = nullptr);

  Critic& critic() { return critic_; }
  const Critic& critic() const { return critic_; }
  const IqlConfig& config() const { return cfg_; }

 private:
  int num_actions_;
  IqlConfig cfg_;
  Critic critic_;
  AdamState q_opt_, v_opt_;
};

/// pi(a|x) proportional to exp(beta (Q(x,a) - V(x))); beta = kGreedy gives
/// the argmax with the lowest index on ties. (num_actions x B).
Matrix action_probabilities(const Critic& critic, const Matrix& x, int num_actions, double beta);

/// Tabulates the extracted policy over every (state, goal) of the model.
GoalPolicy extract_policy(const Critic& critic, const Encoders& enc, const FeatureTable& feats,
                          InputMode mode, const Gcmdp& m, double beta);

struct OfflineEpochLog {
  int epoch;
  ReprLosses repr;
  IqlLosses iql;
};

struct OfflineResult {
  Encoders encoders;
  Critic critic;
  std::vector<EpochLog> repr_log;  ///< pretraining epochs (sequential schedule only)
  std::vector<OfflineEpochLog> log;
};

/// Concurrent schedule: per minibatch one representation step, then one
/// IQL update on inputs from the updated encoders. Sequential schedule:
/// representation epochs first, then IQL epochs on frozen encoders.
OfflineResult train_offline(const Dataset& ds, const FeatureTable& feats, int num_actions,
                            const ReprConfig& rcfg, const IqlConfig& icfg, Encoders enc,
                            Critic critic, Rng& rng);

enum class SuccessRule { AnyStep, Final };
enum class AnalogyConditioning { Shadow, Static };

struct EvalConfig {
  int episodes = 200;
  int horizon = kDefaultHorizon;
  int seeds = 5;
  std::uint64_t seed = 1000;
  SuccessRule rule = SuccessRule::AnyStep;
  AnalogyConditioning conditioning = AnalogyConditioning::Shadow;
  bool greedy = true;

  void validate() const;
};

nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct EvalReport {
  std::string mode;
  int episodes = 0;  ///< per seed
  int horizon = 0;
  double success_rate = 0.0;
  double stderr_ = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> per_seed;

  nlohmann::json to_json(const std::string& config_hash = "") const;
};

/// Mean and standard error over the per-seed rates.
EvalReport summarize(std::string mode, int episodes, int horizon,
                     std::vector<std::uint64_t> seeds, std::vector<double> per_seed);

/// Pools reports of separately trained runs, one per training seed; each
/// run contributes its mean success as one sample.
EvalReport pool_runs(const std::vector<EvalReport>& runs, std::vector<std::uint64_t> train_seeds);

/// Rolls pi on fresh sampled tasks, one evaluation seed per entry.
EvalReport evaluate_goal_conditioned(const GoalPolicy& pi, const Expert& expert,
                                     const EvalConfig& cfg);

/// Rolls the critic's policy from s conditioned on an analogous pair and
/// judges success against g_true. Requires the psi-phi input mode.
EvalReport evaluate_analogy(const Critic& critic, const Encoders& enc, const FeatureTable& feats,
                            const IqlConfig& icfg, const Expert& expert, const EvalConfig& cfg);

}  // namespace gcb
