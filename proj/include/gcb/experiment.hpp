#pragma once

// Resolved experiment configuration and the pipeline pieces shared by the
// command-line tool and the acceptance harness.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcb/envs.hpp"
#include "gcb/metric.hpp"
#include "gcb/offline_rl.hpp"
#include "gcb/repr.hpp"

namespace gcb {

struct DatasetConfig {
  int size = 50000;
  std::optional<double> epsilon;  ///< empty: calibrate to target_success
  double target_success = 0.8;
  int calibration_episodes = 2000;
  int horizon = kDefaultHorizon;
};

enum class OraclePolicy { Behavior, Expert, Uniform };
enum class GoalSubset { Signature, All };

struct OracleConfig {
  MetricForm form;
  double tol = 1e-9;
  int max_iter = 100000;
  OraclePolicy policy = OraclePolicy::Behavior;
  GoalSubset goals = GoalSubset::Signature;
};

struct ProbeConfig {
  int cases = 200;
  int heldout_size = 5000;
  int metric_pairs = 2000;
};

struct BoundsConfig {
  int alphas = 5;
  double slack = 1e-6;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  FactorSpec env;
  DatasetConfig dataset;
  ReprConfig repr;
  IqlConfig rl;
  EvalConfig eval;
  OracleConfig oracle;
  ProbeConfig probe;
  BoundsConfig bounds;

  /// Every field, plus cross-field consistency. Throws ValidationError
  /// listing all problems.
  void validate() const;
};

/// Full materialization: every field is written.
nlohmann::json to_json(const ExperimentConfig& c);
/// Fields absent from j keep their defaults; unknown fields are errors.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);
/// Content hash of the materialized configuration.
std::string config_hash(const ExperimentConfig& c);

/// Independent random streams derived from the master seed.
enum class Stream : std::uint64_t {
  Dataset = 1,
  EncoderInit = 2,
  CriticInit = 3,
  Training = 4,
  Probe = 6,
  Heldout = 7,
  Alphas = 8,
};
std::uint64_t stream_seed(const ExperimentConfig& c, Stream s);

/// Environment, expert and features for one configuration. Not copyable:
/// the expert refers to the environment.
class Workspace {
 public:
  explicit Workspace(const ExperimentConfig& cfg);
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;

  const ExperimentConfig& config() const { return cfg_; }
  const DrawerGrid& env() const { return *env_; }
  const Expert& expert() const { return *expert_; }
  const FeatureTable& feats() const { return *feats_; }
  /// Dataset noise level, calibrated when the config leaves it open.
  double epsilon() const { return epsilon_; }

 private:
  ExperimentConfig cfg_;
  std::unique_ptr<DrawerGrid> env_;
  std::unique_ptr<Expert> expert_;
  std::unique_ptr<FeatureTable> feats_;
  double epsilon_;
};

Dataset make_dataset(const Workspace& ws);
/// Held-out transitions from an independent stream, for probes.
Dataset make_heldout(const Workspace& ws);

struct Model {
  Encoders encoders;
  Critic critic;
};

Model init_model(const Workspace& ws);
OfflineResult train_model(const Workspace& ws, const Dataset& ds);
nlohmann::json training_log_json(const OfflineResult& r);

void write_model(const std::string& path, const Model& m, const std::string& config_hash);
Model read_model(const std::string& path, std::string* config_hash = nullptr);

/// Policy the oracle metric is computed for.
GoalPolicy oracle_policy(const Workspace& ws);
std::vector<int> oracle_goal_ks(const Workspace& ws);
PairedMetric oracle_metric(const Workspace& ws);

/// Paired index of (s, g) in a metric over a goal subset: g is replaced by
/// the subset goal sharing its signature. Returns -1 if none does.
int paired_index(const PairedMetric& metric, const Gcmdp& m, StateId s, StateId g);

struct BoundsSummary {
  BoundReport value;
  std::vector<BoundReport> linear;
  std::vector<std::vector<double>> alphas;
  bool passed() const;
  nlohmann::json to_json() const;
};

BoundsSummary verify_bounds(const Workspace& ws, const PairedMetric& metric);

struct MetricFit {
  int pairs = 0;
  double spearman = 0.0;
};

/// Rank correlation between L1 distances of phi and the oracle over random
/// pair-pairs from held-out transitions.
MetricFit metric_fit(const Workspace& ws, const Encoders& enc, const PairedMetric& metric,
                     const Dataset& heldout);

struct ProbeReport {
  std::string mode;
  int cases = 0;
  int matches = 0;
  double rate() const { return cases ? static_cast<double>(matches) / cases : 0.0; }
  nlohmann::json to_json() const;
};

/// Every in-distribution task: each state paired with the scripted goal of
/// each reachable relevant configuration other than its own.
struct TaskPairs {
  std::vector<int> s, g;
};
TaskPairs candidate_tasks(const Workspace& ws);

/// Nearest psi-neighbour of the composed goal matches g_true's relevant
/// factors.
ProbeReport psi_analogy_probe(const Workspace& ws, const Encoders& enc);
/// Nearest phi-neighbour of a sampled task, among tasks with different
/// nuisance factors, has the same task delta.
ProbeReport phi_nn_probe(const Workspace& ws, const Encoders& enc);

struct EvalSummary {
  EvalReport standard;
  std::optional<EvalReport> analogy;
};

/// Extracted-policy evaluation; analogy evaluation only for psi-phi inputs.
EvalSummary evaluate_model(const Workspace& ws, const Model& m);

// ---------------------------------------------------------------------------
// Statistics

/// Ranks starting at 0, ties receive the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& x);
double pearson(const std::vector<double>& x, const std::vector<double>& y);
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace gcb
