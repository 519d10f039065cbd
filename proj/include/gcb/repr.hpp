#pragma once

// Paired-state encoder phi(s, g), state encoder psi(s), their losses, and
// the probes that read them.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcb/envs.hpp"
#include "gcb/nn.hpp"

namespace gcb {

enum class NormMode { L1, L2 };

struct ReprConfig {
  int latent_dim = 32;
  int hidden = 64;
  int hidden_layers = 2;
  double gamma = 0.99;
  NormMode norm = NormMode::L1;
  bool grounding = true;
  bool reward_decoder = true;
  bool dynamics_model = false;
  int batch_size = 256;
  int epochs = 100;
  AdamConfig psi_opt{5e-4, 0.9, 0.999, 1e-8, 1e-4};
  AdamConfig phi_opt{1e-4, 0.9, 0.999, 1e-8, 1e-3};
  AdamConfig decoder_opt{1e-4, 0.9, 0.999, 1e-8, 0.0};
  AdamConfig dynamics_opt{1e-4, 0.9, 0.999, 1e-8, 0.0};

  void validate() const;
};

nlohmann::json to_json(const ReprConfig& c);
/// Overrides defaults with the fields present in j.
ReprConfig repr_config_from_json(const nlohmann::json& j);

/// One-hot features of every state, one column per state.
class FeatureTable {
 public:
  explicit FeatureTable(const DrawerGridCodec& codec);
  int dim() const { return static_cast<int>(f_.rows()); }
  int num_states() const { return static_cast<int>(f_.cols()); }
  const Matrix& table() const { return f_; }
  Matrix states(std::span<const int> s) const;
  /// concat(features(s_b), features(g_b)) per column.
  Matrix pairs(std::span<const int> s, std::span<const int> g) const;

 private:
  Matrix f_;
};

struct Encoders {
  Mlp phi;       ///< 2*feature_dim -> latent
  Mlp psi;       ///< feature_dim -> latent
  Mlp decoder;   ///< 2*latent -> 1
  Mlp dynamics;  ///< latent + num_actions -> latent

  bool operator==(const Encoders& o) const {
    return phi == o.phi && psi == o.psi && decoder == o.decoder && dynamics == o.dynamics;
  }
};

Encoders init_encoders(int feature_dim, int num_actions, const ReprConfig& cfg, Rng& rng);

struct TransitionBatch {
  std::vector<int> s, a, sp, r, g;
  int size() const { return static_cast<int>(s.size()); }
};

TransitionBatch make_batch(const Dataset& ds, std::span<const std::size_t> idx);
/// Every transition of ds, in order.
TransitionBatch full_batch(const Dataset& ds);

/// Aligned i- and j-samples of the pairwise loss.
struct PairBatch {
  TransitionBatch b1;
  TransitionBatch b2;
};

/// B2 is a uniform random permutation of B1 (not necessarily a derangement).
PairBatch permute_pair_batch(const TransitionBatch& batch, Rng& rng);

struct LossGrad {
  double loss = 0.0;
  MlpGrads grads;  ///< gradient of the net being trained
};

/// Pairwise metric loss. phi_bar evaluates the next-pair embeddings and
/// receives no gradient; pass the same net as phi for the stop-gradient copy.
LossGrad phi_loss(const Mlp& phi, const Mlp& phi_bar, const FeatureTable& feats,
                  const PairBatch& pairs, double gamma, NormMode norm);

/// Dynamics-model variant: next-pair embeddings replaced by
/// f(phi_bar(s,g), a) + phi_bar(s,g). Gradient w.r.t. phi only.
LossGrad phi_dynamics_loss(const Mlp& phi, const Mlp& phi_bar, const Mlp& f,
                           const FeatureTable& feats, const PairBatch& pairs, double gamma,
                           NormMode norm, int num_actions);

/// Latent-delta regression ||f(phi_bar(s,g), a) - (phi_bar(s',g) - phi_bar(s,g))||^2,
/// gradient w.r.t. f only.
LossGrad dynamics_loss(const Mlp& f, const Mlp& phi_bar, const FeatureTable& feats,
                       const TransitionBatch& batch, int num_actions);

/// mean ||(phi_bar(s,g) - phi_bar(g,g)) - (psi(g) - psi(s))||^2; the grounding
/// term phi_bar(g,g) is dropped when grounding is false. Gradient w.r.t. psi.
LossGrad psi_loss(const Mlp& psi, const Mlp& phi_bar, const FeatureTable& feats,
                  const TransitionBatch& batch, bool grounding);

struct DecoderLossGrad {
  double loss = 0.0;
  MlpGrads decoder;
  MlpGrads phi;
};

/// mean (R(phi(s,g), phi(s',g)) - r)^2, gradients into decoder and phi.
DecoderLossGrad reward_decoder_loss(const Mlp& decoder, const Mlp& phi, const FeatureTable& feats,
                                    const TransitionBatch& batch);

/// Shared core of the pairwise loss on precomputed embeddings. Returns the
/// loss and dL/dE1, dL/dE2 (columns are samples).
double pair_metric_core(const Matrix& e1, const Matrix& e2, const Matrix& n1, const Matrix& n2,
                        std::span<const int> r1, std::span<const int> r2, double gamma,
                        NormMode norm, Matrix* de1, Matrix* de2);

struct ReprLosses {
  double phi = 0.0, psi = 0.0, decoder = 0.0, dynamics = 0.0;
};

/// One iteration: permute, phi step (with decoder and dynamics terms when
/// enabled), then psi step against the updated phi.
class ReprTrainer {
 public:
  ReprTrainer(const FeatureTable& feats, int num_actions, ReprConfig cfg, Encoders init);

  ReprLosses step(const TransitionBatch& b1, Rng& rng);
  Encoders& encoders() { return enc_; }
  const Encoders& encoders() const { return enc_; }
  const ReprConfig& config() const { return cfg_; }

 private:
  const FeatureTable* feats_;
  int num_actions_;
  ReprConfig cfg_;
  Encoders enc_;
  AdamState phi_opt_, psi_opt_, dec_opt_, dyn_opt_;
};

struct EpochLog {
  int epoch;
  ReprLosses mean;
};

/// Full passes over the dataset with a per-epoch shuffle.
std::vector<EpochLog> train_representations(ReprTrainer& trainer, const Dataset& ds, Rng& rng);

/// grounded: psi(s) + phi(s_a,g_a) - phi(g_a,g_a); ungrounded: psi(s) + phi(s_a,g_a).
Vector compose_goal(const Mlp& psi, const Mlp& phi, const FeatureTable& feats, StateId s,
                    StateId s_a, StateId g_a, bool grounding);

/// Candidate column minimizing Euclidean distance; ties go to the lowest id.
int nearest_neighbor(const Vector& query, const Matrix& candidates, std::span<const int> ids);

/// psi of every state, one column per state.
Matrix embed_states(const Mlp& psi, const FeatureTable& feats);

/// Rows: state_index, goal_index (-1 for psi rows), latent columns.
void write_embeddings_csv(const std::string& path, const Encoders& enc, const FeatureTable& feats,
                          std::span<const int> pair_s, std::span<const int> pair_g);

}  // namespace gcb
