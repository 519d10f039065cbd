#pragma once

// Small feedforward networks with hand-written reverse mode and AdamW.
// Batches are stored column-wise: an input batch is (input_dim x B).

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gcb/common.hpp"

namespace gcb {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Layer {
  Matrix W;  ///< out x in
  Vector b;
};

struct MlpCache {
  std::vector<Matrix> inputs;  ///< input to each layer
  std::vector<Matrix> pre;     ///< pre-activation of each layer
};

struct MlpGrads {
  std::vector<Matrix> dW;
  std::vector<Vector> db;

  void set_zero();
  MlpGrads& operator+=(const MlpGrads& o);
};

/// Rectified-linear hidden layers, identity output.
class Mlp {
 public:
  Mlp() = default;
  /// Zero-initialized net with the given layer widths (input first).
  explicit Mlp(std::vector<int> sizes);
  /// Weights and biases uniform in +-1/sqrt(fan_in).
  static Mlp random(std::vector<int> sizes, Rng& rng);

  const std::vector<int>& sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t num_params() const;

  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, MlpCache& cache) const;
  /// Accumulates parameter gradients for upstream dL/dy into grads and
  /// returns dL/dx. The rectifier's subgradient at exactly 0 is 0.
  Matrix backward(const MlpCache& cache, const Matrix& dy, MlpGrads& grads) const;

  MlpGrads zero_grads() const;
  bool all_finite() const;

  /// Flat views, layer by layer: W (column-major) then b.
  std::vector<double*> param_pointers();
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
  static std::vector<double> flatten(const MlpGrads& g);

  bool operator==(const Mlp& o) const;

 private:
  std::vector<int> sizes_;
  std::vector<Layer> layers_;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

nlohmann::json to_json(const AdamConfig& c);

struct AdamState {
  AdamConfig config;
  long long step = 0;
  MlpGrads m;
  MlpGrads v;

  AdamState() = default;
  AdamState(const Mlp& net, AdamConfig cfg);
};

/// Bias-corrected Adam with decoupled weight decay:
/// p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
/// Throws NonFiniteError naming the net and layer on a non-finite gradient.
void adam_step(Mlp& net, AdamState& opt, const MlpGrads& grads, const std::string& name = "net");

/// Largest relative error |a - n| / max(|a|, |n|, 1e-6) between analytic
/// gradients and central differences over probe_count random coordinates
/// (all coordinates if probe_count <= 0 or exceeds the count).
double grad_check(const std::function<double()>& loss, const std::vector<double*>& params,
                  const std::vector<double>& analytic, int probe_count, double h, Rng& rng);

/// Checkpoint: JSON header line with named shapes, then doubles in order.
struct NamedNet {
  std::string name;
  Mlp* net;
};
void write_checkpoint(const std::string& path, const std::vector<NamedNet>& nets,
                      const nlohmann::json& extra = nlohmann::json::object());
/// Reads nets in stored order; shapes are taken from the file.
std::vector<std::pair<std::string, Mlp>> read_checkpoint(const std::string& path,
                                                         nlohmann::json* header = nullptr);

}  // namespace gcb
