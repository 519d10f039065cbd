#include "gcb/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace gcb {

void MlpGrads::set_zero() {
  for (auto& w : dW) w.setZero();
  for (auto& b : db) b.setZero();
}

MlpGrads& MlpGrads::operator+=(const MlpGrads& o) {
  for (std::size_t l = 0; l < dW.size(); ++l) {
    dW[l] += o.dW[l];
    db[l] += o.db[l];
  }
  return *this;
}

Mlp::Mlp(std::vector<int> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw std::invalid_argument("an MLP needs at least input and output sizes");
  for (int s : sizes_)
    if (s <= 0) throw std::invalid_argument("layer sizes must be positive");
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l)
    layers_.push_back({Matrix::Zero(sizes_[l + 1], sizes_[l]), Vector::Zero(sizes_[l + 1])});
}

Mlp Mlp::random(std::vector<int> sizes, Rng& rng) {
  Mlp net(std::move(sizes));
  for (auto& layer : net.layers_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.W.cols()));
    for (Eigen::Index c = 0; c < layer.W.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.W.rows(); ++r) layer.W(r, c) = rng.uniform(-bound, bound);
    for (Eigen::Index r = 0; r < layer.b.size(); ++r) layer.b(r) = rng.uniform(-bound, bound);
  }
  return net;
}

std::size_t Mlp::num_params() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.W.size() + l.b.size();
  return n;
}

Matrix Mlp::forward(const Matrix& x) const {
  if (x.rows() != input_dim())
    throw std::invalid_argument("input has " + std::to_string(x.rows()) + " rows, net expects " +
                                std::to_string(input_dim()));
  Matrix a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Matrix z = layers_[l].W * a;
    z.colwise() += layers_[l].b;
    if (l + 1 < layers_.size()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

Matrix Mlp::forward(const Matrix& x, MlpCache& cache) const {
  if (x.rows() != input_dim())
    throw std::invalid_argument("input has " + std::to_string(x.rows()) + " rows, net expects " +
                                std::to_string(input_dim()));
  cache.inputs.resize(layers_.size());
  cache.pre.resize(layers_.size());
  Matrix a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    cache.inputs[l] = a;
    Matrix z = layers_[l].W * a;
    z.colwise() += layers_[l].b;
    cache.pre[l] = z;
    a = (l + 1 < layers_.size()) ? Matrix(z.cwiseMax(0.0)) : z;
  }
  return a;
}

Matrix Mlp::backward(const MlpCache& cache, const Matrix& dy, MlpGrads& grads) const {
  if (cache.pre.size() != layers_.size()) throw std::invalid_argument("cache does not match net");
  if (dy.rows() != output_dim() || dy.cols() != cache.pre.back().cols())
    throw std::invalid_argument("upstream gradient has the wrong shape");
  if (grads.dW.size() != layers_.size()) grads = zero_grads();
  Matrix delta = dy;
  for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
    if (l + 1 < static_cast<int>(layers_.size()))
      delta = delta.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
    grads.dW[l].noalias() += delta * cache.inputs[l].transpose();
    grads.db[l] += delta.rowwise().sum();
    delta = layers_[l].W.transpose() * delta;
  }
  return delta;
}

MlpGrads Mlp::zero_grads() const {
  MlpGrads g;
  for (const auto& l : layers_) {
    g.dW.push_back(Matrix::Zero(l.W.rows(), l.W.cols()));
    g.db.push_back(Vector::Zero(l.b.size()));
  }
  return g;
}

bool Mlp::all_finite() const {
  for (const auto& l : layers_)
    if (!l.W.allFinite() || !l.b.allFinite()) return false;
  return true;
}

std::vector<double*> Mlp::param_pointers() {
  std::vector<double*> p;
  for (auto& l : layers_) {
    for (Eigen::Index i = 0; i < l.W.size(); ++i) p.push_back(l.W.data() + i);
    for (Eigen::Index i = 0; i < l.b.size(); ++i) p.push_back(l.b.data() + i);
  }
  return p;
}

std::vector<double> Mlp::flatten() const {
  std::vector<double> out;
  out.reserve(num_params());
  for (const auto& l : layers_) {
    out.insert(out.end(), l.W.data(), l.W.data() + l.W.size());
    out.insert(out.end(), l.b.data(), l.b.data() + l.b.size());
  }
  return out;
}

void Mlp::unflatten(const std::vector<double>& flat) {
  if (flat.size() != num_params()) throw std::invalid_argument("parameter vector has the wrong length");
  std::size_t off = 0;
  for (auto& l : layers_) {
    std::copy_n(flat.data() + off, l.W.size(), l.W.data());
    off += l.W.size();
    std::copy_n(flat.data() + off, l.b.size(), l.b.data());
    off += l.b.size();
  }
}

std::vector<double> Mlp::flatten(const MlpGrads& g) {
  std::vector<double> out;
  for (std::size_t l = 0; l < g.dW.size(); ++l) {
    out.insert(out.end(), g.dW[l].data(), g.dW[l].data() + g.dW[l].size());
    out.insert(out.end(), g.db[l].data(), g.db[l].data() + g.db[l].size());
  }
  return out;
}

bool Mlp::operator==(const Mlp& o) const {
  if (sizes_ != o.sizes_) return false;
  for (std::size_t l = 0; l < layers_.size(); ++l)
    if (layers_[l].W != o.layers_[l].W || layers_[l].b != o.layers_[l].b) return false;
  return true;
}

nlohmann::json to_json(const AdamConfig& c) {
  return {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps},
          {"weight_decay", c.weight_decay}};
}

AdamState::AdamState(const Mlp& net, AdamConfig cfg)
    : config(cfg), step(0), m(net.zero_grads()), v(net.zero_grads()) {}

void adam_step(Mlp& net, AdamState& opt, const MlpGrads& grads, const std::string& name) {
  auto& layers = net.layers();
  if (grads.dW.size() != layers.size() || opt.m.dW.size() != layers.size())
    throw std::invalid_argument("gradient or optimizer state does not match " + name);
  for (std::size_t l = 0; l < layers.size(); ++l)
    if (!grads.dW[l].allFinite() || !grads.db[l].allFinite())
      throw NonFiniteError("non-finite gradient in " + name + " layer " + std::to_string(l));

  const AdamConfig& c = opt.config;
  ++opt.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(opt.step));
  const double decay = 1.0 - c.lr * c.weight_decay;
  auto update = [&](auto& p, auto& m, auto& v, const auto& g) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    p *= decay;
    p.array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    update(layers[l].W, opt.m.dW[l], opt.v.dW[l], grads.dW[l]);
    update(layers[l].b, opt.m.db[l], opt.v.db[l], grads.db[l]);
  }
}

double grad_check(const std::function<double()>& loss, const std::vector<double*>& params,
                  const std::vector<double>& analytic, int probe_count, double h, Rng& rng) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check step must be positive");
  if (params.size() != analytic.size())
    throw std::invalid_argument("parameter and gradient counts differ");
  std::vector<std::size_t> idx(params.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (probe_count > 0 && static_cast<std::size_t>(probe_count) < idx.size()) {
    rng.shuffle(idx);
    idx.resize(probe_count);
  }
  double worst = 0.0;
  for (std::size_t k : idx) {
    double& p = *params[k];
    const double saved = p;
    p = saved + h;
    const double up = loss();
    p = saved - h;
    const double down = loss();
    p = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

void write_checkpoint(const std::string& path, const std::vector<NamedNet>& nets,
                      const nlohmann::json& extra) {
  nlohmann::json h = extra;
  h["kind"] = "gcb-checkpoint";
  nlohmann::json list = nlohmann::json::array();
  for (const auto& n : nets) list.push_back({{"name", n.name}, {"sizes", n.net->sizes()}});
  h["nets"] = list;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << h.dump() << '\n';
  for (const auto& n : nets) {
    const auto flat = n.net->flatten();
    out.write(reinterpret_cast<const char*>(flat.data()),
              static_cast<std::streamsize>(flat.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::vector<std::pair<std::string, Mlp>> read_checkpoint(const std::string& path,
                                                         nlohmann::json* header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint " + path);
  std::string line;
  std::getline(in, line);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw ValidationError({"checkpoint header is not valid JSON: " + path});
  }
  if (h.value("kind", "") != "gcb-checkpoint") throw ValidationError({path + " is not a checkpoint"});
  std::vector<std::pair<std::string, Mlp>> out;
  for (const auto& n : h.at("nets")) {
    Mlp net(n.at("sizes").get<std::vector<int>>());
    std::vector<double> flat(net.num_params());
    in.read(reinterpret_cast<char*>(flat.data()), static_cast<std::streamsize>(flat.size() * sizeof(double)));
    if (!in) throw ValidationError({"checkpoint " + path + " is truncated"});
    net.unflatten(flat);
    out.emplace_back(n.at("name").get<std::string>(), std::move(net));
  }
  if (header) *header = h;
  return out;
}

}  // namespace gcb
