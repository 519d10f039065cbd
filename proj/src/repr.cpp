#include "gcb/repr.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace gcb {

void ReprConfig::validate() const {
  std::vector<std::string> errors;
  if (latent_dim < 1) errors.push_back("latent_dim must be positive");
  if (hidden < 1) errors.push_back("hidden width must be positive");
  if (hidden_layers < 0) errors.push_back("hidden_layers must be nonnegative");
  if (!(gamma > 0.0 && gamma < 1.0)) errors.push_back("repr gamma outside (0,1)");
  if (batch_size < 1) errors.push_back("batch_size must be positive");
  if (epochs < 0) errors.push_back("epochs must be nonnegative");
  for (const AdamConfig* c : {&psi_opt, &phi_opt, &decoder_opt, &dynamics_opt})
    if (!(c->lr > 0.0) || c->weight_decay < 0.0 || !(c->beta1 >= 0.0 && c->beta1 < 1.0) ||
        !(c->beta2 >= 0.0 && c->beta2 < 1.0) || !(c->eps > 0.0))
      errors.push_back("invalid optimizer settings");
  if (!errors.empty()) throw ValidationError(errors);
}

nlohmann::json to_json(const ReprConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"hidden", c.hidden},
          {"hidden_layers", c.hidden_layers},
          {"gamma", c.gamma},
          {"norm", c.norm == NormMode::L1 ? "l1" : "l2"},
          {"grounding", c.grounding},
          {"reward_decoder", c.reward_decoder},
          {"dynamics_model", c.dynamics_model},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"psi_opt", to_json(c.psi_opt)},
          {"phi_opt", to_json(c.phi_opt)},
          {"decoder_opt", to_json(c.decoder_opt)},
          {"dynamics_opt", to_json(c.dynamics_opt)}};
}

namespace {

AdamConfig adam_from_json(const nlohmann::json& j, AdamConfig c, std::vector<std::string>& errors) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "lr") c.lr = it->get<double>();
    else if (k == "beta1") c.beta1 = it->get<double>();
    else if (k == "beta2") c.beta2 = it->get<double>();
    else if (k == "eps") c.eps = it->get<double>();
    else if (k == "weight_decay") c.weight_decay = it->get<double>();
    else errors.push_back("unknown optimizer field '" + k + "'");
  }
  return c;
}

}  // namespace

ReprConfig repr_config_from_json(const nlohmann::json& j) {
  ReprConfig c;
  std::vector<std::string> errors;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "latent_dim") c.latent_dim = it->get<int>();
      else if (k == "hidden") c.hidden = it->get<int>();
      else if (k == "hidden_layers") c.hidden_layers = it->get<int>();
      else if (k == "gamma") c.gamma = it->get<double>();
      else if (k == "norm") {
        const auto n = it->get<std::string>();
        if (n == "l1") c.norm = NormMode::L1;
        else if (n == "l2") c.norm = NormMode::L2;
        else errors.push_back("unknown norm '" + n + "'");
      } else if (k == "grounding") c.grounding = it->get<bool>();
      else if (k == "reward_decoder") c.reward_decoder = it->get<bool>();
      else if (k == "dynamics_model") c.dynamics_model = it->get<bool>();
      else if (k == "batch_size") c.batch_size = it->get<int>();
      else if (k == "epochs") c.epochs = it->get<int>();
      else if (k == "psi_opt") c.psi_opt = adam_from_json(*it, c.psi_opt, errors);
      else if (k == "phi_opt") c.phi_opt = adam_from_json(*it, c.phi_opt, errors);
      else if (k == "decoder_opt") c.decoder_opt = adam_from_json(*it, c.decoder_opt, errors);
      else if (k == "dynamics_opt") c.dynamics_opt = adam_from_json(*it, c.dynamics_opt, errors);
      else errors.push_back("unknown repr field '" + k + "'");
    } catch (const nlohmann::json::exception&) {
      errors.push_back("repr field '" + k + "' has the wrong type");
    }
  }
  if (!errors.empty()) throw ValidationError(errors);
  c.validate();
  return c;
}

FeatureTable::FeatureTable(const DrawerGridCodec& codec)
    : f_(codec.feature_dim(), codec.num_states()) {
  for (StateId s = 0; s < codec.num_states(); ++s)
    codec.features(s, std::span<double>(f_.col(s).data(), f_.rows()));
}

Matrix FeatureTable::states(std::span<const int> s) const {
  Matrix out(dim(), static_cast<Eigen::Index>(s.size()));
  for (std::size_t b = 0; b < s.size(); ++b) out.col(b) = f_.col(s[b]);
  return out;
}

Matrix FeatureTable::pairs(std::span<const int> s, std::span<const int> g) const {
  if (s.size() != g.size()) throw std::invalid_argument("pair lists differ in length");
  const int d = dim();
  Matrix out(2 * d, static_cast<Eigen::Index>(s.size()));
  for (std::size_t b = 0; b < s.size(); ++b) {
    out.col(b).head(d) = f_.col(s[b]);
    out.col(b).tail(d) = f_.col(g[b]);
  }
  return out;
}

Encoders init_encoders(int feature_dim, int num_actions, const ReprConfig& cfg, Rng& rng) {
  auto sizes = [&](int in, int out, int layers) {
    std::vector<int> v{in};
    for (int l = 0; l < layers; ++l) v.push_back(cfg.hidden);
    v.push_back(out);
    return v;
  };
  Encoders e;
  e.phi = Mlp::random(sizes(2 * feature_dim, cfg.latent_dim, cfg.hidden_layers), rng);
  e.psi = Mlp::random(sizes(feature_dim, cfg.latent_dim, cfg.hidden_layers), rng);
  e.decoder = Mlp::random(sizes(2 * cfg.latent_dim, 1, 1), rng);
  e.dynamics = Mlp::random(sizes(cfg.latent_dim + num_actions, cfg.latent_dim, 1), rng);
  return e;
}

TransitionBatch make_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  TransitionBatch b;
  for (std::size_t i : idx) {
    const auto& t = ds.transitions.at(i);
    b.s.push_back(t.s);
    b.a.push_back(t.a);
    b.sp.push_back(t.sp);
    b.r.push_back(t.r);
    b.g.push_back(t.g);
  }
  return b;
}

TransitionBatch full_batch(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(ds, idx);
}

PairBatch permute_pair_batch(const TransitionBatch& batch, Rng& rng) {
  if (batch.size() == 0) throw std::invalid_argument("cannot permute an empty batch");
  std::vector<int> perm(batch.size());
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  PairBatch p{batch, {}};
  for (int j : perm) {
    p.b2.s.push_back(batch.s[j]);
    p.b2.a.push_back(batch.a[j]);
    p.b2.sp.push_back(batch.sp[j]);
    p.b2.r.push_back(batch.r[j]);
    p.b2.g.push_back(batch.g[j]);
  }
  return p;
}

double pair_metric_core(const Matrix& e1, const Matrix& e2, const Matrix& n1, const Matrix& n2,
                        std::span<const int> r1, std::span<const int> r2, double gamma,
                        NormMode norm, Matrix* de1, Matrix* de2) {
  const Eigen::Index B = e1.cols();
  if (de1) de1->setZero(e1.rows(), B);
  if (de2) de2->setZero(e2.rows(), B);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const Vector diff = e1.col(b) - e2.col(b);
    const double dist = norm == NormMode::L1 ? diff.lpNorm<1>() : diff.norm();
    const double next = (n1.col(b) - n2.col(b)).norm();
    const double delta = dist - std::abs(static_cast<double>(r1[b] - r2[b])) - gamma * next;
    if (!std::isfinite(delta)) throw NonFiniteError("non-finite embedding in the metric loss");
    loss += delta * delta;
    if (!de1 && !de2) continue;
    Vector g;
    if (norm == NormMode::L1) {
      g = diff.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
    } else {
      g = dist > 0.0 ? Vector(diff / dist) : Vector::Zero(diff.size());
    }
    g *= 2.0 * delta / static_cast<double>(B);
    if (de1) de1->col(b) = g;
    if (de2) de2->col(b) = -g;
  }
  return loss / static_cast<double>(B);
}

LossGrad phi_loss(const Mlp& phi, const Mlp& phi_bar, const FeatureTable& feats,
                  const PairBatch& pairs, double gamma, NormMode norm) {
  const auto& b1 = pairs.b1;
  const auto& b2 = pairs.b2;
  if (b1.size() != b2.size() || b1.size() == 0) throw std::invalid_argument("pair batch misaligned");
  MlpCache c1, c2;
  const Matrix e1 = phi.forward(feats.pairs(b1.s, b1.g), c1);
  const Matrix e2 = phi.forward(feats.pairs(b2.s, b2.g), c2);
  const Matrix n1 = phi_bar.forward(feats.pairs(b1.sp, b1.g));
  const Matrix n2 = phi_bar.forward(feats.pairs(b2.sp, b2.g));
  Matrix d1, d2;
  LossGrad out;
  out.loss = pair_metric_core(e1, e2, n1, n2, b1.r, b2.r, gamma, norm, &d1, &d2);
  out.grads = phi.zero_grads();
  phi.backward(c1, d1, out.grads);
  phi.backward(c2, d2, out.grads);
  return out;
}

namespace {

Matrix with_actions(const Matrix& z, std::span<const int> a, int num_actions) {
  Matrix out = Matrix::Zero(z.rows() + num_actions, z.cols());
  out.topRows(z.rows()) = z;
  for (Eigen::Index b = 0; b < z.cols(); ++b) {
    if (a[b] < 0 || a[b] >= num_actions) throw std::out_of_range("action out of range");
    out(z.rows() + a[b], b) = 1.0;
  }
  return out;
}

Matrix predicted_next(const Mlp& f, const Mlp& phi_bar, const FeatureTable& feats,
                      const TransitionBatch& b, int num_actions) {
  const Matrix z = phi_bar.forward(feats.pairs(b.s, b.g));
  return f.forward(with_actions(z, b.a, num_actions)) + z;
}

}  // namespace

LossGrad phi_dynamics_loss(const Mlp& phi, const Mlp& phi_bar, const Mlp& f,
                           const FeatureTable& feats, const PairBatch& pairs, double gamma,
                           NormMode norm, int num_actions) {
  const auto& b1 = pairs.b1;
  const auto& b2 = pairs.b2;
  if (b1.size() != b2.size() || b1.size() == 0) throw std::invalid_argument("pair batch misaligned");
  MlpCache c1, c2;
  const Matrix e1 = phi.forward(feats.pairs(b1.s, b1.g), c1);
  const Matrix e2 = phi.forward(feats.pairs(b2.s, b2.g), c2);
  const Matrix n1 = predicted_next(f, phi_bar, feats, b1, num_actions);
  const Matrix n2 = predicted_next(f, phi_bar, feats, b2, num_actions);
  Matrix d1, d2;
  LossGrad out;
  out.loss = pair_metric_core(e1, e2, n1, n2, b1.r, b2.r, gamma, norm, &d1, &d2);
  out.grads = phi.zero_grads();
  phi.backward(c1, d1, out.grads);
  phi.backward(c2, d2, out.grads);
  return out;
}

LossGrad dynamics_loss(const Mlp& f, const Mlp& phi_bar, const FeatureTable& feats,
                       const TransitionBatch& batch, int num_actions) {
  if (batch.size() == 0) throw std::invalid_argument("empty batch");
  const Matrix z = phi_bar.forward(feats.pairs(batch.s, batch.g));
  const Matrix zn = phi_bar.forward(feats.pairs(batch.sp, batch.g));
  MlpCache cache;
  const Matrix pred = f.forward(with_actions(z, batch.a, num_actions), cache);
  const Matrix res = pred - (zn - z);
  const double B = static_cast<double>(batch.size());
  LossGrad out;
  out.loss = res.squaredNorm() / B;
  out.grads = f.zero_grads();
  f.backward(cache, 2.0 * res / B, out.grads);
  return out;
}

LossGrad psi_loss(const Mlp& psi, const Mlp& phi_bar, const FeatureTable& feats,
                  const TransitionBatch& batch, bool grounding) {
  if (batch.size() == 0) throw std::invalid_argument("empty batch");
  Matrix target = phi_bar.forward(feats.pairs(batch.s, batch.g));
  if (grounding) target -= phi_bar.forward(feats.pairs(batch.g, batch.g));
  MlpCache cs, cg;
  const Matrix ps = psi.forward(feats.states(batch.s), cs);
  const Matrix pg = psi.forward(feats.states(batch.g), cg);
  const Matrix res = target - (pg - ps);
  if (!res.allFinite()) throw NonFiniteError("non-finite embedding in the analogy loss");
  const double B = static_cast<double>(batch.size());
  LossGrad out;
  out.loss = res.squaredNorm() / B;
  out.grads = psi.zero_grads();
  psi.backward(cg, -2.0 * res / B, out.grads);
  psi.backward(cs, 2.0 * res / B, out.grads);
  return out;
}

DecoderLossGrad reward_decoder_loss(const Mlp& decoder, const Mlp& phi, const FeatureTable& feats,
                                    const TransitionBatch& batch) {
  if (batch.size() == 0) throw std::invalid_argument("empty batch");
  MlpCache ca, cb, cd;
  const Matrix a = phi.forward(feats.pairs(batch.s, batch.g), ca);
  const Matrix b = phi.forward(feats.pairs(batch.sp, batch.g), cb);
  Matrix z(a.rows() + b.rows(), a.cols());
  z.topRows(a.rows()) = a;
  z.bottomRows(b.rows()) = b;
  const Matrix y = decoder.forward(z, cd);
  Matrix res(1, y.cols());
  for (Eigen::Index k = 0; k < y.cols(); ++k) res(0, k) = y(0, k) - batch.r[k];
  const double B = static_cast<double>(batch.size());
  DecoderLossGrad out;
  out.loss = res.squaredNorm() / B;
  out.decoder = decoder.zero_grads();
  out.phi = phi.zero_grads();
  const Matrix dz = decoder.backward(cd, 2.0 * res / B, out.decoder);
  phi.backward(ca, dz.topRows(a.rows()), out.phi);
  phi.backward(cb, dz.bottomRows(b.rows()), out.phi);
  return out;
}

ReprTrainer::ReprTrainer(const FeatureTable& feats, int num_actions, ReprConfig cfg, Encoders init)
    : feats_(&feats),
      num_actions_(num_actions),
      cfg_(cfg),
      enc_(std::move(init)),
      phi_opt_(enc_.phi, cfg.phi_opt),
      psi_opt_(enc_.psi, cfg.psi_opt),
      dec_opt_(enc_.decoder, cfg.decoder_opt),
      dyn_opt_(enc_.dynamics, cfg.dynamics_opt) {
  cfg_.validate();
  if (enc_.phi.input_dim() != 2 * feats.dim() || enc_.psi.input_dim() != feats.dim())
    throw ValidationError({"encoder input sizes do not match the feature dimension " +
                           std::to_string(feats.dim())});
}

ReprLosses ReprTrainer::step(const TransitionBatch& b1, Rng& rng) {
  ReprLosses losses;
  const PairBatch pairs = permute_pair_batch(b1, rng);

  LossGrad lphi = cfg_.dynamics_model
                      ? phi_dynamics_loss(enc_.phi, enc_.phi, enc_.dynamics, *feats_, pairs,
                                          cfg_.gamma, cfg_.norm, num_actions_)
                      : phi_loss(enc_.phi, enc_.phi, *feats_, pairs, cfg_.gamma, cfg_.norm);
  losses.phi = lphi.loss;
  if (cfg_.reward_decoder) {
    DecoderLossGrad ld = reward_decoder_loss(enc_.decoder, enc_.phi, *feats_, b1);
    losses.decoder = ld.loss;
    lphi.grads += ld.phi;
    adam_step(enc_.decoder, dec_opt_, ld.decoder, "reward decoder");
  }
  adam_step(enc_.phi, phi_opt_, lphi.grads, "phi");

  if (cfg_.dynamics_model) {
    LossGrad lf = dynamics_loss(enc_.dynamics, enc_.phi, *feats_, b1, num_actions_);
    losses.dynamics = lf.loss;
    adam_step(enc_.dynamics, dyn_opt_, lf.grads, "dynamics model");
  }

  LossGrad lpsi = psi_loss(enc_.psi, enc_.phi, *feats_, b1, cfg_.grounding);
  losses.psi = lpsi.loss;
  adam_step(enc_.psi, psi_opt_, lpsi.grads, "psi");
  return losses;
}

std::vector<EpochLog> train_representations(ReprTrainer& trainer, const Dataset& ds, Rng& rng) {
  std::vector<EpochLog> log;
  if (trainer.config().epochs == 0) return log;
  if (ds.size() == 0) throw ValidationError({"cannot train on an empty dataset"});
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t B = trainer.config().batch_size;
  for (int epoch = 0; epoch < trainer.config().epochs; ++epoch) {
    rng.shuffle(idx);
    ReprLosses sum;
    int batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += B) {
      const std::size_t end = std::min(idx.size(), start + B);
      const auto l = trainer.step(
          make_batch(ds, std::span<const std::size_t>(idx.data() + start, end - start)), rng);
      sum.phi += l.phi;
      sum.psi += l.psi;
      sum.decoder += l.decoder;
      sum.dynamics += l.dynamics;
      ++batches;
    }
    log.push_back({epoch, {sum.phi / batches, sum.psi / batches, sum.decoder / batches,
                           sum.dynamics / batches}});
  }
  return log;
}

Vector compose_goal(const Mlp& psi, const Mlp& phi, const FeatureTable& feats, StateId s,
                    StateId s_a, StateId g_a, bool grounding) {
  const int ss[] = {s};
  const int sa[] = {s_a};
  const int ga[] = {g_a};
  Vector out = psi.forward(feats.states(ss)).col(0) + phi.forward(feats.pairs(sa, ga)).col(0);
  if (grounding) out -= phi.forward(feats.pairs(ga, ga)).col(0);
  return out;
}

int nearest_neighbor(const Vector& query, const Matrix& candidates, std::span<const int> ids) {
  if (candidates.cols() == 0) throw std::invalid_argument("no candidates");
  if (static_cast<std::size_t>(candidates.cols()) != ids.size())
    throw std::invalid_argument("candidate ids do not match candidate columns");
  int best = -1;
  double best_d = 0.0;
  for (Eigen::Index c = 0; c < candidates.cols(); ++c) {
    const double d = (candidates.col(c) - query).squaredNorm();
    if (best < 0 || d < best_d || (d == best_d && ids[c] < best)) {
      best = ids[c];
      best_d = d;
    }
  }
  return best;
}

Matrix embed_states(const Mlp& psi, const FeatureTable& feats) { return psi.forward(feats.table()); }

void write_embeddings_csv(const std::string& path, const Encoders& enc, const FeatureTable& feats,
                          std::span<const int> pair_s, std::span<const int> pair_g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const Matrix psi = embed_states(enc.psi, feats);
  const Matrix phi = enc.phi.forward(feats.pairs(pair_s, pair_g));
  out << "state_index,goal_index";
  for (Eigen::Index k = 0; k < psi.rows(); ++k) out << ",z" << k;
  out << '\n';
  char buf[32];
  auto row = [&](int s, int g, const auto& col) {
    out << s << ',' << g;
    for (Eigen::Index k = 0; k < col.size(); ++k) {
      std::snprintf(buf, sizeof(buf), ",%.17g", col(k));
      out << buf;
    }
    out << '\n';
  };
  for (Eigen::Index s = 0; s < psi.cols(); ++s) row(static_cast<int>(s), -1, psi.col(s));
  for (Eigen::Index b = 0; b < phi.cols(); ++b) row(pair_s[b], pair_g[b], phi.col(b));
}

}  // namespace gcb
