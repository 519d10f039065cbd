#include "gcb/offline_rl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gcb {

std::string to_string(InputMode m) {
  switch (m) {
    case InputMode::PsiPsi: return "psi-psi";
    case InputMode::PsiPhi: return "psi-phi";
    case InputMode::Raw: return "raw";
  }
  return "?";
}

InputMode input_mode_from_string(const std::string& s) {
  if (s == "psi-psi") return InputMode::PsiPsi;
  if (s == "psi-phi") return InputMode::PsiPhi;
  if (s == "raw") return InputMode::Raw;
  throw ValidationError({"unknown policy input mode '" + s + "'"});
}

void IqlConfig::validate() const {
  std::vector<std::string> errors;
  if (hidden < 1) errors.push_back("critic hidden width must be positive");
  if (hidden_layers < 0) errors.push_back("critic hidden_layers must be nonnegative");
  if (!(gamma > 0.0 && gamma < 1.0)) errors.push_back("critic gamma outside (0,1)");
  if (!(quantile > 0.0 && quantile < 1.0)) errors.push_back("quantile outside (0,1)");
  if (!(tau > 0.0 && tau <= 1.0)) errors.push_back("target rate tau outside (0,1]");
  if (!(beta_adv >= 0.0)) errors.push_back("beta_adv must be nonnegative");
  if (epochs < 0) errors.push_back("critic epochs must be nonnegative");
  if (batch_size < 1) errors.push_back("critic batch_size must be positive");
  if (!(norm_momentum > 0.0 && norm_momentum <= 1.0)) errors.push_back("norm_momentum outside (0,1]");
  if (critic_grads && input == InputMode::Raw)
    errors.push_back("critic_grads needs a learned input mode");
  for (const AdamConfig* c : {&q_opt, &v_opt})
    if (!(c->lr > 0.0) || c->weight_decay < 0.0) errors.push_back("invalid critic optimizer");
  if (!errors.empty()) throw ValidationError(errors);
}

nlohmann::json to_json(const IqlConfig& c) {
  return {{"input", to_string(c.input)},
          {"hidden", c.hidden},
          {"hidden_layers", c.hidden_layers},
          {"gamma", c.gamma},
          {"quantile", c.quantile},
          {"tau", c.tau},
          {"beta_adv", c.beta_adv},
          {"critic_grads", c.critic_grads},
          {"concurrent", c.concurrent},
          {"normalize_inputs", c.normalize_inputs},
          {"norm_momentum", c.norm_momentum},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"q_opt", to_json(c.q_opt)},
          {"v_opt", to_json(c.v_opt)}};
}

namespace {

void read_adam(const nlohmann::json& j, AdamConfig& c, std::vector<std::string>& errors) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "lr") c.lr = it->get<double>();
    else if (k == "beta1") c.beta1 = it->get<double>();
    else if (k == "beta2") c.beta2 = it->get<double>();
    else if (k == "eps") c.eps = it->get<double>();
    else if (k == "weight_decay") c.weight_decay = it->get<double>();
    else errors.push_back("unknown optimizer field '" + k + "'");
  }
}

}  // namespace

IqlConfig iql_config_from_json(const nlohmann::json& j) {
  IqlConfig c;
  std::vector<std::string> errors;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "input") c.input = input_mode_from_string(it->get<std::string>());
      else if (k == "hidden") c.hidden = it->get<int>();
      else if (k == "hidden_layers") c.hidden_layers = it->get<int>();
      else if (k == "gamma") c.gamma = it->get<double>();
      else if (k == "quantile") c.quantile = it->get<double>();
      else if (k == "tau") c.tau = it->get<double>();
      else if (k == "beta_adv") c.beta_adv = it->get<double>();
      else if (k == "critic_grads") c.critic_grads = it->get<bool>();
      else if (k == "concurrent") c.concurrent = it->get<bool>();
      else if (k == "normalize_inputs") c.normalize_inputs = it->get<bool>();
      else if (k == "norm_momentum") c.norm_momentum = it->get<double>();
      else if (k == "epochs") c.epochs = it->get<int>();
      else if (k == "batch_size") c.batch_size = it->get<int>();
      else if (k == "q_opt") read_adam(*it, c.q_opt, errors);
      else if (k == "v_opt") read_adam(*it, c.v_opt, errors);
      else errors.push_back("unknown critic field '" + k + "'");
    } catch (const nlohmann::json::exception&) {
      errors.push_back("critic field '" + k + "' has the wrong type");
    }
  }
  if (!errors.empty()) throw ValidationError(errors);
  c.validate();
  return c;
}

int policy_input_dim(InputMode mode, int feature_dim, int latent_dim) {
  return mode == InputMode::Raw ? 2 * feature_dim : 2 * latent_dim;
}

namespace {

// Policy inputs with the encoder caches needed to push dL/dx back into
// the encoders.
struct InputTape {
  Matrix x;
  MlpCache first, second;
};

InputTape tape_input(InputMode mode, const Encoders& enc, const FeatureTable& feats,
                     std::span<const int> s, std::span<const int> g) {
  InputTape t;
  Matrix top, bottom;
  switch (mode) {
    case InputMode::Raw:
      t.x = feats.pairs(s, g);
      return t;
    case InputMode::PsiPsi:
      top = enc.psi.forward(feats.states(s), t.first);
      bottom = enc.psi.forward(feats.states(g), t.second);
      break;
    case InputMode::PsiPhi:
      top = enc.psi.forward(feats.states(s), t.first);
      bottom = enc.phi.forward(feats.pairs(s, g), t.second);
      break;
  }
  t.x.resize(top.rows() + bottom.rows(), top.cols());
  t.x.topRows(top.rows()) = top;
  t.x.bottomRows(bottom.rows()) = bottom;
  return t;
}

Matrix stack(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

Matrix with_action(const Matrix& x, std::span<const int> a, int num_actions) {
  Matrix out = Matrix::Zero(x.rows() + num_actions, x.cols());
  out.topRows(x.rows()) = x;
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    if (a[b] < 0 || a[b] >= num_actions) throw std::out_of_range("action out of range");
    out(x.rows() + a[b], b) = 1.0;
  }
  return out;
}

std::vector<int> hidden_sizes(int in, int out, const IqlConfig& cfg) {
  std::vector<int> v{in};
  for (int l = 0; l < cfg.hidden_layers; ++l) v.push_back(cfg.hidden);
  v.push_back(out);
  return v;
}

}  // namespace

Matrix policy_input(InputMode mode, const Encoders& enc, const FeatureTable& feats,
                    std::span<const int> s, std::span<const int> g) {
  switch (mode) {
    case InputMode::Raw: return feats.pairs(s, g);
    case InputMode::PsiPsi:
      return stack(enc.psi.forward(feats.states(s)), enc.psi.forward(feats.states(g)));
    case InputMode::PsiPhi:
      return stack(enc.psi.forward(feats.states(s)), enc.phi.forward(feats.pairs(s, g)));
  }
  return {};
}

Critic init_critic(int input_dim, int num_actions, const IqlConfig& cfg, Rng& rng) {
  Critic c;
  c.q = Mlp::random(hidden_sizes(input_dim + num_actions, 1, cfg), rng);
  c.v = Mlp::random(hidden_sizes(input_dim, 1, cfg), rng);
  c.q_target = c.q;
  return c;
}

Matrix Critic::normalize(const Matrix& x) const {
  if (in_mean.size() == 0) return x;
  if (in_mean.size() != x.rows()) throw ValidationError({"input statistics have the wrong size"});
  return ((x.colwise() - in_mean).array().colwise() * in_scale.array()).matrix();
}

void Critic::track_inputs(const Matrix& x, double momentum) {
  constexpr double kVarFloor = 1e-6;
  const Vector mean = x.rowwise().mean();
  const Vector var = (x.colwise() - mean).array().square().rowwise().mean();
  if (in_mean.size() == 0) {
    in_mean = mean;
    in_scale = (var.array() + kVarFloor).rsqrt();
    return;
  }
  const Vector old_var = (in_scale.array().square().inverse() - kVarFloor).max(0.0);
  in_mean = (1.0 - momentum) * in_mean + momentum * mean;
  in_scale = ((1.0 - momentum) * old_var + momentum * var).array().max(0.0).unaryExpr(
      [](double v) { return 1.0 / std::sqrt(v + kVarFloor); });
}

Matrix q_values(const Mlp& q, const Matrix& x, int num_actions) {
  const Eigen::Index B = x.cols();
  Matrix in = Matrix::Zero(x.rows() + num_actions, B * num_actions);
  for (Eigen::Index b = 0; b < B; ++b)
    for (int a = 0; a < num_actions; ++a) {
      const Eigen::Index c = b * num_actions + a;
      in.col(c).head(x.rows()) = x.col(b);
      in(x.rows() + a, c) = 1.0;
    }
  const Matrix out = q.forward(in);
  return Eigen::Map<const Matrix>(out.data(), num_actions, B);
}

double expectile_loss(const Matrix& u, double tau, Matrix* du) {
  const double n = static_cast<double>(u.size());
  double loss = 0.0;
  if (du) du->resize(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double x = u.data()[i];
    const double w = x < 0.0 ? 1.0 - tau : tau;
    loss += w * x * x;
    if (du) du->data()[i] = 2.0 * w * x / n;
  }
  return loss / n;
}

void soft_update(Mlp& target, const Mlp& online, double tau) {
  if (target.sizes() != online.sizes()) throw std::invalid_argument("target shape differs");
  for (int l = 0; l < target.num_layers(); ++l) {
    auto& t = target.layers()[l];
    const auto& o = online.layers()[l];
    t.W = (1.0 - tau) * t.W + tau * o.W;
    t.b = (1.0 - tau) * t.b + tau * o.b;
  }
}

IqlLearner::IqlLearner(int num_actions, IqlConfig cfg, Critic init)
    : num_actions_(num_actions),
      cfg_(cfg),
      critic_(std::move(init)),
      q_opt_(critic_.q, cfg.q_opt),
      v_opt_(critic_.v, cfg.v_opt) {
  cfg_.validate();
  if (critic_.q.sizes() != critic_.q_target.sizes())
    throw ValidationError({"target critic shape differs from the online critic"});
  if (critic_.q.input_dim() != critic_.v.input_dim() + num_actions)
    throw ValidationError({"Q and V input sizes are inconsistent"});
}

IqlLosses IqlLearner::update(const Matrix& x_raw, std::span<const int> a, std::span<const int> r,
                             std::span<const int> terminal, const Matrix& xp_raw, Matrix* dx) {
  const Eigen::Index B = x_raw.cols();
  if (B == 0) throw std::invalid_argument("empty critic batch");
  if (x_raw.rows() != critic_.v.input_dim() || xp_raw.rows() != x_raw.rows() || xp_raw.cols() != B)
    throw ValidationError({"critic input has " + std::to_string(x_raw.rows()) + " rows, expected " +
                           std::to_string(critic_.v.input_dim())});
  if (cfg_.normalize_inputs) critic_.track_inputs(x_raw, cfg_.norm_momentum);
  const Matrix x = critic_.normalize(x_raw);
  const Matrix xp = critic_.normalize(xp_raw);
  IqlLosses out;
  const Matrix xa = with_action(x, a, num_actions_);
  if (dx) dx->setZero(x.rows(), B);

  // V-step
  {
    const Matrix qt = critic_.q_target.forward(xa);
    MlpCache cache;
    const Matrix v = critic_.v.forward(x, cache);
    Matrix du;
    out.v = expectile_loss(qt - v, cfg_.quantile, &du);
    MlpGrads g = critic_.v.zero_grads();
    const Matrix dvx = critic_.v.backward(cache, -du, g);
    if (dx) *dx += dvx;
    adam_step(critic_.v, v_opt_, g, "value");
  }

  // Q-step
  {
    const Matrix vn = critic_.v.forward(xp);
    Matrix y(1, B);
    for (Eigen::Index b = 0; b < B; ++b)
      y(0, b) = r[b] + (terminal[b] ? 0.0 : cfg_.gamma * vn(0, b));
    if (!y.allFinite()) throw NonFiniteError("non-finite critic targets");
    MlpCache cache;
    const Matrix q = critic_.q.forward(xa, cache);
    const Matrix res = q - y;
    out.q = res.squaredNorm() / static_cast<double>(B);
    MlpGrads g = critic_.q.zero_grads();
    const Matrix dxa = critic_.q.backward(cache, 2.0 * res / static_cast<double>(B), g);
    if (dx) *dx += dxa.topRows(x.rows());
    adam_step(critic_.q, q_opt_, g, "critic");
  }

  soft_update(critic_.q_target, critic_.q, cfg_.tau);
  if (dx && critic_.in_scale.size() > 0) *dx = (dx->array().colwise() * critic_.in_scale.array()).matrix();
  return out;
}

Matrix action_probabilities(const Critic& critic, const Matrix& x_raw, int num_actions, double beta) {
  const Matrix x = critic.normalize(x_raw);
  const Matrix q = q_values(critic.q, x, num_actions);
  const Matrix v = critic.v.forward(x);
  Matrix p = Matrix::Zero(num_actions, x.cols());
  for (Eigen::Index b = 0; b < x.cols(); ++b) {
    if (std::isinf(beta)) {
      int best = 0;
      for (int a = 1; a < num_actions; ++a)
        if (q(a, b) > q(best, b)) best = a;
      p(best, b) = 1.0;
      continue;
    }
    Vector adv = beta * (q.col(b).array() - v(0, b)).matrix();
    adv.array() -= adv.maxCoeff();
    const Vector e = adv.array().exp();
    p.col(b) = e / e.sum();
  }
  return p;
}

GoalPolicy extract_policy(const Critic& critic, const Encoders& enc, const FeatureTable& feats,
                          InputMode mode, const Gcmdp& m, double beta) {
  const int S = m.num_states(), A = m.num_actions();
  GoalPolicy pi(S, m.num_goals(), A);
  std::vector<int> states(S), goal(S);
  std::iota(states.begin(), states.end(), 0);
  for (int k = 0; k < m.num_goals(); ++k) {
    std::fill(goal.begin(), goal.end(), m.goal(k));
    const Matrix p = action_probabilities(critic, policy_input(mode, enc, feats, states, goal), A, beta);
    for (int s = 0; s < S; ++s) {
      auto row = pi.row(s, k);
      for (int a = 0; a < A; ++a) row[a] = p(a, s);
    }
  }
  return pi;
}

namespace {

// Pushes dL/dx back into the encoders feeding the policy input.
void encoder_backward(InputMode mode, Encoders& enc, const InputTape& tape, const Matrix& dx,
                      AdamState& psi_opt, AdamState& phi_opt) {
  const Eigen::Index k = enc.psi.output_dim();
  MlpGrads gpsi = enc.psi.zero_grads();
  enc.psi.backward(tape.first, dx.topRows(k), gpsi);
  if (mode == InputMode::PsiPsi) {
    enc.psi.backward(tape.second, dx.bottomRows(k), gpsi);
  } else {
    MlpGrads gphi = enc.phi.zero_grads();
    enc.phi.backward(tape.second, dx.bottomRows(k), gphi);
    adam_step(enc.phi, phi_opt, gphi, "phi (critic)");
  }
  adam_step(enc.psi, psi_opt, gpsi, "psi (critic)");
}

IqlLosses critic_step(IqlLearner& learner, InputMode mode, Encoders& enc, const FeatureTable& feats,
                      const TransitionBatch& b, AdamState& psi_opt, AdamState& phi_opt) {
  const InputTape tape = tape_input(mode, enc, feats, b.s, b.g);
  const Matrix xp = policy_input(mode, enc, feats, b.sp, b.g);
  if (!learner.config().critic_grads) return learner.update(tape.x, b.a, b.r, b.r, xp);
  Matrix dx;
  const IqlLosses l = learner.update(tape.x, b.a, b.r, b.r, xp, &dx);
  encoder_backward(mode, enc, tape, dx, psi_opt, phi_opt);
  return l;
}

}  // namespace

OfflineResult train_offline(const Dataset& ds, const FeatureTable& feats, int num_actions,
                            const ReprConfig& rcfg, const IqlConfig& icfg, Encoders enc,
                            Critic critic, Rng& rng) {
  icfg.validate();
  const int in_dim = policy_input_dim(icfg.input, feats.dim(), rcfg.latent_dim);
  if (critic.v.input_dim() != in_dim)
    throw ValidationError({"critic expects inputs of size " + std::to_string(critic.v.input_dim()) +
                           " but input mode " + to_string(icfg.input) + " gives " +
                           std::to_string(in_dim)});
  ReprTrainer trainer(feats, num_actions, rcfg, std::move(enc));
  IqlLearner learner(num_actions, icfg, std::move(critic));
  AdamState psi_opt(trainer.encoders().psi, rcfg.psi_opt);
  AdamState phi_opt(trainer.encoders().phi, rcfg.phi_opt);

  OfflineResult out;
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);

  auto run_epochs = [&](int epochs, std::size_t B, bool with_repr) {
    if (epochs > 0 && ds.size() == 0) throw ValidationError({"cannot train on an empty dataset"});
    for (int epoch = 0; epoch < epochs; ++epoch) {
      rng.shuffle(idx);
      OfflineEpochLog log{epoch, {}, {}};
      int batches = 0;
      for (std::size_t start = 0; start < idx.size(); start += B) {
        const std::size_t end = std::min(idx.size(), start + B);
        const TransitionBatch b =
            make_batch(ds, std::span<const std::size_t>(idx.data() + start, end - start));
        if (with_repr) {
          const ReprLosses rl = trainer.step(b, rng);
          log.repr.phi += rl.phi;
          log.repr.psi += rl.psi;
          log.repr.decoder += rl.decoder;
          log.repr.dynamics += rl.dynamics;
        }
        const IqlLosses il =
            critic_step(learner, icfg.input, trainer.encoders(), feats, b, psi_opt, phi_opt);
        log.iql.v += il.v;
        log.iql.q += il.q;
        ++batches;
      }
      log.repr.phi /= batches;
      log.repr.psi /= batches;
      log.repr.decoder /= batches;
      log.repr.dynamics /= batches;
      log.iql.v /= batches;
      log.iql.q /= batches;
      out.log.push_back(log);
    }
  };

  if (icfg.concurrent) {
    run_epochs(rcfg.epochs, static_cast<std::size_t>(rcfg.batch_size), true);
  } else {
    out.repr_log = train_representations(trainer, ds, rng);
    run_epochs(icfg.epochs, static_cast<std::size_t>(icfg.batch_size), false);
  }
  out.encoders = trainer.encoders();
  out.critic = learner.critic();
  return out;
}

void EvalConfig::validate() const {
  std::vector<std::string> errors;
  if (episodes < 1) errors.push_back("eval episodes must be positive");
  if (horizon < 1) errors.push_back("eval horizon must be positive");
  if (seeds < 1) errors.push_back("eval seeds must be positive");
  if (!errors.empty()) throw ValidationError(errors);
}

nlohmann::json to_json(const EvalConfig& c) {
  return {{"episodes", c.episodes},
          {"horizon", c.horizon},
          {"seeds", c.seeds},
          {"seed", c.seed},
          {"rule", c.rule == SuccessRule::AnyStep ? "any-step" : "final"},
          {"conditioning", c.conditioning == AnalogyConditioning::Shadow ? "shadow" : "static"},
          {"greedy", c.greedy}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  std::vector<std::string> errors;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "episodes") c.episodes = it->get<int>();
      else if (k == "horizon") c.horizon = it->get<int>();
      else if (k == "seeds") c.seeds = it->get<int>();
      else if (k == "seed") c.seed = it->get<std::uint64_t>();
      else if (k == "rule") {
        const auto v = it->get<std::string>();
        if (v == "any-step") c.rule = SuccessRule::AnyStep;
        else if (v == "final") c.rule = SuccessRule::Final;
        else errors.push_back("unknown success rule '" + v + "'");
      } else if (k == "conditioning") {
        const auto v = it->get<std::string>();
        if (v == "shadow") c.conditioning = AnalogyConditioning::Shadow;
        else if (v == "static") c.conditioning = AnalogyConditioning::Static;
        else errors.push_back("unknown analogy conditioning '" + v + "'");
      } else if (k == "greedy") c.greedy = it->get<bool>();
      else errors.push_back("unknown eval field '" + k + "'");
    } catch (const nlohmann::json::exception&) {
      errors.push_back("eval field '" + k + "' has the wrong type");
    }
  }
  if (!errors.empty()) throw ValidationError(errors);
  c.validate();
  return c;
}

nlohmann::json EvalReport::to_json(const std::string& config_hash) const {
  nlohmann::json j = {{"mode", mode},
                      {"episodes", episodes},
                      {"horizon", horizon},
                      {"success_rate", success_rate},
                      {"stderr", stderr_},
                      {"seeds", seeds},
                      {"per_seed", per_seed}};
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  return j;
}

EvalReport summarize(std::string mode, int episodes, int horizon, std::vector<std::uint64_t> seeds,
                     std::vector<double> per_seed) {
  EvalReport r;
  r.mode = std::move(mode);
  r.episodes = episodes;
  r.horizon = horizon;
  r.seeds = std::move(seeds);
  r.per_seed = std::move(per_seed);
  const double n = static_cast<double>(r.per_seed.size());
  if (n > 0) r.success_rate = std::accumulate(r.per_seed.begin(), r.per_seed.end(), 0.0) / n;
  if (n > 1) {
    double ss = 0.0;
    for (double x : r.per_seed) ss += (x - r.success_rate) * (x - r.success_rate);
    r.stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return r;
}

EvalReport pool_runs(const std::vector<EvalReport>& runs, std::vector<std::uint64_t> train_seeds) {
  if (runs.empty()) throw std::invalid_argument("no runs to pool");
  std::vector<double> rates;
  int episodes = 0;
  for (const auto& r : runs) {
    rates.push_back(r.success_rate);
    episodes += r.episodes * static_cast<int>(r.per_seed.size());
  }
  return summarize(runs.front().mode, episodes, runs.front().horizon, std::move(train_seeds),
                   std::move(rates));
}

namespace {

ActionId sample_action(std::span<const double> row, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  ActionId last = 0;
  for (std::size_t a = 0; a < row.size(); ++a) {
    if (row[a] <= 0.0) continue;
    acc += row[a];
    last = static_cast<ActionId>(a);
    if (u < acc) return last;
  }
  return last;
}

// Rolls a per-state action table from s; returns whether it succeeded.
template <typename RowFn>
bool rollout(const DrawerGrid& env, StateId s, StateId g, const EvalConfig& cfg, RowFn row,
             Rng& rng) {
  for (int t = 0; t < cfg.horizon; ++t) {
    s = env_step(env, s, sample_action(row(s), rng), rng);
    if (cfg.rule == SuccessRule::AnyStep && env.mdp.matches(s, g)) return true;
  }
  return cfg.rule == SuccessRule::Final && env.mdp.matches(s, g);
}

}  // namespace

EvalReport evaluate_goal_conditioned(const GoalPolicy& pi, const Expert& expert,
                                     const EvalConfig& cfg) {
  cfg.validate();
  const auto& env = expert.env();
  pi.validate_for(env.mdp);
  std::vector<std::uint64_t> seeds;
  std::vector<double> rates;
  for (int j = 0; j < cfg.seeds; ++j) {
    const std::uint64_t seed = Rng::derive_seed(cfg.seed, static_cast<std::uint64_t>(j));
    int ok = 0;
    for (int ep = 0; ep < cfg.episodes; ++ep) {
      Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(ep)));
      const Task task = sample_task(expert, rng, cfg.horizon);
      const int k = env.mdp.goal_index(task.g);
      ok += rollout(env, task.s0, task.g, cfg, [&](StateId s) { return pi.row(s, k); }, rng);
    }
    seeds.push_back(seed);
    rates.push_back(static_cast<double>(ok) / cfg.episodes);
  }
  return summarize("standard", cfg.episodes, cfg.horizon, std::move(seeds), std::move(rates));
}

EvalReport evaluate_analogy(const Critic& critic, const Encoders& enc, const FeatureTable& feats,
                            const IqlConfig& icfg, const Expert& expert, const EvalConfig& cfg) {
  cfg.validate();
  if (icfg.input != InputMode::PsiPhi)
    throw ValidationError({"analogy evaluation needs a psi-phi policy, got " + to_string(icfg.input)});
  const auto& env = expert.env();
  const int S = env.codec.num_states(), A = env.mdp.num_actions();
  const double beta = cfg.greedy ? kGreedy : icfg.beta_adv;
  std::vector<int> states(S);
  std::iota(states.begin(), states.end(), 0);
  const Matrix psi_all = enc.psi.forward(feats.table());

  std::vector<std::uint64_t> seeds;
  std::vector<double> rates;
  std::vector<int> shadow(S), goal(S);
  for (int j = 0; j < cfg.seeds; ++j) {
    const std::uint64_t seed = Rng::derive_seed(cfg.seed, static_cast<std::uint64_t>(j));
    int ok = 0;
    for (int ep = 0; ep < cfg.episodes; ++ep) {
      Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(ep)));
      const StateId s0 = rng.uniform_int(S);
      const AnalogyCase c = sample_analogy(expert, rng, s0, std::nullopt, 100, cfg.horizon);
      const FactoredState fa = env.codec.decode(c.s_a);
      for (int s = 0; s < S; ++s) {
        if (cfg.conditioning == AnalogyConditioning::Static) {
          shadow[s] = c.s_a;
        } else {
          FactoredState f = env.codec.decode(s);
          f.color = fa.color;
          f.distractor_layout = fa.distractor_layout;
          shadow[s] = env.codec.encode(f);
        }
        goal[s] = c.g_a;
      }
      const Matrix x = stack(psi_all, enc.phi.forward(feats.pairs(shadow, goal)));
      const Matrix p = action_probabilities(critic, x, A, beta);
      ok += rollout(env, c.s, c.g_true, cfg,
                    [&](StateId s) {
                      return std::span<const double>(p.col(s).data(), static_cast<std::size_t>(A));
                    },
                    rng);
    }
    seeds.push_back(seed);
    rates.push_back(static_cast<double>(ok) / cfg.episodes);
  }
  return summarize("analogy", cfg.episodes, cfg.horizon, std::move(seeds), std::move(rates));
}

}  // namespace gcb
