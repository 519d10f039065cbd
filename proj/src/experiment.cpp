#include "gcb/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>

namespace gcb {

namespace {

void collect(std::vector<std::string>& errors, const std::function<void()>& check) {
  try {
    check();
  } catch (const ValidationError& e) {
    errors.insert(errors.end(), e.violations().begin(), e.violations().end());
  }
}

std::string to_string(OraclePolicy p) {
  switch (p) {
    case OraclePolicy::Behavior: return "behavior";
    case OraclePolicy::Expert: return "expert";
    case OraclePolicy::Uniform: return "uniform";
  }
  return "?";
}

}  // namespace

void ExperimentConfig::validate() const {
  std::vector<std::string> errors;
  collect(errors, [&] { env.validate(); });
  if (env.num_states() > env.state_cap)
    errors.push_back("environment has " + std::to_string(env.num_states()) +
                     " states, above the cap of " + std::to_string(env.state_cap));
  if (dataset.size < 0) errors.push_back("dataset size must be nonnegative");
  if (dataset.epsilon && !(*dataset.epsilon >= 0.0 && *dataset.epsilon <= 1.0))
    errors.push_back("dataset epsilon must lie in [0,1]");
  if (!(dataset.target_success > 0.0 && dataset.target_success <= 1.0))
    errors.push_back("target_success must lie in (0,1]");
  if (dataset.calibration_episodes < 1) errors.push_back("calibration_episodes must be positive");
  if (dataset.horizon < 1) errors.push_back("dataset horizon must be positive");
  collect(errors, [&] { repr.validate(); });
  collect(errors, [&] { rl.validate(); });
  collect(errors, [&] { eval.validate(); });
  collect(errors, [&] { oracle.form.validate(); });
  if (!(oracle.tol > 0.0)) errors.push_back("oracle tol must be positive");
  if (oracle.max_iter < 1) errors.push_back("oracle max_iter must be positive");
  if (probe.cases < 1) errors.push_back("probe cases must be positive");
  if (probe.heldout_size < 1) errors.push_back("probe heldout_size must be positive");
  if (probe.metric_pairs < 1) errors.push_back("probe metric_pairs must be positive");
  if (bounds.alphas < 0) errors.push_back("bounds alphas must be nonnegative");
  if (!(bounds.slack >= 0.0)) errors.push_back("bounds slack must be nonnegative");
  if (!errors.empty()) throw ValidationError(errors);
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json ds = {{"size", c.dataset.size},
                       {"target_success", c.dataset.target_success},
                       {"calibration_episodes", c.dataset.calibration_episodes},
                       {"horizon", c.dataset.horizon}};
  ds["epsilon"] = c.dataset.epsilon ? nlohmann::json(*c.dataset.epsilon) : nlohmann::json("auto");
  return {{"seed", c.seed},
          {"env", to_json(c.env)},
          {"dataset", ds},
          {"repr", to_json(c.repr)},
          {"rl", to_json(c.rl)},
          {"eval", to_json(c.eval)},
          {"oracle",
           {{"form", to_json(c.oracle.form)},
            {"tol", c.oracle.tol},
            {"max_iter", c.oracle.max_iter},
            {"policy", to_string(c.oracle.policy)},
            {"goals", c.oracle.goals == GoalSubset::Signature ? "signature" : "all"}}},
          {"probe",
           {{"cases", c.probe.cases},
            {"heldout_size", c.probe.heldout_size},
            {"metric_pairs", c.probe.metric_pairs}}},
          {"bounds", {{"alphas", c.bounds.alphas}, {"slack", c.bounds.slack}}}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError({"config must be a JSON object"});
  ExperimentConfig c;
  std::vector<std::string> errors;
  auto section = [&](const nlohmann::json& obj, const std::string& name,
                     const std::function<void(const std::string&, const nlohmann::json&)>& field) {
    if (!obj.is_object()) {
      errors.push_back(name + " must be a JSON object");
      return;
    }
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      try {
        field(it.key(), *it);
      } catch (const nlohmann::json::exception&) {
        errors.push_back(name + "." + it.key() + " has the wrong type");
      }
    }
  };
  auto unknown = [&](const std::string& name, const std::string& k) {
    errors.push_back("unknown field '" + name + "." + k + "'");
  };

  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = *it;
    try {
      if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "env") collect(errors, [&] { c.env = factor_spec_from_json(v); });
      else if (k == "repr") collect(errors, [&] { c.repr = repr_config_from_json(v); });
      else if (k == "rl") collect(errors, [&] { c.rl = iql_config_from_json(v); });
      else if (k == "eval") collect(errors, [&] { c.eval = eval_config_from_json(v); });
      else if (k == "dataset") {
        section(v, k, [&](const std::string& f, const nlohmann::json& x) {
          if (f == "size") c.dataset.size = x.get<int>();
          else if (f == "epsilon") {
            if (x.is_string() && x.get<std::string>() == "auto") c.dataset.epsilon.reset();
            else c.dataset.epsilon = x.get<double>();
          } else if (f == "target_success") c.dataset.target_success = x.get<double>();
          else if (f == "calibration_episodes") c.dataset.calibration_episodes = x.get<int>();
          else if (f == "horizon") c.dataset.horizon = x.get<int>();
          else unknown(k, f);
        });
      } else if (k == "oracle") {
        section(v, k, [&](const std::string& f, const nlohmann::json& x) {
          if (f == "form") collect(errors, [&] { c.oracle.form = metric_form_from_json(x); });
          else if (f == "tol") c.oracle.tol = x.get<double>();
          else if (f == "max_iter") c.oracle.max_iter = x.get<int>();
          else if (f == "policy") {
            const auto p = x.get<std::string>();
            if (p == "behavior") c.oracle.policy = OraclePolicy::Behavior;
            else if (p == "expert") c.oracle.policy = OraclePolicy::Expert;
            else if (p == "uniform") c.oracle.policy = OraclePolicy::Uniform;
            else errors.push_back("unknown oracle policy '" + p + "'");
          } else if (f == "goals") {
            const auto g = x.get<std::string>();
            if (g == "signature") c.oracle.goals = GoalSubset::Signature;
            else if (g == "all") c.oracle.goals = GoalSubset::All;
            else errors.push_back("unknown oracle goal subset '" + g + "'");
          } else unknown(k, f);
        });
      } else if (k == "probe") {
        section(v, k, [&](const std::string& f, const nlohmann::json& x) {
          if (f == "cases") c.probe.cases = x.get<int>();
          else if (f == "heldout_size") c.probe.heldout_size = x.get<int>();
          else if (f == "metric_pairs") c.probe.metric_pairs = x.get<int>();
          else unknown(k, f);
        });
      } else if (k == "bounds") {
        section(v, k, [&](const std::string& f, const nlohmann::json& x) {
          if (f == "alphas") c.bounds.alphas = x.get<int>();
          else if (f == "slack") c.bounds.slack = x.get<double>();
          else unknown(k, f);
        });
      } else if (k == "config_hash" || k == "version" || k == "resolved_epsilon") {
        // stamped by the tool when it writes a resolved config
      } else {
        errors.push_back("unknown field '" + k + "'");
      }
    } catch (const nlohmann::json::exception&) {
      errors.push_back("field '" + k + "' has the wrong type");
    }
  }
  if (!errors.empty()) throw ValidationError(errors);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError({"cannot read config " + path});
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError({"config " + path + " is not valid JSON: " + e.what()});
  }
  return experiment_config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) { return fnv1a_hex(to_json(c).dump()); }

std::uint64_t stream_seed(const ExperimentConfig& c, Stream s) {
  return Rng::derive_seed(c.seed, static_cast<std::uint64_t>(s));
}

Workspace::Workspace(const ExperimentConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  env_ = std::make_unique<DrawerGrid>(build_drawer_grid(cfg_.env));
  expert_ = std::make_unique<Expert>(*env_);
  feats_ = std::make_unique<FeatureTable>(env_->codec);
  epsilon_ = cfg_.dataset.epsilon
                 ? *cfg_.dataset.epsilon
                 : calibrate_epsilon(*expert_, cfg_.dataset.target_success,
                                     cfg_.dataset.calibration_episodes, cfg_.dataset.horizon, 0);
}

Dataset make_dataset(const Workspace& ws) {
  const auto& c = ws.config();
  Dataset ds = generate_dataset(ws.expert(), static_cast<std::size_t>(c.dataset.size), ws.epsilon(),
                                c.dataset.horizon, stream_seed(c, Stream::Dataset));
  ds.meta["config_hash"] = config_hash(c);
  return ds;
}

Dataset make_heldout(const Workspace& ws) {
  const auto& c = ws.config();
  return generate_dataset(ws.expert(), static_cast<std::size_t>(c.probe.heldout_size), ws.epsilon(),
                          c.dataset.horizon, stream_seed(c, Stream::Heldout));
}

Model init_model(const Workspace& ws) {
  const auto& c = ws.config();
  Rng enc_rng(stream_seed(c, Stream::EncoderInit));
  Rng critic_rng(stream_seed(c, Stream::CriticInit));
  Model m;
  m.encoders = init_encoders(ws.feats().dim(), kNumActions, c.repr, enc_rng);
  m.critic = init_critic(policy_input_dim(c.rl.input, ws.feats().dim(), c.repr.latent_dim),
                         kNumActions, c.rl, critic_rng);
  return m;
}

OfflineResult train_model(const Workspace& ws, const Dataset& ds) {
  const auto& c = ws.config();
  Model m = init_model(ws);
  Rng rng(stream_seed(c, Stream::Training));
  return train_offline(ds, ws.feats(), kNumActions, c.repr, c.rl, std::move(m.encoders),
                       std::move(m.critic), rng);
}

nlohmann::json training_log_json(const OfflineResult& r) {
  nlohmann::json pre = nlohmann::json::array();
  for (const auto& e : r.repr_log)
    pre.push_back({{"epoch", e.epoch},
                   {"phi", e.mean.phi},
                   {"psi", e.mean.psi},
                   {"decoder", e.mean.decoder},
                   {"dynamics", e.mean.dynamics}});
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.log)
    epochs.push_back({{"epoch", e.epoch},
                      {"phi", e.repr.phi},
                      {"psi", e.repr.psi},
                      {"decoder", e.repr.decoder},
                      {"dynamics", e.repr.dynamics},
                      {"v", e.iql.v},
                      {"q", e.iql.q}});
  return {{"repr_pretrain", pre}, {"epochs", epochs}};
}

void write_model(const std::string& path, const Model& m, const std::string& hash) {
  Model copy = m;
  nlohmann::json extra = {{"config_hash", hash},
                          {"in_mean", std::vector<double>(copy.critic.in_mean.data(),
                                                          copy.critic.in_mean.data() +
                                                              copy.critic.in_mean.size())},
                          {"in_scale", std::vector<double>(copy.critic.in_scale.data(),
                                                           copy.critic.in_scale.data() +
                                                               copy.critic.in_scale.size())}};
  write_checkpoint(path,
                   {{"phi", &copy.encoders.phi},
                    {"psi", &copy.encoders.psi},
                    {"decoder", &copy.encoders.decoder},
                    {"dynamics", &copy.encoders.dynamics},
                    {"q", &copy.critic.q},
                    {"v", &copy.critic.v},
                    {"q_target", &copy.critic.q_target}},
                   extra);
}

Model read_model(const std::string& path, std::string* hash) {
  nlohmann::json header;
  auto nets = read_checkpoint(path, &header);
  std::map<std::string, Mlp> by_name;
  for (auto& [name, net] : nets) by_name.emplace(name, std::move(net));
  Model m;
  std::vector<std::string> missing;
  auto take = [&](const std::string& name, Mlp& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) missing.push_back("checkpoint lacks net '" + name + "'");
    else dst = it->second;
  };
  take("phi", m.encoders.phi);
  take("psi", m.encoders.psi);
  take("decoder", m.encoders.decoder);
  take("dynamics", m.encoders.dynamics);
  take("q", m.critic.q);
  take("v", m.critic.v);
  take("q_target", m.critic.q_target);
  if (!missing.empty()) throw ValidationError(missing);
  const auto mean = header.value("in_mean", std::vector<double>{});
  const auto scale = header.value("in_scale", std::vector<double>{});
  m.critic.in_mean = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  m.critic.in_scale = Eigen::Map<const Vector>(scale.data(), static_cast<Eigen::Index>(scale.size()));
  if (hash) *hash = header.value("config_hash", "");
  return m;
}

GoalPolicy oracle_policy(const Workspace& ws) {
  const auto& m = ws.env().mdp;
  switch (ws.config().oracle.policy) {
    case OraclePolicy::Behavior: return ws.expert().goal_policy().epsilon_mixture(ws.epsilon());
    case OraclePolicy::Expert: return ws.expert().goal_policy();
    case OraclePolicy::Uniform:
      return GoalPolicy::uniform(m.num_states(), m.num_goals(), m.num_actions());
  }
  throw std::logic_error("unhandled oracle policy");
}

std::vector<int> oracle_goal_ks(const Workspace& ws) {
  const auto& m = ws.env().mdp;
  return ws.config().oracle.goals == GoalSubset::Signature ? signature_goal_ks(m) : all_goal_ks(m);
}

PairedMetric oracle_metric(const Workspace& ws) {
  const auto& c = ws.config().oracle;
  return gcb_fixed_point(oracle_policy(ws), ws.env().mdp, c.form, c.tol, c.max_iter,
                         oracle_goal_ks(ws));
}

int paired_index(const PairedMetric& metric, const Gcmdp& m, StateId s, StateId g) {
  const int sig = m.signature(g);
  for (int kk = 0; kk < metric.num_goals(); ++kk)
    if (m.signature(m.goal(metric.goal_ks[kk])) == sig) return metric.index(s, kk);
  return -1;
}

bool BoundsSummary::passed() const {
  if (!value.passed()) return false;
  for (const auto& r : linear)
    if (!r.passed()) return false;
  return true;
}

nlohmann::json BoundsSummary::to_json() const {
  nlohmann::json lin = nlohmann::json::array();
  for (std::size_t i = 0; i < linear.size(); ++i) {
    auto j = linear[i].to_json();
    j["alpha"] = alphas[i];
    lin.push_back(j);
  }
  return {{"value_bound", value.to_json()}, {"linear_reward_bound", lin}, {"passed", passed()}};
}

BoundsSummary verify_bounds(const Workspace& ws, const PairedMetric& metric) {
  const auto& c = ws.config();
  const auto& m = ws.env().mdp;
  const GoalPolicy pi = oracle_policy(ws);
  BoundsSummary out;
  const auto values = paired_values(m, pi, metric.goal_ks, 1e-11);
  out.value = verify_value_bound(metric, values, c.bounds.slack);
  Rng rng(stream_seed(c, Stream::Alphas));
  for (int t = 0; t < c.bounds.alphas; ++t) {
    std::vector<double> alpha(metric.num_goals());
    for (auto& a : alpha) a = rng.uniform();
    out.linear.push_back(verify_linear_reward_bound(metric, m, pi, alpha, c.bounds.slack));
    out.alphas.push_back(std::move(alpha));
  }
  return out;
}

MetricFit metric_fit(const Workspace& ws, const Encoders& enc, const PairedMetric& metric,
                     const Dataset& heldout) {
  const auto& m = ws.env().mdp;
  if (heldout.size() == 0) throw ValidationError({"held-out set is empty"});
  Rng rng(Rng::derive_seed(stream_seed(ws.config(), Stream::Probe), 2));
  std::vector<int> s1, g1, s2, g2;
  std::vector<double> oracle;
  const int want = ws.config().probe.metric_pairs;
  const int n = static_cast<int>(heldout.size());
  for (int tries = 0; static_cast<int>(oracle.size()) < want && tries < 100 * want; ++tries) {
    const auto& a = heldout.transitions[rng.uniform_int(n)];
    const auto& b = heldout.transitions[rng.uniform_int(n)];
    if (a.s == b.s && a.g == b.g) continue;
    const int i = paired_index(metric, m, a.s, a.g), j = paired_index(metric, m, b.s, b.g);
    if (i < 0 || j < 0) throw ValidationError({"oracle metric lacks a held-out goal"});
    s1.push_back(a.s);
    g1.push_back(a.g);
    s2.push_back(b.s);
    g2.push_back(b.g);
    oracle.push_back(metric(i, j));
  }
  const Matrix e1 = enc.phi.forward(ws.feats().pairs(s1, g1));
  const Matrix e2 = enc.phi.forward(ws.feats().pairs(s2, g2));
  std::vector<double> learned(oracle.size());
  for (std::size_t k = 0; k < oracle.size(); ++k)
    learned[k] = (e1.col(k) - e2.col(k)).lpNorm<1>();
  return {static_cast<int>(oracle.size()), spearman(learned, oracle)};
}

nlohmann::json ProbeReport::to_json() const {
  return {{"mode", mode}, {"cases", cases}, {"matches", matches}, {"rate", rate()}};
}

ProbeReport psi_analogy_probe(const Workspace& ws, const Encoders& enc) {
  const auto& c = ws.config();
  const auto& codec = ws.env().codec;
  const int S = codec.num_states();
  Rng rng(Rng::derive_seed(stream_seed(c, Stream::Probe), 0));
  const Matrix candidates = embed_states(enc.psi, ws.feats());
  std::vector<int> ids(S);
  std::iota(ids.begin(), ids.end(), 0);
  ProbeReport r{"psi-analogy", 0, 0};
  for (int t = 0; t < c.probe.cases; ++t) {
    const AnalogyCase a = sample_analogy(ws.expert(), rng, rng.uniform_int(S), std::nullopt, 100,
                                         c.dataset.horizon);
    const Vector z = compose_goal(enc.psi, enc.phi, ws.feats(), a.s, a.s_a, a.g_a, c.repr.grounding);
    const int nn = nearest_neighbor(z, candidates, ids);
    ++r.cases;
    if (codec.relevant_signature(nn) == codec.relevant_signature(a.g_true)) ++r.matches;
  }
  return r;
}

TaskPairs candidate_tasks(const Workspace& ws) {
  const auto& codec = ws.env().codec;
  const int horizon = ws.config().dataset.horizon;
  TaskPairs t;
  for (StateId s = 0; s < codec.num_states(); ++s)
    for (int sig : reachable_signatures(ws.env(), s, horizon))
      if (sig != codec.relevant_signature(s)) {
        t.s.push_back(s);
        t.g.push_back(scripted_goal(ws.expert(), s, sig, horizon));
      }
  return t;
}

ProbeReport phi_nn_probe(const Workspace& ws, const Encoders& enc) {
  const auto& c = ws.config();
  const auto& codec = ws.env().codec;
  if (c.env.num_colors * c.env.num_distractor_layouts < 2)
    throw ValidationError({"the phi probe needs at least two nuisance configurations"});
  const TaskPairs tasks = candidate_tasks(ws);
  const auto& cand_s = tasks.s;
  const auto& cand_g = tasks.g;
  const Matrix emb = enc.phi.forward(ws.feats().pairs(cand_s, cand_g));
  Rng rng(Rng::derive_seed(stream_seed(c, Stream::Probe), 1));
  ProbeReport r{"phi-nn", 0, 0};
  std::vector<int> pool;
  for (int t = 0; t < c.probe.cases; ++t) {
    const Task task = sample_task(ws.expert(), rng, c.dataset.horizon);
    const FactoredState fq = codec.decode(task.s0);
    pool.clear();
    for (int k = 0; k < static_cast<int>(cand_s.size()); ++k)
      if (!codec.same_nuisance(fq, codec.decode(cand_s[k]))) pool.push_back(k);
    Matrix cands(emb.rows(), static_cast<Eigen::Index>(pool.size()));
    for (std::size_t k = 0; k < pool.size(); ++k) cands.col(k) = emb.col(pool[k]);
    const int qs[] = {task.s0};
    const int qg[] = {task.g};
    const Vector q = enc.phi.forward(ws.feats().pairs(qs, qg)).col(0);
    const int k = nearest_neighbor(q, cands, pool);
    ++r.cases;
    if (task_delta(codec, cand_s[k], cand_g[k]) == task_delta(codec, task.s0, task.g)) ++r.matches;
  }
  return r;
}

EvalSummary evaluate_model(const Workspace& ws, const Model& m) {
  const auto& c = ws.config();
  const double beta = c.eval.greedy ? kGreedy : c.rl.beta_adv;
  const GoalPolicy pi =
      extract_policy(m.critic, m.encoders, ws.feats(), c.rl.input, ws.env().mdp, beta);
  EvalSummary out;
  out.standard = evaluate_goal_conditioned(pi, ws.expert(), c.eval);
  if (c.rl.input == InputMode::PsiPhi && c.env.num_colors * c.env.num_distractor_layouts >= 2)
    out.analogy = evaluate_analogy(m.critic, m.encoders, ws.feats(), c.rl, ws.expert(), c.eval);
  return out;
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = rank;
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("need two equal-length samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

}  // namespace gcb
