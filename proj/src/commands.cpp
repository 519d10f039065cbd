#include "gcb/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "gcb/experiment.hpp"

namespace gcb {

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  bool no_grounding = false;
  bool l2 = false;
  bool critic_grads = false;
  bool no_reward_decoder = false;
  bool dynamics_model = false;
  std::string metric_form;
  std::optional<int> w;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "experiment config (JSON); defaults apply when omitted");
  app->add_option("--seed", o.seed, "master seed override");
  app->add_option("--out", o.out, "output directory");
  app->add_flag("--no-grounding", o.no_grounding, "drop the grounding term of the psi loss");
  app->add_flag("--l2", o.l2, "l2 instead of l1 for the current-pair distance");
  app->add_flag("--critic-grads", o.critic_grads, "let critic gradients reach the encoders");
  app->add_flag("--no-reward-decoder", o.no_reward_decoder, "disable the reward decoder");
  app->add_flag("--dynamics-model", o.dynamics_model, "learned latent dynamics in the phi loss");
  app->add_option("--metric-form", o.metric_form, "oracle metric form")
      ->check(CLI::IsMember({"unweighted", "convex"}));
  app->add_option("--w", o.w, "Wasserstein order of the oracle")->check(CLI::IsMember({1, 2}));
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.no_grounding) c.repr.grounding = false;
  if (o.l2) c.repr.norm = NormMode::L2;
  if (o.critic_grads) c.rl.critic_grads = true;
  if (o.no_reward_decoder) c.repr.reward_decoder = false;
  if (o.dynamics_model) c.repr.dynamics_model = true;
  if (o.metric_form == "convex") c.oracle.form.mode = MetricMode::Convex;
  if (o.metric_form == "unweighted") c.oracle.form.mode = MetricMode::Unweighted;
  if (o.w) c.oracle.form.wasserstein_order = *o.w;
  c.validate();
  return c;
}

nlohmann::json stamp(nlohmann::json j, const std::string& hash) {
  j["config_hash"] = hash;
  j["version"] = kVersion;
  return j;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

fs::path prepare_out(const CommonOptions& o) {
  fs::path dir(o.out);
  fs::create_directories(dir);
  return dir;
}

void write_resolved_config(const fs::path& dir, const ExperimentConfig& c, const Workspace& ws) {
  nlohmann::json j = to_json(c);
  j["resolved_epsilon"] = ws.epsilon();
  write_json(dir / "config.json", stamp(j, config_hash(c)));
}

// Dataset lookup for commands that need one: an explicit path, the cache
// directory, or a fresh generation.
Dataset obtain_dataset(const Workspace& ws, const std::string& path) {
  if (!path.empty()) return read_dataset(path);
  const char* cache = std::getenv("GCB_CACHE_DIR");
  if (!cache || !*cache) return make_dataset(ws);
  const auto& c = ws.config();
  const nlohmann::json key = {{"seed", c.seed}, {"env", to_json(c.env)}, {"dataset", to_json(c)["dataset"]}};
  const fs::path file = fs::path(cache) / ("dataset-" + fnv1a_hex(key.dump()) + ".jsonl");
  if (fs::exists(file)) return read_dataset(file.string());
  fs::create_directories(file.parent_path());
  Dataset ds = make_dataset(ws);
  const fs::path tmp = file.string() + ".tmp";
  write_dataset(ds, tmp.string());
  fs::rename(tmp, file);
  return ds;
}

int cmd_gen_data(const CommonOptions& o) {
  const ExperimentConfig c = resolve_config(o);
  const Workspace ws(c);
  const fs::path dir = prepare_out(o);
  Dataset ds = make_dataset(ws);
  ds.meta["version"] = kVersion;
  write_dataset(ds, (dir / "dataset.jsonl").string());
  write_resolved_config(dir, c, ws);
  std::printf("dataset: %zu transitions, %d episodes, epsilon %.4f, demonstrator success %.3f\n",
              ds.size(), ds.meta["episodes"].get<int>(), ws.epsilon(),
              ds.meta["success_rate"].get<double>());
  return 0;
}

int cmd_train(const CommonOptions& o, const std::string& data) {
  const ExperimentConfig c = resolve_config(o);
  const Workspace ws(c);
  const fs::path dir = prepare_out(o);
  const Dataset ds = obtain_dataset(ws, data);
  const std::string hash = config_hash(c);
  const OfflineResult r = train_model(ws, ds);
  write_model((dir / "model.ckpt").string(), Model{r.encoders, r.critic}, hash);
  write_json(dir / "train_log.json", stamp(training_log_json(r), hash));
  write_resolved_config(dir, c, ws);
  const auto& last = r.log.empty() ? OfflineEpochLog{-1, {}, {}} : r.log.back();
  std::printf("trained %zu epochs: phi %.5f psi %.5f v %.5f q %.5f\n", r.log.size(), last.repr.phi,
              last.repr.psi, last.iql.v, last.iql.q);
  return 0;
}

int cmd_oracle_metric(const CommonOptions& o, bool csv) {
  const ExperimentConfig c = resolve_config(o);
  const Workspace ws(c);
  const fs::path dir = prepare_out(o);
  const std::string hash = config_hash(c);
  const PairedMetric d = oracle_metric(ws);
  write_resolved_config(dir, c, ws);
  write_metric(d, (dir / "metric.bin").string(), {{"config_hash", hash}, {"version", kVersion}});
  if (csv) write_metric_csv(d, (dir / "metric.csv").string());
  double worst_ratio = 0.0;
  for (std::size_t t = 2; t < d.residuals.size(); ++t)
    if (d.residuals[t - 1] > 0.0) worst_ratio = std::max(worst_ratio, d.residuals[t] / d.residuals[t - 1]);
  write_json(dir / "oracle_report.json",
             stamp({{"n", d.n()},
                    {"iterations", d.residuals.size()},
                    {"final_residual", d.residuals.empty() ? 0.0 : d.residuals.back()},
                    {"max_residual_ratio", worst_ratio},
                    {"contraction", c.oracle.form.contraction(ws.env().mdp.discount())},
                    {"residuals", d.residuals}},
                   hash));
  std::printf("oracle metric: n=%d, %zu iterations, max residual ratio %.6f\n", d.n(),
              d.residuals.size(), worst_ratio);
  return 0;
}

int cmd_verify_bounds(const CommonOptions& o, const std::string& metric_path) {
  const ExperimentConfig c = resolve_config(o);
  const Workspace ws(c);
  const fs::path dir = prepare_out(o);
  const PairedMetric d = read_metric(metric_path);
  if (d.num_states != ws.env().mdp.num_states())
    throw ValidationError({"metric has " + std::to_string(d.num_states) +
                           " states, the environment has " +
                           std::to_string(ws.env().mdp.num_states())});
  const BoundsSummary b = verify_bounds(ws, d);
  write_resolved_config(dir, c, ws);
  write_json(dir / "bounds.json", stamp(b.to_json(), config_hash(c)));
  std::printf("value bound: %lld pairs, %lld violations, max excess %.3e; linear bounds: %zu checked -> %s\n",
              b.value.pairs_checked, b.value.violations, b.value.max_violation, b.linear.size(),
              b.passed() ? "pass" : "FAIL");
  if (!b.passed() && b.value.worst_i >= 0)
    std::printf("worst pair: %d %d\n", b.value.worst_i, b.value.worst_j);
  return b.passed() ? 0 : 1;
}

int cmd_probe(const CommonOptions& o, const std::string& ckpt, const std::string& mode) {
  const ExperimentConfig c = resolve_config(o);
  const Workspace ws(c);
  const fs::path dir = prepare_out(o);
  const std::string hash = config_hash(c);
  const Model m = read_model(ckpt);
  write_resolved_config(dir, c, ws);
  if (mode == "embed-dump") {
    const TaskPairs t = candidate_tasks(ws);
    write_embeddings_csv((dir / "embeddings.csv").string(), m.encoders, ws.feats(), t.s, t.g);
    std::printf("embeddings: %d psi rows, %zu phi rows\n", ws.feats().num_states(), t.s.size());
    return 0;
  }
  const ProbeReport r =
      mode == "phi-nn" ? phi_nn_probe(ws, m.encoders) : psi_analogy_probe(ws, m.encoders);
  write_json(dir / ("probe_" + mode + ".json"), stamp(r.to_json(), hash));
  std::printf("%s: %d/%d matched (%.3f)\n", mode.c_str(), r.matches, r.cases, r.rate());
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& ckpt, const std::string& mode,
             const std::string& policy) {
  const ExperimentConfig c = resolve_config(o);
  const Workspace ws(c);
  const fs::path dir = prepare_out(o);
  const std::string hash = config_hash(c);
  EvalReport r;
  if (mode == "standard") {
    const auto& mdp = ws.env().mdp;
    if (policy == "oracle") {
      r = evaluate_goal_conditioned(ws.expert().goal_policy(), ws.expert(), c.eval);
    } else if (policy == "uniform") {
      r = evaluate_goal_conditioned(
          GoalPolicy::uniform(mdp.num_states(), mdp.num_goals(), mdp.num_actions()), ws.expert(),
          c.eval);
    } else {
      if (ckpt.empty()) throw ValidationError({"--checkpoint is required for the learned policy"});
      const Model m = read_model(ckpt);
      const double beta = c.eval.greedy ? kGreedy : c.rl.beta_adv;
      r = evaluate_goal_conditioned(
          extract_policy(m.critic, m.encoders, ws.feats(), c.rl.input, mdp, beta), ws.expert(),
          c.eval);
    }
  } else {
    if (policy != "learned") throw ValidationError({"analogy evaluation needs the learned policy"});
    if (ckpt.empty()) throw ValidationError({"--checkpoint is required for analogy evaluation"});
    const Model m = read_model(ckpt);
    r = evaluate_analogy(m.critic, m.encoders, ws.feats(), c.rl, ws.expert(), c.eval);
  }
  write_resolved_config(dir, c, ws);
  nlohmann::json j = r.to_json(hash);
  j["policy"] = policy;
  j["input"] = to_string(c.rl.input);
  j["version"] = kVersion;
  write_json(dir / ("eval_" + mode + ".json"), j);
  std::printf("%s success %.3f +- %.3f over %zu seeds\n", mode.c_str(), r.success_rate, r.stderr_,
              r.per_seed.size());
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Goal-conditioned bisimulation experiments"};
  app.require_subcommand(1);
  CommonOptions o;
  std::string data, metric, ckpt, mode, policy = "learned";
  bool csv = false;

  auto* gen = app.add_subcommand("gen-data", "generate a noisy-expert dataset");
  add_common(gen, o);
  auto* train = app.add_subcommand("train", "train encoders and critic");
  add_common(train, o);
  train->add_option("--data", data, "dataset file; generated (or cached) when omitted");
  auto* oracle = app.add_subcommand("oracle-metric", "compute the exact metric fixed point");
  add_common(oracle, o);
  oracle->add_flag("--csv", csv, "also write the metric as CSV");
  auto* bounds = app.add_subcommand("verify-bounds", "check value and linear-reward bounds");
  add_common(bounds, o);
  bounds->add_option("--metric", metric, "metric file from oracle-metric")->required();
  auto* probe = app.add_subcommand("probe", "representation probes and embedding dumps");
  add_common(probe, o);
  probe->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  probe->add_option("--mode", mode, "probe mode")
      ->required()
      ->check(CLI::IsMember({"phi-nn", "psi-analogy", "embed-dump"}));
  auto* eval = app.add_subcommand("eval", "roll out the extracted policy");
  add_common(eval, o);
  eval->add_option("--checkpoint", ckpt, "model checkpoint");
  eval->add_option("--mode", mode, "evaluation mode")
      ->required()
      ->check(CLI::IsMember({"standard", "analogy"}));
  eval->add_option("--policy", policy, "policy under evaluation")
      ->check(CLI::IsMember({"learned", "oracle", "uniform"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (train->parsed()) return cmd_train(o, data);
    if (oracle->parsed()) return cmd_oracle_metric(o, csv);
    if (bounds->parsed()) return cmd_verify_bounds(o, metric);
    if (probe->parsed()) return cmd_probe(o, ckpt, mode);
    if (eval->parsed()) return cmd_eval(o, ckpt, mode, policy);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "validation error:\n");
    for (const auto& v : e.violations()) std::fprintf(stderr, "  - %s\n", v.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}

}  // namespace gcb
