#include "gcb/envs.hpp"

#include <cstdio>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

namespace gcb {

void FactorSpec::validate() const {
  std::vector<std::string> errors;
  if (grid_size < 2) errors.push_back("grid_size must be >= 2");
  if (drawer_levels < 1) errors.push_back("drawer_levels must be >= 1");
  if (num_colors < 1) errors.push_back("num_colors must be >= 1");
  if (num_distractor_layouts < 1) errors.push_back("num_distractor_layouts must be >= 1");
  if (!(slip >= 0.0 && slip < 1.0)) errors.push_back("slip must lie in [0,1)");
  if (state_cap < 1) errors.push_back("state_cap must be positive");
  if (!(discount > 0.0 && discount < 1.0)) errors.push_back("discount outside (0,1)");
  if (errors.empty()) {
    long long n = 1LL * grid_size * grid_size * (drawer_levels + 1) * (has_button ? 4 : 1) *
                  num_colors * num_distractor_layouts;
    if (n > state_cap)
      errors.push_back("spec too large: " + std::to_string(n) + " states exceeds cap " +
                       std::to_string(state_cap));
  }
  if (!errors.empty()) throw ValidationError(errors);
}

int FactorSpec::num_states() const {
  return grid_size * grid_size * (drawer_levels + 1) * (has_button ? 4 : 1) * num_colors *
         num_distractor_layouts;
}

nlohmann::json to_json(const FactorSpec& s) {
  return {{"grid_size", s.grid_size},
          {"drawer_levels", s.drawer_levels},
          {"has_button", s.has_button},
          {"num_colors", s.num_colors},
          {"num_distractor_layouts", s.num_distractor_layouts},
          {"slip", s.slip},
          {"state_cap", s.state_cap},
          {"discount", s.discount},
          {"projection", to_string(s.projection)}};
}

FactorSpec factor_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError({"env config must be a JSON object"});
  FactorSpec s;
  std::vector<std::string> errors;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "grid_size") s.grid_size = it->get<int>();
      else if (k == "drawer_levels") s.drawer_levels = it->get<int>();
      else if (k == "has_button") s.has_button = it->get<bool>();
      else if (k == "num_colors") s.num_colors = it->get<int>();
      else if (k == "num_distractor_layouts") s.num_distractor_layouts = it->get<int>();
      else if (k == "slip") s.slip = it->get<double>();
      else if (k == "state_cap") s.state_cap = it->get<int>();
      else if (k == "discount") s.discount = it->get<double>();
      else if (k == "projection") s.projection = projection_from_string(it->get<std::string>());
      else errors.push_back("unknown env field '" + k + "'");
    } catch (const nlohmann::json::exception&) {
      errors.push_back("env field '" + k + "' has the wrong type");
    }
  }
  if (!errors.empty()) throw ValidationError(errors);
  s.validate();
  return s;
}

DrawerGridCodec::DrawerGridCodec(FactorSpec spec)
    : spec_(spec), num_states_(0), buttons_(spec.has_button ? 2 : 1) {
  spec_.validate();
  num_states_ = spec_.num_states();
}

StateId DrawerGridCodec::encode(const FactoredState& f) const {
  const int n2 = spec_.grid_size * spec_.grid_size;
  if (f.agent_cell < 0 || f.agent_cell >= n2 || f.drawer_open < 0 ||
      f.drawer_open > spec_.drawer_levels || f.button < 0 || f.button >= buttons_ || f.latch < 0 ||
      f.latch >= buttons_ || f.color < 0 || f.color >= spec_.num_colors ||
      f.distractor_layout < 0 || f.distractor_layout >= spec_.num_distractor_layouts)
    throw std::out_of_range("factored state outside factor ranges");
  int idx = f.agent_cell;
  idx = idx * (spec_.drawer_levels + 1) + f.drawer_open;
  idx = idx * buttons_ + f.button;
  idx = idx * buttons_ + f.latch;
  idx = idx * spec_.num_colors + f.color;
  idx = idx * spec_.num_distractor_layouts + f.distractor_layout;
  return idx;
}

FactoredState DrawerGridCodec::decode(StateId s) const {
  if (s < 0 || s >= num_states_) throw std::out_of_range("state index out of range");
  FactoredState f;
  f.distractor_layout = s % spec_.num_distractor_layouts;
  s /= spec_.num_distractor_layouts;
  f.color = s % spec_.num_colors;
  s /= spec_.num_colors;
  f.latch = s % buttons_;
  s /= buttons_;
  f.button = s % buttons_;
  s /= buttons_;
  f.drawer_open = s % (spec_.drawer_levels + 1);
  s /= spec_.drawer_levels + 1;
  f.agent_cell = s;
  return f;
}

int DrawerGridCodec::feature_dim() const {
  return spec_.grid_size * spec_.grid_size + spec_.drawer_levels + 1 + 4 + spec_.num_colors +
         spec_.num_distractor_layouts;
}

void DrawerGridCodec::features(StateId s, std::span<double> out) const {
  if (static_cast<int>(out.size()) != feature_dim())
    throw std::invalid_argument("feature buffer has the wrong length");
  std::fill(out.begin(), out.end(), 0.0);
  const FactoredState f = decode(s);
  int off = 0;
  out[off + f.agent_cell] = 1.0;
  off += spec_.grid_size * spec_.grid_size;
  out[off + f.drawer_open] = 1.0;
  off += spec_.drawer_levels + 1;
  out[off + f.button] = 1.0;
  off += 2;
  out[off + f.latch] = 1.0;
  off += 2;
  out[off + f.color] = 1.0;
  off += spec_.num_colors;
  out[off + f.distractor_layout] = 1.0;
}

std::vector<double> DrawerGridCodec::features(StateId s) const {
  std::vector<double> v(feature_dim());
  features(s, v);
  return v;
}

int DrawerGridCodec::relevant_signature(const FactoredState& f) const {
  return (f.drawer_open * 2 + f.button) * 2 + f.latch;
}

FactoredState DrawerGridCodec::step(const FactoredState& f, ActionId a) const {
  const int n = spec_.grid_size;
  FactoredState out = f;
  const int row = f.agent_cell / n, col = f.agent_cell % n;
  switch (a) {
    case kUp:
      if (row > 0) out.agent_cell -= n;
      break;
    case kDown:
      if (row < n - 1) out.agent_cell += n;
      break;
    case kLeft:
      if (col > 0) out.agent_cell -= 1;
      break;
    case kRight:
      if (col < n - 1) out.agent_cell += 1;
      break;
    case kOpenStep:
    case kCloseStep:
      if (f.agent_cell == drawer_cell()) {
        if (a == kOpenStep && out.drawer_open < spec_.drawer_levels) ++out.drawer_open;
        if (a == kCloseStep && out.drawer_open > 0) --out.drawer_open;
      } else if (spec_.has_button && f.agent_cell == button_cell()) {
        out.button = 1;
        out.latch = 1 - out.latch;
      }
      break;
    default:
      throw std::out_of_range("action out of range");
  }
  return out;
}

DrawerGrid build_drawer_grid(const FactorSpec& spec) {
  DrawerGridCodec codec(spec);
  RawGcmdp raw;
  raw.num_states = codec.num_states();
  raw.num_actions = kNumActions;
  raw.discount = spec.discount;
  raw.projection = spec.projection;
  raw.rows.resize(static_cast<std::size_t>(raw.num_states) * kNumActions);
  raw.goals.resize(raw.num_states);
  raw.signatures.resize(raw.num_states);
  for (StateId s = 0; s < raw.num_states; ++s) {
    raw.goals[s] = s;
    raw.signatures[s] = spec.projection == Projection::Relevant ? codec.relevant_signature(s) : s;
    for (ActionId a = 0; a < kNumActions; ++a) {
      const StateId next = codec.step(s, a);
      auto& row = raw.rows[static_cast<std::size_t>(s) * kNumActions + a];
      if (spec.slip > 0.0 && next != s) {
        row = {{s, spec.slip}, {next, 1.0 - spec.slip}};
      } else {
        row = {{next, 1.0}};
      }
    }
  }
  return DrawerGrid{spec, codec, validate_gcmdp(std::move(raw))};
}

namespace {

// Relevant-projection copy of the dynamics used for scripted rollouts.
Gcmdp relevant_model(const DrawerGrid& env) {
  RawGcmdp raw = env.mdp.to_raw();
  raw.projection = Projection::Relevant;
  raw.signatures.resize(raw.num_states);
  for (StateId s = 0; s < raw.num_states; ++s) raw.signatures[s] = env.codec.relevant_signature(s);
  return validate_gcmdp(std::move(raw));
}

int num_relevant_signatures(const FactorSpec& spec) { return (spec.drawer_levels + 1) * 4; }

}  // namespace

Expert::Expert(const DrawerGrid& env, double tol) : env_(&env) {
  const Gcmdp& m = env.mdp;
  const int S = m.num_states();

  // Per-signature solutions on the relevant model for scripted rollouts.
  const Gcmdp rel = relevant_model(env);
  script_greedy_.assign(num_relevant_signatures(env.spec), {});
  for (StateId g = 0; g < S; ++g) {
    const int sig = env.codec.relevant_signature(g);
    if (!script_greedy_[sig].empty()) continue;
    script_greedy_[sig] = value_iteration(rel, g, tol).greedy;
  }

  // Solutions for the environment's own goal matching rule.
  int max_sig = 0;
  for (StateId s = 0; s < S; ++s) max_sig = std::max(max_sig, m.signature(s));
  signature_slot_.assign(max_sig + 1, -1);
  for (int gk = 0; gk < m.num_goals(); ++gk) {
    const StateId g = m.goal(gk);
    const int sig = m.signature(g);
    if (signature_slot_[sig] >= 0) continue;
    signature_slot_[sig] = static_cast<int>(greedy_.size());
    auto vi = value_iteration(m, g, tol);
    greedy_.push_back(std::move(vi.greedy));
    values_.push_back(std::move(vi.values));
  }
}

const std::vector<ActionId>& Expert::greedy_for(StateId g) const {
  const int sig = env_->mdp.signature(g);
  const int slot = sig < static_cast<int>(signature_slot_.size()) ? signature_slot_[sig] : -1;
  if (slot < 0) throw std::out_of_range("goal state not in the goal set");
  return greedy_[slot];
}

ActionId Expert::optimal_action(StateId s, StateId g) const { return greedy_for(g)[s]; }

double Expert::optimal_value(StateId s, StateId g) const {
  const int slot = signature_slot_[env_->mdp.signature(g)];
  return values_[slot][s];
}

ActionId Expert::scripted_action(StateId s, int relevant_signature) const {
  if (relevant_signature < 0 || relevant_signature >= static_cast<int>(script_greedy_.size()) ||
      script_greedy_[relevant_signature].empty())
    throw std::out_of_range("relevant signature has no states");
  return script_greedy_[relevant_signature][s];
}

GoalPolicy Expert::goal_policy() const {
  const Gcmdp& m = env_->mdp;
  GoalPolicy pi(m.num_states(), m.num_goals(), m.num_actions());
  for (int k = 0; k < m.num_goals(); ++k) {
    const auto& greedy = greedy_for(m.goal(k));
    for (StateId s = 0; s < m.num_states(); ++s) pi.set_deterministic(s, k, greedy[s]);
  }
  return pi;
}

StateId env_step(const DrawerGrid& env, StateId s, ActionId a, Rng& rng) {
  if (env.spec.slip > 0.0 && rng.bernoulli(env.spec.slip)) return s;
  return env.codec.step(s, a);
}

std::vector<int> reachable_signatures(const DrawerGrid& env, StateId s, int horizon) {
  const int S = env.codec.num_states();
  std::vector<int> depth(S, -1);
  std::queue<StateId> q;
  depth[s] = 0;
  q.push(s);
  std::set<int> sigs;
  while (!q.empty()) {
    const StateId u = q.front();
    q.pop();
    sigs.insert(env.codec.relevant_signature(u));
    if (depth[u] == horizon) continue;
    for (ActionId a = 0; a < kNumActions; ++a) {
      const StateId v = env.codec.step(u, a);
      if (depth[v] < 0) {
        depth[v] = depth[u] + 1;
        q.push(v);
      }
    }
  }
  return {sigs.begin(), sigs.end()};
}

StateId scripted_goal(const Expert& expert, StateId s, int target_signature, int horizon) {
  const auto& codec = expert.env().codec;
  StateId cur = s;
  for (int t = 0; t < horizon; ++t) {
    cur = codec.step(cur, expert.scripted_action(cur, target_signature));
    if (codec.relevant_signature(cur) == target_signature) return cur;
  }
  throw std::runtime_error("scripted rollout did not reach signature " +
                           std::to_string(target_signature) + " within the horizon");
}

Task sample_task(const Expert& expert, Rng& rng, int horizon) {
  const auto& env = expert.env();
  for (;;) {
    const StateId s0 = rng.uniform_int(env.codec.num_states());
    const int own = env.codec.relevant_signature(s0);
    std::vector<int> targets;
    for (int sig : reachable_signatures(env, s0, horizon))
      if (sig != own) targets.push_back(sig);
    if (targets.empty()) continue;
    const int target = targets[rng.uniform_int(static_cast<int>(targets.size()))];
    return {s0, scripted_goal(expert, s0, target, horizon)};
  }
}

std::string TaskDelta::describe() const {
  std::ostringstream os;
  os << "drawer" << (drawer >= 0 ? "+" : "") << drawer;
  if (button) os << ",press";
  if (latch_toggle) os << ",latch";
  return os.str();
}

TaskDelta task_delta(const DrawerGridCodec& codec, StateId from, StateId to) {
  const FactoredState a = codec.decode(from), b = codec.decode(to);
  return {b.drawer_open - a.drawer_open, b.button - a.button, b.latch != a.latch ? 1 : 0};
}

bool delta_applicable(const DrawerGridCodec& codec, const FactoredState& s, const TaskDelta& d) {
  const FactorSpec& spec = codec.spec();
  const int open = s.drawer_open + d.drawer;
  if (open < 0 || open > spec.drawer_levels) return false;
  if (d.button != 0 && d.button != 1) return false;
  if (d.latch_toggle != 0 && d.latch_toggle != 1) return false;
  if (!spec.has_button) return d.button == 0 && d.latch_toggle == 0;
  if (d.button == 1 && s.button != 0) return false;
  // the latch only moves through a press, which leaves the button down
  if (d.latch_toggle == 1 && s.button + d.button == 0) return false;
  return true;
}

FactoredState apply_delta(const DrawerGridCodec& codec, FactoredState s, const TaskDelta& d) {
  if (!delta_applicable(codec, s, d))
    throw std::invalid_argument("delta " + d.describe() + " is not applicable");
  s.drawer_open += d.drawer;
  s.button += d.button;
  if (d.latch_toggle) s.latch = 1 - s.latch;
  return s;
}

std::vector<TaskDelta> all_deltas(const FactorSpec& spec) {
  std::vector<TaskDelta> out;
  const int flags = spec.has_button ? 2 : 1;
  for (int dr = -spec.drawer_levels; dr <= spec.drawer_levels; ++dr)
    for (int b = 0; b < flags; ++b)
      for (int l = 0; l < flags; ++l) {
        TaskDelta d{dr, b, l};
        if (!d.is_zero()) out.push_back(d);
      }
  return out;
}

AnalogyCase sample_analogy(const Expert& expert, Rng& rng, StateId s,
                           std::optional<TaskDelta> forced, int max_retries, int horizon) {
  const auto& codec = expert.env().codec;
  const FactorSpec& spec = codec.spec();
  if (spec.num_colors * spec.num_distractor_layouts < 2)
    throw ValidationError({"analogy sampling needs at least two nuisance configurations"});
  const FactoredState fs = codec.decode(s);
  const auto deltas = all_deltas(spec);
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    const TaskDelta d = forced ? *forced : deltas[rng.uniform_int(static_cast<int>(deltas.size()))];
    if (!delta_applicable(codec, fs, d)) continue;

    FactoredState fa = fs;
    fa.agent_cell = rng.uniform_int(spec.grid_size * spec.grid_size);
    do {
      fa.color = rng.uniform_int(spec.num_colors);
      fa.distractor_layout = rng.uniform_int(spec.num_distractor_layouts);
    } while (codec.same_nuisance(fa, fs));

    const StateId s_a = codec.encode(fa);
    const int target = codec.relevant_signature(apply_delta(codec, fa, d));
    AnalogyCase c;
    c.s = s;
    c.s_a = s_a;
    c.g_a = scripted_goal(expert, s_a, target, horizon);
    c.g_true = codec.encode(apply_delta(codec, fs, d));
    c.delta = d;
    return c;
  }
  throw std::runtime_error("no applicable analogy delta for state " + std::to_string(s) +
                           " after " + std::to_string(max_retries) + " attempts");
}

ActionId noisy_expert_action(const Expert& expert, StateId s, StateId g, double epsilon, Rng& rng) {
  if (rng.bernoulli(epsilon)) return rng.uniform_int(expert.env().mdp.num_actions());
  return expert.optimal_action(s, g);
}

namespace {

// Appends one noisy-expert episode; returns true if it reached the goal.
bool run_episode(const Expert& expert, int ep, double epsilon, int horizon, std::uint64_t seed,
                 std::vector<Transition>* out) {
  const auto& env = expert.env();
  Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(ep)));
  const Task task = sample_task(expert, rng, horizon);
  StateId s = task.s0;
  for (int t = 0; t < horizon; ++t) {
    const ActionId a = noisy_expert_action(expert, s, task.g, epsilon, rng);
    const StateId sp = env_step(env, s, a, rng);
    const int r = sparse_reward(env.mdp, s, a, sp, task.g);
    if (out) out->push_back({ep, t, s, a, sp, r, task.g});
    s = sp;
    if (r == 1) return true;
  }
  return false;
}

}  // namespace

Dataset generate_dataset(const Expert& expert, std::size_t num_transitions, double epsilon,
                         int horizon, std::uint64_t seed) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ValidationError({"epsilon must lie in [0,1]"});
  if (horizon < 1) throw ValidationError({"horizon must be positive"});
  Dataset ds;
  int episodes = 0, successes = 0;
  while (ds.transitions.size() < num_transitions) {
    successes += run_episode(expert, episodes, epsilon, horizon, seed, &ds.transitions) ? 1 : 0;
    ++episodes;
  }
  ds.meta = {{"kind", "gcb-dataset"},
             {"env", to_json(expert.env().spec)},
             {"epsilon", epsilon},
             {"horizon", horizon},
             {"seed", seed},
             {"requested", num_transitions},
             {"size", ds.transitions.size()},
             {"episodes", episodes},
             {"success_rate", episodes ? static_cast<double>(successes) / episodes : 0.0}};
  return ds;
}

double demonstrator_success(const Expert& expert, double epsilon, int episodes, int horizon,
                            std::uint64_t seed) {
  if (episodes <= 0) throw std::invalid_argument("episodes must be positive");
  int ok = 0;
  for (int ep = 0; ep < episodes; ++ep) ok += run_episode(expert, ep, epsilon, horizon, seed, nullptr);
  return static_cast<double>(ok) / episodes;
}

double calibrate_epsilon(const Expert& expert, double target_success, int episodes, int horizon,
                         std::uint64_t seed, double tol) {
  double lo = 0.0, hi = 1.0;
  if (demonstrator_success(expert, hi, episodes, horizon, seed) >= target_success) return hi;
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    if (demonstrator_success(expert, mid, episodes, horizon, seed) >= target_success)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

void write_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << ds.meta.dump() << '\n';
  char buf[160];
  for (const auto& t : ds.transitions) {
    std::snprintf(buf, sizeof(buf), "{\"ep\":%d,\"t\":%d,\"s\":%d,\"a\":%d,\"sp\":%d,\"r\":%d,\"g\":%d}\n",
                  t.ep, t.t, t.s, t.a, t.sp, t.r, t.g);
    out << buf;
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  Dataset ds;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError({"dataset file is empty: " + path});
  try {
    ds.meta = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError({"dataset header is not valid JSON: " + std::string(e.what())});
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    Transition t;
    if (std::sscanf(line.c_str(), "{\"ep\":%d,\"t\":%d,\"s\":%d,\"a\":%d,\"sp\":%d,\"r\":%d,\"g\":%d}",
                    &t.ep, &t.t, &t.s, &t.a, &t.sp, &t.r, &t.g) != 7) {
      try {
        auto j = nlohmann::json::parse(line);
        t = {j.at("ep"), j.at("t"), j.at("s"), j.at("a"), j.at("sp"), j.at("r"), j.at("g")};
      } catch (const nlohmann::json::exception&) {
        throw ValidationError({"malformed transition on line " + std::to_string(lineno)});
      }
    }
    ds.transitions.push_back(t);
  }
  return ds;
}

}  // namespace gcb
