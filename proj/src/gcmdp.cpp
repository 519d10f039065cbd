#include "gcb/gcmdp.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace gcb {

std::string to_string(Projection p) { return p == Projection::Relevant ? "relevant" : "full"; }

Projection projection_from_string(const std::string& s) {
  if (s == "relevant") return Projection::Relevant;
  if (s == "full") return Projection::Full;
  throw ValidationError({"unknown projection '" + s + "' (expected relevant|full)"});
}

int Gcmdp::goal_index(StateId g) const {
  if (g < 0 || g >= num_states_) return -1;
  return goal_index_[g];
}

double Gcmdp::expected_reward(StateId s, ActionId a, StateId g) const {
  double r = 0.0;
  for (const auto& o : outcomes(s, a))
    if (matches(o.next, g)) r += o.prob;
  return r;
}

RawGcmdp Gcmdp::to_raw() const {
  RawGcmdp raw;
  raw.num_states = num_states_;
  raw.num_actions = num_actions_;
  raw.rows = rows_;
  raw.goals = goals_;
  raw.discount = discount_;
  raw.projection = projection_;
  if (projection_ == Projection::Relevant) raw.signatures = signatures_;
  return raw;
}

Gcmdp validate_gcmdp(RawGcmdp raw) {
  std::vector<std::string> errors;
  auto fail = [&](const std::string& msg) { errors.push_back(msg); };

  if (raw.num_states <= 0) fail("num_states must be positive");
  if (raw.num_actions <= 0) fail("num_actions must be positive");
  if (!(raw.discount > 0.0 && raw.discount < 1.0)) {
    std::ostringstream os;
    os << "discount " << raw.discount << " outside (0,1)";
    fail(os.str());
  }
  if (raw.goals.empty()) fail("empty goal set");
  if (!errors.empty() && (raw.num_states <= 0 || raw.num_actions <= 0)) throw ValidationError(errors);

  const std::size_t expected_rows = static_cast<std::size_t>(raw.num_states) * raw.num_actions;
  if (raw.rows.size() != expected_rows) {
    fail("transition has " + std::to_string(raw.rows.size()) + " rows, expected " +
         std::to_string(expected_rows));
    throw ValidationError(errors);
  }

  for (std::size_t r = 0; r < raw.rows.size(); ++r) {
    auto& row = raw.rows[r];
    double sum = 0.0;
    bool bad_entry = false;
    for (const auto& o : row) {
      if (o.next < 0 || o.next >= raw.num_states) bad_entry = true;
      if (!(o.prob >= 0.0) || !std::isfinite(o.prob)) bad_entry = true;
      sum += o.prob;
    }
    const int s = static_cast<int>(r / raw.num_actions);
    const int a = static_cast<int>(r % raw.num_actions);
    if (bad_entry) {
      fail("invalid transition entry at (s=" + std::to_string(s) + ", a=" + std::to_string(a) + ")");
      continue;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      std::ostringstream os;
      os.precision(17);
      os << "row not stochastic at (s=" << s << ", a=" << a << "): sum=" << sum;
      fail(os.str());
      continue;
    }
    // canonical form: sorted by next state, duplicates merged, zeros dropped
    std::sort(row.begin(), row.end(), [](const Outcome& x, const Outcome& y) { return x.next < y.next; });
    std::vector<Outcome> merged;
    for (const auto& o : row) {
      if (o.prob == 0.0) continue;
      if (!merged.empty() && merged.back().next == o.next)
        merged.back().prob += o.prob;
      else
        merged.push_back(o);
    }
    row = std::move(merged);
  }

  std::vector<int> seen(raw.num_states, 0);
  for (StateId g : raw.goals) {
    if (g < 0 || g >= raw.num_states) {
      fail("goal " + std::to_string(g) + " out of range");
    } else if (seen[g]++) {
      fail("duplicate goal " + std::to_string(g));
    }
  }

  std::vector<int> signatures(raw.num_states);
  if (raw.projection == Projection::Relevant) {
    if (static_cast<int>(raw.signatures.size()) != raw.num_states)
      fail("relevant projection requires one signature per state");
    else
      signatures = raw.signatures;
  } else {
    for (int s = 0; s < raw.num_states; ++s) signatures[s] = s;
  }

  if (!errors.empty()) throw ValidationError(errors);

  Gcmdp m;
  m.num_states_ = raw.num_states;
  m.num_actions_ = raw.num_actions;
  m.rows_ = std::move(raw.rows);
  m.goals_ = std::move(raw.goals);
  m.goal_index_.assign(m.num_states_, -1);
  for (int k = 0; k < static_cast<int>(m.goals_.size()); ++k) m.goal_index_[m.goals_[k]] = k;
  m.discount_ = raw.discount;
  m.projection_ = raw.projection;
  m.signatures_ = std::move(signatures);
  return m;
}

int sparse_reward(const Gcmdp& m, StateId s, ActionId a, StateId s_next, StateId g) {
  const int n = m.num_states();
  if (s < 0 || s >= n || s_next < 0 || s_next >= n || g < 0 || g >= n || a < 0 || a >= m.num_actions())
    throw std::out_of_range("sparse_reward: index out of range");
  return m.matches(s_next, g) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// GoalPolicy

GoalPolicy::GoalPolicy(int num_states, int num_goals, int num_actions)
    : num_states_(num_states),
      num_goals_(num_goals),
      num_actions_(num_actions),
      probs_(static_cast<std::size_t>(num_states) * num_goals * num_actions, 0.0) {}

GoalPolicy GoalPolicy::uniform(int num_states, int num_goals, int num_actions) {
  GoalPolicy p(num_states, num_goals, num_actions);
  std::fill(p.probs_.begin(), p.probs_.end(), 1.0 / num_actions);
  return p;
}

void GoalPolicy::set_deterministic(StateId s, int k, ActionId a) {
  auto r = row(s, k);
  std::fill(r.begin(), r.end(), 0.0);
  r[a] = 1.0;
}

GoalPolicy GoalPolicy::epsilon_mixture(double eps) const {
  GoalPolicy out(*this);
  const double u = eps / num_actions_;
  for (auto& p : out.probs_) p = (1.0 - eps) * p + u;
  return out;
}

void GoalPolicy::validate() const {
  std::vector<std::string> errors;
  for (int s = 0; s < num_states_; ++s) {
    for (int k = 0; k < num_goals_; ++k) {
      double sum = 0.0;
      bool negative = false;
      for (double p : row(s, k)) {
        sum += p;
        if (!(p >= 0.0)) negative = true;
      }
      if (negative || std::abs(sum - 1.0) > 1e-12) {
        errors.push_back("invalid policy row at (s=" + std::to_string(s) + ", goal=" + std::to_string(k) + ")");
        if (errors.size() > 20) throw ValidationError(errors);
      }
    }
  }
  if (!errors.empty()) throw ValidationError(errors);
}

void GoalPolicy::validate_for(const Gcmdp& m) const {
  if (num_states_ != m.num_states() || num_goals_ != m.num_goals() || num_actions_ != m.num_actions())
    throw ValidationError({"policy shape does not match the model"});
  validate();
}

// ---------------------------------------------------------------------------
// Dynamic programming

namespace {

double backup(const Gcmdp& m, StateId s, ActionId a, std::span<const double> next_reward,
              const std::vector<double>& v) {
  double q = 0.0;
  for (const auto& o : m.outcomes(s, a)) q += o.prob * (next_reward[o.next] + m.discount() * v[o.next]);
  return q;
}

std::vector<double> goal_reward_vector(const Gcmdp& m, StateId g) {
  std::vector<double> r(m.num_states());
  for (int s = 0; s < m.num_states(); ++s) r[s] = m.matches(s, g) ? 1.0 : 0.0;
  return r;
}

}  // namespace

ValueIterationResult value_iteration(const Gcmdp& m, StateId g, double tol, int max_iter) {
  if (!(tol > 0.0)) throw std::invalid_argument("value_iteration: tol must be positive");
  if (g < 0 || g >= m.num_states()) throw std::out_of_range("value_iteration: goal out of range");
  const int n = m.num_states();
  const int na = m.num_actions();
  const auto reward = goal_reward_vector(m, g);

  ValueIterationResult out;
  std::vector<double> v(n, 0.0), next(n);
  double residual = 0.0;
  int it = 0;
  for (; it < max_iter; ++it) {
    residual = 0.0;
    for (int s = 0; s < n; ++s) {
      double best = -1.0;
      for (int a = 0; a < na; ++a) best = std::max(best, backup(m, s, a, reward, v));
      next[s] = best;
      residual = std::max(residual, std::abs(best - v[s]));
    }
    v.swap(next);
    out.residuals.push_back(residual);
    if (residual < tol) break;
  }
  if (residual >= tol) throw ConvergenceError("value_iteration did not converge", residual, it);

  out.q.resize(static_cast<std::size_t>(n) * na);
  out.greedy.resize(n);
  for (int s = 0; s < n; ++s) {
    double best = -1.0;
    for (int a = 0; a < na; ++a) {
      const double q = backup(m, s, a, reward, v);
      out.q[static_cast<std::size_t>(s) * na + a] = q;
      best = std::max(best, q);
    }
    for (int a = 0; a < na; ++a) {
      if (out.q[static_cast<std::size_t>(s) * na + a] >= best - kTieTolerance) {
        out.greedy[s] = a;
        break;
      }
    }
  }
  out.values = std::move(v);
  return out;
}

std::vector<double> policy_evaluation_reward(const Gcmdp& m, const GoalPolicy& pi, int goal_k,
                                             std::span<const double> next_state_reward, double tol,
                                             int max_iter) {
  if (!(tol > 0.0)) throw std::invalid_argument("policy_evaluation: tol must be positive");
  pi.validate_for(m);
  if (goal_k < 0 || goal_k >= m.num_goals()) throw std::out_of_range("policy_evaluation: goal index");
  if (static_cast<int>(next_state_reward.size()) != m.num_states())
    throw std::invalid_argument("policy_evaluation: reward vector size mismatch");
  const int n = m.num_states();
  const int na = m.num_actions();
  std::vector<double> v(n, 0.0), next(n);
  double residual = 0.0;
  int it = 0;
  for (; it < max_iter; ++it) {
    residual = 0.0;
    for (int s = 0; s < n; ++s) {
      double val = 0.0;
      const auto row = pi.row(s, goal_k);
      for (int a = 0; a < na; ++a)
        if (row[a] > 0.0) val += row[a] * backup(m, s, a, next_state_reward, v);
      next[s] = val;
      residual = std::max(residual, std::abs(val - v[s]));
    }
    v.swap(next);
    if (residual < tol) return v;
  }
  throw ConvergenceError("policy_evaluation did not converge", residual, it);
}

std::vector<double> policy_evaluation(const Gcmdp& m, const GoalPolicy& pi, int goal_k, double tol,
                                      int max_iter) {
  if (goal_k < 0 || goal_k >= m.num_goals()) throw std::out_of_range("policy_evaluation: goal index");
  const auto reward = goal_reward_vector(m, m.goal(goal_k));
  return policy_evaluation_reward(m, pi, goal_k, reward, tol, max_iter);
}

GoalPolicy optimal_goal_policy(const Gcmdp& m, double tol) {
  GoalPolicy pi(m.num_states(), m.num_goals(), m.num_actions());
  std::map<int, std::vector<ActionId>> by_signature;
  for (int k = 0; k < m.num_goals(); ++k) {
    const StateId g = m.goal(k);
    auto it = by_signature.find(m.signature(g));
    if (it == by_signature.end())
      it = by_signature.emplace(m.signature(g), value_iteration(m, g, tol).greedy).first;
    for (int s = 0; s < m.num_states(); ++s) pi.set_deterministic(s, k, it->second[s]);
  }
  return pi;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json gcmdp_to_json(const Gcmdp& m) {
  nlohmann::json j;
  j["num_states"] = m.num_states();
  j["num_actions"] = m.num_actions();
  nlohmann::json transition = nlohmann::json::array();
  for (int s = 0; s < m.num_states(); ++s) {
    nlohmann::json per_action = nlohmann::json::array();
    for (int a = 0; a < m.num_actions(); ++a) {
      std::vector<double> dense(m.num_states(), 0.0);
      for (const auto& o : m.outcomes(s, a)) dense[o.next] = o.prob;
      per_action.push_back(dense);
    }
    transition.push_back(std::move(per_action));
  }
  j["transition"] = std::move(transition);
  j["goals"] = m.goals();
  j["discount"] = m.discount();
  j["projection"] = to_string(m.projection());
  if (m.projection() == Projection::Relevant) {
    std::vector<int> sig(m.num_states());
    for (int s = 0; s < m.num_states(); ++s) sig[s] = m.signature(s);
    j["signatures"] = sig;
  }
  return j;
}

Gcmdp gcmdp_from_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  for (const char* key : {"num_states", "num_actions", "transition", "goals", "discount"})
    if (!j.contains(key)) errors.push_back(std::string("missing field '") + key + "'");
  if (!errors.empty()) throw ValidationError(errors);

  RawGcmdp raw;
  raw.num_states = j.at("num_states").get<int>();
  raw.num_actions = j.at("num_actions").get<int>();
  raw.discount = j.at("discount").get<double>();
  raw.goals = j.at("goals").get<std::vector<int>>();
  raw.projection = projection_from_string(j.value("projection", std::string("full")));
  if (j.contains("signatures")) raw.signatures = j.at("signatures").get<std::vector<int>>();

  const auto& t = j.at("transition");
  if (!t.is_array() || static_cast<int>(t.size()) != raw.num_states)
    throw ValidationError({"transition must have num_states entries"});
  for (int s = 0; s < raw.num_states; ++s) {
    const auto& per_action = t[s];
    if (!per_action.is_array() || static_cast<int>(per_action.size()) != raw.num_actions)
      throw ValidationError({"transition[" + std::to_string(s) + "] must have num_actions entries"});
    for (int a = 0; a < raw.num_actions; ++a) {
      const auto& dense = per_action[a];
      if (!dense.is_array() || static_cast<int>(dense.size()) != raw.num_states)
        throw ValidationError({"transition[" + std::to_string(s) + "][" + std::to_string(a) +
                               "] must have num_states entries"});
      std::vector<Outcome> row;
      for (int sp = 0; sp < raw.num_states; ++sp) {
        const double p = dense[sp].get<double>();
        if (p != 0.0) row.push_back({sp, p});
      }
      raw.rows.push_back(std::move(row));
    }
  }
  return validate_gcmdp(std::move(raw));
}

}  // namespace gcb
