#pragma once

// Small models shared by the unit tests.

#include <vector>

#include "gcb/common.hpp"
#include "gcb/gcmdp.hpp"

namespace gcb::testing {

inline constexpr ActionId kStay = 0;
inline constexpr ActionId kStep = 1;

// 0 -> 1 -> 2 -> 2 under kStep; kStay keeps the state. Every state is a goal.
inline RawGcmdp chain_raw(double gamma = 0.9) {
  RawGcmdp raw;
  raw.num_states = 3;
  raw.num_actions = 2;
  raw.discount = gamma;
  raw.goals = {0, 1, 2};
  raw.projection = Projection::Full;
  for (int s = 0; s < 3; ++s) {
    raw.rows.push_back({{s, 1.0}});
    raw.rows.push_back({{s < 2 ? s + 1 : 2, 1.0}});
  }
  return raw;
}

inline Gcmdp chain(double gamma = 0.9) { return validate_gcmdp(chain_raw(gamma)); }

// Dense random model; every state a goal, full projection.
inline Gcmdp random_gcmdp(Rng& rng, int n, int a, double gamma, int branching = 3) {
  RawGcmdp raw;
  raw.num_states = n;
  raw.num_actions = a;
  raw.discount = gamma;
  raw.projection = Projection::Full;
  for (int s = 0; s < n; ++s) raw.goals.push_back(s);
  for (int r = 0; r < n * a; ++r) {
    std::vector<Outcome> row;
    double total = 0.0;
    for (int b = 0; b < branching; ++b) {
      const double w = rng.uniform(0.1, 1.0);
      row.push_back({rng.uniform_int(n), w});
      total += w;
    }
    double acc = 0.0;
    for (std::size_t b = 0; b + 1 < row.size(); ++b) {
      row[b].prob /= total;
      acc += row[b].prob;
    }
    row.back().prob = 1.0 - acc;
    raw.rows.push_back(row);
  }
  return validate_gcmdp(raw);
}

inline GoalPolicy random_policy(Rng& rng, int n, int g, int a) {
  GoalPolicy pi(n, g, a);
  for (int s = 0; s < n; ++s)
    for (int k = 0; k < g; ++k) {
      auto row = pi.row(s, k);
      double total = 0.0;
      for (auto& p : row) total += (p = rng.uniform(0.05, 1.0));
      double acc = 0.0;
      for (std::size_t i = 0; i + 1 < row.size(); ++i) acc += (row[i] /= total);
      row.back() = 1.0 - acc;
    }
  return pi;
}

inline double row_sum(std::span<const double> row) {
  double s = 0.0;
  for (double p : row) s += p;
  return s;
}

}  // namespace gcb::testing
