#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "gcb/envs.hpp"

namespace gcb {
namespace {

FactorSpec button_spec() {
  FactorSpec spec;
  spec.has_button = true;
  spec.num_distractor_layouts = 2;
  return spec;
}

// Shortest deterministic path lengths from s over the codec's step function.
std::vector<int> bfs_distances(const DrawerGridCodec& codec, StateId s) {
  std::vector<int> dist(codec.num_states(), -1);
  std::queue<StateId> q;
  dist[s] = 0;
  q.push(s);
  while (!q.empty()) {
    const StateId x = q.front();
    q.pop();
    for (ActionId a = 0; a < kNumActions; ++a) {
      const StateId y = codec.step(x, a);
      if (dist[y] < 0) {
        dist[y] = dist[x] + 1;
        q.push(y);
      }
    }
  }
  return dist;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(FactorSpec, StateCountFormula) {
  EXPECT_EQ(FactorSpec{}.num_states(), 54);
  EXPECT_EQ(build_drawer_grid(FactorSpec{}).codec.num_states(), 54);
  for (int n : {2, 3, 4})
    for (int k : {1, 2, 3})
      for (bool button : {false, true})
        for (int c : {1, 3})
          for (int d : {1, 2}) {
            FactorSpec spec;
            spec.grid_size = n;
            spec.drawer_levels = k;
            spec.has_button = button;
            spec.num_colors = c;
            spec.num_distractor_layouts = d;
            EXPECT_EQ(spec.num_states(), n * n * (k + 1) * (button ? 4 : 1) * c * d);
          }
}

TEST(FactorSpec, RejectsOutOfRangeFields) {
  FactorSpec spec;
  spec.grid_size = 1;
  EXPECT_THROW(spec.validate(), ValidationError);
  spec = {};
  spec.drawer_levels = 0;
  EXPECT_THROW(spec.validate(), ValidationError);
  spec = {};
  spec.num_colors = 0;
  EXPECT_THROW(spec.validate(), ValidationError);
  spec = {};
  spec.num_distractor_layouts = 0;
  EXPECT_THROW(spec.validate(), ValidationError);
}

TEST(FactorSpec, RejectsModelsOverTheCap) {
  FactorSpec spec;
  spec.grid_size = 10;
  spec.num_colors = 20;
  EXPECT_GT(spec.num_states(), spec.state_cap);
  EXPECT_THROW(build_drawer_grid(spec), ValidationError);
}

TEST(FactorSpec, JsonRoundTrip) {
  const FactorSpec spec = button_spec();
  const FactorSpec back = factor_spec_from_json(to_json(spec));
  EXPECT_EQ(to_json(back), to_json(spec));
  nlohmann::json j = to_json(spec);
  j["bogus"] = 1;
  EXPECT_THROW(factor_spec_from_json(j), ValidationError);
}

TEST(Codec, EncodeDecodeIsBijective) {
  for (const FactorSpec& spec : {FactorSpec{}, button_spec()}) {
    const DrawerGridCodec codec(spec);
    std::set<std::array<int, 6>> seen;
    for (StateId s = 0; s < codec.num_states(); ++s) {
      const FactoredState f = codec.decode(s);
      EXPECT_EQ(codec.encode(f), s);
      seen.insert({f.agent_cell, f.drawer_open, f.button, f.latch, f.color, f.distractor_layout});
    }
    EXPECT_EQ(static_cast<int>(seen.size()), codec.num_states());
  }
}

TEST(Codec, FeaturesAreOneHotPerFactor) {
  const DrawerGridCodec codec(button_spec());
  const FactorSpec& spec = codec.spec();
  const int expected = spec.grid_size * spec.grid_size + spec.drawer_levels + 1 + 2 + 2 +
                       spec.num_colors + spec.num_distractor_layouts;
  EXPECT_EQ(codec.feature_dim(), expected);
  for (StateId s = 0; s < codec.num_states(); s += 5) {
    const auto x = codec.features(s);
    double total = 0.0;
    for (double v : x) {
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      total += v;
    }
    EXPECT_EQ(total, 6.0);
  }
}

TEST(Dynamics, NuisanceFactorsNeverChange) {
  for (const FactorSpec& spec : {FactorSpec{}, button_spec()}) {
    const DrawerGridCodec codec(spec);
    for (StateId s = 0; s < codec.num_states(); ++s)
      for (ActionId a = 0; a < kNumActions; ++a) {
        const FactoredState f = codec.decode(s), g = codec.step(f, a);
        EXPECT_TRUE(codec.same_nuisance(f, g));
      }
  }
}

TEST(Dynamics, MovesClampAtWalls) {
  const DrawerGridCodec codec(FactorSpec{});
  FactoredState f;
  f.agent_cell = 0;  // top-left
  EXPECT_EQ(codec.step(f, kUp), f);
  EXPECT_EQ(codec.step(f, kLeft), f);
  f.agent_cell = 8;  // bottom-right
  EXPECT_EQ(codec.step(f, kDown), f);
  EXPECT_EQ(codec.step(f, kRight), f);
  f.agent_cell = 4;
  EXPECT_EQ(codec.step(f, kUp).agent_cell, 1);
  EXPECT_EQ(codec.step(f, kDown).agent_cell, 7);
  EXPECT_EQ(codec.step(f, kLeft).agent_cell, 3);
  EXPECT_EQ(codec.step(f, kRight).agent_cell, 5);
}

TEST(Dynamics, InteractAwayFromObjectsIsNoOp) {
  const DrawerGridCodec codec(button_spec());
  for (StateId s = 0; s < codec.num_states(); ++s) {
    const FactoredState f = codec.decode(s);
    if (f.agent_cell == codec.drawer_cell() || f.agent_cell == codec.button_cell()) continue;
    EXPECT_EQ(codec.step(f, kOpenStep), f);
    EXPECT_EQ(codec.step(f, kCloseStep), f);
  }
}

TEST(Dynamics, DrawerAndButtonInteractions) {
  const DrawerGridCodec codec(button_spec());
  FactoredState f;
  f.agent_cell = codec.drawer_cell();
  EXPECT_EQ(codec.step(f, kOpenStep).drawer_open, 1);
  EXPECT_EQ(codec.step(f, kCloseStep).drawer_open, 0);
  f.drawer_open = 2;
  EXPECT_EQ(codec.step(f, kOpenStep).drawer_open, 2);
  EXPECT_EQ(codec.step(f, kCloseStep).drawer_open, 1);

  FactoredState b;
  b.agent_cell = codec.button_cell();
  for (ActionId a : {kOpenStep, kCloseStep}) {
    const FactoredState pressed = codec.step(b, a);
    EXPECT_EQ(pressed.button, 1);
    EXPECT_EQ(pressed.latch, 1);
    // each further press keeps the button down and flips the latch
    const FactoredState again = codec.step(pressed, a);
    EXPECT_EQ(again.button, 1);
    EXPECT_EQ(again.latch, 0);
  }
}

TEST(Dynamics, TransitionsAreDeterministicWithoutSlip) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  for (StateId s = 0; s < env.mdp.num_states(); ++s)
    for (ActionId a = 0; a < kNumActions; ++a) {
      const auto out = env.mdp.outcomes(s, a);
      ASSERT_EQ(out.size(), 1u);
      EXPECT_EQ(out[0].next, env.codec.step(s, a));
    }
}

TEST(Dynamics, SlipKeepsStateWithConfiguredProbability) {
  FactorSpec spec;
  spec.slip = 0.25;
  const DrawerGrid env = build_drawer_grid(spec);
  for (StateId s = 0; s < env.mdp.num_states(); ++s)
    for (ActionId a = 0; a < kNumActions; ++a) {
      const StateId moved = env.codec.step(s, a);
      double stay = 0.0, go = 0.0;
      for (const auto& o : env.mdp.outcomes(s, a)) {
        if (o.next == s) stay += o.prob;
        if (o.next == moved) go += o.prob;
      }
      if (moved == s) {
        EXPECT_NEAR(stay, 1.0, 1e-12);
      } else {
        EXPECT_NEAR(stay, 0.25, 1e-12);
        EXPECT_NEAR(go, 0.75, 1e-12);
      }
    }
}

TEST(Goals, EveryStateIsAGoal) {
  const DrawerGrid env = build_drawer_grid(button_spec());
  EXPECT_EQ(env.mdp.num_goals(), env.mdp.num_states());
  for (int k = 0; k < env.mdp.num_goals(); ++k) EXPECT_EQ(env.mdp.goal(k), k);
}

TEST(Expert, OptimalActionsReachEveryReachableSignature) {
  const DrawerGrid env = build_drawer_grid(button_spec());
  const Expert expert(env);
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const StateId s = rng.uniform_int(env.codec.num_states());
    for (int sig : reachable_signatures(env, s)) {
      const StateId g = scripted_goal(expert, s, sig);
      EXPECT_EQ(env.codec.relevant_signature(g), sig);
      EXPECT_TRUE(env.codec.same_nuisance(env.codec.decode(s), env.codec.decode(g)));
    }
  }
}

TEST(Expert, ReachableSignaturesMatchBreadthFirstSearch) {
  const DrawerGrid env = build_drawer_grid(button_spec());
  for (StateId s = 0; s < env.codec.num_states(); s += 3) {
    const auto dist = bfs_distances(env.codec, s);
    std::set<int> expected;
    for (StateId t = 0; t < env.codec.num_states(); ++t)
      if (dist[t] >= 0 && dist[t] <= kDefaultHorizon) expected.insert(env.codec.relevant_signature(t));
    const auto got = reachable_signatures(env, s);
    EXPECT_EQ(std::set<int>(got.begin(), got.end()), expected);
  }
}

TEST(SampleTask, DeterministicForFixedSeed) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  const Expert expert(env);
  Rng a(7), b(7);
  for (int i = 0; i < 20; ++i) {
    const Task ta = sample_task(expert, a), tb = sample_task(expert, b);
    EXPECT_EQ(ta.s0, tb.s0);
    EXPECT_EQ(ta.g, tb.g);
  }
}

TEST(SampleTask, GoalSharesNuisanceAndIsReachable) {
  const DrawerGrid env = build_drawer_grid(button_spec());
  const Expert expert(env);
  Rng rng(9);
  for (int i = 0; i < 500; ++i) {
    const Task t = sample_task(expert, rng);
    const FactoredState f0 = env.codec.decode(t.s0), fg = env.codec.decode(t.g);
    EXPECT_EQ(fg.color, f0.color);
    EXPECT_EQ(fg.distractor_layout, f0.distractor_layout);
    EXPECT_NE(env.codec.relevant_signature(t.s0), env.codec.relevant_signature(t.g));
    EXPECT_GE(fg.drawer_open, 0);
    EXPECT_LE(fg.drawer_open, env.spec.drawer_levels);
    const auto dist = bfs_distances(env.codec, t.s0);
    EXPECT_GE(dist[t.g], 0);
    EXPECT_LE(dist[t.g], kDefaultHorizon);
  }
}

TEST(TaskDelta, ApplyingDeltaOfPairReproducesTarget) {
  const DrawerGrid env = build_drawer_grid(button_spec());
  const auto& codec = env.codec;
  for (StateId s = 0; s < codec.num_states(); s += 7)
    for (StateId g = 0; g < codec.num_states(); g += 5) {
      const TaskDelta d = task_delta(codec, s, g);
      const FactoredState fs = codec.decode(s), fg = codec.decode(g);
      if (!delta_applicable(codec, fs, d)) continue;
      const FactoredState applied = apply_delta(codec, fs, d);
      EXPECT_EQ(codec.relevant_signature(applied), codec.relevant_signature(fg));
      EXPECT_EQ(applied.agent_cell, fs.agent_cell);
      EXPECT_TRUE(codec.same_nuisance(applied, fs));
    }
}

TEST(SampleAnalogy, OpenByTwoFromClosedDrawer) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  const Expert expert(env);
  FactoredState f;
  f.agent_cell = 4;
  f.color = 1;
  const StateId s = env.codec.encode(f);
  Rng rng(1);
  const AnalogyCase c = sample_analogy(expert, rng, s, TaskDelta{2, 0, 0});
  const FactoredState gt = env.codec.decode(c.g_true);
  EXPECT_EQ(gt.drawer_open, 2);
  EXPECT_TRUE(env.codec.same_nuisance(gt, f));
  EXPECT_EQ(task_delta(env.codec, c.s_a, c.g_a), (TaskDelta{2, 0, 0}));
}

TEST(SampleAnalogy, CasesAreSound) {
  const DrawerGrid env = build_drawer_grid(button_spec());
  const Expert expert(env);
  const auto& codec = env.codec;
  Rng rng(31);
  for (int i = 0; i < 1000; ++i) {
    const StateId s = rng.uniform_int(codec.num_states());
    const AnalogyCase c = sample_analogy(expert, rng, s);
    EXPECT_EQ(c.s, s);
    const FactoredState fs = codec.decode(s), fa = codec.decode(c.s_a), ga = codec.decode(c.g_a);
    EXPECT_FALSE(codec.same_nuisance(fs, fa));
    EXPECT_TRUE(codec.same_nuisance(fa, ga));
    EXPECT_FALSE(c.delta.is_zero());
    EXPECT_EQ(task_delta(codec, c.s_a, c.g_a), c.delta);
    EXPECT_EQ(task_delta(codec, c.s, c.g_true), c.delta);
    EXPECT_EQ(codec.encode(apply_delta(codec, fs, c.delta)), c.g_true);
  }
}

TEST(SampleAnalogy, ColourDiffersWithExpectedProbability) {
  // C = 3, D = 2: resampled uniformly over the 5 other nuisance pairs, of
  // which 4 change the colour
  FactorSpec spec = button_spec();
  spec.num_colors = 3;
  spec.grid_size = 2;
  const DrawerGrid env = build_drawer_grid(spec);
  const Expert expert(env);
  Rng rng(17);
  const int draws = 10000;
  int differ = 0;
  for (int i = 0; i < draws; ++i) {
    const StateId s = rng.uniform_int(env.codec.num_states());
    const AnalogyCase c = sample_analogy(expert, rng, s);
    differ += env.codec.decode(c.s_a).color != env.codec.decode(s).color;
  }
  const double rate = static_cast<double>(differ) / draws;
  EXPECT_NEAR(rate, 4.0 / 5.0, 0.02);
  EXPECT_GE(rate, 1.0 - 1.0 / 3 - 0.02);
}

TEST(SampleAnalogy, InapplicableForcedDeltaFailsAfterRetries) {
  const DrawerGrid env = build_drawer_grid(button_spec());
  const Expert expert(env);
  FactoredState f;
  f.button = 1;
  f.latch = 1;
  Rng rng(3);
  EXPECT_THROW(sample_analogy(expert, rng, env.codec.encode(f), TaskDelta{0, 1, 1}, 10),
               std::runtime_error);
}

TEST(SampleAnalogy, NeedsTwoNuisanceConfigurations) {
  FactorSpec spec;
  spec.num_colors = 1;
  const DrawerGrid env = build_drawer_grid(spec);
  const Expert expert(env);
  Rng rng(0);
  EXPECT_THROW(sample_analogy(expert, rng, 0), ValidationError);
}

TEST(NoisyExpert, ZeroEpsilonIsOptimal) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  const Expert expert(env);
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const StateId s = rng.uniform_int(54), g = rng.uniform_int(54);
    EXPECT_EQ(noisy_expert_action(expert, s, g, 0.0, rng), expert.optimal_action(s, g));
  }
}

TEST(NoisyExpert, UnitEpsilonIsUniform) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  const Expert expert(env);
  Rng rng(5);
  std::array<int, kNumActions> counts{};
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[noisy_expert_action(expert, 3, 40, 1.0, rng)];
  for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / draws, 1.0 / int{kNumActions}, 0.02);
}

TEST(NoisyExpert, CalibratedEpsilonLandsNearTarget) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  const Expert expert(env);
  const double eps = calibrate_epsilon(expert, 0.8, 2000, kDefaultHorizon, 0);
  const double rate = demonstrator_success(expert, eps, 2000, kDefaultHorizon, 99);
  EXPECT_NEAR(rate, 0.8, 0.1);
  EXPECT_EQ(demonstrator_success(expert, 0.0, 200, kDefaultHorizon, 1), 1.0);
}

TEST(Dataset, SizeRewardsAndEpisodeStructure) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  const Expert expert(env);
  const Dataset ds = generate_dataset(expert, 50000, 0.9, kDefaultHorizon, 12);
  ASSERT_GE(ds.size(), 50000u);
  const auto& tr = ds.transitions;
  // the last episode is complete: it ends on the goal or at the horizon
  EXPECT_TRUE(tr.back().r == 1 || tr.back().t == kDefaultHorizon - 1);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const Transition& t = tr[i];
    EXPECT_EQ(t.r, sparse_reward(env.mdp, t.s, t.a, t.sp, t.g));
    EXPECT_LT(t.t, kDefaultHorizon);
    if (t.r == 1) EXPECT_EQ(env.mdp.signature(t.sp), env.mdp.signature(t.g));
    if (i + 1 < tr.size()) {
      const Transition& n = tr[i + 1];
      if (n.ep == t.ep) {
        EXPECT_EQ(n.t, t.t + 1);
        EXPECT_EQ(n.g, t.g);
        EXPECT_EQ(n.s, t.sp);
        EXPECT_EQ(t.r, 0);
      } else {
        EXPECT_EQ(n.ep, t.ep + 1);
        EXPECT_EQ(n.t, 0);
        EXPECT_TRUE(t.r == 1 || t.t == kDefaultHorizon - 1);
      }
    }
  }
}

TEST(Dataset, ReplayReproducesStoredSequences) {
  const DrawerGrid env = build_drawer_grid(button_spec());
  const Expert expert(env);
  const Dataset ds = generate_dataset(expert, 5000, 0.5, kDefaultHorizon, 3);
  StateId s = -1;
  int ep = -1;
  for (const Transition& t : ds.transitions) {
    if (t.ep != ep) {
      ep = t.ep;
      s = t.s;
    }
    ASSERT_EQ(t.s, s);
    const StateId sp = env.codec.step(s, t.a);
    EXPECT_EQ(t.sp, sp);
    EXPECT_EQ(t.r, env.mdp.matches(sp, t.g) ? 1 : 0);
    s = sp;
  }
}

TEST(Dataset, SameSeedGivesIdenticalFile) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  const Expert expert(env);
  const auto dir = std::filesystem::temp_directory_path() / "gcb_test_envs";
  std::filesystem::create_directories(dir);
  const std::string a = (dir / "a.jsonl").string(), b = (dir / "b.jsonl").string(),
                    c = (dir / "c.jsonl").string();
  write_dataset(generate_dataset(expert, 3000, 0.9, kDefaultHorizon, 5), a);
  write_dataset(generate_dataset(expert, 3000, 0.9, kDefaultHorizon, 5), b);
  write_dataset(generate_dataset(expert, 3000, 0.9, kDefaultHorizon, 6), c);
  EXPECT_EQ(read_file(a), read_file(b));
  EXPECT_NE(read_file(a), read_file(c));

  const Dataset back = read_dataset(a);
  const Dataset orig = generate_dataset(expert, 3000, 0.9, kDefaultHorizon, 5);
  ASSERT_EQ(back.size(), orig.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.transitions[i].s, orig.transitions[i].s);
    EXPECT_EQ(back.transitions[i].sp, orig.transitions[i].sp);
    EXPECT_EQ(back.transitions[i].g, orig.transitions[i].g);
  }
  EXPECT_EQ(back.meta, orig.meta);
  std::filesystem::remove_all(dir);
}

TEST(Dataset, RejectsBadEpsilon) {
  const DrawerGrid env = build_drawer_grid(FactorSpec{});
  const Expert expert(env);
  EXPECT_THROW(generate_dataset(expert, 10, 1.5, kDefaultHorizon, 0), ValidationError);
  EXPECT_THROW(generate_dataset(expert, 10, -0.1, kDefaultHorizon, 0), ValidationError);
}

}  // namespace
}  // namespace gcb
