#include <gtest/gtest.h>

#include <unistd.h>

#include <filesystem>

#include "dualtrack/solver.hpp"

using namespace dualtrack;
namespace fs = std::filesystem;

namespace {

KnowledgeBase kb44() {
  return make_delivery_kb({"coffee", "hamburger", "sandwich", "soda"}, {"alice", "nate", "bob", "carol"});
}

const Policy& noiseless_policy() {
  static const Policy pol = solve(build_dialog_pomdp(kb44(), NoiseModel::noiseless()));
  return pol;
}

const Policy& default_policy() {
  static const Policy pol = solve(build_dialog_pomdp(kb44()));
  return pol;
}

}  // namespace

TEST(Solver, FullRequestAtZeroNoiseLeadsToMatchingReport) {
  auto kb = kb44();
  auto m = build_dialog_pomdp(kb, NoiseModel::noiseless());
  const auto& pol = noiseless_policy();
  for (const auto& key : m.states) {
    if (key.terminal) continue;
    auto b = detail::uniform_nonterminal(m);
    for (auto slot : {Slot::task, Slot::item, Slot::recipient})
      b = belief_update(m, b, *m.action_index({ActionKind::wh, slot, {}, {}}),
                        *m.observation_index({ObsKind::slot_value, slot, key.get(slot)}));
    const auto& a = m.actions[pol.action(b)];
    ASSERT_EQ(a.kind, ActionKind::report);
    EXPECT_EQ(a.target, key);
  }
}

TEST(Solver, UniformBeliefAsksAWhQuestion) {
  auto m = build_dialog_pomdp(kb44());
  EXPECT_EQ(m.actions[default_policy().action(detail::uniform_nonterminal(m))].kind, ActionKind::wh);
  // reporting blind is worse than asking
  EXPECT_LT((20.0 + 15 * -20.0) / 16.0, -1.5);
}

TEST(Solver, SingleStateReportsImmediately) {
  auto kb = make_delivery_kb({"coffee"}, {"alice"});
  auto m = build_dialog_pomdp(kb);
  auto pol = solve(m);
  auto b = detail::uniform_nonterminal(m);
  const auto& a = m.actions[pol.action(b)];
  ASSERT_EQ(a.kind, ActionKind::report);
  EXPECT_EQ(a.target, m.states[1]);
}

TEST(Solver, PointValuesNeverDecrease) {
  auto m = build_dialog_pomdp(kb44());
  std::vector<double> last;
  bool ok = true;
  SolverOptions opt;
  opt.belief_points = 64;
  solve(m, opt, [&](std::size_t, const std::vector<double>& values) {
    for (std::size_t i = 0; i < std::min(last.size(), values.size()); ++i)
      if (values[i] < last[i] - 1e-9) ok = false;
    last = values;
  });
  EXPECT_TRUE(ok);
  EXPECT_FALSE(last.empty());
}

TEST(Solver, DeterministicGivenSeed) {
  auto m = build_dialog_pomdp(kb44());
  SolverOptions opt;
  opt.belief_points = 64;
  auto a = solve(m, opt), b = solve(m, opt);
  ASSERT_EQ(a.alphas.size(), b.alphas.size());
  for (std::size_t i = 0; i < a.alphas.size(); ++i) {
    EXPECT_EQ(a.alphas[i].action, b.alphas[i].action);
    EXPECT_EQ(a.alphas[i].values, b.alphas[i].values);
  }
  EXPECT_EQ(a.iterations, b.iterations);
}

TEST(Solver, AlphaActionsAreValid) {
  auto m = build_dialog_pomdp(kb44());
  const auto& pol = default_policy();
  EXPECT_FALSE(pol.alphas.empty());
  for (const auto& a : pol.alphas) {
    EXPECT_LT(a.action, m.num_actions());
    EXPECT_EQ(a.values.size(), m.num_states());
  }
  EXPECT_TRUE(pol.converged);
  EXPECT_LT(pol.final_residual, pol.epsilon);
}

TEST(Solver, ZeroNoiseDialogsFinishQuickly) {
  auto kb = kb44();
  auto m = build_dialog_pomdp(kb, NoiseModel::noiseless());
  const auto& pol = noiseless_policy();
  for (const auto& key : m.states) {
    if (key.terminal) continue;
    auto b = detail::uniform_nonterminal(m);
    int questions = 0;
    for (;;) {
      const auto& a = m.actions[pol.action(b)];
      if (a.kind == ActionKind::report) {
        EXPECT_EQ(a.target, key);
        break;
      }
      ASSERT_LT(++questions, 10);
      ObsKey z;
      if (a.kind == ActionKind::wh)
        z = {ObsKind::slot_value, a.slot, key.get(a.slot)};
      else
        z = {key.get(a.slot) == a.value ? ObsKind::affirm : ObsKind::deny, {}, {}};
      b = belief_update(m, b, pol.action(b), *m.observation_index(z));
    }
    EXPECT_LE(questions, 3);
  }
}

TEST(Solver, CacheSolvesOnce) {
  PolicyCache cache;
  auto m = build_dialog_pomdp(kb44());
  SolverOptions opt;
  opt.belief_points = 32;
  auto a = cache.get(m, opt);
  auto b = cache.get(m, opt);
  EXPECT_EQ(a, b);
  EXPECT_EQ(cache.solves(), 1u);
  // same structure, other names: same tensors, same policy
  auto renamed = make_delivery_kb({"tea", "pizza", "apple", "water"}, {"eve", "frank", "grace", "heidi"});
  EXPECT_EQ(cache.get(build_dialog_pomdp(renamed), opt), a);
  opt.seed = 2;
  cache.get(m, opt);
  EXPECT_EQ(cache.solves(), 2u);
}

TEST(Solver, CacheRoundTripsThroughDisk) {
  const auto dir = fs::temp_directory_path() / ("dualtrack_cache_test_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  auto m = build_dialog_pomdp(kb44());
  SolverOptions opt;
  opt.belief_points = 32;
  std::shared_ptr<const Policy> first;
  {
    PolicyCache cache(dir);
    first = cache.get(m, opt);
    EXPECT_EQ(cache.solves(), 1u);
  }
  PolicyCache again(dir);
  auto loaded = again.get(m, opt);
  EXPECT_EQ(again.solves(), 0u);
  ASSERT_EQ(loaded->alphas.size(), first->alphas.size());
  for (std::size_t i = 0; i < first->alphas.size(); ++i) {
    EXPECT_EQ(loaded->alphas[i].action, first->alphas[i].action);
    EXPECT_EQ(loaded->alphas[i].values, first->alphas[i].values);
  }
  EXPECT_EQ(loaded->model_hash, first->model_hash);
  fs::remove_all(dir);
}

TEST(Solver, RejectsBadOptions) {
  auto m = build_dialog_pomdp(kb44());
  SolverOptions opt;
  opt.epsilon = 0;
  EXPECT_THROW(solve(m, opt), ConfigError);
}
