#include <gtest/gtest.h>

#include <cmath>

#include "dualtrack/controller.hpp"
#include "dualtrack/simuser.hpp"

using namespace dualtrack;

namespace {

std::shared_ptr<PolicyCache> cache() {
  static auto c = std::make_shared<PolicyCache>();
  return c;
}

KnowledgeBase kb17() { return make_sized_kb(17); }

KnowledgeBase kb26() {
  return make_delivery_kb({"coffee", "hamburger", "pop", "sandwich", "soda"}, {"alice", "ellen", "bob", "carol", "frank"});
}

GroundTruthRequest known(const KnowledgeBase& kb, const char* item, const char* person) {
  auto slot = [&](Category c, const char* n) { return SlotValue{kb.find(c, n), n}; };
  return {slot(Category::task, "delivery"), slot(Category::item, item), slot(Category::recipient, person)};
}

// b+ with `mass` spread over the unknown states of `slot`, the rest uniform elsewhere.
BeliefState skewed(const PomdpModel& km, Slot slot, double mass) {
  std::size_t on = 0;
  for (const auto& s : km.states) on += !s.terminal && s.get(slot) == kUnknownEntity;
  BeliefState b{std::vector<double>(km.num_states(), 0.0)};
  for (std::size_t i = 0; i < km.num_states(); ++i) {
    bool hit = !km.states[i].terminal && km.states[i].get(slot) == kUnknownEntity;
    b.probs[i] = hit ? mass / double(on) : (1 - mass) / double(km.num_states() - on);
  }
  return b;
}

std::vector<TrialRecord> sample_trials(const KnowledgeBase& kb, ControllerConfig cfg, int n, double p_unknown) {
  std::vector<TrialRecord> out;
  std::mt19937_64 rng(17);
  for (int i = 0; i < n; ++i) {
    cfg.seed = 1000 + i;
    cfg.simulate_noise = true;
    auto req = sample_request(kb, {p_unknown / 2, p_unknown / 2}, default_reserve_names(), rng);
    out.push_back(run_trial(kb, req, cfg, cache()));
  }
  return out;
}

}  // namespace

TEST(Thresholds, TauB) {
  EXPECT_NEAR(tau_b(17), 1.0 / (1.0 + std::exp(-4.0)) - 0.25, 1e-15);
  EXPECT_NEAR(tau_b(17), 0.73201, 1e-5);
  EXPECT_NEAR(tau_b(26), 0.79331, 1e-5);
  EXPECT_NEAR(tau_b(37), 0.83086, 1e-5);
  EXPECT_THROW(tau_b(3), ConfigError);
  for (std::size_t n = 4; n < 500; ++n) {
    EXPECT_GT(tau_b(n), 0.0);
    EXPECT_LT(tau_b(n), 1.0);
  }
}

TEST(Thresholds, Delta) {
  EXPECT_EQ(delta_threshold(17), 4u);
  EXPECT_EQ(delta_threshold(26), 5u);
  EXPECT_EQ(delta_threshold(1), 1u);
  EXPECT_EQ(delta_threshold(36), 6u);
}

TEST(Thresholds, EntropyFluctuationTruthTable) {
  EXPECT_TRUE(entropy_fluctuation({1.0, 2.0, 1.5}));
  EXPECT_FALSE(entropy_fluctuation({1.0, 1.5, 2.0}));
  EXPECT_FALSE(entropy_fluctuation({1.0, 1.0, 2.0}));
  EXPECT_FALSE(entropy_fluctuation({3.0, 2.0, 1.0}));
  EXPECT_TRUE(entropy_fluctuation({3.0, 1.0, 2.0}));
  EXPECT_TRUE(entropy_fluctuation({1.0, 1.0, 0.5}));
  EXPECT_TRUE(entropy_fluctuation({1.0, 0.5, 0.5}));
  EXPECT_FALSE(entropy_fluctuation({1.0, 1.0, 1.0}));
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(0, 3);
  for (int i = 0; i < 1000; ++i) {
    std::array<double, 3> h{double(d(rng)), double(d(rng)), double(d(rng))};
    bool up1 = h[1] >= h[0], up2 = h[2] >= h[1];
    EXPECT_EQ(entropy_fluctuation(h), up1 != up2);
  }
}

TEST(Controller, FreshStateAsksForARequest) {
  DialogController ctl(kb17(), {}, cache());
  EXPECT_NEAR(ctl.h_threshold(), 0.9 * std::log(17.0), 1e-12);
  EXPECT_EQ(ctl.current_prompt().kind, AgentAction::Kind::greeting);
  EXPECT_EQ(ctl.current_prompt().text, "How can I help you?");
  EXPECT_GT(entropy(ctl.state().b), ctl.h_threshold());
  EXPECT_EQ(ctl.state().questions, 1u);
  EXPECT_DOUBLE_EQ(ctl.state().qa_cost, 1.5);
  auto r = ctl.step("um");
  EXPECT_TRUE(r.event.random_observation);
  // random draws still count as observations, so the belief may already be sharp
  EXPECT_EQ(r.reply.kind == AgentAction::Kind::reword, entropy(ctl.state().b) > ctl.h_threshold());
  if (r.reply.kind == AgentAction::Kind::reword) EXPECT_EQ(r.reply.text, "Please reword your service request.");
}

TEST(Controller, RejectsBadSetup) {
  EXPECT_THROW(DialogController(make_delivery_kb({"coffee"}, {"alice", "bob"}), {}, cache()), KbError);
  ControllerConfig bad;
  bad.max_turns = 0;
  EXPECT_THROW(DialogController(kb17(), bad, cache()), ConfigError);
  EXPECT_THROW(agent_variant_from_string("b4"), ConfigError);
}

TEST(Controller, RecipientMassAboveTauAugmentsFirst) {
  DialogController ctl(kb17(), {}, cache());
  const auto& km = *ctl.state().knowledge_model;
  ctl.set_beliefs(ctl.state().b, skewed(km, Slot::recipient, 0.75));
  EXPECT_NEAR(ctl.unknown_mass(Slot::recipient), 0.75, 1e-12);
  auto r = ctl.step("please bring alice coffee");
  EXPECT_EQ(r.reply.kind, AgentAction::Kind::name_request);
  EXPECT_EQ(r.reply.slot, Slot::recipient);
  EXPECT_EQ(r.event.augment_trigger, "tau_recipient");
  EXPECT_EQ(ctl.state().phase, Phase::awaiting_new_name);
}

TEST(Controller, ItemMassAboveTauAugmentsItem) {
  DialogController ctl(kb17(), {}, cache());
  ctl.set_beliefs(ctl.state().b, skewed(*ctl.state().knowledge_model, Slot::item, 0.75));
  auto r = ctl.step("please bring alice coffee");
  EXPECT_EQ(r.reply.slot, Slot::item);
  EXPECT_EQ(r.event.augment_trigger, "tau_item");
  EXPECT_EQ(r.reply.text, name_request_text(Slot::item));
}

TEST(Controller, MassBelowTauDoesNotAugment) {
  DialogController ctl(kb17(), {}, cache());
  ctl.set_beliefs(ctl.state().b, skewed(*ctl.state().knowledge_model, Slot::recipient, 0.73));
  auto r = ctl.step("please bring alice coffee");
  EXPECT_NE(r.reply.kind, AgentAction::Kind::name_request);
  EXPECT_FALSE(r.event.augment_trigger);
}

TEST(Controller, AugmentingANewRecipient) {
  DialogController ctl(kb17(), {}, cache());
  ctl.step("please bring alice coffee");
  ctl.augment(Slot::recipient);
  EXPECT_EQ(ctl.current_prompt().text,
            "It seems I do not know the person you are talking about. Please write their name so I can learn it.");
  auto r = ctl.step("Dennis!");
  const auto& st = ctl.state();
  EXPECT_EQ(r.event.name_outcome, "added");
  ASSERT_EQ(r.event.kb_mutations.size(), 1u);
  EXPECT_EQ(r.event.kb_mutations[0].name, "dennis");
  EXPECT_EQ(r.event.kb_mutations[0].category, Category::recipient);
  EXPECT_EQ(kb_size(st.kb), 21u);
  EXPECT_EQ(st.dialog_model->num_states(), 21u);
  EXPECT_EQ(st.b.size(), 21u);
  EXPECT_EQ(st.b_plus.size(), 21u + 5u + 4u);
  EXPECT_TRUE(st.b.valid());
  EXPECT_EQ(st.delta, 0u);
  EXPECT_EQ(entropy(st.history[0]), entropy(st.history[1]));
  EXPECT_EQ(entropy(st.history[1]), entropy(st.history[2]));
  EXPECT_EQ(st.kb.entity(*st.kb.find(Category::recipient, "dennis")).learned_turn, 1);
}

TEST(Controller, NameCollisionKeepsKb) {
  auto kb = kb17();
  DialogController ctl(kb, {}, cache());
  ctl.step("please bring coffee");
  ctl.augment(Slot::recipient);
  auto r = ctl.step("Alice");
  EXPECT_EQ(r.event.name_outcome, "known");
  EXPECT_TRUE(r.event.kb_mutations.empty());
  EXPECT_EQ(ctl.state().kb, kb);
  const auto alice = *kb.find(Category::recipient, "alice");
  const auto& dm = *ctl.state().dialog_model;
  double mass = 0;
  for (std::size_t s = 0; s < dm.num_states(); ++s)
    if (!dm.states[s].terminal && dm.states[s].recipient == alice) mass += ctl.state().b[s];
  EXPECT_NEAR(mass, 1.0, 1e-12);
  EXPECT_EQ(ctl.state().delta, 0u);
}

TEST(Controller, EmptyNameLeavesEverythingAlone) {
  DialogController ctl(kb17(), {}, cache());
  ctl.step("please bring alice coffee");
  ctl.augment(Slot::item);
  auto before = ctl.state().b;
  auto r = ctl.step("?!");
  EXPECT_EQ(r.event.name_outcome, "empty");
  EXPECT_EQ(ctl.state().b.probs, before.probs);
  EXPECT_EQ(kb_size(ctl.state().kb), 17u);
}

TEST(Controller, RemapMovesUnknownMassToNewEntity) {
  auto kb = kb17();
  auto km = build_knowledge_pomdp(kb);
  std::mt19937_64 rng(2);
  BeliefState bp{std::vector<double>(km.num_states())};
  for (auto& p : bp.probs) p = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  bp.normalize();
  auto grown = kb;
  auto dennis = grown.add_entity(Category::recipient, "dennis");
  auto dm = build_dialog_pomdp(grown);
  auto b = DialogController::remap_knowledge_belief(km, bp, dm, Slot::recipient, dennis.id);
  ASSERT_TRUE(b.valid());
  // oracle: keep known states and recipient-unknown states, drop the rest
  double kept = 0, unknown_r = 0;
  for (std::size_t s = 0; s < km.num_states(); ++s) {
    const auto& k = km.states[s];
    if (k.terminal || k.item == kUnknownEntity) continue;
    kept += bp[s];
    if (k.recipient == kUnknownEntity) unknown_r += bp[s];
  }
  double on_dennis = 0;
  for (std::size_t s = 0; s < dm.num_states(); ++s)
    if (!dm.states[s].terminal && dm.states[s].recipient == dennis.id) on_dennis += b[s];
  EXPECT_NEAR(on_dennis, unknown_r / kept, 1e-12);
  for (std::size_t s = 0; s < km.num_states(); ++s) {
    const auto& k = km.states[s];
    if (k.terminal || k.has_unknown()) continue;
    EXPECT_NEAR(b[*dm.state_index(k)], bp[s] / kept, 1e-12);
  }
  EXPECT_EQ(b[dm.term_index()], 0.0);
}

TEST(Controller, KnownRequestsWithoutNoiseAreReportedExactly) {
  auto kb = kb17();
  for (bool noiseless_model : {false, true}) {
    ControllerConfig cfg;
    if (noiseless_model) cfg.noise = NoiseModel::noiseless();
    for (auto item : kb.of(Category::item))
      for (auto person : kb.of(Category::recipient)) {
        auto req = known(kb, kb.entity(item).canonical_name.c_str(), kb.entity(person).canonical_name.c_str());
        auto rec = run_trial(kb, req, cfg, cache());
        EXPECT_TRUE(rec.report_correct) << rec.reported;
        EXPECT_FALSE(rec.augmented) << rec.reported;
        EXPECT_TRUE(rec.success);
      }
  }
}

TEST(Controller, KnowledgeBeliefMovesOnlyOnConfirmations) {
  auto kb = kb26();
  std::mt19937_64 rng(5);
  int confirmations_seen = 0;
  for (int trial = 0; trial < 40; ++trial) {
    ControllerConfig cfg;
    cfg.seed = trial + 1;
    cfg.simulate_noise = true;
    auto req = sample_request(kb, {0.25, 0.25}, default_reserve_names(), rng);
    DialogController ctl(kb, cfg, cache());
    while (!ctl.terminated()) {
      const auto prompt = ctl.current_prompt();
      const auto before = ctl.state().b_plus.probs;
      auto r = ctl.step(respond(req, prompt));
      const bool confirm = prompt.kind == AgentAction::Kind::question && prompt.action->kind == ActionKind::confirm;
      confirmations_seen += confirm;
      if (!confirm && prompt.kind != AgentAction::Kind::name_request) {
        EXPECT_EQ(ctl.state().b_plus.probs, before);
        EXPECT_FALSE(r.event.knowledge_updated);
      }
      if (confirm) EXPECT_TRUE(r.event.knowledge_updated || r.event.discarded_observation);
    }
  }
  EXPECT_GT(confirmations_seen, 0);
}

TEST(Controller, TurnInvariants) {
  for (auto variant : {AgentVariant::dual, AgentVariant::baseline1, AgentVariant::baseline2, AgentVariant::baseline3}) {
    ControllerConfig cfg;
    cfg.variant = variant;
    for (const auto& rec : sample_trials(kb26(), cfg, 30, 0.5)) {
      std::size_t count = 0;
      int augmentations = 0;
      for (const auto& ev : rec.events) {
        if (ev.name_outcome) count = 0;
        count += ev.fluctuation;
        // delta counts fluctuations since the last reset
        EXPECT_EQ(ev.delta, count);
        augmentations += ev.augment_trigger.has_value();
        if (ev.augment_trigger) {
          EXPECT_EQ(ev.reply_kind, "name_request");
          EXPECT_FALSE(ev.fluctuation);
          if (variant == AgentVariant::baseline1) EXPECT_NE(*ev.augment_trigger, "ef");
          if (variant == AgentVariant::baseline2) EXPECT_EQ(*ev.augment_trigger, "ef");
          if (variant == AgentVariant::baseline3) {
            EXPECT_EQ(*ev.augment_trigger, "fixed_turns");
            EXPECT_GE(ev.turn + 1, cfg.fixed_turns);
          }
        }
        // reword iff H(b) > h at selection time
        if (!ev.augment_trigger && !ev.forced_report && ev.phase != "terminated") {
          EXPECT_EQ(ev.reply_kind == "reword", ev.entropy > ev.h) << ev.entropy << " " << ev.h;
        }
        if (ev.reply_kind == "reword") EXPECT_GT(ev.entropy, ev.h);
      }
      if (variant == AgentVariant::baseline3) EXPECT_LE(augmentations, 1);
      EXPECT_EQ(rec.events.back().phase, "terminated");
      EXPECT_LE(rec.turns, cfg.max_turns);
    }
  }
}

TEST(Controller, MaxTurnsForcesAReport) {
  ControllerConfig cfg;
  cfg.max_turns = 2;
  DialogController ctl(kb17(), cfg, cache());
  ctl.step("hmm");
  auto r = ctl.step("hmm");
  EXPECT_TRUE(ctl.terminated());
  EXPECT_TRUE(r.event.forced_report);
  EXPECT_EQ(r.reply.kind, AgentAction::Kind::report);
  EXPECT_THROW(ctl.step("hello"), SessionTerminated);
}

// Unknown recipient, known item, default 26-entry profile: the recipient is
// learned after the fluctuation counter passes its threshold.
TEST(Controller, UnknownRecipientLearnedThroughFluctuations) {
  auto kb = kb26();
  GroundTruthRequest req = known(kb, "pop", "alice");
  req.recipient = SlotValue{std::nullopt, "dennis"};
  ControllerConfig cfg;
  cfg.seed = 6;
  auto rec = run_trial(kb, req, cfg, cache());
  std::optional<DialogEvent> trigger;
  for (const auto& ev : rec.events) {
    EXPECT_LE(ev.unknown_recipient_mass, ev.tau_b);
    if (ev.augment_trigger && !trigger) trigger = ev;
  }
  ASSERT_TRUE(trigger);
  EXPECT_EQ(trigger->augment_trigger, "ef");
  EXPECT_EQ(trigger->augment_slot, "recipient");
  EXPECT_EQ(trigger->delta, 6u);
  EXPECT_EQ(trigger->delta_threshold, 5u);
  EXPECT_TRUE(rec.augmentation_correct);
  EXPECT_TRUE(rec.report_correct);
  EXPECT_EQ(rec.events.back().reply_text, "Execute: Robot brings pop for Dennis; the dialog is over.");
}

TEST(Controller, AllObservationsModeSeesUnknownWords) {
  auto kb = kb17();
  ControllerConfig all;
  all.knowledge_update = KnowledgeUpdate::all;
  DialogController a(kb, all, cache());
  auto r = a.step("please bring dennis coffee");
  EXPECT_EQ(r.event.unknown_flag, "recipient");
  EXPECT_TRUE(r.event.knowledge_updated);
  EXPECT_EQ(r.reply.kind, AgentAction::Kind::name_request);
  EXPECT_EQ(r.reply.slot, Slot::recipient);

  DialogController c(kb, {}, cache());
  r = c.step("please bring dennis coffee");
  EXPECT_EQ(r.event.unknown_flag, "recipient");
  EXPECT_FALSE(r.event.knowledge_updated);
  EXPECT_NE(r.reply.kind, AgentAction::Kind::name_request);
  EXPECT_THROW(knowledge_update_from_string("some"), ConfigError);
}

TEST(Controller, EventsRoundTripThroughJson) {
  ControllerConfig cfg;
  for (const auto& rec : sample_trials(kb17(), cfg, 10, 0.5))
    for (const auto& ev : rec.events) {
      auto j = to_json(ev);
      EXPECT_EQ(to_json(event_from_json(j)), j);
      EXPECT_EQ(to_json(event_from_json(nlohmann::json::parse(j.dump()))).dump(), j.dump());
    }
}

TEST(Controller, SurfaceTexts) {
  auto kb = kb26();
  const auto task = *kb.find(Category::task, "delivery");
  EXPECT_EQ(question_text(kb, {ActionKind::confirm, Slot::item, *kb.find(Category::item, "hamburger"), {}}),
            "Do you want me to deliver hamburger?");
  EXPECT_EQ(question_text(kb, {ActionKind::confirm, Slot::recipient, *kb.find(Category::recipient, "ellen"), {}}),
            "Is this delivery for ellen?");
  EXPECT_EQ(question_text(kb, {ActionKind::wh, Slot::item, {}, {}}), "What item should I bring?");
  EXPECT_EQ(question_text(kb, {ActionKind::report, Slot::task, {}, {false, task, *kb.find(Category::item, "coffee"),
                                                                   *kb.find(Category::recipient, "bob")}}),
            "Execute: Robot brings coffee for Bob; the dialog is over.");
}
