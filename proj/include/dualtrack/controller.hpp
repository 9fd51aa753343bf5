#pragma once
// Dual-track dialog controller.
//
// The dialog track (model M, belief b) picks language actions; the knowledge
// track (model M+, belief b+) watches for evidence that the requested item or
// recipient is missing from the KB. Each loop iteration:
//   1. augmentation guards: b+ mass on unknown-recipient states > tau_b,
//      else unknown-item mass > tau_b, else EF counter delta > Delta
//   2. delta += 1 when the last three dialog entropies fluctuate
//   3. reword prompt if H(b) > h, otherwise the policy action pi(b)
//   4. parse the reply, update b, push b into the 3-slot history
//   5. update b+ only after a confirmation question
// A report action ends the dialog.

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "dualtrack/kb.hpp"
#include "dualtrack/model.hpp"
#include "dualtrack/parser.hpp"
#include "dualtrack/solver.hpp"

namespace dualtrack {

// tau_b(|KB|) = 1/(1 + e^-floor(sqrt|KB|)) - 1/floor(sqrt|KB|)
inline double tau_b(std::size_t kb_size) {
  if (kb_size < 4) throw ConfigError("kb_size", "tau_b needs |KB| >= 4, got " + std::to_string(kb_size));
  const double r = std::floor(std::sqrt(static_cast<double>(kb_size)));
  return 1.0 / (1.0 + std::exp(-r)) - 1.0 / r;
}

// Delta(|KB|) = max(0, floor(sqrt|KB|))
inline std::size_t delta_threshold(std::size_t kb_size) {
  if (kb_size < 1) throw ConfigError("kb_size", "Delta needs |KB| >= 1");
  auto r = static_cast<long long>(std::floor(std::sqrt(static_cast<double>(kb_size))));
  return static_cast<std::size_t>(std::max(0LL, r));
}

// sign(x) with sign(0) = +1, so equal neighbours are not a fluctuation.
inline bool nonnegative_sign(double x) { return x >= 0.0; }

// True iff the middle entropy is a strict local extremum of the three.
inline bool entropy_fluctuation(const std::array<double, 3>& h) {
  return nonnegative_sign(h[1] - h[0]) != nonnegative_sign(h[2] - h[1]);
}

inline bool entropy_fluctuation(const std::array<BeliefState, 3>& history) {
  return entropy_fluctuation({entropy(history[0]), entropy(history[1]), entropy(history[2])});
}

enum class AgentVariant : std::uint8_t {
  dual,       // all three guards
  baseline1,  // unknown-state marginal vs tau_b only
  baseline2,  // EF counter vs Delta only
  baseline3,  // augment once after a fixed number of turns
};

inline std::string_view to_string(AgentVariant v) {
  switch (v) {
    case AgentVariant::dual: return "dual";
    case AgentVariant::baseline1: return "b1";
    case AgentVariant::baseline2: return "b2";
    case AgentVariant::baseline3: return "b3";
  }
  return "?";
}

inline AgentVariant agent_variant_from_string(std::string_view s) {
  if (s == "dual") return AgentVariant::dual;
  if (s == "b1" || s == "baseline1") return AgentVariant::baseline1;
  if (s == "b2" || s == "baseline2") return AgentVariant::baseline2;
  if (s == "b3" || s == "baseline3") return AgentVariant::baseline3;
  throw ConfigError("agent", "unknown agent variant '" + std::string(s) + "'");
}

// Which turns update the knowledge belief b+.
enum class KnowledgeUpdate : std::uint8_t {
  confirmations,  // only after confirmation questions
  all,            // after every observation; unknown-word slots observe ẑ
};

inline std::string_view to_string(KnowledgeUpdate k) {
  return k == KnowledgeUpdate::confirmations ? "confirmations" : "all";
}

inline KnowledgeUpdate knowledge_update_from_string(std::string_view s) {
  if (s == "confirmations") return KnowledgeUpdate::confirmations;
  if (s == "all") return KnowledgeUpdate::all;
  throw ConfigError("knowledge_update", "expected confirmations or all, got '" + std::string(s) + "'");
}

struct ControllerConfig {
  NoiseModel noise;
  Rewards rewards;
  double discount = kDefaultDiscount;
  SolverOptions solver;
  // Entropy threshold for the reword prompt. Unset: h_ratio * ln|S| of the
  // current dialog model.
  std::optional<double> h;
  double h_ratio = 0.9;
  AgentVariant variant = AgentVariant::dual;
  KnowledgeUpdate knowledge_update = KnowledgeUpdate::confirmations;
  int fixed_turns = 8;  // baseline3's N
  // Safety cap: at this many answered turns the agent reports its MAP state.
  int max_turns = 40;
  // Apply the channel noise to recognized observations (simulation, demos).
  bool simulate_noise = false;
  std::uint64_t seed = 1;

  void validate() const {
    noise.validate();
    rewards.validate();
    if (!(discount > 0.0 && discount < 1.0)) throw ConfigError("discount", "must lie in (0, 1)");
    if (h && *h < 0.0) throw ConfigError("h", "must be non-negative");
    if (!(h_ratio > 0.0)) throw ConfigError("h_ratio", "must be positive");
    if (fixed_turns < 1) throw ConfigError("fixed_turns", "must be >= 1");
    if (max_turns < 1) throw ConfigError("max_turns", "must be >= 1");
  }
};

enum class Phase : std::uint8_t { awaiting_request, in_dialog, awaiting_new_name, terminated };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::awaiting_request: return "awaiting_request";
    case Phase::in_dialog: return "in_dialog";
    case Phase::awaiting_new_name: return "awaiting_new_name";
    case Phase::terminated: return "terminated";
  }
  return "?";
}

struct AgentAction {
  enum class Kind : std::uint8_t { greeting, reword, question, name_request, report } kind = Kind::greeting;
  std::optional<ActionKey> action;  // question, report
  Slot slot = Slot::task;           // name_request
  std::string id;                   // stable label, e.g. "confirm:item:coffee"
  std::string text;

  bool is_request_prompt() const { return kind == Kind::greeting || kind == Kind::reword; }
};

inline std::string_view to_string(AgentAction::Kind k) {
  switch (k) {
    case AgentAction::Kind::greeting: return "greeting";
    case AgentAction::Kind::reword: return "reword";
    case AgentAction::Kind::question: return "question";
    case AgentAction::Kind::name_request: return "name_request";
    case AgentAction::Kind::report: return "report";
  }
  return "?";
}

enum class AugmentTrigger : std::uint8_t { unknown_recipient_mass, unknown_item_mass, entropy_fluctuations, fixed_turns };

inline std::string_view to_string(AugmentTrigger t) {
  switch (t) {
    case AugmentTrigger::unknown_recipient_mass: return "tau_recipient";
    case AugmentTrigger::unknown_item_mass: return "tau_item";
    case AugmentTrigger::entropy_fluctuations: return "ef";
    case AugmentTrigger::fixed_turns: return "fixed_turns";
  }
  return "?";
}

struct KbMutation {
  Category category = Category::item;
  std::string name;
  int turn = 0;
};

struct DialogEvent {
  int turn = 0;
  std::string prompt_id, prompt_kind, prompt_text;
  std::string utterance;
  std::string parse_kind;
  std::optional<std::string> unknown_surface;
  std::vector<std::string> observations;
  bool random_observation = false;
  bool discarded_observation = false;
  std::optional<std::string> unknown_flag;
  bool knowledge_updated = false;
  std::optional<std::string> name_outcome;  // "added" | "known" | "empty"
  std::vector<KbMutation> kb_mutations;
  double entropy = 0.0;
  bool fluctuation = false;
  std::size_t delta = 0;
  std::size_t kb_size = 0;
  double tau_b = 0.0;
  std::size_t delta_threshold = 0;
  double h = 0.0;
  double unknown_item_mass = 0.0, unknown_recipient_mass = 0.0;
  std::vector<std::pair<std::string, double>> top_states;
  std::optional<std::string> augment_trigger;
  std::optional<std::string> augment_slot;
  bool forced_report = false;
  std::string reply_id, reply_kind, reply_text;
  std::string phase;
};

inline nlohmann::json to_json(const DialogEvent& e) {
  nlohmann::json j;
  j["turn"] = e.turn;
  j["prompt"] = {{"id", e.prompt_id}, {"kind", e.prompt_kind}, {"text", e.prompt_text}};
  j["utterance"] = e.utterance;
  j["parse"] = {{"kind", e.parse_kind}};
  if (e.unknown_surface) j["parse"]["unknown_surface"] = *e.unknown_surface;
  j["observations"] = e.observations;
  j["random_observation"] = e.random_observation;
  j["discarded_observation"] = e.discarded_observation;
  j["unknown_flag"] = e.unknown_flag ? nlohmann::json(*e.unknown_flag) : nlohmann::json(nullptr);
  j["knowledge_updated"] = e.knowledge_updated;
  j["name_outcome"] = e.name_outcome ? nlohmann::json(*e.name_outcome) : nlohmann::json(nullptr);
  j["kb_mutations"] = nlohmann::json::array();
  for (const auto& m : e.kb_mutations)
    j["kb_mutations"].push_back({{"category", to_string(m.category)}, {"name", m.name}, {"turn", m.turn}});
  j["entropy"] = e.entropy;
  j["fluctuation"] = e.fluctuation;
  j["delta"] = e.delta;
  j["kb_size"] = e.kb_size;
  j["tau_b"] = e.tau_b;
  j["delta_threshold"] = e.delta_threshold;
  j["h"] = e.h;
  j["unknown_mass"] = {{"item", e.unknown_item_mass}, {"recipient", e.unknown_recipient_mass}};
  j["top_states"] = nlohmann::json::array();
  for (const auto& [name, p] : e.top_states) j["top_states"].push_back({{"state", name}, {"p", p}});
  j["augment"] = e.augment_trigger
                     ? nlohmann::json{{"trigger", *e.augment_trigger}, {"slot", e.augment_slot.value_or("")}}
                     : nlohmann::json(nullptr);
  j["forced_report"] = e.forced_report;
  j["reply"] = {{"id", e.reply_id}, {"kind", e.reply_kind}, {"text", e.reply_text}};
  j["phase"] = e.phase;
  return j;
}

inline DialogEvent event_from_json(const nlohmann::json& j) {
  DialogEvent e;
  e.turn = j.at("turn").get<int>();
  e.prompt_id = j.at("prompt").at("id").get<std::string>();
  e.prompt_kind = j.at("prompt").at("kind").get<std::string>();
  e.prompt_text = j.at("prompt").at("text").get<std::string>();
  e.utterance = j.at("utterance").get<std::string>();
  e.parse_kind = j.at("parse").at("kind").get<std::string>();
  if (j.at("parse").contains("unknown_surface")) e.unknown_surface = j["parse"]["unknown_surface"].get<std::string>();
  e.observations = j.value("observations", std::vector<std::string>{});
  e.random_observation = j.value("random_observation", false);
  e.discarded_observation = j.value("discarded_observation", false);
  if (j.contains("unknown_flag") && !j["unknown_flag"].is_null()) e.unknown_flag = j["unknown_flag"].get<std::string>();
  e.knowledge_updated = j.value("knowledge_updated", false);
  if (j.contains("name_outcome") && !j["name_outcome"].is_null()) e.name_outcome = j["name_outcome"].get<std::string>();
  if (j.contains("kb_mutations"))
    for (const auto& m : j["kb_mutations"]) {
      auto cat = category_from_string(m.at("category").get<std::string>());
      if (!cat) throw Error("bad kb mutation category");
      e.kb_mutations.push_back({*cat, m.at("name").get<std::string>(), m.at("turn").get<int>()});
    }
  e.entropy = j.at("entropy").get<double>();
  e.fluctuation = j.value("fluctuation", false);
  e.delta = j.at("delta").get<std::size_t>();
  e.kb_size = j.value("kb_size", std::size_t{0});
  e.tau_b = j.value("tau_b", 0.0);
  e.delta_threshold = j.value("delta_threshold", std::size_t{0});
  e.h = j.value("h", 0.0);
  if (j.contains("unknown_mass")) {
    e.unknown_item_mass = j["unknown_mass"].value("item", 0.0);
    e.unknown_recipient_mass = j["unknown_mass"].value("recipient", 0.0);
  }
  if (j.contains("top_states"))
    for (const auto& t : j["top_states"]) e.top_states.emplace_back(t.at("state").get<std::string>(), t.at("p").get<double>());
  if (j.contains("augment") && !j["augment"].is_null()) {
    e.augment_trigger = j["augment"].at("trigger").get<std::string>();
    e.augment_slot = j["augment"].at("slot").get<std::string>();
  }
  e.forced_report = j.value("forced_report", false);
  e.reply_id = j.at("reply").at("id").get<std::string>();
  e.reply_kind = j.at("reply").at("kind").get<std::string>();
  e.reply_text = j.at("reply").at("text").get<std::string>();
  e.phase = j.value("phase", std::string{});
  return e;
}

// ---- surface text -----------------------------------------------------------

inline std::string question_text(const KnowledgeBase& kb, const ActionKey& a) {
  auto name = [&](EntityId e) { return text::surface_of(kb.entity(e).canonical_name); };
  switch (a.kind) {
    case ActionKind::wh:
      switch (a.slot) {
        case Slot::task: return "What would you like me to do?";
        case Slot::item: return "What item should I bring?";
        case Slot::recipient: return "Who should I bring the item to?";
      }
      break;
    case ActionKind::confirm:
      switch (a.slot) {
        case Slot::task: return "Do you want me to do a " + name(a.value) + "?";
        case Slot::item: return "Do you want me to deliver " + name(a.value) + "?";
        case Slot::recipient: return "Is this delivery for " + name(a.value) + "?";
      }
      break;
    case ActionKind::confirm_unknown:
      return a.slot == Slot::item ? "Is it an item I do not know?" : "Is it a person I do not know?";
    case ActionKind::report: {
      const auto& t = a.target;
      return "Execute: Robot brings " + name(t.item) + " for " + text::capitalize(name(t.recipient)) +
             "; the dialog is over.";
    }
  }
  return "?";
}

inline std::string name_request_text(Slot s) {
  if (s == Slot::recipient)
    return "It seems I do not know the person you are talking about. Please write their name so I can learn it.";
  return "It seems I do not know the item you are talking about. Please write its name so I can learn it.";
}

inline constexpr std::string_view kGreetingText = "How can I help you?";
inline constexpr std::string_view kRewordText = "Please reword your service request.";

struct ControllerState {
  KnowledgeBase kb;
  std::shared_ptr<const PomdpModel> dialog_model;
  std::shared_ptr<const PomdpModel> knowledge_model;
  std::shared_ptr<const Policy> policy;
  BeliefState b;
  BeliefState b_plus;
  std::array<BeliefState, 3> history;  // oldest first
  std::size_t delta = 0;
  Phase phase = Phase::awaiting_request;
  AgentAction pending;  // what the agent last said
  int turn = 0;         // answered turns so far
  bool fixed_turn_fired = false;
  double qa_cost = 0.0;
  std::size_t questions = 0;
  std::optional<StateKey> reported;
  std::mt19937_64 rng;
};

struct StepResult {
  AgentAction reply;
  DialogEvent event;
};

class DialogController {
 public:
  DialogController(KnowledgeBase kb, ControllerConfig cfg, std::shared_ptr<PolicyCache> cache)
      : cfg_(std::move(cfg)), cache_(cache ? std::move(cache) : std::make_shared<PolicyCache>()) {
    cfg_.validate();
    kb.require_dialog_ready();
    tau_b(kb_size(kb));
    st_.kb = std::move(kb);
    st_.rng.seed(cfg_.seed);
    rebuild_models();
    st_.b = BeliefState::uniform(st_.dialog_model->num_states());
    st_.b_plus = BeliefState::uniform(st_.knowledge_model->num_states());
    st_.history = {st_.b, st_.b, st_.b};
    st_.delta = 0;
    st_.phase = Phase::awaiting_request;
    st_.pending = select_action();
  }

  const ControllerState& state() const { return st_; }
  const ControllerConfig& config() const { return cfg_; }
  const AgentAction& current_prompt() const { return st_.pending; }
  bool terminated() const { return st_.phase == Phase::terminated; }

  double h_threshold() const {
    return cfg_.h ? *cfg_.h : cfg_.h_ratio * std::log(static_cast<double>(st_.dialog_model->num_states()));
  }

  // Replaces both beliefs and re-selects the pending action. The history is
  // reset to {b, b, b}; delta is kept.
  void set_beliefs(BeliefState b, BeliefState b_plus) {
    if (st_.phase == Phase::terminated) throw SessionTerminated("dialog already terminated");
    if (b.size() != st_.dialog_model->num_states() || !b.valid(1e-9)) throw Error("bad dialog belief");
    if (b_plus.size() != st_.knowledge_model->num_states() || !b_plus.valid(1e-9)) throw Error("bad knowledge belief");
    st_.b = std::move(b);
    st_.b_plus = std::move(b_plus);
    st_.history = {st_.b, st_.b, st_.b};
  }

  // Marginal of b+ over states whose `slot` is the unknown entity.
  double unknown_mass(Slot slot) const {
    double m = 0.0;
    const auto& km = *st_.knowledge_model;
    for (std::size_t s = 0; s < km.num_states(); ++s)
      if (!km.states[s].terminal && km.states[s].get(slot) == kUnknownEntity) m += st_.b_plus[s];
    return m;
  }

  StepResult step(std::string_view utterance) {
    if (st_.phase == Phase::terminated) throw SessionTerminated("dialog already terminated");
    DialogEvent ev;
    ev.turn = st_.turn;
    ev.prompt_id = st_.pending.id;
    ev.prompt_kind = to_string(st_.pending.kind);
    ev.prompt_text = st_.pending.text;
    ev.utterance = std::string(utterance);

    if (st_.pending.kind == AgentAction::Kind::name_request) {
      absorb_name(utterance, ev);
    } else {
      absorb_answer(utterance, ev);
    }
    ++st_.turn;

    st_.pending = next_action(ev);
    fill_telemetry(ev);
    return StepResult{st_.pending, std::move(ev)};
  }

  // Starts an augmentation for `slot`: the next prompt asks for the name.
  void augment(Slot slot) {
    if (slot != Slot::item && slot != Slot::recipient) throw Error("only items and recipients can be learned");
    st_.phase = Phase::awaiting_new_name;
    st_.pending = AgentAction{AgentAction::Kind::name_request, std::nullopt, slot,
                              "name_request:" + std::string(to_string(slot)), name_request_text(slot)};
  }

  // Belief b over the new dialog model built from b+: known-state mass is
  // carried over, mass on unknown states of `slot` moves to the states of the
  // new entity, everything else is dropped; the result is renormalized.
  static BeliefState remap_knowledge_belief(const PomdpModel& old_knowledge, const BeliefState& b_plus,
                                            const PomdpModel& new_dialog, Slot slot, EntityId added) {
    BeliefState out{std::vector<double>(new_dialog.num_states(), 0.0)};
    for (std::size_t s = 0; s < old_knowledge.num_states(); ++s) {
      StateKey key = old_knowledge.states[s];
      if (key.terminal) continue;
      if (key.has_unknown()) {
        if (key.get(slot) != kUnknownEntity) continue;
        (slot == Slot::item ? key.item : key.recipient) = added;
      }
      if (auto idx = new_dialog.state_index(key)) out.probs[*idx] += b_plus[s];
    }
    double sum = 0.0;
    for (double p : out.probs) sum += p;
    if (!(sum > 0.0)) return BeliefState::uniform(new_dialog.num_states());
    out.normalize();
    return out;
  }

 private:
  void rebuild_models() {
    auto dm = std::make_shared<const PomdpModel>(build_dialog_pomdp(st_.kb, cfg_.noise, cfg_.rewards, cfg_.discount));
    auto km = std::make_shared<const PomdpModel>(
        build_knowledge_pomdp(st_.kb, cfg_.noise, cfg_.rewards, cfg_.discount));
    st_.policy = cache_->get(*dm, cfg_.solver);
    st_.dialog_model = std::move(dm);
    st_.knowledge_model = std::move(km);
  }

  QuestionContext context_of(const AgentAction& a) const {
    if (a.is_request_prompt()) return QuestionContext::request();
    if (a.kind == AgentAction::Kind::question && a.action) {
      if (a.action->kind == ActionKind::wh) return QuestionContext::wh(a.action->slot);
      if (a.action->kind == ActionKind::confirm) return QuestionContext::confirm(a.action->slot);
    }
    throw Error("no answer expected for prompt " + a.id);
  }

  void absorb_answer(std::string_view utterance, DialogEvent& ev) {
    const auto ctx = context_of(st_.pending);
    const auto p = parse(utterance, st_.kb, ctx);
    ev.parse_kind = to_string(p.kind);
    ev.unknown_surface = p.unknown_surface;
    ObservationChannel channel;
    if (cfg_.simulate_noise) channel.noise = cfg_.noise;
    const ActionKey last = st_.pending.action.value_or(ActionKey{});
    const auto obs = to_observation(p, ctx, last, st_.kb, st_.rng, channel);
    if (obs.unknown_slot) ev.unknown_flag = std::string(to_string(*obs.unknown_slot));

    const auto& dm = *st_.dialog_model;
    for (const auto& step : obs.steps) {
      ev.observations.push_back(observation_name(st_.kb, step.observation));
      ev.random_observation |= step.random;
      const auto a = dm.action_index(step.action);
      const auto z = dm.observation_index(step.observation);
      if (!a || !z) throw Error("observation outside the dialog model");
      try {
        st_.b = belief_update(dm, st_.b, *a, *z);
      } catch (const ZeroProbabilityObservation&) {
        ev.discarded_observation = true;
      }
    }
    st_.history = {st_.history[1], st_.history[2], st_.b};
    st_.phase = Phase::in_dialog;

    const bool confirmation =
        st_.pending.kind == AgentAction::Kind::question && st_.pending.action->kind == ActionKind::confirm;
    if (confirmation) {
      ev.knowledge_updated |= update_knowledge(st_.pending.action.value(), obs.steps.front().observation, ev);
    } else if (cfg_.knowledge_update == KnowledgeUpdate::all) {
      for (const auto& step : obs.steps) {
        ObsKey z = step.observation;
        if (obs.unknown_slot && step.action.slot == *obs.unknown_slot) z = unknown_observation(*obs.unknown_slot);
        ev.knowledge_updated |= update_knowledge(step.action, z, ev);
      }
    }
  }

  // ẑ for `slot`, replaced by a random known value with the channel error
  // rate when noise is simulated.
  ObsKey unknown_observation(Slot slot) {
    if (cfg_.simulate_noise) {
      const double p = cfg_.noise.p_slot(st_.kb.count(category_of(slot)));
      if (std::uniform_real_distribution<double>(0.0, 1.0)(st_.rng) >= p)
        return detail::random_slot_observation(st_.kb, slot, st_.rng);
    }
    return ObsKey{ObsKind::unknown_value, slot, {}};
  }

  bool update_knowledge(const ActionKey& action, const ObsKey& z, DialogEvent& ev) {
    const auto& km = *st_.knowledge_model;
    const auto a = km.action_index(action);
    const auto zi = km.observation_index(z);
    if (!a || !zi) throw Error("observation outside the knowledge model");
    try {
      st_.b_plus = belief_update(km, st_.b_plus, *a, *zi);
      return true;
    } catch (const ZeroProbabilityObservation&) {
      ev.discarded_observation = true;
      return false;
    }
  }

  void reset_tracking() {
    st_.b_plus = BeliefState::uniform(st_.knowledge_model->num_states());
    st_.history = {st_.b, st_.b, st_.b};
    st_.delta = 0;
  }

  void absorb_name(std::string_view utterance, DialogEvent& ev) {
    const Slot slot = st_.pending.slot;
    const auto cat = category_of(slot);
    ev.parse_kind = "name";
    const auto canonical = text::canonical_name(utterance);
    st_.phase = Phase::in_dialog;
    if (canonical.empty()) {
      ev.name_outcome = "empty";
      return;
    }
    const auto existing = st_.kb.lookup(text::surface_of(canonical));
    if (existing) {
      // Already known: keep the KB, concentrate b on that entity's states.
      ev.name_outcome = "known";
      if (st_.kb.entity(*existing).category == cat) {
        const auto& dm = *st_.dialog_model;
        BeliefState cond{std::vector<double>(dm.num_states(), 0.0)};
        double sum = 0.0;
        for (std::size_t s = 0; s < dm.num_states(); ++s)
          if (!dm.states[s].terminal && dm.states[s].get(slot) == *existing) sum += cond.probs[s] = st_.b[s];
        if (!(sum > 0.0))
          for (std::size_t s = 0; s < dm.num_states(); ++s)
            if (!dm.states[s].terminal && dm.states[s].get(slot) == *existing) cond.probs[s] = 1.0;
        cond.normalize();
        st_.b = std::move(cond);
      }
      reset_tracking();
      return;
    }
    const auto old_knowledge = st_.knowledge_model;
    const auto old_b_plus = st_.b_plus;
    const auto added = st_.kb.add_entity(cat, utterance, st_.turn);
    ev.name_outcome = "added";
    ev.kb_mutations.push_back({cat, added.canonical_name, st_.turn});
    rebuild_models();
    st_.b = remap_knowledge_belief(*old_knowledge, old_b_plus, *st_.dialog_model, slot, added.id);
    reset_tracking();
  }

  std::optional<std::pair<AugmentTrigger, Slot>> check_guards() const {
    const bool tau_guard = cfg_.variant == AgentVariant::dual || cfg_.variant == AgentVariant::baseline1;
    const bool ef_guard = cfg_.variant == AgentVariant::dual || cfg_.variant == AgentVariant::baseline2;
    const auto size = kb_size(st_.kb);
    const double r_mass = unknown_mass(Slot::recipient), i_mass = unknown_mass(Slot::item);
    auto more_likely = [&] { return r_mass > i_mass ? Slot::recipient : Slot::item; };
    if (tau_guard) {
      const double tau = tau_b(size);
      if (r_mass > tau) return std::pair{AugmentTrigger::unknown_recipient_mass, Slot::recipient};
      if (i_mass > tau) return std::pair{AugmentTrigger::unknown_item_mass, Slot::item};
    }
    if (ef_guard && st_.delta > delta_threshold(size))
      return std::pair{AugmentTrigger::entropy_fluctuations, more_likely()};
    if (cfg_.variant == AgentVariant::baseline3 && !st_.fixed_turn_fired && st_.turn >= cfg_.fixed_turns)
      return std::pair{AugmentTrigger::fixed_turns, more_likely()};
    return std::nullopt;
  }

  AgentAction next_action(DialogEvent& ev) {
    if (st_.turn >= cfg_.max_turns) {
      ev.forced_report = true;
      return report(map_state());
    }
    if (auto g = check_guards()) {
      ev.augment_trigger = std::string(to_string(g->first));
      ev.augment_slot = std::string(to_string(g->second));
      if (g->first == AugmentTrigger::fixed_turns) st_.fixed_turn_fired = true;
      augment(g->second);
      charge(cfg_.rewards.wh);
      return st_.pending;
    }
    if (entropy_fluctuation(st_.history)) {
      ++st_.delta;
      ev.fluctuation = true;
    }
    return select_action();
  }

  AgentAction select_action() {
    const auto& dm = *st_.dialog_model;
    if (entropy(st_.b) > h_threshold()) {
      charge(cfg_.rewards.wh);
      if (st_.phase == Phase::awaiting_request)
        return AgentAction{AgentAction::Kind::greeting, std::nullopt, Slot::task, "greeting", std::string(kGreetingText)};
      return AgentAction{AgentAction::Kind::reword, std::nullopt, Slot::task, "reword", std::string(kRewordText)};
    }
    const std::size_t a = st_.policy->action(st_.b);
    const auto& key = dm.actions[a];
    if (key.kind == ActionKind::report) return report(key.target);
    charge(key.kind == ActionKind::wh ? cfg_.rewards.wh : cfg_.rewards.confirm);
    return AgentAction{AgentAction::Kind::question, key, Slot::task, action_name(st_.kb, key), question_text(st_.kb, key)};
  }

  StateKey map_state() const {
    const auto& dm = *st_.dialog_model;
    std::size_t best = 0;
    double top = -1.0;
    for (std::size_t s = 0; s < dm.num_states(); ++s)
      if (!dm.states[s].terminal && st_.b[s] > top) {
        top = st_.b[s];
        best = s;
      }
    return dm.states[best];
  }

  AgentAction report(const StateKey& target) {
    st_.phase = Phase::terminated;
    st_.reported = target;
    ActionKey key{ActionKind::report, Slot::task, {}, target};
    return AgentAction{AgentAction::Kind::report, key, Slot::task, action_name(st_.kb, key), question_text(st_.kb, key)};
  }

  void charge(double reward) {
    st_.qa_cost += std::abs(reward);
    ++st_.questions;
  }

  void fill_telemetry(DialogEvent& ev) const {
    const auto& dm = *st_.dialog_model;
    const auto size = kb_size(st_.kb);
    ev.entropy = entropy(st_.b);
    ev.delta = st_.delta;
    ev.kb_size = size;
    ev.tau_b = tau_b(size);
    ev.delta_threshold = delta_threshold(size);
    ev.h = h_threshold();
    ev.unknown_item_mass = unknown_mass(Slot::item);
    ev.unknown_recipient_mass = unknown_mass(Slot::recipient);
    std::vector<std::size_t> order(dm.num_states());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return st_.b[x] > st_.b[y]; });
    for (std::size_t i = 0; i < std::min<std::size_t>(3, order.size()); ++i)
      ev.top_states.emplace_back(state_name(st_.kb, dm.states[order[i]]), st_.b[order[i]]);
    ev.reply_id = st_.pending.id;
    ev.reply_kind = to_string(st_.pending.kind);
    ev.reply_text = st_.pending.text;
    ev.phase = to_string(st_.phase);
  }

  ControllerConfig cfg_;
  std::shared_ptr<PolicyCache> cache_;
  ControllerState st_;
};

}  // namespace dualtrack
