#pragma once
// Simulated user: samples a ground-truth request, answers the agent
// truthfully in text, and scores finished dialogs.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dualtrack/controller.hpp"
#include "dualtrack/kb.hpp"
#include "dualtrack/model.hpp"
#include "dualtrack/text.hpp"

namespace dualtrack {

inline const std::vector<std::string>& default_item_pool() {
  static const std::vector<std::string> pool = {"coffee", "hamburger", "sandwich", "soda",  "pizza",  "cookie",
                                                "tea",    "apple",     "water",    "juice", "muffin", "salad"};
  return pool;
}

inline const std::vector<std::string>& default_recipient_pool() {
  static const std::vector<std::string> pool = {"alice", "nate",  "bob",   "carol", "eve",  "frank",
                                                "grace", "heidi", "ivan",  "judy",  "kevin", "laura"};
  return pool;
}

inline const std::vector<std::string>& default_reserve_names() {
  static const std::vector<std::string> pool = {"dennis", "mallory", "oscar",   "peggy",  "trent",  "victor",
                                                "walter", "yvonne",  "zoe",     "bagel",  "burrito", "donut",
                                                "lemonade", "noodles", "pretzel", "taco", "waffle", "yogurt"};
  return pool;
}

// One word per line, `#` comments.
inline std::vector<std::string> load_name_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("reserve", "cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    auto name = text::canonical_name(line);
    if (!name.empty()) out.push_back(name);
  }
  return out;
}

// Delivery KB with |KB| = items * recipients + 1 = n, the factorization
// closest to square (items <= recipients).
inline KnowledgeBase make_sized_kb(std::size_t n) {
  if (n < 5) throw ConfigError("kb_size", "must be at least 5");
  const std::size_t cells = n - 1;
  std::size_t items = 0;
  for (std::size_t i = 2; i * i <= cells; ++i)
    if (cells % i == 0) items = i;
  if (items == 0) throw ConfigError("kb_size", std::to_string(n) + " - 1 has no factorization with both factors >= 2");
  const std::size_t recipients = cells / items;
  if (recipients > default_recipient_pool().size() || items > default_item_pool().size())
    throw ConfigError("kb_size", std::to_string(n) + " exceeds the built-in name pools");
  return make_delivery_kb({default_item_pool().begin(), default_item_pool().begin() + static_cast<long>(items)},
                          {default_recipient_pool().begin(),
                           default_recipient_pool().begin() + static_cast<long>(recipients)});
}

struct SlotValue {
  std::optional<EntityId> id;  // unset: out-of-KB
  std::string name;            // canonical

  bool known() const { return id.has_value(); }
};

struct GroundTruthRequest {
  SlotValue task, item, recipient;

  const SlotValue& at(Slot s) const { return s == Slot::task ? task : s == Slot::item ? item : recipient; }
  std::optional<Slot> unknown_slot() const {
    if (!item.known()) return Slot::item;
    if (!recipient.known()) return Slot::recipient;
    return std::nullopt;
  }
};

struct UnknownRates {
  double item = 0.25;
  double recipient = 0.25;

  void validate() const {
    if (item < 0.0 || item > 1.0) throw ConfigError("p_unknown_item", "must lie in [0, 1]");
    if (recipient < 0.0 || recipient > 1.0) throw ConfigError("p_unknown_recipient", "must lie in [0, 1]");
    if (item + recipient > 1.0 + 1e-12) throw ConfigError("p_unknown_item", "p_unknown_item + p_unknown_recipient > 1");
  }
  // Five known and two unknown candidates per slot: (5/7)^2 of requests need
  // no augmentation.
  static UnknownRates human_replica() { return {0.245, 0.245}; }
};

inline GroundTruthRequest sample_request(const KnowledgeBase& kb, const UnknownRates& rates,
                                         const std::vector<std::string>& reserve, std::mt19937_64& rng) {
  rates.validate();
  std::vector<std::string> unseen;
  for (const auto& n : reserve)
    if (!kb.lookup(text::surface_of(n))) unseen.push_back(n);
  if (unseen.empty() && (rates.item > 0.0 || rates.recipient > 0.0))
    throw ConfigError("reserve", "no reserve name is absent from the KB");

  auto pick_known = [&](Category c) {
    auto ids = kb.of(c);
    auto id = ids[std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng)];
    return SlotValue{id, kb.entity(id).canonical_name};
  };
  GroundTruthRequest r;
  r.task = pick_known(Category::task);
  r.item = pick_known(Category::item);
  r.recipient = pick_known(Category::recipient);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::optional<Slot> unknown;
  if (u < rates.item)
    unknown = Slot::item;
  else if (u < rates.item + rates.recipient)
    unknown = Slot::recipient;
  if (unknown) {
    auto name = unseen[std::uniform_int_distribution<std::size_t>(0, unseen.size() - 1)(rng)];
    (*unknown == Slot::item ? r.item : r.recipient) = SlotValue{std::nullopt, name};
  }
  return r;
}

// Truthful text answer to the agent's prompt. A name request is answered
// with the name of the slot the agent asked about.
inline std::string respond(const GroundTruthRequest& r, const AgentAction& prompt) {
  auto surface = [&](Slot s) { return text::surface_of(r.at(s).name); };
  switch (prompt.kind) {
    case AgentAction::Kind::greeting:
    case AgentAction::Kind::reword: return "please bring " + surface(Slot::recipient) + " " + surface(Slot::item);
    case AgentAction::Kind::name_request: return surface(prompt.slot);
    case AgentAction::Kind::question: {
      const auto& a = *prompt.action;
      if (a.kind == ActionKind::wh) return surface(a.slot);
      if (a.kind == ActionKind::confirm) {
        const auto& v = r.at(a.slot);
        return v.known() && *v.id == a.value ? "yes" : "no";
      }
      return "no";
    }
    case AgentAction::Kind::report: break;
  }
  throw Error("a report needs no answer");
}

struct TrialRecord {
  GroundTruthRequest request;
  std::vector<DialogEvent> events;
  double qa_cost = 0.0;
  double dialog_reward = 0.0;
  std::size_t questions = 0;
  std::optional<Slot> augmented;           // slot of the first name request
  std::optional<int> turns_to_augment;     // answered turns before it
  bool augmentation_needed = false;
  bool augmentation_correct = false;       // needed and the right entity was learned
  bool report_correct = false;
  bool success = false;
  int turns = 0;
  std::string reported;                    // "task,item,recipient"
};

inline TrialRecord run_trial(const KnowledgeBase& seed_kb, const GroundTruthRequest& req, ControllerConfig cfg,
                             std::shared_ptr<PolicyCache> cache) {
  DialogController ctl(seed_kb, std::move(cfg), std::move(cache));
  TrialRecord rec;
  rec.request = req;
  while (!ctl.terminated()) {
    const auto& prompt = ctl.current_prompt();
    if (prompt.kind == AgentAction::Kind::name_request && !rec.augmented) {
      rec.augmented = prompt.slot;
      rec.turns_to_augment = ctl.state().turn;
    }
    auto res = ctl.step(respond(req, prompt));
    rec.events.push_back(std::move(res.event));
  }
  const auto& st = ctl.state();
  rec.turns = st.turn;
  rec.questions = st.questions;
  rec.qa_cost = st.qa_cost;
  const auto& kb = st.kb;
  const StateKey& got = *st.reported;
  rec.reported = kb.entity(got.task).canonical_name + "," + kb.entity(got.item).canonical_name + "," +
                 kb.entity(got.recipient).canonical_name;
  rec.report_correct = kb.entity(got.task).canonical_name == req.task.name &&
                       kb.entity(got.item).canonical_name == req.item.name &&
                       kb.entity(got.recipient).canonical_name == req.recipient.name;
  const auto unknown = req.unknown_slot();
  rec.augmentation_needed = unknown.has_value();
  if (unknown) {
    for (const auto& e : rec.events)
      for (const auto& m : e.kb_mutations)
        if (m.category == category_of(*unknown) && m.name == req.at(*unknown).name) rec.augmentation_correct = true;
  }
  rec.success = rec.report_correct && (!rec.augmentation_needed || rec.augmentation_correct);
  const double bonus = rec.report_correct ? ctl.config().rewards.correct : ctl.config().rewards.wrong;
  rec.dialog_reward = bonus - rec.qa_cost;
  return rec;
}

// Per-trial outcome of the augmentation decision.
inline bool decision_correct(const TrialRecord& r) {
  return r.augmentation_needed ? r.augmentation_correct : !r.augmented.has_value();
}

struct Metrics {
  std::size_t trials = 0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double success_rate = 0.0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double mean_qa_cost = 0.0;
  double mean_reward = 0.0;
  double mean_turns = 0.0;
  double mean_turns_to_augment = 0.0;  // over trials that augmented; NaN if none did
  double augment_accuracy = 0.0;
};

// Positive class: augmentation needed. A true positive also needs the
// right slot and name; an augmentation that is not a true positive is a
// false positive.
inline Metrics score(const std::vector<TrialRecord>& records) {
  Metrics m;
  m.trials = records.size();
  if (records.empty()) return m;
  double success = 0, cost = 0, reward = 0, turns = 0, aug_turns = 0, correct = 0;
  std::size_t augmented = 0;
  for (const auto& r : records) {
    const bool tp = r.augmentation_needed && r.augmentation_correct;
    if (tp) ++m.tp;
    if (r.augmented && !tp) ++m.fp;
    if (r.augmentation_needed && !tp) ++m.fn;
    if (!r.augmentation_needed && !r.augmented) ++m.tn;
    success += r.success ? 1.0 : 0.0;
    cost += r.qa_cost;
    reward += r.dialog_reward;
    turns += r.turns;
    correct += decision_correct(r) ? 1.0 : 0.0;
    if (r.turns_to_augment) {
      ++augmented;
      aug_turns += *r.turns_to_augment;
    }
  }
  const double n = static_cast<double>(records.size());
  m.success_rate = success / n;
  m.mean_qa_cost = cost / n;
  m.mean_reward = reward / n;
  m.mean_turns = turns / n;
  m.augment_accuracy = correct / n;
  m.mean_turns_to_augment = augmented ? aug_turns / static_cast<double>(augmented) : std::nan("");
  m.precision = (m.tp + m.fp) ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = (m.tp + m.fn) ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

}  // namespace dualtrack
