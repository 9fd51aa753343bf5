#pragma once
// Lexicalized template parser and the parse -> observation mapping.
//
// Utterances are tokenized, surface forms from the KB lexicon are matched
// greedily (longest first), yes/no markers are recognized, stop words are
// dropped, and any remaining token is an unknown content word. The parse is
// interpreted against the question that was asked.

#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dualtrack/error.hpp"
#include "dualtrack/kb.hpp"
#include "dualtrack/model.hpp"
#include "dualtrack/text.hpp"

namespace dualtrack {

enum class ParseKind : std::uint8_t {
  full_request,
  task_answer,
  item_answer,
  recipient_answer,
  affirm,
  deny,
  unknown_word,
  malformed
};

inline std::string_view to_string(ParseKind k) {
  switch (k) {
    case ParseKind::full_request: return "full_request";
    case ParseKind::task_answer: return "task_answer";
    case ParseKind::item_answer: return "item_answer";
    case ParseKind::recipient_answer: return "recipient_answer";
    case ParseKind::affirm: return "affirm";
    case ParseKind::deny: return "deny";
    case ParseKind::unknown_word: return "unknown_word";
    case ParseKind::malformed: return "malformed";
  }
  return "?";
}

struct SlotFill {
  std::optional<EntityId> task, item, recipient;

  std::optional<EntityId>& at(Slot s) { return s == Slot::task ? task : s == Slot::item ? item : recipient; }
  const std::optional<EntityId>& at(Slot s) const {
    return s == Slot::task ? task : s == Slot::item ? item : recipient;
  }
  std::size_t filled() const { return std::size_t(task.has_value()) + item.has_value() + recipient.has_value(); }
  bool operator==(const SlotFill&) const = default;
};

struct Parse {
  ParseKind kind = ParseKind::malformed;
  SlotFill slots;
  std::optional<std::string> unknown_surface;

  bool operator==(const Parse&) const = default;
};

// What the agent just asked; determines how a parse is read.
struct QuestionContext {
  enum class Kind : std::uint8_t { request, wh, confirm, name } kind = Kind::request;
  Slot slot = Slot::task;  // wh, confirm, name

  static QuestionContext request() { return {Kind::request, Slot::task}; }
  static QuestionContext wh(Slot s) { return {Kind::wh, s}; }
  static QuestionContext confirm(Slot s) { return {Kind::confirm, s}; }
};

class StopWords {
 public:
  StopWords() = default;
  explicit StopWords(std::set<std::string> words) : words_(std::move(words)) {}

  // One word per line, `#` comments.
  static StopWords load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("stopwords", "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  static StopWords parse(std::string_view src) {
    std::set<std::string> w;
    std::istringstream in{std::string(src)};
    std::string line;
    while (std::getline(in, line)) {
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      for (auto& t : text::tokenize(line)) w.insert(t);
    }
    return StopWords(std::move(w));
  }

  // Function words that carry no slot content. "me" and "get" are content
  // words on purpose: they are unknown to the default lexicon.
  static StopWords defaults() {
    return StopWords({"a",    "an",   "the",  "please", "to",   "for",  "of",   "some", "i",     "want",
                      "would", "like", "can",  "could",  "you",  "it",   "is",   "this", "that",  "my",
                      "and",  "will", "should", "be",    "with", "its", "their", "name", "um",    "uh",
                      "well", "just", "thanks", "thank", "robot", "delivery", "item", "person"});
  }

  bool contains(const std::string& w) const { return words_.count(w) != 0; }
  const std::set<std::string>& words() const { return words_; }

 private:
  std::set<std::string> words_;
};

namespace detail {

struct Scan {
  std::vector<EntityId> entities;
  std::vector<std::string> unknown;
  bool affirm = false, deny = false;
};

inline Scan scan(std::string_view utterance, const KnowledgeBase& kb, const StopWords& stop) {
  Scan out;
  const auto toks = text::tokenize(utterance);
  const std::size_t max_len = kb.lexicon().max_surface_tokens();
  std::size_t i = 0;
  while (i < toks.size()) {
    bool matched = false;
    for (std::size_t len = std::min(max_len, toks.size() - i); len >= 1; --len) {
      std::vector<std::string> span(toks.begin() + i, toks.begin() + i + len);
      auto surface = text::join(span, " ");
      if (auto id = kb.lookup(surface)) {
        out.entities.push_back(*id);
        i += len;
        matched = true;
        break;
      }
      if (kb.lexicon().affirm_markers.count(surface)) {
        out.affirm = true;
        i += len;
        matched = true;
        break;
      }
      if (kb.lexicon().deny_markers.count(surface)) {
        out.deny = true;
        i += len;
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (!stop.contains(toks[i])) out.unknown.push_back(toks[i]);
    ++i;
  }
  return out;
}

}  // namespace detail

// Pure function of (utterance, lexicon, stop words, context).
inline Parse parse(std::string_view utterance, const KnowledgeBase& kb, const QuestionContext& expected,
                   const StopWords& stop = StopWords::defaults()) {
  const auto sc = detail::scan(utterance, kb, stop);
  Parse p;
  bool conflict = false;
  for (auto id : sc.entities) {
    auto& slot = p.slots.at(slot_of(kb.entity(id).category));
    if (slot && *slot != id) conflict = true;
    slot = id;
  }
  if (conflict || (sc.affirm && sc.deny)) return Parse{ParseKind::malformed, {}, std::nullopt};

  const std::size_t filled = p.slots.filled();
  if ((sc.affirm || sc.deny) && filled == 0 && sc.unknown.empty()) {
    p.kind = sc.affirm ? ParseKind::affirm : ParseKind::deny;
    return p;
  }
  if (!sc.unknown.empty()) {
    p.kind = ParseKind::unknown_word;
    p.unknown_surface = sc.unknown.front();
    return p;
  }
  if (filled == 0) return Parse{ParseKind::malformed, {}, std::nullopt};
  if (filled >= 2 || (expected.kind == QuestionContext::Kind::request && filled >= 1)) {
    p.kind = ParseKind::full_request;
    return p;
  }
  if (p.slots.task) p.kind = ParseKind::task_answer;
  if (p.slots.item) p.kind = ParseKind::item_answer;
  if (p.slots.recipient) p.kind = ParseKind::recipient_answer;
  return p;
}

// Optional channel noise applied to recognized observations: a recognized
// slot value is kept with p_slot(k) and otherwise replaced by a uniformly
// chosen other value; a recognized yes/no is kept with p_confirm.
struct ObservationChannel {
  std::optional<NoiseModel> noise;
};

struct ObservationStep {
  ActionKey action;  // the dialog-model action whose semantics apply
  ObsKey observation;
  bool random = false;  // drawn from the random-observation branch
};

struct ObservationResult {
  std::vector<ObservationStep> steps;
  std::optional<Slot> unknown_slot;  // knowledge-track flag: ẑ for this slot
};

namespace detail {

inline ObsKey random_slot_observation(const KnowledgeBase& kb, Slot s, std::mt19937_64& rng) {
  auto ids = kb.of(category_of(s));
  auto pick = std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng);
  return ObsKey{ObsKind::slot_value, s, ids[pick]};
}

inline ObsKey noisy_slot(const KnowledgeBase& kb, Slot s, EntityId v, const ObservationChannel& ch,
                         std::mt19937_64& rng) {
  if (!ch.noise) return ObsKey{ObsKind::slot_value, s, v};
  auto ids = kb.of(category_of(s));
  const double p = ch.noise->p_slot(ids.size());
  if (ids.size() == 1 || std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p)
    return ObsKey{ObsKind::slot_value, s, v};
  std::vector<EntityId> others;
  for (auto id : ids)
    if (id != v) others.push_back(id);
  return ObsKey{ObsKind::slot_value, s, others[std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng)]};
}

inline ObsKey noisy_yes_no(bool yes, const ObservationChannel& ch, std::mt19937_64& rng) {
  if (ch.noise && std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= ch.noise->p_confirm) yes = !yes;
  return ObsKey{yes ? ObsKind::affirm : ObsKind::deny, {}, {}};
}

}  // namespace detail

// Maps a parse to dialog-model observations for the question just asked.
// Request context (opening or reword prompt) yields one observation per slot
// in task, item, recipient order, each under that slot's wh-question. A slot
// the parse cannot fill gets a uniformly random observation from the slot's
// values; an unknown word additionally flags the unresolved slot for the
// knowledge track. Only the random branch bypasses the channel noise.
inline ObservationResult to_observation(const Parse& p, const QuestionContext& asked, const ActionKey& last_action,
                                        const KnowledgeBase& kb, std::mt19937_64& rng,
                                        const ObservationChannel& channel = {}) {
  ObservationResult out;
  auto slot_step = [&](Slot s) {
    ActionKey wh{ActionKind::wh, s, {}, {}};
    const auto& v = p.slots.at(s);
    bool usable = v.has_value() && p.kind != ParseKind::malformed;
    if (usable)
      out.steps.push_back({wh, detail::noisy_slot(kb, s, *v, channel, rng), false});
    else
      out.steps.push_back({wh, detail::random_slot_observation(kb, s, rng), true});
  };

  switch (asked.kind) {
    case QuestionContext::Kind::request: {
      for (auto s : {Slot::task, Slot::item, Slot::recipient}) slot_step(s);
      if (p.kind == ParseKind::unknown_word) {
        // The unknown word stands for whichever of item/recipient is missing
        // (recipient first when both are).
        if (!p.slots.recipient)
          out.unknown_slot = Slot::recipient;
        else if (!p.slots.item)
          out.unknown_slot = Slot::item;
      }
      break;
    }
    case QuestionContext::Kind::wh: {
      if (last_action.kind != ActionKind::wh) throw Error("wh context with a non-wh action");
      slot_step(asked.slot);
      if (p.kind == ParseKind::unknown_word && !p.slots.at(asked.slot) && asked.slot != Slot::task)
        out.unknown_slot = asked.slot;
      break;
    }
    case QuestionContext::Kind::confirm: {
      if (last_action.kind != ActionKind::confirm) throw Error("confirm context with a non-confirm action");
      std::optional<bool> yes;
      if (p.kind == ParseKind::affirm) yes = true;
      if (p.kind == ParseKind::deny) yes = false;
      if (yes) {
        out.steps.push_back({last_action, detail::noisy_yes_no(*yes, channel, rng), false});
      } else {
        bool coin = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
        out.steps.push_back({last_action, ObsKey{coin ? ObsKind::affirm : ObsKind::deny, {}, {}}, true});
      }
      break;
    }
    case QuestionContext::Kind::name: throw Error("name replies are not observations");
  }
  return out;
}

}  // namespace dualtrack
