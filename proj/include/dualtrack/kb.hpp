#pragma once
// Knowledge base: typed entities (tasks, items, recipients) plus the surface
// lexicon the parser reads. Persisted as ASP-style facts, one per line:
//
//   task(delivery).
//   item(coffee).
//   recipient(alice).
//   learned(recipient, nate, 6).     % entity above was added in dialog turn 6
//   synonym(bring, delivery).
//   synonym("diet coke", coke).
//   affirm(yes).
//   deny(no).

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dualtrack/error.hpp"
#include "dualtrack/text.hpp"

namespace dualtrack {

enum class Category : std::uint8_t { task, item, recipient };

inline constexpr std::array<Category, 3> kCategories = {Category::task, Category::item,
                                                        Category::recipient};

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::task: return "task";
    case Category::item: return "item";
    case Category::recipient: return "recipient";
  }
  return "?";
}

inline std::optional<Category> category_from_string(std::string_view s) {
  for (auto c : kCategories)
    if (to_string(c) == s) return c;
  return std::nullopt;
}

// Insertion ordinal within the owning KB. Never reused, so it doubles as the
// entity's "birth" for append-only model ordering.
struct EntityId {
  std::uint32_t value = 0;
  auto operator<=>(const EntityId&) const = default;
};

enum class Provenance : std::uint8_t { seed, learned };

struct Entity {
  EntityId id;
  Category category = Category::task;
  std::string canonical_name;
  Provenance provenance = Provenance::seed;
  std::optional<int> learned_turn;  // set iff provenance == learned

  bool operator==(const Entity&) const = default;
};

struct Lexicon {
  std::map<std::string, EntityId> entries;  // surface form -> entity
  std::set<std::string> affirm_markers;
  std::set<std::string> deny_markers;

  std::optional<EntityId> lookup(const std::string& surface) const {
    auto it = entries.find(surface);
    if (it == entries.end()) return std::nullopt;
    return it->second;
  }

  // Longest multi-word surface form, in tokens.
  std::size_t max_surface_tokens() const {
    std::size_t n = 1;
    for (const auto& [s, _] : entries) n = std::max(n, text::tokenize(s).size());
    return n;
  }

  bool operator==(const Lexicon&) const = default;
};

class KnowledgeBase {
 public:
  const std::vector<Entity>& entities() const { return entities_; }
  const Lexicon& lexicon() const { return lexicon_; }

  const Entity& entity(EntityId id) const {
    if (id.value >= entities_.size()) throw KbError("no entity with id " + std::to_string(id.value));
    return entities_[id.value];
  }

  std::vector<EntityId> of(Category c) const {
    std::vector<EntityId> out;
    for (const auto& e : entities_)
      if (e.category == c) out.push_back(e.id);
    return out;
  }

  std::size_t count(Category c) const {
    return static_cast<std::size_t>(
        std::count_if(entities_.begin(), entities_.end(), [c](const Entity& e) { return e.category == c; }));
  }

  std::optional<EntityId> lookup(const std::string& surface) const { return lexicon_.lookup(surface); }

  std::optional<EntityId> find(Category c, std::string_view canonical) const {
    for (const auto& e : entities_)
      if (e.category == c && e.canonical_name == canonical) return e.id;
    return std::nullopt;
  }

  // Adds a seed entity; used when building KBs from files or code.
  Entity add_seed(Category c, std::string_view name) { return insert(c, name, Provenance::seed, std::nullopt); }

  // Adds an entity learned from the user during dialog `turn`. The typed name
  // is normalized (lower case, punctuation stripped).
  Entity add_entity(Category c, std::string_view typed_name, std::optional<int> turn = std::nullopt) {
    return insert(c, typed_name, Provenance::learned, turn.value_or(0));
  }

  void add_synonym(std::string_view surface, EntityId target) {
    entity(target);
    auto key = text::join(text::tokenize(surface), " ");
    if (key.empty()) throw KbError("empty synonym");
    auto [it, inserted] = lexicon_.entries.emplace(key, target);
    if (!inserted && it->second != target) throw KbError("surface form '" + key + "' already bound");
  }

  void add_affirm_marker(std::string_view w) { lexicon_.affirm_markers.insert(text::join(text::tokenize(w), " ")); }
  void add_deny_marker(std::string_view w) { lexicon_.deny_markers.insert(text::join(text::tokenize(w), " ")); }

  // Every category populated. Dialog sessions additionally require >=2 items
  // and >=2 recipients; see require_dialog_ready().
  void validate() const {
    for (auto c : kCategories)
      if (count(c) == 0) throw KbError("knowledge base has no " + std::string(to_string(c)) + " entities");
  }

  void require_dialog_ready() const {
    validate();
    if (count(Category::item) < 2 || count(Category::recipient) < 2)
      throw KbError("dialog needs at least 2 items and 2 recipients");
  }

  void mark_learned(EntityId id, int turn) {
    entity(id);
    entities_[id.value].provenance = Provenance::learned;
    entities_[id.value].learned_turn = turn;
  }

  bool operator==(const KnowledgeBase&) const = default;

 private:
  Entity insert(Category c, std::string_view typed, Provenance p, std::optional<int> turn) {
    auto canonical = text::canonical_name(typed);
    if (canonical.empty()) throw KbError("entity name is empty after normalization");
    auto surface = text::surface_of(canonical);
    if (auto hit = lexicon_.lookup(surface)) {
      if (entity(*hit).category == c)
        throw AlreadyKnown("'" + surface + "' is already a known " + std::string(to_string(c)));
      throw KbError("'" + surface + "' already names a " + std::string(to_string(entity(*hit).category)));
    }
    Entity e{EntityId{static_cast<std::uint32_t>(entities_.size())}, c, canonical, p, turn};
    entities_.push_back(e);
    lexicon_.entries.emplace(surface, e.id);
    return e;
  }

  std::vector<Entity> entities_;
  Lexicon lexicon_;
};

// |KB|: every task/item/recipient combination plus the terminal state.
inline std::size_t kb_size(const KnowledgeBase& kb) {
  return kb.count(Category::task) * kb.count(Category::item) * kb.count(Category::recipient) + 1;
}

namespace detail {

inline bool is_atom_char(char c) {
  return std::islower(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '_';
}

inline std::string quote_if_needed(const std::string& s) {
  bool bare = !s.empty() && std::all_of(s.begin(), s.end(), is_atom_char);
  return bare ? s : "\"" + s + "\"";
}

struct Fact {
  std::string predicate;
  std::vector<std::string> args;
};

// Parses `pred(arg, "quoted arg", ...).` with `%` comments. Returns nullopt for
// blank/comment-only lines.
inline std::optional<Fact> parse_fact(std::string_view line, std::size_t lineno) {
  std::string body;
  bool in_quote = false;
  for (char c : line) {
    if (c == '"') in_quote = !in_quote;
    if (c == '%' && !in_quote) break;
    body.push_back(c);
  }
  body = text::trim(body);
  if (body.empty()) return std::nullopt;
  if (in_quote) throw ParseError(lineno, "unterminated quote");

  std::size_t i = 0;
  auto skip_ws = [&] {
    while (i < body.size() && std::isspace(static_cast<unsigned char>(body[i]))) ++i;
  };
  Fact f;
  while (i < body.size() && is_atom_char(body[i])) f.predicate.push_back(body[i++]);
  if (f.predicate.empty()) throw ParseError(lineno, "expected predicate name");
  skip_ws();
  if (i >= body.size() || body[i] != '(') throw ParseError(lineno, "expected '(' after " + f.predicate);
  ++i;
  for (;;) {
    skip_ws();
    std::string arg;
    if (i < body.size() && body[i] == '"') {
      ++i;
      while (i < body.size() && body[i] != '"') arg.push_back(body[i++]);
      if (i >= body.size()) throw ParseError(lineno, "unterminated quote");
      ++i;
      if (arg.empty()) throw ParseError(lineno, "empty quoted argument");
    } else {
      while (i < body.size() && (is_atom_char(body[i]) || body[i] == '-')) arg.push_back(body[i++]);
      if (arg.empty()) throw ParseError(lineno, "expected argument");
    }
    f.args.push_back(std::move(arg));
    skip_ws();
    if (i < body.size() && body[i] == ',') {
      ++i;
      continue;
    }
    if (i < body.size() && body[i] == ')') {
      ++i;
      break;
    }
    throw ParseError(lineno, "expected ',' or ')'");
  }
  skip_ws();
  if (i >= body.size() || body[i] != '.') throw ParseError(lineno, "missing terminating '.'");
  ++i;
  skip_ws();
  if (i != body.size()) throw ParseError(lineno, "trailing characters after fact");
  return f;
}

}  // namespace detail

// Canonical text form: entity facts in insertion order (each learned entity
// followed by its learned/3 fact), then synonyms sorted by (entity, surface),
// then yes/no markers. Surface forms equal to an entity's own name are implied.
inline std::string serialize(const KnowledgeBase& kb) {
  std::ostringstream out;
  for (const auto& e : kb.entities()) {
    out << to_string(e.category) << '(' << e.canonical_name << ").\n";
    if (e.provenance == Provenance::learned)
      out << "learned(" << to_string(e.category) << ", " << e.canonical_name << ", " << e.learned_turn.value_or(0)
          << ").\n";
  }
  std::vector<std::pair<EntityId, std::string>> syn;
  for (const auto& [surface, id] : kb.lexicon().entries)
    if (surface != text::surface_of(kb.entity(id).canonical_name)) syn.emplace_back(id, surface);
  std::sort(syn.begin(), syn.end());
  for (const auto& [id, surface] : syn)
    out << "synonym(" << detail::quote_if_needed(surface) << ", " << kb.entity(id).canonical_name << ").\n";
  for (const auto& w : kb.lexicon().affirm_markers) out << "affirm(" << detail::quote_if_needed(w) << ").\n";
  for (const auto& w : kb.lexicon().deny_markers) out << "deny(" << detail::quote_if_needed(w) << ").\n";
  return out.str();
}

inline KnowledgeBase deserialize(std::string_view src) {
  KnowledgeBase kb;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  // Synonyms may reference entities declared later in the file.
  std::vector<std::pair<std::size_t, detail::Fact>> deferred;
  while (pos <= src.size()) {
    auto nl = src.find('\n', pos);
    auto line = src.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? src.size() + 1 : nl + 1;
    ++lineno;
    auto fact = detail::parse_fact(line, lineno);
    if (!fact) continue;
    const auto& p = fact->predicate;
    auto arity = [&](std::size_t n) {
      if (fact->args.size() != n)
        throw ParseError(lineno, p + " expects " + std::to_string(n) + " argument(s)");
    };
    try {
      if (auto cat = category_from_string(p)) {
        arity(1);
        if (text::canonical_name(fact->args[0]) != fact->args[0])
          throw ParseError(lineno, "entity name must be lower-case: " + fact->args[0]);
        kb.add_seed(*cat, fact->args[0]);
      } else if (p == "learned") {
        arity(3);
        auto cat = category_from_string(fact->args[0]);
        if (!cat) throw ParseError(lineno, "unknown category " + fact->args[0]);
        auto id = kb.find(*cat, fact->args[1]);
        if (!id) throw ParseError(lineno, "learned/3 must follow its entity fact");
        int turn = 0;
        try {
          turn = std::stoi(fact->args[2]);
        } catch (const std::exception&) {
          throw ParseError(lineno, "learned/3 turn must be an integer");
        }
        kb.mark_learned(*id, turn);
      } else if (p == "synonym") {
        arity(2);
        deferred.emplace_back(lineno, *fact);
      } else if (p == "affirm") {
        arity(1);
        kb.add_affirm_marker(fact->args[0]);
      } else if (p == "deny") {
        arity(1);
        kb.add_deny_marker(fact->args[0]);
      } else {
        throw ParseError(lineno, "unknown predicate " + p);
      }
    } catch (const KbError& e) {
      throw ParseError(lineno, e.what());
    }
  }
  for (const auto& [line, f] : deferred) {
    std::optional<EntityId> target;
    for (const auto& e : kb.entities()) {
      if (e.canonical_name != f.args[1]) continue;
      if (target) throw ParseError(line, "ambiguous synonym target " + f.args[1]);
      target = e.id;
    }
    if (!target) throw ParseError(line, "synonym target not declared: " + f.args[1]);
    try {
      kb.add_synonym(f.args[0], *target);
    } catch (const KbError& e) {
      throw ParseError(line, e.what());
    }
  }
  kb.validate();
  return kb;
}

// A delivery-only KB with the given item and recipient names, plus default
// verbs and yes/no markers.
inline KnowledgeBase make_delivery_kb(const std::vector<std::string>& items,
                                      const std::vector<std::string>& recipients) {
  KnowledgeBase kb;
  auto task = kb.add_seed(Category::task, "delivery");
  for (const auto& i : items) kb.add_seed(Category::item, i);
  for (const auto& r : recipients) kb.add_seed(Category::recipient, r);
  for (const char* verb : {"bring", "deliver", "take", "carry", "fetch"}) kb.add_synonym(verb, task.id);
  for (const char* w : {"yes", "yeah", "yep", "sure", "correct", "right", "ok", "okay"}) kb.add_affirm_marker(w);
  for (const char* w : {"no", "nope", "not", "wrong", "incorrect"}) kb.add_deny_marker(w);
  return kb;
}

}  // namespace dualtrack
