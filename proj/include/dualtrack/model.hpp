#pragma once
// Explicit finite POMDPs for the two controller tracks.
//
// Dialog track: states are task x item x recipient plus `term`; actions are
// wh-questions (one per slot), confirmations (one per slot value) and reports
// (one per non-terminal state). Knowledge track adds states whose item or
// recipient is an unknown entity, confirm-unknown actions for both slots,
// reports on the unknown states, and the two unknown-entity observations.
//
// Every state/action/observation carries a birth key: 0 for fixed entries,
// otherwise 1 + the largest entity id it mentions. Entries are sorted by birth,
// so adding an entity only appends and existing indices never move.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "dualtrack/error.hpp"
#include "dualtrack/kb.hpp"

namespace dualtrack {

// Slot value that is not (yet) an entity of the KB.
inline constexpr EntityId kUnknownEntity{std::numeric_limits<std::uint32_t>::max()};

enum class Slot : std::uint8_t { task = 0, item = 1, recipient = 2 };

inline Category category_of(Slot s) { return static_cast<Category>(s); }
inline Slot slot_of(Category c) { return static_cast<Slot>(c); }
inline std::string_view to_string(Slot s) { return to_string(category_of(s)); }

struct StateKey {
  bool terminal = false;
  EntityId task{}, item{}, recipient{};

  static StateKey term() { return StateKey{true, {}, {}, {}}; }

  EntityId get(Slot s) const {
    switch (s) {
      case Slot::task: return task;
      case Slot::item: return item;
      case Slot::recipient: return recipient;
    }
    return task;
  }
  bool has_unknown() const { return !terminal && (item == kUnknownEntity || recipient == kUnknownEntity); }
  bool operator==(const StateKey&) const = default;
};

enum class ActionKind : std::uint8_t { wh, confirm, confirm_unknown, report };

struct ActionKey {
  ActionKind kind = ActionKind::wh;
  Slot slot = Slot::task;      // wh, confirm, confirm_unknown
  EntityId value{};            // confirm
  StateKey target{};           // report

  bool is_question() const { return kind != ActionKind::report; }
  bool operator==(const ActionKey&) const = default;
};

enum class ObsKind : std::uint8_t { affirm, deny, inapplicable, unknown_value, slot_value };

struct ObsKey {
  ObsKind kind = ObsKind::inapplicable;
  Slot slot = Slot::task;  // unknown_value, slot_value
  EntityId value{};        // slot_value

  bool operator==(const ObsKey&) const = default;
};

enum class Track : std::uint8_t { dialog, knowledge };

// Recognition accuracy of the language channel.
struct NoiseModel {
  double p_confirm = 0.8;  // P(correct yes/no)
  double p_base = 0.8;     // slot accuracy at k_ref candidates
  double k_ref = 4.0;
  double p_floor = 0.5;    // accuracy approached as candidates grow

  // P(correct slot value | k candidates), capped at 1.
  double p_slot(std::size_t k) const {
    if (k == 0) throw ConfigError("noise", "slot with no candidates");
    return std::min(1.0, p_floor + (p_base - p_floor) * k_ref / static_cast<double>(k));
  }

  void validate() const {
    if (!(p_confirm > 0.5 && p_confirm <= 1.0)) throw ConfigError("p_confirm", "must lie in (0.5, 1]");
    if (!(p_floor > 0.0 && p_floor <= p_base && p_base <= 1.0))
      throw ConfigError("p_slot", "need 0 < p_floor <= p_base <= 1");
    if (!(k_ref > 0.0)) throw ConfigError("k_ref", "must be positive");
  }

  static NoiseModel noiseless() { return NoiseModel{1.0, 1.0, 4.0, 1.0}; }
};

struct Rewards {
  double confirm = -1.0;  // r^C
  double wh = -1.5;       // r^W
  double correct = 20.0;  // r+
  double wrong = -20.0;   // r-

  void validate() const {
    if (!(confirm < 0 && wh < 0)) throw ConfigError("rewards", "question costs must be negative");
    if (!(correct > 0 && wrong < 0)) throw ConfigError("rewards", "need r+ > 0 > r-");
  }
};

class PomdpModel {
 public:
  Track track = Track::dialog;
  std::vector<StateKey> states;
  std::vector<ActionKey> actions;
  std::vector<ObsKey> observations;
  double discount = 0.95;

  std::size_t num_states() const { return states.size(); }
  std::size_t num_actions() const { return actions.size(); }
  std::size_t num_observations() const { return observations.size(); }

  // T(s, a, s')
  double transition(std::size_t s, std::size_t a, std::size_t s2) const { return T_[(a * ns() + s) * ns() + s2]; }
  // O(s', a, z)
  double observation(std::size_t s2, std::size_t a, std::size_t z) const { return O_[(a * ns() + s2) * nz() + z]; }
  // R(s, a)
  double reward(std::size_t s, std::size_t a) const { return R_[s * na() + a]; }

  double& transition_ref(std::size_t s, std::size_t a, std::size_t s2) { return T_[(a * ns() + s) * ns() + s2]; }
  double& observation_ref(std::size_t s2, std::size_t a, std::size_t z) { return O_[(a * ns() + s2) * nz() + z]; }
  double& reward_ref(std::size_t s, std::size_t a) { return R_[s * na() + a]; }

  const std::vector<double>& transition_tensor() const { return T_; }
  const std::vector<double>& observation_tensor() const { return O_; }
  const std::vector<double>& reward_matrix() const { return R_; }

  std::optional<std::size_t> state_index(const StateKey& k) const { return lookup(state_index_, pack(k)); }
  std::optional<std::size_t> action_index(const ActionKey& k) const { return lookup(action_index_, pack(k)); }
  std::optional<std::size_t> observation_index(const ObsKey& k) const { return lookup(obs_index_, pack(k)); }

  std::size_t term_index() const { return *state_index(StateKey::term()); }

  // Allocates zeroed tensors and index maps for the current key lists.
  void finalize_layout() {
    T_.assign(na() * ns() * ns(), 0.0);
    O_.assign(na() * ns() * nz(), 0.0);
    R_.assign(ns() * na(), 0.0);
    state_index_.clear();
    action_index_.clear();
    obs_index_.clear();
    for (std::size_t i = 0; i < states.size(); ++i) state_index_.emplace(pack(states[i]), i);
    for (std::size_t i = 0; i < actions.size(); ++i) action_index_.emplace(pack(actions[i]), i);
    for (std::size_t i = 0; i < observations.size(); ++i) obs_index_.emplace(pack(observations[i]), i);
  }

  bool operator==(const PomdpModel& o) const {
    return track == o.track && states == o.states && actions == o.actions && observations == o.observations &&
           discount == o.discount && T_ == o.T_ && O_ == o.O_ && R_ == o.R_;
  }

  // Max |row sum - 1| over all T(s,a,.) and O(s',a,.) rows.
  double max_row_error() const {
    double worst = 0.0;
    for (std::size_t a = 0; a < na(); ++a)
      for (std::size_t s = 0; s < ns(); ++s) {
        double t = 0.0, o = 0.0;
        for (std::size_t s2 = 0; s2 < ns(); ++s2) t += transition(s, a, s2);
        for (std::size_t z = 0; z < nz(); ++z) o += observation(s, a, z);
        worst = std::max({worst, std::abs(t - 1.0), std::abs(o - 1.0)});
      }
    return worst;
  }

 private:
  using Packed = std::uint64_t;
  std::size_t ns() const { return states.size(); }
  std::size_t na() const { return actions.size(); }
  std::size_t nz() const { return observations.size(); }

  static std::uint64_t id(EntityId e) { return e == kUnknownEntity ? 0x1FFFFu : (e.value & 0x1FFFFu); }
  static Packed pack(const StateKey& k) {
    if (k.terminal) return ~Packed{0};
    return (id(k.task) << 34) | (id(k.item) << 17) | id(k.recipient);
  }
  static Packed pack(const ActionKey& k) {
    Packed p = (Packed(k.kind) << 60) | (Packed(k.slot) << 56);
    if (k.kind == ActionKind::confirm) p |= id(k.value);
    if (k.kind == ActionKind::report) p |= k.target.terminal ? (Packed{1} << 55) : pack(k.target);
    return p;
  }
  static Packed pack(const ObsKey& k) {
    Packed p = (Packed(k.kind) << 60) | (Packed(k.slot) << 56);
    if (k.kind == ObsKind::slot_value) p |= id(k.value);
    return p;
  }
  static std::optional<std::size_t> lookup(const std::unordered_map<Packed, std::size_t>& m, Packed p) {
    auto it = m.find(p);
    if (it == m.end()) return std::nullopt;
    return it->second;
  }

  std::vector<double> T_, O_, R_;
  std::unordered_map<Packed, std::size_t> state_index_, action_index_, obs_index_;
};

namespace detail {

inline std::uint32_t birth_of(EntityId e) { return e == kUnknownEntity ? 0u : e.value + 1u; }

inline std::uint32_t birth_of(const StateKey& s) {
  if (s.terminal) return 0;
  return std::max({birth_of(s.task), birth_of(s.item), birth_of(s.recipient)});
}

inline int state_rank(const StateKey& s) {
  if (s.terminal) return 0;
  if (s.recipient == kUnknownEntity) return 2;
  if (s.item == kUnknownEntity) return 3;
  return 1;
}

inline auto state_order(const StateKey& s) {
  return std::make_tuple(birth_of(s), state_rank(s), s.task.value, s.item.value, s.recipient.value);
}

inline auto action_order(const ActionKey& a) {
  switch (a.kind) {
    case ActionKind::wh: return std::make_tuple(0u, 0, int(a.slot), std::make_tuple(0u, 0, 0u, 0u, 0u));
    case ActionKind::confirm_unknown:
      return std::make_tuple(0u, 1, int(a.slot), std::make_tuple(0u, 0, 0u, 0u, 0u));
    case ActionKind::confirm:
      return std::make_tuple(birth_of(a.value), 2, int(a.slot), std::make_tuple(0u, 0, 0u, 0u, 0u));
    case ActionKind::report: return std::make_tuple(birth_of(a.target), 3, 0, state_order(a.target));
  }
  return std::make_tuple(0u, 0, 0, std::make_tuple(0u, 0, 0u, 0u, 0u));
}

inline auto obs_order(const ObsKey& z) {
  switch (z.kind) {
    case ObsKind::affirm: return std::make_tuple(0u, 0, 0);
    case ObsKind::deny: return std::make_tuple(0u, 1, 0);
    case ObsKind::inapplicable: return std::make_tuple(0u, 2, 0);
    case ObsKind::unknown_value: return std::make_tuple(0u, 3, int(z.slot));
    case ObsKind::slot_value: return std::make_tuple(birth_of(z.value), 4, int(z.slot));
  }
  return std::make_tuple(0u, 0, 0);
}

inline void fill_layout(PomdpModel& m, const KnowledgeBase& kb, Track track) {
  auto tasks = kb.of(Category::task), items = kb.of(Category::item), recips = kb.of(Category::recipient);
  bool knowledge = track == Track::knowledge;
  m.track = track;

  m.states = {StateKey::term()};
  for (auto t : tasks)
    for (auto i : items)
      for (auto r : recips) m.states.push_back({false, t, i, r});
  if (knowledge) {
    for (auto t : tasks)
      for (auto i : items) m.states.push_back({false, t, i, kUnknownEntity});
    for (auto t : tasks)
      for (auto r : recips) m.states.push_back({false, t, kUnknownEntity, r});
  }
  std::stable_sort(m.states.begin(), m.states.end(),
                   [](const StateKey& a, const StateKey& b) { return state_order(a) < state_order(b); });

  m.actions.clear();
  for (auto s : {Slot::task, Slot::item, Slot::recipient}) m.actions.push_back({ActionKind::wh, s, {}, {}});
  if (knowledge)
    for (auto s : {Slot::item, Slot::recipient}) m.actions.push_back({ActionKind::confirm_unknown, s, {}, {}});
  for (const auto& e : kb.entities()) m.actions.push_back({ActionKind::confirm, slot_of(e.category), e.id, {}});
  for (const auto& s : m.states)
    if (!s.terminal) m.actions.push_back({ActionKind::report, Slot::task, {}, s});
  std::stable_sort(m.actions.begin(), m.actions.end(),
                   [](const ActionKey& a, const ActionKey& b) { return action_order(a) < action_order(b); });

  m.observations = {{ObsKind::affirm, {}, {}}, {ObsKind::deny, {}, {}}, {ObsKind::inapplicable, {}, {}}};
  if (knowledge)
    for (auto s : {Slot::item, Slot::recipient}) m.observations.push_back({ObsKind::unknown_value, s, {}});
  for (const auto& e : kb.entities()) m.observations.push_back({ObsKind::slot_value, slot_of(e.category), e.id});
  std::stable_sort(m.observations.begin(), m.observations.end(),
                   [](const ObsKey& a, const ObsKey& b) { return obs_order(a) < obs_order(b); });

  m.finalize_layout();
}

inline void fill_tensors(PomdpModel& m, const KnowledgeBase& kb, const NoiseModel& noise, const Rewards& rewards) {
  const std::size_t term = m.term_index();
  const std::size_t affirm = *m.observation_index({ObsKind::affirm, {}, {}});
  const std::size_t deny = *m.observation_index({ObsKind::deny, {}, {}});
  const std::size_t inapplicable = *m.observation_index({ObsKind::inapplicable, {}, {}});

  std::vector<std::vector<std::size_t>> slot_obs(3);
  for (std::size_t z = 0; z < m.observations.size(); ++z)
    if (m.observations[z].kind == ObsKind::slot_value) slot_obs[int(m.observations[z].slot)].push_back(z);

  auto yes_no = [&](std::size_t s, std::size_t a, bool truth) {
    m.observation_ref(s, a, truth ? affirm : deny) += noise.p_confirm;
    m.observation_ref(s, a, truth ? deny : affirm) += 1.0 - noise.p_confirm;
  };

  for (std::size_t a = 0; a < m.actions.size(); ++a) {
    const auto& act = m.actions[a];
    for (std::size_t s = 0; s < m.states.size(); ++s) {
      const auto& st = m.states[s];
      if (st.terminal) {
        m.transition_ref(s, a, term) = 1.0;
        m.observation_ref(s, a, inapplicable) = 1.0;
        continue;
      }
      switch (act.kind) {
        case ActionKind::report:
          m.transition_ref(s, a, term) = 1.0;
          m.reward_ref(s, a) = act.target == st ? rewards.correct : rewards.wrong;
          break;
        case ActionKind::wh:
          m.transition_ref(s, a, s) = 1.0;
          m.reward_ref(s, a) = rewards.wh;
          break;
        case ActionKind::confirm:
        case ActionKind::confirm_unknown:
          m.transition_ref(s, a, s) = 1.0;
          m.reward_ref(s, a) = rewards.confirm;
          break;
      }
    }
  }

  // O(s', a, .) for non-terminal s'. Questions leave the state unchanged, so
  // s' carries the truth being asked about.
  for (std::size_t a = 0; a < m.actions.size(); ++a) {
    const auto& act = m.actions[a];
    for (std::size_t s = 0; s < m.states.size(); ++s) {
      const auto& st = m.states[s];
      if (st.terminal) continue;
      switch (act.kind) {
        case ActionKind::report: m.observation_ref(s, a, inapplicable) = 1.0; break;
        case ActionKind::confirm: yes_no(s, a, st.get(act.slot) == act.value); break;
        case ActionKind::confirm_unknown: {
          const auto z_hat = *m.observation_index({ObsKind::unknown_value, act.slot, {}});
          bool unknown = st.get(act.slot) == kUnknownEntity;
          m.observation_ref(s, a, unknown ? z_hat : deny) += noise.p_confirm;
          m.observation_ref(s, a, unknown ? deny : z_hat) += 1.0 - noise.p_confirm;
          break;
        }
        case ActionKind::wh: {
          const auto& zs = slot_obs[int(act.slot)];
          const std::size_t k = zs.size();
          const double p = noise.p_slot(k);
          const EntityId truth = st.get(act.slot);
          if (truth == kUnknownEntity) {
            // The unknown value is recognized as such, or mistaken for a known one.
            const auto z_hat = *m.observation_index({ObsKind::unknown_value, act.slot, {}});
            m.observation_ref(s, a, z_hat) += p;
            for (auto z : zs) m.observation_ref(s, a, z) += (1.0 - p) / static_cast<double>(k);
          } else if (k == 1) {
            m.observation_ref(s, a, zs.front()) = 1.0;
          } else {
            for (auto z : zs)
              m.observation_ref(s, a, z) +=
                  m.observations[z].value == truth ? p : (1.0 - p) / static_cast<double>(k - 1);
          }
          break;
        }
      }
    }
  }
}

inline PomdpModel build(const KnowledgeBase& kb, const NoiseModel& noise, const Rewards& rewards, double discount,
                        Track track) {
  kb.validate();
  noise.validate();
  rewards.validate();
  if (!(discount > 0.0 && discount < 1.0)) throw ConfigError("discount", "must lie in (0, 1)");
  PomdpModel m;
  m.discount = discount;
  fill_layout(m, kb, track);
  fill_tensors(m, kb, noise, rewards);
  return m;
}

}  // namespace detail

inline constexpr double kDefaultDiscount = 0.95;

inline PomdpModel build_dialog_pomdp(const KnowledgeBase& kb, const NoiseModel& noise = {},
                                     const Rewards& rewards = {}, double discount = kDefaultDiscount) {
  return detail::build(kb, noise, rewards, discount, Track::dialog);
}

inline PomdpModel build_knowledge_pomdp(const KnowledgeBase& kb, const NoiseModel& noise = {},
                                        const Rewards& rewards = {}, double discount = kDefaultDiscount) {
  return detail::build(kb, noise, rewards, discount, Track::knowledge);
}

struct ModelPair {
  PomdpModel dialog;
  PomdpModel knowledge;
};

// Fresh models for both tracks over a KB that grew by one entity. Ordering is
// append-only, so indices of everything that existed in `old_model` are kept.
inline ModelPair rebuild_after_augmentation(const PomdpModel& old_model, const KnowledgeBase& new_kb,
                                            const NoiseModel& noise = {}, const Rewards& rewards = {}) {
  ModelPair out{build_dialog_pomdp(new_kb, noise, rewards, old_model.discount),
                build_knowledge_pomdp(new_kb, noise, rewards, old_model.discount)};
  const auto& fresh = old_model.track == Track::dialog ? out.dialog : out.knowledge;
  for (std::size_t i = 0; i < old_model.states.size(); ++i)
    if (fresh.state_index(old_model.states[i]) != i) throw Error("state ordering moved during rebuild");
  return out;
}

// ---- naming -----------------------------------------------------------------

inline std::string value_name(const KnowledgeBase& kb, EntityId e, Slot s) {
  if (e == kUnknownEntity) return s == Slot::item ? "?item" : "?recipient";
  return kb.entity(e).canonical_name;
}

inline std::string state_name(const KnowledgeBase& kb, const StateKey& s) {
  if (s.terminal) return "term";
  return "(" + value_name(kb, s.task, Slot::task) + ", " + value_name(kb, s.item, Slot::item) + ", " +
         value_name(kb, s.recipient, Slot::recipient) + ")";
}

inline std::string action_name(const KnowledgeBase& kb, const ActionKey& a) {
  switch (a.kind) {
    case ActionKind::wh: return "wh:" + std::string(to_string(a.slot));
    case ActionKind::confirm: return "confirm:" + std::string(to_string(a.slot)) + ":" + kb.entity(a.value).canonical_name;
    case ActionKind::confirm_unknown: return "confirm_unknown:" + std::string(to_string(a.slot));
    case ActionKind::report: return "report:" + state_name(kb, a.target);
  }
  return "?";
}

inline std::string observation_name(const KnowledgeBase& kb, const ObsKey& z) {
  switch (z.kind) {
    case ObsKind::affirm: return "yes";
    case ObsKind::deny: return "no";
    case ObsKind::inapplicable: return "inapplicable";
    case ObsKind::unknown_value: return "unknown:" + std::string(to_string(z.slot));
    case ObsKind::slot_value: return std::string(to_string(z.slot)) + ":" + kb.entity(z.value).canonical_name;
  }
  return "?";
}

// Plain-text dump, one tensor per section, nonzero entries only.
inline void dump_model(std::ostream& out, const PomdpModel& m, const KnowledgeBase& kb) {
  out << "# track " << (m.track == Track::dialog ? "dialog" : "knowledge") << "\n";
  out << "discount " << m.discount << "\n";
  out << "[states] " << m.num_states() << "\n";
  for (std::size_t i = 0; i < m.num_states(); ++i) out << i << ' ' << state_name(kb, m.states[i]) << "\n";
  out << "[actions] " << m.num_actions() << "\n";
  for (std::size_t i = 0; i < m.num_actions(); ++i) out << i << ' ' << action_name(kb, m.actions[i]) << "\n";
  out << "[observations] " << m.num_observations() << "\n";
  for (std::size_t i = 0; i < m.num_observations(); ++i)
    out << i << ' ' << observation_name(kb, m.observations[i]) << "\n";
  out << std::setprecision(17);
  out << "[T] a s s' p\n";
  for (std::size_t a = 0; a < m.num_actions(); ++a)
    for (std::size_t s = 0; s < m.num_states(); ++s)
      for (std::size_t s2 = 0; s2 < m.num_states(); ++s2)
        if (double p = m.transition(s, a, s2); p != 0.0) out << a << ' ' << s << ' ' << s2 << ' ' << p << "\n";
  out << "[O] a s' z p\n";
  for (std::size_t a = 0; a < m.num_actions(); ++a)
    for (std::size_t s = 0; s < m.num_states(); ++s)
      for (std::size_t z = 0; z < m.num_observations(); ++z)
        if (double p = m.observation(s, a, z); p != 0.0) out << a << ' ' << s << ' ' << z << ' ' << p << "\n";
  out << "[R] s a r\n";
  for (std::size_t s = 0; s < m.num_states(); ++s)
    for (std::size_t a = 0; a < m.num_actions(); ++a)
      if (double r = m.reward(s, a); r != 0.0) out << s << ' ' << a << ' ' << r << "\n";
}

}  // namespace dualtrack
