#pragma once
// Belief tracking and an offline point-based value iteration (PBVI) solver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dualtrack/error.hpp"
#include "dualtrack/model.hpp"

namespace dualtrack {

struct BeliefState {
  std::vector<double> probs;

  static BeliefState uniform(std::size_t n) { return BeliefState{std::vector<double>(n, 1.0 / static_cast<double>(n))}; }

  static BeliefState point(std::size_t n, std::size_t at) {
    BeliefState b{std::vector<double>(n, 0.0)};
    b.probs.at(at) = 1.0;
    return b;
  }

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t i) const { return probs[i]; }

  bool valid(double tol = 1e-9) const {
    double sum = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0)) return false;
      sum += p;
    }
    return !probs.empty() && std::abs(sum - 1.0) <= tol;
  }

  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }

  void normalize() {
    double sum = std::accumulate(probs.begin(), probs.end(), 0.0);
    if (!(sum > 0.0)) throw Error("cannot normalize an all-zero belief");
    for (double& p : probs) p /= sum;
  }
};

// Pr(z | b, a) = sum_s' O(s',a,z) sum_s T(s,a,s') b(s)
inline double observation_probability(const PomdpModel& m, const BeliefState& b, std::size_t a, std::size_t z) {
  double total = 0.0;
  for (std::size_t s = 0; s < m.num_states(); ++s) {
    if (b[s] == 0.0) continue;
    for (std::size_t s2 = 0; s2 < m.num_states(); ++s2) total += b[s] * m.transition(s, a, s2) * m.observation(s2, a, z);
  }
  return total;
}

// b'(s') ∝ O(s',a,z) · Σ_s T(s,a,s') b(s)
inline BeliefState belief_update(const PomdpModel& m, const BeliefState& b, std::size_t a, std::size_t z) {
  if (b.size() != m.num_states()) throw Error("belief dimension does not match model");
  const std::size_t n = m.num_states();
  BeliefState out{std::vector<double>(n, 0.0)};
  for (std::size_t s = 0; s < n; ++s) {
    if (b[s] == 0.0) continue;
    for (std::size_t s2 = 0; s2 < n; ++s2)
      if (double t = m.transition(s, a, s2); t != 0.0) out.probs[s2] += t * b[s];
  }
  double norm = 0.0;
  for (std::size_t s2 = 0; s2 < n; ++s2) {
    out.probs[s2] *= m.observation(s2, a, z);
    norm += out.probs[s2];
  }
  if (!(norm > 0.0)) throw ZeroProbabilityObservation("observation has zero probability under the current belief");
  for (double& p : out.probs) p /= norm;
  return out;
}

// H(b) = -Σ b(s) ln b(s), in nats, with 0 ln 0 = 0.
inline double entropy(const BeliefState& b) {
  double h = 0.0;
  for (double p : b.probs)
    if (p > 0.0) h -= p * std::log(p);
  return std::max(0.0, h);
}

struct SolverOptions {
  std::size_t belief_points = 256;
  double epsilon = 1e-2;
  std::size_t max_iterations = 500;
  std::uint64_t seed = 1;
};

struct AlphaVector {
  std::vector<double> values;
  std::size_t action = 0;
};

struct Policy {
  std::vector<AlphaVector> alphas;
  std::size_t iterations = 0;
  double epsilon = 0.0;
  double final_residual = 0.0;
  bool converged = false;
  std::uint64_t model_hash = 0;

  double value(const BeliefState& b) const { return dot(best(b), b); }

  std::size_t action(const BeliefState& b) const { return alphas.at(best(b)).action; }

  std::size_t best(const BeliefState& b) const {
    if (alphas.empty()) throw Error("empty policy");
    std::size_t arg = 0;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < alphas.size(); ++i) {
      double v = dot(i, b);
      if (v > top + 1e-12) {
        top = v;
        arg = i;
      }
    }
    return arg;
  }

 private:
  double dot(std::size_t i, const BeliefState& b) const {
    const auto& a = alphas[i].values;
    double v = 0.0;
    for (std::size_t s = 0; s < a.size(); ++s) v += a[s] * b[s];
    return v;
  }
};

// FNV-1a over the model tensors and the solver options that shape the result.
inline std::uint64_t model_hash(const PomdpModel& m, const SolverOptions& opt) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix_bytes = [&](const void* p, std::size_t n) {
    auto c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ull;
    }
  };
  auto mix_vec = [&](const std::vector<double>& v) {
    std::uint64_t n = v.size();
    mix_bytes(&n, sizeof n);
    mix_bytes(v.data(), v.size() * sizeof(double));
  };
  std::uint64_t dims[3] = {m.num_states(), m.num_actions(), m.num_observations()};
  mix_bytes(dims, sizeof dims);
  mix_bytes(&m.discount, sizeof m.discount);
  mix_vec(m.transition_tensor());
  mix_vec(m.observation_tensor());
  mix_vec(m.reward_matrix());
  std::uint64_t o[3] = {opt.belief_points, opt.max_iterations, opt.seed};
  mix_bytes(o, sizeof o);
  mix_bytes(&opt.epsilon, sizeof opt.epsilon);
  return h;
}

namespace detail {

// Sparse view of the model used by the backups: for each action, the
// observations it can produce and, per (a,z), the nonzero T·O transitions.
struct SparseModel {
  struct Entry {
    std::uint32_t s, s2;
    double p;  // T(s,a,s') O(s',a,z)
  };
  struct Branch {
    std::size_t z;
    std::vector<Entry> entries;
  };
  std::vector<std::vector<Branch>> branches;  // [a]
  std::vector<std::vector<double>> reward;    // [a][s]

  explicit SparseModel(const PomdpModel& m) : branches(m.num_actions()), reward(m.num_actions()) {
    const std::size_t n = m.num_states();
    for (std::size_t a = 0; a < m.num_actions(); ++a) {
      reward[a].resize(n);
      for (std::size_t s = 0; s < n; ++s) reward[a][s] = m.reward(s, a);
      for (std::size_t z = 0; z < m.num_observations(); ++z) {
        Branch br{z, {}};
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t s2 = 0; s2 < n; ++s2) {
            double p = m.transition(s, a, s2) * m.observation(s2, a, z);
            if (p != 0.0) br.entries.push_back({std::uint32_t(s), std::uint32_t(s2), p});
          }
        if (!br.entries.empty()) branches[a].push_back(std::move(br));
      }
    }
  }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double v = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) v += a[i] * b[i];
  return v;
}

inline double l1(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d;
}

inline std::size_t sample_index(const std::vector<double>& p, std::mt19937_64& rng) {
  double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return i;
  return p.size() - 1;
}

inline BeliefState uniform_nonterminal(const PomdpModel& m) {
  const std::size_t n = m.num_states(), term = m.term_index();
  BeliefState u{std::vector<double>(n, 0.0)};
  for (std::size_t s = 0; s < n; ++s)
    if (s != term) u.probs[s] = 1.0 / static_cast<double>(n - 1);
  return u;
}

struct PointSet {
  std::vector<BeliefState> beliefs;
  std::vector<double> values;

  double nearest(const BeliefState& b) const {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& e : beliefs) d = std::min(d, l1(e.probs, b.probs));
    return d;
  }
};

inline std::size_t sample_observation(const PomdpModel& m, std::size_t s2, std::size_t a, std::mt19937_64& rng) {
  std::vector<double> zp(m.num_observations());
  for (std::size_t z = 0; z < zp.size(); ++z) zp[z] = m.observation(s2, a, z);
  return sample_index(zp, rng);
}

// One sweep of point-based backups over every belief point. A point keeps its
// previous alpha when the backup would lower its value. Returns the largest
// value improvement.
inline double backup_sweep(const PomdpModel& m, const SparseModel& sm, PointSet& pts, Policy& pol) {
  const std::size_t n = m.num_states();
  const double gamma = m.discount;
  const auto& gamma_set = pol.alphas;

  // g[a][branch][k](s) = Σ_s' T(s,a,s') O(s',a,z) α_k(s')
  std::vector<std::vector<std::vector<std::vector<double>>>> g(m.num_actions());
  for (std::size_t a = 0; a < m.num_actions(); ++a) {
    g[a].resize(sm.branches[a].size());
    for (std::size_t br = 0; br < sm.branches[a].size(); ++br) {
      auto& gv = g[a][br];
      gv.assign(gamma_set.size(), std::vector<double>(n, 0.0));
      for (std::size_t k = 0; k < gamma_set.size(); ++k)
        for (const auto& e : sm.branches[a][br].entries) gv[k][e.s] += e.p * gamma_set[k].values[e.s2];
    }
  }

  std::vector<AlphaVector> next;
  next.reserve(pts.beliefs.size());
  double residual = 0.0;
  for (std::size_t i = 0; i < pts.beliefs.size(); ++i) {
    const auto& b = pts.beliefs[i].probs;
    AlphaVector best_alpha;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < m.num_actions(); ++a) {
      std::vector<double> alpha = sm.reward[a];
      for (const auto& gv : g[a]) {
        std::size_t arg = 0;
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < gv.size(); ++k) {
          double v = dot(gv[k], b);
          if (v > top) {
            top = v;
            arg = k;
          }
        }
        for (std::size_t s = 0; s < n; ++s) alpha[s] += gamma * gv[arg][s];
      }
      double v = dot(alpha, b);
      if (v > best_v + 1e-12) {
        best_v = v;
        best_alpha = AlphaVector{std::move(alpha), a};
      }
    }
    if (best_v < pts.values[i]) {
      best_alpha = gamma_set[pol.best(pts.beliefs[i])];
      best_v = pts.values[i];
    }
    residual = std::max(residual, best_v - pts.values[i]);
    pts.values[i] = best_v;
    next.push_back(std::move(best_alpha));
  }

  std::vector<AlphaVector> unique;
  for (auto& a : next) {
    bool dup = false;
    for (const auto& u : unique)
      if (u.action == a.action && l1(u.values, a.values) < 1e-12) {
        dup = true;
        break;
      }
    if (!dup) unique.push_back(std::move(a));
  }
  pol.alphas = std::move(unique);
  return residual;
}

// Grows the point set with beliefs visited by simulated episodes: the true
// state is drawn from the start belief, actions follow the current policy
// with some random question exploration, and half of the episodes open with
// one answer to every wh-question (a full request stated in one sentence).
inline void expand(const PomdpModel& m, const Policy& pol, PointSet& pts, std::size_t target, std::mt19937_64& rng) {
  const std::size_t term = m.term_index();
  std::vector<std::size_t> questions, wh;
  for (std::size_t a = 0; a < m.num_actions(); ++a) {
    if (m.actions[a].is_question()) questions.push_back(a);
    if (m.actions[a].kind == ActionKind::wh) wh.push_back(a);
  }
  if (questions.empty()) return;
  const BeliefState start = uniform_nonterminal(m);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  auto offer = [&](const BeliefState& b) {
    if (pts.beliefs.size() >= target) return;
    if (pts.nearest(b) > 0.05) {
      pts.values.push_back(pol.value(b));
      pts.beliefs.push_back(b);
    }
  };
  for (std::size_t episode = 0; episode < 8 * target && pts.beliefs.size() < target; ++episode) {
    BeliefState b = start;
    const std::size_t s = sample_index(b.probs, rng);
    if (s == term) continue;
    if (coin(rng) < 0.5) {
      for (auto a : wh) {
        b = belief_update(m, b, a, sample_observation(m, s, a, rng));
        offer(b);
      }
    }
    for (int depth = 0; depth < 24; ++depth) {
      std::size_t a = pol.action(b);
      if (coin(rng) < 0.3) a = questions[std::uniform_int_distribution<std::size_t>(0, questions.size() - 1)(rng)];
      if (!m.actions[a].is_question()) break;
      try {
        b = belief_update(m, b, a, sample_observation(m, s, a, rng));
      } catch (const ZeroProbabilityObservation&) {
        break;
      }
      offer(b);
    }
  }
}

}  // namespace detail

// Point-based value iteration. The initial value function is the set of
// immediate-report alpha vectors (a lower bound), and a belief point's alpha is
// only replaced by a backup that does not lower its value, so the value at
// every belief point is non-decreasing across iterations. The point set starts
// with the uniform belief and every point belief, and is grown by simulation
// under the current policy each time the backups settle.
//
// `on_iteration(iter, values)` is called after each sweep with the value at
// every belief point (existing points keep their position).
template <class Observer>
Policy solve(const PomdpModel& m, const SolverOptions& opt, Observer&& on_iteration) {
  if (!(opt.epsilon > 0.0)) throw ConfigError("epsilon", "must be positive");
  if (opt.belief_points == 0) throw ConfigError("belief_points", "must be positive");
  const std::size_t n = m.num_states();
  const detail::SparseModel sm(m);
  std::mt19937_64 rng(opt.seed);

  Policy pol;
  pol.epsilon = opt.epsilon;
  pol.model_hash = model_hash(m, opt);
  for (std::size_t a = 0; a < m.num_actions(); ++a)
    if (m.actions[a].kind == ActionKind::report) pol.alphas.push_back({sm.reward[a], a});
  if (pol.alphas.empty()) {
    double worst = 0.0;
    for (const auto& r : sm.reward)
      for (double v : r) worst = std::min(worst, v);
    pol.alphas.push_back({std::vector<double>(n, worst / (1.0 - m.discount)), 0});
  }

  detail::PointSet pts;
  auto seed_point = [&](BeliefState b) {
    if (pts.beliefs.size() >= opt.belief_points || pts.nearest(b) < 1e-9) return;
    pts.values.push_back(pol.value(b));
    pts.beliefs.push_back(std::move(b));
  };
  if (n > 1) seed_point(detail::uniform_nonterminal(m));
  for (std::size_t s = 0; s < n; ++s)
    if (s != m.term_index()) seed_point(BeliefState::point(n, s));

  for (std::size_t iter = 1; iter <= opt.max_iterations; ++iter) {
    double residual = detail::backup_sweep(m, sm, pts, pol);
    pol.iterations = iter;
    pol.final_residual = residual;
    on_iteration(iter, pts.values);
    if (residual >= opt.epsilon) continue;
    if (pts.beliefs.size() >= opt.belief_points) {
      pol.converged = true;
      break;
    }
    const std::size_t before = pts.beliefs.size();
    detail::expand(m, pol, pts, std::min(opt.belief_points, std::max(before * 2, before + 16)), rng);
    if (pts.beliefs.size() == before) {
      pol.converged = true;
      break;
    }
  }
  return pol;
}

inline Policy solve(const PomdpModel& m, const SolverOptions& opt = {}) {
  return solve(m, opt, [](std::size_t, const std::vector<double>&) {});
}

// Process-wide policy cache keyed by model_hash, optionally persisted as one
// text file per hash under `dir`.
class PolicyCache {
 public:
  explicit PolicyCache(std::filesystem::path dir = {}, bool use_disk = true)
      : dir_(std::move(dir)), use_disk_(use_disk && !dir_.empty()) {}

  std::shared_ptr<const Policy> get(const PomdpModel& m, const SolverOptions& opt) {
    const auto key = model_hash(m, opt);
    std::lock_guard lock(mu_);
    if (auto it = mem_.find(key); it != mem_.end()) return it->second;
    std::shared_ptr<const Policy> pol;
    if (use_disk_) pol = load(path_for(key), key);
    if (!pol) {
      pol = std::make_shared<const Policy>(solve(m, opt));
      ++solves_;
      if (use_disk_) store(path_for(key), *pol);
    }
    mem_.emplace(key, pol);
    return pol;
  }

  std::size_t solves() const { return solves_; }

 private:
  std::filesystem::path path_for(std::uint64_t key) const {
    std::ostringstream name;
    name << std::hex << std::setw(16) << std::setfill('0') << key << ".policy";
    return dir_ / name.str();
  }

  static std::shared_ptr<const Policy> load(const std::filesystem::path& p, std::uint64_t key) {
    std::ifstream in(p);
    if (!in) return nullptr;
    Policy pol;
    std::string magic;
    std::size_t count = 0, dim = 0;
    int converged = 0;
    in >> magic >> std::hex >> pol.model_hash >> std::dec >> pol.iterations >> converged >> pol.epsilon >>
        pol.final_residual >> count >> dim;
    if (!in || magic != "policy-v1" || pol.model_hash != key) return nullptr;
    pol.converged = converged != 0;
    pol.alphas.resize(count);
    for (auto& a : pol.alphas) {
      a.values.resize(dim);
      in >> a.action;
      for (auto& v : a.values) in >> v;
    }
    if (!in) return nullptr;
    return std::make_shared<const Policy>(std::move(pol));
  }

  static void store(const std::filesystem::path& p, const Policy& pol) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
    auto tmp = p;
    tmp += ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) return;
      out << "policy-v1 " << std::hex << pol.model_hash << std::dec << ' ' << pol.iterations << ' '
          << (pol.converged ? 1 : 0) << ' ' << std::setprecision(17) << pol.epsilon << ' ' << pol.final_residual
          << ' ' << pol.alphas.size() << ' ' << (pol.alphas.empty() ? 0 : pol.alphas.front().values.size()) << "\n";
      for (const auto& a : pol.alphas) {
        out << a.action;
        for (double v : a.values) out << ' ' << v;
        out << "\n";
      }
    }
    std::filesystem::rename(tmp, p, ec);
  }

  std::filesystem::path dir_;
  bool use_disk_;
  std::mutex mu_;
  std::map<std::uint64_t, std::shared_ptr<const Policy>> mem_;
  std::size_t solves_ = 0;
};

}  // namespace dualtrack
