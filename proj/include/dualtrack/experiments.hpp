#pragma once
// Batch harness: runs simulated trials for one agent variant and KB size,
// aggregates metrics, writes CSV; plus transcript replay and SVG plots.

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "dualtrack/controller.hpp"
#include "dualtrack/simuser.hpp"

namespace dualtrack {

struct BatchConfig {
  AgentVariant agent = AgentVariant::dual;
  std::size_t kb_size = 17;
  std::optional<KnowledgeBase> kb;  // from `kb = path`; overrides kb_size
  std::size_t trials = 3000;
  std::uint64_t seed = 1;
  UnknownRates unknown;
  ControllerConfig controller;
  std::size_t sub_batches = 5;
  std::size_t threads = 0;  // 0: hardware concurrency
  std::vector<std::string> reserve = default_reserve_names();

  KnowledgeBase make_kb() const { return kb ? *kb : make_sized_kb(kb_size); }

  void validate() const {
    controller.validate();
    unknown.validate();
    if (trials == 0) throw ConfigError("trials", "must be positive");
    if (sub_batches == 0 || sub_batches > trials) throw ConfigError("sub_batches", "must lie in [1, trials]");
    make_kb().require_dialog_ready();
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    auto n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
}

inline std::string read_file(const std::filesystem::path& p, const std::string& field) {
  std::ifstream in(p);
  if (!in) throw ConfigError(field, "cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

// Applies one `key = value` setting.
inline void apply_setting(BatchConfig& c, const std::string& key, const std::string& value,
                          const std::filesystem::path& base_dir = {}) {
  using detail::parse_double;
  using detail::parse_uint;
  auto& cc = c.controller;
  if (key == "agent") c.agent = agent_variant_from_string(value);
  else if (key == "kb_size") c.kb_size = parse_uint(key, value);
  else if (key == "kb") {
    auto p = std::filesystem::path(value);
    if (p.is_relative()) p = base_dir / p;
    c.kb = deserialize(detail::read_file(p, key));
  }
  else if (key == "trials") c.trials = parse_uint(key, value);
  else if (key == "seed") c.seed = parse_uint(key, value);
  else if (key == "sub_batches") c.sub_batches = parse_uint(key, value);
  else if (key == "threads") c.threads = parse_uint(key, value);
  else if (key == "preset") {
    if (value != "human") throw ConfigError(key, "unknown preset '" + value + "'");
    c.unknown = UnknownRates::human_replica();
  }
  else if (key == "p_unknown_item") c.unknown.item = parse_double(key, value);
  else if (key == "p_unknown_recipient") c.unknown.recipient = parse_double(key, value);
  else if (key == "reserve") {
    auto p = std::filesystem::path(value);
    if (p.is_relative()) p = base_dir / p;
    c.reserve = load_name_list(p.string());
  }
  else if (key == "p_confirm") cc.noise.p_confirm = parse_double(key, value);
  else if (key == "p_base") cc.noise.p_base = parse_double(key, value);
  else if (key == "k_ref") cc.noise.k_ref = parse_double(key, value);
  else if (key == "p_floor") cc.noise.p_floor = parse_double(key, value);
  else if (key == "r_confirm") cc.rewards.confirm = parse_double(key, value);
  else if (key == "r_wh") cc.rewards.wh = parse_double(key, value);
  else if (key == "r_correct") cc.rewards.correct = parse_double(key, value);
  else if (key == "r_wrong") cc.rewards.wrong = parse_double(key, value);
  else if (key == "discount") cc.discount = parse_double(key, value);
  else if (key == "h") cc.h = parse_double(key, value);
  else if (key == "h_ratio") cc.h_ratio = parse_double(key, value);
  else if (key == "knowledge_update") cc.knowledge_update = knowledge_update_from_string(value);
  else if (key == "fixed_turns") cc.fixed_turns = static_cast<int>(parse_uint(key, value));
  else if (key == "max_turns") cc.max_turns = static_cast<int>(parse_uint(key, value));
  else if (key == "belief_points") cc.solver.belief_points = parse_uint(key, value);
  else if (key == "epsilon") cc.solver.epsilon = parse_double(key, value);
  else if (key == "max_iterations") cc.solver.max_iterations = parse_uint(key, value);
  else if (key == "solver_seed") cc.solver.seed = parse_uint(key, value);
  else throw ConfigError(key, "unknown setting");
}

// Flat `key = value` lines; `#` starts a comment.
inline BatchConfig parse_batch_config(std::string_view src, const std::filesystem::path& base_dir = {}) {
  BatchConfig c;
  std::istringstream in{std::string(src)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    auto t = text::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(lineno, "expected key = value");
    auto key = text::trim(std::string_view(t).substr(0, eq));
    auto value = text::trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ParseError(lineno, "empty key");
    apply_setting(c, key, value, base_dir);
  }
  return c;
}

inline BatchConfig load_batch_config(const std::filesystem::path& path) {
  return parse_batch_config(detail::read_file(path, "config"), path.parent_path());
}

struct BatchResult {
  std::string agent;
  std::size_t kb_size = 0;
  Metrics overall;
  std::vector<Metrics> sub;
  std::vector<TrialRecord> records;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t trial_seed(std::uint64_t master, std::size_t trial) {
  return splitmix64(splitmix64(master) ^ static_cast<std::uint64_t>(trial));
}

inline TrialRecord run_seeded_trial(const BatchConfig& cfg, const KnowledgeBase& kb, std::size_t index,
                                    const std::shared_ptr<PolicyCache>& cache) {
  std::mt19937_64 rng(trial_seed(cfg.seed, index));
  auto req = sample_request(kb, cfg.unknown, cfg.reserve, rng);
  ControllerConfig cc = cfg.controller;
  cc.variant = cfg.agent;
  cc.simulate_noise = true;
  cc.seed = rng();
  return run_trial(kb, req, cc, cache);
}

inline BatchResult run_batch(const BatchConfig& cfg, std::shared_ptr<PolicyCache> cache = nullptr) {
  cfg.validate();
  if (!cache) cache = std::make_shared<PolicyCache>();
  const auto kb = cfg.make_kb();
  BatchResult out;
  out.agent = std::string(to_string(cfg.agent));
  out.kb_size = kb_size(kb);
  out.records.resize(cfg.trials);
  // Warm the cache for the seed KB before fanning out.
  cache->get(build_dialog_pomdp(kb, cfg.controller.noise, cfg.controller.rewards, cfg.controller.discount),
             cfg.controller.solver);

  std::size_t workers = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, cfg.trials);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < cfg.trials; i = next++) out.records[i] = run_seeded_trial(cfg, kb, i, cache);
      } catch (...) {
        errors[w] = std::current_exception();
        next = cfg.trials;
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  out.overall = score(out.records);
  // Contiguous sub-batches of (nearly) equal size.
  for (std::size_t k = 0; k < cfg.sub_batches; ++k) {
    const std::size_t lo = k * cfg.trials / cfg.sub_batches, hi = (k + 1) * cfg.trials / cfg.sub_batches;
    out.sub.push_back(score({out.records.begin() + static_cast<long>(lo), out.records.begin() + static_cast<long>(hi)}));
  }
  return out;
}

// Population standard deviation.
inline double population_std(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(xs.size()));
}

struct MetricColumn {
  const char* name;
  double Metrics::*field;
};

inline const std::vector<MetricColumn>& metric_columns() {
  static const std::vector<MetricColumn> cols = {
      {"success_rate", &Metrics::success_rate},
      {"f1", &Metrics::f1},
      {"precision", &Metrics::precision},
      {"recall", &Metrics::recall},
      {"mean_qa_cost", &Metrics::mean_qa_cost},
      {"mean_reward", &Metrics::mean_reward},
      {"mean_turns_to_augment", &Metrics::mean_turns_to_augment},
      {"augment_accuracy", &Metrics::augment_accuracy},
      {"mean_turns", &Metrics::mean_turns},
  };
  return cols;
}

inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << x;
  return os.str();
}

inline std::string csv_header() {
  std::string h = "agent,kb_size,trials";
  for (const auto& c : metric_columns()) h += std::string(",") + c.name;
  for (const auto& c : metric_columns()) h += std::string(",") + c.name + "_std";
  return h + "\n";
}

// Sub-batch std skips sub-batches where the metric is undefined (NaN).
inline std::string csv_row(const BatchResult& r) {
  std::string row = r.agent + "," + std::to_string(r.kb_size) + "," + std::to_string(r.overall.trials);
  for (const auto& c : metric_columns()) row += "," + format_number(r.overall.*c.field);
  for (const auto& c : metric_columns()) {
    std::vector<double> xs;
    for (const auto& s : r.sub)
      if (!std::isnan(s.*c.field)) xs.push_back(s.*c.field);
    row += "," + format_number(xs.empty() ? std::nan("") : population_std(xs));
  }
  return row + "\n";
}

inline nlohmann::json trial_to_json(const TrialRecord& r, std::size_t index) {
  nlohmann::json j;
  j["trial"] = index;
  j["request"] = {{"task", r.request.task.name}, {"item", r.request.item.name}, {"recipient", r.request.recipient.name}};
  j["unknown_slot"] = r.request.unknown_slot() ? nlohmann::json(to_string(*r.request.unknown_slot())) : nlohmann::json(nullptr);
  j["reported"] = r.reported;
  j["success"] = r.success;
  j["report_correct"] = r.report_correct;
  j["augmented"] = r.augmented ? nlohmann::json(to_string(*r.augmented)) : nlohmann::json(nullptr);
  j["augmentation_correct"] = r.augmentation_correct;
  j["turns"] = r.turns;
  j["questions"] = r.questions;
  j["qa_cost"] = r.qa_cost;
  j["dialog_reward"] = r.dialog_reward;
  j["events"] = nlohmann::json::array();
  for (const auto& e : r.events) j["events"].push_back(to_json(e));
  return j;
}

// Writes `<agent>_<kb>.csv` and `<agent>_<kb>_trials.jsonl` into `dir`.
inline std::filesystem::path write_batch(const BatchResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto stem = r.agent + "_" + std::to_string(r.kb_size);
  const auto csv = dir / (stem + ".csv");
  {
    std::ofstream out(csv, std::ios::binary);
    out << csv_header() << csv_row(r);
  }
  std::ofstream trials(dir / (stem + "_trials.jsonl"), std::ios::binary);
  for (std::size_t i = 0; i < r.records.size(); ++i) trials << trial_to_json(r.records[i], i).dump() << "\n";
  return csv;
}

// ---- replay -------------------------------------------------------------------

inline std::vector<DialogEvent> read_events(std::string_view src) {
  std::vector<DialogEvent> out;
  std::istringstream in{std::string(src)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(event_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    } catch (const Error& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out;
}

inline std::string render_transcript(const std::vector<DialogEvent>& events) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (i == 0) os << "Robot: " << e.prompt_text << "\n";
    os << "User:  " << e.utterance << "\n";
    os << "       [turn " << e.turn << "  H(b)=" << e.entropy << "  delta=" << e.delta << "/" << e.delta_threshold
       << "  unknown item=" << e.unknown_item_mass << " recipient=" << e.unknown_recipient_mass << "]\n";
    for (const auto& m : e.kb_mutations) os << "       [learned " << to_string(m.category) << " " << m.name << "]\n";
    os << "Robot: " << e.reply_text << "\n";
  }
  return os.str();
}

// Accepts an event log (one event per line) or a trials file (one record
// per line with an "events" array); trials are rendered one after another.
inline std::string replay(std::string_view jsonl) {
  std::istringstream in{std::string(jsonl)};
  std::string line, out;
  std::vector<DialogEvent> loose;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (!j.contains("events")) {
        loose.push_back(event_from_json(j));
        continue;
      }
      std::vector<DialogEvent> evs;
      for (const auto& e : j.at("events")) evs.push_back(event_from_json(e));
      out += "--- trial " + std::to_string(j.value("trial", lineno - 1)) + " ---\n" + render_transcript(evs) + "\n";
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out + render_transcript(loose);
}

// ---- plots --------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ConfigError(name, "no such CSV column");
  }
};

inline CsvTable parse_csv(std::string_view src) {
  CsvTable t;
  std::istringstream in{std::string(src)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(text::trim(cell));
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    // Repeated headers from concatenated files are skipped.
    if (cells == t.header) continue;
    if (cells.size() != t.header.size()) throw ParseError(lineno, "column count mismatch");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

// Line plot of y against x, one series per distinct value of `group`.
inline std::string svg_plot(const CsvTable& t, const std::string& x, const std::string& y, const std::string& group) {
  const auto xi = t.column(x), yi = t.column(y), gi = t.column(group);
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& r : t.rows) {
    double xv = detail::parse_double(x, r[xi]), yv = detail::parse_double(y, r[yi]);
    if (std::isnan(xv) || std::isnan(yv)) continue;
    series[r[gi]].emplace_back(xv, yv);
    x0 = std::min(x0, xv), x1 = std::max(x1, xv), y0 = std::min(y0, yv), y1 = std::max(y1, yv);
  }
  if (series.empty()) throw ConfigError(y, "no numeric points to plot");
  if (x1 == x0) x0 -= 1, x1 += 1;
  if (y1 == y0) y0 -= 1, y1 += 1;
  const double W = 480, H = 320, L = 60, R = 120, T = 20, B = 40;
  auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\">" << x << "</text>\n";
  os << "<text x=\"12\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 12 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\">" << y << "</text>\n";
  for (double v : {x0, x1})
    os << "<text x=\"" << px(v) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\">" << v << "</text>\n";
  for (double v : {y0, y1})
    os << "<text x=\"" << L - 4 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
  std::size_t k = 0;
  for (auto& [name, pts] : series) {
    std::sort(pts.begin(), pts.end());
    const char* c = colors[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" points=\"";
    for (const auto& [a, b] : pts) os << px(a) << "," << py(b) << " ";
    os << "\"/>\n";
    for (const auto& [a, b] : pts) os << "<circle cx=\"" << px(a) << "\" cy=\"" << py(b) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
    os << "<text x=\"" << W - R + 8 << "\" y=\"" << T + 14 * (k + 1) << "\" fill=\"" << c << "\">" << name << "</text>\n";
    ++k;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace dualtrack
