// dualtrack command-line tool: batch experiments, transcript replay,
// interactive chat, SVG plots and the session server.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "dualtrack/controller.hpp"
#include "dualtrack/experiments.hpp"
#include "dualtrack/service.hpp"

namespace fs = std::filesystem;
using namespace dualtrack;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("path", "cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Globals {
  std::string kb_path;
  std::uint64_t seed = 1;
  std::string dump_model;
  bool no_policy_cache = false;
  std::string policy_cache_dir = ".dualtrack_cache";
};

std::shared_ptr<PolicyCache> make_cache(const Globals& g) {
  return std::make_shared<PolicyCache>(g.no_policy_cache ? fs::path{} : fs::path(g.policy_cache_dir),
                                       !g.no_policy_cache);
}

KnowledgeBase load_kb(const Globals& g) {
  return g.kb_path.empty() ? ProfileStore::builtin_default() : deserialize(slurp(g.kb_path));
}

void dump_models(const Globals& g, const KnowledgeBase& kb, const ControllerConfig& cfg) {
  std::ofstream out(g.dump_model);
  if (!out) throw ConfigError("dump-model", "cannot write " + g.dump_model);
  out << "# dialog model\n";
  dump_model(out, build_dialog_pomdp(kb, cfg.noise, cfg.rewards, cfg.discount), kb);
  out << "\n# knowledge model\n";
  dump_model(out, build_knowledge_pomdp(kb, cfg.noise, cfg.rewards, cfg.discount), kb);
}

int cmd_run(const Globals& g, const std::string& config, const std::string& agent, std::size_t kb_size,
            std::size_t trials, std::optional<std::uint64_t> seed, const std::string& out_dir,
            const std::vector<std::string>& sets, std::size_t threads) {
  BatchConfig cfg = config.empty() ? BatchConfig{} : load_batch_config(config);
  if (!g.kb_path.empty()) cfg.kb = load_kb(g);
  if (!agent.empty()) cfg.agent = agent_variant_from_string(agent);
  if (kb_size) {
    cfg.kb_size = kb_size;
    cfg.kb.reset();
  }
  if (trials) cfg.trials = trials;
  if (seed) cfg.seed = *seed;
  if (threads) cfg.threads = threads;
  for (const auto& s : sets) {
    auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(s, "expected key=value");
    apply_setting(cfg, text::trim(s.substr(0, eq)), text::trim(s.substr(eq + 1)));
  }
  if (!g.dump_model.empty()) dump_models(g, cfg.make_kb(), cfg.controller);
  auto res = run_batch(cfg, make_cache(g));
  auto csv = write_batch(res, out_dir);
  std::cout << csv_header() << csv_row(res);
  std::cerr << "wrote " << csv.string() << "\n";
  return 0;
}

int cmd_chat(const Globals& g, bool simulate_noise, const std::string& events_out, const std::string& agent) {
  ControllerConfig cfg;
  cfg.seed = g.seed;
  cfg.simulate_noise = simulate_noise;
  if (!agent.empty()) cfg.variant = agent_variant_from_string(agent);
  auto kb = load_kb(g);
  if (!g.dump_model.empty()) dump_models(g, kb, cfg);
  DialogController ctl(kb, cfg, make_cache(g));
  std::ofstream log;
  if (!events_out.empty()) log.open(events_out);
  std::cout << "Robot: " << ctl.current_prompt().text << "\n";
  std::string line;
  while (!ctl.terminated() && std::cout << "> " << std::flush && std::getline(std::cin, line)) {
    auto res = ctl.step(line);
    const auto& e = res.event;
    std::cout << "       [parse=" << e.parse_kind << " H(b)=" << e.entropy << " delta=" << e.delta << "/"
              << e.delta_threshold << " unknown item=" << e.unknown_item_mass
              << " recipient=" << e.unknown_recipient_mass << "]\n";
    if (log) log << to_json(e).dump() << "\n";
    std::cout << "Robot: " << res.reply.text << "\n";
  }
  if (ctl.terminated()) std::cout << "\n" << serialize(ctl.state().kb);
  return 0;
}

Server* g_server = nullptr;

int cmd_serve(const Globals& g, std::string profiles, std::string bind, bool simulate_noise, const std::string& log_dir) {
  if (profiles.empty()) {
    const char* env = std::getenv("DUALTRACK_PROFILES");
    profiles = env && *env ? env : DUALTRACK_DATA_DIR "/profiles";
  }
  ServiceOptions opt;
  opt.controller.simulate_noise = simulate_noise;
  opt.log_dir = log_dir;
  auto mgr = std::make_shared<SessionManager>(ProfileStore(profiles), opt, make_cache(g));
  std::pair<std::string, unsigned short> addr;
  if (bind.empty()) {
    addr = bind_address_from_env();
  } else {
    setenv("DUALTRACK_BIND", bind.c_str(), 1);
    addr = bind_address_from_env();
  }
  Server server(mgr, addr.first, addr.second);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) std::thread([] { g_server->stop(); }).detach();
  });
  std::cerr << "listening on " << addr.first << ":" << server.port() << " (profiles: " << profiles << ")\n";
  server.run();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-track POMDP dialog agent with knowledge-base augmentation"};
  app.require_subcommand(0, 1);
  Globals g;
  app.add_option("--kb", g.kb_path, "Knowledge base fact file");
  app.add_option("--seed", g.seed, "Seed for chat sessions");
  app.add_option("--dump-model", g.dump_model, "Write the dialog and knowledge models as text");
  app.add_flag("--no-policy-cache", g.no_policy_cache, "Do not read or write solved policies on disk");
  app.add_option("--policy-cache", g.policy_cache_dir, "Directory for solved policies");

  auto* run = app.add_subcommand("run", "Run a simulated batch and write CSV");
  std::string config, agent, out_dir = "results";
  std::size_t kb_size = 0, trials = 0, threads = 0;
  std::optional<std::uint64_t> batch_seed;
  std::vector<std::string> sets;
  run->add_option("--config", config, "Batch config file (key = value)");
  run->add_option("--agent", agent, "dual | b1 | b2 | b3");
  run->add_option("--kb-size", kb_size, "Generated delivery KB of this size");
  run->add_option("--trials", trials, "Number of trials");
  run->add_option("--seed", batch_seed, "Master seed");
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--threads", threads, "Worker threads (0: all cores)");
  run->add_option("--set", sets, "Override a config setting, key=value");

  auto* rep = app.add_subcommand("replay", "Render a JSON-lines event log as a transcript");
  std::string events;
  rep->add_option("--events", events, "Event log")->required();

  auto* chat = app.add_subcommand("chat", "Interactive terminal dialog");
  bool chat_noise = false;
  std::string chat_events, chat_agent;
  chat->add_flag("--simulate-noise", chat_noise, "Pass observations through the noise channel");
  chat->add_option("--events-out", chat_events, "Write events as JSON lines");
  chat->add_option("--agent", chat_agent, "dual | b1 | b2 | b3");

  auto* plot = app.add_subcommand("plot", "SVG line plot from batch CSV files");
  std::vector<std::string> csvs;
  std::string px = "kb_size", py = "f1", pgroup = "agent", pout = "plot.svg";
  plot->add_option("--csv", csvs, "CSV files")->required();
  plot->add_option("--x", px);
  plot->add_option("--y", py);
  plot->add_option("--group", pgroup);
  plot->add_option("--out", pout);

  auto* serve = app.add_subcommand("serve", "Run the session server");
  std::string profiles, bind, log_dir;
  bool serve_noise = false;
  serve->add_option("--profiles", profiles, "KB profile directory (env DUALTRACK_PROFILES)");
  serve->add_option("--bind", bind, "host:port (env DUALTRACK_BIND, default 127.0.0.1:8080)");
  serve->add_flag("--simulate-noise", serve_noise, "Apply the observation noise channel to live input");
  serve->add_option("--log-dir", log_dir, "Per-session JSON-lines logs");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(g, config, agent, kb_size, trials, batch_seed, out_dir, sets, threads);
    if (*rep) {
      std::cout << replay(slurp(events));
      return 0;
    }
    if (*chat) return cmd_chat(g, chat_noise, chat_events, chat_agent);
    if (*plot) {
      std::string all;
      for (const auto& c : csvs) all += slurp(c);
      std::ofstream(pout) << svg_plot(parse_csv(all), px, py, pgroup);
      return 0;
    }
    if (*serve) return cmd_serve(g, profiles, bind, serve_noise, log_dir);
    if (!g.dump_model.empty()) {
      dump_models(g, load_kb(g), ControllerConfig{});
      return 0;
    }
    std::cout << app.help();
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error (" << e.field << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
