#pragma once
// Live dialog sessions: a thread-safe session manager plus an HTTP and
// WebSocket front end (Boost.Beast, one thread per connection).
//
//   POST /sessions                 {"profile": "default"} -> {"session", "text"}
//   GET  /sessions                 -> [{"session", "profile", "phase", "turns"}]
//   GET  /sessions/:id/log         -> JSON lines, one DialogEvent per line
//   POST /sessions/:id/messages    {"text"} -> {"reply": agent_msg, "event": event}
//   GET  /profiles                 -> ["default", ...]
//   WS   /sessions/:id/ws          user_msg in; agent_msg + event out
//
// Socket messages: {"type": "user_msg"|"agent_msg"|"event"|"error",
// "session", "text"?, "event"?}.

#include <sys/socket.h>

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <regex>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "json.hpp"

#include "dualtrack/controller.hpp"
#include "dualtrack/kb.hpp"
#include "dualtrack/simuser.hpp"

namespace dualtrack {

// Named KB profiles: `<dir>/<name>.kb`. Without a directory only the
// built-in "default" profile exists.
class ProfileStore {
 public:
  explicit ProfileStore(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}

  static KnowledgeBase builtin_default() {
    return make_delivery_kb({"coffee", "hamburger", "pop", "sandwich", "soda"},
                            {"alice", "ellen", "bob", "carol", "frank"});
  }

  std::vector<std::string> names() const {
    std::set<std::string> out{"default"};
    if (!dir_.empty() && std::filesystem::is_directory(dir_))
      for (const auto& e : std::filesystem::directory_iterator(dir_))
        if (e.path().extension() == ".kb") out.insert(e.path().stem().string());
    return {out.begin(), out.end()};
  }

  KnowledgeBase load(const std::string& name) const {
    static const std::regex ok("[A-Za-z0-9_-]+");
    if (!std::regex_match(name, ok)) throw NotFound("no such profile '" + name + "'");
    if (!dir_.empty()) {
      const auto p = dir_ / (name + ".kb");
      if (std::filesystem::exists(p)) {
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        return deserialize(ss.str());
      }
    }
    if (name == "default") return builtin_default();
    throw NotFound("no such profile '" + name + "'");
  }

 private:
  std::filesystem::path dir_;
};

inline nlohmann::json agent_message(const std::string& session, const std::string& text) {
  return {{"type", "agent_msg"}, {"session", session}, {"text", text}};
}

inline nlohmann::json event_message(const std::string& session, const nlohmann::json& event) {
  return {{"type", "event"}, {"session", session}, {"event", event}};
}

inline nlohmann::json error_message(const std::string& session, const std::string& text) {
  return {{"type", "error"}, {"session", session}, {"text", text}};
}

struct ServiceOptions {
  ControllerConfig controller;          // simulate_noise off by default: humans are the noise
  std::filesystem::path log_dir;        // per-session JSON-lines logs; empty: memory only
};

struct SessionSummary {
  std::string id, profile, phase;
  int turns = 0;
};

struct Reply {
  std::string text;
  nlohmann::json event;
  bool terminated = false;
};

class SessionManager {
 public:
  SessionManager(ProfileStore profiles, ServiceOptions opt, std::shared_ptr<PolicyCache> cache = nullptr)
      : profiles_(std::move(profiles)),
        opt_(std::move(opt)),
        cache_(cache ? std::move(cache) : std::make_shared<PolicyCache>()),
        rng_(std::random_device{}()) {
    opt_.controller.validate();
    if (!opt_.log_dir.empty()) std::filesystem::create_directories(opt_.log_dir);
  }

  const ProfileStore& profiles() const { return profiles_; }

  // Returns (session id, first agent message).
  std::pair<std::string, std::string> create_session(const std::string& profile) {
    auto kb = profiles_.load(profile);
    auto s = std::make_shared<Session>();
    s->profile = profile;
    std::string id;
    {
      std::unique_lock lock(mu_);
      do id = new_id(); while (sessions_.count(id));
      ControllerConfig cfg = opt_.controller;
      cfg.seed = rng_();
      lock.unlock();
      s->ctl = std::make_unique<DialogController>(std::move(kb), cfg, cache_);
      lock.lock();
      s->id = id;
      sessions_.emplace(id, s);
    }
    return {id, s->ctl->current_prompt().text};
  }

  Reply user_message(const std::string& id, std::string_view text) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    if (s->ctl->terminated()) throw SessionTerminated("session " + id + " is terminated");
    auto res = s->ctl->step(text);
    auto ev = to_json(res.event);
    s->log.push_back(ev.dump());
    if (!opt_.log_dir.empty()) {
      std::ofstream out(opt_.log_dir / (id + ".jsonl"), std::ios::app);
      out << s->log.back() << "\n";
    }
    return Reply{res.reply.text, std::move(ev), s->ctl->terminated()};
  }

  std::string current_prompt(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    return s->ctl->current_prompt().text;
  }

  // JSON lines, one event per reply so far.
  std::string get_log(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    std::string out;
    for (const auto& l : s->log) out += l + "\n";
    return out;
  }

  KnowledgeBase kb_snapshot(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    return s->ctl->state().kb;
  }

  std::vector<SessionSummary> list() {
    std::vector<std::shared_ptr<Session>> all;
    {
      std::shared_lock lock(mu_);
      for (const auto& [id, s] : sessions_) all.push_back(s);
    }
    std::vector<SessionSummary> out;
    for (const auto& s : all) {
      std::lock_guard lock(s->mu);
      out.push_back({s->id, s->profile, std::string(to_string(s->ctl->state().phase)), s->ctl->state().turn});
    }
    return out;
  }

 private:
  struct Session {
    std::mutex mu;
    std::string id, profile;
    std::unique_ptr<DialogController> ctl;
    std::vector<std::string> log;
  };

  std::shared_ptr<Session> find(const std::string& id) {
    std::shared_lock lock(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFound("no such session '" + id + "'");
    return it->second;
  }

  std::string new_id() {
    static const char* hex = "0123456789abcdef";
    std::string id;
    auto v = rng_();
    for (int i = 0; i < 16; ++i, v >>= 4) id += hex[v & 15];
    return id;
  }

  ProfileStore profiles_;
  ServiceOptions opt_;
  std::shared_ptr<PolicyCache> cache_;
  std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mt19937_64 rng_;
};

// "host:port" from DUALTRACK_BIND, defaulting to 127.0.0.1:8080.
inline std::pair<std::string, unsigned short> bind_address_from_env(const char* fallback = "127.0.0.1:8080") {
  const char* env = std::getenv("DUALTRACK_BIND");
  std::string v = env && *env ? env : fallback;
  auto colon = v.rfind(':');
  if (colon == std::string::npos) throw ConfigError("DUALTRACK_BIND", "expected host:port, got '" + v + "'");
  int port = 0;
  try {
    port = std::stoi(v.substr(colon + 1));
  } catch (const std::exception&) {
    port = -1;
  }
  if (port < 0 || port > 65535) throw ConfigError("DUALTRACK_BIND", "bad port in '" + v + "'");
  return {v.substr(0, colon), static_cast<unsigned short>(port)};
}

class Server {
 public:
  Server(std::shared_ptr<SessionManager> mgr, const std::string& host, unsigned short port)
      : mgr_(std::move(mgr)), acceptor_(ioc_) {
    namespace net = boost::asio;
    net::ip::tcp::endpoint ep{net::ip::make_address(host), port};
    acceptor_.open(ep.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen();
  }

  ~Server() { stop(); }

  unsigned short port() const { return acceptor_.local_endpoint().port(); }

  // Blocks until stop().
  void run() {
    while (!stopped_) {
      boost::asio::ip::tcp::socket sock(ioc_);
      boost::system::error_code ec;
      acceptor_.accept(sock, ec);
      if (stopped_) break;
      if (ec) continue;
      {
        std::lock_guard lock(conn_mu_);
        open_.insert(sock.native_handle());
        ++active_;
      }
      std::thread([this, s = std::move(sock)]() mutable {
        const int fd = s.native_handle();
        handle(std::move(s));
        std::lock_guard lock(conn_mu_);
        open_.erase(fd);
        if (--active_ == 0) conn_cv_.notify_all();
      }).detach();
    }
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    ::shutdown(acceptor_.native_handle(), SHUT_RDWR);
    boost::system::error_code ec;
    acceptor_.close(ec);
    std::unique_lock lock(conn_mu_);
    for (int fd : open_) ::shutdown(fd, SHUT_RDWR);
    conn_cv_.wait(lock, [&] { return active_ == 0; });
  }

 private:
  using Request = boost::beast::http::request<boost::beast::http::string_body>;
  using Response = boost::beast::http::response<boost::beast::http::string_body>;

  static Response json_response(const Request& req, boost::beast::http::status st, const nlohmann::json& body) {
    Response res{st, req.version()};
    res.set(boost::beast::http::field::content_type, "application/json");
    res.set(boost::beast::http::field::access_control_allow_origin, "*");
    res.keep_alive(req.keep_alive());
    res.body() = body.dump();
    res.prepare_payload();
    return res;
  }

  Response route(const Request& req) {
    namespace http = boost::beast::http;
    static const std::regex log_re("^/sessions/([A-Za-z0-9]+)/log$");
    static const std::regex msg_re("^/sessions/([A-Za-z0-9]+)/messages$");
    const std::string target(req.target());
    std::smatch m;
    std::string session;
    try {
      if (req.method() == http::verb::post && target == "/sessions") {
        std::string profile = "default";
        if (!req.body().empty()) profile = nlohmann::json::parse(req.body()).value("profile", profile);
        auto [id, text] = mgr_->create_session(profile);
        return json_response(req, http::status::created,
                             {{"type", "agent_msg"}, {"session", id}, {"text", text}, {"profile", profile}});
      }
      if (req.method() == http::verb::get && target == "/sessions") {
        auto arr = nlohmann::json::array();
        for (const auto& s : mgr_->list())
          arr.push_back({{"session", s.id}, {"profile", s.profile}, {"phase", s.phase}, {"turns", s.turns}});
        return json_response(req, http::status::ok, arr);
      }
      if (req.method() == http::verb::get && target == "/profiles")
        return json_response(req, http::status::ok, mgr_->profiles().names());
      if (req.method() == http::verb::get && std::regex_match(target, m, log_re)) {
        session = m[1];
        Response res{http::status::ok, req.version()};
        res.set(http::field::content_type, "application/x-ndjson");
        res.set(http::field::access_control_allow_origin, "*");
        res.keep_alive(req.keep_alive());
        res.body() = mgr_->get_log(session);
        res.prepare_payload();
        return res;
      }
      if (req.method() == http::verb::post && std::regex_match(target, m, msg_re)) {
        session = m[1];
        const auto body = nlohmann::json::parse(req.body());
        auto reply = mgr_->user_message(session, body.at("text").get<std::string>());
        return json_response(req, http::status::ok,
                             {{"reply", agent_message(session, reply.text)},
                              {"event", event_message(session, reply.event)},
                              {"terminated", reply.terminated}});
      }
      return json_response(req, http::status::not_found, error_message(session, "no route for " + target));
    } catch (const NotFound& e) {
      return json_response(req, http::status::not_found, error_message(session, e.what()));
    } catch (const SessionTerminated& e) {
      return json_response(req, http::status::conflict, error_message(session, e.what()));
    } catch (const nlohmann::json::exception& e) {
      return json_response(req, http::status::bad_request, error_message(session, e.what()));
    } catch (const Error& e) {
      return json_response(req, http::status::bad_request, error_message(session, e.what()));
    }
  }

  void handle(boost::asio::ip::tcp::socket sock) {
    namespace beast = boost::beast;
    namespace http = beast::http;
    beast::flat_buffer buf;
    boost::system::error_code ec;
    for (;;) {
      Request req;
      http::read(sock, buf, req, ec);
      if (ec) break;
      if (beast::websocket::is_upgrade(req)) {
        websocket(std::move(sock), req);
        return;
      }
      auto res = route(req);
      http::write(sock, res, ec);
      if (ec || !res.keep_alive()) break;
    }
    sock.shutdown(boost::asio::ip::tcp::socket::shutdown_both, ec);
  }

  void websocket(boost::asio::ip::tcp::socket sock, const Request& req) {
    namespace beast = boost::beast;
    static const std::regex ws_re("^/sessions/([A-Za-z0-9]+)/ws$");
    beast::websocket::stream<boost::asio::ip::tcp::socket> ws(std::move(sock));
    boost::system::error_code ec;
    ws.accept(req, ec);
    if (ec) return;
    ws.text(true);
    auto send = [&](const nlohmann::json& j) {
      ws.write(boost::asio::buffer(j.dump()), ec);
      return !ec;
    };
    const std::string target(req.target());
    std::smatch m;
    if (!std::regex_match(target, m, ws_re)) {
      send(error_message("", "no route for " + target));
      ws.close(beast::websocket::close_code::normal, ec);
      return;
    }
    const std::string session = m[1];
    try {
      if (!send(agent_message(session, mgr_->current_prompt(session)))) return;
    } catch (const Error& e) {
      send(error_message(session, e.what()));
      ws.close(beast::websocket::close_code::normal, ec);
      return;
    }
    for (;;) {
      beast::flat_buffer buf;
      ws.read(buf, ec);
      if (ec) return;
      nlohmann::json out;
      try {
        const auto msg = nlohmann::json::parse(beast::buffers_to_string(buf.data()));
        if (msg.value("type", "") != "user_msg") throw Error("expected a user_msg");
        auto reply = mgr_->user_message(session, msg.at("text").get<std::string>());
        if (!send(event_message(session, reply.event))) return;
        if (!send(agent_message(session, reply.text))) return;
        continue;
      } catch (const nlohmann::json::exception& e) {
        out = error_message(session, e.what());
      } catch (const Error& e) {
        out = error_message(session, e.what());
      }
      if (!send(out)) return;
    }
  }

  std::shared_ptr<SessionManager> mgr_;
  boost::asio::io_context ioc_;
  boost::asio::ip::tcp::acceptor acceptor_;
  std::atomic<bool> stopped_{false};
  std::mutex conn_mu_;
  std::condition_variable conn_cv_;
  std::set<int> open_;
  std::size_t active_ = 0;
};

}  // namespace dualtrack
