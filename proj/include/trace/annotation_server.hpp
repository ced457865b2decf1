#pragma once

// HTTP backend for HCoT annotation (JSON over HTTP, versioned under /api/v1).
//
//   POST /api/v1/sessions          {pass, dataset?, resample_fraction?, seed?} -> {session_id}
//   GET  /api/v1/tasks/next        ?session=ID -> task descriptor | 204
//   POST /api/v1/ratings           AnnotationRecord -> 201 | 400 | 403 | 409 | 422
//   GET  /api/v1/agreement         ?dataset=&replicates=&seed= -> pairwise agreement | 409
//   GET  /api/v1/health
//   GET  /audio/{sha256}           read-only, byte ranges honoured
//   /                              static UI bundle when configured
//
// Annotators authenticate with "Authorization: Bearer <token>" (or ?token=
// for audio elements that cannot set headers).

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "trace/config.hpp"
#include "trace/datastore.hpp"
#include "trace/protocol.hpp"
#include "trace/stats.hpp"

namespace trace::server {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

struct ServerConfig {
  std::map<std::string, std::string> tokens;  // token -> annotator id
  std::optional<fs::path> ui_dir;
  std::chrono::milliseconds claim_ttl{std::chrono::minutes(15)};
  std::size_t agreement_replicates = 1000;
  std::uint64_t agreement_seed = 0;
  std::function<std::int64_t()> now_ms = [] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };

  /// [annotators] token = annotator_id; [server] ui_dir, claim_ttl_seconds.
  static ServerConfig from_config(const config::KeyValues& kv) {
    ServerConfig c;
    for (const auto& [k, v] : kv.entries())
      if (k.rfind("annotators.", 0) == 0) c.tokens[k.substr(11)] = v;
    if (auto ui = kv.get("server.ui_dir")) c.ui_dir = *ui;
    if (kv.has("server.claim_ttl_seconds"))
      c.claim_ttl = std::chrono::milliseconds(static_cast<long long>(*kv.get_number("server.claim_ttl_seconds") * 1000));
    return c;
  }
};

struct Session {
  std::string id;
  std::string annotator_id;
  protocol::Pass pass = protocol::Pass::hcot;
  std::optional<datastore::Dataset> dataset;
  double resample_fraction = 1.0;
  std::uint64_t seed = 0;
  std::vector<std::string> queue;  // fixed at creation
};

/// Deterministic resample subset: ids sorted, Fisher-Yates with SplitMix64(seed),
/// first ceil(fraction * n) kept, then re-sorted for presentation.
inline std::vector<std::string> resample_subset(std::vector<std::string> ids, double fraction, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  stats::SplitMix64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size())));
  ids.resize(std::min(keep, ids.size()));
  std::sort(ids.begin(), ids.end());
  return ids;
}

class AnnotationServer {
 public:
  AnnotationServer(datastore::Store& store, ServerConfig cfg) : store_(store), cfg_(std::move(cfg)) { routes(); }

  httplib::Server& http() { return http_; }

  bool listen(const std::string& host, int port) { return http_.listen(host, port); }
  int bind_any(const std::string& host = "127.0.0.1") { return http_.bind_to_any_port(host); }
  bool listen_after_bind() { return http_.listen_after_bind(); }
  void stop() { http_.stop(); }

 private:
  struct Claim {
    std::string session_id;
    std::string annotator_id;
    std::int64_t expires_ms = 0;
  };

  static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& msg,
                         ordered_json extra = ordered_json::object()) {
    ordered_json j{{"error", code}, {"message", msg}};
    j.update(extra);
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void send_json(httplib::Response& res, int status, const ordered_json& j) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  std::optional<std::string> annotator(const httplib::Request& req) const {
    std::string token;
    auto auth = req.get_header_value("Authorization");
    if (auth.rfind("Bearer ", 0) == 0) token = auth.substr(7);
    if (token.empty() && req.has_param("token")) token = req.get_param_value("token");
    auto it = cfg_.tokens.find(token);
    if (token.empty() || it == cfg_.tokens.end()) return std::nullopt;
    return it->second;
  }

  template <class Fn>
  httplib::Server::Handler authed(Fn fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      auto who = annotator(req);
      if (!who) return send_error(res, 401, "UNAUTHORIZED", "missing or unknown token");
      try {
        fn(req, res, *who);
      } catch (const CodedError& e) {
        send_error(res, 400, e.code(), e.detail());
      } catch (const std::exception& e) {
        send_error(res, 500, "INTERNAL", e.what());
      }
    };
  }

  /// Examples already labelled in a pass, by anyone.
  std::set<std::string> done(protocol::Pass pass) const {
    std::set<std::string> out;
    for (const auto& a : store_.annotations())
      if (a.pass == pass) out.insert(a.example_id);
    return out;
  }

  bool rated_by(const std::string& example_id, const std::string& annotator_id, protocol::Pass pass) const {
    protocol::AnnotationRecord probe;
    probe.example_id = example_id;
    probe.annotator_id = annotator_id;
    probe.pass = pass;
    return store_.contains("annotations", datastore::Store::annotation_key(probe));
  }

  void routes() {
    http_.Get("/api/v1/health", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"status", "ok"}});
    });

    http_.Post("/api/v1/sessions", authed([this](const httplib::Request& req, httplib::Response& res,
                                                 const std::string& who) {
      json body = req.body.empty() ? json::object() : json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object()) return send_error(res, 400, "MALFORMED_REQUEST", "body is not JSON");
      auto pass = protocol::try_parse_pass(body.value("pass", "hcot"));
      if (!pass) return send_error(res, 400, "INVALID_CONFIG", "pass: unknown value");
      Session s;
      s.annotator_id = who;
      s.pass = *pass;
      if (body.contains("dataset")) {
        s.dataset = datastore::try_parse_dataset(body["dataset"].get<std::string>());
        if (!s.dataset) return send_error(res, 400, "INVALID_CONFIG", "dataset: unknown value");
      }
      s.resample_fraction = body.value("resample_fraction", 1.0);
      s.seed = body.value("seed", std::uint64_t{0});
      if (!(s.resample_fraction > 0.0 && s.resample_fraction <= 1.0))
        return send_error(res, 400, "INVALID_CONFIG", "resample_fraction: must be in (0, 1]");

      std::vector<std::string> ids;
      for (const auto& e : store_.examples(s.dataset)) ids.push_back(e.example_id);
      if (s.pass == protocol::Pass::hcot_resample) {
        // Resampling draws from examples that already carry a first HCoT label.
        auto labelled = done(protocol::Pass::hcot);
        std::erase_if(ids, [&](const std::string& id) { return !labelled.count(id); });
        ids = resample_subset(ids, s.resample_fraction, s.seed);
      } else {
        std::sort(ids.begin(), ids.end());
      }
      s.queue = std::move(ids);
      std::lock_guard lk(mu_);
      s.id = "s" + std::to_string(++session_counter_);
      ordered_json out{{"session_id", s.id},
                       {"annotator_id", s.annotator_id},
                       {"pass", std::string(protocol::to_string(s.pass))},
                       {"queue_length", s.queue.size()}};
      sessions_[s.id] = std::move(s);
      send_json(res, 201, out);
    }));

    http_.Get("/api/v1/tasks/next", authed([this](const httplib::Request& req, httplib::Response& res,
                                                  const std::string& who) {
      std::lock_guard lk(mu_);
      auto it = sessions_.find(req.get_param_value("session"));
      if (it == sessions_.end() || it->second.annotator_id != who)
        return send_error(res, 404, "UNKNOWN_SESSION", "no such session for this annotator");
      const Session& s = it->second;
      const auto now = cfg_.now_ms();
      const auto finished = done(s.pass);
      for (const auto& id : s.queue) {
        if (finished.count(id)) continue;
        const auto ckey = claim_key(id, s.pass);
        auto c = claims_.find(ckey);
        if (c != claims_.end() && c->second.expires_ms > now && c->second.session_id != s.id) continue;
        claims_[ckey] = Claim{s.id, who, now + cfg_.claim_ttl.count()};
        auto ex = store_.example(id);
        if (!ex) continue;
        return send_json(res, 200, descriptor(*ex, s, claims_[ckey].expires_ms));
      }
      res.status = 204;
    }));

    http_.Post("/api/v1/ratings", authed([this](const httplib::Request& req, httplib::Response& res,
                                                const std::string& who) {
      json body = json::parse(req.body, nullptr, false);
      if (body.is_discarded()) return send_error(res, 400, "MALFORMED_RECORD", "body is not JSON");
      if (body.contains("annotator_id") && body["annotator_id"] != "" && body["annotator_id"] != who)
        return send_error(res, 403, "FORBIDDEN", "annotator_id does not match the token");
      body["annotator_id"] = who;
      protocol::AnnotationRecord rec;
      try {
        rec = protocol::annotation_from_json(body);
      } catch (const CodedError& e) {
        return send_error(res, 400, e.code(), e.detail());
      }
      // One writer at a time: duplicate check, claim check and append are atomic.
      std::lock_guard lk(mu_);
      if (rated_by(rec.example_id, who, rec.pass))
        return send_error(res, 409, "DUPLICATE", "rating already stored for this example, annotator and pass");
      auto c = claims_.find(claim_key(rec.example_id, rec.pass));
      if (c == claims_.end() || c->second.annotator_id != who)
        return send_error(res, 403, "NOT_ASSIGNED", "example is not assigned to this annotator");
      if (auto v = protocol::validate(rec)) {
        ordered_json extra{{"step", v->step},
                           {"target", v->target ? ordered_json(std::string(protocol::to_string(*v->target)))
                                                : ordered_json(nullptr)}};
        return send_error(res, 422, "PROTOCOL_VIOLATION", v->message, extra);
      }
      if (rec.submitted_at.empty()) rec.submitted_at = judge::utc_now();
      store_.put_annotation(rec);
      claims_.erase(c);
      send_json(res, 201, {{"stored", true}, {"key", datastore::Store::annotation_key(rec)}});
    }));

    http_.Get("/api/v1/agreement", authed([this](const httplib::Request& req, httplib::Response& res,
                                                 const std::string&) {
      std::optional<datastore::Dataset> ds;
      if (req.has_param("dataset")) {
        ds = datastore::try_parse_dataset(req.get_param_value("dataset"));
        if (!ds) return send_error(res, 400, "INVALID_CONFIG", "dataset: unknown value");
      }
      stats::BootstrapOptions opt;
      opt.replicates = req.has_param("replicates") ? std::stoul(req.get_param_value("replicates"))
                                                   : cfg_.agreement_replicates;
      opt.seed = req.has_param("seed") ? std::stoull(req.get_param_value("seed")) : cfg_.agreement_seed;
      auto out = agreement_json(ds, opt);
      if (!out) return send_error(res, 409, "INSUFFICIENT_DATA", "fewer than two overlapping label sets");
      send_json(res, 200, *out);
    }));

    http_.Get(R"(/audio/([0-9a-f]{64}))", [this](const httplib::Request& req, httplib::Response& res) {
      if (!annotator(req)) return send_error(res, 401, "UNAUTHORIZED", "missing or unknown token");
      auto path = audio_path(req.matches[1]);
      if (!path) return send_error(res, 404, "NOT_FOUND", "unknown audio hash");
      auto bytes = io::read_text(*path);
      res.set_header("Accept-Ranges", "bytes");
      res.set_content(std::move(bytes), path->extension() == ".flac" ? "audio/flac" : "audio/wav");
    });

    if (cfg_.ui_dir) http_.set_mount_point("/", cfg_.ui_dir->string());
  }

  static std::string claim_key(const std::string& example_id, protocol::Pass pass) {
    return example_id + "|" + std::string(protocol::to_string(pass));
  }

  /// Labels are never part of the descriptor, so a resample pass cannot show
  /// an annotator their own earlier rating.
  ordered_json descriptor(const datastore::EvalExample& e, const Session& s, std::int64_t expires) const {
    ordered_json dims = ordered_json::array();
    for (auto t : protocol::target_order(s.pass)) dims.push_back(std::string(protocol::to_string(t)));
    return ordered_json{{"example_id", e.example_id},
                        {"session_id", s.id},
                        {"pass", std::string(protocol::to_string(s.pass))},
                        {"dims", dims},
                        {"audio",
                         {{"prompt", "/audio/" + e.prompt_audio.sha256},
                          {"a", "/audio/" + e.response_a.sha256},
                          {"b", "/audio/" + e.response_b.sha256}}},
                        {"claim_expires_ms", expires}};
  }

  std::optional<fs::path> audio_path(const std::string& hash) const {
    for (const auto& e : store_.examples())
      for (const auto* r : {&e.prompt_audio, &e.response_a, &e.response_b})
        if (r->sha256 == hash) return e.resolve(*r);
    return std::nullopt;
  }

  std::optional<ordered_json> agreement_json(std::optional<datastore::Dataset> ds,
                                             const stats::BootstrapOptions& opt) const {
    std::vector<std::pair<std::string, stats::LabelSet>> sets{
        {"orig", datastore::original_labels(store_, ds)},
        {"blind", datastore::label_set(store_, protocol::Pass::blind_overall_first, ds)},
        {"hcot", datastore::label_set(store_, protocol::Pass::hcot, ds)},
        {"hcot_resample", datastore::label_set(store_, protocol::Pass::hcot_resample, ds)}};
    ordered_json pairs = ordered_json::array();
    for (std::size_t i = 0; i < sets.size(); ++i)
      for (std::size_t j = i + 1; j < sets.size(); ++j) {
        if (sets[i].second.empty() || sets[j].second.empty()) continue;
        try {
          auto rep = stats::agreement(sets[i].second, sets[j].second, opt);
          auto e = stats::to_json(rep);
          e["pair"] = sets[i].first + "<->" + sets[j].first;
          pairs.push_back(e);
        } catch (const CodedError& e) {
          if (e.code() != "INSUFFICIENT_DATA") throw;
        }
      }
    if (pairs.empty()) return std::nullopt;
    return ordered_json{{"replicates", opt.replicates}, {"seed", opt.seed}, {"pairs", pairs}};
  }

  datastore::Store& store_;
  ServerConfig cfg_;
  httplib::Server http_;
  std::mutex mu_;
  std::map<std::string, Session> sessions_;
  std::map<std::string, Claim> claims_;
  std::size_t session_counter_ = 0;
};

}  // namespace trace::server
