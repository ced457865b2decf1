#pragma once

// Stage 2: prompt rendering, chat backends, decision parsing and the judge
// run loop (retries, write-ahead persistence of raw responses, rate limits).

#include <httplib.h>

#include <cctype>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

#include "trace/blueprint.hpp"
#include "trace/error.hpp"
#include "trace/hash.hpp"
#include "trace/io.hpp"
#include "trace/labels.hpp"

namespace trace::judge {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class Mode { trace_blueprint, transcript_only, audio };

constexpr std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::trace_blueprint: return "trace";
    case Mode::transcript_only: return "transcript";
    case Mode::audio: return "audio";
  }
  return "?";
}

inline std::optional<Mode> try_parse_mode(std::string_view s) {
  if (s == "trace" || s == "trace_blueprint") return Mode::trace_blueprint;
  if (s == "transcript" || s == "transcript_only" || s == "llm") return Mode::transcript_only;
  if (s == "audio") return Mode::audio;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Templates

/// `{name}` tokens where name is made of [A-Za-z0-9_.]. A lone brace (as in
/// the schema description of the TRACE prompt) is literal text.
inline std::vector<std::string> placeholders(std::string_view tmpl) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] != '{') continue;
    std::size_t j = i + 1;
    while (j < tmpl.size() && (std::isalnum(static_cast<unsigned char>(tmpl[j])) || tmpl[j] == '_' || tmpl[j] == '.'))
      ++j;
    if (j > i + 1 && j < tmpl.size() && tmpl[j] == '}') out.emplace_back(tmpl.substr(i + 1, j - i - 1));
  }
  return out;
}

/// Single left-to-right pass: substituted values are never rescanned, so a
/// transcript containing "{user_prompt}" stays literal.
inline std::string substitute(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  for (const auto& name : placeholders(tmpl))
    if (!values.count(name)) throw CodedError("TEMPLATE_PLACEHOLDER_UNRESOLVED", "{" + name + "}");
  std::string out;
  out.reserve(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        auto it = values.find(std::string(tmpl.substr(i + 1, close - i - 1)));
        if (it != values.end()) {
          out += it->second;
          i = close;
          continue;
        }
      }
    }
    out.push_back(tmpl[i]);
  }
  return out;
}

/// Template files loaded from a prompts directory. The version digest covers
/// every file so runs record exactly which text they were rendered from.
class TemplateSet {
 public:
  static TemplateSet load(const fs::path& dir) {
    TemplateSet t;
    if (!fs::is_directory(dir)) throw CodedError("MISSING_INPUT", "prompt directory " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    hash::Sha256 h;
    for (const auto& f : files) {
      auto text = io::read_text(f);
      h.update(f.filename().string()).update("\0", 1).update(text).update("\0", 1);
      t.files_[f.stem().string()] = std::move(text);
    }
    t.version_ = hash::short_digest(h.hex());
    for (auto required : {"system", "user_trace", "user_transcript", "user_audio"})
      if (!t.files_.count(required)) throw CodedError("MISSING_INPUT", std::string("template ") + required + ".txt");
    return t;
  }

  const std::string& get(const std::string& name) const {
    auto it = files_.find(name);
    if (it == files_.end()) throw CodedError("MISSING_INPUT", "template " + name + ".txt");
    return it->second;
  }
  bool has(const std::string& name) const { return files_.count(name) != 0; }
  const std::string& version() const { return version_; }

  /// TRACE user template for an ablation mask: "user_trace" or
  /// "user_trace.wo_<group>"; masks of several groups need a matching file.
  std::string trace_template_name(const blueprint::AblationMask& mask) const {
    if (mask.empty()) return "user_trace";
    std::string name = "user_trace.wo_";
    bool first = true;
    for (auto g : blueprint::all_groups) {
      if (!mask.masked(g)) continue;
      if (!first) name += "+";
      name += std::string(blueprint::to_string(g));
      first = false;
    }
    if (!has(name)) throw CodedError("MISSING_INPUT", "no template variant " + name + ".txt for ablation mask");
    return name;
  }

 private:
  std::map<std::string, std::string> files_;
  std::string version_;
};

struct AudioRef {
  std::string placeholder;  // instruction.wav, audio_a.wav, audio_b.wav
  fs::path path;
  std::string sha256;
  friend bool operator==(const AudioRef&, const AudioRef&) = default;
};

struct PromptBundle {
  Mode mode = Mode::trace_blueprint;
  std::string system_text;
  std::string user_text;
  std::vector<AudioRef> attachments;  // AUDIO mode only, in placeholder order
  std::string template_version;

  /// Identity of what was sent: mode, texts and attachment contents.
  std::string digest() const {
    hash::Sha256 h;
    h.update(to_string(mode)).update("\0", 1).update(system_text).update("\0", 1).update(user_text);
    for (const auto& a : attachments) h.update("\0", 1).update(a.placeholder).update(":").update(a.sha256);
    return h.hex();
  }
};

/// Marker left in user_text where an audio attachment belongs.
inline std::string audio_marker(std::string_view placeholder) { return "<audio:" + std::string(placeholder) + ">"; }

struct PromptInputs {
  std::optional<std::string> user_prompt;
  std::optional<std::string> transcript_a, transcript_b;
  std::optional<blueprint::Blueprint> blueprint_a, blueprint_b;
  std::optional<AudioRef> instruction_audio, audio_a, audio_b;
  blueprint::AblationMask mask;
};

namespace detail {

template <class T>
const T& need(const std::optional<T>& v, std::string_view what) {
  if (!v) throw CodedError("MISSING_INPUT", std::string(what));
  return *v;
}

inline std::string strip_trailing_newline(std::string s) {
  while (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

}  // namespace detail

inline PromptBundle render_prompt(Mode mode, const PromptInputs& in, const TemplateSet& templates) {
  PromptBundle b;
  b.mode = mode;
  b.system_text = templates.get("system");
  b.template_version = templates.version();
  switch (mode) {
    case Mode::trace_blueprint: {
      const auto& bp_a = detail::need(in.blueprint_a, "blueprint_a");
      const auto& bp_b = detail::need(in.blueprint_b, "blueprint_b");
      const auto& prompt = detail::need(in.user_prompt, "user_prompt");
      for (const auto* bp : {&bp_a, &bp_b}) {
        auto v = blueprint::validate_blueprint(blueprint::to_document(*bp), {20, in.mask});
        if (v.empty()) continue;
        // Contour length is configurable; only structural problems block.
        for (const auto& x : v)
          if (x.rule != "contour_length") throw CodedError("MISSING_INPUT", "blueprint invalid: " + x.path + " " + x.message);
      }
      b.user_text = substitute(templates.get(templates.trace_template_name(in.mask)),
                               {{"user_prompt", prompt},
                                {"audio_a.json", detail::strip_trailing_newline(blueprint::serialize(bp_a))},
                                {"audio_b.json", detail::strip_trailing_newline(blueprint::serialize(bp_b))}});
      break;
    }
    case Mode::transcript_only: {
      b.user_text = substitute(templates.get("user_transcript"),
                               {{"user_prompt", detail::need(in.user_prompt, "user_prompt")},
                                {"model_a_transcript", detail::need(in.transcript_a, "transcript_a")},
                                {"model_b_transcript", detail::need(in.transcript_b, "transcript_b")}});
      break;
    }
    case Mode::audio: {
      auto ins = detail::need(in.instruction_audio, "instruction_audio");
      auto a = detail::need(in.audio_a, "audio_a");
      auto c = detail::need(in.audio_b, "audio_b");
      ins.placeholder = "instruction.wav";
      a.placeholder = "audio_a.wav";
      c.placeholder = "audio_b.wav";
      b.user_text = substitute(templates.get("user_audio"), {{"instruction.wav", audio_marker(ins.placeholder)},
                                                             {"audio_a.wav", audio_marker(a.placeholder)},
                                                             {"audio_b.wav", audio_marker(c.placeholder)}});
      b.attachments = {ins, a, c};
      break;
    }
  }
  return b;
}

/// Position swap for the optional --swap-ab rerun.
inline PromptInputs swapped(PromptInputs in) {
  std::swap(in.transcript_a, in.transcript_b);
  std::swap(in.blueprint_a, in.blueprint_b);
  std::swap(in.audio_a, in.audio_b);
  return in;
}

constexpr Rating swap_sides(Rating r) {
  if (r == Rating::win_1) return Rating::win_2;
  if (r == Rating::win_2) return Rating::win_1;
  return r;
}

inline DimScores swap_sides(DimScores d) {
  d.content = swap_sides(d.content);
  d.voice_quality = swap_sides(d.voice_quality);
  d.paralinguistics = swap_sides(d.paralinguistics);
  return d;
}

// ---------------------------------------------------------------------------
// Decision parsing

enum class Dialect { prompt_table, listing };

/// The first fenced block's body, or the input when there is no fence.
inline std::string_view strip_fences(std::string_view text) {
  const auto open = text.find("```");
  if (open == std::string_view::npos) return text;
  auto body = text.find('\n', open);
  if (body == std::string_view::npos) return text;
  ++body;
  const auto close = text.find("```", body);
  if (close == std::string_view::npos) return text.substr(body);
  return text.substr(body, close - body);
}

/// First balanced {...} object, honouring string literals and escapes.
inline std::optional<std::string_view> first_object(std::string_view text) {
  const auto start = text.find('{');
  if (start == std::string_view::npos) return std::nullopt;
  int depth = 0;
  bool in_str = false;
  bool esc = false;
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (in_str) {
      if (esc)
        esc = false;
      else if (c == '\\')
        esc = true;
      else if (c == '"')
        in_str = false;
      continue;
    }
    if (c == '"')
      in_str = true;
    else if (c == '{')
      ++depth;
    else if (c == '}' && --depth == 0)
      return text.substr(start, i - start + 1);
  }
  return std::nullopt;
}

namespace detail {

inline Rating label_at(const json& obj, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw CodedError("MISSING_KEY", key);
  if (it->is_number_integer()) {
    const auto v = it->get<long long>();
    if (v == 1) return Rating::win_1;
    if (v == 2) return Rating::win_2;
    throw CodedError("BAD_LABEL", key + " = " + it->dump());
  }
  if (!it->is_string()) throw CodedError("BAD_LABEL", key + " = " + it->dump());
  auto s = it->get<std::string>();
  // Models sometimes echo the quoting used in the instructions.
  if (s.size() >= 2 && s.front() == '\'' && s.back() == '\'') s = s.substr(1, s.size() - 2);
  auto r = try_parse_rating(s);
  if (!r) throw CodedError("BAD_LABEL", key + " = " + it->dump());
  return *r;
}

inline DimReasoning reasoning_of(const json& obj) {
  DimReasoning r;
  auto it = obj.find("reasoning");
  if (it == obj.end() || it->is_null()) return r;
  if (it->is_string()) {
    r.content = it->get<std::string>();
    return r;
  }
  if (it->is_object()) {
    auto text = [&](std::initializer_list<const char*> keys) {
      for (auto k : keys) {
        auto f = it->find(k);
        if (f != it->end()) return f->is_string() ? f->get<std::string>() : f->dump();
      }
      return std::string();
    };
    r.content = text({"content"});
    r.vq = text({"vq", "voice_quality"});
    r.para = text({"para", "paralinguistics", "instruction_following_audio"});
    return r;
  }
  r.content = it->dump();
  return r;
}

}  // namespace detail

/// One repair pass only: fence stripping plus first-balanced-object
/// extraction. Throws NOT_JSON, MISSING_KEY or BAD_LABEL.
inline DimScores parse_decisions(std::string_view raw) {
  auto candidate = first_object(strip_fences(raw));
  if (!candidate) candidate = first_object(raw);
  if (!candidate) throw CodedError("NOT_JSON", "no JSON object in response");
  json obj;
  try {
    obj = json::parse(*candidate);
  } catch (const json::parse_error& e) {
    throw CodedError("NOT_JSON", e.what());
  }
  const bool listing =
      obj.contains("prediction_content") || obj.contains("prediction_vq") || obj.contains("prediction_para");
  DimScores d;
  if (listing) {
    d.content = detail::label_at(obj, "prediction_content");
    d.voice_quality = detail::label_at(obj, "prediction_vq");
    d.paralinguistics = detail::label_at(obj, "prediction_para");
  } else {
    d.content = detail::label_at(obj, "content");
    d.voice_quality = detail::label_at(obj, "voice_quality");
    d.paralinguistics = detail::label_at(obj, "instruction_following_audio");
  }
  d.reasoning = detail::reasoning_of(obj);
  return d;
}

struct ParseFailure {
  std::string code;
  std::string message;
  friend bool operator==(const ParseFailure&, const ParseFailure&) = default;
};

inline std::variant<DimScores, ParseFailure> try_parse_decisions(std::string_view raw) {
  try {
    return parse_decisions(raw);
  } catch (const CodedError& e) {
    return ParseFailure{e.code(), e.detail()};
  }
}

inline ordered_json serialize_decisions(const DimScores& d, Dialect dialect) {
  ordered_json o = ordered_json::object();
  const bool flat = d.reasoning.vq.empty() && d.reasoning.para.empty();
  ordered_json reasoning =
      ordered_json{{"content", d.reasoning.content}, {"vq", d.reasoning.vq}, {"para", d.reasoning.para}};
  if (dialect == Dialect::prompt_table) {
    o["reasoning"] = flat ? ordered_json(d.reasoning.content) : reasoning;
    o["content"] = std::string(to_string(d.content));
    o["voice_quality"] = std::string(to_string(d.voice_quality));
    o["instruction_following_audio"] = std::string(to_string(d.paralinguistics));
  } else {
    o["prediction_content"] = std::string(to_string(d.content));
    o["prediction_vq"] = std::string(to_string(d.voice_quality));
    o["prediction_para"] = std::string(to_string(d.paralinguistics));
    o["reasoning"] = reasoning;
  }
  return o;
}

// ---------------------------------------------------------------------------
// Backends

struct Usage {
  long long text_in = 0;
  long long audio_in = 0;
  long long text_out = 0;
  Usage& operator+=(const Usage& o) {
    text_in += o.text_in;
    audio_in += o.audio_in;
    text_out += o.text_out;
    return *this;
  }
  friend bool operator==(const Usage&, const Usage&) = default;
};

struct DecodeParams {
  double temperature = 0.0;
  int max_tokens = 1024;
  std::string model;
};

struct ChatResponse {
  std::string text;
  Usage usage;
};

/// Errors: TRANSPORT and RATE_LIMITED are retried by run_judge;
/// CONTEXT_OVERFLOW and REPLAY_MISS are final.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual std::string id() const = 0;
  virtual bool supports_audio() const = 0;
  virtual ChatResponse complete(const PromptBundle& bundle, const DecodeParams& params) = 0;
};

/// Replays recorded responses keyed by bundle digest. Fixture lines are
/// {"bundle_digest": ..., "raw_response": ..., "usage": {...}?}.
class ReplayBackend : public ChatBackend {
 public:
  ReplayBackend() = default;
  explicit ReplayBackend(const fs::path& fixture) {
    io::for_each_jsonl(fixture, [&](const json& row, std::size_t line) {
      if (!row.contains("bundle_digest") || !row.contains("raw_response"))
        throw CodedError("MALFORMED_FIXTURE", fixture.string() + ":" + std::to_string(line));
      ChatResponse r;
      r.text = row["raw_response"].get<std::string>();
      if (auto u = row.find("usage"); u != row.end()) {
        r.usage.text_in = u->value("text_in", 0LL);
        r.usage.audio_in = u->value("audio_in", 0LL);
        r.usage.text_out = u->value("text_out", 0LL);
      }
      add(row["bundle_digest"].get<std::string>(), std::move(r));
    });
    id_ = "replay:" + hash::short_digest(hash::sha256_file(fixture));
  }

  void add(std::string digest, ChatResponse r) {
    std::lock_guard lk(mu_);
    responses_[std::move(digest)] = std::move(r);
  }

  std::string id() const override { return id_; }
  bool supports_audio() const override { return true; }

  ChatResponse complete(const PromptBundle& bundle, const DecodeParams&) override {
    std::lock_guard lk(mu_);
    auto it = responses_.find(bundle.digest());
    if (it == responses_.end()) throw CodedError("REPLAY_MISS", "no fixture for bundle " + bundle.digest());
    return it->second;
  }

 private:
  std::string id_ = "replay:memory";
  std::mutex mu_;
  std::unordered_map<std::string, ChatResponse> responses_;
};

inline std::string base64(std::string_view in) {
  static constexpr char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const unsigned v = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8) |
                       static_cast<unsigned char>(in[i + 2]);
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += tbl[(v >> 6) & 63];
    out += tbl[v & 63];
  }
  if (i < in.size()) {
    unsigned v = static_cast<unsigned char>(in[i]) << 16;
    if (i + 1 < in.size()) v |= static_cast<unsigned char>(in[i + 1]) << 8;
    out += tbl[(v >> 18) & 63];
    out += tbl[(v >> 12) & 63];
    out += i + 1 < in.size() ? tbl[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

/// OpenAI-compatible /v1/chat/completions. Audio attachments become
/// input_audio parts interleaved at their markers.
class OpenAIChatBackend : public ChatBackend {
 public:
  OpenAIChatBackend(std::string base_url, std::string api_key, std::string model, bool audio_capable = false,
                    double timeout_seconds = 120)
      : base_(std::move(base_url)), key_(std::move(api_key)), model_(std::move(model)), audio_(audio_capable),
        timeout_(timeout_seconds) {
    while (!base_.empty() && base_.back() == '/') base_.pop_back();
  }

  std::string id() const override { return "openai:" + base_ + "#" + model_; }
  bool supports_audio() const override { return audio_; }

  json request_body(const PromptBundle& b, const DecodeParams& p) const {
    json user_content;
    if (b.attachments.empty()) {
      user_content = b.user_text;
    } else {
      user_content = json::array();
      std::string_view rest = b.user_text;
      for (const auto& a : b.attachments) {
        const auto marker = audio_marker(a.placeholder);
        const auto at = rest.find(marker);
        if (at == std::string_view::npos) continue;
        if (at > 0) user_content.push_back({{"type", "text"}, {"text", std::string(rest.substr(0, at))}});
        user_content.push_back(
            {{"type", "input_audio"},
             {"input_audio", {{"data", base64(io::read_text(a.path))}, {"format", a.path.extension() == ".mp3" ? "mp3" : "wav"}}}});
        rest.remove_prefix(at + marker.size());
      }
      if (!rest.empty()) user_content.push_back({{"type", "text"}, {"text", std::string(rest)}});
    }
    return json{{"model", p.model.empty() ? model_ : p.model},
                {"temperature", p.temperature},
                {"max_tokens", p.max_tokens},
                {"messages", json::array({{{"role", "system"}, {"content", b.system_text}},
                                          {{"role", "user"}, {"content", user_content}}})}};
  }

  ChatResponse complete(const PromptBundle& b, const DecodeParams& p) override {
    if (!b.attachments.empty() && !audio_) throw CodedError("UNSUPPORTED", id() + " has no audio input");
    const auto scheme_end = base_.find("://");
    const auto path_start = base_.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    const std::string host = path_start == std::string::npos ? base_ : base_.substr(0, path_start);
    const std::string prefix = path_start == std::string::npos ? "" : base_.substr(path_start);
    httplib::Client cli(host);
    const auto secs = static_cast<time_t>(timeout_);
    cli.set_connection_timeout(secs, 0);
    cli.set_read_timeout(secs, 0);
    httplib::Headers headers;
    if (!key_.empty()) headers.emplace("Authorization", "Bearer " + key_);
    auto res = cli.Post(prefix + "/v1/chat/completions", headers, request_body(b, p).dump(), "application/json");
    if (!res) throw CodedError("TRANSPORT", id() + ": " + httplib::to_string(res.error()));
    if (res->status == 429) throw CodedError("RATE_LIMITED", id());
    if (res->status >= 500) throw CodedError("TRANSPORT", id() + ": HTTP " + std::to_string(res->status));
    json body;
    try {
      body = json::parse(res->body);
    } catch (const json::parse_error&) {
      throw CodedError("TRANSPORT", id() + ": non-JSON body (HTTP " + std::to_string(res->status) + ")");
    }
    if (res->status != 200) {
      const auto err = body.value("error", json::object());
      const std::string code = err.is_object() ? err.value("code", std::string()) : std::string();
      if (code == "context_length_exceeded" || res->status == 413)
        throw CodedError("CONTEXT_OVERFLOW", id() + ": " + err.dump());
      throw CodedError("BACKEND_ERROR", id() + ": HTTP " + std::to_string(res->status) + " " + err.dump());
    }
    ChatResponse r;
    try {
      r.text = body.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw CodedError("BACKEND_ERROR", id() + ": unexpected response shape: " + e.what());
    }
    if (auto u = body.find("usage"); u != body.end() && u->is_object()) {
      const long long prompt = u->value("prompt_tokens", 0LL);
      long long audio = 0;
      if (auto d = u->find("prompt_tokens_details"); d != u->end() && d->is_object())
        audio = d->value("audio_tokens", 0LL);
      r.usage.audio_in = audio;
      r.usage.text_in = prompt - audio;
      r.usage.text_out = u->value("completion_tokens", 0LL);
    }
    return r;
  }

 private:
  std::string base_;
  std::string key_;
  std::string model_;
  bool audio_;
  double timeout_;
};

// ---------------------------------------------------------------------------
// Rate limiting

/// Sliding one-minute window over requests and estimated tokens. Zero limits
/// disable the corresponding check.
class RateLimiter {
 public:
  using Clock = std::chrono::steady_clock;

  RateLimiter(int requests_per_minute, long long tokens_per_minute,
              Clock::duration window = std::chrono::minutes(1))
      : rpm_(requests_per_minute), tpm_(tokens_per_minute), window_len_(window) {}

  void acquire(long long tokens) {
    std::unique_lock lk(mu_);
    for (;;) {
      const auto now = Clock::now();
      while (!window_.empty() && now - window_.front().first >= window_len_) {
        used_tokens_ -= window_.front().second;
        window_.pop_front();
      }
      const bool req_ok = rpm_ <= 0 || static_cast<int>(window_.size()) < rpm_;
      const bool tok_ok = tpm_ <= 0 || window_.empty() || used_tokens_ + tokens <= tpm_;
      if (req_ok && tok_ok) {
        window_.emplace_back(now, tokens);
        used_tokens_ += tokens;
        return;
      }
      cv_.wait_until(lk, window_.front().first + window_len_);
    }
  }

  std::size_t in_window() const {
    std::lock_guard lk(mu_);
    return window_.size();
  }

 private:
  int rpm_;
  long long tpm_;
  Clock::duration window_len_;
  long long used_tokens_ = 0;
  std::deque<std::pair<Clock::time_point, long long>> window_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
};

// ---------------------------------------------------------------------------
// Runs

struct JudgeRun {
  std::string example_id;
  Mode mode = Mode::trace_blueprint;
  std::string backend_id;
  std::string bundle_digest;
  std::string template_version;
  std::string raw_response_text;
  std::optional<DimScores> parsed;
  std::optional<ParseFailure> parse_failure;
  Usage usage;
  DecodeParams decode;
  bool swapped = false;
  std::string started_at;
  std::string finished_at;
  int retry_count = 0;
  std::string run_config_digest;

  /// Decisions in the original A/B orientation.
  std::optional<DimScores> decisions() const {
    if (!parsed) return std::nullopt;
    return swapped ? swap_sides(*parsed) : *parsed;
  }
};

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char date[32], frac[8];
  std::strftime(date, sizeof date, "%Y-%m-%dT%H:%M:%S", &tm);
  std::snprintf(frac, sizeof frac, ".%03dZ", static_cast<int>(ms));
  return std::string(date) + frac;
}

inline ordered_json to_json(const DimScores& d) {
  return ordered_json{{"content", std::string(to_string(d.content))},
                      {"voice_quality", std::string(to_string(d.voice_quality))},
                      {"paralinguistics", std::string(to_string(d.paralinguistics))},
                      {"reasoning", {{"content", d.reasoning.content}, {"vq", d.reasoning.vq}, {"para", d.reasoning.para}}}};
}

inline DimScores dim_scores_from_json(const json& j) {
  DimScores d;
  d.content = parse_rating(j.at("content").get<std::string>());
  d.voice_quality = parse_rating(j.at("voice_quality").get<std::string>());
  d.paralinguistics = parse_rating(j.at("paralinguistics").get<std::string>());
  if (auto r = j.find("reasoning"); r != j.end() && r->is_object()) {
    d.reasoning.content = r->value("content", "");
    d.reasoning.vq = r->value("vq", "");
    d.reasoning.para = r->value("para", "");
  }
  return d;
}

inline ordered_json to_json(const JudgeRun& r) {
  ordered_json j = ordered_json::object();
  j["example_id"] = r.example_id;
  j["mode"] = std::string(to_string(r.mode));
  j["backend_id"] = r.backend_id;
  j["bundle_digest"] = r.bundle_digest;
  j["template_version"] = r.template_version;
  j["swapped"] = r.swapped;
  j["raw_response_text"] = r.raw_response_text;
  j["parsed"] = r.parsed ? to_json(*r.parsed) : ordered_json(nullptr);
  j["parse_failure"] =
      r.parse_failure ? ordered_json{{"code", r.parse_failure->code}, {"message", r.parse_failure->message}}
                      : ordered_json(nullptr);
  j["usage"] = {{"text_in", r.usage.text_in}, {"audio_in", r.usage.audio_in}, {"text_out", r.usage.text_out}};
  j["decode"] = {{"temperature", r.decode.temperature}, {"max_tokens", r.decode.max_tokens}, {"model", r.decode.model}};
  j["started_at"] = r.started_at;
  j["finished_at"] = r.finished_at;
  j["retry_count"] = r.retry_count;
  j["run_config_digest"] = r.run_config_digest;
  return j;
}

inline JudgeRun judge_run_from_json(const json& j) {
  JudgeRun r;
  r.example_id = j.at("example_id").get<std::string>();
  r.mode = try_parse_mode(j.at("mode").get<std::string>()).value_or(Mode::trace_blueprint);
  r.backend_id = j.value("backend_id", "");
  r.bundle_digest = j.value("bundle_digest", "");
  r.template_version = j.value("template_version", "");
  r.swapped = j.value("swapped", false);
  r.raw_response_text = j.value("raw_response_text", "");
  if (j.contains("parsed") && !j["parsed"].is_null()) r.parsed = dim_scores_from_json(j["parsed"]);
  if (j.contains("parse_failure") && !j["parse_failure"].is_null())
    r.parse_failure = ParseFailure{j["parse_failure"].value("code", ""), j["parse_failure"].value("message", "")};
  if (auto u = j.find("usage"); u != j.end()) {
    r.usage.text_in = u->value("text_in", 0LL);
    r.usage.audio_in = u->value("audio_in", 0LL);
    r.usage.text_out = u->value("text_out", 0LL);
  }
  if (auto d = j.find("decode"); d != j.end()) {
    r.decode.temperature = d->value("temperature", 0.0);
    r.decode.max_tokens = d->value("max_tokens", 1024);
    r.decode.model = d->value("model", "");
  }
  r.started_at = j.value("started_at", "");
  r.finished_at = j.value("finished_at", "");
  r.retry_count = j.value("retry_count", 0);
  r.run_config_digest = j.value("run_config_digest", "");
  return r;
}

/// Raw responses are appended here before parsing so a crash between receipt
/// and parse loses nothing. On restart the log also short-circuits calls for
/// bundles that were already answered by the same backend.
class WriteAheadLog {
 public:
  explicit WriteAheadLog(fs::path path) : path_(std::move(path)) {
    if (fs::exists(path_)) {
      io::for_each_jsonl(path_, [&](const json& row, std::size_t) {
        ChatResponse r;
        r.text = row.value("raw_response", "");
        r.usage.text_in = row.value("text_in", 0LL);
        r.usage.audio_in = row.value("audio_in", 0LL);
        r.usage.text_out = row.value("text_out", 0LL);
        seen_[key(row.value("backend_id", ""), row.value("bundle_digest", ""))] = std::move(r);
      });
    }
  }

  std::optional<ChatResponse> lookup(const std::string& backend_id, const std::string& digest) const {
    std::lock_guard lk(mu_);
    auto it = seen_.find(key(backend_id, digest));
    if (it == seen_.end()) return std::nullopt;
    return it->second;
  }

  void append(const std::string& example_id, const std::string& backend_id, const std::string& digest,
              const ChatResponse& r) {
    std::lock_guard lk(mu_);
    json row{{"example_id", example_id}, {"backend_id", backend_id},   {"bundle_digest", digest},
             {"raw_response", r.text},   {"text_in", r.usage.text_in}, {"audio_in", r.usage.audio_in},
             {"text_out", r.usage.text_out}};
    io::append_line(path_, row.dump());
    seen_[key(backend_id, digest)] = r;
  }

  const fs::path& path() const { return path_; }

 private:
  static std::string key(const std::string& b, const std::string& d) { return b + "\n" + d; }
  fs::path path_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, ChatResponse> seen_;
};

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds base_backoff{500};
};

class JudgeFailure : public CodedError {
 public:
  JudgeFailure(std::string code, const std::string& detail, int retry_count)
      : CodedError(std::move(code), detail), retry_count_(retry_count) {}
  int retry_count() const noexcept { return retry_count_; }

 private:
  int retry_count_;
};

struct RunOptions {
  DecodeParams decode;
  RetryPolicy retry;
  WriteAheadLog* wal = nullptr;
  RateLimiter* limiter = nullptr;
  bool swapped = false;
  std::string run_config_digest;
};

/// Rough prompt size for rate limiting; providers bill the real count.
inline long long estimate_tokens(const PromptBundle& b) {
  return static_cast<long long>((b.system_text.size() + b.user_text.size()) / 4 + 1);
}

inline JudgeRun run_judge(const std::string& example_id, const PromptBundle& bundle, ChatBackend& backend,
                          const RunOptions& opts = {}) {
  if (bundle.mode == Mode::audio && !backend.supports_audio())
    throw JudgeFailure("UNSUPPORTED", backend.id() + " cannot take audio input", 0);
  JudgeRun run;
  run.example_id = example_id;
  run.mode = bundle.mode;
  run.backend_id = backend.id();
  run.bundle_digest = bundle.digest();
  run.template_version = bundle.template_version;
  run.decode = opts.decode;
  run.swapped = opts.swapped;
  run.run_config_digest = opts.run_config_digest;
  run.started_at = utc_now();

  std::optional<ChatResponse> response;
  if (opts.wal) response = opts.wal->lookup(run.backend_id, run.bundle_digest);
  while (!response) {
    try {
      if (opts.limiter) opts.limiter->acquire(estimate_tokens(bundle));
      response = backend.complete(bundle, opts.decode);
    } catch (const CodedError& e) {
      const bool transient = e.code() == "TRANSPORT" || e.code() == "RATE_LIMITED";
      if (!transient) throw JudgeFailure(e.code(), e.detail(), run.retry_count);
      if (run.retry_count >= opts.retry.max_retries)
        throw JudgeFailure("BACKEND_UNAVAILABLE", e.what(), run.retry_count);
      std::this_thread::sleep_for(opts.retry.base_backoff * (1LL << run.retry_count));
      ++run.retry_count;
      continue;
    }
    if (opts.wal) opts.wal->append(example_id, run.backend_id, run.bundle_digest, *response);
  }

  run.raw_response_text = response->text;
  run.usage = response->usage;
  auto parsed = try_parse_decisions(response->text);
  if (auto* d = std::get_if<DimScores>(&parsed))
    run.parsed = *d;
  else
    run.parse_failure = std::get<ParseFailure>(parsed);
  run.finished_at = utc_now();
  return run;
}

}  // namespace trace::judge
