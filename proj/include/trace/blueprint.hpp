#pragma once

// Stage 1 blueprint: the textual feature document a text-only judge reads in
// place of audio. Key order and number rendering are frozen so prompt
// payloads are reproducible token for token.

#include <algorithm>
#include <array>
#include <bitset>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "trace/acoustics.hpp"
#include "trace/error.hpp"
#include "trace/extractors.hpp"
#include "trace/io.hpp"

namespace trace::blueprint {

using ordered_json = nlohmann::ordered_json;
using extract::AccentVector;
using extract::EmotionVector;
using extract::QualityScores;

inline constexpr std::array<std::string_view, 5> top_level_keys{
    "agent_response", "agent_emotion", "agent_accent", "agent_audio_quality", "agent_audio_properties"};

inline constexpr std::array<std::string_view, 4> quality_keys{
    "DNSMOS_Personalized_Signal_Quality", "DNSMOS_Personalized_Background_Quality",
    "DNSMOS_Personalized_Overall_Quality", "P808_Overall_Quality"};

inline constexpr std::array<std::string_view, 8> property_keys{
    "Mean_Pitch_Hz",         "Std_Dev_Pitch_Hz",           "Full_Pitch_Contour_Hz", "Integrated_Loudness_LUFS",
    "Std_Dev_Loudness_LUFS", "Full_Loudness_Contour_LUFS", "Speech_Rate_WPM",       "Articulation_Rate_WPM"};

// ---------------------------------------------------------------------------
// Feature-group ablation

enum class Group : std::size_t { emotion = 0, accent = 1, audio_quality = 2, audio_properties = 3 };

inline constexpr std::array<Group, 4> all_groups{Group::emotion, Group::accent, Group::audio_quality,
                                                 Group::audio_properties};

constexpr std::string_view to_string(Group g) {
  switch (g) {
    case Group::emotion: return "emotion";
    case Group::accent: return "accent";
    case Group::audio_quality: return "quality";
    case Group::audio_properties: return "properties";
  }
  return "?";
}

constexpr std::string_view key_of(Group g) { return top_level_keys[static_cast<std::size_t>(g) + 1]; }

inline std::optional<Group> try_parse_group(std::string_view s) {
  if (s == "emotion" || s == "agent_emotion") return Group::emotion;
  if (s == "accent" || s == "agent_accent") return Group::accent;
  if (s == "quality" || s == "audio_quality" || s == "agent_audio_quality") return Group::audio_quality;
  if (s == "properties" || s == "audio_properties" || s == "agent_audio_properties") return Group::audio_properties;
  return std::nullopt;
}

struct AblationMask {
  std::bitset<4> bits;

  bool masked(Group g) const { return bits.test(static_cast<std::size_t>(g)); }
  AblationMask& mask(Group g) {
    bits.set(static_cast<std::size_t>(g));
    return *this;
  }
  bool empty() const { return bits.none(); }

  /// "emotion,accent" style lists; unknown names throw naming the bad entry.
  static AblationMask parse(std::string_view csv) {
    AblationMask m;
    while (!csv.empty()) {
      const auto comma = csv.find(',');
      auto item = config_trim(csv.substr(0, comma));
      if (!item.empty()) {
        auto g = try_parse_group(item);
        if (!g) throw CodedError("INVALID_CONFIG", "ablate: unknown feature group '" + std::string(item) + "'");
        m.mask(*g);
      }
      if (comma == std::string_view::npos) break;
      csv.remove_prefix(comma + 1);
    }
    return m;
  }

  std::string to_string() const {
    std::string out;
    for (auto g : all_groups) {
      if (!masked(g)) continue;
      if (!out.empty()) out += ",";
      out += blueprint::to_string(g);
    }
    return out;
  }

  friend bool operator==(const AblationMask&, const AblationMask&) = default;

 private:
  static std::string_view config_trim(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Document model

/// Pitch and loudness groups are null when the clip has no voiced frames or
/// every loudness block is gated.
struct AudioProperties {
  std::optional<double> mean_pitch_hz;
  std::optional<double> std_dev_pitch_hz;
  std::optional<std::vector<double>> pitch_contour_hz;
  std::optional<double> integrated_loudness_lufs;
  std::optional<double> std_dev_loudness_lufs;
  std::optional<std::vector<double>> loudness_contour_lufs;
  double speech_rate_wpm = 0;
  double articulation_rate_wpm = 0;
  friend bool operator==(const AudioProperties&, const AudioProperties&) = default;
};

struct Blueprint {
  std::string agent_response;
  std::optional<EmotionVector> agent_emotion;
  std::optional<AccentVector> agent_accent;
  std::optional<QualityScores> agent_audio_quality;
  std::optional<AudioProperties> agent_audio_properties;
  friend bool operator==(const Blueprint&, const Blueprint&) = default;
};

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

inline std::string format_quality(double score) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f / 5.00", round2(score));
  return buf;
}

/// Inverse of format_quality; std::nullopt when the string is not "X.XX / 5.00".
inline std::optional<double> parse_quality(std::string_view s) {
  static constexpr std::string_view suffix = " / 5.00";
  if (s.size() != 4 + suffix.size() || s.substr(4) != suffix) return std::nullopt;
  if (s[1] != '.') return std::nullopt;
  for (std::size_t i : {0u, 2u, 3u})
    if (s[i] < '0' || s[i] > '9') return std::nullopt;
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + 4, v);
  if (ec != std::errc{} || p != s.data() + 4) return std::nullopt;
  return v;
}

inline AudioProperties from_prosody(const acoustics::ProsodyFeatures& f) {
  AudioProperties a;
  if (f.pitch) {
    a.mean_pitch_hz = round2(f.pitch->mean_hz);
    a.std_dev_pitch_hz = round2(f.pitch->std_hz);
    a.pitch_contour_hz = f.pitch->contour_hz;
  }
  if (f.loudness) {
    a.integrated_loudness_lufs = round2(f.loudness->integrated_lufs);
    a.std_dev_loudness_lufs = round2(f.loudness->std_lufs);
    a.loudness_contour_lufs = f.loudness->contour_lufs;
  }
  a.speech_rate_wpm = round2(f.rates.speech_rate_wpm);
  a.articulation_rate_wpm = round2(f.rates.articulation_rate_wpm);
  return a;
}

struct BlueprintInputs {
  std::optional<std::string> transcript;
  std::optional<EmotionVector> emotion;
  std::optional<AccentVector> accent;
  std::optional<QualityScores> quality;
  std::optional<AudioProperties> prosody;
};

/// Never emits a partial blueprint: any input not covered by the mask must be
/// present, otherwise MISSING_FEATURE names it. Masked groups are dropped.
inline Blueprint build_blueprint(const BlueprintInputs& in, const AblationMask& mask = {}) {
  auto missing = [](std::string_view what) { throw CodedError("MISSING_FEATURE", std::string(what)); };
  if (!in.transcript) missing("transcript");
  Blueprint b;
  b.agent_response = *in.transcript;
  if (!mask.masked(Group::emotion)) {
    if (!in.emotion) missing("emotion");
    b.agent_emotion = in.emotion;
  }
  if (!mask.masked(Group::accent)) {
    if (!in.accent) missing("accent");
    b.agent_accent = in.accent;
  }
  if (!mask.masked(Group::audio_quality)) {
    if (!in.quality) missing("quality");
    const auto& q = *in.quality;
    b.agent_audio_quality = QualityScores{round2(q.sig), round2(q.bak), round2(q.ovrl), round2(q.p808)};
  }
  if (!mask.masked(Group::audio_properties)) {
    if (!in.prosody) missing("prosody");
    b.agent_audio_properties = *in.prosody;
  }
  return b;
}

// ---------------------------------------------------------------------------
// JSON view

namespace detail {

inline ordered_json opt_number(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

inline ordered_json opt_array(const std::optional<std::vector<double>>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

}  // namespace detail

inline ordered_json to_document(const Blueprint& b) {
  ordered_json doc = ordered_json::object();
  doc["agent_response"] = b.agent_response;
  if (b.agent_emotion) doc["agent_emotion"] = extract::to_json(*b.agent_emotion);
  if (b.agent_accent) doc["agent_accent"] = extract::to_json(*b.agent_accent);
  if (b.agent_audio_quality) {
    const auto& q = *b.agent_audio_quality;
    ordered_json o = ordered_json::object();
    o[std::string(quality_keys[0])] = format_quality(q.sig);
    o[std::string(quality_keys[1])] = format_quality(q.bak);
    o[std::string(quality_keys[2])] = format_quality(q.ovrl);
    o[std::string(quality_keys[3])] = format_quality(q.p808);
    doc["agent_audio_quality"] = std::move(o);
  }
  if (b.agent_audio_properties) {
    const auto& a = *b.agent_audio_properties;
    ordered_json o = ordered_json::object();
    o["Mean_Pitch_Hz"] = detail::opt_number(a.mean_pitch_hz);
    o["Std_Dev_Pitch_Hz"] = detail::opt_number(a.std_dev_pitch_hz);
    o["Full_Pitch_Contour_Hz"] = detail::opt_array(a.pitch_contour_hz);
    o["Integrated_Loudness_LUFS"] = detail::opt_number(a.integrated_loudness_lufs);
    o["Std_Dev_Loudness_LUFS"] = detail::opt_number(a.std_dev_loudness_lufs);
    o["Full_Loudness_Contour_LUFS"] = detail::opt_array(a.loudness_contour_lufs);
    o["Speech_Rate_WPM"] = a.speech_rate_wpm;
    o["Articulation_Rate_WPM"] = a.articulation_rate_wpm;
    doc["agent_audio_properties"] = std::move(o);
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string path;  // JSON-pointer style, e.g. /agent_audio_properties/Full_Pitch_Contour_Hz
  std::string rule;  // stable rule name: missing_key, unexpected_key, key_order, type, range, format, contour_length, ...
  std::string message;
};

struct ValidateOptions {
  std::size_t contour_points = 20;
  AblationMask mask;
};

namespace detail {

class Checker {
 public:
  std::vector<Violation> out;

  void add(std::string path, std::string rule, std::string msg) {
    out.push_back({std::move(path), std::move(rule), std::move(msg)});
  }

  template <std::size_t N>
  void exact_keys(const ordered_json& obj, const std::string& path, const std::array<std::string_view, N>& keys) {
    for (auto k : keys)
      if (!obj.contains(std::string(k))) add(path + "/" + std::string(k), "missing_key", "required key is absent");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      bool known = false;
      for (auto k : keys) known = known || k == it.key();
      if (!known) add(path + "/" + it.key(), "unexpected_key", "key is not part of the schema");
    }
  }

  void number_in(const ordered_json& obj, const std::string& path, std::string_view key, double lo, double hi) {
    auto it = obj.find(std::string(key));
    if (it == obj.end()) return;
    const auto p = path + "/" + std::string(key);
    if (!it->is_number()) {
      add(p, "type", "expected a number");
      return;
    }
    const double v = it->get<double>();
    if (!(v >= lo && v <= hi)) add(p, "range", "value " + it->dump() + " outside [" + ordered_json(lo).dump() + ", " +
                                                   ordered_json(hi).dump() + "]");
  }
};

}  // namespace detail

/// Reports every violation, not just the first. An empty result means valid.
inline std::vector<Violation> validate_blueprint(const ordered_json& doc, const ValidateOptions& opts = {}) {
  detail::Checker c;
  if (!doc.is_object()) {
    c.add("", "type", "document must be a JSON object");
    return c.out;
  }

  std::vector<std::string_view> expected;
  for (std::size_t i = 0; i < top_level_keys.size(); ++i) {
    if (i > 0 && opts.mask.masked(static_cast<Group>(i - 1))) continue;
    expected.push_back(top_level_keys[i]);
  }
  for (auto k : expected)
    if (!doc.contains(std::string(k))) c.add("/" + std::string(k), "missing_key", "required key is absent");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const bool listed = std::find(expected.begin(), expected.end(), it.key()) != expected.end();
    if (listed) continue;
    const bool ablated = std::find(top_level_keys.begin(), top_level_keys.end(), it.key()) != top_level_keys.end();
    c.add("/" + it.key(), ablated ? "ablated_key_present" : "unexpected_key",
          ablated ? "feature group is masked and must be removed" : "key is not part of the schema");
  }
  {
    std::vector<std::string> actual;
    for (auto it = doc.begin(); it != doc.end(); ++it)
      if (std::find(expected.begin(), expected.end(), it.key()) != expected.end()) actual.push_back(it.key());
    std::vector<std::string> want;
    for (auto k : expected)
      if (doc.contains(std::string(k))) want.emplace_back(k);
    if (actual != want) c.add("", "key_order", "top-level keys are not in schema order");
  }

  if (auto it = doc.find("agent_response"); it != doc.end() && !it->is_string())
    c.add("/agent_response", "type", "expected a string");

  if (auto it = doc.find("agent_emotion"); it != doc.end() && !opts.mask.masked(Group::emotion)) {
    if (!it->is_object()) {
      c.add("/agent_emotion", "type", "expected an object");
    } else {
      c.exact_keys(*it, "/agent_emotion", extract::emotion_keys);
      for (auto k : extract::emotion_keys) c.number_in(*it, "/agent_emotion", k, 0.0, 1.0);
    }
  }

  if (auto it = doc.find("agent_accent"); it != doc.end() && !opts.mask.masked(Group::accent)) {
    if (!it->is_object()) {
      c.add("/agent_accent", "type", "expected an object");
    } else {
      c.exact_keys(*it, "/agent_accent", extract::accent_keys);
      for (auto k : extract::accent_keys) c.number_in(*it, "/agent_accent", k, -1.0, 1.0);
    }
  }

  if (auto it = doc.find("agent_audio_quality"); it != doc.end() && !opts.mask.masked(Group::audio_quality)) {
    if (!it->is_object()) {
      c.add("/agent_audio_quality", "type", "expected an object");
    } else {
      c.exact_keys(*it, "/agent_audio_quality", quality_keys);
      for (auto k : quality_keys) {
        auto v = it->find(std::string(k));
        if (v == it->end()) continue;
        const auto p = "/agent_audio_quality/" + std::string(k);
        if (!v->is_string()) {
          c.add(p, "format", "quality scores are strings formatted \"X.XX / 5.00\"");
          continue;
        }
        auto score = parse_quality(v->get<std::string>());
        if (!score) {
          c.add(p, "format", "expected \"X.XX / 5.00\", got " + v->dump());
        } else if (*score < 1.0 || *score > 5.0) {
          c.add(p, "range", "score outside [1, 5]");
        }
      }
    }
  }

  if (auto it = doc.find("agent_audio_properties"); it != doc.end() && !opts.mask.masked(Group::audio_properties)) {
    const std::string base = "/agent_audio_properties";
    if (!it->is_object()) {
      c.add(base, "type", "expected an object");
    } else {
      const auto& o = *it;
      c.exact_keys(o, base, property_keys);
      auto scalar = [&](std::string_view key, bool nullable, double lo) {
        auto v = o.find(std::string(key));
        if (v == o.end()) return;
        const auto p = base + "/" + std::string(key);
        if (v->is_null()) {
          if (!nullable) c.add(p, "type", "expected a number");
          return;
        }
        if (!v->is_number()) {
          c.add(p, "type", "expected a number");
          return;
        }
        if (v->get<double>() < lo) c.add(p, "range", "value below " + ordered_json(lo).dump());
      };
      auto contour = [&](std::string_view key, double lo) {
        auto v = o.find(std::string(key));
        if (v == o.end() || v->is_null()) return;
        const auto p = base + "/" + std::string(key);
        if (!v->is_array()) {
          c.add(p, "type", "expected an array of numbers");
          return;
        }
        if (v->size() != opts.contour_points)
          c.add(p, "contour_length",
                "expected " + std::to_string(opts.contour_points) + " points, got " + std::to_string(v->size()));
        for (std::size_t i = 0; i < v->size(); ++i) {
          const auto& x = (*v)[i];
          if (!x.is_number())
            c.add(p + "/" + std::to_string(i), "type", "expected a number");
          else if (x.get<double>() < lo)
            c.add(p + "/" + std::to_string(i), "range", "value below " + ordered_json(lo).dump());
        }
      };
      const double neg_inf = -std::numeric_limits<double>::infinity();
      scalar("Mean_Pitch_Hz", true, 0.0);
      scalar("Std_Dev_Pitch_Hz", true, 0.0);
      contour("Full_Pitch_Contour_Hz", 0.0);
      scalar("Integrated_Loudness_LUFS", true, neg_inf);
      scalar("Std_Dev_Loudness_LUFS", true, 0.0);
      contour("Full_Loudness_Contour_LUFS", neg_inf);
      scalar("Speech_Rate_WPM", false, 0.0);
      scalar("Articulation_Rate_WPM", false, 0.0);

      auto group_nulls = [&](std::array<std::string_view, 3> keys, std::string_view name) {
        int nulls = 0, present = 0;
        for (auto k : keys) {
          auto v = o.find(std::string(k));
          if (v == o.end()) continue;
          ++present;
          if (v->is_null()) ++nulls;
        }
        if (nulls != 0 && nulls != present)
          c.add(base, "null_group", std::string(name) + " statistics must be all present or all null");
      };
      group_nulls({"Mean_Pitch_Hz", "Std_Dev_Pitch_Hz", "Full_Pitch_Contour_Hz"}, "pitch");
      group_nulls({"Integrated_Loudness_LUFS", "Std_Dev_Loudness_LUFS", "Full_Loudness_Contour_LUFS"}, "loudness");

      auto sr = o.find("Speech_Rate_WPM");
      auto ar = o.find("Articulation_Rate_WPM");
      if (sr != o.end() && ar != o.end() && sr->is_number() && ar->is_number() &&
          ar->get<double>() + 0.01 < sr->get<double>())
        c.add(base + "/Articulation_Rate_WPM", "rate_order", "articulation rate below speech rate");
    }
  }
  return c.out;
}

inline bool has_rule(const std::vector<Violation>& v, std::string_view rule) {
  return std::any_of(v.begin(), v.end(), [&](const Violation& x) { return x.rule == rule; });
}

// ---------------------------------------------------------------------------
// Canonical text

namespace detail {

inline void write_canonical(std::string& out, const ordered_json& v, int indent) {
  const std::string pad(static_cast<std::size_t>(indent), ' ');
  if (v.is_object()) {
    if (v.empty()) {
      out += "{}";
      return;
    }
    out += "{\n";
    bool first = true;
    for (auto it = v.begin(); it != v.end(); ++it) {
      if (!first) out += ",\n";
      first = false;
      out += pad + "  " + ordered_json(it.key()).dump() + ": ";
      write_canonical(out, it.value(), indent + 2);
    }
    out += "\n" + pad + "}";
  } else if (v.is_array()) {
    // Arrays of scalars (the contours) stay on one line.
    out += "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ", ";
      write_canonical(out, v[i], indent + 2);
    }
    out += "]";
  } else if (v.is_number_float() || v.is_number_integer() || v.is_number_unsigned()) {
    // Numbers are carried as doubles; shortest round-trip form, keeping ".0".
    out += ordered_json(v.get<double>()).dump();
  } else {
    out += v.dump();
  }
}

}  // namespace detail

inline std::string canonical_text(const ordered_json& doc) {
  std::string out;
  detail::write_canonical(out, doc, 0);
  out += "\n";
  return out;
}

inline std::string serialize(const Blueprint& b) { return canonical_text(to_document(b)); }

/// Parse errors carry line, column and the offending line.
inline ordered_json parse_document(std::string_view text) {
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1, col = 1, line_start = 0;
    const std::size_t at = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < at; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
        line_start = i + 1;
      } else {
        ++col;
      }
    }
    auto line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    throw CodedError("PARSE_ERROR", "line " + std::to_string(line) + ", column " + std::to_string(col) + ": " +
                                        std::string(text.substr(line_start, line_end - line_start)));
  }
}

/// Infers the mask from which groups a document carries.
inline AblationMask mask_of(const ordered_json& doc) {
  AblationMask m;
  for (auto g : all_groups)
    if (!doc.contains(std::string(key_of(g)))) m.mask(g);
  return m;
}

namespace detail {

inline std::optional<double> opt_num(const ordered_json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

inline std::optional<std::vector<double>> opt_vec(const ordered_json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<std::vector<double>>();
}

}  // namespace detail

/// Reads a document into a Blueprint. Invalid documents throw INVALID_BLUEPRINT
/// listing every violation.
inline Blueprint from_document(const ordered_json& doc, const ValidateOptions& opts = {}) {
  auto violations = validate_blueprint(doc, opts);
  if (!violations.empty()) {
    std::string msg;
    for (const auto& v : violations) msg += (msg.empty() ? "" : "; ") + v.path + " [" + v.rule + "] " + v.message;
    throw CodedError("INVALID_BLUEPRINT", msg);
  }
  Blueprint b;
  b.agent_response = doc["agent_response"].get<std::string>();
  if (doc.contains("agent_emotion"))
    b.agent_emotion = std::get<EmotionVector>(extract::validate_payload(extract::Feature::emotion, doc["agent_emotion"]));
  if (doc.contains("agent_accent"))
    b.agent_accent = std::get<AccentVector>(extract::validate_payload(extract::Feature::accent, doc["agent_accent"]));
  if (doc.contains("agent_audio_quality")) {
    const auto& q = doc["agent_audio_quality"];
    auto get = [&](std::size_t i) { return *parse_quality(q[std::string(quality_keys[i])].get<std::string>()); };
    b.agent_audio_quality = QualityScores{get(0), get(1), get(2), get(3)};
  }
  if (doc.contains("agent_audio_properties")) {
    const auto& o = doc["agent_audio_properties"];
    AudioProperties a;
    a.mean_pitch_hz = detail::opt_num(o["Mean_Pitch_Hz"]);
    a.std_dev_pitch_hz = detail::opt_num(o["Std_Dev_Pitch_Hz"]);
    a.pitch_contour_hz = detail::opt_vec(o["Full_Pitch_Contour_Hz"]);
    a.integrated_loudness_lufs = detail::opt_num(o["Integrated_Loudness_LUFS"]);
    a.std_dev_loudness_lufs = detail::opt_num(o["Std_Dev_Loudness_LUFS"]);
    a.loudness_contour_lufs = detail::opt_vec(o["Full_Loudness_Contour_LUFS"]);
    a.speech_rate_wpm = o["Speech_Rate_WPM"].get<double>();
    a.articulation_rate_wpm = o["Articulation_Rate_WPM"].get<double>();
    b.agent_audio_properties = std::move(a);
  }
  return b;
}

/// Groups absent from the document are read as ablated.
inline Blueprint deserialize(std::string_view text, std::size_t contour_points = 20) {
  auto doc = parse_document(text);
  return from_document(doc, ValidateOptions{contour_points, mask_of(doc)});
}

}  // namespace trace::blueprint
