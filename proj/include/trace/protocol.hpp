#pragma once

// Human annotation records and server-side replay of the 5-step rating
// procedure:
//   1. decide whether A is acceptable on the dimension
//   2. decide whether B is acceptable
//   3. exactly one acceptable  -> that side wins
//   4. neither acceptable      -> both_bad
//   5. both acceptable         -> 1, 2 or both_good
// HCoT passes rate C, VQ, P and then Overall; blind passes rate Overall only.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/error.hpp"
#include "trace/labels.hpp"

namespace trace::protocol {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class Pass { blind_overall_first, hcot, hcot_resample };

constexpr std::string_view to_string(Pass p) {
  switch (p) {
    case Pass::blind_overall_first: return "blind";
    case Pass::hcot: return "hcot";
    case Pass::hcot_resample: return "hcot_resample";
  }
  return "?";
}

inline std::optional<Pass> try_parse_pass(std::string_view s) {
  if (s == "blind") return Pass::blind_overall_first;
  if (s == "hcot") return Pass::hcot;
  if (s == "hcot_resample") return Pass::hcot_resample;
  return std::nullopt;
}

inline bool is_hcot(Pass p) { return p != Pass::blind_overall_first; }

enum class Target { content, voice_quality, paralinguistics, overall };

constexpr std::string_view to_string(Target t) {
  switch (t) {
    case Target::content: return "content";
    case Target::voice_quality: return "voice_quality";
    case Target::paralinguistics: return "paralinguistics";
    case Target::overall: return "overall";
  }
  return "?";
}

inline std::optional<Target> try_parse_target(std::string_view s) {
  if (s == "content") return Target::content;
  if (s == "voice_quality") return Target::voice_quality;
  if (s == "paralinguistics") return Target::paralinguistics;
  if (s == "overall") return Target::overall;
  return std::nullopt;
}

/// Order in which targets are presented for a pass.
inline std::vector<Target> target_order(Pass p) {
  if (!is_hcot(p)) return {Target::overall};
  return {Target::content, Target::voice_quality, Target::paralinguistics, Target::overall};
}

enum class Event { accept_a, accept_b, rate };

constexpr std::string_view to_string(Event e) {
  switch (e) {
    case Event::accept_a: return "accept_a";
    case Event::accept_b: return "accept_b";
    case Event::rate: return "rate";
  }
  return "?";
}

inline std::optional<Event> try_parse_event(std::string_view s) {
  if (s == "accept_a") return Event::accept_a;
  if (s == "accept_b") return Event::accept_b;
  if (s == "rate") return Event::rate;
  return std::nullopt;
}

/// One entry of the step trace. accept_* carries `acceptable`, rate carries
/// `rating`. `t_ms` is the client clock in milliseconds.
struct Step {
  Target target = Target::overall;
  Event event = Event::rate;
  bool acceptable = false;
  std::optional<Rating> rating;
  std::int64_t t_ms = 0;
  friend bool operator==(const Step&, const Step&) = default;
};

struct AnnotationRecord {
  std::string example_id;
  std::string annotator_id;
  Pass pass = Pass::hcot;
  std::optional<DimScores> dims;  // absent for blind passes
  Rating overall = Rating::both_good;
  std::string started_at;
  std::string submitted_at;
  std::vector<Step> steps;
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

// ---------------------------------------------------------------------------
// JSON

inline ordered_json to_json(const Step& s) {
  ordered_json j;
  j["target"] = std::string(to_string(s.target));
  j["event"] = std::string(to_string(s.event));
  if (s.event == Event::rate)
    j["rating"] = s.rating ? ordered_json(std::string(to_string(*s.rating))) : ordered_json(nullptr);
  else
    j["acceptable"] = s.acceptable;
  j["t_ms"] = s.t_ms;
  return j;
}

inline ordered_json to_json(const AnnotationRecord& r) {
  ordered_json j;
  j["example_id"] = r.example_id;
  j["annotator_id"] = r.annotator_id;
  j["pass"] = std::string(to_string(r.pass));
  if (r.dims) {
    j["dims"] = {{"content", std::string(to_string(r.dims->content))},
                 {"voice_quality", std::string(to_string(r.dims->voice_quality))},
                 {"paralinguistics", std::string(to_string(r.dims->paralinguistics))}};
  }
  j["overall"] = std::string(to_string(r.overall));
  j["started_at"] = r.started_at;
  j["submitted_at"] = r.submitted_at;
  ordered_json steps = ordered_json::array();
  for (const auto& s : r.steps) steps.push_back(to_json(s));
  j["steps"] = steps;
  return j;
}

/// Shape errors throw MALFORMED_RECORD; protocol errors are left to validate().
inline AnnotationRecord annotation_from_json(const json& j) {
  auto fail = [](const std::string& m) -> CodedError { return CodedError("MALFORMED_RECORD", m); };
  try {
    AnnotationRecord r;
    r.example_id = j.at("example_id").get<std::string>();
    r.annotator_id = j.value("annotator_id", "");
    auto pass = try_parse_pass(j.at("pass").get<std::string>());
    if (!pass) throw fail("unknown pass " + j.at("pass").dump());
    r.pass = *pass;
    if (auto d = j.find("dims"); d != j.end() && !d->is_null()) {
      DimScores s;
      s.content = parse_rating(d->at("content").get<std::string>());
      s.voice_quality = parse_rating(d->at("voice_quality").get<std::string>());
      s.paralinguistics = parse_rating(d->at("paralinguistics").get<std::string>());
      r.dims = s;
    }
    r.overall = parse_rating(j.at("overall").get<std::string>());
    r.started_at = j.value("started_at", "");
    r.submitted_at = j.value("submitted_at", "");
    for (const auto& sj : j.at("steps")) {
      Step s;
      auto t = try_parse_target(sj.at("target").get<std::string>());
      auto e = try_parse_event(sj.at("event").get<std::string>());
      if (!t) throw fail("unknown step target " + sj.at("target").dump());
      if (!e) throw fail("unknown step event " + sj.at("event").dump());
      s.target = *t;
      s.event = *e;
      if (s.event == Event::rate) {
        if (sj.contains("rating") && !sj["rating"].is_null()) s.rating = parse_rating(sj["rating"].get<std::string>());
      } else {
        s.acceptable = sj.at("acceptable").get<bool>();
      }
      s.t_ms = sj.at("t_ms").get<std::int64_t>();
      r.steps.push_back(s);
    }
    return r;
  } catch (const CodedError&) {
    throw;
  } catch (const std::exception& e) {
    throw fail(e.what());
  }
}

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string step;  // "1".."5", "order", "pass" or "record"
  std::optional<Target> target;
  std::string message;
};

/// Ratings permitted by the acceptability decisions (steps 3 to 5).
inline std::vector<Rating> allowed_ratings(bool a_ok, bool b_ok) {
  if (a_ok && !b_ok) return {Rating::win_1};
  if (!a_ok && b_ok) return {Rating::win_2};
  if (!a_ok && !b_ok) return {Rating::both_bad};
  return {Rating::win_1, Rating::win_2, Rating::both_good};
}

/// The procedure step that governs a pair of acceptability decisions.
inline std::string governing_step(bool a_ok, bool b_ok) {
  if (a_ok != b_ok) return "3";
  return a_ok ? "5" : "4";
}

/// Returns the first violation, or std::nullopt when the record is storable.
inline std::optional<Violation> validate(const AnnotationRecord& r) {
  const auto order = target_order(r.pass);
  std::size_t block = 0;  // index into order of the block being filled
  std::optional<bool> a_ok, b_ok;
  std::optional<Rating> rated;
  std::vector<std::optional<Rating>> results(order.size());
  std::int64_t last_t = INT64_MIN;

  auto v = [](std::string step, std::optional<Target> t, std::string m) {
    return Violation{std::move(step), t, std::move(m)};
  };

  for (const auto& s : r.steps) {
    if (s.t_ms < last_t) return v("order", s.target, "step timestamps go backwards");
    last_t = s.t_ms;
    if (!is_hcot(r.pass) && s.target != Target::overall)
      return v("pass", s.target, "blind passes rate overall only");
    if (block >= order.size()) return v("order", s.target, "steps after overall was rated");
    if (s.target != order[block])
      return v("order", s.target,
               std::string(to_string(s.target)) + " before " + std::string(to_string(order[block])) + " was rated");
    switch (s.event) {
      case Event::accept_a:
        if (a_ok) return v("1", s.target, "A acceptability decided twice");
        a_ok = s.acceptable;
        break;
      case Event::accept_b:
        if (!a_ok) return v("1", s.target, "B judged before A");
        if (b_ok) return v("2", s.target, "B acceptability decided twice");
        b_ok = s.acceptable;
        break;
      case Event::rate: {
        if (!a_ok) return v("1", s.target, "rating before A acceptability");
        if (!b_ok) return v("2", s.target, "rating before B acceptability");
        if (!s.rating) return v(governing_step(*a_ok, *b_ok), s.target, "rating missing");
        const auto allowed = allowed_ratings(*a_ok, *b_ok);
        if (std::find(allowed.begin(), allowed.end(), *s.rating) == allowed.end())
          return v(governing_step(*a_ok, *b_ok), s.target,
                   std::string(to_string(*s.rating)) + " contradicts the acceptability decisions");
        rated = s.rating;
        results[block] = rated;
        ++block;
        a_ok.reset();
        b_ok.reset();
        rated.reset();
        break;
      }
    }
  }
  if (block < order.size())
    return v(a_ok ? (b_ok ? "5" : "2") : "1", order[block],
             std::string(to_string(order[block])) + " was not completed");

  // The submitted labels must be the ones the trace arrived at.
  if (results.back() != r.overall) return v("record", Target::overall, "overall differs from the step trace");
  if (is_hcot(r.pass)) {
    if (!r.dims) return v("record", std::nullopt, "HCoT records carry dimension labels");
    const DimScores& d = *r.dims;
    if (results[0] != d.content || results[1] != d.voice_quality || results[2] != d.paralinguistics)
      return v("record", std::nullopt, "dimension labels differ from the step trace");
  } else if (r.dims) {
    return v("pass", std::nullopt, "blind records carry no dimension labels");
  }
  return std::nullopt;
}

/// Builds a consistent trace for given labels; used by tests and tooling.
inline std::vector<Step> trace_for(Pass pass, const std::optional<DimScores>& dims, Rating overall,
                                   std::int64_t t0 = 0) {
  std::vector<Step> steps;
  std::int64_t t = t0;
  for (auto target : target_order(pass)) {
    Rating r = overall;
    if (target == Target::content) r = dims->content;
    if (target == Target::voice_quality) r = dims->voice_quality;
    if (target == Target::paralinguistics) r = dims->paralinguistics;
    const auto acc = acceptability(r);
    steps.push_back({target, Event::accept_a, acc.a, std::nullopt, t++});
    steps.push_back({target, Event::accept_b, acc.b, std::nullopt, t++});
    steps.push_back({target, Event::rate, false, r, t++});
  }
  return steps;
}

}  // namespace trace::protocol
