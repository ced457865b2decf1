#pragma once

// Typed-tie label space shared by every judgment in the pipeline.
//
// A Rating is one of {1, 2, both_good, both_bad}. Each rating corresponds to a
// pair of per-side acceptability bits, and the meet of two ratings
// (rating_min) is the elementwise minimum of those pairs.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace trace {

enum class Rating : std::uint8_t { win_1, win_2, both_good, both_bad };

inline constexpr std::array<Rating, 4> all_ratings{Rating::win_1, Rating::win_2, Rating::both_good,
                                                   Rating::both_bad};

class LabelError : public std::runtime_error {
 public:
  explicit LabelError(const std::string& what) : std::runtime_error(what) {}
};

constexpr std::string_view to_string(Rating r) {
  switch (r) {
    case Rating::win_1: return "1";
    case Rating::win_2: return "2";
    case Rating::both_good: return "both_good";
    case Rating::both_bad: return "both_bad";
  }
  return "?";
}

/// Accepts the canonical underscore spelling and the hyphenated prose form.
inline std::optional<Rating> try_parse_rating(std::string_view s) {
  if (s == "1") return Rating::win_1;
  if (s == "2") return Rating::win_2;
  if (s == "both_good" || s == "both-good") return Rating::both_good;
  if (s == "both_bad" || s == "both-bad") return Rating::both_bad;
  return std::nullopt;
}

inline Rating parse_rating(std::string_view s) {
  if (auto r = try_parse_rating(s)) return *r;
  throw LabelError("not a rating: '" + std::string(s) + "'");
}

constexpr bool is_winner(Rating r) { return r == Rating::win_1 || r == Rating::win_2; }
constexpr bool is_tie(Rating r) { return !is_winner(r); }

struct Acceptability {
  bool a = false;
  bool b = false;
  friend constexpr bool operator==(Acceptability, Acceptability) = default;
};

constexpr Acceptability acceptability(Rating r) {
  switch (r) {
    case Rating::win_1: return {true, false};
    case Rating::win_2: return {false, true};
    case Rating::both_good: return {true, true};
    case Rating::both_bad: return {false, false};
  }
  return {};
}

constexpr Rating from_acceptability(Acceptability p) {
  if (p.a && p.b) return Rating::both_good;
  if (p.a) return Rating::win_1;
  if (p.b) return Rating::win_2;
  return Rating::both_bad;
}

constexpr Rating rating_min(Rating x, Rating y) {
  const auto px = acceptability(x);
  const auto py = acceptability(y);
  return from_acceptability({px.a && py.a, px.b && py.b});
}

/// Product order on acceptability pairs: x precedes y when every side
/// acceptable under x is also acceptable under y.
constexpr bool precedes(Rating x, Rating y) { return rating_min(x, y) == x; }

enum class Dimension : std::uint8_t { content, voice_quality, paralinguistics };

inline constexpr std::array<Dimension, 3> all_dimensions{Dimension::content, Dimension::voice_quality,
                                                         Dimension::paralinguistics};

constexpr std::string_view to_string(Dimension d) {
  switch (d) {
    case Dimension::content: return "content";
    case Dimension::voice_quality: return "voice_quality";
    case Dimension::paralinguistics: return "paralinguistics";
  }
  return "?";
}

struct DimReasoning {
  std::string content;
  std::string vq;
  std::string para;
  friend bool operator==(const DimReasoning&, const DimReasoning&) = default;
};

struct DimScores {
  Rating content = Rating::both_good;
  Rating voice_quality = Rating::both_good;
  Rating paralinguistics = Rating::both_good;
  DimReasoning reasoning;

  Rating at(Dimension d) const {
    switch (d) {
      case Dimension::content: return content;
      case Dimension::voice_quality: return voice_quality;
      case Dimension::paralinguistics: return paralinguistics;
    }
    return content;
  }
  void set(Dimension d, Rating r) {
    switch (d) {
      case Dimension::content: content = r; break;
      case Dimension::voice_quality: voice_quality = r; break;
      case Dimension::paralinguistics: paralinguistics = r; break;
    }
  }
  friend bool operator==(const DimScores&, const DimScores&) = default;
};

inline DimScores dims(Rating c, Rating vq, Rating p) { return DimScores{c, vq, p, {}}; }

// ---------------------------------------------------------------------------
// n-way collapses used for reporting.

enum class Arity : std::uint8_t { two_way = 2, three_way = 3, four_way = 4 };

inline std::optional<Arity> parse_arity(std::string_view s) {
  if (s == "2") return Arity::two_way;
  if (s == "3") return Arity::three_way;
  if (s == "4") return Arity::four_way;
  return std::nullopt;
}

struct CollapsedLabel {
  Arity arity = Arity::four_way;
  std::string value;
  friend bool operator==(const CollapsedLabel&, const CollapsedLabel&) = default;
};

/// std::nullopt is the DROPPED signal: two-way reporting excludes ties.
inline std::optional<CollapsedLabel> collapse(Rating r, Arity arity) {
  switch (arity) {
    case Arity::four_way: return CollapsedLabel{arity, std::string(to_string(r))};
    case Arity::three_way:
      return CollapsedLabel{arity, is_winner(r) ? std::string(to_string(r)) : std::string("tie")};
    case Arity::two_way:
      if (is_tie(r)) return std::nullopt;
      return CollapsedLabel{arity, std::string(to_string(r))};
  }
  return std::nullopt;
}

/// Labels that may come from untyped-tie sources (original dataset labels use
/// "tie"). Returns the collapsed string, std::nullopt when dropped, and throws
/// when the label cannot be expressed at the requested arity.
class ArityError : public std::runtime_error {
 public:
  explicit ArityError(const std::string& what) : std::runtime_error(what) {}
};

inline std::optional<std::string> collapse_label(std::string_view label, Arity arity) {
  if (label == "tie") {
    if (arity == Arity::four_way) throw ArityError("untyped tie has no 4-way value");
    if (arity == Arity::two_way) return std::nullopt;
    return std::string("tie");
  }
  auto c = collapse(parse_rating(label), arity);
  if (!c) return std::nullopt;
  return c->value;
}

}  // namespace trace
