#pragma once

// Deterministic policies mapping per-dimension ratings to an overall rating.

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "trace/labels.hpp"

namespace trace::fusion {

enum class Policy { speakbench_tree, s2s_arena_cap, majority_vote };

/// Cap flavour for the S2S-Arena tree. The lenient variant is a diagnostic
/// that only caps when a capped cue is both_bad.
enum class CapMode { strict, lenient };

class PolicyError : public std::invalid_argument {
 public:
  explicit PolicyError(const std::string& what) : std::invalid_argument(what) {}
};

constexpr std::string_view to_string(Policy p) {
  switch (p) {
    case Policy::speakbench_tree: return "speakbench_tree";
    case Policy::s2s_arena_cap: return "s2s_arena_cap";
    case Policy::majority_vote: return "majority_vote";
  }
  return "?";
}

inline std::optional<Policy> try_parse_policy(std::string_view s) {
  if (s == "speakbench_tree") return Policy::speakbench_tree;
  if (s == "s2s_arena_cap") return Policy::s2s_arena_cap;
  if (s == "majority_vote") return Policy::majority_vote;
  return std::nullopt;
}

inline Policy parse_policy(std::string_view s) {
  if (auto p = try_parse_policy(s)) return *p;
  throw PolicyError("unknown fusion policy '" + std::string(s) +
                    "' (expected speakbench_tree, s2s_arena_cap or majority_vote)");
}

inline std::optional<CapMode> try_parse_cap(std::string_view s) {
  if (s == "strict") return CapMode::strict;
  if (s == "lenient") return CapMode::lenient;
  return std::nullopt;
}

/// Content decides; paralinguistics then voice quality break content ties.
inline Rating fuse_speakbench(const DimScores& d) {
  if (is_winner(d.content)) return d.content;
  if (is_winner(d.paralinguistics)) return d.paralinguistics;
  if (is_winner(d.voice_quality)) return d.voice_quality;
  return d.content;
}

namespace detail {

inline Rating capped_tree(const DimScores& d, Rating cap) {
  Rating candidate = d.content;
  if (is_winner(d.content)) {
    candidate = d.content;
  } else if (is_winner(d.paralinguistics)) {
    candidate = d.paralinguistics;
  } else if (is_winner(d.voice_quality)) {
    candidate = d.voice_quality;
  }
  return rating_min(candidate, cap);
}

}  // namespace detail

/// Overall is bounded above by rating_min(content, paralinguistics).
inline Rating fuse_s2s_arena(const DimScores& d) {
  return detail::capped_tree(d, rating_min(d.content, d.paralinguistics));
}

/// Lenient cap: winners survive unless content or paralinguistics is both_bad.
inline Rating fuse_s2s_arena_lenient(const DimScores& d) {
  const bool capped = d.content == Rating::both_bad || d.paralinguistics == Rating::both_bad;
  return detail::capped_tree(d, capped ? Rating::both_bad : Rating::both_good);
}

/// Majority over {C, VQ, P}; with three distinct values falls back to C.
inline Rating fuse_majority(const DimScores& d) {
  if (d.content == d.voice_quality || d.content == d.paralinguistics) return d.content;
  if (d.voice_quality == d.paralinguistics) return d.voice_quality;
  // No majority: content, then paralinguistics, then voice quality priority.
  return d.content;
}

using FusionFn = Rating (*)(const DimScores&);

inline FusionFn resolve(Policy policy, CapMode cap = CapMode::strict) {
  switch (policy) {
    case Policy::speakbench_tree: return &fuse_speakbench;
    case Policy::s2s_arena_cap: return cap == CapMode::strict ? &fuse_s2s_arena : &fuse_s2s_arena_lenient;
    case Policy::majority_vote: return &fuse_majority;
  }
  throw PolicyError("unknown fusion policy kind");
}

inline Rating fuse(Policy policy, const DimScores& d, CapMode cap = CapMode::strict) {
  return resolve(policy, cap)(d);
}

}  // namespace trace::fusion
