#pragma once

// Sensitivity probes over per-row judge DimScores.
//   P1  content-controlled counterfactual: force C to both_good, see who resolves
//   P2  one-at-a-time flip rates
//   P3  winner-on-bad and winner-slice accuracy of fused predictions
// Every probe calls the fusion function resolved from the main policy.

#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/error.hpp"
#include "trace/fusion.hpp"
#include "trace/labels.hpp"

namespace trace::probes {

using ordered_json = nlohmann::ordered_json;

enum class Probe { p1, p2, p3 };

constexpr std::string_view to_string(Probe p) {
  switch (p) {
    case Probe::p1: return "P1";
    case Probe::p2: return "P2";
    case Probe::p3: return "P3";
  }
  return "?";
}

inline std::optional<Probe> try_parse_probe(std::string_view s) {
  if (s == "p1" || s == "P1") return Probe::p1;
  if (s == "p2" || s == "P2") return Probe::p2;
  if (s == "p3" || s == "P3") return Probe::p3;
  return std::nullopt;
}

struct ProbeRow {
  std::string example_id;
  DimScores judge;
  std::optional<DimScores> truth_dims;  // HCoT per-dimension labels
  std::optional<Rating> truth_overall;  // HCoT overall label
};

struct FusionChoice {
  fusion::Policy policy = fusion::Policy::speakbench_tree;
  fusion::CapMode cap = fusion::CapMode::strict;
  fusion::FusionFn fn() const { return fusion::resolve(policy, cap); }
};

// ---------------------------------------------------------------------------
// P1

enum class Resolver { paralinguistics, voice_quality, tie };

constexpr std::string_view to_string(Resolver r) {
  switch (r) {
    case Resolver::paralinguistics: return "P";
    case Resolver::voice_quality: return "VQ";
    case Resolver::tie: return "tie";
  }
  return "?";
}

struct P1Detail {
  std::string example_id;
  Rating counterfactual = Rating::both_good;
  Resolver resolver = Resolver::tie;
  std::optional<bool> correct;  // resolving dimension vs its HCoT label
};

struct P1Result {
  std::vector<P1Detail> rows;
  std::map<Resolver, std::size_t> counts;
  std::map<Resolver, double> shares;
  // Accuracy of the resolving dimension, per resolver, over rows with truth.
  std::map<Resolver, std::size_t> scored;
  std::map<Resolver, std::size_t> correct;
};

/// P is checked before VQ.
inline Resolver resolver_of(const DimScores& d) {
  if (is_winner(d.paralinguistics)) return Resolver::paralinguistics;
  if (is_winner(d.voice_quality)) return Resolver::voice_quality;
  return Resolver::tie;
}

inline P1Result p1_counterfactual(const std::vector<ProbeRow>& rows, fusion::FusionFn fuse) {
  P1Result res;
  for (auto r : {Resolver::paralinguistics, Resolver::voice_quality, Resolver::tie}) {
    res.counts[r] = 0;
    res.scored[r] = 0;
    res.correct[r] = 0;
  }
  for (const auto& row : rows) {
    DimScores forced = row.judge;
    forced.content = Rating::both_good;
    P1Detail d;
    d.example_id = row.example_id;
    d.counterfactual = fuse(forced);
    d.resolver = resolver_of(forced);
    if (d.resolver != Resolver::tie && row.truth_dims) {
      const auto dim = d.resolver == Resolver::paralinguistics ? Dimension::paralinguistics : Dimension::voice_quality;
      d.correct = forced.at(dim) == row.truth_dims->at(dim);
      ++res.scored[d.resolver];
      res.correct[d.resolver] += *d.correct;
    }
    ++res.counts[d.resolver];
    res.rows.push_back(std::move(d));
  }
  for (const auto& [r, c] : res.counts)
    res.shares[r] = rows.empty() ? 0.0 : static_cast<double>(c) / static_cast<double>(rows.size());
  return res;
}

// ---------------------------------------------------------------------------
// P2

struct P2Detail {
  std::string example_id;
  Rating base = Rating::both_good;
  std::map<Dimension, Rating> perturbed;
};

struct P2Result {
  std::vector<P2Detail> rows;
  std::map<Dimension, std::size_t> flips;
  std::map<Dimension, double> rates;
};

inline P2Result p2_flip_rates(const std::vector<ProbeRow>& rows, fusion::FusionFn fuse) {
  P2Result res;
  for (auto d : all_dimensions) res.flips[d] = 0;
  for (const auto& row : rows) {
    P2Detail det;
    det.example_id = row.example_id;
    det.base = fuse(row.judge);
    for (auto d : all_dimensions) {
      DimScores s = row.judge;
      s.set(d, Rating::both_good);
      det.perturbed[d] = fuse(s);
      res.flips[d] += det.perturbed[d] != det.base;
    }
    res.rows.push_back(std::move(det));
  }
  for (const auto& [d, f] : res.flips)
    res.rates[d] = rows.empty() ? 0.0 : static_cast<double>(f) / static_cast<double>(rows.size());
  return res;
}

// ---------------------------------------------------------------------------
// P3

struct SliceRate {
  double value = 0.0;
  std::size_t hits = 0;
  std::size_t n = 0;
};

struct P3Result {
  SliceRate winner_on_bad;
  SliceRate winner_slice_accuracy;
};

/// Throws EMPTY_SLICE when no truth row is both_bad or no truth row has a winner.
inline P3Result p3_attribution(const std::vector<Rating>& predicted, const std::vector<Rating>& truth) {
  if (predicted.size() != truth.size()) throw CodedError("INVALID_INPUT", "predictions and truth differ in length");
  P3Result r;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == Rating::both_bad) {
      ++r.winner_on_bad.n;
      r.winner_on_bad.hits += is_winner(predicted[i]);
    } else if (is_winner(truth[i])) {
      ++r.winner_slice_accuracy.n;
      r.winner_slice_accuracy.hits += predicted[i] == truth[i];
    }
  }
  if (r.winner_on_bad.n == 0) throw CodedError("EMPTY_SLICE", "no both_bad truth rows");
  if (r.winner_slice_accuracy.n == 0) throw CodedError("EMPTY_SLICE", "no winner truth rows");
  for (auto* s : {&r.winner_on_bad, &r.winner_slice_accuracy})
    s->value = static_cast<double>(s->hits) / static_cast<double>(s->n);
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct ProbeReport {
  Probe probe = Probe::p1;
  FusionChoice fusion;
  fusion::FusionFn fn = nullptr;  // the function actually called
  std::map<std::string, P1Result> p1;
  std::map<std::string, P2Result> p2;
  std::map<std::string, P3Result> p3;
};

/// `runs` maps judge name to its rows.
inline ProbeReport run_probe(Probe which, const std::map<std::string, std::vector<ProbeRow>>& runs,
                             FusionChoice choice) {
  ProbeReport rep;
  rep.probe = which;
  rep.fusion = choice;
  rep.fn = choice.fn();
  for (const auto& [judge, rows] : runs) {
    switch (which) {
      case Probe::p1: rep.p1[judge] = p1_counterfactual(rows, rep.fn); break;
      case Probe::p2: rep.p2[judge] = p2_flip_rates(rows, rep.fn); break;
      case Probe::p3: {
        std::vector<Rating> pred, truth;
        for (const auto& r : rows) {
          if (!r.truth_overall) continue;
          pred.push_back(rep.fn(r.judge));
          truth.push_back(*r.truth_overall);
        }
        rep.p3[judge] = p3_attribution(pred, truth);
        break;
      }
    }
  }
  return rep;
}

inline std::string dim_short(Dimension d) {
  switch (d) {
    case Dimension::content: return "C";
    case Dimension::voice_quality: return "VQ";
    case Dimension::paralinguistics: return "P";
  }
  return "?";
}

inline ordered_json to_json(const ProbeReport& rep, bool details = true) {
  ordered_json j;
  j["probe"] = std::string(to_string(rep.probe));
  j["policy"] = std::string(fusion::to_string(rep.fusion.policy));
  j["cap"] = rep.fusion.cap == fusion::CapMode::strict ? "strict" : "lenient";
  ordered_json judges = ordered_json::object();
  for (const auto& [judge, r] : rep.p1) {
    ordered_json e;
    ordered_json shares = ordered_json::object(), counts = ordered_json::object(), acc = ordered_json::object();
    for (const auto& [res, c] : r.counts) {
      const std::string k(to_string(res));
      counts[k] = c;
      shares[k] = r.shares.at(res);
      if (res == Resolver::tie) continue;
      ordered_json a;
      a["correct"] = r.correct.at(res);
      a["n"] = r.scored.at(res);
      a["accuracy"] = r.scored.at(res) ? ordered_json(static_cast<double>(r.correct.at(res)) /
                                                      static_cast<double>(r.scored.at(res)))
                                       : ordered_json(nullptr);
      acc[k] = a;
    }
    e["n"] = r.rows.size();
    e["counts"] = counts;
    e["shares"] = shares;
    e["decision_accuracy"] = acc;
    if (details) {
      ordered_json rows = ordered_json::array();
      for (const auto& d : r.rows) {
        ordered_json x;
        x["example_id"] = d.example_id;
        x["counterfactual"] = std::string(to_string(d.counterfactual));
        x["resolver"] = std::string(to_string(d.resolver));
        x["correct"] = d.correct ? ordered_json(*d.correct) : ordered_json(nullptr);
        rows.push_back(x);
      }
      e["rows"] = rows;
    }
    judges[judge] = e;
  }
  for (const auto& [judge, r] : rep.p2) {
    ordered_json e, flips = ordered_json::object(), rates = ordered_json::object();
    for (auto d : all_dimensions) {
      flips[dim_short(d)] = r.flips.at(d);
      rates[dim_short(d)] = r.rates.at(d);
    }
    e["n"] = r.rows.size();
    e["flips"] = flips;
    e["flip_rates"] = rates;
    if (details) {
      ordered_json rows = ordered_json::array();
      for (const auto& d : r.rows) {
        ordered_json x;
        x["example_id"] = d.example_id;
        x["base"] = std::string(to_string(d.base));
        for (auto dim : all_dimensions) x[dim_short(dim)] = std::string(to_string(d.perturbed.at(dim)));
        rows.push_back(x);
      }
      e["rows"] = rows;
    }
    judges[judge] = e;
  }
  for (const auto& [judge, r] : rep.p3) {
    auto slice = [](const SliceRate& s) {
      ordered_json x;
      x["value"] = s.value;
      x["hits"] = s.hits;
      x["n"] = s.n;
      return x;
    };
    ordered_json e;
    e["winner_on_bad"] = slice(r.winner_on_bad);
    e["winner_slice_accuracy"] = slice(r.winner_slice_accuracy);
    judges[judge] = e;
  }
  j["judges"] = judges;
  return j;
}

/// Long-format CSV, one bar per line.
inline std::string to_csv(const ProbeReport& rep) {
  std::string out = "probe,judge,category,count,n,value\n";
  auto line = [&](const std::string& judge, const std::string& cat, std::size_t count, std::size_t n, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out += std::string(to_string(rep.probe)) + "," + judge + "," + cat + "," + std::to_string(count) + "," +
           std::to_string(n) + "," + buf + "\n";
  };
  for (const auto& [judge, r] : rep.p1) {
    for (const auto& [res, c] : r.counts) line(judge, std::string(to_string(res)), c, r.rows.size(), r.shares.at(res));
    for (auto res : {Resolver::paralinguistics, Resolver::voice_quality})
      if (r.scored.at(res))
        line(judge, "accuracy_" + std::string(to_string(res)), r.correct.at(res), r.scored.at(res),
             static_cast<double>(r.correct.at(res)) / static_cast<double>(r.scored.at(res)));
  }
  for (const auto& [judge, r] : rep.p2)
    for (auto d : all_dimensions) line(judge, "flip_" + dim_short(d), r.flips.at(d), r.rows.size(), r.rates.at(d));
  for (const auto& [judge, r] : rep.p3) {
    line(judge, "winner_on_bad", r.winner_on_bad.hits, r.winner_on_bad.n, r.winner_on_bad.value);
    line(judge, "winner_slice_accuracy", r.winner_slice_accuracy.hits, r.winner_slice_accuracy.n,
         r.winner_slice_accuracy.value);
  }
  return out;
}

}  // namespace trace::probes
