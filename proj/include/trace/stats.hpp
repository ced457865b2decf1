#pragma once

// Evaluation statistics: n-way accuracy, paired percentile bootstrap, Cohen's
// kappa, exact McNemar, confusion matrices and label-set agreement.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/error.hpp"
#include "trace/io.hpp"
#include "trace/labels.hpp"
#include "trace/parallel.hpp"

namespace trace::stats {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Paired outcomes

struct OutcomeRow {
  std::string example_id;
  Rating truth = Rating::both_good;
  std::map<std::string, Rating> predictions;
  friend bool operator==(const OutcomeRow&, const OutcomeRow&) = default;
};

struct PairedOutcomes {
  std::vector<std::string> systems;
  std::vector<OutcomeRow> rows;

  /// Throws INVALID_OUTCOMES on duplicate ids or a missing prediction.
  void validate() const {
    std::set<std::string> seen;
    for (const auto& r : rows) {
      if (!seen.insert(r.example_id).second) throw CodedError("INVALID_OUTCOMES", "duplicate example_id " + r.example_id);
      for (const auto& s : systems)
        if (!r.predictions.count(s))
          throw CodedError("INVALID_OUTCOMES", "example " + r.example_id + " has no prediction for " + s);
    }
  }

  ordered_json row_json(const OutcomeRow& r) const {
    ordered_json j;
    j["example_id"] = r.example_id;
    j["truth"] = std::string(to_string(r.truth));
    ordered_json p = ordered_json::object();
    for (const auto& s : systems) p[s] = std::string(to_string(r.predictions.at(s)));
    j["predictions"] = p;
    return j;
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : rows) out += row_json(r).dump() + "\n";
    return out;
  }

  /// Systems are taken from the first row; later rows must carry the same set.
  static PairedOutcomes from_jsonl(const io::fs::path& path) {
    PairedOutcomes po;
    io::for_each_jsonl<json>(path, [&](const json& j, std::size_t line) {
      try {
        OutcomeRow r;
        r.example_id = j.at("example_id").get<std::string>();
        r.truth = parse_rating(j.at("truth").get<std::string>());
        for (auto it = j.at("predictions").begin(); it != j.at("predictions").end(); ++it)
          r.predictions[it.key()] = parse_rating(it.value().get<std::string>());
        if (po.rows.empty())
          for (const auto& [k, v] : r.predictions) po.systems.push_back(k);
        po.rows.push_back(std::move(r));
      } catch (const std::exception& e) {
        throw CodedError("MALFORMED_JSONL", path.string() + ":" + std::to_string(line) + ": " + e.what());
      }
    });
    po.validate();
    return po;
  }
};

// ---------------------------------------------------------------------------
// Accuracy

struct Fraction {
  double value = 0.0;
  std::size_t n = 0;
};

namespace detail {

template <class Rows>
std::optional<Fraction> accuracy_over(const Rows& rows, std::span<const std::size_t> idx, const std::string& system,
                                      Arity arity) {
  std::size_t n = 0, hit = 0;
  for (auto i : idx) {
    const auto& r = rows[i];
    auto t = collapse(r.truth, arity);
    if (!t) continue;
    ++n;
    auto p = collapse(r.predictions.at(system), arity);
    if (p && *p == *t) ++hit;
  }
  if (n == 0) return std::nullopt;
  return Fraction{static_cast<double>(hit) / static_cast<double>(n), n};
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace detail

/// Two-way drops rows whose truth is a tie; a tie prediction on a retained row
/// is simply wrong.
inline Fraction accuracy(const PairedOutcomes& po, const std::string& system, Arity arity) {
  auto idx = detail::iota(po.rows.size());
  auto f = detail::accuracy_over(po.rows, idx, system, arity);
  if (!f) throw CodedError("EMPTY_AFTER_COLLAPSE", system + " at " + std::to_string(static_cast<int>(arity)) + "-way");
  return *f;
}

// ---------------------------------------------------------------------------
// Bootstrap

/// SplitMix64 step; also used to derive independent per-replicate streams.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  SplitMix64(std::uint64_t seed, std::uint64_t stream) : state_(seed) {
    std::uint64_t s = seed ^ (stream * 0xd1342543de82ef95ULL);
    state_ = splitmix64(s);
  }
  std::uint64_t next() { return splitmix64(state_); }
  /// Unbiased draw in [0, bound) by multiply-shift with rejection.
  std::uint64_t below(std::uint64_t bound) {
    for (;;) {
      const unsigned __int128 m = static_cast<unsigned __int128>(next()) * bound;
      const auto low = static_cast<std::uint64_t>(m);
      if (low >= (-bound) % bound) return static_cast<std::uint64_t>(m >> 64);
    }
  }

 private:
  std::uint64_t state_;
};

struct ConfidenceInterval {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double level = 0.95;
  std::size_t replicates = 0;
  std::uint64_t seed = 0;
  /// Replicates whose statistic was undefined (e.g. nothing retained).
  std::size_t undefined_replicates = 0;
};

inline ordered_json to_json(const ConfidenceInterval& ci) {
  ordered_json j;
  j["point"] = ci.point;
  j["lo"] = ci.lo;
  j["hi"] = ci.hi;
  j["level"] = ci.level;
  j["replicates"] = ci.replicates;
  j["seed"] = ci.seed;
  j["undefined_replicates"] = ci.undefined_replicates;
  return j;
}

struct BootstrapOptions {
  std::size_t replicates = 10000;
  std::uint64_t seed = 0;
  double level = 0.95;
  std::size_t workers = default_workers();
};

/// Linear-interpolated quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double h = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Statistic over a multiset of row indices; std::nullopt when undefined.
using Statistic = std::function<std::optional<double>(std::span<const std::size_t>)>;

/// Percentile bootstrap over n paired rows. Replicate r draws its indices from
/// SplitMix64(seed, r), so results do not depend on the worker count.
inline ConfidenceInterval bootstrap_ci(std::size_t n, const Statistic& stat, const BootstrapOptions& opt = {}) {
  if (opt.replicates < 1000) throw CodedError("INVALID_CONFIG", "replicates must be >= 1000");
  if (!(opt.level > 0.0 && opt.level < 1.0)) throw CodedError("INVALID_CONFIG", "level must be in (0,1)");
  auto all = detail::iota(n);
  auto point = stat(all);
  if (!point) throw CodedError("EMPTY_AFTER_COLLAPSE", "statistic undefined on the full sample");

  std::vector<double> values(opt.replicates, std::numeric_limits<double>::quiet_NaN());
  parallel_for(opt.replicates, opt.workers, [&](std::size_t r) {
    SplitMix64 rng(opt.seed, r);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
    if (auto v = stat(idx)) values[r] = *v;
  });
  std::vector<double> ok;
  ok.reserve(values.size());
  for (double v : values)
    if (!std::isnan(v)) ok.push_back(v);
  std::sort(ok.begin(), ok.end());

  ConfidenceInterval ci;
  ci.point = *point;
  ci.level = opt.level;
  ci.replicates = opt.replicates;
  ci.seed = opt.seed;
  ci.undefined_replicates = values.size() - ok.size();
  const double alpha = 1.0 - opt.level;
  ci.lo = ok.empty() ? ci.point : quantile_sorted(ok, alpha / 2);
  ci.hi = ok.empty() ? ci.point : quantile_sorted(ok, 1 - alpha / 2);
  // Percentile intervals can exclude the point estimate on skewed samples;
  // widen so lo <= point <= hi always holds.
  ci.lo = std::min(ci.lo, ci.point);
  ci.hi = std::max(ci.hi, ci.point);
  return ci;
}

struct AccuracyResult {
  Fraction accuracy;
  ConfidenceInterval ci;
};

inline AccuracyResult accuracy_ci(const PairedOutcomes& po, const std::string& system, Arity arity,
                                  const BootstrapOptions& opt = {}) {
  auto acc = accuracy(po, system, arity);
  auto ci = bootstrap_ci(
      po.rows.size(),
      [&](std::span<const std::size_t> idx) -> std::optional<double> {
        auto f = detail::accuracy_over(po.rows, idx, system, arity);
        if (!f) return std::nullopt;
        return f->value;
      },
      opt);
  return {acc, ci};
}

// ---------------------------------------------------------------------------
// Cohen's kappa

namespace detail {

inline std::optional<double> kappa_over(const std::vector<int>& a, const std::vector<int>& b, int k,
                                        std::span<const std::size_t> idx) {
  if (idx.empty()) return std::nullopt;
  std::vector<double> ma(static_cast<std::size_t>(k)), mb(static_cast<std::size_t>(k));
  double agree = 0;
  for (auto i : idx) {
    ma[static_cast<std::size_t>(a[i])] += 1;
    mb[static_cast<std::size_t>(b[i])] += 1;
    if (a[i] == b[i]) agree += 1;
  }
  const double n = static_cast<double>(idx.size());
  double pe = 0;
  for (int c = 0; c < k; ++c) pe += (ma[static_cast<std::size_t>(c)] / n) * (mb[static_cast<std::size_t>(c)] / n);
  const double po = agree / n;
  if (std::abs(1.0 - pe) < 1e-12) return std::nullopt;
  return (po - pe) / (1.0 - pe);
}

/// Collapse both sequences; rows dropped on either side are removed.
inline std::pair<std::vector<std::string>, std::vector<std::string>> collapse_pairs(
    const std::vector<std::string>& a, const std::vector<std::string>& b, Arity arity) {
  if (a.size() != b.size()) throw CodedError("INVALID_INPUT", "label sequences differ in length");
  std::vector<std::string> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::optional<std::string> x, y;
    try {
      x = collapse_label(a[i], arity);
      y = collapse_label(b[i], arity);
    } catch (const ArityError& e) {
      throw CodedError("ARITY_UNAVAILABLE", e.what());
    } catch (const LabelError& e) {
      throw CodedError("INVALID_LABEL", e.what());
    }
    if (!x || !y) continue;
    ca.push_back(*x);
    cb.push_back(*y);
  }
  return {ca, cb};
}

}  // namespace detail

struct KappaResult {
  double kappa = 0.0;
  std::size_t n = 0;
  ConfidenceInterval ci;
};

/// Labels are rating names or "tie" (untyped, from original dataset labels).
inline KappaResult cohen_kappa(const std::vector<std::string>& labels_a, const std::vector<std::string>& labels_b,
                               Arity arity, const BootstrapOptions& opt = {}) {
  auto [ca, cb] = detail::collapse_pairs(labels_a, labels_b, arity);
  if (ca.empty()) throw CodedError("EMPTY_AFTER_COLLAPSE", "no rows retained");
  std::map<std::string, int> code;
  for (const auto& s : ca) code.emplace(s, 0);
  for (const auto& s : cb) code.emplace(s, 0);
  int k = 0;
  for (auto& [s, c] : code) c = k++;
  std::vector<int> a, b;
  for (std::size_t i = 0; i < ca.size(); ++i) {
    a.push_back(code[ca[i]]);
    b.push_back(code[cb[i]]);
  }
  auto all = detail::iota(a.size());
  auto kappa = detail::kappa_over(a, b, k, all);
  if (!kappa) throw CodedError("DEGENERATE", "chance agreement is 1");
  KappaResult res;
  res.kappa = *kappa;
  res.n = a.size();
  res.ci = bootstrap_ci(
      a.size(), [&](std::span<const std::size_t> idx) { return detail::kappa_over(a, b, k, idx); }, opt);
  return res;
}

inline KappaResult cohen_kappa(const std::vector<Rating>& a, const std::vector<Rating>& b, Arity arity,
                               const BootstrapOptions& opt = {}) {
  std::vector<std::string> sa, sb;
  for (auto r : a) sa.emplace_back(to_string(r));
  for (auto r : b) sb.emplace_back(to_string(r));
  return cohen_kappa(sa, sb, arity, opt);
}

// ---------------------------------------------------------------------------
// McNemar

struct McNemarResult {
  double p_value = 1.0;
  std::size_t b = 0;  // A correct, B wrong
  std::size_t c = 0;  // A wrong, B correct
  bool no_discordant = false;
};

/// Exact two-sided binomial test on discordant pairs.
inline double mcnemar_exact_p(std::size_t b, std::size_t c) {
  const std::size_t n = b + c;
  if (n == 0) return 1.0;
  const std::size_t k = std::min(b, c);
  const double ln_half_n = static_cast<double>(n) * std::log(0.5);
  const double lg_n1 = std::lgamma(static_cast<double>(n) + 1);
  double tail = 0;
  for (std::size_t i = 0; i <= k; ++i)
    tail += std::exp(lg_n1 - std::lgamma(static_cast<double>(i) + 1) - std::lgamma(static_cast<double>(n - i) + 1) +
                     ln_half_n);
  return std::min(1.0, 2.0 * tail);
}

inline McNemarResult mcnemar(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b) {
  if (correct_a.size() != correct_b.size()) throw CodedError("INVALID_INPUT", "correctness vectors differ in length");
  McNemarResult r;
  for (std::size_t i = 0; i < correct_a.size(); ++i) {
    if (correct_a[i] && !correct_b[i]) ++r.b;
    if (!correct_a[i] && correct_b[i]) ++r.c;
  }
  r.no_discordant = r.b + r.c == 0;
  r.p_value = mcnemar_exact_p(r.b, r.c);
  return r;
}

/// Per-row correctness of one system, over rows retained at `arity`.
inline std::vector<bool> correctness(const PairedOutcomes& po, const std::string& system, Arity arity) {
  std::vector<bool> out;
  for (const auto& r : po.rows) {
    auto t = collapse(r.truth, arity);
    if (!t) continue;
    auto p = collapse(r.predictions.at(system), arity);
    out.push_back(p && *p == *t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confusion

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  std::size_t support = 0;
  std::size_t predicted = 0;
};

struct Confusion {
  // counts[truth][prediction], indexed in all_ratings order.
  std::array<std::array<std::size_t, 4>, 4> counts{};
  std::array<ClassMetrics, 4> per_class{};
  double weighted_precision = 0.0;
  double weighted_recall = 0.0;
  std::size_t n = 0;
};

/// Precision of a never-predicted class is 0. Weights are true-class supports.
inline Confusion confusion(const PairedOutcomes& po, const std::string& system) {
  Confusion m;
  for (const auto& r : po.rows)
    ++m.counts[static_cast<std::size_t>(r.truth)][static_cast<std::size_t>(r.predictions.at(system))];
  for (std::size_t k = 0; k < 4; ++k) {
    auto& c = m.per_class[k];
    for (std::size_t j = 0; j < 4; ++j) {
      c.support += m.counts[k][j];
      c.predicted += m.counts[j][k];
    }
    m.n += c.support;
    const double tp = static_cast<double>(m.counts[k][k]);
    c.precision = c.predicted ? tp / static_cast<double>(c.predicted) : 0.0;
    c.recall = c.support ? tp / static_cast<double>(c.support) : 0.0;
  }
  if (m.n > 0) {
    for (const auto& c : m.per_class) {
      const double w = static_cast<double>(c.support) / static_cast<double>(m.n);
      m.weighted_precision += w * c.precision;
      m.weighted_recall += w * c.recall;
    }
  }
  return m;
}

inline ordered_json to_json(const Confusion& m) {
  ordered_json j;
  ordered_json labels = ordered_json::array();
  for (auto r : all_ratings) labels.push_back(std::string(to_string(r)));
  j["labels"] = labels;
  ordered_json rows = ordered_json::array();
  for (const auto& row : m.counts) rows.push_back(row);
  j["counts"] = rows;
  ordered_json pc = ordered_json::object();
  for (std::size_t k = 0; k < 4; ++k) {
    ordered_json c;
    c["precision"] = m.per_class[k].precision;
    c["recall"] = m.per_class[k].recall;
    c["support"] = m.per_class[k].support;
    pc[std::string(to_string(all_ratings[k]))] = c;
  }
  j["per_class"] = pc;
  j["weighted_precision"] = m.weighted_precision;
  j["weighted_recall"] = m.weighted_recall;
  j["n"] = m.n;
  return j;
}

// ---------------------------------------------------------------------------
// Agreement between two label sets, joined on example id.

using LabelSet = std::map<std::string, std::string>;

struct ArityAgreement {
  Arity arity = Arity::four_way;
  bool available = false;  // false when a label has no value at this arity
  Fraction agreement;
  ConfidenceInterval ci;
  std::optional<KappaResult> kappa;
};

struct AgreementReport {
  std::size_t overlap = 0;
  std::vector<ArityAgreement> by_arity;  // 2, 3, 4
};

inline AgreementReport agreement(const LabelSet& a, const LabelSet& b, const BootstrapOptions& opt = {}) {
  std::vector<std::string> la, lb;
  for (const auto& [id, label] : a) {
    auto it = b.find(id);
    if (it == b.end()) continue;
    la.push_back(label);
    lb.push_back(it->second);
  }
  if (la.empty()) throw CodedError("INSUFFICIENT_DATA", "label sets share no examples");
  AgreementReport rep;
  rep.overlap = la.size();
  for (auto arity : {Arity::two_way, Arity::three_way, Arity::four_way}) {
    ArityAgreement aa;
    aa.arity = arity;
    std::vector<std::string> ca, cb;
    try {
      std::tie(ca, cb) = detail::collapse_pairs(la, lb, arity);
    } catch (const CodedError& e) {
      if (e.code() != "ARITY_UNAVAILABLE") throw;
      rep.by_arity.push_back(aa);
      continue;
    }
    if (ca.empty()) {
      rep.by_arity.push_back(aa);
      continue;
    }
    aa.available = true;
    auto rate = [&](std::span<const std::size_t> idx) -> std::optional<double> {
      if (idx.empty()) return std::nullopt;
      std::size_t hit = 0;
      for (auto i : idx) hit += ca[i] == cb[i];
      return static_cast<double>(hit) / static_cast<double>(idx.size());
    };
    aa.agreement = {*rate(detail::iota(ca.size())), ca.size()};
    aa.ci = bootstrap_ci(ca.size(), rate, opt);
    try {
      aa.kappa = cohen_kappa(ca, cb, arity, opt);
    } catch (const CodedError& e) {
      if (e.code() != "DEGENERATE") throw;
    }
    rep.by_arity.push_back(aa);
  }
  return rep;
}

inline ordered_json to_json(const AgreementReport& r) {
  ordered_json j;
  j["overlap"] = r.overlap;
  ordered_json arr = ordered_json::array();
  for (const auto& a : r.by_arity) {
    ordered_json e;
    e["arity"] = static_cast<int>(a.arity);
    e["available"] = a.available;
    if (a.available) {
      e["agreement"] = a.agreement.value;
      e["n"] = a.agreement.n;
      e["ci"] = to_json(a.ci);
      if (a.kappa) {
        e["kappa"] = a.kappa->kappa;
        e["kappa_ci"] = to_json(a.kappa->ci);
      } else {
        e["kappa"] = nullptr;
      }
    }
    arr.push_back(e);
  }
  j["by_arity"] = arr;
  return j;
}

}  // namespace trace::stats
