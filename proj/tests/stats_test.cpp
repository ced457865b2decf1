#include <gtest/gtest.h>

#include <random>

#include "trace/stats.hpp"

using namespace trace;
using namespace trace::stats;

namespace {

constexpr Rating W1 = Rating::win_1, W2 = Rating::win_2, BG = Rating::both_good, BB = Rating::both_bad;

PairedOutcomes outcomes(const std::vector<Rating>& truth, const std::vector<Rating>& pred,
                        const std::string& sys = "judge") {
  PairedOutcomes po;
  po.systems = {sys};
  for (std::size_t i = 0; i < truth.size(); ++i)
    po.rows.push_back({"ex" + std::to_string(i), truth[i], {{sys, pred[i]}}});
  return po;
}

// Rows whose prediction is correct with probability p; wrong answers are a
// different rating drawn uniformly.
PairedOutcomes synthetic(std::size_t n, double p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution hit(p);
  std::uniform_int_distribution<int> cls(0, 3), off(1, 3);
  std::vector<Rating> t, y;
  for (std::size_t i = 0; i < n; ++i) {
    const int k = cls(rng);
    t.push_back(all_ratings[static_cast<std::size_t>(k)]);
    y.push_back(hit(rng) ? t.back() : all_ratings[static_cast<std::size_t>((k + off(rng)) % 4)]);
  }
  return outcomes(t, y);
}

BootstrapOptions quick(std::uint64_t seed, std::size_t reps = 1000) {
  BootstrapOptions o;
  o.replicates = reps;
  o.seed = seed;
  return o;
}

}  // namespace

TEST(Accuracy, Trivial) {
  auto po = outcomes({W1, W2, BG, BB}, {W1, W2, BG, BB});
  EXPECT_EQ(accuracy(po, "judge", Arity::four_way).value, 1.0);
  auto three = outcomes({W1, W2, BG, BB}, {W1, W2, BG, W1});
  EXPECT_EQ(accuracy(three, "judge", Arity::four_way).value, 0.75);
}

TEST(Accuracy, TwoWayDropsTieTruth) {
  // 10 rows, 2 with tie truth; 6 of the remaining 8 match.
  std::vector<Rating> t{W1, W2, W1, W2, W1, W2, W1, W2, BG, BB};
  std::vector<Rating> y{W1, W2, W1, W2, W1, W2, W2, BG, W1, BB};
  auto f = accuracy(outcomes(t, y), "judge", Arity::two_way);
  EXPECT_EQ(f.value, 0.75);
  EXPECT_EQ(f.n, 8u);
}

TEST(Accuracy, ThreeWayMergesTypedTies) {
  auto f = accuracy(outcomes({BG, BB, W1}, {BB, BG, W2}), "judge", Arity::three_way);
  EXPECT_DOUBLE_EQ(f.value, 2.0 / 3.0);
}

TEST(Accuracy, EmptyAfterCollapse) {
  try {
    accuracy(outcomes({BG, BB}, {BG, BB}), "judge", Arity::two_way);
    FAIL();
  } catch (const CodedError& e) {
    EXPECT_EQ(e.code(), "EMPTY_AFTER_COLLAPSE");
  }
}

TEST(Accuracy, PermutationInvariant) {
  auto po = synthetic(200, 0.6, 1);
  auto a = accuracy(po, "judge", Arity::three_way);
  std::mt19937_64 rng(2);
  std::shuffle(po.rows.begin(), po.rows.end(), rng);
  EXPECT_EQ(accuracy(po, "judge", Arity::three_way).value, a.value);
}

TEST(Outcomes, ValidateAndJsonlRoundTrip) {
  auto po = synthetic(20, 0.5, 3);
  po.systems = {"judge"};
  auto path = std::filesystem::temp_directory_path() / "trace_stats_outcomes.jsonl";
  io::write_atomic(path, po.to_jsonl());
  auto back = PairedOutcomes::from_jsonl(path);
  EXPECT_EQ(back.rows, po.rows);
  EXPECT_EQ(back.systems, po.systems);
  po.rows[1].predictions.clear();
  EXPECT_THROW(po.validate(), CodedError);
  po.rows[1] = po.rows[0];
  EXPECT_THROW(po.validate(), CodedError);
}

TEST(Bootstrap, AllCorrectIsDegenerate) {
  auto po = outcomes({W1, W2, BG, BB, W1}, {W1, W2, BG, BB, W1});
  auto r = accuracy_ci(po, "judge", Arity::four_way, quick(9));
  EXPECT_EQ(r.ci.lo, 1.0);
  EXPECT_EQ(r.ci.hi, 1.0);
}

TEST(Bootstrap, DeterministicAcrossWorkerCounts) {
  auto po = synthetic(300, 0.7, 4);
  auto o1 = quick(77, 2000);
  o1.workers = 1;
  auto o2 = o1;
  o2.workers = 4;
  auto a = accuracy_ci(po, "judge", Arity::four_way, o1).ci;
  auto b = accuracy_ci(po, "judge", Arity::four_way, o2).ci;
  auto c = accuracy_ci(po, "judge", Arity::four_way, o1).ci;
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  EXPECT_EQ(a.lo, c.lo);
  EXPECT_LE(a.lo, a.point);
  EXPECT_GE(a.hi, a.point);
  auto d = accuracy_ci(po, "judge", Arity::four_way, quick(78, 2000)).ci;
  EXPECT_NE(std::make_pair(a.lo, a.hi), std::make_pair(d.lo, d.hi));
}

TEST(Bootstrap, RejectsTooFewReplicates) {
  auto po = synthetic(10, 0.7, 5);
  EXPECT_THROW(accuracy_ci(po, "judge", Arity::four_way, quick(1, 999)), CodedError);
}

TEST(Bootstrap, CoverageOnSyntheticFamily) {
  // Rows with true accuracy 0.7, N=500: the 95% interval should contain 0.7
  // in at least 93% of 200 seeded trials.
  int covered = 0;
  for (int t = 0; t < 200; ++t) {
    auto po = synthetic(500, 0.7, 1000 + static_cast<std::uint64_t>(t));
    auto ci = accuracy_ci(po, "judge", Arity::four_way, quick(static_cast<std::uint64_t>(t))).ci;
    covered += ci.lo <= 0.7 && 0.7 <= ci.hi;
  }
  EXPECT_GE(covered, 186) << covered << "/200";
}

TEST(Bootstrap, WidthShrinksWithN) {
  double prev = 1.0;
  for (std::size_t n : {50, 200, 800, 3200}) {
    auto ci = accuracy_ci(synthetic(n, 0.7, n), "judge", Arity::four_way, quick(11)).ci;
    EXPECT_LT(ci.hi - ci.lo, prev) << n;
    prev = ci.hi - ci.lo;
  }
}

TEST(Kappa, IdenticalSequencesGiveOne) {
  std::vector<Rating> a{W1, W2, BG, BB, W1, BB};
  auto k = cohen_kappa(a, a, Arity::four_way, quick(1));
  EXPECT_EQ(k.kappa, 1.0);
  EXPECT_EQ(k.n, 6u);
}

TEST(Kappa, MatchesHandComputedValueAndIsSymmetric) {
  // Oracle: p_o = 3/4, p_e = 1/4, kappa = 2/3.
  auto split = [](const std::string& s) {
    std::vector<Rating> out;
    for (char c : s) out.push_back(c == '1' ? W1 : c == '2' ? W2 : c == 'G' ? BG : BB);
    return out;
  };
  auto a = split("1122GGBBB12G"), b = split("1222GBBB112G");
  auto ab = cohen_kappa(a, b, Arity::four_way, quick(1));
  auto ba = cohen_kappa(b, a, Arity::four_way, quick(1));
  EXPECT_NEAR(ab.kappa, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(ba.kappa, ab.kappa, 1e-12);
}

TEST(Kappa, IndependentRatersNearZero) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> u(0, 3);
  std::vector<Rating> a, b;
  for (int i = 0; i < 4000; ++i) {
    a.push_back(all_ratings[static_cast<std::size_t>(u(rng))]);
    b.push_back(all_ratings[static_cast<std::size_t>(u(rng))]);
  }
  auto k = cohen_kappa(a, b, Arity::four_way, quick(2));
  EXPECT_LE(k.ci.lo, 0.0);
  EXPECT_GE(k.ci.hi, 0.0);
}

TEST(Kappa, DegenerateConstantRaters) {
  std::vector<Rating> a(5, BB);
  try {
    cohen_kappa(a, a, Arity::four_way, quick(1));
    FAIL();
  } catch (const CodedError& e) {
    EXPECT_EQ(e.code(), "DEGENERATE");
  }
}

TEST(Kappa, UntypedTiesUnavailableAtFourWay) {
  std::vector<std::string> a{"1", "tie", "2"}, b{"1", "both_good", "1"};
  try {
    cohen_kappa(a, b, Arity::four_way, quick(1));
    FAIL();
  } catch (const CodedError& e) {
    EXPECT_EQ(e.code(), "ARITY_UNAVAILABLE");
  }
  EXPECT_EQ(cohen_kappa(a, b, Arity::two_way, quick(1)).n, 2u);
}

TEST(McNemar, ExactBinomialOracle) {
  std::vector<bool> a, b;
  for (int i = 0; i < 15; ++i) a.push_back(true), b.push_back(false);
  for (int i = 0; i < 5; ++i) a.push_back(false), b.push_back(true);
  for (int i = 0; i < 30; ++i) a.push_back(i % 2), b.push_back(i % 2);
  auto r = mcnemar(a, b);
  EXPECT_EQ(r.b, 15u);
  EXPECT_EQ(r.c, 5u);
  EXPECT_NEAR(r.p_value, 0.04138946533203125, 1e-12);
  EXPECT_NEAR(mcnemar(b, a).p_value, r.p_value, 1e-15);
  EXPECT_NEAR(mcnemar_exact_p(0, 7), 0.015625, 1e-15);
  EXPECT_NEAR(mcnemar_exact_p(3, 40), 3.0213413992896676e-09, 1e-20);
}

TEST(McNemar, SymmetricAndEmptyCases) {
  EXPECT_EQ(mcnemar_exact_p(10, 10), 1.0);
  auto r = mcnemar({true, false}, {true, false});
  EXPECT_TRUE(r.no_discordant);
  EXPECT_EQ(r.p_value, 1.0);
  EXPECT_LE(mcnemar_exact_p(400, 300), 1.0);
}

TEST(Confusion, PerfectAndConstantPredictions) {
  auto perfect = confusion(outcomes({W1, W2, BG, BB}, {W1, W2, BG, BB}), "judge");
  EXPECT_EQ(perfect.weighted_precision, 1.0);
  EXPECT_EQ(perfect.weighted_recall, 1.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(perfect.counts[i][i], 1u);
  auto constant = confusion(outcomes({W1, W2, BG, BB}, {W1, W1, W1, W1}), "judge");
  EXPECT_EQ(constant.weighted_recall, 0.25);
}

TEST(Confusion, HandBuiltMatrixMatchesOracle) {
  const std::size_t M[4][4] = {{7, 1, 2, 0}, {2, 5, 0, 3}, {1, 0, 4, 1}, {0, 2, 1, 11}};
  std::vector<Rating> t, y;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < M[i][j]; ++k) t.push_back(all_ratings[i]), y.push_back(all_ratings[j]);
  auto m = confusion(outcomes(t, y), "judge");
  EXPECT_EQ(m.n, 40u);
  EXPECT_NEAR(m.weighted_precision, 11317.0 / 16800.0, 1e-12);
  EXPECT_NEAR(m.weighted_recall, 27.0 / 40.0, 1e-12);
  EXPECT_EQ(m.counts[3][3], 11u);
  EXPECT_EQ(to_json(m)["counts"][1][3], 3);
}

TEST(Agreement, IdenticalPasses) {
  LabelSet a{{"x", "1"}, {"y", "both_bad"}, {"z", "2"}, {"w", "both_good"}};
  auto r = agreement(a, a, quick(3));
  ASSERT_EQ(r.by_arity.size(), 3u);
  for (const auto& e : r.by_arity) {
    EXPECT_TRUE(e.available);
    EXPECT_EQ(e.agreement.value, 1.0);
    ASSERT_TRUE(e.kappa);
    EXPECT_EQ(e.kappa->kappa, 1.0);
  }
  EXPECT_EQ(r.by_arity[0].agreement.n, 2u);
  EXPECT_EQ(r.by_arity[2].agreement.n, 4u);
}

TEST(Agreement, JoinsOnIdsAndReportsNsPerArity) {
  LabelSet orig{{"a", "1"}, {"b", "tie"}, {"c", "2"}, {"d", "1"}, {"only", "1"}};
  LabelSet hcot{{"a", "1"}, {"b", "both_bad"}, {"c", "both_good"}, {"d", "2"}, {"other", "2"}};
  auto r = agreement(orig, hcot, quick(3));
  EXPECT_EQ(r.overlap, 4u);
  EXPECT_EQ(r.by_arity[0].agreement.n, 2u);  // c dropped (tie on one side), b dropped
  EXPECT_EQ(r.by_arity[0].agreement.value, 0.5);
  EXPECT_EQ(r.by_arity[1].agreement.n, 4u);
  EXPECT_EQ(r.by_arity[1].agreement.value, 0.5);
  EXPECT_FALSE(r.by_arity[2].available);
  EXPECT_THROW(agreement(LabelSet{{"p", "1"}}, LabelSet{{"q", "1"}}), CodedError);
}

TEST(Rng, SplitStreamsAreIndependentOfOrder) {
  SplitMix64 a(5, 3), b(5, 3), c(5, 4);
  EXPECT_EQ(a.next(), b.next());
  EXPECT_NE(SplitMix64(5, 3).next(), c.next());
  SplitMix64 r(1);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.below(7), 7u);
}
