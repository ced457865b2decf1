#include <gtest/gtest.h>

#include <random>

#include "trace/probes.hpp"

using namespace trace;
using namespace trace::probes;

namespace {

constexpr Rating W1 = Rating::win_1, W2 = Rating::win_2, BG = Rating::both_good, BB = Rating::both_bad;

ProbeRow row(std::string id, Rating c, Rating vq, Rating p) { return {std::move(id), dims(c, vq, p), {}, {}}; }

std::vector<ProbeRow> random_rows(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ProbeRow> rows;
  auto pick = [&] { return all_ratings[rng() % 4]; };
  for (std::size_t i = 0; i < n; ++i) {
    auto r = row("r" + std::to_string(i), pick(), pick(), pick());
    r.truth_dims = dims(pick(), pick(), pick());
    r.truth_overall = pick();
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST(P1, ResolverCases) {
  auto fn = fusion::resolve(fusion::Policy::speakbench_tree);
  auto r = p1_counterfactual({row("a", W1, BG, W2), row("b", W2, W1, BB), row("c", BB, BG, BG)}, fn);
  EXPECT_EQ(r.rows[0].resolver, Resolver::paralinguistics);
  EXPECT_EQ(r.rows[0].counterfactual, W2);
  EXPECT_EQ(r.rows[1].resolver, Resolver::voice_quality);
  EXPECT_EQ(r.rows[2].resolver, Resolver::tie);
  EXPECT_EQ(r.rows[2].counterfactual, BG);
}

TEST(P1, SharesSumToOneAndDetailsSumToAggregates) {
  for (auto policy : {fusion::Policy::speakbench_tree, fusion::Policy::s2s_arena_cap}) {
    auto rows = random_rows(257, 5);
    auto rep = run_probe(Probe::p1, {{"trace", rows}, {"llm", random_rows(100, 6)}}, {policy});
    for (const auto& [judge, r] : rep.p1) {
      double total = 0;
      std::size_t count = 0;
      for (const auto& [k, s] : r.shares) total += s;
      for (const auto& [k, c] : r.counts) count += c;
      EXPECT_NEAR(total, 1.0, 1e-12) << judge;
      EXPECT_EQ(count, r.rows.size());
      std::size_t correct = 0, scored = 0;
      for (const auto& d : r.rows)
        if (d.correct) ++scored, correct += *d.correct;
      EXPECT_EQ(scored, r.scored.at(Resolver::paralinguistics) + r.scored.at(Resolver::voice_quality));
      EXPECT_EQ(correct, r.correct.at(Resolver::paralinguistics) + r.correct.at(Resolver::voice_quality));
    }
  }
}

TEST(P1, DecisionAccuracyAgainstDimensionLabels) {
  auto a = row("a", W1, BG, W2);
  a.truth_dims = dims(W1, BG, W2);  // P resolves and matches
  auto b = row("b", W1, W1, BG);
  b.truth_dims = dims(W1, W2, BG);  // VQ resolves and is wrong
  auto r = p1_counterfactual({a, b}, fusion::resolve(fusion::Policy::speakbench_tree));
  EXPECT_EQ(r.correct.at(Resolver::paralinguistics), 1u);
  EXPECT_EQ(r.scored.at(Resolver::voice_quality), 1u);
  EXPECT_EQ(r.correct.at(Resolver::voice_quality), 0u);
}

TEST(P2, PaperRowFlipsContent) {
  auto r = p2_flip_rates({row("x", W1, W2, W2)}, fusion::resolve(fusion::Policy::speakbench_tree));
  EXPECT_EQ(r.rows[0].base, W1);
  EXPECT_EQ(r.rows[0].perturbed.at(Dimension::content), W2);
  EXPECT_EQ(r.flips.at(Dimension::content), 1u);
}

TEST(P2, ConstantBothGoodDimensionNeverFlips) {
  auto rows = random_rows(300, 9);
  for (auto& r : rows) r.judge.voice_quality = BG;
  for (auto policy : {fusion::Policy::speakbench_tree, fusion::Policy::s2s_arena_cap, fusion::Policy::majority_vote}) {
    auto res = p2_flip_rates(rows, fusion::resolve(policy));
    EXPECT_EQ(res.rates.at(Dimension::voice_quality), 0.0);
  }
  std::vector<ProbeRow> all_good(20, row("g", BG, BG, BG));
  auto res = p2_flip_rates(all_good, fusion::resolve(fusion::Policy::s2s_arena_cap));
  for (auto d : all_dimensions) EXPECT_EQ(res.rates.at(d), 0.0);
}

TEST(P3, HandBuiltTenRows) {
  // truth:     BB BB BB BB  1  1  2  2  2 BG
  // predicted:  1 BB  2 BG  1  2  2  2 BB  1
  // winner_on_bad: 2 winners on 4 both_bad rows.
  // winner slice: truth in {1,2} on 5 rows, 3 exact.
  std::vector<Rating> truth{BB, BB, BB, BB, W1, W1, W2, W2, W2, BG};
  std::vector<Rating> pred{W1, BB, W2, BG, W1, W2, W2, W2, BB, W1};
  auto r = p3_attribution(pred, truth);
  EXPECT_EQ(r.winner_on_bad.hits, 2u);
  EXPECT_EQ(r.winner_on_bad.n, 4u);
  EXPECT_EQ(r.winner_on_bad.value, 0.5);
  EXPECT_EQ(r.winner_slice_accuracy.hits, 3u);
  EXPECT_EQ(r.winner_slice_accuracy.n, 5u);
  EXPECT_EQ(r.winner_slice_accuracy.value, 0.6);
}

TEST(P3, TenBadRowsFiveWinners) {
  std::vector<Rating> truth(10, BB), pred{W1, W2, W1, W2, W1, BB, BB, BG, BB, BG};
  truth.push_back(W1), pred.push_back(W1);
  EXPECT_EQ(p3_attribution(pred, truth).winner_on_bad.value, 0.5);
  std::vector<Rating> none(4, BB);
  truth.assign(4, BB);
  truth.push_back(W2);
  none.push_back(W2);
  EXPECT_EQ(p3_attribution(none, truth).winner_on_bad.value, 0.0);
}

TEST(P3, EmptySlice) {
  try {
    p3_attribution({W1, W2}, {W1, W2});
    FAIL();
  } catch (const CodedError& e) {
    EXPECT_EQ(e.code(), "EMPTY_SLICE");
  }
}

TEST(Report, UsesTheMainFusionFunction) {
  auto rep = run_probe(Probe::p2, {{"trace", random_rows(10, 1)}}, {fusion::Policy::s2s_arena_cap});
  EXPECT_EQ(rep.fn, fusion::resolve(fusion::Policy::s2s_arena_cap));
  EXPECT_EQ(rep.fn, &fusion::fuse_s2s_arena);
  auto lenient = run_probe(Probe::p2, {{"trace", random_rows(10, 1)}},
                           {fusion::Policy::s2s_arena_cap, fusion::CapMode::lenient});
  EXPECT_EQ(lenient.fn, &fusion::fuse_s2s_arena_lenient);
  EXPECT_EQ(to_json(lenient)["cap"], "lenient");
}

TEST(Report, JsonAndCsv) {
  auto rows = random_rows(40, 2);
  auto rep = run_probe(Probe::p3, {{"trace", rows}}, {fusion::Policy::speakbench_tree});
  auto j = to_json(rep);
  EXPECT_EQ(j["probe"], "P3");
  EXPECT_EQ(j["policy"], std::string(fusion::to_string(fusion::Policy::speakbench_tree)));
  auto csv = to_csv(rep);
  EXPECT_EQ(csv.rfind("probe,judge,category,count,n,value\n", 0), 0u);
  EXPECT_NE(csv.find("P3,trace,winner_on_bad,"), std::string::npos);
  auto p1 = to_csv(run_probe(Probe::p1, {{"trace", rows}}, {fusion::Policy::speakbench_tree}));
  EXPECT_NE(p1.find("P1,trace,tie,"), std::string::npos);
  auto p2 = to_json(run_probe(Probe::p2, {{"trace", rows}}, {fusion::Policy::speakbench_tree}));
  EXPECT_EQ(p2["judges"]["trace"]["rows"].size(), 40u);
}
