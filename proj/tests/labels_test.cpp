#include <gtest/gtest.h>

#include "trace/labels.hpp"

namespace trace {
namespace {

TEST(Labels, SerializationStrings) {
  EXPECT_EQ(to_string(Rating::win_1), "1");
  EXPECT_EQ(to_string(Rating::win_2), "2");
  EXPECT_EQ(to_string(Rating::both_good), "both_good");
  EXPECT_EQ(to_string(Rating::both_bad), "both_bad");
  for (Rating r : all_ratings) EXPECT_EQ(parse_rating(to_string(r)), r);
}

TEST(Labels, ParserAcceptsHyphenatedForm) {
  EXPECT_EQ(parse_rating("both-good"), Rating::both_good);
  EXPECT_EQ(parse_rating("both-bad"), Rating::both_bad);
  EXPECT_THROW(parse_rating("3"), LabelError);
  EXPECT_THROW(parse_rating("tie"), LabelError);
  EXPECT_THROW(parse_rating(""), LabelError);
}

TEST(Labels, AcceptabilityBijection) {
  EXPECT_EQ(acceptability(Rating::win_1), (Acceptability{true, false}));
  EXPECT_EQ(acceptability(Rating::win_2), (Acceptability{false, true}));
  EXPECT_EQ(acceptability(Rating::both_good), (Acceptability{true, true}));
  EXPECT_EQ(acceptability(Rating::both_bad), (Acceptability{false, false}));
  for (Rating r : all_ratings) EXPECT_EQ(from_acceptability(acceptability(r)), r);
}

TEST(Labels, RatingMinExamples) {
  EXPECT_EQ(rating_min(Rating::both_good, Rating::win_2), Rating::win_2);
  EXPECT_EQ(rating_min(Rating::both_bad, Rating::win_1), Rating::both_bad);
  EXPECT_EQ(rating_min(Rating::win_1, Rating::win_2), Rating::both_bad);
}

// Hand-enumerated meet table (rows: left operand, columns: right operand,
// order 1, 2, both_good, both_bad).
TEST(Labels, RatingMinFullTable) {
  using enum Rating;
  const Rating table[4][4] = {
      {win_1, both_bad, win_1, both_bad},
      {both_bad, win_2, win_2, both_bad},
      {win_1, win_2, both_good, both_bad},
      {both_bad, both_bad, both_bad, both_bad},
  };
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_EQ(rating_min(all_ratings[i], all_ratings[j]), table[i][j]);
}

TEST(Labels, LatticeLaws) {
  for (Rating a : all_ratings) {
    EXPECT_EQ(rating_min(a, a), a);
    EXPECT_EQ(rating_min(a, Rating::both_good), a);
    EXPECT_EQ(rating_min(Rating::both_bad, a), Rating::both_bad);
    for (Rating b : all_ratings) {
      EXPECT_EQ(rating_min(a, b), rating_min(b, a));
      const auto m = acceptability(rating_min(a, b));
      EXPECT_EQ(m.a, acceptability(a).a && acceptability(b).a);
      EXPECT_EQ(m.b, acceptability(a).b && acceptability(b).b);
      for (Rating c : all_ratings) EXPECT_EQ(rating_min(rating_min(a, b), c), rating_min(a, rating_min(b, c)));
    }
  }
}

TEST(Labels, Collapse) {
  EXPECT_EQ(collapse(Rating::both_bad, Arity::three_way)->value, "tie");
  EXPECT_EQ(collapse(Rating::both_good, Arity::three_way)->value, "tie");
  EXPECT_EQ(collapse(Rating::win_1, Arity::two_way)->value, "1");
  EXPECT_FALSE(collapse(Rating::both_good, Arity::two_way).has_value());
  EXPECT_FALSE(collapse(Rating::both_bad, Arity::two_way).has_value());
  for (Rating r : all_ratings) {
    EXPECT_EQ(collapse(r, Arity::four_way)->value, to_string(r));
    if (is_winner(r)) {
      EXPECT_NE(collapse(r, Arity::three_way)->value, "tie");
      EXPECT_TRUE(collapse(r, Arity::two_way).has_value());
    }
  }
}

TEST(Labels, CollapseUntypedTie) {
  EXPECT_EQ(collapse_label("tie", Arity::three_way), "tie");
  EXPECT_FALSE(collapse_label("tie", Arity::two_way).has_value());
  EXPECT_THROW(collapse_label("tie", Arity::four_way), ArityError);
  EXPECT_EQ(collapse_label("both_bad", Arity::three_way), "tie");
}

}  // namespace
}  // namespace trace
