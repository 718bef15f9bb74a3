#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "atomkit/metrics.hpp"
#include "support.hpp"

using namespace atomkit;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0;
  long np = 0, nn = 0;
  for (int v : y) (v ? np : nn)++;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) num += s[i] > s[j] ? 2.0 : (s[i] == s[j] ? 1.0 : 0.0);
  return num / (2.0 * static_cast<double>(np) * static_cast<double>(nn));
}

AtomicSystem rotated(const AtomicSystem& s, const Eigen::Matrix3d& q) {
  AtomicSystem r = s;
  r.positions = s.positions * q.transpose();
  r.lattice = Lattice(*s.lattice * q.transpose());
  return r;
}

AtomicSystem shuffled(const AtomicSystem& s, std::mt19937_64& rng) {
  std::vector<std::size_t> p(s.size());
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  AtomicSystem r = s;
  for (std::size_t i = 0; i < p.size(); ++i) {
    r.atom_numbers[i] = s.atom_numbers[p[i]];
    r.positions.row(static_cast<Eigen::Index>(i)) = s.positions.row(static_cast<Eigen::Index>(p[i]));
  }
  return r;
}

}  // namespace

TEST(Regression, MaeEnergyPerAtom) {
  EXPECT_EQ(mae_energy_per_atom({1.0, 2.0}, {1.0, 2.0}, {3, 4}), 0.0);
  EXPECT_NEAR(mae_energy_per_atom({1.2}, {1.0}, {4}), 50.0, 1e-9);
  EXPECT_NEAR(mae_energy_per_atom({1.2}, {1.0}, {8}), 25.0, 1e-9);
  EXPECT_THROW(mae_energy_per_atom({1.0}, {1.0, 2.0}, {1}), std::invalid_argument);
}

TEST(Regression, MaeAndRmse) {
  EXPECT_EQ(mae_property({1, 2}, {1, 2}), 0.0);
  EXPECT_DOUBLE_EQ(mae_property({2, 0}, {1, 1}), 1.0);
  Eigen::MatrixXd p(1, 3), t = Eigen::MatrixXd::Zero(1, 3);
  p << 3, 4, 0;
  EXPECT_NEAR(rmse_components(p, t, 3), std::sqrt(25.0 / 3.0), 1e-12);
  EXPECT_EQ(rmse_components(p, p, 3), 0.0);
  EXPECT_THROW(rmse_components(p, t, 1), std::invalid_argument);
  EXPECT_THROW(rmse_components(p, t, 2), std::invalid_argument);
}

TEST(Regression, RSquared) {
  EXPECT_DOUBLE_EQ(r_squared({1, 2, 3}, {1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(r_squared({2, 2, 2}, {1, 2, 3}), 0.0);
  EXPECT_DOUBLE_EQ(r_squared({1, 2, 4}, {1, 2, 3}), 0.5);
  EXPECT_THROW(r_squared({1, 2}, {3, 3}), std::invalid_argument);
  EXPECT_THROW(r_squared({1}, {3}), std::invalid_argument);
}

TEST(Classification, ConfusionMatrixNumbers) {
  auto r = rates_from_counts({153, 7, 2, 154});
  EXPECT_NEAR(r.precision, 0.956, 5e-4);
  EXPECT_NEAR(r.recall, 0.987, 5e-4);
  EXPECT_NEAR(r.f1, 0.971, 5e-4);
  // same counts through raw scores
  std::vector<double> s;
  std::vector<int> y;
  auto add = [&](int n, double score, int label) {
    for (int i = 0; i < n; ++i) {
      s.push_back(score);
      y.push_back(label);
    }
  };
  add(153, 0.9, 1);
  add(2, 0.1, 1);
  add(7, 0.8, 0);
  add(154, 0.2, 0);
  auto c = classification_metrics(s, y);
  EXPECT_EQ(c.counts.tp, 153);
  EXPECT_EQ(c.counts.fp, 7);
  EXPECT_EQ(c.counts.fn, 2);
  EXPECT_EQ(c.counts.tn, 154);
  EXPECT_DOUBLE_EQ(c.f1, r.f1);
}

TEST(Classification, ThresholdIsStrict) {
  auto c = classification_metrics({0.5, 0.6, 0.4}, {1, 1, 0});
  EXPECT_EQ(c.counts.tp, 1);
  EXPECT_EQ(c.counts.fn, 1);
}

TEST(Classification, AucEdgeCases) {
  EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc({0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(roc_auc({0.9, 0.8, 0.1}, {0, 0, 1}), 0.0);
  EXPECT_THROW(roc_auc({0.1, 0.2}, {1, 1}), std::invalid_argument);
  EXPECT_THROW(classification_metrics({0.1, 0.2}, {0, 0}), std::invalid_argument);
}

TEST(Classification, AucEqualsPairCounting) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> size(2, 200), level(0, 9), bit(0, 1);
  for (int t = 0; t < 200; ++t) {
    const int n = size(rng);
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = 0.1 * level(rng);  // coarse levels force ties
      y[static_cast<std::size_t>(i)] = bit(rng);
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_EQ(roc_auc(s, y), brute_auc(s, y)) << "trial " << t;
  }
}

TEST(Matcher, IdenticalAndSelf) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    auto s = testsupport::random_crystal(rng, 1 + t % 6);
    auto r = structure_match(s, s);
    ASSERT_TRUE(r.matched) << r.reason;
    EXPECT_NEAR(*r.site_rmse_normalized, 0.0, 1e-9);
  }
}

TEST(Matcher, ScaledLatticeFailsLength) {
  std::mt19937_64 rng(8);
  auto s = testsupport::random_crystal(rng, 4);
  AtomicSystem big = s;
  big.positions *= 1.5;
  big.lattice = Lattice(*s.lattice * 1.5);
  auto r = structure_match(s, big);
  EXPECT_FALSE(r.matched);
  EXPECT_FALSE(r.lattice_ok);
  EXPECT_EQ(r.reason, "lattice");
  EXPECT_FALSE(r.site_rmse_normalized.has_value());
  // a mild scale stays within ltol
  AtomicSystem near = s;
  near.positions *= 1.1;
  near.lattice = Lattice(*s.lattice * 1.1);
  EXPECT_TRUE(structure_match(s, near).matched);
}

TEST(Matcher, RandomDisplacementGivesRmse) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 5; ++t) {
    auto s = testsupport::random_crystal(rng, 16, 6.0, 8.0, {3, 8, 26, 40});
    const double scale = std::cbrt(cell_volume(*s.lattice) / 16.0);
    AtomicSystem d = s;
    for (Eigen::Index i = 0; i < 16; ++i) {
      Eigen::RowVector3d v(n(rng), n(rng), n(rng));
      d.positions.row(i) += 0.1 * scale * v.normalized();
    }
    auto r = structure_match(s, d);
    ASSERT_TRUE(r.matched) << r.reason;
    // the best global translation removes the mean displacement
    EXPECT_NEAR(*r.site_rmse_normalized, 0.1, 0.01);
  }
}

TEST(Matcher, CompositionAndCount) {
  std::mt19937_64 rng(10);
  auto s = testsupport::random_crystal(rng, 3, 4.0, 5.0, {3});
  s.atom_numbers = {3, 8, 8};
  auto other = s;
  other.atom_numbers = {3, 3, 8};
  auto r = structure_match(s, other);
  EXPECT_FALSE(r.matched);
  EXPECT_EQ(r.reason, "composition");
  // a doubled cell has the same reduced composition but more atoms
  AtomicSystem sup;
  Lattice l2 = *s.lattice;
  l2.row(0) *= 2.0;
  sup.lattice = l2;
  sup.positions.resize(6, 3);
  for (int i = 0; i < 3; ++i) {
    sup.atom_numbers.push_back(s.atom_numbers[static_cast<std::size_t>(i)]);
    sup.atom_numbers.push_back(s.atom_numbers[static_cast<std::size_t>(i)]);
    sup.positions.row(2 * i) = s.positions.row(i);
    sup.positions.row(2 * i + 1) = s.positions.row(i) + s.lattice->row(0);
  }
  r = structure_match(s, sup);
  EXPECT_FALSE(r.matched);
  EXPECT_TRUE(r.composition_ok);
  EXPECT_EQ(r.reason, "atom count");
}

TEST(Matcher, AlternativeCellChoice) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 10; ++t) {
    auto s = testsupport::random_crystal(rng, 4);
    Eigen::Matrix3d u;
    u << 1, 1, 0, 0, 1, 0, 0, 1, 1;  // unimodular
    AtomicSystem alt = s;
    alt.lattice = Lattice(u * *s.lattice);
    alt.positions = wrap_to_cell(s.positions, *alt.lattice);
    auto r = structure_match(s, alt);
    ASSERT_TRUE(r.matched) << r.reason;
    EXPECT_NEAR(*r.site_rmse_normalized, 0.0, 1e-9);
  }
}

TEST(Matcher, SymmetryRotationRelabelScale) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 0.15);
  std::uniform_real_distribution<double> scale(0.5, 3.0);
  int matched = 0, unmatched = 0;
  for (int t = 0; t < 30; ++t) {
    auto a = testsupport::random_crystal(rng, 2 + t % 4, 3.0, 5.0, {3, 8});
    AtomicSystem b = a;
    b.lattice = Lattice(*a.lattice * (Eigen::Matrix3d::Identity() + Eigen::Matrix3d::NullaryExpr([&]() { return 0.3 * n(rng); })));
    const Positions f = cart_to_frac(a.positions, *a.lattice);
    b.positions = frac_to_cart(f, *b.lattice);
    for (Eigen::Index i = 0; i < b.positions.rows(); ++i)
      for (int k = 0; k < 3; ++k) b.positions(i, k) += n(rng);
    const auto ab = structure_match(a, b), ba = structure_match(b, a);
    ASSERT_EQ(ab.matched, ba.matched);
    (ab.matched ? matched : unmatched)++;
    if (ab.matched) {
      EXPECT_NEAR(*ab.site_rmse_normalized, *ba.site_rmse_normalized, 1e-12);
    }

    const auto q = testsupport::random_rotation(rng);
    const auto rot = structure_match(rotated(a, q), shuffled(b, rng));
    ASSERT_EQ(rot.matched, ab.matched);
    if (ab.matched) {
      EXPECT_NEAR(*rot.site_rmse_normalized, *ab.site_rmse_normalized, 1e-9);
    }

    if (ab.matched) {
      const double k = scale(rng);
      AtomicSystem as = a, bs = b;
      as.positions *= k;
      as.lattice = Lattice(*a.lattice * k);
      bs.positions *= k;
      bs.lattice = Lattice(*b.lattice * k);
      const auto sc = structure_match(as, bs);
      ASSERT_TRUE(sc.matched);
      EXPECT_NEAR(*sc.site_rmse_normalized, *ab.site_rmse_normalized, 1e-9);
    }
  }
  // the perturbation size should exercise both outcomes
  EXPECT_GT(matched, 0);
  EXPECT_GT(unmatched, 0);
}

TEST(Matcher, MatchRateSummary) {
  MatchReport a, b, c;
  a.matched = b.matched = true;
  a.site_rmse_normalized = 0.02;
  b.site_rmse_normalized = 0.04;
  auto s = summarize_matches({a, b, c});
  EXPECT_NEAR(s.match_rate_percent, 66.7, 0.05);
  EXPECT_NEAR(*s.mean_rmse, 0.03, 1e-12);
  EXPECT_EQ(s.matched, 2u);

  std::mt19937_64 rng(13);
  std::vector<AtomicSystem> truths, preds;
  for (int i = 0; i < 6; ++i) truths.push_back(testsupport::random_crystal(rng, 3));
  preds = truths;
  auto all = match_rate_and_rmse(preds, truths, {}, 3);
  EXPECT_DOUBLE_EQ(all.match_rate_percent, 100.0);
  EXPECT_NEAR(*all.mean_rmse, 0.0, 1e-9);
  for (int i = 0; i < 3; ++i) {
    preds[static_cast<std::size_t>(i)].positions *= 2.0;
    preds[static_cast<std::size_t>(i)].lattice = Lattice(*truths[static_cast<std::size_t>(i)].lattice * 2.0);
  }
  EXPECT_DOUBLE_EQ(match_rate_and_rmse(preds, truths).match_rate_percent, 50.0);
  EXPECT_THROW(match_rate_and_rmse(preds, {}), std::invalid_argument);
}

TEST(Reports, CsvAndSummary) {
  std::vector<MetricRow> rows = {{"mae_tc", 1.5, 10}, {"r2_tc", 0.9, 10}};
  std::ostringstream out;
  write_metrics_csv(out, rows);
  EXPECT_EQ(out.str(), "metric,value,count\nmae_tc,1.5,10\nr2_tc,0.9,10\n");
  auto j = metrics_summary(rows);
  EXPECT_EQ(j.size(), 2u);
  EXPECT_EQ(j[1]["metric"], "r2_tc");
}
