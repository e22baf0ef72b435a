#include <fstream>
#include <sstream>

#include "rfm/metrics.hpp"
#include "test_util.hpp"

namespace rfm::metrics {
namespace {

using testing::random_tensor;

struct GoldenCase {
  Tensor pred, gt;
  double s, e, f, m;
};

std::vector<GoldenCase> load_goldens() {
  std::ifstream in(std::string(RFM_TEST_DATA_DIR) + "/metric_goldens.txt");
  std::vector<GoldenCase> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    GoldenCase c{Tensor({1, 8, 8}), Tensor({1, 8, 8}), 0, 0, 0, 0};
    for (auto& v : c.pred.storage()) ss >> v;
    for (auto& v : c.gt.storage()) ss >> v;
    ss >> c.s >> c.e >> c.f >> c.m;
    out.push_back(std::move(c));
  }
  return out;
}

Tensor blob_mask(int h, int w, int cy, int cx, int r) {
  Tensor t({1, h, w}, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) t.at(0, y, x) = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r ? 1.0 : 0.0;
  return t;
}

TEST(Goldens, FiftyRandomCasesMatchIndependentOracle) {
  const auto cases = load_goldens();
  ASSERT_EQ(cases.size(), 50u);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    EXPECT_NEAR(s_measure(c.pred, c.gt), c.s, 1e-9) << "case " << i;
    EXPECT_NEAR(adaptive_e_measure(c.pred, c.gt), c.e, 1e-9) << "case " << i;
    EXPECT_NEAR(weighted_f_measure(c.pred, c.gt), c.f, 1e-9) << "case " << i;
    EXPECT_NEAR(mae(c.pred, c.gt), c.m, 1e-12) << "case " << i;
  }
}

TEST(Goldens, AllValuesInUnitInterval) {
  for (const auto& c : load_goldens()) {
    const ImageScores s = score_image(c.pred, c.gt);
    for (double v : {s.s_alpha, s.adaptive_e, s.weighted_f, s.mae}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Mae, ClosedForms) {
  Rng rng(1);
  const Tensor gt = blob_mask(8, 8, 3, 4, 2);
  EXPECT_EQ(mae(gt, gt), 0.0);
  Tensor quarter({1, 8, 8}, 0.0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) quarter.at(0, y, x) = 1.0;
  EXPECT_DOUBLE_EQ(mae(Tensor({1, 8, 8}, 0.0), quarter), 0.25);
  const Tensor p = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
  double s = 0.0;
  for (std::size_t i = 0; i < 64; ++i) s += std::abs(p[i] - gt[i]);
  EXPECT_NEAR(mae(p, gt), s / 64.0, 1e-12);
  EXPECT_THROW(mae(p, Tensor({1, 8, 7})), std::invalid_argument);
}

TEST(SMeasure, SelfSimilarityAndDegenerateMasks) {
  const Tensor gt = blob_mask(8, 8, 3, 4, 2);
  EXPECT_NEAR(s_measure(gt, gt), 1.0, 1e-9);
  EXPECT_EQ(s_measure(Tensor({1, 8, 8}, 0.0), Tensor({1, 8, 8}, 0.0)), 1.0);
  EXPECT_DOUBLE_EQ(s_measure(Tensor({1, 8, 8}, 0.25), Tensor({1, 8, 8}, 0.0)), 0.75);
  EXPECT_DOUBLE_EQ(s_measure(Tensor({1, 8, 8}, 0.25), Tensor({1, 8, 8}, 1.0)), 0.25);
}

TEST(EMeasure, PerfectAndComplement) {
  const Tensor gt = blob_mask(8, 8, 3, 4, 2);
  EXPECT_NEAR(adaptive_e_measure(gt, gt), 1.0, 1e-12);
  Tensor half({1, 8, 8}, 0.0), comp({1, 8, 8}, 0.0);
  for (int i = 0; i < 64; ++i) {
    half[static_cast<std::size_t>(i)] = (i % 8) < 4 ? 1.0 : 0.0;
    comp[static_cast<std::size_t>(i)] = 1.0 - half[static_cast<std::size_t>(i)];
  }
  EXPECT_LE(adaptive_e_measure(comp, half), 0.25);
  // An all-zero prediction marks nothing as foreground.
  EXPECT_DOUBLE_EQ(adaptive_e_measure(Tensor({1, 8, 8}, 0.0), Tensor({1, 8, 8}, 0.0)), 1.0);
}

TEST(WeightedF, PerfectZeroAndEmpty) {
  const Tensor gt = blob_mask(8, 8, 3, 4, 2);
  EXPECT_NEAR(weighted_f_measure(gt, gt), 1.0, 1e-12);
  // Zero recall needs the mask at least 3 px from the border: the dependency
  // kernel is zero-padded, which lowers the blurred error next to the edge.
  EXPECT_NEAR(weighted_f_measure(Tensor({1, 16, 16}, 0.0), blob_mask(16, 16, 8, 8, 3)), 0.0, 1e-12);
  EXPECT_GT(weighted_f_measure(Tensor({1, 8, 8}, 0.0), gt), 0.0);
  EXPECT_EQ(weighted_f_measure(Tensor({1, 8, 8}, 0.3), Tensor({1, 8, 8}, 0.0)), 0.0);
}

TEST(Scores, PerfectPredictionIsOneOneOneZero) {
  for (const Tensor& gt : {blob_mask(8, 8, 3, 4, 2), blob_mask(16, 12, 5, 9, 4), blob_mask(8, 8, 0, 0, 1)}) {
    const ImageScores s = score_image(gt, gt);
    EXPECT_NEAR(s.s_alpha, 1.0, 1e-9);
    EXPECT_NEAR(s.adaptive_e, 1.0, 1e-9);
    EXPECT_NEAR(s.weighted_f, 1.0, 1e-9);
    EXPECT_EQ(s.mae, 0.0);
  }
}

TEST(Scores, OnlyMaeIsPermutationInvariant) {
  Rng rng(2);
  const Tensor gt = blob_mask(8, 8, 3, 3, 2);
  Tensor pred = gt;
  for (auto& v : pred.storage()) v = std::clamp(v * 0.8 + rng.uniform(0.0, 0.2), 0.0, 1.0);
  // One pixel permutation applied to both maps.
  std::vector<int> perm(64);
  for (int i = 0; i < 64; ++i) perm[static_cast<std::size_t>(i)] = (i * 37 + 11) % 64;
  Tensor pp({1, 8, 8}), gp({1, 8, 8});
  for (int i = 0; i < 64; ++i) {
    pp[static_cast<std::size_t>(i)] = pred[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    gp[static_cast<std::size_t>(i)] = gt[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  EXPECT_NEAR(mae(pp, gp), mae(pred, gt), 1e-15);
  EXPECT_GT(std::abs(s_measure(pp, gp) - s_measure(pred, gt)), 1e-3);
  EXPECT_GT(std::abs(weighted_f_measure(pp, gp) - weighted_f_measure(pred, gt)), 1e-3);
  // E is location-sensitive: shifting the prediction one column off the mask.
  Tensor shifted({1, 8, 8}, 0.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 1; x < 8; ++x) shifted.at(0, y, x) = gt.at(0, y, x - 1);
  EXPECT_GT(std::abs(adaptive_e_measure(shifted, gt) - adaptive_e_measure(gt, gt)), 1e-3);
}

TEST(Scores, RejectsInvalidInputs) {
  EXPECT_THROW(score_image(Tensor({1, 4, 4}, 0.5), Tensor({1, 4, 4}, 0.5)), std::invalid_argument);
  EXPECT_THROW(score_image(Tensor({1, 4, 4}, 1.5), Tensor({1, 4, 4}, 0.0)), std::invalid_argument);
  EXPECT_THROW(s_measure(Tensor({2, 4, 4}), Tensor({2, 4, 4})), std::invalid_argument);
}

TEST(Evaluate, MeansCountsAndFormatting) {
  const auto cases = load_goldens();
  std::vector<Tensor> preds, gts;
  std::vector<std::string> names;
  double s = 0, e = 0, f = 0, m = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    preds.push_back(cases[i].pred);
    gts.push_back(cases[i].gt);
    names.push_back("img" + std::to_string(i));
    s += cases[i].s / 5.0;
    e += cases[i].e / 5.0;
    f += cases[i].f / 5.0;
    m += cases[i].m / 5.0;
  }
  const MetricReport r = evaluate(preds, gts, names);
  EXPECT_EQ(r.n_images, 5u);
  ASSERT_EQ(r.per_image.size(), 5u);
  EXPECT_EQ(r.per_image[3].name, "img3");
  EXPECT_NEAR(r.s_alpha, s, 1e-9);
  EXPECT_NEAR(r.adaptive_e, e, 1e-9);
  EXPECT_NEAR(r.weighted_f, f, 1e-9);
  EXPECT_NEAR(r.mae, m, 1e-12);

  const std::string rep = format_report(r);
  EXPECT_NE(rep.find("n_images=5\n"), std::string::npos);
  EXPECT_NE(rep.find("image.img0="), std::string::npos);
  const std::string table = format_table({{"none", r}, {"image", r}});
  std::istringstream ts(table);
  std::string header;
  std::getline(ts, header);
  EXPECT_NE(header.find("S_alpha"), std::string::npos);
  EXPECT_LT(header.find("S_alpha"), header.find("alpha_E"));
  EXPECT_LT(header.find("alpha_E"), header.find("F_w"));
  EXPECT_LT(header.find("F_w"), header.find(" M"));
  std::string row;
  std::getline(ts, row);
  EXPECT_EQ(row.substr(0, 4), "none");
  EXPECT_EQ(row.size(), header.size());

  EXPECT_THROW(evaluate({}, {}), std::invalid_argument);
  EXPECT_THROW(evaluate(preds, {gts[0]}), std::invalid_argument);
}

TEST(Evaluate, ReportIsReproducible) {
  const auto cases = load_goldens();
  std::vector<Tensor> preds, gts;
  for (const auto& c : cases) {
    preds.push_back(c.pred);
    gts.push_back(c.gt);
  }
  EXPECT_EQ(format_report(evaluate(preds, gts)), format_report(evaluate(preds, gts)));
}

}  // namespace
}  // namespace rfm::metrics
