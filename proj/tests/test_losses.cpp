#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "clims/backbone.hpp"
#include "clims/losses.hpp"
#include "testutil.hpp"

using namespace clims;

namespace {

// Fixture shared by the gradient checks: 3 classes named after the test
// concepts, with 0/1/2 background prompts.
struct LossFixture {
  SyntheticMatcher matcher;
  PromptBook book;

  LossFixture()
      : matcher(testutil::make_test_concept_table()),
        book(build_prompt_book({"amber", "cobalt", "moss"},
                               {{"amber", {"moss", "cobalt"}}, {"cobalt", {"moss"}}},
                               "a photo of {}")) {}
};

bool similarities_off_clamp(const SimilarityBundle& bundle, const LabelVector& y, real eps) {
  for (Eigen::Index k = 0; k < y.size(); ++k) {
    if (y[k] != 1) continue;
    const auto inside = [&](real s) { return s > 4 * eps && s < 1.0 - 4 * eps; };
    if (!inside(bundle.s_oo[k]) || !inside(bundle.s_bo[k])) return false;
    for (int l = 0; l < bundle.background_counts[static_cast<std::size_t>(k)]; ++l)
      if (!inside(bundle.s_ob(k, l))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("mask_out: identity, zero, partition of unity, size checks") {
  Rng rng(3);
  Image img = make_image<real>(8, 8);
  for (int p = 0; p < 64; ++p)
    for (int c = 0; c < 3; ++c) img.rgb(p, c) = rng.uniform(0.0, 1.0);

  CHECK((mask_out(img, Vec::Ones(64)).rgb - img.rgb).cwiseAbs().maxCoeff() == 0.0);
  CHECK(mask_out(img, Vec::Zero(64)).rgb.cwiseAbs().maxCoeff() == 0.0);

  Vec soft(64);
  for (int p = 0; p < 64; ++p) soft[p] = rng.uniform(0.0, 1.0);
  const Image fg = mask_out(img, soft);
  const Image bg = mask_out(img, Vec(Vec::Ones(64) - soft));
  CHECK((fg.rgb + bg.rgb - img.rgb).cwiseAbs().maxCoeff() < 1e-15);

  CHECK_THROWS_AS(mask_out(img, Vec::Ones(63)), ValidationError);
  Vec bad = Vec::Ones(64);
  bad[5] = 1.5;
  CHECK_THROWS_AS(mask_out(img, bad), ValidationError);
}

TEST_CASE("clamp_similarity") {
  CHECK(clamp_similarity(-0.2, 1e-4) == doctest::Approx(1e-4));
  CHECK(clamp_similarity(1.0, 1e-4) == doctest::Approx(0.9999));
  CHECK(clamp_similarity(0.5, 1e-4) == doctest::Approx(0.5));
  CHECK_THROWS_AS(clamp_similarity(0.5, 0.7), ValidationError);
  CHECK_THROWS_AS(clamp_similarity(0.5, 0.0), ValidationError);
}

TEST_CASE("otm_loss: exact values, absent classes ignored") {
  LabelVector y1(1);
  y1 << 1;
  Vec s(1);
  s << 0.9999;
  CHECK(otm_loss(s, y1) == doctest::Approx(1.0e-4).epsilon(1e-3));
  s << 0.5;
  CHECK(otm_loss(s, y1) == doctest::Approx(0.6931471805599453).epsilon(1e-9));

  LabelVector y2(2);
  y2 << 1, 0;
  Vec s2(2);
  s2 << 0.8, 0.1;
  CHECK(otm_loss(s2, y2) == doctest::Approx(0.2231435513).epsilon(1e-6));
}

TEST_CASE("btm_loss: exact values") {
  LabelVector y(1);
  y << 1;
  Vec s(1);
  s << 1e-4;
  CHECK(btm_loss(s, y) == doctest::Approx(1.0e-4).epsilon(1e-3));
  s << 0.5;
  CHECK(btm_loss(s, y) == doctest::Approx(0.6931471805599453).epsilon(1e-9));
  LabelVector off(1);
  off << 0;
  s << 0.97;
  CHECK(btm_loss(s, off) == 0.0);
}

TEST_CASE("cbs_loss: exact values, empty background sets contribute zero") {
  LabelVector y1(1);
  y1 << 1;
  Mat s(1, 2);
  s << 0.5, 0.5;
  CHECK(cbs_loss(s, y1, {2}) == doctest::Approx(2 * 0.6931471805599453).epsilon(1e-9));
  CHECK(cbs_loss(s, y1, {0}) == 0.0);

  LabelVector y2(2);
  y2 << 1, 1;
  Mat s2 = Mat::Zero(2, 1);
  s2(0, 0) = 0.5;
  s2(1, 0) = 1e-4;
  CHECK(cbs_loss(s2, y2, {1, 1}) == doctest::Approx(0.6932471805599).epsilon(1e-6));
}

TEST_CASE("area regularization: exact values and brute-force oracle") {
  ActivationMaps ones = make_planes<real>(3, 4, 4, 1.0);
  CHECK(area_regularization(ones).first == doctest::Approx(1.0));

  ActivationMaps half = make_planes<real>(2, 4, 4, 0.5);
  const auto [mean_half, s_half] = area_regularization(half);
  CHECK(mean_half == doctest::Approx(0.5));
  CHECK(s_half[0] == doctest::Approx(0.5));
  CHECK(s_half[1] == doctest::Approx(0.5));

  ActivationMaps split = make_planes<real>(2, 4, 4, 0.0);
  split.values.row(0).setOnes();
  CHECK(area_regularization(split).first == doctest::Approx(0.5));

  Rng rng(8);
  ActivationMaps random_maps = make_planes<real>(3, 5, 7, 0.0);
  for (Eigen::Index i = 0; i < random_maps.values.rows(); ++i)
    for (Eigen::Index j = 0; j < random_maps.values.cols(); ++j)
      random_maps.values(i, j) = rng.uniform(0.0, 1.0);
  const auto [mean_r, s_r] = area_regularization(random_maps);
  for (int k = 0; k < 3; ++k) {
    real acc = 0;
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 7; ++x) acc += random_maps.values(k, y * 7 + x);
    CHECK(std::abs(s_r[k] - acc / 35.0) <= 1e-12);
  }
  CHECK(std::abs(mean_r - s_r.mean()) <= 1e-12);
}

TEST_CASE("total loss: published default weights") {
  const LossWeights w;  // 10, 25, 29.5, 1.15
  CHECK(total_loss(0.1, 0.2, 0.05, 0.5, w) == doctest::Approx(8.05).epsilon(1e-12));
  CHECK(total_loss(0, 0, 0, 0, w) == 0.0);
  CHECK(total_loss(0.37, 0.11, 0.93, 0.21, {1, 0, 0, 0}) == doctest::Approx(0.37));
}

TEST_CASE("batch loss: all-absent labels leave only the area term") {
  const LossFixture fx;
  Rng rng(4);
  const Image img = testutil::random_concept_image(fx.matcher.table(), 8, 8, rng);
  ActivationMaps maps = make_planes<real>(3, 8, 8, 0.25);
  const LabelVector y = LabelVector::Zero(3);

  const auto result =
      clims_batch_loss({img}, {y}, {maps}, fx.book, fx.matcher, LossWeights{}, 1e-4);
  CHECK(result.breakdown.otm == 0.0);
  CHECK(result.breakdown.btm == 0.0);
  CHECK(result.breakdown.cbs == 0.0);
  CHECK(result.breakdown.reg == doctest::Approx(0.25));
  CHECK(result.breakdown.total == doctest::Approx(1.15 * 0.25));
}

TEST_CASE("batch loss: full foreground mask sends the background region to the null branch") {
  const LossFixture fx;
  Rng rng(5);
  const Image img = testutil::random_concept_image(fx.matcher.table(), 8, 8, rng);
  // map of exactly 1 would be rejected for a sigmoid output; emulate with the
  // closest representable value
  const real almost_one = 1.0 - 1e-12;
  ActivationMaps maps = make_planes<real>(3, 8, 8, almost_one);
  LabelVector y(3);
  y << 1, 0, 0;

  const real eps = 1e-4;
  const auto result = clims_batch_loss({img}, {y}, {maps}, fx.book, fx.matcher, LossWeights{}, eps);
  CHECK(result.per_image[0].s_bo[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(result.breakdown.btm == doctest::Approx(-std::log(1.0 - eps)).epsilon(1e-6));
}

TEST_CASE("batch loss: duplicating an image leaves the mean unchanged") {
  const LossFixture fx;
  Rng rng(6);
  const Image img = testutil::random_concept_image(fx.matcher.table(), 8, 8, rng);
  PlaneStack logits = testutil::random_logits(3, 2, 2, rng);
  ActivationMaps maps = logits;
  maps.values = maps.values.unaryExpr([](real v) { return stable_sigmoid(v); });
  maps = upsample_maps(maps, 8, 8);
  LabelVector y(3);
  y << 1, 1, 0;

  const auto one = clims_batch_loss({img}, {y}, {maps}, fx.book, fx.matcher, LossWeights{}, 1e-4);
  const auto two = clims_batch_loss({img, img}, {y, y}, {maps, maps}, fx.book, fx.matcher,
                                    LossWeights{}, 1e-4);
  CHECK(two.breakdown.total == doctest::Approx(one.breakdown.total).epsilon(1e-12));
  CHECK(two.breakdown.otm == doctest::Approx(one.breakdown.otm).epsilon(1e-12));
  CHECK(two.breakdown.reg == doctest::Approx(one.breakdown.reg).epsilon(1e-12));
}

TEST_CASE("batch loss: label vector longer than the prompt book is rejected") {
  const LossFixture fx;
  Rng rng(7);
  const Image img = testutil::random_concept_image(fx.matcher.table(), 8, 8, rng);
  ActivationMaps maps = make_planes<real>(4, 8, 8, 0.5);
  const LabelVector y = LabelVector::Ones(4);
  CHECK_THROWS_AS(
      clims_batch_loss({img}, {y}, {maps}, fx.book, fx.matcher, LossWeights{}, 1e-4),
      ValidationError);
}

TEST_CASE("loss monotonicity in the similarities") {
  LabelVector y(1);
  y << 1;
  real prev_otm = 1e9, prev_btm = -1, prev_cbs = -1;
  for (real s = 0.1; s < 0.95; s += 0.1) {
    Vec sv(1);
    sv << s;
    Mat sm(1, 1);
    sm << s;
    const real otm = otm_loss(sv, y);
    const real btm = btm_loss(sv, y);
    const real cbs = cbs_loss(sm, y, {1});
    CHECK(otm < prev_otm);   // strictly decreasing in s_oo
    CHECK(btm > prev_btm);   // strictly increasing in s_bo
    CHECK(cbs > prev_cbs);   // strictly increasing in s_ob
    prev_otm = otm;
    prev_btm = btm;
    prev_cbs = cbs;
  }
}

TEST_CASE("loss values stay nonnegative and finite after clamping") {
  const LossFixture fx;
  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    const Image img = testutil::random_concept_image(fx.matcher.table(), 8, 8, rng);
    PlaneStack logits = testutil::random_logits(3, 2, 2, rng, 6.0);
    ActivationMaps maps = logits;
    maps.values = maps.values.unaryExpr([](real v) { return stable_sigmoid(v); });
    maps = upsample_maps(maps, 8, 8);
    LabelVector y(3);
    for (int k = 0; k < 3; ++k) y[k] = rng.bernoulli(0.7) ? 1 : 0;
    const auto result =
        clims_batch_loss({img}, {y}, {maps}, fx.book, fx.matcher, LossWeights{}, 1e-4);
    for (real v : {result.breakdown.otm, result.breakdown.btm, result.breakdown.cbs,
                   result.breakdown.reg, result.breakdown.total}) {
      CHECK(v >= 0.0);
      CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("zero-label classes receive exactly zero matching gradient") {
  const LossFixture fx;
  Rng rng(10);
  const Image img = testutil::random_concept_image(fx.matcher.table(), 8, 8, rng);
  const PlaneStack logits = testutil::random_logits(3, 2, 2, rng);
  LabelVector y(3);
  y << 1, 0, 1;

  // matching losses only (delta = 0 removes the label-independent area term)
  const LossWeights matching_only{10.0, 25.0, 29.5, 0.0};
  Mat grad;
  clims_loss_from_logits(logits, img, y, fx.book, fx.matcher, matching_only, 1e-4, &grad);
  CHECK(grad.row(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grad.row(0).cwiseAbs().maxCoeff() > 0.0);
  CHECK(grad.row(2).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("gradient wrt activation-map logits matches finite differences (per loss and total)") {
  const LossFixture fx;
  Rng rng(2024);
  const std::vector<std::pair<std::string, LossWeights>> parts = {
      {"otm", {1, 0, 0, 0}},   {"btm", {0, 1, 0, 0}},      {"cbs", {0, 0, 1, 0}},
      {"reg", {0, 0, 0, 1}},   {"total", {10, 25, 29.5, 1.15}},
  };

  int instances = 0;
  int attempts = 0;
  while (instances < 5 && attempts < 50) {
    ++attempts;
    const Image img = testutil::random_concept_image(fx.matcher.table(), 8, 8, rng);
    PlaneStack logits = testutil::random_logits(3, 2, 2, rng);
    LabelVector y(3);
    for (int k = 0; k < 3; ++k) y[k] = rng.bernoulli(0.8) ? 1 : 0;
    if (y.sum() == 0) continue;

    // keep every similarity away from the clamp boundary so the finite
    // difference probes the smooth branch
    const auto probe = clims_batch_loss(
        {img}, {y}, {upsample_maps([&] {
           PlaneStack p = logits;
           p.values = p.values.unaryExpr([](real v) { return stable_sigmoid(v); });
           return p;
         }(), 8, 8)},
        fx.book, fx.matcher, LossWeights{}, 1e-4);
    if (!similarities_off_clamp(probe.per_image[0], y, 1e-4)) continue;
    ++instances;

    for (const auto& [name, weights] : parts) {
      Mat analytic;
      clims_loss_from_logits(logits, img, y, fx.book, fx.matcher, weights, 1e-4, &analytic);
      const Mat fd = testutil::fd_gradient(logits.values, [&] {
        return clims_loss_from_logits(logits, img, y, fx.book, fx.matcher, weights, 1e-4).total;
      });
      real worst = 0;
      const bool ok = testutil::grad_close(analytic, fd, 1e-4, 1e-9, &worst);
      CAPTURE(name);
      CAPTURE(worst);
      CHECK(ok);
    }
  }
  CHECK(instances == 5);
}
