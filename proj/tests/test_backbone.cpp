#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "clims/backbone.hpp"
#include "clims/rng.hpp"
#include "testutil.hpp"

using namespace clims;

namespace {

FeatureMap random_features(int channels, int h, int w, Rng& rng, real scale = 1.0) {
  FeatureMap z = make_planes<real>(channels, h, w);
  for (Eigen::Index i = 0; i < z.values.rows(); ++i)
    for (Eigen::Index j = 0; j < z.values.cols(); ++j) z.values(i, j) = rng.uniform(-scale, scale);
  return z;
}

Mat random_weights(int c, int k, Rng& rng) {
  Mat w(c, k);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-1.0, 1.0);
  return w;
}

}  // namespace

TEST_CASE("sigmoid head: zeros give exactly 0.5") {
  FeatureMap z = make_planes<real>(4, 3, 3, 0.0);
  const Mat w = Mat::Ones(4, 2);
  const ActivationMaps p = activation_head(z, w);
  CHECK((p.values.array() == 0.5).all());
}

TEST_CASE("sigmoid head: direct value and numeric guards") {
  FeatureMap z = make_planes<real>(1, 1, 1, 2.0);
  Mat w = Mat::Ones(1, 1);
  CHECK(activation_head(z, w).values(0, 0) == doctest::Approx(0.88079707797788).epsilon(1e-9));

  z.values(0, 0) = -50.0;
  const real tiny = activation_head(z, w).values(0, 0);
  CHECK(tiny > 0.0);
  CHECK(tiny < 1e-20);
  z.values(0, 0) = 50.0;
  CHECK(activation_head(z, w).values(0, 0) < 1.0);
  CHECK(stable_sigmoid(800.0) < 1.0);  // saturates without overflow or rounding to 1
  CHECK(stable_sigmoid(800.0) > 0.99);
  CHECK(stable_sigmoid(-800.0) > 0.0);
}

TEST_CASE("sigmoid head output strictly inside (0,1) for random inputs") {
  Rng rng(11);
  FeatureMap z = random_features(6, 5, 5, rng, 20.0);
  const Mat w = random_weights(6, 3, rng);
  const ActivationMaps p = activation_head(z, w);
  CHECK((p.values.array() > 0.0).all());
  CHECK((p.values.array() < 1.0).all());
}

TEST_CASE("conventional cam: identity weights pick channels") {
  Rng rng(5);
  FeatureMap z = random_features(3, 4, 4, rng);
  const Mat w = Mat::Identity(3, 3);
  const ActivationMaps cam = conventional_cam(z, w);
  CHECK((cam.values - z.values).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("conventional cam equals brute-force dot product") {
  Rng rng(7);
  for (int trial = 0; trial < 16; ++trial) {
    const int c = 1 + static_cast<int>(rng.uniform_int(0, 7));
    const int k = 1 + static_cast<int>(rng.uniform_int(0, 3));
    const int h = 1 + static_cast<int>(rng.uniform_int(0, 7));
    const int w = 1 + static_cast<int>(rng.uniform_int(0, 7));
    FeatureMap z = random_features(c, h, w, rng);
    const Mat weights = random_weights(c, k, rng);
    const ActivationMaps cam = conventional_cam(z, weights);
    for (int kk = 0; kk < k; ++kk)
      for (int p = 0; p < h * w; ++p) {
        real dot = 0;
        for (int cc = 0; cc < c; ++cc) dot += weights(cc, kk) * z.values(cc, p);
        CHECK(std::abs(cam.values(kk, p) - dot) <= 1e-12);
      }
  }
}

TEST_CASE("conventional cam: zero features give zero maps") {
  FeatureMap z = make_planes<real>(4, 2, 2, 0.0);
  Rng rng(2);
  const Mat w = random_weights(4, 2, rng);
  CHECK(conventional_cam(z, w).values.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("heads reject mismatched shapes") {
  FeatureMap z = make_planes<real>(4, 2, 2, 0.0);
  const Mat w = Mat::Ones(5, 2);
  CHECK_THROWS_AS(activation_head(z, w), ValidationError);
  CHECK_THROWS_AS(conventional_cam(z, w), ValidationError);
  CHECK_THROWS_AS(baseline_logits(z, w), ValidationError);
}

TEST_CASE("baseline logits: constant features reduce to a single dot product") {
  FeatureMap z = make_planes<real>(3, 4, 4, 0.0);
  z.values.row(0).setConstant(0.5);
  z.values.row(1).setConstant(-1.5);
  z.values.row(2).setConstant(2.0);
  Mat w(3, 1);
  w << 1.0, 2.0, 0.25;
  const ClassLogits y = baseline_logits(z, w);
  CHECK(y[0] == doctest::Approx(0.5 - 3.0 + 0.5).epsilon(1e-12));
}

TEST_CASE("baseline logits equal the spatial mean of the conventional cam") {
  Rng rng(13);
  FeatureMap z = random_features(8, 6, 7, rng);
  const Mat w = random_weights(8, 4, rng);
  const ClassLogits y = baseline_logits(z, w);
  const ActivationMaps cam = conventional_cam(z, w);
  for (int k = 0; k < 4; ++k) CHECK(std::abs(y[k] - cam.values.row(k).mean()) < 1e-10);
  FeatureMap zero = make_planes<real>(8, 6, 7, 0.0);
  CHECK(baseline_logits(zero, w).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("bce loss: exact values") {
  LabelVector one(1);
  one << 1;
  Vec z0(1);
  z0 << 0.0;
  CHECK(baseline_bce_loss(z0, one) == doctest::Approx(0.6931471805599453).epsilon(1e-9));

  Vec big(1);
  big << 50.0;
  const real saturated = baseline_bce_loss(big, one);
  CHECK(saturated == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(std::isfinite(saturated));

  LabelVector y2(2);
  y2 << 1, 0;
  Vec z2 = Vec::Zero(2);
  CHECK(baseline_bce_loss(z2, y2) == doctest::Approx(2 * 0.6931471805599453).epsilon(1e-9));
}

TEST_CASE("bce gradient matches finite differences") {
  Rng rng(3);
  LabelVector y(3);
  y << 1, 0, 1;
  Mat logits(3, 1);
  for (int i = 0; i < 3; ++i) logits(i, 0) = rng.uniform(-2, 2);
  const Vec analytic = baseline_bce_grad(logits.col(0), y);
  const Mat fd = testutil::fd_gradient(logits, [&] { return baseline_bce_loss(logits.col(0), y); });
  CHECK(testutil::grad_close(analytic, fd.col(0), 1e-6, 1e-9));
}

TEST_CASE("upsample: constants, identity, hand-computed 2x2 -> 2x4") {
  PlaneStack flat = make_planes<real>(2, 3, 3, 0.75);
  const PlaneStack up = upsample_maps(flat, 9, 12);
  CHECK(up.height == 9);
  CHECK((up.values.array() == 0.75).all());

  PlaneStack src = make_planes<real>(1, 2, 2);
  src.values << 0.1, 0.9, 0.4, 0.2;
  const PlaneStack same = upsample_maps(src, 2, 2);
  CHECK((same.values - src.values).cwiseAbs().maxCoeff() == 0.0);

  PlaneStack ramp = make_planes<real>(1, 2, 2);
  ramp.values << 0.0, 1.0, 0.0, 1.0;  // rows [0,1],[0,1]
  const PlaneStack wide = upsample_maps(ramp, 2, 4);
  const real expected[4] = {0.0, 0.25, 0.75, 1.0};
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x)
      CHECK(wide.values(0, y * 4 + x) == doctest::Approx(expected[x]).epsilon(1e-12));
}

TEST_CASE("upsample: range preservation and shrink rejection") {
  Rng rng(17);
  PlaneStack src = testutil::random_logits(3, 4, 5, rng, 1.0);
  const PlaneStack up = upsample_maps(src, 13, 17);
  CHECK(up.values.maxCoeff() <= src.values.maxCoeff() + 1e-12);
  CHECK(up.values.minCoeff() >= src.values.minCoeff() - 1e-12);
  CHECK_THROWS_AS(upsample_maps(src, 3, 5), ValidationError);
  CHECK_THROWS_AS(upsample_maps(src, 4, 4), ValidationError);
}

TEST_CASE("upsample adjoint agrees with the forward map (linear operator pairing)") {
  // <A x, y> == <x, A^T y> for random x, y
  Rng rng(23);
  PlaneStack x = testutil::random_logits(2, 3, 4, rng, 1.0);
  const PlaneStack ax = upsample_maps(x, 7, 9);
  Mat y(2, 7 * 9);
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i / y.cols(), i % y.cols()) = rng.uniform(-1, 1);
  const Mat aty = upsample_maps_adjoint(y, 3, 4, 7, 9);
  const real lhs = (ax.values.array() * y.array()).sum();
  const real rhs = (x.values.array() * aty.array()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("forward_features: determinism, zero final layer, shape contract") {
  BackboneParams params = init_backbone(2, 9);
  Rng rng(31);
  Image img = make_image<real>(64, 64);
  for (int p = 0; p < img.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c) img.rgb(p, c) = rng.uniform(0.0, 1.0);

  const FeatureMap a = forward_features(params, img);
  const FeatureMap b = forward_features(params, img);
  CHECK((a.values - b.values).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.values.rows() == 32);
  CHECK(a.height == 16);
  CHECK(a.width == 16);

  // zero image through a zero final layer -> zero feature map
  params.convs.back().weight.setZero();
  params.convs.back().bias.setZero();
  const FeatureMap z = forward_features(params, make_image<real>(32, 32, 0.0));
  CHECK(z.values.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward_features rejects undersized and invalid images") {
  const BackboneParams params = init_backbone(2, 1);
  CHECK_THROWS_AS(forward_features(params, make_image<real>(4, 64, 0.5)), ValidationError);
  CHECK_THROWS_AS(forward_features(params, make_image<real>(64, 7, 0.5)), ValidationError);
  Image bad = make_image<real>(16, 16, 0.5);
  bad.rgb(3, 1) = 1.5;
  CHECK_THROWS_AS(forward_features(params, bad), ValidationError);
  CHECK_THROWS_AS(forward_features(BackboneParams{}, make_image<real>(16, 16, 0.5)),
                  ValidationError);
}

TEST_CASE("sigmoid head gradient wrt class weights matches finite differences") {
  Rng rng(41);
  for (int trial = 0; trial < 4; ++trial) {
    FeatureMap z = random_features(5, 4, 4, rng);
    Mat w = random_weights(5, 2, rng);
    Mat probe(2, 16);
    for (Eigen::Index i = 0; i < probe.rows(); ++i)
      for (Eigen::Index j = 0; j < probe.cols(); ++j) probe(i, j) = rng.uniform(-1, 1);

    const auto loss = [&] {
      const ActivationMaps p = activation_head(z, w);
      return (p.values.array() * probe.array()).sum();
    };
    // analytic: dL/dA = probe .* sigmoid'(A)
    const ActivationMaps p = activation_head(z, w);
    const Mat da = probe.array() * (p.values.array() * (1 - p.values.array()));
    Mat head_grad = Mat::Zero(5, 2);
    head_backward(z, w, da, head_grad);
    const Mat fd = testutil::fd_gradient(w, loss);
    real worst = 0;
    CHECK(testutil::grad_close(head_grad, fd, 1e-4, 1e-10, &worst));
    CAPTURE(worst);
  }
}

TEST_CASE("full backbone parameter gradient matches a finite-difference probe") {
  // scalar probe of the feature map, differentiated through all four layers
  Rng rng(43);
  BackboneParams params = init_backbone(1, 51);
  Image img = make_image<real>(8, 8);
  for (int p = 0; p < img.pixel_count(); ++p)
    for (int c = 0; c < 3; ++c) img.rgb(p, c) = rng.uniform(0.0, 1.0);
  Mat probe(32, 4);
  for (Eigen::Index i = 0; i < probe.rows(); ++i)
    for (Eigen::Index j = 0; j < probe.cols(); ++j) probe(i, j) = rng.uniform(-1, 1);

  const auto loss = [&] {
    return (forward_features(params, img).values.array() * probe.array()).sum();
  };
  ForwardCache cache;
  forward_features(params, img, &cache);
  BackboneTensors grads = zeros_like(params);
  backward_features(params, cache, probe, grads);

  for (int li = 0; li < 4; ++li) {
    const Mat fd = testutil::fd_gradient(params.convs[li].weight, loss, 1e-6);
    real worst = 0;
    const bool ok = testutil::grad_close(grads.conv_weight[li], fd, 1e-4, 1e-8, &worst);
    CAPTURE(li);
    CAPTURE(worst);
    CHECK(ok);
  }
}
