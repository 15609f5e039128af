#include <doctest.h>

#include <vector>

#include "mf/gradcheck_suites.hpp"
#include "mf/loss.hpp"

using namespace mf;

namespace {

Tensor<double> rand_t(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> d(static_cast<std::size_t>(numel_of(s)));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor<double>::from_vector(std::move(s), std::move(d));
}

}  // namespace

TEST_SUITE_BEGIN("loss");

TEST_CASE("normalized_masked_l1 basics") {
  Rng rng(1);
  auto f = rand_t({1, 2, 3, 3}, rng);
  auto ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);

  // identical features, full masks -> 0
  CHECK(normalized_masked_l1(f, f, ones, ones).item() == doctest::Approx(0.0));

  // |F' - F| = 2 everywhere, masks = 1 -> weighted mean = 2 per channel pair
  auto f2 = add(f, Tensor<double>::scalar(2.0));
  // single channel so the sum over channels matches the pixel-count denominator
  auto g = rand_t({1, 1, 3, 3}, rng);
  auto g2 = add(g, Tensor<double>::scalar(2.0));
  CHECK(normalized_masked_l1(g2, g, ones, ones).item() ==
        doctest::Approx(2.0).epsilon(1e-6));

  // hand-summed oracle: 2x2, F' = [[1,0],[0,0]], F = 0, M'M = [[1,0],[0,1]]
  auto fw = Tensor<double>::from_vector({1, 1, 2, 2}, {1, 0, 0, 0});
  auto ft = Tensor<double>::zeros({1, 1, 2, 2});
  auto mw = Tensor<double>::from_vector({1, 1, 2, 2}, {1, 0, 0, 1});
  auto mt = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  CHECK(normalized_masked_l1(fw, ft, mw, mt).item() ==
        doctest::Approx(0.5).epsilon(1e-6));

  CHECK_THROWS_AS(normalized_masked_l1(f, g, ones, ones), ShapeError);
  CHECK_THROWS_AS(
      normalized_masked_l1(f, f, ones, Tensor<double>::full({1, 1, 2, 2}, 1.0)),
      ShapeError);
}

TEST_CASE("normalized_masked_l1 is invariant to common mask scaling") {
  Rng rng(2);
  auto fw = rand_t({2, 3, 4, 4}, rng);
  auto ft = rand_t({2, 3, 4, 4}, rng);
  auto mw = rand_t({2, 1, 4, 4}, rng, 0.1, 1.0);
  auto mt = rand_t({2, 1, 4, 4}, rng, 0.1, 1.0);
  const double base = normalized_masked_l1(fw, ft, mw, mt).item();
  for (double scale : {0.25, 0.9}) {
    auto mws = mul(mw, Tensor<double>::scalar(scale));
    auto mts = mul(mt, Tensor<double>::scalar(scale));
    const double scaled = normalized_masked_l1(fw, ft, mws, mts).item();
    CHECK(scaled == doctest::Approx(base).epsilon(1e-6));
  }
}

TEST_CASE("normalized_masked_l1 survives empty masks via eps") {
  Rng rng(3);
  auto fw = rand_t({1, 1, 2, 2}, rng);
  auto ft = rand_t({1, 1, 2, 2}, rng);
  auto zero = Tensor<double>::zeros({1, 1, 2, 2});
  CHECK(normalized_masked_l1(fw, ft, zero, zero).item() == doctest::Approx(0.0));
}

TEST_CASE("feature_distance basics and scalar-loop oracle") {
  Rng rng(4);
  auto fa = rand_t({1, 2, 3, 3}, rng);
  CHECK(feature_distance(fa, fa).item() == doctest::Approx(0.0));

  auto fb = add(fa, Tensor<double>::scalar(-3.0));
  CHECK(feature_distance(fa, fb).item() == doctest::Approx(3.0));

  auto fc = rand_t({1, 2, 3, 3}, rng);
  double expect = 0;
  for (std::size_t i = 0; i < fa.values().size(); ++i) {
    expect += std::abs(fa.values()[i] - fc.values()[i]);
  }
  CHECK(feature_distance(fa, fc, Reduction::sum).item() ==
        doctest::Approx(expect).epsilon(1e-12));
  CHECK(feature_distance(fa, fc, Reduction::mean).item() ==
        doctest::Approx(expect / 18.0).epsilon(1e-12));
}

TEST_CASE("total_loss: identity instance vanishes with lambda=mu=0") {
  Rng rng(5);
  const GridSpec grid{2, 2, 8, 8};
  RegistrationOutput<double> out;
  out.grid = grid;
  out.feat_a = rand_t({1, 2, 8, 8}, rng);
  out.feat_b = out.feat_a;
  out.warped_feat_a = out.feat_a;
  out.warped_feat_b = out.feat_a;
  out.mask_a = Tensor<double>::full({1, 1, 8, 8}, 1.0);
  out.mask_b = out.mask_a;
  out.warped_mask_a = out.mask_a;
  out.warped_mask_b = out.mask_a;
  out.mesh_ab = mesh_to_tensor<double>(MeshFlow::zero(grid));
  out.mesh_ba = out.mesh_ab;

  LossConfig cfg;
  cfg.lambda = 0;
  cfg.mu = 0;
  auto b = total_loss(out, cfg);
  CHECK(b.total_value == doctest::Approx(0.0));
  CHECK(b.inv_consistency == 0.0);  // zero meshes: exact
}

TEST_CASE("total_loss matches independently recomputed components") {
  Rng rng(6);
  const GridSpec grid{2, 2, 8, 8};
  RegistrationOutput<double> out;
  out.grid = grid;
  out.feat_a = rand_t({1, 2, 8, 8}, rng);
  out.feat_b = rand_t({1, 2, 8, 8}, rng);
  out.warped_feat_a = rand_t({1, 2, 8, 8}, rng);
  out.warped_feat_b = rand_t({1, 2, 8, 8}, rng);
  out.mask_a = rand_t({1, 1, 8, 8}, rng, 0.2, 1.0);
  out.mask_b = rand_t({1, 1, 8, 8}, rng, 0.2, 1.0);
  out.warped_mask_a = rand_t({1, 1, 8, 8}, rng, 0.2, 1.0);
  out.warped_mask_b = rand_t({1, 1, 8, 8}, rng, 0.2, 1.0);
  MeshFlow ma = MeshFlow::zero(grid);
  MeshFlow mb = MeshFlow::zero(grid);
  for (Vec2& v : ma.motions) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  for (Vec2& v : mb.motions) v = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
  out.mesh_ab = mesh_to_tensor<double>(ma);
  out.mesh_ba = mesh_to_tensor<double>(mb);

  LossConfig cfg;  // lambda 2.0, mu 0.01
  auto b = total_loss(out, cfg);

  const double ln_ab = normalized_masked_l1(out.warped_feat_a, out.feat_b,
                                            out.warped_mask_a, out.mask_b)
                           .item();
  const double ln_ba = normalized_masked_l1(out.warped_feat_b, out.feat_a,
                                            out.warped_mask_b, out.mask_a)
                           .item();
  const double lf = feature_distance(out.feat_a, out.feat_b).item();
  const double inv = inverse_consistency_residual(mesh_to_homographies(ma),
                                                  mesh_to_homographies(mb));
  CHECK(b.ln_ab == doctest::Approx(ln_ab).epsilon(1e-12));
  CHECK(b.ln_ba == doctest::Approx(ln_ba).epsilon(1e-12));
  CHECK(b.l_feat == doctest::Approx(lf).epsilon(1e-12));
  CHECK(b.inv_consistency == doctest::Approx(inv).epsilon(1e-9));
  CHECK(b.total_value ==
        doctest::Approx(ln_ab + ln_ba - 2.0 * lf + 0.01 * inv).epsilon(1e-6));
  CHECK(b.assembly_residual(cfg) < 1e-6);
}

TEST_CASE("mask ablation reduces the loss to the plain mean form") {
  Rng rng(7);
  auto cfg = tiny_model_config();
  cfg.mask_enabled = false;
  auto params = Parameters<double>::init(cfg, 13);
  std::vector<double> d(3 * 16 * 16);
  for (double& v : d) v = rng.uniform(0, 1);
  auto ia = Tensor<double>::from_vector({1, 3, 16, 16}, d);
  for (double& v : d) v = rng.uniform(0, 1);
  auto ib = Tensor<double>::from_vector({1, 3, 16, 16}, d);

  auto out = forward(ia, ib, params, cfg, RunMode::train);
  LossConfig lcfg;
  auto b = total_loss(out, lcfg);

  // denominators are the pixel count: Ln == sum|F' - F| / (N*H*W + eps),
  // except where the warped ones-mask is zero (out-of-bounds fill)
  auto diff = abs_op(sub(out.warped_feat_a, out.feat_b));
  const double masked_sum =
      sum(mul(mul(out.warped_mask_a, out.mask_b), diff)).item();
  const double denom = sum(mul(out.warped_mask_a, out.mask_b)).item();
  CHECK(b.ln_ab == doctest::Approx(masked_sum / (denom + 1e-8)).epsilon(1e-9));
  CHECK(denom <= 16.0 * 16.0 + 1e-9);  // ones everywhere in-bounds
}

TEST_CASE("total_loss gradients pass the tiny-model finite-difference check") {
  auto results = gradcheck_model_suite(1e-3, 1e-5);
  for (const auto& r : results) {
    INFO(r.name, ": max_rel=", r.report.max_rel_err, " max_abs=",
         r.report.max_abs_err, " ", r.report.worst);
    CHECK(r.report.pass);
  }
}

TEST_SUITE_END();
