#include <doctest.h>

#include <cmath>
#include <vector>

#include "mf/geometry.hpp"
#include "mf/gradcheck_suites.hpp"
#include "mf/rng.hpp"
#include "mf/warp.hpp"

using namespace mf;

namespace {

MeshFlow translation_mesh(const GridSpec& spec, double tx, double ty) {
  MeshFlow m = MeshFlow::zero(spec);
  for (Vec2& v : m.motions) v = {tx, ty};
  return m;
}

MeshFlow global_h_mesh(const GridSpec& spec, const Homography& h) {
  MeshFlow m = MeshFlow::zero(spec);
  for (int v = 0; v < spec.vertex_rows(); ++v) {
    for (int u = 0; u < spec.vertex_cols(); ++u) {
      const Vec2 p = spec.vertex_pos(v, u);
      m.motion(v, u) = h.apply(p) - p;
    }
  }
  return m;
}

Homography random_small_h(Rng& rng, const GridSpec& spec, double max_disp) {
  const std::array<Vec2, 4> corners = {Vec2{0, 0}, Vec2{spec.image_w, 0},
                                       Vec2{spec.image_w, spec.image_h},
                                       Vec2{0, spec.image_h}};
  std::array<Vec2, 4> dst = corners;
  for (Vec2& d : dst) {
    d.x += rng.uniform(-max_disp, max_disp);
    d.y += rng.uniform(-max_disp, max_disp);
  }
  return solve_cell_homography(corners, dst);
}

}  // namespace

TEST_SUITE_BEGIN("warp");

TEST_CASE("mesh_to_sample_grid: zero mesh is the exact identity map") {
  const GridSpec spec{4, 4, 32, 32};
  const SampleGrid grid = mesh_to_sample_grid(MeshFlow::zero(spec), 32, 32);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      CHECK(grid.at(y, x).x == static_cast<double>(x));
      CHECK(grid.at(y, x).y == static_cast<double>(y));
    }
  }
}

TEST_CASE("mesh_to_sample_grid: translation mesh inverts the translation") {
  const GridSpec spec{4, 4, 32, 32};
  const SampleGrid grid =
      mesh_to_sample_grid(translation_mesh(spec, 2.0, 3.0), 32, 32);
  for (int y = 0; y < 32; y += 5) {
    for (int x = 0; x < 32; x += 5) {
      CHECK(grid.at(y, x).x == doctest::Approx(x - 2.0).epsilon(1e-9));
      CHECK(grid.at(y, x).y == doctest::Approx(y - 3.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("mesh_to_sample_grid: global-H mesh matches H^-1 within 1e-6") {
  Rng rng(55);
  const GridSpec spec{4, 4, 48, 48};
  for (int trial = 0; trial < 20; ++trial) {
    const Homography h = random_small_h(rng, spec, 2.0);
    const Homography hinv = h.inverse();
    const SampleGrid grid = mesh_to_sample_grid(global_h_mesh(spec, h), 48, 48);
    for (int y = 0; y < 48; y += 7) {
      for (int x = 0; x < 48; x += 7) {
        const Vec2 want = hinv.apply({static_cast<double>(x), static_cast<double>(y)});
        CHECK(norm(grid.at(y, x) - want) < 1e-6);
      }
    }
  }
}

TEST_CASE("bilinear_sample: identity grid reproduces the input exactly") {
  Rng rng(9);
  const int h = 5, w = 7;
  std::vector<double> img(static_cast<std::size_t>(h) * w);
  for (double& v : img) v = rng.uniform(0, 1);
  auto image = Tensor<double>::from_vector({1, 1, h, w}, img);
  std::vector<double> coords;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      coords.push_back(x);
      coords.push_back(y);
    }
  }
  auto grid = Tensor<double>::from_vector({1, h, w, 2}, coords);
  auto out = bilinear_sample(image, grid);
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(out.values()[i] == img[i]);
  }
}

TEST_CASE("bilinear_sample: half-pixel shift of a ramp interpolates linearly") {
  const int h = 4, w = 8;
  std::vector<double> img;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) img.push_back(static_cast<double>(x));
  }
  auto image = Tensor<double>::from_vector({1, 1, h, w}, img);
  std::vector<double> coords;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      coords.push_back(x - 0.5);
      coords.push_back(static_cast<double>(y));
    }
  }
  auto out = bilinear_sample(image, Tensor<double>::from_vector({1, h, w, 2}, coords));
  // interior: I(x) = x sampled at x - 0.5 gives x - 0.5
  for (int y = 0; y < h; ++y) {
    for (int x = 1; x < w; ++x) {
      CHECK(out.at({0, 0, y, x}) == doctest::Approx(x - 0.5));
    }
  }
}

TEST_CASE("bilinear_sample: far out-of-bounds samples fill with zero") {
  auto image = Tensor<double>::full({1, 1, 4, 4}, 3.5);
  std::vector<double> coords = {-10.0, -10.0};
  auto out = bilinear_sample(image, Tensor<double>::from_vector({1, 1, 1, 2}, coords));
  CHECK(out.item() == 0.0);
}

TEST_CASE("warp: zero mesh is the exact identity") {
  Rng rng(21);
  const GridSpec spec{4, 4, 24, 24};
  std::vector<double> img(24 * 24 * 2);
  for (double& v : img) v = rng.uniform(0, 1);
  auto image = Tensor<double>::from_vector({1, 2, 24, 24}, img);
  auto out = warp(image, MeshFlow::zero(spec));
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(out.values()[i] == img[i]);
  }
}

TEST_CASE("warp: constant image stays constant where support is in-bounds") {
  Rng rng(33);
  const GridSpec spec{4, 4, 32, 32};
  auto image = Tensor<double>::full({1, 1, 32, 32}, 0.625);
  const Homography h = random_small_h(rng, spec, 2.0);
  auto out = warp(image, global_h_mesh(spec, h));
  for (int y = 4; y < 28; ++y) {
    for (int x = 4; x < 28; ++x) {
      CHECK(out.at({0, 0, y, x}) == doctest::Approx(0.625).epsilon(1e-12));
    }
  }
}

TEST_CASE("warp: ones mask warps to ones wherever the grid is in-bounds") {
  Rng rng(77);
  const GridSpec spec{4, 4, 32, 32};
  const Homography h = random_small_h(rng, spec, 2.5);
  const MeshFlow mesh = global_h_mesh(spec, h);
  auto ones = Tensor<double>::full({1, 1, 32, 32}, 1.0);
  auto out = warp(ones, mesh);
  const SampleGrid grid = mesh_to_sample_grid(mesh, 32, 32);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const Vec2 s = grid.at(y, x);
      const bool fully_inside =
          s.x >= 0 && s.y >= 0 && s.x <= 31.0 && s.y <= 31.0;
      if (fully_inside) {
        CHECK(out.at({0, 0, y, x}) == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("warp: global-H mesh matches direct backward warping under H") {
  Rng rng(101);
  const GridSpec spec{4, 4, 40, 40};
  auto image = detail::smooth_image(1, 40, 40, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const Homography h = random_small_h(rng, spec, 2.0);
    auto warped = warp(image, global_h_mesh(spec, h));

    // direct backward warp oracle: sample image at H^-1 q via the sampler
    const Homography hinv = h.inverse();
    std::vector<double> coords;
    for (int y = 0; y < 40; ++y) {
      for (int x = 0; x < 40; ++x) {
        const Vec2 s = hinv.apply({static_cast<double>(x), static_cast<double>(y)});
        coords.push_back(s.x);
        coords.push_back(s.y);
      }
    }
    auto direct =
        bilinear_sample(image, Tensor<double>::from_vector({1, 40, 40, 2}, coords));
    for (int y = 4; y < 36; ++y) {
      for (int x = 4; x < 36; ++x) {
        CHECK(warped.at({0, 0, y, x}) ==
              doctest::Approx(direct.at({0, 0, y, x})).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("warp: degenerate mesh raises DegenerateCellError") {
  const GridSpec spec{2, 2, 16, 16};
  MeshFlow mesh = MeshFlow::zero(spec);
  mesh.motion(1, 1) = {12.0, 0.0};
  auto image = Tensor<double>::full({1, 1, 16, 16}, 1.0);
  CHECK_THROWS_AS(warp(image, mesh), DegenerateCellError);
}

TEST_CASE("warp gradients match finite differences (20+ instances)") {
  auto results = gradcheck_warp_suite(20, 1e-3, 1e-3);
  for (const auto& r : results) {
    INFO(r.name, ": max_rel_err=", r.report.max_rel_err,
         " max_abs_err=", r.report.max_abs_err, " ", r.report.worst);
    CHECK(r.report.pass);
  }
}

TEST_CASE("inverse_consistency op: zero meshes give exactly zero") {
  const GridSpec spec{3, 3, 24, 24};
  auto zero = mesh_to_tensor<double>(MeshFlow::zero(spec));
  CHECK(inverse_consistency(zero, zero, spec).item() == 0.0);
}

TEST_CASE("inverse_consistency op value matches the geometry residual") {
  Rng rng(61);
  const GridSpec spec{3, 3, 36, 36};
  for (int trial = 0; trial < 10; ++trial) {
    MeshFlow ma = MeshFlow::zero(spec);
    MeshFlow mb = MeshFlow::zero(spec);
    for (Vec2& v : ma.motions) v = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
    for (Vec2& v : mb.motions) v = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
    const double via_op =
        inverse_consistency(mesh_to_tensor<double>(ma), mesh_to_tensor<double>(mb), spec)
            .item();
    const double via_geometry = inverse_consistency_residual(
        mesh_to_homographies(ma), mesh_to_homographies(mb));
    CHECK(via_op == doctest::Approx(via_geometry).epsilon(1e-9));
  }
}

TEST_SUITE_END();
