#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "mf/errors.hpp"
#include "mf/geometry.hpp"
#include "mf/rng.hpp"

using namespace mf;

namespace {

std::array<Vec2, 4> unit_square() {
  return {Vec2{0, 0}, Vec2{1, 0}, Vec2{1, 1}, Vec2{0, 1}};
}

double norm1(const Homography& h) {
  double best = 0;
  for (int j = 0; j < 3; ++j) {
    double col = 0;
    for (int i = 0; i < 3; ++i) col += std::abs(h.m[i][j]);
    best = std::max(best, col);
  }
  return best;
}

double condition_1(const Homography& h) {
  return norm1(h) * norm1(h.inverse());
}

double max_normalized_entry_diff(const Homography& a, const Homography& b) {
  const Homography an = a.normalized();
  const Homography bn = b.normalized();
  double worst = 0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      worst = std::max(worst, std::abs(an.m[i][j] - bn.m[i][j]));
    }
  }
  return worst;
}

// Random well-conditioned homography built by perturbing the corners of a
// random rectangle; rejection keeps cond_1 below the given bound.
struct RandomH {
  Homography h;
  std::array<Vec2, 4> src;
};

RandomH random_well_conditioned(Rng& rng, double cond_bound = 1e4) {
  for (;;) {
    const double x0 = rng.uniform(0, 50);
    const double y0 = rng.uniform(0, 50);
    const double sw = rng.uniform(4, 40);
    const double sh = rng.uniform(4, 40);
    const std::array<Vec2, 4> src = {Vec2{x0, y0}, Vec2{x0 + sw, y0},
                                     Vec2{x0 + sw, y0 + sh}, Vec2{x0, y0 + sh}};
    std::array<Vec2, 4> dst = src;
    const double mag = 0.2 * std::min(sw, sh);
    for (Vec2& d : dst) {
      d.x += rng.uniform(-mag, mag);
      d.y += rng.uniform(-mag, mag);
    }
    try {
      const Homography h = solve_cell_homography(src, dst);
      if (condition_1(h) < cond_bound) return {h, src};
    } catch (const DegenerateCellError&) {
      continue;
    }
  }
}

MeshFlow mesh_from_global_h(const GridSpec& spec, const Homography& h) {
  MeshFlow mesh = MeshFlow::zero(spec);
  for (int v = 0; v < spec.vertex_rows(); ++v) {
    for (int u = 0; u < spec.vertex_cols(); ++u) {
      const Vec2 p = spec.vertex_pos(v, u);
      mesh.motion(v, u) = h.apply(p) - p;
    }
  }
  return mesh;
}

// Identity-ish homography with bounded corner motion so mesh cells stay valid.
Homography small_global_h(Rng& rng, const GridSpec& spec, double max_disp) {
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

TEST_SUITE_BEGIN("geometry");

TEST_CASE("DLT: unit square to itself is the identity") {
  const Homography h = solve_cell_homography(unit_square(), unit_square());
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(h.m[i][j] == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("DLT: pure translation is analytically forced") {
  auto src = unit_square();
  std::array<Vec2, 4> dst;
  for (int i = 0; i < 4; ++i) dst[i] = src[i] + Vec2{2, 3};
  const Homography h = solve_cell_homography(src, dst);
  const double want[3][3] = {{1, 0, 2}, {0, 1, 3}, {0, 0, 1}};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(h.m[i][j] == doctest::Approx(want[i][j]).epsilon(1e-10));
    }
  }
}

TEST_CASE("DLT: apply-then-solve round trip over 1000 random homographies") {
  Rng rng(42);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const RandomH rh = random_well_conditioned(rng);
    std::array<Vec2, 4> dst;
    for (int i = 0; i < 4; ++i) dst[i] = rh.h.apply(rh.src[i]);
    const Homography rec = solve_cell_homography(rh.src, dst);
    worst = std::max(worst, max_normalized_entry_diff(rec, rh.h));
    // reprojection of the defining correspondences
    for (int i = 0; i < 4; ++i) {
      const Vec2 p = rec.apply(rh.src[i]);
      CHECK(norm(p - dst[i]) < 1e-8);
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("DLT rejects non-rectangular sources and degenerate targets") {
  auto src = unit_square();
  auto skew = src;
  skew[1].y = 0.5;
  CHECK_THROWS_AS(solve_cell_homography(skew, src), ConfigError);

  std::array<Vec2, 4> collapsed = {Vec2{0, 0}, Vec2{1, 0}, Vec2{1, 0}, Vec2{0, 0}};
  CHECK_THROWS_AS(solve_cell_homography(src, collapsed), DegenerateCellError);
}

TEST_CASE("mesh_to_homographies: zero mesh gives identity everywhere") {
  const GridSpec spec{4, 4, 40, 40};
  const auto hs = mesh_to_homographies(MeshFlow::zero(spec));
  REQUIRE(hs.size() == 16);
  for (const Homography& h : hs) {
    CHECK(max_normalized_entry_diff(h, Homography::identity()) < 1e-9);
  }
}

TEST_CASE("mesh_to_homographies: mesh sampled from a global H recovers H per cell") {
  Rng rng(7);
  const GridSpec spec{4, 5, 48, 60};
  for (int trial = 0; trial < 50; ++trial) {
    const Homography h = small_global_h(rng, spec, 2.0);
    const MeshFlow mesh = mesh_from_global_h(spec, h);
    const auto hs = mesh_to_homographies(mesh);
    for (const Homography& cell : hs) {
      CHECK(max_normalized_entry_diff(cell, h) < 1e-6);
    }
  }
}

TEST_CASE("mesh_to_homographies: folded vertex reports the degenerate cell") {
  const GridSpec spec{4, 4, 40, 40};
  MeshFlow mesh = MeshFlow::zero(spec);
  mesh.motion(1, 1) = {15.0, 0.0};  // fold past the right neighbor
  try {
    mesh_to_homographies(mesh);
    FAIL("expected DegenerateCellError");
  } catch (const DegenerateCellError& e) {
    CHECK(e.cell_row == 0);
    CHECK(e.cell_col == 1);  // first affected cell in scan order
  }
}

TEST_CASE("transfer_point basics") {
  const GridSpec spec{4, 4, 40, 40};
  const MeshFlow zero = MeshFlow::zero(spec);
  const Vec2 p{13.7, 21.2};
  const Vec2 q = transfer_point(zero, p);
  CHECK(q.x == doctest::Approx(p.x).epsilon(1e-12));
  CHECK(q.y == doctest::Approx(p.y).epsilon(1e-12));

  MeshFlow trans = MeshFlow::zero(spec);
  for (Vec2& m : trans.motions) m = {2, 3};
  const Vec2 t = transfer_point(trans, {10, 10});
  CHECK(t.x == doctest::Approx(12.0).epsilon(1e-9));
  CHECK(t.y == doctest::Approx(13.0).epsilon(1e-9));

  CHECK_THROWS_AS(transfer_point(zero, {-1, 5}), OutOfBoundsError);
  CHECK_THROWS_AS(transfer_point(zero, {5, 41}), OutOfBoundsError);
}

TEST_CASE("transfer_point matches direct application of a global H") {
  Rng rng(19);
  const GridSpec spec{8, 8, 64, 64};
  const Homography h = small_global_h(rng, spec, 2.5);
  const MeshFlow mesh = mesh_from_global_h(spec, h);
  for (int i = 0; i < 50; ++i) {
    const Vec2 p{rng.uniform(0, spec.image_w), rng.uniform(0, spec.image_h)};
    const Vec2 via_mesh = transfer_point(mesh, p);
    const Vec2 direct = h.apply(p);
    CHECK(norm(via_mesh - direct) < 1e-6);
  }
}

TEST_CASE("transfer_point composed with the inverse-homography mesh returns home") {
  Rng rng(31);
  const GridSpec spec{6, 6, 60, 60};
  for (int trial = 0; trial < 20; ++trial) {
    const Homography h = small_global_h(rng, spec, 2.0);  // < half a cell
    const MeshFlow fwd = mesh_from_global_h(spec, h);
    const MeshFlow bwd = mesh_from_global_h(spec, h.inverse());
    for (int i = 0; i < 10; ++i) {
      const Vec2 p{rng.uniform(5, spec.image_w - 5), rng.uniform(5, spec.image_h - 5)};
      const Vec2 q = transfer_point(fwd, p);
      const Vec2 back = transfer_point(bwd, q);
      CHECK(norm(back - p) < 1e-4);
    }
  }
}

TEST_CASE("upsample_mesh: constant motion stays constant; lattice is exact") {
  const GridSpec coarse{2, 2, 32, 32};
  const GridSpec fine{8, 8, 32, 32};
  MeshFlow c = MeshFlow::zero(coarse);
  for (Vec2& m : c.motions) m = {1.5, -0.75};
  const MeshFlow f = upsample_mesh(c, fine);
  for (const Vec2& m : f.motions) {
    CHECK(m.x == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(m.y == doctest::Approx(-0.75).epsilon(1e-12));
  }

  // restriction to coarse vertices is the identity, bit-exact
  Rng rng(3);
  for (Vec2& m : c.motions) m = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
  const MeshFlow f2 = upsample_mesh(c, fine);
  for (int v = 0; v < coarse.vertex_rows(); ++v) {
    for (int u = 0; u < coarse.vertex_cols(); ++u) {
      CHECK(f2.motion(4 * v, 4 * u).x == c.motion(v, u).x);
      CHECK(f2.motion(4 * v, 4 * u).y == c.motion(v, u).y);
    }
  }
}

TEST_CASE("upsample_mesh: 1x1 corner ramp closed form") {
  const GridSpec coarse{1, 1, 16, 16};
  MeshFlow c = MeshFlow::zero(coarse);
  // corners: TL (0,0), TR (4,0), BL (0,0), BR (4,0) in x-motion
  c.motion(0, 1) = {4, 0};
  c.motion(1, 1) = {4, 0};
  const MeshFlow f = upsample_mesh(c, {4, 4, 16, 16});
  for (int v = 0; v < 5; ++v) {
    for (int u = 0; u < 5; ++u) {
      CHECK(f.motion(v, u).x == doctest::Approx(u * 1.0).epsilon(1e-12));
      CHECK(f.motion(v, u).y == doctest::Approx(0.0));
    }
  }

  // upsample to the same spec is the identity
  const MeshFlow same = upsample_mesh(c, coarse);
  for (std::size_t i = 0; i < c.motions.size(); ++i) {
    CHECK(same.motions[i].x == c.motions[i].x);
    CHECK(same.motions[i].y == c.motions[i].y);
  }

  const MeshFlow two = upsample_mesh(c, {2, 2, 16, 16});
  CHECK_THROWS_AS(upsample_mesh(two, GridSpec{3, 3, 16, 16}), ShapeError);
  CHECK_THROWS_AS(upsample_mesh(c, GridSpec{4, 4, 20, 16}), ShapeError);
}

TEST_CASE("fuse_meshes: single mesh, hard favorite, soft average") {
  const GridSpec spec{2, 2, 16, 16};
  const std::size_t vertices = 9;

  MeshFlow m0 = MeshFlow::zero(spec);
  MeshFlow m1 = MeshFlow::zero(spec);
  MeshFlow m2 = MeshFlow::zero(spec);
  for (Vec2& m : m1.motions) m = {2, 2};
  for (Vec2& m : m2.motions) m = {-1, 3};

  // K = 1: both modes return the single mesh
  std::vector<double> seg1(vertices, 0.37);
  for (FuseMode mode : {FuseMode::hard, FuseMode::soft}) {
    const MeshFlow out = fuse_meshes({m1}, seg1, mode);
    for (const Vec2& m : out.motions) {
      CHECK(m.x == doctest::Approx(2.0));
      CHECK(m.y == doctest::Approx(2.0));
    }
  }

  // seg uniformly favors branch 2
  std::vector<double> seg3(vertices * 3, 0.0);
  for (std::size_t i = 0; i < vertices; ++i) seg3[i * 3 + 2] = 5.0;
  const MeshFlow hard = fuse_meshes({m0, m1, m2}, seg3, FuseMode::hard);
  for (const Vec2& m : hard.motions) {
    CHECK(m.x == doctest::Approx(-1.0));
    CHECK(m.y == doctest::Approx(3.0));
  }

  // soft with equal logits averages the motions: (0,0) and (2,2) -> (1,1)
  std::vector<double> seg2(vertices * 2, 0.0);
  const MeshFlow soft = fuse_meshes({m0, m1}, seg2, FuseMode::soft);
  for (const Vec2& m : soft.motions) {
    CHECK(m.x == doctest::Approx(1.0));
    CHECK(m.y == doctest::Approx(1.0));
  }
}

TEST_CASE("fuse_meshes hard mode is argmax-invariant under monotone maps") {
  Rng rng(13);
  const GridSpec spec{3, 3, 24, 24};
  const std::size_t vertices = 16;
  std::vector<MeshFlow> meshes;
  for (int k = 0; k < 3; ++k) {
    MeshFlow m = MeshFlow::zero(spec);
    for (Vec2& v : m.motions) v = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
    meshes.push_back(std::move(m));
  }
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> seg(vertices * 3);
    for (double& v : seg) v = rng.uniform(-4, 4);
    const MeshFlow base = fuse_meshes(meshes, seg, FuseMode::hard);

    std::vector<double> mapped(seg.size());
    const int which = trial % 3;
    for (std::size_t i = 0; i < seg.size(); ++i) {
      mapped[i] = which == 0 ? 2.0 * seg[i] + 1.0
                : which == 1 ? std::tanh(seg[i])
                             : std::exp(seg[i] * 0.5);
    }
    const MeshFlow same = fuse_meshes(meshes, mapped, FuseMode::hard);
    for (std::size_t i = 0; i < vertices; ++i) {
      CHECK(same.motions[i].x == base.motions[i].x);
      CHECK(same.motions[i].y == base.motions[i].y);
    }
  }

  // ties resolve to the lowest branch index
  std::vector<double> tied(vertices * 2, 1.0);
  const MeshFlow lo = fuse_meshes({meshes[0], meshes[1]}, tied, FuseMode::hard);
  for (std::size_t i = 0; i < vertices; ++i) {
    CHECK(lo.motions[i].x == meshes[0].motions[i].x);
  }
}

TEST_CASE("inverse_consistency_residual: exact inverses vanish") {
  Rng rng(5);
  std::vector<Homography> hab, hba;
  for (int i = 0; i < 12; ++i) {
    const RandomH rh = random_well_conditioned(rng);
    hab.push_back(rh.h);
    hba.push_back(rh.h.inverse());
  }
  CHECK(inverse_consistency_residual(hab, hba) < 1e-10);
}

TEST_CASE("inverse_consistency_residual: identity vs unit translation is 1") {
  std::vector<Homography> hab = {Homography::identity()};
  std::vector<Homography> hba = {Homography::translation(1, 0)};
  CHECK(inverse_consistency_residual(hab, hba) == doctest::Approx(1.0));
}

TEST_CASE("inverse_consistency_residual matches a scalar-by-scalar oracle") {
  Rng rng(27);
  std::vector<Homography> hab, hba;
  for (int i = 0; i < 9; ++i) {
    hab.push_back(random_well_conditioned(rng).h);
    hba.push_back(random_well_conditioned(rng).h);
  }
  // independent recomputation with raw loops
  double expect = 0;
  for (std::size_t c = 0; c < hab.size(); ++c) {
    double p[3][3] = {};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) p[i][j] += hab[c].m[i][k] * hba[c].m[k][j];
    const double s = p[2][2];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        expect += std::abs(p[i][j] / s - (i == j ? 1.0 : 0.0));
  }
  expect /= static_cast<double>(hab.size());
  CHECK(inverse_consistency_residual(hab, hba) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("mesh JSON serialization round-trips bitwise") {
  Rng rng(91);
  const GridSpec spec{3, 4, 36.5, 48.25};
  MeshFlow mesh = MeshFlow::zero(spec);
  for (Vec2& m : mesh.motions) m = {rng.uniform(-3, 3), rng.uniform(-3, 3)};

  const MeshFlow back = mesh_from_json(mesh_to_json(mesh));
  CHECK(back.spec == mesh.spec);
  REQUIRE(back.motions.size() == mesh.motions.size());
  for (std::size_t i = 0; i < mesh.motions.size(); ++i) {
    CHECK(back.motions[i].x == mesh.motions[i].x);
    CHECK(back.motions[i].y == mesh.motions[i].y);
  }
}

TEST_CASE("mesh deserialization rejects malformed input with typed errors") {
  CHECK_THROWS_AS(mesh_from_json("not json at all"), FormatError);
  CHECK_THROWS_AS(mesh_from_json(R"({"grid_h": 2})"), FormatError);
  CHECK_THROWS_AS(
      mesh_from_json(
          R"({"grid_h":1,"grid_w":1,"image_h":8,"image_w":8,"motions":[[0,0]]})"),
      ShapeError);  // wrong motion count
  CHECK_THROWS_AS(load_mesh("/nonexistent/mesh.json"), IoError);
}

TEST_SUITE_END();
