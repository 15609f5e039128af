#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "mf/geometry.hpp"
#include "mf/nn_ops.hpp"
#include "mf/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mf {

// Per-output-pixel source sampling locations, in pixels.
struct SampleGrid {
  int h = 0;
  int w = 0;
  std::vector<Vec2> coords;  // row-major [h * w]

  Vec2 at(int y, int x) const {
    return coords[static_cast<std::size_t>(y) * w + x];
  }
};

namespace detail {

// Everything the warp backward needs about one cell.
struct WarpCell {
  CellSolve solve;
  Homography hinv;
  bool identity = false;  // dst == src exactly; coords pass through
};

inline WarpCell prepare_cell(const GridSpec& spec, int row, int col,
                             const std::array<Vec2, 4>& dst) {
  const auto src = cell_corners(spec, row, col);
  if (!quad_is_valid(dst, spec.cell_w() * spec.cell_h())) {
    throw DegenerateCellError("deformed quad is degenerate", row, col);
  }
  WarpCell cell;
  try {
    cell.solve = solve_cell(src, dst);
  } catch (const DegenerateCellError&) {
    throw DegenerateCellError("singular DLT system", row, col);
  }
  cell.identity = dst[0].x == src[0].x && dst[0].y == src[0].y &&
                  dst[1].x == src[1].x && dst[1].y == src[1].y &&
                  dst[2].x == src[2].x && dst[2].y == src[2].y &&
                  dst[3].x == src[3].x && dst[3].y == src[3].y;
  if (cell.identity) {
    cell.solve.h = {1, 0, 0, 0, 1, 0, 0, 0};
    cell.solve.w = {1, 1, 1, 1};
    cell.hinv = Homography::identity();
    return cell;
  }
  Homography h;
  h.m = {{{cell.solve.h[0], cell.solve.h[1], cell.solve.h[2]},
          {cell.solve.h[3], cell.solve.h[4], cell.solve.h[5]},
          {cell.solve.h[6], cell.solve.h[7], 1.0}}};
  try {
    cell.hinv = h.inverse();
  } catch (const NumericsError&) {
    throw DegenerateCellError("cell homography not invertible", row, col);
  }
  return cell;
}

inline Vec2 cell_sample_coord(const WarpCell& cell, double x, double y,
                              int row, int col) {
  if (cell.identity) return {x, y};
  const auto& m = cell.hinv.m;
  const double r0 = m[0][0] * x + m[0][1] * y + m[0][2];
  const double r1 = m[1][0] * x + m[1][1] * y + m[1][2];
  const double r2 = m[2][0] * x + m[2][1] * y + m[2][2];
  if (std::abs(r2) < 1e-12) {
    throw DegenerateCellError("sample point maps to infinity", row, col);
  }
  return {r0 / r2, r1 / r2};
}

// Builds all cells of one mesh given a motion accessor (vertex row, col) -> Vec2.
template <typename MotionFn>
std::vector<WarpCell> prepare_cells(const GridSpec& spec, MotionFn motion) {
  std::vector<WarpCell> cells;
  cells.reserve(static_cast<std::size_t>(spec.grid_h) * spec.grid_w);
  for (int i = 0; i < spec.grid_h; ++i) {
    for (int j = 0; j < spec.grid_w; ++j) {
      const auto base = cell_corners(spec, i, j);
      const std::array<Vec2, 4> dst = {
          base[0] + motion(i, j), base[1] + motion(i, j + 1),
          base[2] + motion(i + 1, j + 1), base[3] + motion(i + 1, j)};
      cells.push_back(prepare_cell(spec, i, j, dst));
    }
  }
  return cells;
}

// Accumulates dL/dH (with the (2,2) entry pinned) back to the 4 corner
// motions of cell (row, col) of a [gh, gw] vertex grid.
template <typename T>
void cell_grad_to_motions(const WarpCell& cell, const double dl_dh[8], int row,
                          int col, int vcols, T* motion_grad) {
  Vec2 dd[4];
  cell_pullback(cell.solve, dl_dh, dd);
  const int vidx[4][2] = {{row, col}, {row, col + 1}, {row + 1, col + 1}, {row + 1, col}};
  for (int c = 0; c < 4; ++c) {
    T* slot = motion_grad +
              (static_cast<std::size_t>(vidx[c][0]) * vcols + vidx[c][1]) * 2;
    slot[0] += static_cast<T>(dd[c].x);
    slot[1] += static_cast<T>(dd[c].y);
  }
}

}  // namespace detail

// Local-inverse sampling map: output pixel q in regular cell c samples
// Hc^-1 * q. Exact whenever the true preimage of q stays within cell c
// (guaranteed for vertex motions under half a cell).
inline SampleGrid mesh_to_sample_grid(const MeshFlow& mesh, int out_h, int out_w) {
  mesh.validate();
  const GridSpec& spec = mesh.spec;
  if (out_h < 1 || out_w < 1) throw ShapeError("mesh_to_sample_grid: empty output");
  auto cells = detail::prepare_cells(
      spec, [&](int v, int u) { return mesh.motion(v, u); });
  SampleGrid grid;
  grid.h = out_h;
  grid.w = out_w;
  grid.coords.resize(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const int row = cell_index_for(static_cast<double>(y), spec.cell_h(), spec.grid_h);
    for (int x = 0; x < out_w; ++x) {
      const int col = cell_index_for(static_cast<double>(x), spec.cell_w(), spec.grid_w);
      const auto& cell = cells[static_cast<std::size_t>(row) * spec.grid_w + col];
      grid.coords[static_cast<std::size_t>(y) * out_w + x] =
          detail::cell_sample_coord(cell, x, y, row, col);
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// bilinear_sample: interpolates image [N,C,H,W] at grid [N,H',W',2] (x,y in
// pixels). Samples outside the image use zero-padded neighbors. Differentiable
// in the image and in the grid coordinates.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& image, const Tensor<T>& grid) {
  detail::require_rank("bilinear_sample", image.shape(), 4);
  detail::require_rank("bilinear_sample", grid.shape(), 4);
  if (grid.dim(3) != 2 || grid.dim(0) != image.dim(0)) {
    throw ShapeError("bilinear_sample: grid must be [N,H,W,2] with matching N");
  }
  const int n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  const int oh = grid.dim(1), ow = grid.dim(2);
  auto iv = image.values();
  auto gv = grid.values();

  auto fetch = [&](int ni, int ci, int y, int x) -> double {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return static_cast<double>(
        iv[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x]);
  };

  std::vector<T> out(static_cast<std::size_t>(n) * c * oh * ow);
  for (int ni = 0; ni < n; ++ni) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const std::size_t gi = ((static_cast<std::size_t>(ni) * oh + y) * ow + x) * 2;
        const double sx = static_cast<double>(gv[gi]);
        const double sy = static_cast<double>(gv[gi + 1]);
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const double fx = sx - x0, fy = sy - y0;
        for (int ci = 0; ci < c; ++ci) {
          const double v =
              (1 - fy) * ((1 - fx) * fetch(ni, ci, y0, x0) + fx * fetch(ni, ci, y0, x0 + 1)) +
              fy * ((1 - fx) * fetch(ni, ci, y0 + 1, x0) + fx * fetch(ni, ci, y0 + 1, x0 + 1));
          out[((static_cast<std::size_t>(ni) * c + ci) * oh + y) * ow + x] = static_cast<T>(v);
        }
      }
    }
  }

  return make_op<T>(
      "bilinear_sample", {n, c, oh, ow}, std::move(out), {image, grid},
      [=](detail::Node<T>& self) {
        auto& pimg = *self.parents[0];
        auto& pgrid = *self.parents[1];
        const bool gi_ = pimg.requires_grad;
        const bool gg = pgrid.requires_grad;
        if (gi_) pimg.ensure_grad();
        if (gg) pgrid.ensure_grad();
        auto val = [&](int ni, int ci, int y, int x) -> double {
          if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
          return static_cast<double>(
              pimg.value[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x]);
        };
        auto scatter = [&](int ni, int ci, int y, int x, double g) {
          if (y < 0 || y >= h || x < 0 || x >= w) return;
          pimg.grad[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x] +=
              static_cast<T>(g);
        };
        for (int ni = 0; ni < n; ++ni) {
          for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
              const std::size_t gidx = ((static_cast<std::size_t>(ni) * oh + y) * ow + x) * 2;
              const double sx = static_cast<double>(pgrid.value[gidx]);
              const double sy = static_cast<double>(pgrid.value[gidx + 1]);
              const int x0 = static_cast<int>(std::floor(sx));
              const int y0 = static_cast<int>(std::floor(sy));
              const double fx = sx - x0, fy = sy - y0;
              double dsx = 0, dsy = 0;
              for (int ci = 0; ci < c; ++ci) {
                const double g = static_cast<double>(
                    self.grad[((static_cast<std::size_t>(ni) * c + ci) * oh + y) * ow + x]);
                if (g == 0) continue;
                const double v00 = val(ni, ci, y0, x0), v01 = val(ni, ci, y0, x0 + 1);
                const double v10 = val(ni, ci, y0 + 1, x0), v11 = val(ni, ci, y0 + 1, x0 + 1);
                if (gi_) {
                  scatter(ni, ci, y0, x0, g * (1 - fy) * (1 - fx));
                  scatter(ni, ci, y0, x0 + 1, g * (1 - fy) * fx);
                  scatter(ni, ci, y0 + 1, x0, g * fy * (1 - fx));
                  scatter(ni, ci, y0 + 1, x0 + 1, g * fy * fx);
                }
                if (gg) {
                  dsx += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                  dsy += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
              }
              if (gg) {
                pgrid.grad[gidx] += static_cast<T>(dsx);
                pgrid.grad[gidx + 1] += static_cast<T>(dsy);
              }
            }
          }
        }
      });
}

// Converts a SampleGrid to a [1,H,W,2] tensor (e.g. to feed bilinear_sample).
template <typename T>
Tensor<T> grid_to_tensor(const SampleGrid& grid) {
  std::vector<T> data;
  data.reserve(grid.coords.size() * 2);
  for (const Vec2& v : grid.coords) {
    data.push_back(static_cast<T>(v.x));
    data.push_back(static_cast<T>(v.y));
  }
  return Tensor<T>::from_vector({1, grid.h, grid.w, 2}, std::move(data));
}

// MeshFlow <-> motion tensor bridges. Motion tensors are [N, Vr, Vc, 2].
template <typename T>
Tensor<T> mesh_to_tensor(const MeshFlow& mesh) {
  mesh.validate();
  std::vector<T> data;
  data.reserve(mesh.motions.size() * 2);
  for (const Vec2& v : mesh.motions) {
    data.push_back(static_cast<T>(v.x));
    data.push_back(static_cast<T>(v.y));
  }
  return Tensor<T>::from_vector(
      {1, mesh.spec.vertex_rows(), mesh.spec.vertex_cols(), 2}, std::move(data));
}

template <typename T>
MeshFlow mesh_from_tensor(const Tensor<T>& motions, const GridSpec& spec,
                          int sample) {
  if (motions.rank() != 4 || motions.dim(1) != spec.vertex_rows() ||
      motions.dim(2) != spec.vertex_cols() || motions.dim(3) != 2) {
    throw ShapeError("mesh_from_tensor: motions " + shape_str(motions.shape()) +
                     " do not match grid spec");
  }
  if (sample < 0 || sample >= motions.dim(0)) {
    throw ShapeError("mesh_from_tensor: sample index out of range");
  }
  MeshFlow mesh = MeshFlow::zero(spec);
  auto v = motions.values();
  const std::size_t base =
      static_cast<std::size_t>(sample) * mesh.motions.size() * 2;
  for (std::size_t i = 0; i < mesh.motions.size(); ++i) {
    mesh.motions[i] = {static_cast<double>(v[base + 2 * i]),
                       static_cast<double>(v[base + 2 * i + 1])};
  }
  return mesh;
}

// ---------------------------------------------------------------------------
// warp: backward-warps image [N,C,H,W] by per-sample mesh motions
// [N,Vr,Vc,2]. One tape node; gradients reach both the image (bilinear
// scatter) and the vertex motions (through the cell homography inverse and
// the DLT solve).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> warp(const Tensor<T>& image, const Tensor<T>& motions,
               const GridSpec& spec) {
  detail::require_rank("warp", image.shape(), 4);
  detail::require_rank("warp", motions.shape(), 4);
  spec.validate();
  const int n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (motions.dim(0) != n || motions.dim(1) != spec.vertex_rows() ||
      motions.dim(2) != spec.vertex_cols() || motions.dim(3) != 2) {
    throw ShapeError("warp: motions " + shape_str(motions.shape()) +
                     " do not match batch/grid");
  }
  if (static_cast<double>(h) != spec.image_h || static_cast<double>(w) != spec.image_w) {
    throw ShapeError("warp: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " does not match grid extent");
  }

  const int vr = spec.vertex_rows(), vc = spec.vertex_cols();
  auto mv = motions.values();
  auto motion_of = [&](int ni, int v, int u) -> Vec2 {
    const std::size_t base = ((static_cast<std::size_t>(ni) * vr + v) * vc + u) * 2;
    return {static_cast<double>(mv[base]), static_cast<double>(mv[base + 1])};
  };

  auto cells = std::make_shared<std::vector<std::vector<detail::WarpCell>>>();
  cells->reserve(static_cast<std::size_t>(n));
  for (int ni = 0; ni < n; ++ni) {
    cells->push_back(detail::prepare_cells(
        spec, [&](int v, int u) { return motion_of(ni, v, u); }));
  }

  auto iv = image.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * h * w);

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int ni = 0; ni < n; ++ni) {
    for (int y = 0; y < h; ++y) {
      const int row = cell_index_for(static_cast<double>(y), spec.cell_h(), spec.grid_h);
      for (int x = 0; x < w; ++x) {
        const int col = cell_index_for(static_cast<double>(x), spec.cell_w(), spec.grid_w);
        const auto& cell = (*cells)[static_cast<std::size_t>(ni)]
                                   [static_cast<std::size_t>(row) * spec.grid_w + col];
        const Vec2 s = detail::cell_sample_coord(cell, x, y, row, col);
        const int x0 = static_cast<int>(std::floor(s.x));
        const int y0 = static_cast<int>(std::floor(s.y));
        const double fx = s.x - x0, fy = s.y - y0;
        for (int ci = 0; ci < c; ++ci) {
          const T* plane = iv.data() + (static_cast<std::size_t>(ni) * c + ci) * h * w;
          auto fetch = [&](int yy, int xx) -> double {
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
            return static_cast<double>(plane[static_cast<std::size_t>(yy) * w + xx]);
          };
          const double v =
              (1 - fy) * ((1 - fx) * fetch(y0, x0) + fx * fetch(y0, x0 + 1)) +
              fy * ((1 - fx) * fetch(y0 + 1, x0) + fx * fetch(y0 + 1, x0 + 1));
          out[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x] = static_cast<T>(v);
        }
      }
    }
  }

  return make_op<T>(
      "warp", {n, c, h, w}, std::move(out), {image, motions},
      [=](detail::Node<T>& self) {
        auto& pimg = *self.parents[0];
        auto& pmot = *self.parents[1];
        const bool gimg = pimg.requires_grad;
        const bool gmot = pmot.requires_grad;
        if (gimg) pimg.ensure_grad();
        if (gmot) pmot.ensure_grad();
        const std::size_t cells_per = static_cast<std::size_t>(spec.grid_h) * spec.grid_w;

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int ni = 0; ni < n; ++ni) {
          // dL/dHinv accumulated per cell of this sample.
          std::vector<std::array<double, 9>> dhinv(cells_per, std::array<double, 9>{});
          for (int y = 0; y < h; ++y) {
            const int row = cell_index_for(static_cast<double>(y), spec.cell_h(), spec.grid_h);
            for (int x = 0; x < w; ++x) {
              const int col = cell_index_for(static_cast<double>(x), spec.cell_w(), spec.grid_w);
              const std::size_t cidx = static_cast<std::size_t>(row) * spec.grid_w + col;
              const auto& cell = (*cells)[static_cast<std::size_t>(ni)][cidx];
              const auto& m = cell.hinv.m;
              const double r0 = m[0][0] * x + m[0][1] * y + m[0][2];
              const double r1 = m[1][0] * x + m[1][1] * y + m[1][2];
              const double r2 = m[2][0] * x + m[2][1] * y + m[2][2];
              const double sx = r0 / r2, sy = r1 / r2;
              const int x0 = static_cast<int>(std::floor(sx));
              const int y0 = static_cast<int>(std::floor(sy));
              const double fx = sx - x0, fy = sy - y0;
              double dsx = 0, dsy = 0;
              for (int ci = 0; ci < c; ++ci) {
                const double g = static_cast<double>(
                    self.grad[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x]);
                if (g == 0) continue;
                const T* plane = pimg.value.data() +
                                 (static_cast<std::size_t>(ni) * c + ci) * h * w;
                auto val = [&](int yy, int xx) -> double {
                  if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
                  return static_cast<double>(plane[static_cast<std::size_t>(yy) * w + xx]);
                };
                const double v00 = val(y0, x0), v01 = val(y0, x0 + 1);
                const double v10 = val(y0 + 1, x0), v11 = val(y0 + 1, x0 + 1);
                if (gimg) {
                  T* gplane = pimg.grad.data() +
                              (static_cast<std::size_t>(ni) * c + ci) * h * w;
                  auto scatter = [&](int yy, int xx, double gv) {
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return;
                    gplane[static_cast<std::size_t>(yy) * w + xx] += static_cast<T>(gv);
                  };
                  scatter(y0, x0, g * (1 - fy) * (1 - fx));
                  scatter(y0, x0 + 1, g * (1 - fy) * fx);
                  scatter(y0 + 1, x0, g * fy * (1 - fx));
                  scatter(y0 + 1, x0 + 1, g * fy * fx);
                }
                if (gmot) {
                  dsx += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                  dsy += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
              }
              if (gmot && (dsx != 0 || dsy != 0)) {
                // coords = (r0/r2, r1/r2); pull back to the 9 Hinv entries.
                const double dr0 = dsx / r2;
                const double dr1 = dsy / r2;
                const double dr2 = -(dsx * r0 + dsy * r1) / (r2 * r2);
                auto& acc = dhinv[cidx];
                acc[0] += dr0 * x; acc[1] += dr0 * y; acc[2] += dr0;
                acc[3] += dr1 * x; acc[4] += dr1 * y; acc[5] += dr1;
                acc[6] += dr2 * x; acc[7] += dr2 * y; acc[8] += dr2;
              }
            }
          }
          if (!gmot) continue;
          T* mgrad = pmot.grad.data() +
                     static_cast<std::size_t>(ni) * vr * vc * 2;
          for (int row = 0; row < spec.grid_h; ++row) {
            for (int col = 0; col < spec.grid_w; ++col) {
              const std::size_t cidx = static_cast<std::size_t>(row) * spec.grid_w + col;
              const auto& acc = dhinv[cidx];
              bool any = false;
              for (double v : acc) any = any || v != 0;
              if (!any) continue;
              const auto& cell = (*cells)[static_cast<std::size_t>(ni)][cidx];
              // dL/dH = -Hinv^T * dL/dHinv * Hinv^T
              const auto& q = cell.hinv.m;
              double ghv[3][3] = {{acc[0], acc[1], acc[2]},
                                  {acc[3], acc[4], acc[5]},
                                  {acc[6], acc[7], acc[8]}};
              double tmp[3][3];
              for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 3; ++j) {
                  double s = 0;
                  for (int k = 0; k < 3; ++k) s += q[k][i] * ghv[k][j];  // Hinv^T * G
                  tmp[i][j] = s;
                }
              }
              double dh_mat[3][3];
              for (int i = 0; i < 3; ++i) {
                for (int j = 0; j < 3; ++j) {
                  double s = 0;
                  for (int k = 0; k < 3; ++k) s += tmp[i][k] * q[j][k];  // ... * Hinv^T
                  dh_mat[i][j] = -s;
                }
              }
              const double dl_dh[8] = {dh_mat[0][0], dh_mat[0][1], dh_mat[0][2],
                                       dh_mat[1][0], dh_mat[1][1], dh_mat[1][2],
                                       dh_mat[2][0], dh_mat[2][1]};
              detail::cell_grad_to_motions(cell, dl_dh, row, col, vc, mgrad);
            }
          }
        }
      });
}

// Warp by a fixed mesh (no gradient into the motions).
template <typename T>
Tensor<T> warp(const Tensor<T>& image, const MeshFlow& mesh) {
  Tensor<T> motions = mesh_to_tensor<T>(mesh);
  if (image.dim(0) != 1) {
    // Tile the single mesh across the batch.
    std::vector<T> data;
    auto base = motions.values();
    data.reserve(base.size() * static_cast<std::size_t>(image.dim(0)));
    for (int i = 0; i < image.dim(0); ++i) data.insert(data.end(), base.begin(), base.end());
    motions = Tensor<T>::from_vector(
        {image.dim(0), mesh.spec.vertex_rows(), mesh.spec.vertex_cols(), 2},
        std::move(data));
  }
  return warp(image, motions, mesh.spec);
}

// ---------------------------------------------------------------------------
// Differentiable inverse-consistency penalty: mean over cells (and batch) of
// |normalize(Hab * Hba) - I|_1, with gradients into both motion tensors.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> inverse_consistency(const Tensor<T>& motions_ab,
                              const Tensor<T>& motions_ba,
                              const GridSpec& spec) {
  detail::require_rank("inverse_consistency", motions_ab.shape(), 4);
  if (motions_ab.shape() != motions_ba.shape()) {
    throw ShapeError("inverse_consistency: motion tensors must match");
  }
  spec.validate();
  const int n = motions_ab.dim(0);
  const int vr = spec.vertex_rows(), vc = spec.vertex_cols();
  if (motions_ab.dim(1) != vr || motions_ab.dim(2) != vc || motions_ab.dim(3) != 2) {
    throw ShapeError("inverse_consistency: motions do not match grid spec");
  }

  auto motion_of = [&](std::span<const T> mv, int ni, int v, int u) -> Vec2 {
    const std::size_t base = ((static_cast<std::size_t>(ni) * vr + v) * vc + u) * 2;
    return {static_cast<double>(mv[base]), static_cast<double>(mv[base + 1])};
  };

  struct CellPair {
    CellSolve ab, ba;
    double p[3][3];   // Hab * Hba
    double s;         // p[2][2]
  };
  auto cache = std::make_shared<std::vector<CellPair>>();
  const std::size_t cells_per = static_cast<std::size_t>(spec.grid_h) * spec.grid_w;
  cache->resize(static_cast<std::size_t>(n) * cells_per);

  auto mab = motions_ab.values();
  auto mba = motions_ba.values();
  const double area = spec.cell_w() * spec.cell_h();
  double total = 0;
  for (int ni = 0; ni < n; ++ni) {
    for (int i = 0; i < spec.grid_h; ++i) {
      for (int j = 0; j < spec.grid_w; ++j) {
        const auto base = cell_corners(spec, i, j);
        const std::array<Vec2, 4> dst_ab = {
            base[0] + motion_of(mab, ni, i, j), base[1] + motion_of(mab, ni, i, j + 1),
            base[2] + motion_of(mab, ni, i + 1, j + 1), base[3] + motion_of(mab, ni, i + 1, j)};
        const std::array<Vec2, 4> dst_ba = {
            base[0] + motion_of(mba, ni, i, j), base[1] + motion_of(mba, ni, i, j + 1),
            base[2] + motion_of(mba, ni, i + 1, j + 1), base[3] + motion_of(mba, ni, i + 1, j)};
        if (!quad_is_valid(dst_ab, area) || !quad_is_valid(dst_ba, area)) {
          throw DegenerateCellError("deformed quad is degenerate", i, j);
        }
        CellPair& cp = (*cache)[static_cast<std::size_t>(ni) * cells_per +
                                static_cast<std::size_t>(i) * spec.grid_w + j];
        try {
          cp.ab = solve_cell(base, dst_ab);
          cp.ba = solve_cell(base, dst_ba);
        } catch (const DegenerateCellError&) {
          throw DegenerateCellError("singular DLT system", i, j);
        }
        const double A[3][3] = {{cp.ab.h[0], cp.ab.h[1], cp.ab.h[2]},
                                {cp.ab.h[3], cp.ab.h[4], cp.ab.h[5]},
                                {cp.ab.h[6], cp.ab.h[7], 1.0}};
        const double B[3][3] = {{cp.ba.h[0], cp.ba.h[1], cp.ba.h[2]},
                                {cp.ba.h[3], cp.ba.h[4], cp.ba.h[5]},
                                {cp.ba.h[6], cp.ba.h[7], 1.0}};
        for (int r = 0; r < 3; ++r) {
          for (int cidx = 0; cidx < 3; ++cidx) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += A[r][k] * B[k][cidx];
            cp.p[r][cidx] = s;
          }
        }
        cp.s = cp.p[2][2];
        if (std::abs(cp.s) < 1e-12) {
          throw NumericsError("inverse_consistency: product not normalizable");
        }
        for (int r = 0; r < 3; ++r) {
          for (int cidx = 0; cidx < 3; ++cidx) {
            total += std::abs(cp.p[r][cidx] / cp.s - (r == cidx ? 1.0 : 0.0));
          }
        }
      }
    }
  }
  const double denom = static_cast<double>(n) * static_cast<double>(cells_per);
  total /= denom;

  return make_op<T>(
      "inverse_consistency", {}, {static_cast<T>(total)}, {motions_ab, motions_ba},
      [=](detail::Node<T>& self) {
        auto& pab = *self.parents[0];
        auto& pba = *self.parents[1];
        const bool gab = pab.requires_grad;
        const bool gba = pba.requires_grad;
        if (gab) pab.ensure_grad();
        if (gba) pba.ensure_grad();
        const double g = static_cast<double>(self.grad[0]) / denom;
        for (int ni = 0; ni < n; ++ni) {
          for (int i = 0; i < spec.grid_h; ++i) {
            for (int j = 0; j < spec.grid_w; ++j) {
              const CellPair& cp = (*cache)[static_cast<std::size_t>(ni) * cells_per +
                                            static_cast<std::size_t>(i) * spec.grid_w + j];
              // dL/dPn with Pn = P / P22; entrywise L1 against identity.
              double gpn[3][3];
              for (int r = 0; r < 3; ++r) {
                for (int cc = 0; cc < 3; ++cc) {
                  const double v = cp.p[r][cc] / cp.s - (r == cc ? 1.0 : 0.0);
                  gpn[r][cc] = g * (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0));
                }
              }
              double gp[3][3];
              double trace_term = 0;
              for (int r = 0; r < 3; ++r) {
                for (int cc = 0; cc < 3; ++cc) {
                  gp[r][cc] = gpn[r][cc] / cp.s;
                  trace_term += gpn[r][cc] * cp.p[r][cc];
                }
              }
              gp[2][2] -= trace_term / (cp.s * cp.s);

              const double A[3][3] = {{cp.ab.h[0], cp.ab.h[1], cp.ab.h[2]},
                                      {cp.ab.h[3], cp.ab.h[4], cp.ab.h[5]},
                                      {cp.ab.h[6], cp.ab.h[7], 1.0}};
              const double B[3][3] = {{cp.ba.h[0], cp.ba.h[1], cp.ba.h[2]},
                                      {cp.ba.h[3], cp.ba.h[4], cp.ba.h[5]},
                                      {cp.ba.h[6], cp.ba.h[7], 1.0}};
              if (gab) {
                double da[3][3];  // gp * B^T
                for (int r = 0; r < 3; ++r) {
                  for (int cc = 0; cc < 3; ++cc) {
                    double s = 0;
                    for (int k = 0; k < 3; ++k) s += gp[r][k] * B[cc][k];
                    da[r][cc] = s;
                  }
                }
                const double dl_dh[8] = {da[0][0], da[0][1], da[0][2], da[1][0],
                                         da[1][1], da[1][2], da[2][0], da[2][1]};
                detail::WarpCell wc;
                wc.solve = cp.ab;
                T* mgrad = pab.grad.data() + static_cast<std::size_t>(ni) * vr * vc * 2;
                detail::cell_grad_to_motions(wc, dl_dh, i, j, vc, mgrad);
              }
              if (gba) {
                double db[3][3];  // A^T * gp
                for (int r = 0; r < 3; ++r) {
                  for (int cc = 0; cc < 3; ++cc) {
                    double s = 0;
                    for (int k = 0; k < 3; ++k) s += A[k][r] * gp[k][cc];
                    db[r][cc] = s;
                  }
                }
                const double dl_dh[8] = {db[0][0], db[0][1], db[0][2], db[1][0],
                                         db[1][1], db[1][2], db[2][0], db[2][1]};
                detail::WarpCell wc;
                wc.solve = cp.ba;
                T* mgrad = pba.grad.data() + static_cast<std::size_t>(ni) * vr * vc * 2;
                detail::cell_grad_to_motions(wc, dl_dh, i, j, vc, mgrad);
              }
            }
          }
        }
      });
}

}  // namespace mf
