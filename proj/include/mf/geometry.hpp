#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mf/errors.hpp"

namespace mf {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double norm(Vec2 a) { return std::sqrt(a.x * a.x + a.y * a.y); }

// A regular Hg x Wg mesh over an image extent. Vertex (u, v) sits at pixel
// position (u * image_w / grid_w, v * image_h / grid_h).
struct GridSpec {
  int grid_h = 16;
  int grid_w = 16;
  double image_h = 128.0;
  double image_w = 128.0;

  int vertex_rows() const { return grid_h + 1; }
  int vertex_cols() const { return grid_w + 1; }
  double cell_w() const { return image_w / grid_w; }
  double cell_h() const { return image_h / grid_h; }
  Vec2 vertex_pos(int v, int u) const {
    return {u * image_w / grid_w, v * image_h / grid_h};
  }
  void validate() const;
  bool operator==(const GridSpec&) const = default;
};

// Sparse motion field: one forward displacement per mesh vertex
// (source vertex + motion = target position). Row-major by vertex row.
struct MeshFlow {
  GridSpec spec;
  std::vector<Vec2> motions;  // (grid_h+1) * (grid_w+1)

  static MeshFlow zero(const GridSpec& spec);

  Vec2& motion(int v, int u) {
    return motions[static_cast<std::size_t>(v) * spec.vertex_cols() + u];
  }
  Vec2 motion(int v, int u) const {
    return motions[static_cast<std::size_t>(v) * spec.vertex_cols() + u];
  }
  void validate() const;
};

struct Homography {
  // Row-major 3x3. Stored normalized with m[2][2] == 1 whenever the solve
  // yields a representable scale.
  std::array<std::array<double, 3>, 3> m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty);

  Vec2 apply(Vec2 p) const;
  Homography inverse() const;           // NumericsError when singular
  Homography normalized() const;        // scales so m[2][2] == 1
  double det() const;
};

Homography matmul(const Homography& a, const Homography& b);

// Exact 4-point DLT solve with the full 8x8 system inverse retained; the
// inverse columns are what the warp/consistency backward passes need.
struct CellSolve {
  std::array<double, 8> h{};      // h33 fixed to 1
  std::array<double, 64> a_inv{}; // row-major inverse of the DLT system
  std::array<double, 4> w{};      // projective denominator at each src corner
};

// Corners are cyclic: top-left, top-right, bottom-right, bottom-left.
CellSolve solve_cell(const std::array<Vec2, 4>& src,
                     const std::array<Vec2, 4>& dst);

// Pullback through the solve: dL/dh (8 entries) -> dL/d(dst corners).
void cell_pullback(const CellSolve& solve, const double dl_dh[8],
                   Vec2 dl_ddst[4]);

// True when the quad is convex with positive orientation and no three
// corners collinear; folded or collapsed quads fail.
bool quad_is_valid(const std::array<Vec2, 4>& corners, double area_scale);

// Public 4-point solver. src must form an axis-aligned rectangle
// (ConfigError otherwise); degenerate dst quads raise DegenerateCellError.
Homography solve_cell_homography(const std::array<Vec2, 4>& src,
                                 const std::array<Vec2, 4>& dst);

// Regular (source-frame) corners of cell (row, col), cyclic order.
std::array<Vec2, 4> cell_corners(const GridSpec& spec, int row, int col);

// Deformed (target-frame) corners of cell (row, col) under the mesh.
std::array<Vec2, 4> deformed_corners(const MeshFlow& mesh, int row, int col);

// Per-cell homographies, row-major [grid_h * grid_w]. Degenerate cells raise
// DegenerateCellError carrying the cell index.
std::vector<Homography> mesh_to_homographies(const MeshFlow& mesh);

// Index of the cell containing pixel position p. Points exactly on an
// interior boundary belong to the lower-index cell; the image edge belongs
// to the last cell.
int cell_index_for(double coord, double cell_extent, int cells);

// Applies the containing cell's homography to p (source -> target).
Vec2 transfer_point(const MeshFlow& mesh, Vec2 p);

// Corner-aligned bilinear refinement of vertex motions. Target grid dims
// must be integer multiples of the coarse dims, same image extent; coarse
// vertices are copied exactly.
MeshFlow upsample_mesh(const MeshFlow& coarse, const GridSpec& target_spec);

enum class FuseMode { hard, soft };

// Per-vertex branch selection (hard: argmax of seg logits, ties to the
// lowest branch) or softmax-weighted combination (soft).
// seg is row-major [(grid_h+1) * (grid_w+1) * K].
MeshFlow fuse_meshes(const std::vector<MeshFlow>& meshes,
                     std::span<const double> seg, FuseMode mode);

// Mean (over cells) entrywise L1 norm of Hab*Hba - I after normalizing each
// product by its (2,2) entry. NumericsError when a product cannot be
// normalized.
double inverse_consistency_residual(const std::vector<Homography>& hab,
                                    const std::vector<Homography>& hba);

// Text (JSON) serialization of a mesh: {grid_h, grid_w, image_h, image_w,
// motions: [[dx, dy], ...]} row-major over vertices.
std::string mesh_to_json(const MeshFlow& mesh);
MeshFlow mesh_from_json(const std::string& text);
void save_mesh(const MeshFlow& mesh, const std::string& path);
MeshFlow load_mesh(const std::string& path);

}  // namespace mf
