#include "mf/geometry.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace mf {

void GridSpec::validate() const {
  if (grid_h < 1 || grid_w < 1) {
    throw ConfigError("grid dims must be >= 1, got " + std::to_string(grid_h) +
                      "x" + std::to_string(grid_w));
  }
  if (!(image_h > 0) || !(image_w > 0)) {
    throw ConfigError("image extent must be positive");
  }
}

MeshFlow MeshFlow::zero(const GridSpec& spec) {
  spec.validate();
  MeshFlow m;
  m.spec = spec;
  m.motions.assign(
      static_cast<std::size_t>(spec.vertex_rows()) * spec.vertex_cols(), Vec2{});
  return m;
}

void MeshFlow::validate() const {
  spec.validate();
  const std::size_t expected =
      static_cast<std::size_t>(spec.vertex_rows()) * spec.vertex_cols();
  if (motions.size() != expected) {
    throw ShapeError("mesh motion count " + std::to_string(motions.size()) +
                     " does not match grid " + std::to_string(spec.grid_h) + "x" +
                     std::to_string(spec.grid_w));
  }
  for (const Vec2& v : motions) {
    if (!std::isfinite(v.x) || !std::isfinite(v.y)) {
      throw NumericsError("non-finite mesh motion");
    }
  }
}

Homography Homography::translation(double tx, double ty) {
  Homography h;
  h.m[0][2] = tx;
  h.m[1][2] = ty;
  return h;
}

Vec2 Homography::apply(Vec2 p) const {
  const double x = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
  const double y = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
  const double w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
  if (std::abs(w) < 1e-12) {
    throw NumericsError("homography maps point to infinity");
  }
  return {x / w, y / w};
}

double Homography::det() const {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Homography Homography::inverse() const {
  const double d = det();
  if (std::abs(d) < 1e-12) throw NumericsError("singular homography");
  Homography r;
  r.m[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
  r.m[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
  r.m[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
  r.m[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d;
  r.m[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
  r.m[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
  r.m[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d;
  r.m[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d;
  r.m[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
  return r;
}

Homography Homography::normalized() const {
  const double s = m[2][2];
  if (std::abs(s) < 1e-12) return *this;  // not representable; keep as-is
  Homography r = *this;
  for (auto& row : r.m) {
    for (double& v : row) v /= s;
  }
  return r;
}

Homography matmul(const Homography& a, const Homography& b) {
  Homography r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int k = 0; k < 3; ++k) acc += a.m[i][k] * b.m[k][j];
      r.m[i][j] = acc;
    }
  }
  return r;
}

namespace {

// Gauss-Jordan inverse of an 8x8 system with partial pivoting. Returns false
// when a pivot falls below `tol` (singular / degenerate configuration).
bool invert8x8(std::array<double, 64>& a, std::array<double, 64>& inv,
               double tol) {
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) inv[static_cast<std::size_t>(i * 8 + j)] = (i == j) ? 1.0 : 0.0;
  }
  for (int col = 0; col < 8; ++col) {
    int pivot = col;
    double best = std::abs(a[static_cast<std::size_t>(col * 8 + col)]);
    for (int r = col + 1; r < 8; ++r) {
      const double v = std::abs(a[static_cast<std::size_t>(r * 8 + col)]);
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    if (best < tol) return false;
    if (pivot != col) {
      for (int j = 0; j < 8; ++j) {
        std::swap(a[static_cast<std::size_t>(col * 8 + j)], a[static_cast<std::size_t>(pivot * 8 + j)]);
        std::swap(inv[static_cast<std::size_t>(col * 8 + j)], inv[static_cast<std::size_t>(pivot * 8 + j)]);
      }
    }
    const double piv = a[static_cast<std::size_t>(col * 8 + col)];
    for (int j = 0; j < 8; ++j) {
      a[static_cast<std::size_t>(col * 8 + j)] /= piv;
      inv[static_cast<std::size_t>(col * 8 + j)] /= piv;
    }
    for (int r = 0; r < 8; ++r) {
      if (r == col) continue;
      const double f = a[static_cast<std::size_t>(r * 8 + col)];
      if (f == 0.0) continue;
      for (int j = 0; j < 8; ++j) {
        a[static_cast<std::size_t>(r * 8 + j)] -= f * a[static_cast<std::size_t>(col * 8 + j)];
        inv[static_cast<std::size_t>(r * 8 + j)] -= f * inv[static_cast<std::size_t>(col * 8 + j)];
      }
    }
  }
  return true;
}

double cross(Vec2 o, Vec2 a, Vec2 b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

}  // namespace

bool quad_is_valid(const std::array<Vec2, 4>& c, double area_scale) {
  const double eps = 1e-9 * std::max(area_scale, 1.0);
  for (int i = 0; i < 4; ++i) {
    const Vec2 prev = c[static_cast<std::size_t>((i + 3) % 4)];
    const Vec2 cur = c[static_cast<std::size_t>(i)];
    const Vec2 next = c[static_cast<std::size_t>((i + 1) % 4)];
    if (cross(prev, cur, next) <= eps) return false;
  }
  return true;
}

CellSolve solve_cell(const std::array<Vec2, 4>& src,
                     const std::array<Vec2, 4>& dst) {
  // Rows 2i, 2i+1 for correspondence (x,y) -> (X,Y):
  //   [x y 1 0 0 0 -Xx -Xy] h = X
  //   [0 0 0 x y 1 -Yx -Yy] h = Y
  std::array<double, 64> a{};
  std::array<double, 8> b{};
  for (int i = 0; i < 4; ++i) {
    const double x = src[static_cast<std::size_t>(i)].x;
    const double y = src[static_cast<std::size_t>(i)].y;
    const double X = dst[static_cast<std::size_t>(i)].x;
    const double Y = dst[static_cast<std::size_t>(i)].y;
    double* r0 = a.data() + (2 * i) * 8;
    double* r1 = a.data() + (2 * i + 1) * 8;
    r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -X * x; r0[7] = -X * y;
    r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -Y * x; r1[7] = -Y * y;
    b[static_cast<std::size_t>(2 * i)] = X;
    b[static_cast<std::size_t>(2 * i + 1)] = Y;
  }

  CellSolve out;
  std::array<double, 64> work = a;
  if (!invert8x8(work, out.a_inv, 1e-10)) {
    throw DegenerateCellError("singular DLT system");
  }
  // An untouched cell must solve to the exact identity (zero-mesh contracts
  // are bit-exact); the elimination otherwise leaves ~1e-16 residue.
  const bool is_identity =
      src[0].x == dst[0].x && src[0].y == dst[0].y && src[1].x == dst[1].x &&
      src[1].y == dst[1].y && src[2].x == dst[2].x && src[2].y == dst[2].y &&
      src[3].x == dst[3].x && src[3].y == dst[3].y;
  if (is_identity) {
    out.h = {1, 0, 0, 0, 1, 0, 0, 0};
    out.w = {1, 1, 1, 1};
    return out;
  }
  for (int r = 0; r < 8; ++r) {
    double acc = 0;
    for (int c = 0; c < 8; ++c) acc += out.a_inv[static_cast<std::size_t>(r * 8 + c)] * b[static_cast<std::size_t>(c)];
    out.h[static_cast<std::size_t>(r)] = acc;
  }
  for (int i = 0; i < 4; ++i) {
    out.w[static_cast<std::size_t>(i)] = out.h[6] * src[static_cast<std::size_t>(i)].x +
                                         out.h[7] * src[static_cast<std::size_t>(i)].y + 1.0;
  }
  return out;
}

void cell_pullback(const CellSolve& solve, const double dl_dh[8],
                   Vec2 dl_ddst[4]) {
  // dh/dX_i = w_i * column(2i) of A^-1; dh/dY_i uses column 2i+1.
  for (int i = 0; i < 4; ++i) {
    double gx = 0, gy = 0;
    for (int k = 0; k < 8; ++k) {
      gx += dl_dh[k] * solve.a_inv[static_cast<std::size_t>(k * 8 + 2 * i)];
      gy += dl_dh[k] * solve.a_inv[static_cast<std::size_t>(k * 8 + 2 * i + 1)];
    }
    dl_ddst[i].x = solve.w[static_cast<std::size_t>(i)] * gx;
    dl_ddst[i].y = solve.w[static_cast<std::size_t>(i)] * gy;
  }
}

Homography solve_cell_homography(const std::array<Vec2, 4>& src,
                                 const std::array<Vec2, 4>& dst) {
  // src must be an axis-aligned rectangle in cyclic TL,TR,BR,BL order.
  const bool rect = src[0].x == src[3].x && src[1].x == src[2].x &&
                    src[0].y == src[1].y && src[2].y == src[3].y &&
                    src[1].x > src[0].x && src[3].y > src[0].y;
  if (!rect) {
    throw ConfigError("solve_cell_homography: src corners must form an "
                      "axis-aligned rectangle (TL,TR,BR,BL)");
  }
  for (const Vec2& d : dst) {
    if (!std::isfinite(d.x) || !std::isfinite(d.y)) {
      throw NumericsError("solve_cell_homography: non-finite dst corner");
    }
  }
  const double area = (src[1].x - src[0].x) * (src[3].y - src[0].y);
  if (!quad_is_valid(dst, area)) {
    throw DegenerateCellError("degenerate destination quad");
  }
  const CellSolve s = solve_cell(src, dst);
  Homography h;
  h.m = {{{s.h[0], s.h[1], s.h[2]}, {s.h[3], s.h[4], s.h[5]}, {s.h[6], s.h[7], 1.0}}};
  return h;
}

std::array<Vec2, 4> cell_corners(const GridSpec& spec, int row, int col) {
  return {spec.vertex_pos(row, col), spec.vertex_pos(row, col + 1),
          spec.vertex_pos(row + 1, col + 1), spec.vertex_pos(row + 1, col)};
}

std::array<Vec2, 4> deformed_corners(const MeshFlow& mesh, int row, int col) {
  const auto base = cell_corners(mesh.spec, row, col);
  return {base[0] + mesh.motion(row, col), base[1] + mesh.motion(row, col + 1),
          base[2] + mesh.motion(row + 1, col + 1),
          base[3] + mesh.motion(row + 1, col)};
}

std::vector<Homography> mesh_to_homographies(const MeshFlow& mesh) {
  mesh.validate();
  const GridSpec& spec = mesh.spec;
  std::vector<Homography> out;
  out.reserve(static_cast<std::size_t>(spec.grid_h) * spec.grid_w);
  const double area = spec.cell_w() * spec.cell_h();
  for (int i = 0; i < spec.grid_h; ++i) {
    for (int j = 0; j < spec.grid_w; ++j) {
      const auto src = cell_corners(spec, i, j);
      const auto dst = deformed_corners(mesh, i, j);
      if (!quad_is_valid(dst, area)) {
        throw DegenerateCellError("deformed quad is degenerate", i, j);
      }
      try {
        const CellSolve s = solve_cell(src, dst);
        Homography h;
        h.m = {{{s.h[0], s.h[1], s.h[2]},
                {s.h[3], s.h[4], s.h[5]},
                {s.h[6], s.h[7], 1.0}}};
        out.push_back(h);
      } catch (const DegenerateCellError&) {
        throw DegenerateCellError("singular DLT system", i, j);
      }
    }
  }
  return out;
}

int cell_index_for(double coord, double cell_extent, int cells) {
  // ceil(coord / extent) - 1 puts boundary points in the lower cell.
  const int idx = static_cast<int>(std::ceil(coord / cell_extent)) - 1;
  return std::clamp(idx, 0, cells - 1);
}

Vec2 transfer_point(const MeshFlow& mesh, Vec2 p) {
  const GridSpec& spec = mesh.spec;
  if (p.x < 0 || p.x > spec.image_w || p.y < 0 || p.y > spec.image_h) {
    throw OutOfBoundsError("point (" + std::to_string(p.x) + "," +
                           std::to_string(p.y) + ") outside image extent");
  }
  const int col = cell_index_for(p.x, spec.cell_w(), spec.grid_w);
  const int row = cell_index_for(p.y, spec.cell_h(), spec.grid_h);
  const auto src = cell_corners(spec, row, col);
  const auto dst = deformed_corners(mesh, row, col);
  const double area = spec.cell_w() * spec.cell_h();
  if (!quad_is_valid(dst, area)) {
    throw DegenerateCellError("deformed quad is degenerate", row, col);
  }
  CellSolve s;
  try {
    s = solve_cell(src, dst);
  } catch (const DegenerateCellError&) {
    throw DegenerateCellError("singular DLT system", row, col);
  }
  Homography h;
  h.m = {{{s.h[0], s.h[1], s.h[2]}, {s.h[3], s.h[4], s.h[5]}, {s.h[6], s.h[7], 1.0}}};
  return h.apply(p);
}

MeshFlow upsample_mesh(const MeshFlow& coarse, const GridSpec& target_spec) {
  coarse.validate();
  target_spec.validate();
  if (target_spec.image_h != coarse.spec.image_h ||
      target_spec.image_w != coarse.spec.image_w) {
    throw ShapeError("upsample_mesh: image extents differ");
  }
  if (target_spec.grid_h % coarse.spec.grid_h ||
      target_spec.grid_w % coarse.spec.grid_w) {
    throw ShapeError("upsample_mesh: target grid dims must be multiples of "
                     "the coarse dims");
  }
  const int fy = target_spec.grid_h / coarse.spec.grid_h;
  const int fx = target_spec.grid_w / coarse.spec.grid_w;
  MeshFlow out = MeshFlow::zero(target_spec);
  for (int v = 0; v < target_spec.vertex_rows(); ++v) {
    const int cv = v / fy;
    const int ry = v % fy;
    for (int u = 0; u < target_spec.vertex_cols(); ++u) {
      const int cu = u / fx;
      const int rx = u % fx;
      if (ry == 0 && rx == 0) {
        out.motion(v, u) = coarse.motion(cv, cu);  // exact on the lattice
        continue;
      }
      const double ty = static_cast<double>(ry) / fy;
      const double tx = static_cast<double>(rx) / fx;
      const int cv1 = std::min(cv + 1, coarse.spec.vertex_rows() - 1);
      const int cu1 = std::min(cu + 1, coarse.spec.vertex_cols() - 1);
      const Vec2 m00 = coarse.motion(cv, cu), m01 = coarse.motion(cv, cu1);
      const Vec2 m10 = coarse.motion(cv1, cu), m11 = coarse.motion(cv1, cu1);
      out.motion(v, u) = {
          (1 - ty) * ((1 - tx) * m00.x + tx * m01.x) + ty * ((1 - tx) * m10.x + tx * m11.x),
          (1 - ty) * ((1 - tx) * m00.y + tx * m01.y) + ty * ((1 - tx) * m10.y + tx * m11.y)};
    }
  }
  return out;
}

MeshFlow fuse_meshes(const std::vector<MeshFlow>& meshes,
                     std::span<const double> seg, FuseMode mode) {
  if (meshes.empty()) throw ShapeError("fuse_meshes: no meshes");
  const GridSpec& spec = meshes[0].spec;
  for (const MeshFlow& m : meshes) {
    if (!(m.spec == spec)) throw ShapeError("fuse_meshes: mixed grid specs");
  }
  const std::size_t k = meshes.size();
  const std::size_t vertices =
      static_cast<std::size_t>(spec.vertex_rows()) * spec.vertex_cols();
  if (seg.size() != vertices * k) {
    throw ShapeError("fuse_meshes: seg volume has " + std::to_string(seg.size()) +
                     " entries, expected " + std::to_string(vertices * k));
  }
  for (double v : seg) {
    if (!std::isfinite(v)) throw NumericsError("fuse_meshes: non-finite seg");
  }

  MeshFlow out = MeshFlow::zero(spec);
  for (std::size_t i = 0; i < vertices; ++i) {
    const double* logits = seg.data() + i * k;
    if (mode == FuseMode::hard) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (logits[j] > logits[best]) best = j;  // ties keep the lowest index
      }
      out.motions[i] = meshes[best].motions[i];
    } else {
      double mx = logits[0];
      for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[j]);
      double denom = 0;
      for (std::size_t j = 0; j < k; ++j) denom += std::exp(logits[j] - mx);
      Vec2 acc{};
      for (std::size_t j = 0; j < k; ++j) {
        const double w = std::exp(logits[j] - mx) / denom;
        acc = acc + w * meshes[j].motions[i];
      }
      out.motions[i] = acc;
    }
  }
  return out;
}

double inverse_consistency_residual(const std::vector<Homography>& hab,
                                    const std::vector<Homography>& hba) {
  if (hab.size() != hba.size() || hab.empty()) {
    throw ShapeError("inverse_consistency_residual: grid size mismatch");
  }
  double total = 0;
  for (std::size_t c = 0; c < hab.size(); ++c) {
    const Homography p = matmul(hab[c], hba[c]);
    const double s = p.m[2][2];
    if (std::abs(s) < 1e-12) {
      throw NumericsError("inverse_consistency_residual: product not "
                          "normalizable at cell " + std::to_string(c));
    }
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const double v = p.m[i][j] / s - (i == j ? 1.0 : 0.0);
        total += std::abs(v);
      }
    }
  }
  return total / static_cast<double>(hab.size());
}

std::string mesh_to_json(const MeshFlow& mesh) {
  mesh.validate();
  nlohmann::json j;
  j["grid_h"] = mesh.spec.grid_h;
  j["grid_w"] = mesh.spec.grid_w;
  j["image_h"] = mesh.spec.image_h;
  j["image_w"] = mesh.spec.image_w;
  nlohmann::json motions = nlohmann::json::array();
  for (const Vec2& m : mesh.motions) motions.push_back({m.x, m.y});
  j["motions"] = std::move(motions);
  return j.dump(2);
}

MeshFlow mesh_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("mesh file is not valid JSON: " + std::string(e.what()),
                      e.byte);
  }
  try {
    MeshFlow mesh;
    mesh.spec.grid_h = j.at("grid_h").get<int>();
    mesh.spec.grid_w = j.at("grid_w").get<int>();
    mesh.spec.image_h = j.at("image_h").get<double>();
    mesh.spec.image_w = j.at("image_w").get<double>();
    for (const auto& pair : j.at("motions")) {
      if (!pair.is_array() || pair.size() != 2) {
        throw FormatError("mesh motions must be [dx, dy] pairs");
      }
      mesh.motions.push_back({pair[0].get<double>(), pair[1].get<double>()});
    }
    mesh.validate();
    return mesh;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("mesh file missing or mistyped field: " +
                      std::string(e.what()));
  } catch (const Error&) {
    throw;
  }
}

void save_mesh(const MeshFlow& mesh, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << mesh_to_json(mesh) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

MeshFlow load_mesh(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return mesh_from_json(ss.str());
}

}  // namespace mf
