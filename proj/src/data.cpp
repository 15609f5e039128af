#include "mf/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mf/errors.hpp"
#include "mf/image_io.hpp"
#include "mf/rng.hpp"
#include "mf/warp.hpp"

namespace mf {

const char* to_string(Category c) {
  switch (c) {
    case Category::SP: return "SP";
    case Category::MP: return "MP";
    case Category::LF: return "LF";
    case Category::LT: return "LT";
    case Category::LL: return "LL";
  }
  return "?";
}

Category category_from_string(const std::string& s) {
  if (s == "SP") return Category::SP;
  if (s == "MP") return Category::MP;
  if (s == "LF") return Category::LF;
  if (s == "LT") return Category::LT;
  if (s == "LL") return Category::LL;
  throw ValidationError("unknown category '" + s + "'");
}

const char* to_string(SynthMode m) {
  switch (m) {
    case SynthMode::global_h: return "global_h";
    case SynthMode::mesh: return "mesh";
    case SynthMode::multi_plane: return "multi_plane";
  }
  return "?";
}

SynthMode synth_mode_from_string(const std::string& s) {
  if (s == "global_h") return SynthMode::global_h;
  if (s == "mesh") return SynthMode::mesh;
  if (s == "multi_plane") return SynthMode::multi_plane;
  throw ConfigError("unknown synth mode '" + s + "'");
}

namespace {

// Corner-aligned bilinear resize of one [h,w] plane to [oh,ow].
void resize_plane(const std::vector<float>& in, int h, int w,
                  std::vector<float>& out, int oh, int ow) {
  out.resize(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    const double sy = oh == 1 ? 0.0 : static_cast<double>(y) * (h - 1) / (oh - 1);
    const int y0 = std::min(static_cast<int>(sy), h - 2 < 0 ? 0 : h - 2);
    const double fy = sy - y0;
    for (int x = 0; x < ow; ++x) {
      const double sx = ow == 1 ? 0.0 : static_cast<double>(x) * (w - 1) / (ow - 1);
      const int x0 = std::min(static_cast<int>(sx), w - 2 < 0 ? 0 : w - 2);
      const double fx = sx - x0;
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double v =
          (1 - fy) * ((1 - fx) * in[static_cast<std::size_t>(y0) * w + x0] +
                      fx * in[static_cast<std::size_t>(y0) * w + x1]) +
          fy * ((1 - fx) * in[static_cast<std::size_t>(y1) * w + x0] +
                fx * in[static_cast<std::size_t>(y1) * w + x1]);
      out[static_cast<std::size_t>(y) * ow + x] = static_cast<float>(v);
    }
  }
}

Tensor<float> octave_noise(int h, int w, const std::vector<int>& sizes,
                           const std::vector<double>& weights, Rng& rng) {
  std::vector<float> acc(static_cast<std::size_t>(3) * h * w, 0.0f);
  std::vector<float> level, resized;
  for (std::size_t o = 0; o < sizes.size(); ++o) {
    const int s = sizes[o];
    for (int c = 0; c < 3; ++c) {
      level.resize(static_cast<std::size_t>(s) * s);
      for (float& v : level) v = static_cast<float>(rng.uniform());
      resize_plane(level, s, s, resized, h, w);
      float* plane = acc.data() + static_cast<std::size_t>(c) * h * w;
      const float wgt = static_cast<float>(weights[o]);
      for (std::size_t i = 0; i < resized.size(); ++i) plane[i] += wgt * resized[i];
    }
  }
  return Tensor<float>::from_vector({3, h, w}, std::move(acc));
}

Homography corner_perturb_h(const GridSpec& spec, double max_disp, Rng& rng) {
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

MeshFlow draw_mesh(const GridSpec& spec, double max_disp, SynthMode mode,
                   Rng& rng) {
  MeshFlow mesh = MeshFlow::zero(spec);
  switch (mode) {
    case SynthMode::global_h: {
      const Homography h = corner_perturb_h(spec, max_disp, rng);
      for (int v = 0; v < spec.vertex_rows(); ++v) {
        for (int u = 0; u < spec.vertex_cols(); ++u) {
          const Vec2 p = spec.vertex_pos(v, u);
          mesh.motion(v, u) = h.apply(p) - p;
        }
      }
      break;
    }
    case SynthMode::mesh: {
      for (Vec2& m : mesh.motions) {
        m = {rng.uniform(-max_disp, max_disp), rng.uniform(-max_disp, max_disp)};
      }
      break;
    }
    case SynthMode::multi_plane: {
      const Homography h1 = corner_perturb_h(spec, max_disp, rng);
      const Homography h2 = corner_perturb_h(spec, max_disp, rng);
      // vertical seam at a vertex column: vertices strictly left follow h1
      const int seam = 1 + static_cast<int>(rng.uniform_int(
                               static_cast<std::uint64_t>(spec.grid_w - 1)));
      for (int v = 0; v < spec.vertex_rows(); ++v) {
        for (int u = 0; u < spec.vertex_cols(); ++u) {
          const Vec2 p = spec.vertex_pos(v, u);
          const Homography& h = u < seam ? h1 : h2;
          mesh.motion(v, u) = h.apply(p) - p;
        }
      }
      break;
    }
  }
  return mesh;
}

double sample_base(std::span<const float> base, int c, int bh, int bw, int ci,
                   double sx, double sy) {
  const int x0 = static_cast<int>(std::floor(sx));
  const int y0 = static_cast<int>(std::floor(sy));
  const double fx = sx - x0, fy = sy - y0;
  auto fetch = [&](int y, int x) -> double {
    if (y < 0 || y >= bh || x < 0 || x >= bw) return 0.0;
    return base[(static_cast<std::size_t>(ci) * bh + y) * bw + x];
  };
  return (1 - fy) * ((1 - fx) * fetch(y0, x0) + fx * fetch(y0, x0 + 1)) +
         fy * ((1 - fx) * fetch(y0 + 1, x0) + fx * fetch(y0 + 1, x0 + 1));
}

}  // namespace

Tensor<float> make_base_image(int h, int w, BaseStyle style, std::uint64_t seed) {
  if (h < 2 || w < 2) throw ConfigError("base image must be at least 2x2");
  Rng rng(mix_seed(seed, 0x6261736531ull));
  switch (style) {
    case BaseStyle::textured:
      return octave_noise(h, w, {5, 9, 17, 33}, {0.45, 0.30, 0.15, 0.10}, rng);
    case BaseStyle::low_texture: {
      auto img = octave_noise(h, w, {3, 7}, {0.8, 0.2}, rng);
      auto v = img.raw_values();
      for (float& x : v) x = 0.5f + 0.45f * (x - 0.5f);
      return img;
    }
    case BaseStyle::low_light: {
      auto img = octave_noise(h, w, {5, 9, 17, 33}, {0.45, 0.30, 0.15, 0.10}, rng);
      auto v = img.raw_values();
      for (float& x : v) {
        const double dark = std::pow(static_cast<double>(x), 2.2) + rng.normal(0.0, 0.02);
        x = static_cast<float>(std::clamp(dark, 0.0, 1.0));
      }
      return img;
    }
  }
  throw ConfigError("unknown base style");
}

SyntheticSample generate_synthetic_pair(const Tensor<float>& base,
                                        const GridSpec& grid, double max_disp,
                                        SynthMode mode, std::uint64_t seed) {
  grid.validate();
  if (base.rank() != 3) throw ShapeError("base must be [C,H,W]");
  const int c = base.dim(0), bh = base.dim(1), bw = base.dim(2);
  const int h = static_cast<int>(grid.image_h);
  const int w = static_cast<int>(grid.image_w);
  if (grid.image_h != h || grid.image_w != w) {
    throw ConfigError("synthetic grid extent must be whole pixels");
  }
  if ((bh - h) % 2 || (bw - w) % 2 || bh <= h || bw <= w) {
    throw ConfigError("base must exceed the crop by an equal margin per side");
  }
  const int margin_y = (bh - h) / 2;
  const int margin_x = (bw - w) / 2;
  if (margin_y < max_disp + 2 || margin_x < max_disp + 2) {
    throw ConfigError("base margin must be at least max_disp + 2");
  }
  if (!(max_disp >= 0) ||
      max_disp >= 0.5 * std::min(grid.cell_w(), grid.cell_h())) {
    throw ConfigError("max_disp must be non-negative and under half a mesh cell");
  }

  constexpr int kRetries = 16;
  for (int attempt = 0; attempt < kRetries; ++attempt) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(attempt)));
    MeshFlow mesh = draw_mesh(grid, max_disp, mode, rng);
    try {
      mesh_to_homographies(mesh);  // degeneracy check
    } catch (const DegenerateCellError&) {
      continue;
    }
    bool motions_bounded = true;
    for (const Vec2& m : mesh.motions) {
      if (std::abs(m.x) > margin_x - 1 || std::abs(m.y) > margin_y - 1) {
        motions_bounded = false;
        break;
      }
    }
    if (!motions_bounded) continue;

    SyntheticSample sample;
    sample.seed = seed;
    sample.gt_mesh = mesh;

    // image_a: center crop of the base
    auto bv = base.values();
    std::vector<float> ia(static_cast<std::size_t>(c) * h * w);
    for (int ci = 0; ci < c; ++ci) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          ia[(static_cast<std::size_t>(ci) * h + y) * w + x] =
              bv[(static_cast<std::size_t>(ci) * bh + y + margin_y) * bw + x + margin_x];
        }
      }
    }
    sample.image_a = Tensor<float>::from_vector({c, h, w}, std::move(ia));

    // image_b: backward-warp the base through the ground-truth mesh; the
    // margin keeps every sample in-bounds, so no fill pixels appear.
    const SampleGrid sg = mesh_to_sample_grid(mesh, h, w);
    std::vector<float> ib(static_cast<std::size_t>(c) * h * w);
    for (int ci = 0; ci < c; ++ci) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const Vec2 s = sg.at(y, x);
          ib[(static_cast<std::size_t>(ci) * h + y) * w + x] = static_cast<float>(
              sample_base(bv, c, bh, bw, ci, s.x + margin_x, s.y + margin_y));
        }
      }
    }
    sample.image_b = Tensor<float>::from_vector({c, h, w}, std::move(ib));

    // 10 annotated points on a jittered 5x2 lattice, margins clear of the
    // maximum displacement so targets stay in-bounds.
    const double pm_x = std::max(0.08 * w, max_disp + 2.0);
    const double pm_y = std::max(0.08 * h, max_disp + 2.0);
    const int cols = 5, rows = 2;
    for (int r = 0; r < rows; ++r) {
      for (int q = 0; q < cols; ++q) {
        const double gx = pm_x + (w - 2 * pm_x) * (cols == 1 ? 0.5 : static_cast<double>(q) / (cols - 1));
        const double gy = pm_y + (h - 2 * pm_y) * (rows == 1 ? 0.5 : static_cast<double>(r) / (rows - 1));
        const double jx = rng.uniform(-0.04, 0.04) * w;
        const double jy = rng.uniform(-0.04, 0.04) * h;
        const Vec2 p{std::clamp(gx + jx, 1.0, w - 1.0), std::clamp(gy + jy, 1.0, h - 1.0)};
        const Vec2 t = transfer_point(mesh, p);
        sample.gt_points.push_back({p.x, p.y, t.x, t.y});
      }
    }

    // generation-time consistency check of the advertised invariant
    for (const PointPair& pp : sample.gt_points) {
      const Vec2 t = transfer_point(mesh, {pp.sx, pp.sy});
      if (std::abs(t.x - pp.tx) > 1e-4 || std::abs(t.y - pp.ty) > 1e-4) {
        throw NumericsError("synthetic sample failed its own point check");
      }
    }
    return sample;
  }
  throw ConfigError("could not draw a non-degenerate synthetic sample in " +
                    std::to_string(kRetries) + " attempts (seed " +
                    std::to_string(seed) + ")");
}

std::vector<AnnotatedPair> load_dataset(const std::string& root_dir) {
  namespace fs = std::filesystem;
  const fs::path root(root_dir);
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest: " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()), e.byte);
  }

  std::vector<AnnotatedPair> pairs;
  try {
    for (const auto& entry : j.at("pairs")) {
      AnnotatedPair pair;
      pair.source_path = (root / entry.at("source").get<std::string>()).string();
      pair.target_path = (root / entry.at("target").get<std::string>()).string();
      pair.category = category_from_string(entry.at("category").get<std::string>());
      for (const auto& pt : entry.at("points")) {
        if (!pt.is_array() || pt.size() != 4) {
          throw FormatError("points must be [sx,sy,tx,ty] quadruples");
        }
        pair.points.push_back({pt[0].get<double>(), pt[1].get<double>(),
                               pt[2].get<double>(), pt[3].get<double>()});
      }
      pairs.push_back(std::move(pair));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest missing or mistyped field: " + std::string(e.what()));
  }

  // validation: files exist, at least one point, points inside the images
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const AnnotatedPair& p = pairs[i];
    const std::string id = "pair " + std::to_string(i) + " (" + p.source_path + ")";
    if (!fs::exists(p.source_path)) throw IoError("missing image: " + p.source_path);
    if (!fs::exists(p.target_path)) throw IoError("missing image: " + p.target_path);
    if (p.points.empty()) throw ValidationError(id + ": no point annotations");
    const auto [sh, sw] = read_image_size(p.source_path);
    const auto [th, tw] = read_image_size(p.target_path);
    for (const PointPair& pt : p.points) {
      if (pt.sx < 0 || pt.sx > sw || pt.sy < 0 || pt.sy > sh) {
        throw ValidationError(id + ": source point (" + std::to_string(pt.sx) +
                              "," + std::to_string(pt.sy) + ") outside image");
      }
      if (pt.tx < 0 || pt.tx > tw || pt.ty < 0 || pt.ty > th) {
        throw ValidationError(id + ": target point (" + std::to_string(pt.tx) +
                              "," + std::to_string(pt.ty) + ") outside image");
      }
    }
  }
  return pairs;
}

void save_manifest(const std::string& root_dir,
                   const std::vector<AnnotatedPair>& pairs) {
  namespace fs = std::filesystem;
  const fs::path root(root_dir);
  nlohmann::json j;
  j["pairs"] = nlohmann::json::array();
  for (const AnnotatedPair& p : pairs) {
    nlohmann::json entry;
    entry["source"] = fs::relative(p.source_path, root).string();
    entry["target"] = fs::relative(p.target_path, root).string();
    entry["category"] = to_string(p.category);
    nlohmann::json pts = nlohmann::json::array();
    for (const PointPair& pt : p.points) {
      pts.push_back({pt.sx, pt.sy, pt.tx, pt.ty});
    }
    entry["points"] = std::move(pts);
    j["pairs"].push_back(std::move(entry));
  }
  const fs::path path = root / "manifest.json";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

std::pair<Tensor<float>, Tensor<float>> crop_augment(const Tensor<float>& ia,
                                                     const Tensor<float>& ib,
                                                     int crop_h, int crop_w,
                                                     std::uint64_t seed) {
  if (ia.rank() != 3 || ib.rank() != 3 || ia.shape() != ib.shape()) {
    throw ShapeError("crop_augment expects two [C,H,W] images of equal shape");
  }
  const int c = ia.dim(0), h = ia.dim(1), w = ia.dim(2);
  if (crop_h < 1 || crop_w < 1 || crop_h > h || crop_w > w) {
    throw ShapeError("crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) +
                     " does not fit in " + std::to_string(h) + "x" + std::to_string(w));
  }
  Rng rng(mix_seed(seed, 0x63726f70ull));
  const int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - crop_h + 1)));
  const int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w - crop_w + 1)));

  auto cut = [&](const Tensor<float>& img) {
    auto v = img.values();
    std::vector<float> out(static_cast<std::size_t>(c) * crop_h * crop_w);
    for (int ci = 0; ci < c; ++ci) {
      for (int y = 0; y < crop_h; ++y) {
        for (int x = 0; x < crop_w; ++x) {
          out[(static_cast<std::size_t>(ci) * crop_h + y) * crop_w + x] =
              v[(static_cast<std::size_t>(ci) * h + y + y0) * w + x + x0];
        }
      }
    }
    return Tensor<float>::from_vector({c, crop_h, crop_w}, std::move(out));
  };
  return {cut(ia), cut(ib)};
}

}  // namespace mf
