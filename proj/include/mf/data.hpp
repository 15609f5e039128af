#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mf/geometry.hpp"
#include "mf/tensor.hpp"

namespace mf {

// Scene categories of the evaluation protocol: single plane, multiple
// dominant planes, large foreground, low texture, low light.
enum class Category { SP, MP, LF, LT, LL };

const char* to_string(Category c);
Category category_from_string(const std::string& s);

struct PointPair {
  double sx = 0, sy = 0;  // source, px
  double tx = 0, ty = 0;  // target, px
};

struct AnnotatedPair {
  std::string source_path;
  std::string target_path;
  Category category = Category::SP;
  std::vector<PointPair> points;
};

struct SyntheticSample {
  Tensor<float> image_a;  // [C,H,W]
  Tensor<float> image_b;
  MeshFlow gt_mesh;
  std::vector<PointPair> gt_points;
  std::uint64_t seed = 0;
};

enum class SynthMode { global_h, mesh, multi_plane };

SynthMode synth_mode_from_string(const std::string& s);
const char* to_string(SynthMode m);

// Procedural base textures. `textured` layers several octaves of value
// noise; `low_texture` keeps only the coarse octaves at reduced contrast;
// `low_light` gamma-darkens a textured base and adds sigma=0.02 noise.
enum class BaseStyle { textured, low_texture, low_light };

Tensor<float> make_base_image(int h, int w, BaseStyle style, std::uint64_t seed);

// Draws a ground-truth mesh by the given mode, renders image_b by warping a
// base image whose margin keeps all samples in-bounds, and annotates 10
// points on a jittered lattice. Pure function of its arguments; degenerate
// draws are retried on derived seeds (bounded, then ConfigError).
//
// base is [C, image_h + 2*margin, image_w + 2*margin] with equal margins on
// both axes; margin must be at least max_disp + 2 and max_disp must stay
// under half a mesh cell.
SyntheticSample generate_synthetic_pair(const Tensor<float>& base,
                                        const GridSpec& grid, double max_disp,
                                        SynthMode mode, std::uint64_t seed);

// Dataset root layout: root/manifest.json with {"pairs": [{source, target,
// category, points: [[sx,sy,tx,ty], ...]}, ...]}, image paths relative to
// the root. Loading validates files exist and points lie inside the images.
std::vector<AnnotatedPair> load_dataset(const std::string& root_dir);
void save_manifest(const std::string& root_dir,
                   const std::vector<AnnotatedPair>& pairs);

// The same random window cut from both images (relative motion preserved).
std::pair<Tensor<float>, Tensor<float>> crop_augment(const Tensor<float>& ia,
                                                     const Tensor<float>& ib,
                                                     int crop_h, int crop_w,
                                                     std::uint64_t seed);

}  // namespace mf
