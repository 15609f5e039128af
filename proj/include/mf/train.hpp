#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mf/checkpoint.hpp"
#include "mf/data.hpp"
#include "mf/loss.hpp"
#include "mf/network.hpp"
#include "mf/optim.hpp"

namespace mf {

// Batch supplier. sample() must be a pure function of (master_seed, iter,
// slot): training determinism relies on it.
class PairSource {
 public:
  virtual ~PairSource() = default;
  // Returns one (image_a, image_b) pair as [3,H,W] tensors.
  virtual std::pair<Tensor<float>, Tensor<float>> sample(std::uint64_t master_seed,
                                                         int iter, int slot) = 0;
};

// On-the-fly synthetic curriculum: procedural bases warped by ground-truth
// meshes. Base styles rotate so all five scene categories appear.
class SyntheticPairSource : public PairSource {
 public:
  struct Options {
    int height = 128;
    int width = 128;
    int grid_h = 16;
    int grid_w = 16;
    double max_disp = 3.0;
    std::vector<SynthMode> modes = {SynthMode::multi_plane};
    bool rotate_styles = true;  // textured x3, low_texture, low_light
  };
  explicit SyntheticPairSource(Options opt) : opt_(opt) {}

  std::pair<Tensor<float>, Tensor<float>> sample(std::uint64_t master_seed,
                                                 int iter, int slot) override;

  // Deterministic sample with full ground truth (used by evaluation).
  SyntheticSample sample_full(std::uint64_t master_seed, long long index) const;
  static Category category_of(SynthMode mode, BaseStyle style);
  BaseStyle style_of(long long index) const;
  SynthMode mode_of(long long index) const;
  const Options& options() const { return opt_; }

 private:
  Options opt_;
};

// Pairs drawn from an annotated dataset with the same random crop applied to
// both images.
class DatasetPairSource : public PairSource {
 public:
  DatasetPairSource(std::vector<AnnotatedPair> pairs, int crop_h, int crop_w);
  std::pair<Tensor<float>, Tensor<float>> sample(std::uint64_t master_seed,
                                                 int iter, int slot) override;

 private:
  std::vector<AnnotatedPair> pairs_;
  int crop_h_, crop_w_;
};

struct LossRow {
  int iter = 0;
  double ln_ab = 0, ln_ba = 0, l_feat = 0, inv = 0, total = 0, lr = 0;
};

struct TrainOptions {
  ModelConfig model;
  OptimConfig optim;
  LossConfig loss;
  std::uint64_t seed = 1;
  std::string out_path;       // final checkpoint; empty = do not write
  std::string log_csv_path;   // per-iteration loss log; empty = no file
  int checkpoint_every = 0;   // also write every N iters when > 0
  bool verbose = false;       // progress lines on stderr
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRow> log;
  int skipped_batches = 0;
};

TrainResult train(const TrainOptions& opt, PairSource& source);

// Point-transfer evaluation (hard fusion, inference mode).
struct EvalItem {
  Tensor<float> image_a;  // [3,H,W]
  Tensor<float> image_b;
  Category category = Category::SP;
  std::vector<PointPair> points;
};

struct EvalReport {
  struct PairResult {
    Category category = Category::SP;
    double model_err = 0;  // mean over the pair's points, px
    double eye_err = 0;
    bool flagged = false;  // degenerate cell hit; Eye substituted
  };
  std::vector<PairResult> pairs;
  double overall_model = 0;  // mean of per-pair errors
  double overall_eye = 0;
  int flagged_pairs = 0;

  double category_model(Category c) const;
  double category_eye(Category c) const;
  int category_count(Category c) const;
  std::string render() const;  // per-category table, SP MP LF LT LL Avg
};

EvalReport evaluate(const Parameters<float>& params, const ModelConfig& cfg,
                    const std::vector<EvalItem>& items,
                    bool force_zero_mesh = false);

std::vector<EvalItem> eval_items_from_dataset(const std::vector<AnnotatedPair>& pairs);
EvalItem eval_item_from_synthetic(const SyntheticSample& sample, Category category);

// Batch helper: stacks [3,H,W] images into [N,3,H,W].
Tensor<float> stack_images(const std::vector<Tensor<float>>& images);
// Adds a batch axis and converts precision.
template <typename T>
Tensor<T> to_batch_of_one(const Tensor<float>& chw) {
  auto v = chw.values();
  std::vector<T> data(v.begin(), v.end());
  Shape s = chw.shape();
  s.insert(s.begin(), 1);
  return Tensor<T>::from_vector(std::move(s), std::move(data));
}

// Direct mesh optimization (no network): Adam on the vertex motions of one
// mesh against the mask-normalized photometric loss. Isolates the warp
// differentiability from the learned parts.
struct DirectOptResult {
  MeshFlow mesh;
  std::vector<double> loss_curve;
  double mean_vertex_error = 0;  // vs gt when provided, else 0
};

DirectOptResult optimize_mesh_direct(const Tensor<double>& image_a,
                                     const Tensor<double>& image_b,
                                     const GridSpec& grid, int steps, double lr,
                                     const MeshFlow* gt_mesh = nullptr);

}  // namespace mf
