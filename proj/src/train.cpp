#include "mf/train.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mf/image_io.hpp"
#include "mf/warp.hpp"

namespace mf {

// ---------------------------------------------------------------------------
// Pair sources
// ---------------------------------------------------------------------------

BaseStyle SyntheticPairSource::style_of(long long index) const {
  if (!opt_.rotate_styles) return BaseStyle::textured;
  switch (index % 5) {
    case 3: return BaseStyle::low_texture;
    case 4: return BaseStyle::low_light;
    default: return BaseStyle::textured;
  }
}

SynthMode SyntheticPairSource::mode_of(long long index) const {
  return opt_.modes[static_cast<std::size_t>(index) % opt_.modes.size()];
}

Category SyntheticPairSource::category_of(SynthMode mode, BaseStyle style) {
  if (style == BaseStyle::low_texture) return Category::LT;
  if (style == BaseStyle::low_light) return Category::LL;
  switch (mode) {
    case SynthMode::global_h: return Category::SP;
    case SynthMode::multi_plane: return Category::MP;
    case SynthMode::mesh: return Category::LF;
  }
  return Category::SP;
}

SyntheticSample SyntheticPairSource::sample_full(std::uint64_t master_seed,
                                                 long long index) const {
  const std::uint64_t seed = mix_seed(master_seed, static_cast<std::uint64_t>(index));
  const int margin = static_cast<int>(std::ceil(opt_.max_disp)) + 3;
  const auto base = make_base_image(opt_.height + 2 * margin,
                                    opt_.width + 2 * margin, style_of(index), seed);
  const GridSpec grid{opt_.grid_h, opt_.grid_w, static_cast<double>(opt_.height),
                      static_cast<double>(opt_.width)};
  return generate_synthetic_pair(base, grid, opt_.max_disp, mode_of(index), seed);
}

std::pair<Tensor<float>, Tensor<float>> SyntheticPairSource::sample(
    std::uint64_t master_seed, int iter, int slot) {
  const long long index = static_cast<long long>(iter) * 1024 + slot;
  SyntheticSample s = sample_full(master_seed, index);
  return {std::move(s.image_a), std::move(s.image_b)};
}

DatasetPairSource::DatasetPairSource(std::vector<AnnotatedPair> pairs, int crop_h,
                                     int crop_w)
    : pairs_(std::move(pairs)), crop_h_(crop_h), crop_w_(crop_w) {
  if (pairs_.empty()) throw ConfigError("dataset source needs at least one pair");
}

std::pair<Tensor<float>, Tensor<float>> DatasetPairSource::sample(
    std::uint64_t master_seed, int iter, int slot) {
  const std::uint64_t seed =
      mix_seed(master_seed, static_cast<std::uint64_t>(iter) * 1024 + slot);
  Rng rng(seed);
  const auto& pair = pairs_[rng.uniform_int(pairs_.size())];
  auto ia = read_image(pair.source_path);
  auto ib = read_image(pair.target_path);
  if (ia.shape() != ib.shape()) {
    throw ValidationError("pair images differ in shape: " + pair.source_path);
  }
  return crop_augment(ia, ib, crop_h_, crop_w_, rng.next_u64());
}

Tensor<float> stack_images(const std::vector<Tensor<float>>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const Shape& s = images[0].shape();
  if (s.size() != 3) throw ShapeError("stack_images: expected [C,H,W] items");
  std::vector<float> data;
  data.reserve(images.size() * static_cast<std::size_t>(numel_of(s)));
  for (const auto& img : images) {
    if (img.shape() != s) throw ShapeError("stack_images: mixed shapes");
    auto v = img.values();
    data.insert(data.end(), v.begin(), v.end());
  }
  return Tensor<float>::from_vector(
      {static_cast<int>(images.size()), s[0], s[1], s[2]}, std::move(data));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

void write_log_csv(const std::string& path, const std::vector<LossRow>& rows) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open log for writing: " + path);
  out << "iter,ln_ab,ln_ba,l_feat,inv,total,lr\n";
  out.precision(10);
  for (const LossRow& r : rows) {
    out << r.iter << ',' << r.ln_ab << ',' << r.ln_ba << ',' << r.l_feat << ','
        << r.inv << ',' << r.total << ',' << r.lr << "\n";
  }
}

}  // namespace

TrainResult train(const TrainOptions& opt, PairSource& source) {
  opt.model.validate();
  opt.optim.validate();
  opt.loss.validate();

  auto params = Parameters<float>::init(opt.model, opt.seed);
  auto adam = AdamState<float>::init(params);

  TrainResult result;
  int consecutive_numerics = 0;

  for (int iter = 0; iter < opt.optim.total_iters; ++iter) {
    const double lr = scheduled_lr(opt.optim, iter);

    std::vector<Tensor<float>> as, bs;
    as.reserve(static_cast<std::size_t>(opt.optim.batch));
    bs.reserve(static_cast<std::size_t>(opt.optim.batch));
    for (int slot = 0; slot < opt.optim.batch; ++slot) {
      auto [ia, ib] = source.sample(opt.seed, iter, slot);
      as.push_back(std::move(ia));
      bs.push_back(std::move(ib));
    }
    auto batch_a = stack_images(as);
    auto batch_b = stack_images(bs);

    try {
      auto out = forward(batch_a, batch_b, params, opt.model, RunMode::train);
      auto breakdown = total_loss(out, opt.loss);
      if (breakdown.assembly_residual(opt.loss) > 1e-6) {
        throw NumericsError("loss breakdown does not assemble to the total");
      }
      params.zero_grads();
      breakdown.total.backward();
      adam_step(params, adam, opt.optim, lr);
      consecutive_numerics = 0;

      result.log.push_back({iter, breakdown.ln_ab, breakdown.ln_ba,
                            breakdown.l_feat, breakdown.inv_consistency,
                            breakdown.total_value, lr});
      if (opt.verbose && (iter % 50 == 0 || iter + 1 == opt.optim.total_iters)) {
        std::cerr << "iter " << iter << " total " << breakdown.total_value
                  << " ln_ab " << breakdown.ln_ab << " l_feat " << breakdown.l_feat
                  << " lr " << lr << "\n";
      }
    } catch (const DegenerateCellError& e) {
      ++result.skipped_batches;
      std::cerr << "warning: iter " << iter << " skipped (" << e.what() << ")\n";
      continue;
    } catch (const NumericsError& e) {
      ++result.skipped_batches;
      ++consecutive_numerics;
      std::cerr << "warning: iter " << iter << " skipped (" << e.what() << ")\n";
      if (consecutive_numerics > 10) {
        throw NumericsError(
            "training aborted: more than 10 consecutive numeric failures, "
            "last: " + std::string(e.what()));
      }
      continue;
    }

    if (opt.checkpoint_every > 0 && !opt.out_path.empty() &&
        (iter + 1) % opt.checkpoint_every == 0 &&
        iter + 1 < opt.optim.total_iters) {
      auto ckpt = make_checkpoint(opt.model, opt.optim, params, &adam, opt.seed,
                                  static_cast<std::uint64_t>(iter + 1));
      save_checkpoint(ckpt, opt.out_path);
    }
  }

  result.checkpoint =
      make_checkpoint(opt.model, opt.optim, params, &adam, opt.seed,
                      static_cast<std::uint64_t>(opt.optim.total_iters));
  if (!opt.out_path.empty()) save_checkpoint(result.checkpoint, opt.out_path);
  write_log_csv(opt.log_csv_path, result.log);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

double EvalReport::category_model(Category c) const {
  double acc = 0;
  int n = 0;
  for (const PairResult& p : pairs) {
    if (p.category == c) {
      acc += p.model_err;
      ++n;
    }
  }
  return n ? acc / n : 0.0;
}

double EvalReport::category_eye(Category c) const {
  double acc = 0;
  int n = 0;
  for (const PairResult& p : pairs) {
    if (p.category == c) {
      acc += p.eye_err;
      ++n;
    }
  }
  return n ? acc / n : 0.0;
}

int EvalReport::category_count(Category c) const {
  int n = 0;
  for (const PairResult& p : pairs) n += p.category == c;
  return n;
}

std::string EvalReport::render() const {
  constexpr Category cats[5] = {Category::SP, Category::MP, Category::LF,
                                Category::LT, Category::LL};
  std::ostringstream out;
  out.precision(3);
  out << std::fixed;
  out << "point-transfer error (px)\n";
  out << "        ";
  for (Category c : cats) out << "   " << to_string(c) << "   ";
  out << "   Avg\n";
  auto row = [&](const char* label, auto value, double overall) {
    out << label;
    for (Category c : cats) {
      if (category_count(c) == 0) {
        out << "   --   ";
      } else {
        out << " " << value(c) << " ";
      }
    }
    out << " " << overall << "\n";
  };
  row("Eye     ", [&](Category c) { return category_eye(c); }, overall_eye);
  row("Model   ", [&](Category c) { return category_model(c); }, overall_model);
  out << "pairs   ";
  for (Category c : cats) out << "  " << category_count(c) << "    ";
  out << "  " << pairs.size() << "\n";
  if (flagged_pairs) {
    out << "flagged " << flagged_pairs
        << " pair(s): degenerate cell, Eye distance substituted\n";
  }
  return out.str();
}

EvalReport evaluate(const Parameters<float>& params, const ModelConfig& cfg,
                    const std::vector<EvalItem>& items, bool force_zero_mesh) {
  cfg.validate();
  NoGradGuard no_grad;
  EvalReport report;
  double model_sum = 0, eye_sum = 0;
  for (const EvalItem& item : items) {
    if (item.points.empty()) {
      throw ValidationError("evaluation item without points");
    }
    EvalReport::PairResult pr;
    pr.category = item.category;

    MeshFlow mesh = MeshFlow::zero(
        GridSpec{cfg.grid_h, cfg.grid_w, static_cast<double>(item.image_a.dim(1)),
                 static_cast<double>(item.image_a.dim(2))});
    if (!force_zero_mesh) {
      auto ia = to_batch_of_one<float>(item.image_a);
      auto ib = to_batch_of_one<float>(item.image_b);
      auto out = forward(ia, ib, params, cfg, RunMode::infer);
      mesh = mesh_from_tensor(out.mesh_ab, out.grid, 0);
    }

    double model_acc = 0, eye_acc = 0;
    for (const PointPair& pt : item.points) {
      const double eye = std::hypot(pt.tx - pt.sx, pt.ty - pt.sy);
      eye_acc += eye;
      try {
        const Vec2 mapped = transfer_point(mesh, {pt.sx, pt.sy});
        model_acc += std::hypot(mapped.x - pt.tx, mapped.y - pt.ty);
      } catch (const DegenerateCellError&) {
        model_acc += eye;  // failure policy: Eye substituted, pair flagged
        pr.flagged = true;
      }
    }
    pr.model_err = model_acc / static_cast<double>(item.points.size());
    pr.eye_err = eye_acc / static_cast<double>(item.points.size());
    report.flagged_pairs += pr.flagged ? 1 : 0;
    model_sum += pr.model_err;
    eye_sum += pr.eye_err;
    report.pairs.push_back(pr);
  }
  if (!report.pairs.empty()) {
    report.overall_model = model_sum / static_cast<double>(report.pairs.size());
    report.overall_eye = eye_sum / static_cast<double>(report.pairs.size());
  }
  return report;
}

std::vector<EvalItem> eval_items_from_dataset(const std::vector<AnnotatedPair>& pairs) {
  std::vector<EvalItem> items;
  items.reserve(pairs.size());
  for (const AnnotatedPair& p : pairs) {
    EvalItem item;
    item.image_a = read_image(p.source_path);
    item.image_b = read_image(p.target_path);
    if (item.image_a.dim(0) == 1) {
      // promote grayscale to the 3-channel input the model expects
      auto expand = [](const Tensor<float>& g) {
        auto v = g.values();
        std::vector<float> d;
        d.reserve(v.size() * 3);
        for (int c = 0; c < 3; ++c) d.insert(d.end(), v.begin(), v.end());
        return Tensor<float>::from_vector({3, g.dim(1), g.dim(2)}, std::move(d));
      };
      item.image_a = expand(item.image_a);
      item.image_b = expand(item.image_b);
    }
    item.category = p.category;
    item.points = p.points;
    items.push_back(std::move(item));
  }
  return items;
}

EvalItem eval_item_from_synthetic(const SyntheticSample& sample, Category category) {
  EvalItem item;
  item.image_a = sample.image_a;
  item.image_b = sample.image_b;
  item.category = category;
  item.points = sample.gt_points;
  return item;
}

// ---------------------------------------------------------------------------
// Direct mesh optimization
// ---------------------------------------------------------------------------

DirectOptResult optimize_mesh_direct(const Tensor<double>& image_a,
                                     const Tensor<double>& image_b,
                                     const GridSpec& grid, int steps, double lr,
                                     const MeshFlow* gt_mesh) {
  grid.validate();
  if (image_a.rank() != 4 || image_a.shape() != image_b.shape()) {
    throw ShapeError("optimize_mesh_direct expects matching [N,C,H,W] images");
  }
  const int vr = grid.vertex_rows(), vc = grid.vertex_cols();
  auto motions = Tensor<double>::zeros({image_a.dim(0), vr, vc, 2}, true);
  auto ones = Tensor<double>::full(
      {image_a.dim(0), 1, image_a.dim(2), image_a.dim(3)}, 1.0);

  OptimConfig opt;
  opt.lr = lr;
  std::vector<double> m, v;
  DirectOptResult result;
  for (int step = 1; step <= steps; ++step) {
    auto warped = warp(image_a, motions, grid);
    auto warped_mask = warp(ones, motions, grid);
    auto loss = normalized_masked_l1(warped, image_b, warped_mask, ones);
    result.loss_curve.push_back(loss.item());
    motions.zero_grad();
    loss.backward();
    adam_update_array<double>(motions.raw_values(), motions.grad(), m, v, step,
                              opt, lr);
  }

  result.mesh = mesh_from_tensor(motions, grid, 0);
  if (gt_mesh) {
    double acc = 0;
    for (std::size_t i = 0; i < result.mesh.motions.size(); ++i) {
      acc += norm(result.mesh.motions[i] - gt_mesh->motions[i]);
    }
    result.mean_vertex_error = acc / static_cast<double>(result.mesh.motions.size());
  }
  return result;
}

}  // namespace mf
