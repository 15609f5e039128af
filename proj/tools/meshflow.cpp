#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mf/checkpoint.hpp"
#include "mf/data.hpp"
#include "mf/gradcheck_suites.hpp"
#include "mf/image_io.hpp"
#include "mf/train.hpp"
#include "mf/warp.hpp"

namespace fs = std::filesystem;
using namespace mf;

namespace {

std::vector<int> parse_branches(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoi(tok));
  }
  if (out.empty()) throw ConfigError("--branches: no branch indices given");
  return out;
}

std::pair<int, int> parse_grid(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw ConfigError("--grid expects HxW, e.g. 16x16");
  return {std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1))};
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return model_config_from_json(ss.str());
}

int run_synth(const std::string& out_dir, int count, const std::string& mode_str,
              const std::string& grid_str, double max_disp,
              const std::string& base_path, std::uint64_t seed) {
  const SynthMode mode = synth_mode_from_string(mode_str);
  const auto [gh, gw] = parse_grid(grid_str);
  fs::create_directories(out_dir);

  Tensor<float> custom_base;
  const int margin = static_cast<int>(std::ceil(max_disp)) + 3;
  int height = 128, width = 128;
  if (!base_path.empty()) {
    custom_base = read_image(base_path);
    if (custom_base.dim(0) == 1) {
      std::vector<float> d;
      auto v = custom_base.values();
      for (int c = 0; c < 3; ++c) d.insert(d.end(), v.begin(), v.end());
      custom_base = Tensor<float>::from_vector(
          {3, custom_base.dim(1), custom_base.dim(2)}, std::move(d));
    }
    height = custom_base.dim(1) - 2 * margin;
    width = custom_base.dim(2) - 2 * margin;
    if (height < 2 * gh || width < 2 * gw) {
      throw ConfigError("--base image too small for the margin and grid");
    }
  }

  SyntheticPairSource::Options sopt;
  sopt.height = height;
  sopt.width = width;
  sopt.grid_h = gh;
  sopt.grid_w = gw;
  sopt.max_disp = max_disp;
  sopt.modes = {mode};
  SyntheticPairSource source(sopt);

  std::vector<AnnotatedPair> manifest;
  const GridSpec grid{gh, gw, static_cast<double>(height), static_cast<double>(width)};
  for (int i = 0; i < count; ++i) {
    SyntheticSample sample;
    Category category;
    if (base_path.empty()) {
      sample = source.sample_full(seed, i);
      category = SyntheticPairSource::category_of(mode, source.style_of(i));
    } else {
      sample = generate_synthetic_pair(custom_base, grid, max_disp, mode,
                                       mix_seed(seed, static_cast<std::uint64_t>(i)));
      category = SyntheticPairSource::category_of(mode, BaseStyle::textured);
    }

    char tag[32];
    std::snprintf(tag, sizeof(tag), "smp_%05d", i);
    const std::string stem = (fs::path(out_dir) / tag).string();
    write_image(stem + "_a.png", sample.image_a);
    write_image(stem + "_b.png", sample.image_b);
    save_mesh(sample.gt_mesh, stem + "_mesh.json");

    AnnotatedPair pair;
    pair.source_path = stem + "_a.png";
    pair.target_path = stem + "_b.png";
    pair.category = category;
    pair.points = sample.gt_points;
    manifest.push_back(std::move(pair));
  }
  save_manifest(out_dir, manifest);
  std::cout << "wrote " << count << " pairs to " << out_dir << "\n";
  return 0;
}

int run_train(const std::string& data_dir, const std::string& out_path, int iters,
              int batch, double lr, const std::string& config_path,
              std::uint64_t seed, bool no_mask, const std::string& branches) {
  TrainOptions opt;
  if (!config_path.empty()) opt.model = load_model_config(config_path);
  if (no_mask) opt.model.mask_enabled = false;
  if (!branches.empty()) opt.model.branches_enabled = parse_branches(branches);
  opt.model.validate();
  opt.optim.total_iters = iters;
  opt.optim.batch = batch;
  opt.optim.lr = lr;
  opt.seed = seed;
  opt.out_path = out_path;
  opt.log_csv_path = out_path + ".log.csv";
  opt.verbose = true;

  auto pairs = load_dataset(data_dir);
  if (pairs.empty()) throw ValidationError("dataset has no pairs: " + data_dir);
  const auto [h, w] = read_image_size(pairs[0].source_path);
  DatasetPairSource source(std::move(pairs), std::min(128, h), std::min(128, w));

  auto result = train(opt, source);
  std::cout << "trained " << iters << " iters; checkpoint " << out_path << "\n";
  if (!result.log.empty()) {
    std::cout << "final loss " << result.log.back().total << " ("
              << result.skipped_batches << " skipped batches)\n";
  }
  return 0;
}

int run_align(const std::string& ckpt_path, const std::string& source_path,
              const std::string& target_path, const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  auto params = parameters_from_checkpoint(ckpt);
  auto ia = read_image(source_path);
  auto ib = read_image(target_path);
  if (ia.shape() != ib.shape()) {
    throw ValidationError("source and target images differ in shape");
  }
  fs::create_directories(out_dir);

  NoGradGuard no_grad;
  auto out = forward(to_batch_of_one<float>(ia), to_batch_of_one<float>(ib),
                     params, ckpt.model, RunMode::infer);
  const MeshFlow mesh = mesh_from_tensor(out.mesh_ab, out.grid, 0);
  save_mesh(mesh, (fs::path(out_dir) / "mesh.json").string());

  // warped source and the 50/50 blend against the target
  const int c = ia.dim(0), h = ia.dim(1), w = ia.dim(2);
  auto warped_vals = out.warped_a.values();
  std::vector<float> warped(warped_vals.begin(), warped_vals.end());
  write_image((fs::path(out_dir) / "warped.png").string(),
              Tensor<float>::from_vector({c, h, w}, warped));
  auto tb = ib.values();
  std::vector<float> blend(warped.size());
  for (std::size_t i = 0; i < blend.size(); ++i) {
    blend[i] = 0.5f * warped[i] + 0.5f * tb[i];
  }
  write_image((fs::path(out_dir) / "blend.png").string(),
              Tensor<float>::from_vector({c, h, w}, std::move(blend)));
  std::cout << "wrote mesh.json, warped.png, blend.png to " << out_dir << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& report_path, bool eye_only) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  auto params = parameters_from_checkpoint(ckpt);
  auto items = eval_items_from_dataset(load_dataset(data_dir));
  if (items.empty()) throw ValidationError("dataset has no pairs: " + data_dir);

  const EvalReport report = evaluate(params, ckpt.model, items, eye_only);
  const std::string text = report.render();
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) throw IoError("cannot open report for writing: " + report_path);
    out << text;
  }
  std::cout << text;
  std::cout << "overall: model " << report.overall_model << " px, eye "
            << report.overall_eye << " px\n";
  return 0;
}

int run_gradcheck(const std::string& suite, double tol) {
  std::vector<SuiteResult> results;
  if (suite == "ops") {
    results = gradcheck_ops_suite(100, tol);
  } else if (suite == "warp") {
    results = gradcheck_warp_suite(20, tol);
  } else if (suite == "model") {
    results = gradcheck_model_suite(tol);
  } else {
    throw ConfigError("unknown gradcheck suite: " + suite);
  }
  int failed = 0;
  for (const SuiteResult& r : results) {
    if (!r.report.pass) {
      ++failed;
      std::cout << "FAIL " << r.name << " max_rel " << r.report.max_rel_err
                << " max_abs " << r.report.max_abs_err << " (" << r.report.worst
                << ")\n";
    }
  }
  std::cout << suite << ": " << results.size() - failed << "/" << results.size()
            << " checks passed (tol " << tol << ")\n";
  return failed == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mesh-flow image registration pipeline"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out, synth_mode = "multi_plane", synth_grid = "16x16", synth_base;
  int synth_count = 10;
  double synth_disp = 3.0;
  std::uint64_t synth_seed = 1;
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--count", synth_count, "number of pairs")->required();
  synth->add_option("--mode", synth_mode, "global_h | mesh | multi_plane")
      ->capture_default_str();
  synth->add_option("--grid", synth_grid, "mesh grid, HxW")->capture_default_str();
  synth->add_option("--max-disp", synth_disp, "max vertex displacement, px")
      ->capture_default_str();
  synth->add_option("--base", synth_base, "optional base image (default: procedural)");
  synth->add_option("--seed", synth_seed, "RNG seed")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "train a registration model");
  std::string train_data, train_out, train_config, train_branches;
  int train_iters = 2000, train_batch = 4;
  double train_lr = 1e-4;
  std::uint64_t train_seed = 1;
  bool train_no_mask = false;
  tr->add_option("--data", train_data, "dataset root (manifest.json)")->required();
  tr->add_option("--out", train_out, "checkpoint output path")->required();
  tr->add_option("--iters", train_iters, "training iterations")->capture_default_str();
  tr->add_option("--batch", train_batch, "batch size")->capture_default_str();
  tr->add_option("--lr", train_lr, "Adam learning rate")->capture_default_str();
  tr->add_option("--config", train_config, "model config JSON file");
  tr->add_option("--seed", train_seed, "RNG seed")->capture_default_str();
  tr->add_flag("--no-mask", train_no_mask, "disable the inlier mask (ablation)");
  tr->add_option("--branches", train_branches,
                 "comma-separated branch subset, e.g. 2 or 0,1,2 (ablation)");

  // align
  auto* al = app.add_subcommand("align", "align one image pair");
  std::string align_ckpt, align_src, align_tgt, align_out;
  al->add_option("--ckpt", align_ckpt, "checkpoint path")->required();
  al->add_option("--source", align_src, "source image")->required();
  al->add_option("--target", align_tgt, "target image")->required();
  al->add_option("--out-dir", align_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "point-transfer evaluation");
  std::string eval_ckpt, eval_data, eval_report;
  bool eval_eye = false;
  ev->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  ev->add_option("--data", eval_data, "dataset root (manifest.json)")->required();
  ev->add_option("--report", eval_report, "write the report to this file");
  ev->add_flag("--eye", eval_eye, "identity baseline only (zero mesh)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string gc_suite = "ops";
  double gc_tol = 1e-3;
  gc->add_option("--suite", gc_suite, "ops | warp | model")->capture_default_str();
  gc->add_option("--tol", gc_tol, "relative tolerance")->capture_default_str();

  try {
    app.parse(argc, argv);
    if (synth->parsed()) {
      return run_synth(synth_out, synth_count, synth_mode, synth_grid, synth_disp,
                       synth_base, synth_seed);
    }
    if (tr->parsed()) {
      return run_train(train_data, train_out, train_iters, train_batch, train_lr,
                       train_config, train_seed, train_no_mask, train_branches);
    }
    if (al->parsed()) {
      return run_align(align_ckpt, align_src, align_tgt, align_out);
    }
    if (ev->parsed()) {
      return run_eval(eval_ckpt, eval_data, eval_report, eval_eye);
    }
    if (gc->parsed()) {
      return run_gradcheck(gc_suite, gc_tol);
    }
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const OutOfBoundsError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
