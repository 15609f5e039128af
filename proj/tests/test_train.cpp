#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mf/checkpoint.hpp"
#include "mf/gradcheck_suites.hpp"
#include "mf/optim.hpp"
#include "mf/train.hpp"

using namespace mf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("mf_train_" + tag + "_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Independent scalar Adam, straight from the update equations.
struct ScalarAdamRef {
  double m = 0, v = 0;
  long long t = 0;
  double step(double theta, double g, const OptimConfig& cfg, double lr) {
    ++t;
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mh = m / (1 - std::pow(cfg.beta1, static_cast<double>(t)));
    const double vh = v / (1 - std::pow(cfg.beta2, static_cast<double>(t)));
    return theta - lr * mh / (std::sqrt(vh) + cfg.eps);
  }
};

ModelConfig train_test_config() {
  ModelConfig cfg;
  cfg.feature_channels = 2;
  cfg.f_hidden = 2;
  cfg.m_hidden = 2;
  cfg.s_hidden1 = 2;
  cfg.s_hidden2 = 2;
  cfg.backbone = {{4, 1}, {4, 2}};
  cfg.K = 2;
  cfg.scale_divisors = {2, 1};
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  cfg.max_disp = 2.0;
  cfg.branches_enabled = {0, 1};
  return cfg;
}

bool files_identical(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  REQUIRE(fa);
  REQUIRE(fb);
  std::string ca((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string cb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return ca == cb;
}

}  // namespace

TEST_SUITE_BEGIN("train");

TEST_CASE("adam: zero gradient leaves fresh parameters unchanged") {
  auto cfg = tiny_model_config();
  auto params = Parameters<float>::init(cfg, 3);
  auto before = Parameters<float>::init(cfg, 3);
  auto state = AdamState<float>::init(params);
  OptimConfig ocfg;
  // grads default to empty (treated as zero)
  adam_step(params, state, ocfg, ocfg.lr);
  for (const auto& [name, t] : params.named) {
    auto now = t.values();
    auto was = before.at(name).values();
    for (std::size_t i = 0; i < now.size(); ++i) CHECK(now[i] == was[i]);
  }
}

TEST_CASE("adam: closed-form first step") {
  std::vector<double> theta = {0.0};
  std::vector<double> grad = {1.0};
  std::vector<double> m, v;
  OptimConfig cfg;
  adam_update_array<double>(theta, grad, m, v, 1, cfg, 1e-4);
  CHECK(theta[0] == doctest::Approx(-1e-4 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam: matches the scalar reference to 1e-12 over 100 steps") {
  Rng rng(17);
  for (int problem = 0; problem < 20; ++problem) {
    OptimConfig cfg;
    cfg.lr = rng.uniform(1e-4, 1e-2);
    std::vector<double> theta = {rng.uniform(-2, 2)};
    ScalarAdamRef ref;
    double ref_theta = theta[0];
    std::vector<double> m, v;
    for (int t = 1; t <= 100; ++t) {
      // deterministic pseudo-gradient of a shifting quadratic
      const double g = std::sin(0.1 * t + problem) + 0.3 * theta[0];
      const double g_ref = std::sin(0.1 * t + problem) + 0.3 * ref_theta;
      std::vector<double> grad = {g};
      adam_update_array<double>(theta, grad, m, v, t, cfg, cfg.lr);
      ref_theta = ref.step(ref_theta, g_ref, cfg, cfg.lr);
      CHECK(std::abs(theta[0] - ref_theta) < 1e-12);
    }
  }

  // two steps with constant gradient, explicitly
  OptimConfig cfg;
  std::vector<double> theta = {0.5};
  ScalarAdamRef ref;
  double ref_theta = 0.5;
  std::vector<double> m, v;
  for (int t = 1; t <= 2; ++t) {
    std::vector<double> grad = {2.0};
    adam_update_array<double>(theta, grad, m, v, t, cfg, cfg.lr);
    ref_theta = ref.step(ref_theta, 2.0, cfg, cfg.lr);
  }
  CHECK(std::abs(theta[0] - ref_theta) < 1e-12);
}

TEST_CASE("adam: NaN gradient aborts the step without touching parameters") {
  auto cfg = tiny_model_config();
  auto params = Parameters<float>::init(cfg, 4);
  auto before = Parameters<float>::init(cfg, 4);
  auto state = AdamState<float>::init(params);

  // fabricate a NaN gradient on one parameter
  auto& t = params.at("f.conv0.weight");
  auto loss = sum(mul(t, t));
  loss.backward();
  const_cast<float&>(t.grad()[0]) = std::numeric_limits<float>::quiet_NaN();

  OptimConfig ocfg;
  CHECK_THROWS_AS(adam_step(params, state, ocfg, ocfg.lr), NumericsError);
  CHECK(state.step_count == 0);
  for (const auto& [name, p] : params.named) {
    auto now = p.values();
    auto was = before.at(name).values();
    for (std::size_t i = 0; i < now.size(); ++i) CHECK(now[i] == was[i]);
  }
}

TEST_CASE("lr schedule: two decays give 0.64x") {
  OptimConfig cfg;
  cfg.lr = 1e-4;
  cfg.lr_decay_every = 4000;
  cfg.lr_decay_factor = 0.8;
  CHECK(scheduled_lr(cfg, 0) == doctest::Approx(1e-4));
  CHECK(scheduled_lr(cfg, 3999) == doctest::Approx(1e-4));
  CHECK(scheduled_lr(cfg, 4000) == doctest::Approx(0.8e-4));
  CHECK(scheduled_lr(cfg, 8000) == doctest::Approx(0.64e-4));
}

TEST_CASE("checkpoint: save/load round-trips bitwise") {
  TempDir tmp("ckpt");
  auto model = train_test_config();
  auto params = Parameters<float>::init(model, 55);
  auto adam = AdamState<float>::init(params);
  adam.step_count = 7;
  OptimConfig optim;
  optim.batch = 2;

  auto ckpt = make_checkpoint(model, optim, params, &adam, 99, 1234);
  save_checkpoint(ckpt, tmp.file("a.mfck"));
  auto back = load_checkpoint(tmp.file("a.mfck"));

  CHECK(back.model == model);
  CHECK(back.optim.batch == 2);
  CHECK(back.rng_seed == 99);
  CHECK(back.rng_draws == 1234);
  CHECK(back.has_adam);
  CHECK(back.adam_step_count == 7);
  REQUIRE(back.tensors.size() == ckpt.tensors.size());
  for (std::size_t i = 0; i < back.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == ckpt.tensors[i].name);
    CHECK(back.tensors[i].shape == ckpt.tensors[i].shape);
    REQUIRE(back.tensors[i].data.size() == ckpt.tensors[i].data.size());
    for (std::size_t k = 0; k < back.tensors[i].data.size(); ++k) {
      CHECK(back.tensors[i].data[k] == ckpt.tensors[i].data[k]);
    }
  }

  // saving the loaded checkpoint again reproduces the file byte for byte
  save_checkpoint(back, tmp.file("b.mfck"));
  CHECK(files_identical(tmp.file("a.mfck"), tmp.file("b.mfck")));

  // parameters reconstructed from the checkpoint match the originals
  auto rebuilt = parameters_from_checkpoint(back);
  for (const auto& [name, t] : params.named) {
    auto a = t.values();
    auto b = rebuilt.at(name).values();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("checkpoint: corrupted and malformed inputs give FormatError") {
  TempDir tmp("ckpt_err");
  auto model = train_test_config();
  auto params = Parameters<float>::init(model, 5);
  OptimConfig optim;
  auto ckpt = make_checkpoint(model, optim, params, nullptr, 1, 0);
  save_checkpoint(ckpt, tmp.file("good.mfck"));

  // corrupt the magic
  {
    std::fstream f(tmp.file("good.mfck"),
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(tmp.file("good.mfck")), FormatError);

  // truncated file
  save_checkpoint(ckpt, tmp.file("trunc.mfck"));
  fs::resize_file(tmp.file("trunc.mfck"), fs::file_size(tmp.file("trunc.mfck")) / 2);
  CHECK_THROWS_AS(load_checkpoint(tmp.file("trunc.mfck")), FormatError);

  // unknown extra tensor name is rejected and named
  auto extra = ckpt;
  extra.tensors.push_back({"rogue.tensor", {2}, {1.0f, 2.0f}});
  save_checkpoint(extra, tmp.file("extra.mfck"));
  CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("extra.mfck")),
                       doctest::Contains("rogue.tensor"), FormatError);

  // missing tensor is rejected
  auto missing = ckpt;
  missing.tensors.pop_back();
  save_checkpoint(missing, tmp.file("missing.mfck"));
  CHECK_THROWS_AS(load_checkpoint(tmp.file("missing.mfck")), FormatError);

  CHECK_THROWS_AS(load_checkpoint(tmp.file("nonexistent.mfck")), IoError);
}

TEST_CASE("train: zero iterations returns the seeded initialization") {
  TempDir tmp("train0");
  TrainOptions opt;
  opt.model = train_test_config();
  opt.optim.total_iters = 0;
  opt.optim.batch = 1;
  opt.seed = 777;
  opt.out_path = tmp.file("init.mfck");

  SyntheticPairSource::Options sopt;
  sopt.height = 48;
  sopt.width = 48;
  sopt.grid_h = 4;
  sopt.grid_w = 4;
  sopt.max_disp = 2.0;
  SyntheticPairSource source(sopt);

  auto result = train(opt, source);
  auto expect = Parameters<float>::init(opt.model, 777);
  auto got = parameters_from_checkpoint(result.checkpoint);
  for (const auto& [name, t] : expect.named) {
    auto a = t.values();
    auto b = got.at(name).values();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("train: fixed seed gives bitwise-identical checkpoints") {
  TempDir tmp("train_det");
  TrainOptions opt;
  opt.model = train_test_config();
  opt.optim.total_iters = 3;
  opt.optim.batch = 2;
  opt.optim.lr = 1e-3;
  opt.seed = 4242;
  opt.log_csv_path = tmp.file("log.csv");

  SyntheticPairSource::Options sopt;
  sopt.height = 48;
  sopt.width = 48;
  sopt.grid_h = 4;
  sopt.grid_w = 4;
  sopt.max_disp = 2.0;

  opt.out_path = tmp.file("run1.mfck");
  {
    SyntheticPairSource source(sopt);
    auto r = train(opt, source);
    CHECK(r.log.size() == 3);
    CHECK(r.skipped_batches == 0);
  }
  opt.out_path = tmp.file("run2.mfck");
  {
    SyntheticPairSource source(sopt);
    train(opt, source);
  }
  CHECK(files_identical(tmp.file("run1.mfck"), tmp.file("run2.mfck")));

  // the CSV log has the documented column header
  std::ifstream log(tmp.file("log.csv"));
  std::string header;
  std::getline(log, header);
  CHECK(header == "iter,ln_ab,ln_ba,l_feat,inv,total,lr");
}

TEST_CASE("evaluate: identity annotations and zero mesh give zero error") {
  auto cfg = train_test_config();
  auto params = Parameters<float>::init(cfg, 8);
  Rng rng(5);
  std::vector<float> d(3 * 48 * 48);
  for (float& v : d) v = static_cast<float>(rng.uniform());
  EvalItem item;
  item.image_a = Tensor<float>::from_vector({3, 48, 48}, d);
  item.image_b = item.image_a;
  item.category = Category::SP;
  for (int i = 0; i < 5; ++i) {
    const double x = 5.0 + 8 * i, y = 10.0 + 5 * i;
    item.points.push_back({x, y, x, y});
  }
  auto report = evaluate(params, cfg, {item}, /*force_zero_mesh=*/true);
  CHECK(report.overall_model == doctest::Approx(0.0));
  CHECK(report.overall_eye == doctest::Approx(0.0));
}

TEST_CASE("evaluate: 3-4-5 Eye distance and zero-mesh substitution oracle") {
  auto cfg = train_test_config();
  auto params = Parameters<float>::init(cfg, 9);
  Rng rng(6);
  std::vector<float> d(3 * 48 * 48);
  for (float& v : d) v = static_cast<float>(rng.uniform());
  EvalItem item;
  item.image_a = Tensor<float>::from_vector({3, 48, 48}, d);
  for (float& v : d) v = static_cast<float>(rng.uniform());
  item.image_b = Tensor<float>::from_vector({3, 48, 48}, d);
  item.category = Category::MP;
  item.points.push_back({10, 10, 13, 14});  // offset (3,4): distance 5

  auto report = evaluate(params, cfg, {item});
  CHECK(report.overall_eye == doctest::Approx(5.0));

  // the Eye column equals an evaluation with a forced zero mesh
  auto eye_run = evaluate(params, cfg, {item}, /*force_zero_mesh=*/true);
  CHECK(eye_run.overall_model == doctest::Approx(report.overall_eye));

  // deterministic and order-independent
  std::vector<EvalItem> two = {item, item};
  two[1].category = Category::LL;
  auto r1 = evaluate(params, cfg, two);
  std::swap(two[0], two[1]);
  auto r2 = evaluate(params, cfg, two);
  CHECK(r1.overall_model == doctest::Approx(r2.overall_model).epsilon(1e-12));
  CHECK(r1.category_model(Category::LL) ==
        doctest::Approx(r2.category_model(Category::LL)).epsilon(1e-12));

  const std::string table = report.render();
  CHECK(table.find("Eye") != std::string::npos);
  CHECK(table.find("MP") != std::string::npos);
}

TEST_CASE("direct mesh optimization pulls motions toward the ground truth") {
  const GridSpec grid{4, 4, 48, 48};
  auto base = make_base_image(60, 60, BaseStyle::textured, 313);
  auto sample = generate_synthetic_pair(base, grid, 1.5, SynthMode::global_h, 11);

  auto ia = to_batch_of_one<double>(sample.image_a);
  auto ib = to_batch_of_one<double>(sample.image_b);
  auto result = optimize_mesh_direct(ia, ib, grid, 200, 0.05, &sample.gt_mesh);

  double initial = 0;
  for (const Vec2& m : sample.gt_mesh.motions) initial += norm(m);
  initial /= static_cast<double>(sample.gt_mesh.motions.size());

  CHECK(result.loss_curve.front() > result.loss_curve.back());
  CHECK(result.mean_vertex_error < 0.5 * initial);
}

TEST_SUITE_END();
