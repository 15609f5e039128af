#pragma once

#include <string>
#include <vector>

#include "mf/grad_check.hpp"
#include "mf/loss.hpp"
#include "mf/network.hpp"
#include "mf/nn_ops.hpp"
#include "mf/rng.hpp"
#include "mf/warp.hpp"

namespace mf {

struct SuiteResult {
  std::string name;
  GradCheckReport report;
};

inline bool all_pass(const std::vector<SuiteResult>& results) {
  for (const auto& r : results) {
    if (!r.report.pass) return false;
  }
  return true;
}

namespace detail {

inline Tensor<double> rand_tensor(Shape s, Rng& rng, double lo = -2, double hi = 2,
                                  double margin = 0.0) {
  std::vector<double> d(static_cast<std::size_t>(numel_of(s)));
  for (double& v : d) {
    do {
      v = rng.uniform(lo, hi);
    } while (margin > 0 && std::abs(v) < margin);
  }
  return Tensor<double>::from_vector(std::move(s), std::move(d));
}

// Random per-element weights turn "sum of outputs" into a loss whose
// gradient exercises every output element distinctly.
inline Tensor<double> weights_like(const Shape& s, Rng& rng) {
  return rand_tensor(s, rng, 0.25, 1.75);
}

inline Tensor<double> weighted_sum(const Tensor<double>& t, Rng& rng) {
  return sum(mul(t, weights_like(t.shape(), rng)));
}

// Smooth analytic image: a few low-frequency sinusoids. Bilinear sampling of
// it still has interpolation kinks, so tests that finite-difference through
// sampling must also keep coordinates away from the integer lattice.
inline Tensor<double> smooth_image(int c, int h, int w, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(c) * h * w);
  for (int ci = 0; ci < c; ++ci) {
    double fx[3], fy[3], ph[3];
    for (int k = 0; k < 3; ++k) {
      fx[k] = rng.uniform(-0.5, 0.5);
      fy[k] = rng.uniform(-0.5, 0.5);
      ph[k] = rng.uniform(0, 6.28318);
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = 0.5;
        for (int k = 0; k < 3; ++k) {
          v += 0.15 * std::sin(fx[k] * x + fy[k] * y + ph[k]);
        }
        d[(static_cast<std::size_t>(ci) * h + y) * w + x] = v;
      }
    }
  }
  return Tensor<double>::from_vector({1, c, h, w}, std::move(d));
}

// Globally linear image: bilinear interpolation of it is linear in the
// sample coordinates, so warp gradients have no interpolation kinks at all.
inline Tensor<double> linear_image(int c, int h, int w, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(c) * h * w);
  for (int ci = 0; ci < c; ++ci) {
    const double a = rng.uniform(-1, 1);
    const double bx = rng.uniform(-0.1, 0.1);
    const double by = rng.uniform(-0.1, 0.1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        d[(static_cast<std::size_t>(ci) * h + y) * w + x] = a + bx * x + by * y;
      }
    }
  }
  return Tensor<double>::from_vector({1, c, h, w}, std::move(d));
}

// Zero weight within `margin` pixels of the border; keeps finite differences
// away from the zero-fill boundary of the warp.
inline Tensor<double> interior_weights(int c, int h, int w, int margin, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(c) * h * w, 0.0);
  for (int ci = 0; ci < c; ++ci) {
    for (int y = margin; y < h - margin; ++y) {
      for (int x = margin; x < w - margin; ++x) {
        d[(static_cast<std::size_t>(ci) * h + y) * w + x] = rng.uniform(0.25, 1.75);
      }
    }
  }
  return Tensor<double>::from_vector({1, c, h, w}, std::move(d));
}

}  // namespace detail

// Finite-difference checks for every differentiable tensor op, randomized
// shapes with axes <= 6.
inline std::vector<SuiteResult> gradcheck_ops_suite(int seeds, double tol = 1e-3,
                                                    double step = 1e-4) {
  using detail::rand_tensor;
  std::vector<SuiteResult> results;
  auto run = [&](const std::string& name, auto fn,
                 std::vector<Tensor<double>> inputs, double local_step) {
    results.push_back({name, grad_check(fn, std::move(inputs), local_step, tol)});
  };

  for (int s = 0; s < seeds; ++s) {
    Rng rng(mix_seed(0xabcd, static_cast<std::uint64_t>(s)));
    const int n = 1 + static_cast<int>(rng.uniform_int(2));
    const int c = 1 + static_cast<int>(rng.uniform_int(3));
    const int h = 2 + static_cast<int>(rng.uniform_int(4));
    const int w = 2 + static_cast<int>(rng.uniform_int(4));
    const Shape nchw{n, c, h, w};
    const std::string tag = "#" + std::to_string(s);

    Rng wrng(mix_seed(0x77, static_cast<std::uint64_t>(s)));
    auto wsum = [&wrng](const Tensor<double>& t) {
      Rng local = wrng;  // same weights for every FD evaluation
      return detail::weighted_sum(t, local);
    };

    run("add" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(add(in[0], in[1])); },
        {rand_tensor(nchw, rng), rand_tensor(nchw, rng)}, step);
    run("add_scalar" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(add(in[0], in[1])); },
        {rand_tensor(nchw, rng), rand_tensor({}, rng)}, step);
    run("add_bias" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(add(in[0], in[1])); },
        {rand_tensor(nchw, rng), rand_tensor({c}, rng)}, step);
    run("sub" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(sub(in[0], in[1])); },
        {rand_tensor(nchw, rng), rand_tensor(nchw, rng)}, step);
    run("mul" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(mul(in[0], in[1])); },
        {rand_tensor(nchw, rng), rand_tensor(nchw, rng)}, step);
    run("mul_channel" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(mul(in[0], in[1])); },
        {rand_tensor(nchw, rng), rand_tensor({n, 1, h, w}, rng)}, step);
    run("div" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(div(in[0], in[1])); },
        {rand_tensor(nchw, rng), rand_tensor(nchw, rng, -2, 2, 0.4)}, step);
    run("neg" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(neg(in[0])); },
        {rand_tensor(nchw, rng)}, step);
    run("relu" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(relu(in[0])); },
        {rand_tensor(nchw, rng, -2, 2, 0.05)}, step);
    run("sigmoid" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(sigmoid(in[0])); },
        {rand_tensor(nchw, rng)}, step);
    run("tanh" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(tanh_op(in[0])); },
        {rand_tensor(nchw, rng)}, step);
    run("abs" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(abs_op(in[0])); },
        {rand_tensor(nchw, rng, -2, 2, 0.05)}, step);
    const int axis = static_cast<int>(rng.uniform_int(4));
    run("softmax" + tag,
        [&, axis](std::vector<Tensor<double>>& in) {
          return wsum(softmax(in[0], axis));
        },
        {rand_tensor(nchw, rng)}, step);
    run("sum" + tag,
        [&](std::vector<Tensor<double>>& in) { return sum(in[0]); },
        {rand_tensor(nchw, rng)}, step);
    run("mean" + tag,
        [&](std::vector<Tensor<double>>& in) { return mean(in[0]); },
        {rand_tensor(nchw, rng)}, step);

    const int cout = 1 + static_cast<int>(rng.uniform_int(2));
    run("conv2d_s1" + tag,
        [&](std::vector<Tensor<double>>& in) {
          return wsum(conv2d(in[0], in[1], in[2], 1, 1));
        },
        {rand_tensor({1, c, h, w}, rng), rand_tensor({cout, c, 3, 3}, rng),
         rand_tensor({cout}, rng)},
        step);
    run("conv2d_s2" + tag,
        [&](std::vector<Tensor<double>>& in) {
          return wsum(conv2d(in[0], in[1], in[2], 2, 1));
        },
        {rand_tensor({1, c, h + 2, w + 2}, rng), rand_tensor({cout, c, 3, 3}, rng),
         rand_tensor({cout}, rng)},
        step);

    const int ph = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h)));
    const int pw = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w)));
    run("adaptive_avg_pool" + tag,
        [&, ph, pw](std::vector<Tensor<double>>& in) {
          return wsum(adaptive_avg_pool(in[0], ph, pw));
        },
        {rand_tensor(nchw, rng)}, step);
    run("upsample_bilinear" + tag,
        [&](std::vector<Tensor<double>>& in) {
          return wsum(upsample_bilinear(in[0], 2));
        },
        {rand_tensor({1, c, 3, 3}, rng)}, step);
    run("upsample_vertex_grid" + tag,
        [&](std::vector<Tensor<double>>& in) {
          return wsum(upsample_vertex_grid(in[0], 3));
        },
        {rand_tensor({1, 3, 3, 2}, rng)}, step);
    run("concat_channels" + tag,
        [&](std::vector<Tensor<double>>& in) {
          return wsum(concat_channels(in[0], in[1]));
        },
        {rand_tensor(nchw, rng), rand_tensor({n, 2, h, w}, rng)}, step);
    run("nchw_to_nhwc" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(nchw_to_nhwc(in[0])); },
        {rand_tensor(nchw, rng)}, step);
    run("index_last" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(index_last(in[0], 1)); },
        {rand_tensor({n, h, w, 3}, rng)}, step);
    run("expand_last" + tag,
        [&](std::vector<Tensor<double>>& in) { return wsum(expand_last(in[0], 3)); },
        {rand_tensor({n, h, w}, rng)}, step);

    // bilinear_sample: coordinates with fractions in [0.2, 0.8], interior.
    {
      const int gh = 3, gw = 3, ih = 6, iw = 6;
      std::vector<double> coords(static_cast<std::size_t>(gh) * gw * 2);
      for (std::size_t i = 0; i < coords.size(); i += 2) {
        coords[i] = static_cast<double>(1 + rng.uniform_int(iw - 3)) + rng.uniform(0.2, 0.8);
        coords[i + 1] = static_cast<double>(1 + rng.uniform_int(ih - 3)) + rng.uniform(0.2, 0.8);
      }
      run("bilinear_sample" + tag,
          [&](std::vector<Tensor<double>>& in) {
            return wsum(bilinear_sample(in[0], in[1]));
          },
          {detail::smooth_image(c, ih, iw, rng),
           Tensor<double>::from_vector({1, gh, gw, 2}, coords)},
          step);
    }
  }
  return results;
}

// Finite-difference checks of warp gradients w.r.t. vertex motions (and the
// sampled image), per the two kink-free constructions described inline.
inline std::vector<SuiteResult> gradcheck_warp_suite(int instances,
                                                     double tol = 1e-3,
                                                     double step = 1e-3) {
  std::vector<SuiteResult> results;
  for (int inst = 0; inst < instances; ++inst) {
    Rng rng(mix_seed(0xbeef, static_cast<std::uint64_t>(inst)));
    const int gh = 2 + static_cast<int>(rng.uniform_int(3));
    const int gw = 2 + static_cast<int>(rng.uniform_int(3));
    const int h = 6 * gh;
    const int w = 6 * gw;
    const GridSpec spec{gh, gw, static_cast<double>(h), static_cast<double>(w)};
    const int c = 1 + static_cast<int>(rng.uniform_int(2));

    const bool linear_mode = inst % 2 == 0;
    Tensor<double> image;
    std::vector<double> motions(static_cast<std::size_t>(spec.vertex_rows()) *
                                spec.vertex_cols() * 2);
    if (linear_mode) {
      // Linear image: interpolation is globally linear, any small mesh works.
      image = detail::linear_image(c, h, w, rng);
      const double lim = 0.25 * std::min(spec.cell_w(), spec.cell_h());
      for (double& m : motions) m = rng.uniform(-lim, lim);
    } else {
      // Textured image: keep sample fractions away from the lattice by using
      // a half-pixel translation plus tiny per-vertex noise.
      image = detail::smooth_image(c, h, w, rng);
      const double tx = rng.uniform(0.35, 0.65) * (rng.uniform() < 0.5 ? 1 : -1);
      const double ty = rng.uniform(0.35, 0.65) * (rng.uniform() < 0.5 ? 1 : -1);
      for (std::size_t i = 0; i < motions.size(); i += 2) {
        motions[i] = tx + rng.uniform(-0.05, 0.05);
        motions[i + 1] = ty + rng.uniform(-0.05, 0.05);
      }
    }
    auto motion_tensor = Tensor<double>::from_vector(
        {1, spec.vertex_rows(), spec.vertex_cols(), 2}, motions);

    Rng wrng(mix_seed(0x1234, static_cast<std::uint64_t>(inst)));
    auto wts = detail::interior_weights(c, h, w, 3, wrng);
    const std::string name = std::string(linear_mode ? "warp_linear#" : "warp_textured#") +
                             std::to_string(inst);

    results.push_back(
        {name + "/motions", grad_check(
                                [&](std::vector<Tensor<double>>& in) {
                                  return sum(mul(warp(image, in[0], spec), wts));
                                },
                                {motion_tensor}, step, tol)});
    results.push_back(
        {name + "/image", grad_check(
                              [&](std::vector<Tensor<double>>& in) {
                                return sum(mul(warp(in[0], motion_tensor, spec), wts));
                              },
                              {image}, 1e-4, tol)});
  }

  // inverse-consistency penalty: gradients into both motion tensors.
  for (int inst = 0; inst < std::max(4, instances / 4); ++inst) {
    Rng rng(mix_seed(0xcafe, static_cast<std::uint64_t>(inst)));
    const GridSpec spec{2, 2, 24, 24};
    auto make_motions = [&] {
      std::vector<double> m(static_cast<std::size_t>(spec.vertex_rows()) *
                            spec.vertex_cols() * 2);
      for (double& v : m) v = rng.uniform(-2.0, 2.0);
      return Tensor<double>::from_vector(
          {1, spec.vertex_rows(), spec.vertex_cols(), 2}, std::move(m));
    };
    results.push_back(
        {"inverse_consistency#" + std::to_string(inst),
         grad_check(
             [&](std::vector<Tensor<double>>& in) {
               return inverse_consistency(in[0], in[1], spec);
             },
             {make_motions(), make_motions()}, 1e-5, tol)});
  }
  return results;
}

// Two conv layers per sub-network, C=2, 2x2 grid: small enough that finite
// differences over every parameter stay cheap.
inline ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.feature_channels = 2;
  cfg.f_hidden = 2;
  cfg.m_hidden = 2;
  cfg.s_hidden1 = 2;
  cfg.s_hidden2 = 2;
  cfg.backbone = {{4, 1}, {4, 2}};
  cfg.K = 2;
  cfg.scale_divisors = {2, 1};
  cfg.grid_h = 2;
  cfg.grid_w = 2;
  cfg.max_disp = 2.0;
  cfg.branches_enabled = {0, 1};
  return cfg;
}

// total_loss gradients w.r.t. every parameter of the tiny model. The branch
// heads are scaled up after seeding so predicted motions sit well away from
// both the integer sampling lattice and the |P - I| = 0 kink of the
// inverse-consistency term; finite differences are meaningless on a kink.
inline std::vector<SuiteResult> gradcheck_model_suite(double tol = 1e-3,
                                                      double step = 1e-5) {
  const ModelConfig cfg = tiny_model_config();
  LossConfig loss_cfg;

  auto params = Parameters<double>::init(cfg, 7777);
  for (int k = 0; k < cfg.K; ++k) {
    for (const char* part : {".head.weight", ".head.bias"}) {
      auto vals = params.at("h.branch" + std::to_string(k) + part).raw_values();
      for (double& v : vals) v *= 8.0;
    }
  }

  Rng rng(424242);
  const auto ia = detail::smooth_image(3, 16, 16, rng);
  const auto ib = detail::smooth_image(3, 16, 16, rng);

  const auto schema = parameter_schema(cfg);
  std::vector<Tensor<double>> inputs;
  inputs.reserve(schema.size());
  for (const ParamSpec& s : schema) inputs.push_back(params.at(s.name));

  auto loss_fn = [&, schema](std::vector<Tensor<double>>& in) {
    Parameters<double> p;
    for (std::size_t i = 0; i < schema.size(); ++i) {
      p.named.emplace(schema[i].name, in[i]);
    }
    auto out = forward(ia, ib, p, cfg, RunMode::train);
    return total_loss(out, loss_cfg).total;
  };

  return {{"total_loss/all_parameters",
           grad_check(loss_fn, std::move(inputs), step, tol)}};
}

}  // namespace mf
