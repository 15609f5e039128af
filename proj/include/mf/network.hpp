#pragma once

#include <map>
#include <string>
#include <vector>

#include "mf/nn_ops.hpp"
#include "mf/rng.hpp"
#include "mf/warp.hpp"

namespace mf {

struct ConvSpec {
  int channels = 0;
  int stride = 1;
  bool operator==(const ConvSpec&) const = default;
};

// Architecture and ablation switches. The backbone below is the mesh
// estimator's shared trunk; it must keep at least (grid/min_divisor + 1)
// spatial resolution for the finest branch's pooling stage.
struct ModelConfig {
  int feature_channels = 4;  // C
  int f_hidden = 8;
  int m_hidden = 8;
  int s_hidden1 = 8;
  int s_hidden2 = 16;
  std::vector<ConvSpec> backbone = {{8, 1}, {16, 2}, {16, 1},
                                    {32, 2}, {32, 1}, {64, 1}};
  int K = 3;
  std::vector<int> scale_divisors = {16, 4, 1};
  int grid_h = 16;
  int grid_w = 16;
  double max_disp = 4.0;  // tanh clamp on predicted motions, px
  bool mask_enabled = true;
  std::vector<int> branches_enabled = {0, 1, 2};

  void validate() const {
    if (feature_channels < 1) throw ConfigError("feature_channels must be >= 1");
    if (f_hidden < 1 || m_hidden < 1 || s_hidden1 < 1 || s_hidden2 < 1) {
      throw ConfigError("hidden channel counts must be >= 1");
    }
    if (backbone.empty()) throw ConfigError("backbone must have layers");
    for (const ConvSpec& l : backbone) {
      if (l.channels < 1) throw ConfigError("backbone channels must be >= 1");
      if (l.stride < 1) throw ConfigError("backbone stride must be >= 1");
    }
    if (K < 1) throw ConfigError("K must be >= 1");
    if (static_cast<int>(scale_divisors.size()) != K) {
      throw ConfigError("need exactly K scale divisors");
    }
    for (std::size_t i = 0; i < scale_divisors.size(); ++i) {
      if (scale_divisors[i] < 1) throw ConfigError("divisors must be >= 1");
      if (i + 1 < scale_divisors.size() &&
          scale_divisors[i] <= scale_divisors[i + 1]) {
        throw ConfigError("scale divisors must be strictly decreasing");
      }
    }
    if (scale_divisors.back() != 1) throw ConfigError("finest divisor must be 1");
    if (grid_h < 1 || grid_w < 1) throw ConfigError("grid dims must be >= 1");
    for (int d : scale_divisors) {
      if (grid_h % d || grid_w % d) {
        throw ConfigError("grid dims must be divisible by every scale divisor");
      }
    }
    if (!(max_disp > 0)) throw ConfigError("max_disp must be positive");
    if (branches_enabled.empty()) throw ConfigError("no branches enabled");
    for (std::size_t i = 0; i < branches_enabled.size(); ++i) {
      const int b = branches_enabled[i];
      if (b < 0 || b >= K) throw ConfigError("branch index out of range");
      if (i && branches_enabled[i] <= branches_enabled[i - 1]) {
        throw ConfigError("branches_enabled must be strictly increasing");
      }
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// One entry of the parameter schema: creation order is canonical and drives
// both seeded initialization and the checkpoint layout.
struct ParamSpec {
  std::string name;
  Shape shape;
  int fan_in = 1;
};

inline std::vector<ParamSpec> parameter_schema(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  auto conv = [&out](const std::string& name, int cout, int cin) {
    const int fan_in = cin * 9;
    out.push_back({name + ".weight", {cout, cin, 3, 3}, fan_in});
    out.push_back({name + ".bias", {cout}, fan_in});
  };
  conv("f.conv0", cfg.f_hidden, 3);
  conv("f.conv1", cfg.feature_channels, cfg.f_hidden);
  conv("m.conv0", cfg.m_hidden, 3);
  conv("m.conv1", 1, cfg.m_hidden);
  conv("s.conv0", cfg.s_hidden1, 6);
  conv("s.conv1", cfg.s_hidden2, cfg.s_hidden1);
  conv("s.head", cfg.K, cfg.s_hidden2);
  int ch = 2 * cfg.feature_channels;
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    conv("h.backbone.conv" + std::to_string(i), cfg.backbone[i].channels, ch);
    ch = cfg.backbone[i].channels;
  }
  for (int k = 0; k < cfg.K; ++k) {
    conv("h.branch" + std::to_string(k) + ".head", 2, ch);
  }
  return out;
}

template <typename T>
struct Parameters {
  std::map<std::string, Tensor<T>> named;

  Tensor<T>& at(const std::string& name) {
    auto it = named.find(name);
    if (it == named.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = named.find(name);
    if (it == named.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, t] : named) t.zero_grad();
  }

  // Fan-in uniform initialization, fully determined by (cfg, seed).
  static Parameters init(const ModelConfig& cfg, std::uint64_t seed) {
    Parameters p;
    Rng rng(seed);
    for (const ParamSpec& spec : parameter_schema(cfg)) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      std::vector<T> data(static_cast<std::size_t>(numel_of(spec.shape)));
      for (T& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
      p.named.emplace(spec.name,
                      Tensor<T>::from_vector(spec.shape, std::move(data), true));
    }
    return p;
  }
};

enum class RunMode { train, infer };

template <typename T>
struct RegistrationOutput {
  GridSpec grid;
  Tensor<T> mesh_ab, mesh_ba;            // fused motions [N, Vr, Vc, 2]
  std::vector<Tensor<T>> branches_ab;    // per enabled branch, full-grid motions
  std::vector<Tensor<T>> branches_ba;
  Tensor<T> seg;                         // raw logits [N, Vr, Vc, K]
  Tensor<T> mask_a, mask_b;              // [N,1,H,W]
  Tensor<T> warped_mask_a, warped_mask_b;
  Tensor<T> feat_a, feat_b;              // [N,C,H,W]
  Tensor<T> warped_feat_a, warped_feat_b;
  Tensor<T> warped_a, warped_b;          // I'a, I'b
};

namespace detail {

template <typename T>
Tensor<T> conv_layer(const Tensor<T>& x, const Parameters<T>& p,
                     const std::string& name, int stride) {
  return conv2d(x, p.at(name + ".weight"), p.at(name + ".bias"), stride, 1);
}

inline void require_image(const char* who, const Shape& s) {
  if (s.size() != 4 || s[1] != 3) {
    throw ShapeError(std::string(who) + ": expected [N,3,H,W] image, got " +
                     shape_str(s));
  }
}

}  // namespace detail

// F = f(I): stride-1 fully convolutional, spatial size preserved.
template <typename T>
Tensor<T> extract_features(const Tensor<T>& image, const Parameters<T>& p,
                           const ModelConfig& cfg) {
  detail::require_image("extract_features", image.shape());
  auto x = relu(detail::conv_layer(image, p, "f.conv0", 1));
  return detail::conv_layer(x, p, "f.conv1", 1);
}

// M = m(I): inlier probability map in (0,1). With the mask ablation off this
// returns constant ones, which reduces the normalized loss to a plain mean.
template <typename T>
Tensor<T> predict_mask(const Tensor<T>& image, const Parameters<T>& p,
                       const ModelConfig& cfg) {
  detail::require_image("predict_mask", image.shape());
  if (!cfg.mask_enabled) {
    return Tensor<T>::full({image.dim(0), 1, image.dim(2), image.dim(3)}, T(1));
  }
  auto x = relu(detail::conv_layer(image, p, "m.conv0", 1));
  return sigmoid(detail::conv_layer(x, p, "m.conv1", 1));
}

// S = s(Ia, Ib): raw branch-selection logits at mesh-vertex resolution,
// [N, Vr, Vc, K]. Softmax is applied by the fusion step.
template <typename T>
Tensor<T> segment(const Tensor<T>& ia, const Tensor<T>& ib,
                  const Parameters<T>& p, const ModelConfig& cfg) {
  detail::require_image("segment", ia.shape());
  if (ia.shape() != ib.shape()) throw ShapeError("segment: image shapes differ");
  auto x = relu(detail::conv_layer(concat_channels(ia, ib), p, "s.conv0", 2));
  x = relu(detail::conv_layer(x, p, "s.conv1", 2));
  const int vr = cfg.grid_h + 1, vc = cfg.grid_w + 1;
  if (x.dim(2) < vr || x.dim(3) < vc) {
    throw ShapeError("segment: feature map " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)) + " smaller than vertex grid " +
                     std::to_string(vr) + "x" + std::to_string(vc));
  }
  x = adaptive_avg_pool(x, vr, vc);
  x = detail::conv_layer(x, p, "s.head", 1);
  return nchw_to_nhwc(x);
}

// {Mk} = h(Ga, Gb): shared strided trunk, then one branch per enabled scale.
// Each branch pools to its vertex grid, regresses tanh-clamped motions and is
// upsampled to the full grid. Returned in branches_enabled order.
template <typename T>
std::vector<Tensor<T>> estimate_meshes(const Tensor<T>& ga, const Tensor<T>& gb,
                                       const Parameters<T>& p,
                                       const ModelConfig& cfg) {
  if (ga.shape() != gb.shape()) {
    throw ShapeError("estimate_meshes: weighted feature shapes differ");
  }
  auto x = concat_channels(ga, gb);
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    x = relu(detail::conv_layer(x, p, "h.backbone.conv" + std::to_string(i),
                                cfg.backbone[i].stride));
  }
  std::vector<Tensor<T>> meshes;
  meshes.reserve(cfg.branches_enabled.size());
  for (int k : cfg.branches_enabled) {
    const int div = cfg.scale_divisors[static_cast<std::size_t>(k)];
    const int gh = cfg.grid_h / div + 1;
    const int gw = cfg.grid_w / div + 1;
    if (x.dim(2) < gh || x.dim(3) < gw) {
      throw ConfigError("backbone output " + std::to_string(x.dim(2)) + "x" +
                        std::to_string(x.dim(3)) + " cannot pool to branch grid " +
                        std::to_string(gh) + "x" + std::to_string(gw) +
                        "; reduce strides or enlarge the input");
    }
    auto b = adaptive_avg_pool(x, gh, gw);
    b = detail::conv_layer(b, p, "h.branch" + std::to_string(k) + ".head", 1);
    b = mul(tanh_op(b), static_cast<T>(cfg.max_disp));
    auto motions = nchw_to_nhwc(b);  // [N, gh, gw, 2]
    if (div > 1) motions = upsample_vertex_grid(motions, div);
    meshes.push_back(std::move(motions));
  }
  return meshes;
}

namespace detail {

// Soft fusion: softmax over the enabled branches' logits per vertex, convex
// combination of their motions. Differentiable.
template <typename T>
Tensor<T> fuse_soft(const std::vector<Tensor<T>>& meshes, const Tensor<T>& seg,
                    const std::vector<int>& enabled) {
  std::vector<Tensor<T>> logits;
  logits.reserve(enabled.size());
  for (int k : enabled) logits.push_back(index_last(seg, k));
  auto weights = softmax(stack_last(logits), 3);  // [N, Vr, Vc, E]
  Tensor<T> fused;
  for (std::size_t j = 0; j < meshes.size(); ++j) {
    auto contrib = mul(meshes[j],
                       expand_last(index_last(weights, static_cast<int>(j)), 2));
    fused = j == 0 ? contrib : add(fused, contrib);
  }
  return fused;
}

// Hard fusion: per-vertex argmax over the enabled branches (ties to the
// lowest branch index). Selection is a detached constant.
template <typename T>
Tensor<T> fuse_hard(const std::vector<Tensor<T>>& meshes, const Tensor<T>& seg,
                    const std::vector<int>& enabled) {
  const int n = seg.dim(0), vr = seg.dim(1), vc = seg.dim(2), k = seg.dim(3);
  auto sv = seg.values();
  std::vector<T> out(static_cast<std::size_t>(n) * vr * vc * 2);
  for (int ni = 0; ni < n; ++ni) {
    for (int v = 0; v < vr; ++v) {
      for (int u = 0; u < vc; ++u) {
        const std::size_t base = ((static_cast<std::size_t>(ni) * vr + v) * vc + u);
        std::size_t best = 0;
        T best_logit = sv[base * k + static_cast<std::size_t>(enabled[0])];
        for (std::size_t j = 1; j < enabled.size(); ++j) {
          const T l = sv[base * k + static_cast<std::size_t>(enabled[j])];
          if (l > best_logit) {
            best_logit = l;
            best = j;
          }
        }
        auto mv = meshes[best].values();
        out[base * 2] = mv[base * 2];
        out[base * 2 + 1] = mv[base * 2 + 1];
      }
    }
  }
  return Tensor<T>::from_vector({n, vr, vc, 2}, std::move(out));
}

}  // namespace detail

// Full two-direction pass: features and masks for both images, mesh branches
// for (a->b) and the swapped (b->a), fusion (soft while training, hard at
// inference), then the warps the loss consumes.
template <typename T>
RegistrationOutput<T> forward(const Tensor<T>& ia, const Tensor<T>& ib,
                              const Parameters<T>& p, const ModelConfig& cfg,
                              RunMode mode) {
  cfg.validate();
  detail::require_image("forward", ia.shape());
  if (ia.shape() != ib.shape()) throw ShapeError("forward: image shapes differ");

  RegistrationOutput<T> out;
  out.grid = GridSpec{cfg.grid_h, cfg.grid_w, static_cast<double>(ia.dim(2)),
                      static_cast<double>(ia.dim(3))};

  out.feat_a = extract_features(ia, p, cfg);
  out.feat_b = extract_features(ib, p, cfg);
  out.mask_a = predict_mask(ia, p, cfg);
  out.mask_b = predict_mask(ib, p, cfg);

  auto ga = mul(out.feat_a, out.mask_a);
  auto gb = mul(out.feat_b, out.mask_b);

  out.branches_ab = estimate_meshes(ga, gb, p, cfg);
  out.branches_ba = estimate_meshes(gb, ga, p, cfg);
  out.seg = segment(ia, ib, p, cfg);

  if (cfg.branches_enabled.size() == 1) {
    out.mesh_ab = out.branches_ab[0];
    out.mesh_ba = out.branches_ba[0];
  } else if (mode == RunMode::train) {
    out.mesh_ab = detail::fuse_soft(out.branches_ab, out.seg, cfg.branches_enabled);
    out.mesh_ba = detail::fuse_soft(out.branches_ba, out.seg, cfg.branches_enabled);
  } else {
    out.mesh_ab = detail::fuse_hard(out.branches_ab, out.seg, cfg.branches_enabled);
    out.mesh_ba = detail::fuse_hard(out.branches_ba, out.seg, cfg.branches_enabled);
  }

  out.warped_a = warp(ia, out.mesh_ab, out.grid);
  out.warped_mask_a = warp(out.mask_a, out.mesh_ab, out.grid);
  out.warped_b = warp(ib, out.mesh_ba, out.grid);
  out.warped_mask_b = warp(out.mask_b, out.mesh_ba, out.grid);
  out.warped_feat_a = extract_features(out.warped_a, p, cfg);
  out.warped_feat_b = extract_features(out.warped_b, p, cfg);
  return out;
}

}  // namespace mf
