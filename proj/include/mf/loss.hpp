#pragma once

#include "mf/network.hpp"
#include "mf/tensor.hpp"
#include "mf/warp.hpp"

namespace mf {

enum class Reduction { mean, sum };

struct LossConfig {
  double lambda = 2.0;
  double mu = 0.01;
  Reduction reduction = Reduction::mean;
  double eps_div = 1e-8;              // guards empty-mask denominators
  double collapse_threshold = 1e-3;   // feature-distance floor the full loss defends

  void validate() const {
    if (lambda < 0) throw ConfigError("lambda must be >= 0");
    if (mu < 0) throw ConfigError("mu must be >= 0");
    if (!(eps_div > 0)) throw ConfigError("eps_div must be positive");
  }
};

template <typename T>
struct LossBreakdown {
  Tensor<T> total;  // differentiable scalar
  double ln_ab = 0;
  double ln_ba = 0;
  double l_feat = 0;
  double inv_consistency = 0;
  double total_value = 0;

  // total == ln_ab + ln_ba - lambda * l_feat + mu * inv_consistency
  double assembly_residual(const LossConfig& cfg) const {
    return std::abs(total_value -
                    (ln_ab + ln_ba - cfg.lambda * l_feat + cfg.mu * inv_consistency));
  }
};

// Mask-normalized L1: sum(M'M * |F' - F|) / (sum(M'M) + eps). The mask
// product is single-channel and broadcasts over the feature channels.
template <typename T>
Tensor<T> normalized_masked_l1(const Tensor<T>& f_warped, const Tensor<T>& f_target,
                               const Tensor<T>& m_warped, const Tensor<T>& m_target,
                               double eps_div = 1e-8) {
  if (f_warped.shape() != f_target.shape()) {
    throw ShapeError("normalized_masked_l1: feature shapes differ");
  }
  if (m_warped.shape() != m_target.shape()) {
    throw ShapeError("normalized_masked_l1: mask shapes differ");
  }
  if (m_warped.rank() != 4 || m_warped.dim(1) != 1 ||
      m_warped.dim(0) != f_warped.dim(0) || m_warped.dim(2) != f_warped.dim(2) ||
      m_warped.dim(3) != f_warped.dim(3)) {
    throw ShapeError("normalized_masked_l1: masks must be [N,1,H,W] matching "
                     "the features");
  }
  auto mask_product = mul(m_warped, m_target);
  auto weighted = mul(mask_product, abs_op(sub(f_warped, f_target)));
  return div(sum(weighted), add(sum(mask_product), static_cast<T>(eps_div)));
}

// |Fa - Fb| with the configured reduction; the term the objective maximizes.
template <typename T>
Tensor<T> feature_distance(const Tensor<T>& fa, const Tensor<T>& fb,
                           Reduction reduction = Reduction::mean) {
  if (fa.shape() != fb.shape()) {
    throw ShapeError("feature_distance: shapes differ");
  }
  auto d = abs_op(sub(fa, fb));
  return reduction == Reduction::mean ? mean(d) : sum(d);
}

// Assembles Ln(I'a,Ib) + Ln(I'b,Ia) - lambda*L(Ia,Ib) + mu*inverse-consistency.
template <typename T>
LossBreakdown<T> total_loss(const RegistrationOutput<T>& out, const LossConfig& cfg) {
  cfg.validate();
  auto ln_ab = normalized_masked_l1(out.warped_feat_a, out.feat_b,
                                    out.warped_mask_a, out.mask_b, cfg.eps_div);
  auto ln_ba = normalized_masked_l1(out.warped_feat_b, out.feat_a,
                                    out.warped_mask_b, out.mask_a, cfg.eps_div);
  auto l_feat = feature_distance(out.feat_a, out.feat_b, cfg.reduction);
  auto inv = inverse_consistency(out.mesh_ab, out.mesh_ba, out.grid);

  LossBreakdown<T> b;
  b.ln_ab = static_cast<double>(ln_ab.item());
  b.ln_ba = static_cast<double>(ln_ba.item());
  b.l_feat = static_cast<double>(l_feat.item());
  b.inv_consistency = static_cast<double>(inv.item());
  b.total = add(sub(add(ln_ab, ln_ba), mul(l_feat, static_cast<T>(cfg.lambda))),
                mul(inv, static_cast<T>(cfg.mu)));
  b.total_value = static_cast<double>(b.total.item());
  return b;
}

}  // namespace mf
