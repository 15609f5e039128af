#pragma once

#include <cstdint>
#include <vector>

#include "mf/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mf {

namespace detail {

inline void require_rank(const char* op, const Shape& s, int rank) {
  if (static_cast<int>(s.size()) != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: zero-padded cross-correlation, NCHW input, [Cout,Cin,kh,kw] weight.
// Direct loops; each output element has a fixed accumulation order, so the
// parallel kernels are bitwise reproducible.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride, int padding) {
  detail::require_rank("conv2d", input.shape(), 4);
  detail::require_rank("conv2d", weight.shape(), 4);
  detail::require_rank("conv2d", bias.shape(), 1);
  if (stride <= 0) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, input has " + std::to_string(cin));
  }
  if (bias.dim(0) != cout) throw ShapeError("conv2d: bias/out-channel mismatch");
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;
  if (h + 2 * padding < kh || w + 2 * padding < kw || oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }

  auto in = input.values();
  auto wt = weight.values();
  auto bs = bias.values();
  std::vector<T> out(static_cast<std::size_t>(n) * cout * oh * ow);

  const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int ni = 0; ni < n; ++ni) {
    for (int co = 0; co < cout; ++co) {
      T* orow0 = out.data() + (static_cast<std::int64_t>(ni) * cout + co) * out_plane;
      for (int oy = 0; oy < oh; ++oy) {
        T* orow = orow0 + static_cast<std::int64_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) orow[ox] = bs[static_cast<std::size_t>(co)];
        for (int ci = 0; ci < cin; ++ci) {
          const T* iplane = in.data() + (static_cast<std::int64_t>(ni) * cin + ci) * in_plane;
          const T* wplane = wt.data() +
                            ((static_cast<std::int64_t>(co) * cin + ci) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            const T* irow = iplane + static_cast<std::int64_t>(iy) * w;
            const T* wrow = wplane + static_cast<std::int64_t>(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const T wv = wrow[kx];
              const int ix0 = -padding + kx;
              if (stride == 1) {
                const int lo = std::max(0, -ix0);
                const int hi = std::min(ow, w - ix0);
                const T* ip = irow + ix0;
                for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * ip[ox];
              } else {
                for (int ox = 0; ox < ow; ++ox) {
                  const int ix = ox * stride + ix0;
                  if (ix >= 0 && ix < w) orow[ox] += wv * irow[ix];
                }
              }
            }
          }
        }
      }
    }
  }

  return make_op<T>(
      "conv2d", {n, cout, oh, ow}, std::move(out), {input, weight, bias},
      [=](detail::Node<T>& self) {
        auto& pin = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const T* gout = self.grad.data();

        if (pb.requires_grad) {
          pb.ensure_grad();
          for (int co = 0; co < cout; ++co) {
            double acc = 0;
            for (int ni = 0; ni < n; ++ni) {
              const T* g = gout + (static_cast<std::int64_t>(ni) * cout + co) * out_plane;
              for (std::int64_t i = 0; i < out_plane; ++i) acc += static_cast<double>(g[i]);
            }
            pb.grad[static_cast<std::size_t>(co)] += static_cast<T>(acc);
          }
        }

        if (pw.requires_grad) {
          pw.ensure_grad();
          const T* in_v = pin.value.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
          for (int co = 0; co < cout; ++co) {
            for (int ci = 0; ci < cin; ++ci) {
              for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                  double acc = 0;
                  for (int ni = 0; ni < n; ++ni) {
                    const T* g = gout + (static_cast<std::int64_t>(ni) * cout + co) * out_plane;
                    const T* iplane = in_v + (static_cast<std::int64_t>(ni) * cin + ci) * in_plane;
                    for (int oy = 0; oy < oh; ++oy) {
                      const int iy = oy * stride - padding + ky;
                      if (iy < 0 || iy >= h) continue;
                      const T* irow = iplane + static_cast<std::int64_t>(iy) * w;
                      const T* grow = g + static_cast<std::int64_t>(oy) * ow;
                      const int ix0 = -padding + kx;
                      if (stride == 1) {
                        const int lo = std::max(0, -ix0);
                        const int hi = std::min(ow, w - ix0);
                        const T* ip = irow + ix0;
                        for (int ox = lo; ox < hi; ++ox) {
                          acc += static_cast<double>(grow[ox]) * static_cast<double>(ip[ox]);
                        }
                      } else {
                        for (int ox = 0; ox < ow; ++ox) {
                          const int ix = ox * stride + ix0;
                          if (ix >= 0 && ix < w) {
                            acc += static_cast<double>(grow[ox]) * static_cast<double>(irow[ix]);
                          }
                        }
                      }
                    }
                  }
                  pw.grad[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx] +=
                      static_cast<T>(acc);
                }
              }
            }
          }
        }

        if (pin.requires_grad) {
          pin.ensure_grad();
          const T* wv = pw.value.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
          for (int ni = 0; ni < n; ++ni) {
            for (int ci = 0; ci < cin; ++ci) {
              T* gi = pin.grad.data() + (static_cast<std::int64_t>(ni) * cin + ci) * in_plane;
              for (int iy = 0; iy < h; ++iy) {
                for (int ix = 0; ix < w; ++ix) {
                  double acc = 0;
                  for (int co = 0; co < cout; ++co) {
                    const T* g = gout + (static_cast<std::int64_t>(ni) * cout + co) * out_plane;
                    const T* wplane = wv + ((static_cast<std::int64_t>(co) * cin + ci) * kh) * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                      const int oy_num = iy + padding - ky;
                      if (oy_num < 0 || oy_num % stride) continue;
                      const int oy = oy_num / stride;
                      if (oy >= oh) continue;
                      for (int kx = 0; kx < kw; ++kx) {
                        const int ox_num = ix + padding - kx;
                        if (ox_num < 0 || ox_num % stride) continue;
                        const int ox = ox_num / stride;
                        if (ox >= ow) continue;
                        acc += static_cast<double>(g[static_cast<std::int64_t>(oy) * ow + ox]) *
                               static_cast<double>(wplane[static_cast<std::int64_t>(ky) * kw + kx]);
                      }
                    }
                  }
                  gi[static_cast<std::int64_t>(iy) * w + ix] += static_cast<T>(acc);
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// adaptive_avg_pool: output cell (i,j) averages input rows
// [floor(i*H/oh), ceil((i+1)*H/oh)) x the analogous column range.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, int out_h, int out_w) {
  detail::require_rank("adaptive_avg_pool", input.shape(), 4);
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w) {
    throw ShapeError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " invalid for input " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  // Value captures: these partition maps are reused inside the backward
  // closure after this frame is gone.
  auto row_lo = [h, out_h](int i) { return (i * h) / out_h; };
  auto row_hi = [h, out_h](int i) { return ((i + 1) * h + out_h - 1) / out_h; };
  auto col_lo = [w, out_w](int j) { return (j * w) / out_w; };
  auto col_hi = [w, out_w](int j) { return ((j + 1) * w + out_w - 1) / out_w; };

  auto in = input.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * out_h * out_w);
  const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
    const T* ip = in.data() + p * in_plane;
    T* op = out.data() + p * out_plane;
    for (int i = 0; i < out_h; ++i) {
      for (int j = 0; j < out_w; ++j) {
        double acc = 0;
        for (int r = row_lo(i); r < row_hi(i); ++r) {
          for (int q = col_lo(j); q < col_hi(j); ++q) {
            acc += static_cast<double>(ip[static_cast<std::int64_t>(r) * w + q]);
          }
        }
        const double area = static_cast<double>(row_hi(i) - row_lo(i)) *
                            static_cast<double>(col_hi(j) - col_lo(j));
        op[static_cast<std::int64_t>(i) * out_w + j] = static_cast<T>(acc / area);
      }
    }
  }

  return make_op<T>(
      "adaptive_avg_pool", {n, c, out_h, out_w}, std::move(out), {input},
      [=](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t pl = 0; pl < static_cast<std::int64_t>(n) * c; ++pl) {
          const T* g = self.grad.data() + pl * out_plane;
          T* gi = p.grad.data() + pl * in_plane;
          for (int i = 0; i < out_h; ++i) {
            for (int j = 0; j < out_w; ++j) {
              const double area = static_cast<double>(row_hi(i) - row_lo(i)) *
                                  static_cast<double>(col_hi(j) - col_lo(j));
              const double gv = static_cast<double>(g[static_cast<std::int64_t>(i) * out_w + j]) / area;
              for (int r = row_lo(i); r < row_hi(i); ++r) {
                for (int q = col_lo(j); q < col_hi(j); ++q) {
                  gi[static_cast<std::int64_t>(r) * w + q] += static_cast<T>(gv);
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear upsample of an NCHW map by an integer factor, corner-aligned:
// output (H*f, W*f); output position i samples input coordinate
// i*(H-1)/(H*f-1), so the output corners coincide with the input corners.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, int factor) {
  detail::require_rank("upsample_bilinear", input.shape(), 4);
  if (factor < 1) throw ConfigError("upsample_bilinear: factor must be >= 1");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oh = h * factor, ow = w * factor;

  auto axis_weights = [](int in_len, int out_len) {
    // For each output index: (i0, i1, t) with value (1-t)*v[i0] + t*v[i1].
    std::vector<std::tuple<int, int, double>> m(static_cast<std::size_t>(out_len));
    for (int i = 0; i < out_len; ++i) {
      if (out_len == 1 || in_len == 1) {
        m[static_cast<std::size_t>(i)] = {0, 0, 0.0};
        continue;
      }
      const double pos = static_cast<double>(i) * (in_len - 1) / (out_len - 1);
      int lo = static_cast<int>(std::floor(pos));
      if (lo >= in_len - 1) lo = in_len - 2;
      m[static_cast<std::size_t>(i)] = {lo, lo + 1, pos - lo};
    }
    return m;
  };
  const auto ym = axis_weights(h, oh);
  const auto xm = axis_weights(w, ow);

  auto in = input.values();
  std::vector<T> out(static_cast<std::size_t>(n) * c * oh * ow);
  const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
    const T* ip = in.data() + p * in_plane;
    T* op = out.data() + p * out_plane;
    for (int i = 0; i < oh; ++i) {
      const auto [y0, y1, ty] = ym[static_cast<std::size_t>(i)];
      for (int j = 0; j < ow; ++j) {
        const auto [x0, x1, tx] = xm[static_cast<std::size_t>(j)];
        const double v =
            (1 - ty) * ((1 - tx) * static_cast<double>(ip[static_cast<std::int64_t>(y0) * w + x0]) +
                        tx * static_cast<double>(ip[static_cast<std::int64_t>(y0) * w + x1])) +
            ty * ((1 - tx) * static_cast<double>(ip[static_cast<std::int64_t>(y1) * w + x0]) +
                  tx * static_cast<double>(ip[static_cast<std::int64_t>(y1) * w + x1]));
        op[static_cast<std::int64_t>(i) * ow + j] = static_cast<T>(v);
      }
    }
  }

  return make_op<T>(
      "upsample_bilinear", {n, c, oh, ow}, std::move(out), {input},
      [=](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::int64_t pl = 0; pl < static_cast<std::int64_t>(n) * c; ++pl) {
          const T* g = self.grad.data() + pl * out_plane;
          T* gi = p.grad.data() + pl * in_plane;
          for (int i = 0; i < oh; ++i) {
            const auto [y0, y1, ty] = ym[static_cast<std::size_t>(i)];
            for (int j = 0; j < ow; ++j) {
              const auto [x0, x1, tx] = xm[static_cast<std::size_t>(j)];
              const double gv = static_cast<double>(g[static_cast<std::int64_t>(i) * ow + j]);
              gi[static_cast<std::int64_t>(y0) * w + x0] += static_cast<T>((1 - ty) * (1 - tx) * gv);
              gi[static_cast<std::int64_t>(y0) * w + x1] += static_cast<T>((1 - ty) * tx * gv);
              gi[static_cast<std::int64_t>(y1) * w + x0] += static_cast<T>(ty * (1 - tx) * gv);
              gi[static_cast<std::int64_t>(y1) * w + x1] += static_cast<T>(ty * tx * gv);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Vertex-grid upsample for mesh motion tensors [N, gh, gw, 2]: output has
// (gh-1)*f+1 rows so that every coarse vertex lands exactly on a fine vertex
// (copied bit-exactly, interior interpolated).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> upsample_vertex_grid(const Tensor<T>& input, int factor) {
  detail::require_rank("upsample_vertex_grid", input.shape(), 4);
  if (input.dim(3) != 2) throw ShapeError("upsample_vertex_grid: last dim must be 2");
  if (factor < 1) throw ConfigError("upsample_vertex_grid: factor must be >= 1");
  const int n = input.dim(0), gh = input.dim(1), gw = input.dim(2);
  const int oh = (gh - 1) * factor + 1, ow = (gw - 1) * factor + 1;

  auto in = input.values();
  std::vector<T> out(static_cast<std::size_t>(n) * oh * ow * 2);
  auto src = [&](int ni, int y, int x, int d) {
    return in[((static_cast<std::size_t>(ni) * gh + y) * gw + x) * 2 + d];
  };
  for (int ni = 0; ni < n; ++ni) {
    for (int i = 0; i < oh; ++i) {
      const int y0 = i / factor;
      const int ry = i % factor;
      for (int j = 0; j < ow; ++j) {
        const int x0 = j / factor;
        const int rx = j % factor;
        for (int d = 0; d < 2; ++d) {
          T v;
          if (ry == 0 && rx == 0) {
            v = src(ni, y0, x0, d);  // lattice point: exact copy
          } else {
            const double ty = static_cast<double>(ry) / factor;
            const double tx = static_cast<double>(rx) / factor;
            const int y1 = std::min(y0 + 1, gh - 1);
            const int x1 = std::min(x0 + 1, gw - 1);
            v = static_cast<T>(
                (1 - ty) * ((1 - tx) * static_cast<double>(src(ni, y0, x0, d)) +
                            tx * static_cast<double>(src(ni, y0, x1, d))) +
                ty * ((1 - tx) * static_cast<double>(src(ni, y1, x0, d)) +
                      tx * static_cast<double>(src(ni, y1, x1, d))));
          }
          out[((static_cast<std::size_t>(ni) * oh + i) * ow + j) * 2 + d] = v;
        }
      }
    }
  }

  return make_op<T>(
      "upsample_vertex_grid", {n, oh, ow, 2}, std::move(out), {input},
      [=](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        auto gsrc = [&](int ni, int y, int x, int d) -> T& {
          return p.grad[((static_cast<std::size_t>(ni) * gh + y) * gw + x) * 2 + d];
        };
        for (int ni = 0; ni < n; ++ni) {
          for (int i = 0; i < oh; ++i) {
            const int y0 = i / factor;
            const int ry = i % factor;
            for (int j = 0; j < ow; ++j) {
              const int x0 = j / factor;
              const int rx = j % factor;
              for (int d = 0; d < 2; ++d) {
                const T g = self.grad[((static_cast<std::size_t>(ni) * oh + i) * ow + j) * 2 + d];
                if (ry == 0 && rx == 0) {
                  gsrc(ni, y0, x0, d) += g;
                } else {
                  const double ty = static_cast<double>(ry) / factor;
                  const double tx = static_cast<double>(rx) / factor;
                  const int y1 = std::min(y0 + 1, gh - 1);
                  const int x1 = std::min(x0 + 1, gw - 1);
                  gsrc(ni, y0, x0, d) += static_cast<T>((1 - ty) * (1 - tx) * static_cast<double>(g));
                  gsrc(ni, y0, x1, d) += static_cast<T>((1 - ty) * tx * static_cast<double>(g));
                  gsrc(ni, y1, x0, d) += static_cast<T>(ty * (1 - tx) * static_cast<double>(g));
                  gsrc(ni, y1, x1, d) += static_cast<T>(ty * tx * static_cast<double>(g));
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// concat along the channel axis of NCHW tensors.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("concat_channels", a.shape(), 4);
  detail::require_rank("concat_channels", b.shape(), 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(static_cast<std::size_t>(n) * (ca + cb) * plane);
  for (int ni = 0; ni < n; ++ni) {
    std::copy_n(av.data() + static_cast<std::int64_t>(ni) * ca * plane, ca * plane,
                out.data() + static_cast<std::int64_t>(ni) * (ca + cb) * plane);
    std::copy_n(bv.data() + static_cast<std::int64_t>(ni) * cb * plane, cb * plane,
                out.data() + (static_cast<std::int64_t>(ni) * (ca + cb) + ca) * plane);
  }
  return make_op<T>(
      "concat_channels", {n, ca + cb, h, w}, std::move(out), {a, b},
      [=](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (int ni = 0; ni < n; ++ni) {
          const T* g = self.grad.data() + static_cast<std::int64_t>(ni) * (ca + cb) * plane;
          if (pa.requires_grad) {
            pa.ensure_grad();
            T* ga = pa.grad.data() + static_cast<std::int64_t>(ni) * ca * plane;
            for (std::int64_t i = 0; i < ca * plane; ++i) ga[i] += g[i];
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            T* gb = pb.grad.data() + static_cast<std::int64_t>(ni) * cb * plane;
            for (std::int64_t i = 0; i < cb * plane; ++i) gb[i] += g[ca * plane + i];
          }
        }
      });
}

// [N,C,H,W] -> [N,H,W,C] permutation.
template <typename T>
Tensor<T> nchw_to_nhwc(const Tensor<T>& a) {
  detail::require_rank("nchw_to_nhwc", a.shape(), 4);
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  auto av = a.values();
  std::vector<T> out(av.size());
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          out[((static_cast<std::size_t>(ni) * h + y) * w + x) * c + ci] =
              av[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x];
        }
      }
    }
  }
  return make_op<T>("nchw_to_nhwc", {n, h, w, c}, std::move(out), {a},
                    [=](detail::Node<T>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (int ni = 0; ni < n; ++ni) {
                        for (int ci = 0; ci < c; ++ci) {
                          for (int y = 0; y < h; ++y) {
                            for (int x = 0; x < w; ++x) {
                              p.grad[((static_cast<std::size_t>(ni) * c + ci) * h + y) * w + x] +=
                                  self.grad[((static_cast<std::size_t>(ni) * h + y) * w + x) * c + ci];
                            }
                          }
                        }
                      }
                    });
}

// Selects slice k of the last axis: [..., K] -> [...].
template <typename T>
Tensor<T> index_last(const Tensor<T>& a, int k) {
  const Shape& s = a.shape();
  if (s.empty()) throw ShapeError("index_last: rank-0 input");
  const int klen = s.back();
  if (k < 0 || k >= klen) throw ShapeError("index_last: index out of range");
  Shape out_shape(s.begin(), s.end() - 1);
  const std::int64_t n = numel_of(out_shape);
  auto av = a.values();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = av[static_cast<std::size_t>(i * klen + k)];
  }
  return make_op<T>("index_last", std::move(out_shape), std::move(out), {a},
                    [n, klen, k](detail::Node<T>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (std::int64_t i = 0; i < n; ++i) {
                        p.grad[static_cast<std::size_t>(i * klen + k)] +=
                            self.grad[static_cast<std::size_t>(i)];
                      }
                    });
}

// Stacks same-shape tensors along a new trailing axis: L x [...] -> [..., L].
template <typename T>
Tensor<T> stack_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("stack_last: no inputs");
  const Shape base = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != base) throw ShapeError("stack_last: mixed shapes");
  }
  const int l = static_cast<int>(parts.size());
  const std::int64_t n = numel_of(base);
  Shape out_shape = base;
  out_shape.push_back(l);
  std::vector<T> out(static_cast<std::size_t>(n * l));
  for (int j = 0; j < l; ++j) {
    auto v = parts[static_cast<std::size_t>(j)].values();
    for (std::int64_t i = 0; i < n; ++i) {
      out[static_cast<std::size_t>(i * l + j)] = v[static_cast<std::size_t>(i)];
    }
  }
  return make_op<T>("stack_last", std::move(out_shape), std::move(out), parts,
                    [n, l](detail::Node<T>& self) {
                      for (int j = 0; j < l; ++j) {
                        auto& p = *self.parents[static_cast<std::size_t>(j)];
                        if (!p.requires_grad) continue;
                        p.ensure_grad();
                        for (std::int64_t i = 0; i < n; ++i) {
                          p.grad[static_cast<std::size_t>(i)] +=
                              self.grad[static_cast<std::size_t>(i * l + j)];
                        }
                      }
                    });
}

// Appends a broadcast axis of length d: [...] -> [..., d].
template <typename T>
Tensor<T> expand_last(const Tensor<T>& a, int d) {
  if (d < 1) throw ShapeError("expand_last: length must be positive");
  Shape out_shape = a.shape();
  out_shape.push_back(d);
  const std::int64_t n = a.numel();
  auto av = a.values();
  std::vector<T> out(static_cast<std::size_t>(n * d));
  for (std::int64_t i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      out[static_cast<std::size_t>(i * d + j)] = av[static_cast<std::size_t>(i)];
    }
  }
  return make_op<T>("expand_last", std::move(out_shape), std::move(out), {a},
                    [n, d](detail::Node<T>& self) {
                      auto& p = *self.parents[0];
                      if (!p.requires_grad) return;
                      p.ensure_grad();
                      for (std::int64_t i = 0; i < n; ++i) {
                        double acc = 0;
                        for (int j = 0; j < d; ++j) {
                          acc += static_cast<double>(self.grad[static_cast<std::size_t>(i * d + j)]);
                        }
                        p.grad[static_cast<std::size_t>(i)] += static_cast<T>(acc);
                      }
                    });
}

}  // namespace mf
