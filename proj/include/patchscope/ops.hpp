#pragma once

// Forward operations and their reverse-mode gradients. The op set is exactly
// what the two detector architectures and their training require.
//
// Reduction order contract: every output element accumulates its terms in a
// fixed documented order (input channel, then kernel row, then kernel
// column; spatial reductions run row-major). Threads only partition whole
// output elements, so results are bitwise identical for any thread count.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "patchscope/tensor.hpp"

namespace patchscope {

enum class PaddingMode { valid, same_zero };

struct ConvSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel = 1;  // odd, 1 or 3
  std::int64_t stride = 1;
  PaddingMode padding = PaddingMode::valid;

  void validate() const {
    if (kernel % 2 == 0 || kernel < 1) {
      throw ConfigError("conv kernel must be odd and positive, got " +
                        std::to_string(kernel));
    }
    if (stride < 1) {
      throw ConfigError("conv stride must be >= 1, got " +
                        std::to_string(stride));
    }
    if (in_channels < 1 || out_channels < 1) {
      throw ConfigError("conv channel counts must be positive");
    }
  }

  std::int64_t pad() const {
    return padding == PaddingMode::same_zero ? (kernel - 1) / 2 : 0;
  }

  // floor((n + 2p - k) / stride) + 1
  std::int64_t out_extent(std::int64_t n) const {
    const std::int64_t eff = n + 2 * pad() - kernel;
    if (eff < 0) {
      throw ConfigError("conv input extent " + std::to_string(n) +
                        " smaller than kernel " + std::to_string(kernel) +
                        " under padding");
    }
    return eff / stride + 1;
  }
};

namespace opdetail {

template <typename T>
inline void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Output-index range [lo, hi) for which o*stride + k - pad lands inside
// [0, extent). Hoisting this out of the inner loops keeps them branch-free.
inline std::pair<std::int64_t, std::int64_t> tap_range(std::int64_t out_n,
                                                       std::int64_t extent,
                                                       std::int64_t k,
                                                       std::int64_t stride,
                                                       std::int64_t pad) {
  const std::int64_t shift = k - pad;  // in = o*stride + shift
  std::int64_t lo = 0;
  if (shift < 0) lo = (-shift + stride - 1) / stride;
  const std::int64_t top = extent - 1 - shift;
  if (top < 0) return {0, 0};
  const std::int64_t hi = std::min(out_n - 1, top / stride) + 1;
  return {lo, std::max(lo, hi)};
}

// Reductions accumulate through eight fixed lanes (lane = index mod 8,
// combined pairwise, tail last). The pattern depends only on the element
// count, never on threading, so results stay reproducible while the chain
// dependency of a single serial accumulator disappears.
template <typename Acc>
struct LaneAcc {
  Acc lanes[8] = {};
  Acc tail = Acc(0);

  template <typename T>
  void add_products(const T* a, const T* b, std::int64_t n) {
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
      for (int l = 0; l < 8; ++l) {
        lanes[l] += static_cast<Acc>(a[i + l]) * static_cast<Acc>(b[i + l]);
      }
    }
    for (; i < n; ++i) {
      tail += static_cast<Acc>(a[i]) * static_cast<Acc>(b[i]);
    }
  }

  template <typename T>
  void add_products_strided(const T* a, const T* b, std::int64_t n,
                            std::int64_t stride_b) {
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
      for (int l = 0; l < 8; ++l) {
        lanes[l] += static_cast<Acc>(a[i + l]) *
                    static_cast<Acc>(b[(i + l) * stride_b]);
      }
    }
    for (; i < n; ++i) {
      tail += static_cast<Acc>(a[i]) * static_cast<Acc>(b[i * stride_b]);
    }
  }

  template <typename T>
  void add_values(const T* p, std::int64_t n) {
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
      for (int l = 0; l < 8; ++l) lanes[l] += static_cast<Acc>(p[i + l]);
    }
    for (; i < n; ++i) tail += static_cast<Acc>(p[i]);
  }

  template <typename T>
  void add_squared_diff(const T* p, std::int64_t n, Acc center) {
    std::int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
      for (int l = 0; l < 8; ++l) {
        const Acc d = static_cast<Acc>(p[i + l]) - center;
        lanes[l] += d * d;
      }
    }
    for (; i < n; ++i) {
      const Acc d = static_cast<Acc>(p[i]) - center;
      tail += d * d;
    }
  }

  Acc total() const {
    return (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
            ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))) +
           tail;
  }
};

}  // namespace opdetail

// --------------------------------------------------------------- conv2d

// input [N,Cin,H,W], weight [Cout,Cin,k,k], optional bias [Cout]
// -> [N,Cout,H',W'], cross-correlation semantics (no kernel flip).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvSpec& spec,
                 const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  spec.validate();
  if (input.rank() != 4) {
    throw ConfigError("conv2d expects [N,C,H,W] input, got " +
                      shape_str(input.shape()));
  }
  const std::int64_t N = input.dim(0), Ci = input.dim(1), H = input.dim(2),
                     W = input.dim(3);
  if (Ci != spec.in_channels) {
    throw ConfigError("conv2d channel mismatch: input has " +
                      std::to_string(Ci) + ", spec expects " +
                      std::to_string(spec.in_channels));
  }
  const Shape wshape = {spec.out_channels, spec.in_channels, spec.kernel,
                        spec.kernel};
  if (weight.shape() != wshape) {
    throw ConfigError("conv2d weight shape " + shape_str(weight.shape()) +
                      " does not match spec " + shape_str(wshape));
  }
  if (bias && bias->shape() != Shape{spec.out_channels}) {
    throw ConfigError("conv2d bias shape " + shape_str(bias->shape()) +
                      " does not match out_channels " +
                      std::to_string(spec.out_channels));
  }
  const std::int64_t k = spec.kernel, s = spec.stride, p = spec.pad();
  const std::int64_t OH = spec.out_extent(H), OW = spec.out_extent(W);
  const std::int64_t Co = spec.out_channels;

  std::vector<T> out(static_cast<std::size_t>(N * Co * OH * OW), T(0));
  const T* in = input.data();
  const T* w = weight.data();
  const T* b = bias ? bias->data() : nullptr;

  parallel_for(N * Co, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t nc = lo; nc < hi; ++nc) {
      const std::int64_t n = nc / Co, co = nc % Co;
      T* op = out.data() + (n * Co + co) * OH * OW;
      if (b) {
        for (std::int64_t i = 0; i < OH * OW; ++i) op[i] = b[co];
      }
      for (std::int64_t ci = 0; ci < Ci; ++ci) {
        const T* ip = in + (n * Ci + ci) * H * W;
        const T* wp = w + ((co * Ci + ci) * k) * k;
        for (std::int64_t ky = 0; ky < k; ++ky) {
          const auto [oy_lo, oy_hi] = opdetail::tap_range(OH, H, ky, s, p);
          for (std::int64_t kx = 0; kx < k; ++kx) {
            const T wv = wp[ky * k + kx];
            const auto [ox_lo, ox_hi] = opdetail::tap_range(OW, W, kx, s, p);
            for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
              const T* irow = ip + (oy * s + ky - p) * W + kx - p;
              T* orow = op + oy * OW;
              if (s == 1) {
                for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                  orow[ox] += wv * irow[ox];
                }
              } else {
                for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                  orow[ox] += wv * irow[ox * s];
                }
              }
            }
          }
        }
      }
    }
  });

  auto in_node = input;
  auto w_node = weight;
  std::optional<Tensor<T>> b_node;
  if (bias) b_node = *bias;
  const bool need_din = input.requires_grad();
  std::vector<Tensor<T>> parents = {input, weight};
  if (bias) parents.push_back(*bias);

  auto backward = [=](detail::TensorNode<T>& self) {
    const std::vector<T>& g = self.grad;
    // d bias
    if (b_node && b_node->requires_grad()) {
      std::vector<T>& db = b_node->node()->ensure_grad();
      parallel_for(Co, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t co = lo; co < hi; ++co) {
          opdetail::LaneAcc<T> acc;
          for (std::int64_t n = 0; n < N; ++n) {
            acc.add_values(g.data() + (n * Co + co) * OH * OW, OH * OW);
          }
          db[static_cast<std::size_t>(co)] += acc.total();
        }
      });
    }
    // d weight: accumulate over (n, oy, ox) in fixed order per element
    if (w_node.requires_grad()) {
      std::vector<T>& dw = w_node.node()->ensure_grad();
      const T* in_p = in_node.data();
      parallel_for(Co * Ci, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t cc = lo; cc < hi; ++cc) {
          const std::int64_t co = cc / Ci, ci = cc % Ci;
          for (std::int64_t ky = 0; ky < k; ++ky) {
            const auto [oy_lo, oy_hi] = opdetail::tap_range(OH, H, ky, s, p);
            for (std::int64_t kx = 0; kx < k; ++kx) {
              const auto [ox_lo, ox_hi] = opdetail::tap_range(OW, W, kx, s, p);
              T acc = T(0);
              for (std::int64_t n = 0; n < N; ++n) {
                const T* gp = g.data() + (n * Co + co) * OH * OW;
                const T* ip = in_p + (n * Ci + ci) * H * W;
                for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
                  const T* irow = ip + (oy * s + ky - p) * W + kx - p;
                  const T* grow = gp + oy * OW;
                  if (s == 1) {
                    for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                      acc += grow[ox] * irow[ox];
                    }
                  } else {
                    for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                      acc += grow[ox] * irow[ox * s];
                    }
                  }
                }
              }
              dw[static_cast<std::size_t>(((co * Ci + ci) * k + ky) * k + kx)] +=
                  acc;
            }
          }
        }
      });
    }
    // d input: per (n, ci), accumulate over (co, ky, kx) in fixed order
    if (need_din) {
      std::vector<T>& din = in_node.node()->ensure_grad();
      const T* w_p = w_node.data();
      parallel_for(N * Ci, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t nc = lo; nc < hi; ++nc) {
          const std::int64_t n = nc / Ci, ci = nc % Ci;
          T* dp = din.data() + (n * Ci + ci) * H * W;
          for (std::int64_t co = 0; co < Co; ++co) {
            const T* gp = g.data() + (n * Co + co) * OH * OW;
            const T* wp = w_p + ((co * Ci + ci) * k) * k;
            for (std::int64_t ky = 0; ky < k; ++ky) {
              const auto [oy_lo, oy_hi] = opdetail::tap_range(OH, H, ky, s, p);
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const T wv = wp[ky * k + kx];
                const auto [ox_lo, ox_hi] =
                    opdetail::tap_range(OW, W, kx, s, p);
                for (std::int64_t oy = oy_lo; oy < oy_hi; ++oy) {
                  T* drow = dp + (oy * s + ky - p) * W + kx - p;
                  const T* grow = gp + oy * OW;
                  if (s == 1) {
                    for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                      drow[ox] += wv * grow[ox];
                    }
                  } else {
                    for (std::int64_t ox = ox_lo; ox < ox_hi; ++ox) {
                      drow[ox * s] += wv * grow[ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
    }
  };

  return make_op_output<T>({N, Co, OH, OW}, std::move(out), std::move(parents),
                           std::move(backward));
}

// ------------------------------------------------------------ batch norm

// Train mode normalizes with the current batch statistics (biased variance,
// eps) and updates running stats in place with momentum 0.1 (unbiased
// variance, matching the usual convention). Eval mode applies the running
// stats as a per-channel affine map.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma,
                    const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, bool train, double eps = 1e-5,
                    double momentum = 0.1) {
  if (input.rank() != 4) {
    throw ConfigError("batchnorm expects [N,C,H,W] input, got " +
                      shape_str(input.shape()));
  }
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2),
                     W = input.dim(3);
  const Tensor<T>* chan_params[] = {&gamma, &beta, &running_mean, &running_var};
  for (const Tensor<T>* t : chan_params) {
    if (t->shape() != Shape{C}) {
      throw ConfigError("batchnorm parameter shape " + shape_str(t->shape()) +
                        " does not match channel count " + std::to_string(C));
    }
  }
  const std::int64_t M = N * H * W;  // elements per channel
  if (train && M == 0) throw DataError("batchnorm: empty batch in train mode");

  std::vector<T> out(input.vec().size());
  std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
  std::vector<double> invstd(static_cast<std::size_t>(C), 0.0);
  const T* in = input.data();
  const T* g = gamma.data();
  const T* b = beta.data();

  if (train) {
    T* rm = running_mean.data();
    T* rv = running_var.data();
    parallel_for(C, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t c = lo; c < hi; ++c) {
        double sum = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* p = in + (n * C + c) * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) sum += p[i];
        }
        const double mu = sum / static_cast<double>(M);
        double varsum = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* p = in + (n * C + c) * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) {
            const double d = p[i] - mu;
            varsum += d * d;
          }
        }
        const double var = varsum / static_cast<double>(M);
        mean[static_cast<std::size_t>(c)] = mu;
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[static_cast<std::size_t>(c)] = is;
        const double a = g[c] * is;
        const double sh = b[c] - mu * a;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* p = in + (n * C + c) * H * W;
          T* q = out.data() + (n * C + c) * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) {
            q[i] = static_cast<T>(a * p[i] + sh);
          }
        }
        const double unbiased =
            M > 1 ? varsum / static_cast<double>(M - 1) : var;
        rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mu);
        rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * unbiased);
      }
    });
  } else {
    const T* rm = running_mean.data();
    const T* rv = running_var.data();
    parallel_for(C, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t c = lo; c < hi; ++c) {
        const double is = 1.0 / std::sqrt(static_cast<double>(rv[c]) + eps);
        mean[static_cast<std::size_t>(c)] = rm[c];
        invstd[static_cast<std::size_t>(c)] = is;
        const double a = g[c] * is;
        const double sh = b[c] - rm[c] * a;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* p = in + (n * C + c) * H * W;
          T* q = out.data() + (n * C + c) * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) {
            q[i] = static_cast<T>(a * p[i] + sh);
          }
        }
      }
    });
  }

  auto in_node = input;
  auto g_node = gamma;
  auto b_node = beta;
  auto backward = [=](detail::TensorNode<T>& self) {
    const std::vector<T>& go = self.grad;
    const T* in_p = in_node.data();
    std::vector<T>* din = in_node.requires_grad()
                              ? &in_node.node()->ensure_grad()
                              : nullptr;
    std::vector<T>* dg =
        g_node.requires_grad() ? &g_node.node()->ensure_grad() : nullptr;
    std::vector<T>* db =
        b_node.requires_grad() ? &b_node.node()->ensure_grad() : nullptr;
    const T* gamma_p = g_node.data();
    parallel_for(C, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t c = lo; c < hi; ++c) {
        const double mu = mean[static_cast<std::size_t>(c)];
        const double is = invstd[static_cast<std::size_t>(c)];
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
          const T* gp = go.data() + (n * C + c) * H * W;
          const T* xp = in_p + (n * C + c) * H * W;
          for (std::int64_t i = 0; i < H * W; ++i) {
            sum_g += gp[i];
            sum_gx += gp[i] * ((xp[i] - mu) * is);
          }
        }
        if (dg) (*dg)[static_cast<std::size_t>(c)] += static_cast<T>(sum_gx);
        if (db) (*db)[static_cast<std::size_t>(c)] += static_cast<T>(sum_g);
        if (din) {
          const double gam = gamma_p[c];
          if (train) {
            const double inv_m = 1.0 / static_cast<double>(M);
            for (std::int64_t n = 0; n < N; ++n) {
              const T* gp = go.data() + (n * C + c) * H * W;
              const T* xp = in_p + (n * C + c) * H * W;
              T* dp = din->data() + (n * C + c) * H * W;
              for (std::int64_t i = 0; i < H * W; ++i) {
                const double xh = (xp[i] - mu) * is;
                dp[i] += static_cast<T>(
                    gam * is * (gp[i] - inv_m * sum_g - xh * inv_m * sum_gx));
              }
            }
          } else {
            for (std::int64_t n = 0; n < N; ++n) {
              const T* gp = go.data() + (n * C + c) * H * W;
              T* dp = din->data() + (n * C + c) * H * W;
              for (std::int64_t i = 0; i < H * W; ++i) {
                dp[i] += static_cast<T>(gam * is * gp[i]);
              }
            }
          }
        }
      }
    });
  };

  return make_op_output<T>(input.shape(), std::move(out),
                           {input, gamma, beta}, std::move(backward));
}

// ------------------------------------------------------------ activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.vec().size());
  const T* in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = in[i] > T(0) ? in[i] : T(0);
  }
  auto x_node = x;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!x_node.requires_grad()) return;
    std::vector<T>& dx = x_node.node()->ensure_grad();
    const T* in_p = x_node.data();
    const std::vector<T>& g = self.grad;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (in_p[i] > T(0)) dx[i] += g[i];
    }
  };
  return make_op_output<T>(x.shape(), std::move(out), {x}, std::move(backward));
}

// Numerically stable logistic: branches on sign so exp never overflows.
template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.vec().size());
  const T* in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(in[i]);
  auto x_node = x;
  auto out_copy = out;  // σ values reused by the backward pass
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!x_node.requires_grad()) return;
    std::vector<T>& dx = x_node.node()->ensure_grad();
    const std::vector<T>& g = self.grad;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T s = out_copy[i];
      dx[i] += g[i] * s * (T(1) - s);
    }
  };
  return make_op_output<T>(x.shape(), std::move(out), {x}, std::move(backward));
}

// ----------------------------------------------------------------- pools

// [N,C,H,W] -> [N,C]; row-major mean per plane.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) {
    throw ConfigError("global_avg_pool expects [N,C,H,W], got " +
                      shape_str(x.shape()));
  }
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw ConfigError("global_avg_pool on empty spatial extent");
  std::vector<T> out(static_cast<std::size_t>(N * C));
  const T* in = x.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    T acc = T(0);
    const T* p = in + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
    out[static_cast<std::size_t>(nc)] = acc / static_cast<T>(HW);
  }
  auto x_node = x;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!x_node.requires_grad()) return;
    std::vector<T>& dx = x_node.node()->ensure_grad();
    const std::vector<T>& g = self.grad;
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const T gv = g[static_cast<std::size_t>(nc)] / static_cast<T>(HW);
      T* dp = dx.data() + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) dp[i] += gv;
    }
  };
  return make_op_output<T>({N, C}, std::move(out), {x}, std::move(backward));
}

// [N,C,H,W] -> [N,C]; ties route the gradient to the first maximum in scan
// order.
template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
  if (x.rank() != 4) {
    throw ConfigError("global_max_pool expects [N,C,H,W], got " +
                      shape_str(x.shape()));
  }
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw ConfigError("global_max_pool on empty spatial extent");
  std::vector<T> out(static_cast<std::size_t>(N * C));
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(N * C));
  const T* in = x.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const T* p = in + nc * HW;
    T best = p[0];
    std::int64_t bi = 0;
    for (std::int64_t i = 1; i < HW; ++i) {
      if (p[i] > best) {
        best = p[i];
        bi = i;
      }
    }
    out[static_cast<std::size_t>(nc)] = best;
    argmax[static_cast<std::size_t>(nc)] = bi;
  }
  auto x_node = x;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!x_node.requires_grad()) return;
    std::vector<T>& dx = x_node.node()->ensure_grad();
    const std::vector<T>& g = self.grad;
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      dx[static_cast<std::size_t>(nc * HW + argmax[static_cast<std::size_t>(nc)])] +=
          g[static_cast<std::size_t>(nc)];
    }
  };
  return make_op_output<T>({N, C}, std::move(out), {x}, std::move(backward));
}

// ----------------------------------------------------------------- linear

// x [N,F] * weight [O,F]^T + bias [O] -> [N,O]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>* bias = nullptr) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ConfigError("linear shape mismatch: x " + shape_str(x.shape()) +
                      " vs weight " + shape_str(weight.shape()));
  }
  const std::int64_t N = x.dim(0), F = x.dim(1), O = weight.dim(0);
  if (bias && bias->shape() != Shape{O}) {
    throw ConfigError("linear bias shape " + shape_str(bias->shape()) +
                      " does not match out features " + std::to_string(O));
  }
  std::vector<T> out(static_cast<std::size_t>(N * O), T(0));
  const T* xp = x.data();
  const T* wp = weight.data();
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t o = 0; o < O; ++o) {
      T acc = bias ? bias->data()[o] : T(0);
      const T* xr = xp + n * F;
      const T* wr = wp + o * F;
      for (std::int64_t f = 0; f < F; ++f) acc += wr[f] * xr[f];
      out[static_cast<std::size_t>(n * O + o)] = acc;
    }
  }
  auto x_node = x;
  auto w_node = weight;
  std::optional<Tensor<T>> b_node;
  if (bias) b_node = *bias;
  std::vector<Tensor<T>> parents = {x, weight};
  if (bias) parents.push_back(*bias);
  auto backward = [=](detail::TensorNode<T>& self) {
    const std::vector<T>& g = self.grad;
    const T* xp2 = x_node.data();
    const T* wp2 = w_node.data();
    if (b_node && b_node->requires_grad()) {
      std::vector<T>& db = b_node->node()->ensure_grad();
      for (std::int64_t o = 0; o < O; ++o) {
        T acc = T(0);
        for (std::int64_t n = 0; n < N; ++n) {
          acc += g[static_cast<std::size_t>(n * O + o)];
        }
        db[static_cast<std::size_t>(o)] += acc;
      }
    }
    if (w_node.requires_grad()) {
      std::vector<T>& dw = w_node.node()->ensure_grad();
      for (std::int64_t o = 0; o < O; ++o) {
        for (std::int64_t f = 0; f < F; ++f) {
          T acc = T(0);
          for (std::int64_t n = 0; n < N; ++n) {
            acc += g[static_cast<std::size_t>(n * O + o)] *
                   xp2[static_cast<std::size_t>(n * F + f)];
          }
          dw[static_cast<std::size_t>(o * F + f)] += acc;
        }
      }
    }
    if (x_node.requires_grad()) {
      std::vector<T>& dx = x_node.node()->ensure_grad();
      for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t f = 0; f < F; ++f) {
          T acc = T(0);
          for (std::int64_t o = 0; o < O; ++o) {
            acc += g[static_cast<std::size_t>(n * O + o)] *
                   wp2[static_cast<std::size_t>(o * F + f)];
          }
          dx[static_cast<std::size_t>(n * F + f)] += acc;
        }
      }
    }
  };
  return make_op_output<T>({N, O}, std::move(out), std::move(parents),
                           std::move(backward));
}

// ------------------------------------------------------------- structural

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  std::vector<T> out(a.vec().size());
  const T* ap = a.data();
  const T* bp = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] + bp[i];
  auto a_node = a;
  auto b_node = b;
  auto backward = [=](detail::TensorNode<T>& self) {
    const std::vector<T>& g = self.grad;
    if (a_node.requires_grad()) {
      opdetail::accumulate(a_node.node()->ensure_grad(), g);
    }
    if (b_node.requires_grad()) {
      opdetail::accumulate(b_node.node()->ensure_grad(), g);
    }
  };
  return make_op_output<T>(a.shape(), std::move(out), {a, b},
                           std::move(backward));
}

// Keeps the top-left oh x ow spatial window (shortcut alignment in blocks
// whose main path shrinks under valid 3x3 convolution).
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::int64_t oh, std::int64_t ow) {
  if (x.rank() != 4) {
    throw ConfigError("crop2d expects [N,C,H,W], got " + shape_str(x.shape()));
  }
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (oh > H || ow > W || oh < 1 || ow < 1) {
    throw ConfigError("crop2d target " + std::to_string(oh) + "x" +
                      std::to_string(ow) + " larger than input " +
                      shape_str(x.shape()));
  }
  if (oh == H && ow == W) return x;
  std::vector<T> out(static_cast<std::size_t>(N * C * oh * ow));
  const T* in = x.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    for (std::int64_t y = 0; y < oh; ++y) {
      const T* src = in + (nc * H + y) * W;
      T* dst = out.data() + (nc * oh + y) * ow;
      for (std::int64_t xx = 0; xx < ow; ++xx) dst[xx] = src[xx];
    }
  }
  auto x_node = x;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!x_node.requires_grad()) return;
    std::vector<T>& dx = x_node.node()->ensure_grad();
    const std::vector<T>& g = self.grad;
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      for (std::int64_t y = 0; y < oh; ++y) {
        T* dst = dx.data() + (nc * H + y) * W;
        const T* src = g.data() + (nc * oh + y) * ow;
        for (std::int64_t xx = 0; xx < ow; ++xx) dst[xx] += src[xx];
      }
    }
  };
  return make_op_output<T>({N, C, oh, ow}, std::move(out), {x},
                           std::move(backward));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    throw ConfigError("reshape " + shape_str(x.shape()) + " -> " +
                      shape_str(new_shape) + " changes element count");
  }
  std::vector<T> out = x.vec();
  auto x_node = x;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!x_node.requires_grad()) return;
    opdetail::accumulate(x_node.node()->ensure_grad(), self.grad);
  };
  return make_op_output<T>(std::move(new_shape), std::move(out), {x},
                           std::move(backward));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.vec().size());
  const T* p = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] * factor;
  auto x_node = x;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!x_node.requires_grad()) return;
    std::vector<T>& dx = x_node.node()->ensure_grad();
    const std::vector<T>& g = self.grad;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * factor;
  };
  return make_op_output<T>(x.shape(), std::move(out), {x}, std::move(backward));
}

// ----------------------------------------------------------------- losses

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  const std::int64_t n = x.size();
  if (n == 0) throw ConfigError("mean_all on empty tensor");
  T acc = T(0);
  for (const T v : x.vec()) acc += v;
  acc /= static_cast<T>(n);
  auto x_node = x;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!x_node.requires_grad()) return;
    std::vector<T>& dx = x_node.node()->ensure_grad();
    const T gv = self.grad[0] / static_cast<T>(n);
    for (auto& v : dx) v += gv;
  };
  return make_op_output<T>({1}, {acc}, {x}, std::move(backward));
}

// Mean squared error against a constant target.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const std::vector<T>& target) {
  if (pred.vec().size() != target.size()) {
    throw ConfigError("mse_loss size mismatch: " +
                      std::to_string(pred.vec().size()) + " vs " +
                      std::to_string(target.size()));
  }
  const std::int64_t n = pred.size();
  double acc = 0.0;
  const T* p = pred.data();
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  const T loss = static_cast<T>(acc / static_cast<double>(n));
  auto p_node = pred;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!p_node.requires_grad()) return;
    std::vector<T>& dx = p_node.node()->ensure_grad();
    const T g = self.grad[0];
    const T* pp = p_node.data();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      dx[i] += g * T(2) * (pp[i] - target[i]) / static_cast<T>(n);
    }
  };
  return make_op_output<T>({1}, {loss}, {pred}, std::move(backward));
}

// softplus(x) = log(1 + e^x), computed without overflow.
template <typename T>
inline T softplus(T x) {
  const T ax = std::abs(x);
  return std::log1p(std::exp(-ax)) + (x > T(0) ? x : T(0));
}

// Binary cross entropy on pre-sigmoid logits, mean-reduced over the batch.
// Labels: 1 = fake (positive), 0 = real. Loss per sample is
// softplus(-z) for fakes and softplus(z) for reals (log-sum-exp form).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits,
                          const std::vector<int>& labels) {
  if (logits.vec().size() != labels.size()) {
    throw ConfigError("bce_with_logits size mismatch: " +
                      std::to_string(logits.vec().size()) + " logits vs " +
                      std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) {
      throw DataError("bce_with_logits: label outside {real=0, fake=1}: " +
                      std::to_string(l));
    }
  }
  const std::int64_t n = logits.size();
  if (n == 0) throw ConfigError("bce_with_logits on empty batch");
  double acc = 0.0;
  const T* z = logits.data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    acc += static_cast<double>(labels[i] == 1 ? softplus(-z[i]) : softplus(z[i]));
  }
  const T loss = static_cast<T>(acc / static_cast<double>(n));
  if (!std::isfinite(static_cast<double>(loss))) {
    throw NumericError("bce_with_logits produced a non-finite loss");
  }
  auto z_node = logits;
  auto backward = [=](detail::TensorNode<T>& self) {
    if (!z_node.requires_grad()) return;
    std::vector<T>& dz = z_node.node()->ensure_grad();
    const T g = self.grad[0];
    const T* zp = z_node.data();
    for (std::size_t i = 0; i < dz.size(); ++i) {
      const T s = stable_sigmoid(zp[i]);
      const T y = labels[i] == 1 ? T(1) : T(0);
      dz[i] += g * (s - y) / static_cast<T>(n);
    }
  };
  return make_op_output<T>({1}, {loss}, {logits}, std::move(backward));
}

}  // namespace patchscope
