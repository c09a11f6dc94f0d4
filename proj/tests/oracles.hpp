#pragma once

// Test-only oracles, independent of the library's implementation paths:
// a naive reference convolution, central finite differences, and an O(n^2)
// PR-curve AP computed without sorting.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "patchscope/ops.hpp"

namespace oracles {

// Naive cross-correlation with explicit zero padding; no shared code with
// patchscope::conv2d.
inline std::vector<double> reference_conv2d(
    const std::vector<double>& in, std::int64_t N, std::int64_t Ci,
    std::int64_t H, std::int64_t W, const std::vector<double>& w,
    std::int64_t Co, std::int64_t k, std::int64_t stride, std::int64_t pad,
    const std::vector<double>* bias) {
  const std::int64_t OH = (H + 2 * pad - k) / stride + 1;
  const std::int64_t OW = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(N * Co * OH * OW), 0.0);
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t co = 0; co < Co; ++co) {
      for (std::int64_t oy = 0; oy < OH; ++oy) {
        for (std::int64_t ox = 0; ox < OW; ++ox) {
          double acc = bias ? (*bias)[static_cast<std::size_t>(co)] : 0.0;
          for (std::int64_t ci = 0; ci < Ci; ++ci) {
            for (std::int64_t ky = 0; ky < k; ++ky) {
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::int64_t iy = oy * stride + ky - pad;
                const std::int64_t ix = ox * stride + kx - pad;
                double v = 0.0;
                if (iy >= 0 && iy < H && ix >= 0 && ix < W) {
                  v = in[static_cast<std::size_t>(((n * Ci + ci) * H + iy) * W +
                                                  ix)];
                }
                acc += w[static_cast<std::size_t>(((co * Ci + ci) * k + ky) * k +
                                                  kx)] *
                       v;
              }
            }
          }
          out[static_cast<std::size_t>(((n * Co + co) * OH + oy) * OW + ox)] =
              acc;
        }
      }
    }
  }
  return out;
}

// Central finite difference of a scalar function at each coordinate of one
// parameter tensor.
struct FdCheck {
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
};

// Central differences carry roundoff noise of about eps*|loss|/h ~ 1e-11,
// so exactly-zero gradients (e.g. conv bias under train-mode batch norm)
// need an absolute floor below which differences do not count.
inline double rel_err(double a, double b) {
  const double denom = std::max(std::abs(a) + std::abs(b), 1e-6);
  return std::abs(a - b) / denom;
}

// loss_fn() must re-run the full forward pass using the current contents of
// the parameter buffer.
inline FdCheck finite_diff_check(patchscope::Tensor<double>& param,
                                 const std::vector<double>& analytic_grad,
                                 const std::function<double()>& loss_fn,
                                 double h = 1e-5) {
  FdCheck result;
  double* p = param.data();
  for (std::int64_t i = 0; i < param.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = loss_fn();
    p[i] = keep - h;
    const double down = loss_fn();
    p[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    result.max_rel_err = std::max(
        result.max_rel_err, rel_err(analytic_grad[static_cast<std::size_t>(i)], fd));
    ++result.checked;
  }
  return result;
}

// O(n^2) PR-curve AP: the at-or-above set of every item is counted from
// scratch (score strictly greater, or equal with smaller-or-equal input
// index, matching the stable descending ranking). Positives are then summed
// in rank order with the same step formula the implementation uses.
inline double brute_force_ap(const std::vector<double>& scores,
                             const std::vector<int>& labels) {
  const std::size_t n = scores.size();
  std::int64_t n_pos = 0;
  for (const int l : labels) n_pos += l == 1;
  std::vector<std::pair<std::int64_t, double>> positives;  // (rank, precision)
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 1) continue;
    std::int64_t rank = 0, tp = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const bool above = scores[j] > scores[i] ||
                         (scores[j] == scores[i] && j <= i);
      if (above) {
        ++rank;
        tp += labels[j] == 1;
      }
    }
    positives.emplace_back(rank,
                           static_cast<double>(tp) / static_cast<double>(rank));
  }
  std::sort(positives.begin(), positives.end());
  double ap = 0.0, prev_recall = 0.0;
  std::int64_t tp = 0;
  for (const auto& [rank, precision] : positives) {
    ++tp;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

}  // namespace oracles
