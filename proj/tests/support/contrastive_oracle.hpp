#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "coberl/numerics/tensor.hpp"

namespace coberl::testing {

// Plain nested-loop evaluation of the auxiliary loss. Rows of x and y are
// unit vectors; mask has one entry per row. Independent of the tape code.
struct OracleLoss {
  double loss = 0.0;
  double penalty = 0.0;  // mean over rows of mask * penalty
  double infonce = 0.0;  // mean over rows of mask * (loss_12 + loss_21)
};

inline double oracle_dot(const numerics::Tensor& a, std::size_t i, const numerics::Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
  return s;
}

inline double oracle_logsumexp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double e : v) s += std::exp(e - m);
  return m + std::log(s);
}

// KL(softmax(p) || softmax(q)) written out term by term.
inline double oracle_kl(const std::vector<double>& p, const std::vector<double>& q) {
  const double lp = oracle_logsumexp(p), lq = oracle_logsumexp(q);
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double pk = std::exp(p[k] - lp);
    kl += pk * ((p[k] - lp) - (q[k] - lq));
  }
  return kl;
}

inline OracleLoss oracle_aux_loss(const numerics::Tensor& x, const numerics::Tensor& y,
                                  const std::vector<double>& mask, double kl_weight = 1.0) {
  const std::size_t n = x.rows();
  OracleLoss out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> l11(n), l22(n), l12(n), l21(n);
    for (std::size_t j = 0; j < n; ++j) {
      l11[j] = oracle_dot(x, i, x, j);
      l22[j] = oracle_dot(y, i, y, j);
      l12[j] = oracle_dot(x, i, y, j);
      l21[j] = oracle_dot(y, i, x, j);
    }
    const double penalty =
        (oracle_kl(l11, l22) + oracle_kl(l12, l22) + oracle_kl(l21, l11) + oracle_kl(l12, l21)) / 4.0;
    l11[i] -= 1e9;
    l22[i] -= 1e9;
    std::vector<double> a(l12), b(l21);
    a.insert(a.end(), l11.begin(), l11.end());
    b.insert(b.end(), l22.begin(), l22.end());
    // the positive sits at index i of the concatenated row
    const double ce = (oracle_logsumexp(a) - a[i]) + (oracle_logsumexp(b) - b[i]);
    out.infonce += mask[i] * ce;
    out.penalty += mask[i] * penalty;
  }
  out.infonce /= static_cast<double>(n);
  out.penalty /= static_cast<double>(n);
  out.loss = out.infonce + kl_weight * out.penalty;
  return out;
}

}  // namespace coberl::testing
