#pragma once

// Closed-form sub-layer output variances at initialization, plus the Monte
// Carlo estimators that keep them honest. Everything here works on raw
// double buffers (no autodiff): these are sampling experiments, not model
// code, and they run millions of elements.
//
// Conventions, used consistently across the lab:
//  * inputs x have unit element variance,
//  * P_h is the MEAN SQUARED softmax weight (a uniform row of length L has
//    P_h = 1/L^2); the expected squared-weight ROW SUM is then L * P_h,
//  * ffn_sigma2 / attention_sigma2 return Var[x + f(x)] for one Post-LN
//    residual branch, i.e. 1 + Var[f(x)].
//
// attention_sigma2 composes the branch variance as D^2 * P_h * v1 * v2.
// The exact independence algebra gives D^2 * (L * P_h) * v1 * v2 (the
// squared weights of a whole row contribute); the tests exercise both and
// the row-sum flavour is available as attention_sigma2_rowsum.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "tlab/rng.hpp"

namespace tlab {

inline double ffn_sigma2(int d, int d_ff, double var_w1, double var_w2) {
  return 1.0 + 0.5 * d * d_ff * var_w1 * var_w2;
}

inline double attention_sigma2(int d, double ph, double var_v1, double var_v2) {
  return 1.0 + static_cast<double>(d) * d * ph * var_v1 * var_v2;
}

inline double attention_sigma2_rowsum(int d, double row_sum_sq, double var_v1, double var_v2) {
  return 1.0 + static_cast<double>(d) * d * row_sum_sq * var_v1 * var_v2;
}

// Predicted Var[grad in]/Var[grad out] across one Post-LN sub-layer. For
// feed-forward and self-attention the branch passes gradient with the same
// variance gain that sets sigma^2_b, so the ratio is 1 (gradients hold
// steady). Encoder-attention on the decoder side is different: the decoder
// stream only reaches the branch through the softmax query path (strength
// query_path_var, ~0 at init), while sigma^2_b is inflated by the value
// path reading the encoder output, so the ratio drops below 1.
inline double backprop_ratio_check(int d, int d_ff, double var_w1, double var_w2, double ph,
                                   bool encoder_attention, double query_path_var = 0.0) {
  if (encoder_attention) {
    double sigma2_b = attention_sigma2(d, ph, var_w1, var_w2);
    return (1.0 + query_path_var) / sigma2_b;
  }
  (void)d_ff;
  return 1.0;  // branch gain cancels sigma^2_b exactly for FFN / self-attention
}

// Residual-dependency error recursion: starting from zero, each sub-layer
// adds beta^2_{i,i} * C of output variance between a model and its
// perturbed copy. Returns the cumulative prediction after each sub-layer.
inline std::vector<double> theorem2_recursion(const std::vector<double>& beta_sq_diag, double c) {
  std::vector<double> cum(beta_sq_diag.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < beta_sq_diag.size(); ++i) {
    acc += beta_sq_diag[i] * c;
    cum[i] = acc;
  }
  return cum;
}

// ---------------------------------------------------------------------------
// Monte Carlo estimators

struct McEstimate {
  double value = 0.0;      // pooled estimate
  std::size_t samples = 0; // elements pooled
};

namespace detail_mc {

// variance accumulated over a stream of elements (Welford)
struct VarAcc {
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  void add(double x) {
    ++n;
    double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double var() const { return n ? m2 / static_cast<double>(n) : 0.0; }
};

inline std::vector<double> randn(std::size_t n, double stddev, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return v;
}

// c[m x n] = a[m x k] . b[k x n]
inline void mm(const std::vector<double>& a, const std::vector<double>& b, std::vector<double>& c,
               std::size_t m, std::size_t k, std::size_t n) {
  c.assign(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double aik = a[i * k + p];
      const double* brow = &b[p * n];
      double* crow = &c[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
}

}  // namespace detail_mc

// Var[x + relu(x W1) W2] with unit-variance normal x, freshly drawn W1, W2
// per trial. Pooled over all elements of all trials.
inline McEstimate mc_ffn_sigma2(int d, int d_ff, double var_w1, double var_w2, int rows_per_trial,
                                int trials, Rng& rng) {
  std::size_t D = d, F = d_ff, L = rows_per_trial;
  detail_mc::VarAcc acc;
  std::vector<double> h, b;
  for (int t = 0; t < trials; ++t) {
    auto x = detail_mc::randn(L * D, 1.0, rng);
    auto w1 = detail_mc::randn(D * F, std::sqrt(var_w1), rng);
    auto w2 = detail_mc::randn(F * D, std::sqrt(var_w2), rng);
    detail_mc::mm(x, w1, h, L, D, F);
    for (auto& v : h) v = v > 0.0 ? v : 0.0;
    detail_mc::mm(h, w2, b, L, F, D);
    for (std::size_t i = 0; i < b.size(); ++i) acc.add(x[i] + b[i]);
  }
  return {acc.var(), acc.n};
}

struct PhEstimate {
  double mean_sq_entry = 0.0;  // P_h
  double row_sum_sq = 0.0;     // E[sum over a row of A^2] = L * P_h in expectation
  std::size_t entries = 0;
};

namespace detail_mc {

// one trial's softmax attention weights for all heads; x is L x D
inline void attention_probs(const std::vector<double>& x, std::size_t L, std::size_t D,
                            std::size_t H, double var_q, double var_k, bool scaled, Rng& rng,
                            std::vector<double>& probs_out /* H * L * L */) {
  std::size_t dh = D / H;
  probs_out.assign(H * L * L, 0.0);
  std::vector<double> wq, wk, q, k;
  for (std::size_t h = 0; h < H; ++h) {
    wq = randn(D * dh, std::sqrt(var_q), rng);
    wk = randn(D * dh, std::sqrt(var_k), rng);
    mm(x, wq, q, L, D, dh);
    mm(x, wk, k, L, D, dh);
    double temp = scaled ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;
    for (std::size_t i = 0; i < L; ++i) {
      double* row = &probs_out[(h * L + i) * L];
      double mx = -1e308;
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * dh + c] * k[j * dh + c];
        row[j] = s * temp;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < L; ++j) row[j] /= z;
    }
  }
}

}  // namespace detail_mc

// Sampled softmax weight statistics at initialization: fresh x, W^Q, W^K
// per trial; pools squared entries over heads, rows and trials until at
// least min_entries squared weights have been seen.
inline PhEstimate estimate_Ph(int d, int heads, int L, double var_q, double var_k, bool scaled,
                              std::size_t min_entries, Rng& rng) {
  if (d % heads != 0) throw std::invalid_argument("estimate_Ph: d must be divisible by heads");
  std::size_t Ls = L, D = d, H = heads;
  PhEstimate est;
  double sq_sum = 0.0, row_sum_acc = 0.0;
  std::size_t rows = 0;
  std::vector<double> probs;
  while (est.entries < min_entries) {
    auto x = detail_mc::randn(Ls * D, 1.0, rng);
    detail_mc::attention_probs(x, Ls, D, H, var_q, var_k, scaled, rng, probs);
    for (std::size_t r = 0; r < H * Ls; ++r) {
      double rs = 0.0;
      for (std::size_t j = 0; j < Ls; ++j) {
        double p = probs[r * Ls + j];
        rs += p * p;
      }
      row_sum_acc += rs;
      sq_sum += rs;  // row sum of squares == sum of squared entries
      ++rows;
      est.entries += Ls;
    }
  }
  est.mean_sq_entry = sq_sum / static_cast<double>(est.entries);
  est.row_sum_sq = row_sum_acc / static_cast<double>(rows);
  return est;
}

// Var[x + sum_h A_h x V1_h V2_h] with unit-variance x; A from softmaxed
// q k^T scores (uniform attention falls out of var_q = var_k = 0).
inline McEstimate mc_attention_sigma2(int d, int heads, int L, double var_q, double var_k,
                                      double var_v1, double var_v2, bool scaled, int trials,
                                      Rng& rng) {
  if (d % heads != 0) throw std::invalid_argument("mc_attention_sigma2: d % heads != 0");
  std::size_t D = d, H = heads, Ls = L, dh = D / H;
  detail_mc::VarAcc acc;
  std::vector<double> probs, v1, v2, xv, ctx, out, branch;
  for (int t = 0; t < trials; ++t) {
    auto x = detail_mc::randn(Ls * D, 1.0, rng);
    detail_mc::attention_probs(x, Ls, D, H, var_q, var_k, scaled, rng, probs);
    branch.assign(Ls * D, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      v1 = detail_mc::randn(D * dh, std::sqrt(var_v1), rng);
      v2 = detail_mc::randn(dh * D, std::sqrt(var_v2), rng);
      detail_mc::mm(x, v1, xv, Ls, D, dh);
      // ctx = A_h . xv
      ctx.assign(Ls * dh, 0.0);
      const double* A = &probs[h * Ls * Ls];
      for (std::size_t i = 0; i < Ls; ++i)
        for (std::size_t s = 0; s < Ls; ++s) {
          double a = A[i * Ls + s];
          for (std::size_t c = 0; c < dh; ++c) ctx[i * dh + c] += a * xv[s * dh + c];
        }
      detail_mc::mm(ctx, v2, out, Ls, dh, D);
      for (std::size_t i = 0; i < branch.size(); ++i) branch[i] += out[i];
    }
    for (std::size_t i = 0; i < branch.size(); ++i) acc.add(x[i] + branch[i]);
  }
  return {acc.var(), acc.n};
}

}  // namespace tlab
