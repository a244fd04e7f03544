#pragma once

// Brute-force reference implementations, written independently of the main
// library code paths and kept deliberately naive. Every equation-level test
// checks the real implementation against one of these.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <vector>

#include "icre/autodiff.hpp"
#include "icre/tensor.hpp"

namespace icre::oracle {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t l = 0; l < k; ++l) s += a.at2(i, l) * b.at2(l, j);
      out.at2(i, j) = s;
    }
  return out;
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     const ad::Conv2dSpec& s) {
  int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t oh = (h + 2 * s.pad_h - (s.dil_h * (kh - 1) + 1)) / s.stride_h + 1;
  int64_t ow = (wd + 2 * s.pad_w - (s.dil_w * (kw - 1) + 1)) / s.stride_w + 1;
  Tensor out({n, o, oh, ow});
  for (int64_t in = 0; in < n; ++in)
    for (int64_t io = 0; io < o; ++io)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t z = 0; z < ow; ++z) {
          double acc = b.empty() ? 0.0 : b[io];
          for (int64_t ic = 0; ic < w.dim(1); ++ic)
            for (int64_t ki = 0; ki < kh; ++ki)
              for (int64_t kj = 0; kj < kw; ++kj) {
                int64_t ih = y * s.stride_h - s.pad_h + ki * s.dil_h;
                int64_t iw = z * s.stride_w - s.pad_w + kj * s.dil_w;
                if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
                int64_t src_c = (s.groups == 1) ? ic : io;
                acc += w.at4(io, ic, ki, kj) * x.at4(in, src_c, ih, iw);
              }
          out.at4(in, io, y, z) = acc;
        }
  return out;
}

/// GeM over one channel map given as a flat list of spatial values.
inline double gem_scalar(const std::vector<double>& values, double p, double eps) {
  double s = 0.0;
  for (double v : values) s += std::pow(std::max(v, eps), p);
  return std::pow(s / static_cast<double>(values.size()), 1.0 / p);
}

/// Per-pixel softmax over three mask values.
inline std::array<double, 3> softmax3(double a, double b, double c) {
  double m = std::max({a, b, c});
  double ea = std::exp(a - m), eb = std::exp(b - m), ec = std::exp(c - m);
  double z = ea + eb + ec;
  return {ea / z, eb / z, ec / z};
}

/// Single-head scaled dot-product attention on raw matrices [T,C], written
/// as plain loops. Returns softmax(Q K^T / sqrt(C)) V.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  int64_t t = q.dim(0), c = q.dim(1), tk = k.dim(0);
  double scale = 1.0 / std::sqrt(static_cast<double>(c));
  Tensor out({t, c});
  for (int64_t i = 0; i < t; ++i) {
    std::vector<double> row(static_cast<size_t>(tk));
    double mx = -1e300;
    for (int64_t j = 0; j < tk; ++j) {
      double s = 0.0;
      for (int64_t l = 0; l < c; ++l) s += q.at2(i, l) * k.at2(j, l);
      row[static_cast<size_t>(j)] = s * scale;
      mx = std::max(mx, row[static_cast<size_t>(j)]);
    }
    double z = 0.0;
    for (double& r : row) {
      r = std::exp(r - mx);
      z += r;
    }
    for (double& r : row) r /= z;
    for (int64_t l = 0; l < c; ++l) {
      double s = 0.0;
      for (int64_t j = 0; j < tk; ++j) s += row[static_cast<size_t>(j)] * v.at2(j, l);
      out.at2(i, l) = s;
    }
  }
  return out;
}

/// Row-wise layer norm with affine params, plain loops.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  int64_t rows = x.numel() / x.shape().back();
  int64_t c = x.shape().back();
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += x[r * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (x[r * c + j] - mu) * (x[r * c + j] - mu);
    var /= static_cast<double>(c);
    for (int64_t j = 0; j < c; ++j)
      out[r * c + j] = gamma[j] * (x[r * c + j] - mu) / std::sqrt(var + eps) + beta[j];
  }
  return out;
}

inline double l2(const double* a, const double* b, int64_t d) {
  double s = 0.0;
  for (int64_t k = 0; k < d; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

/// Literal double-loop implementation of the ICG objective. mods: 0=VIS,1=IR.
inline double icg(const Tensor& f, const std::vector<int>& ids, const std::vector<int>& mods,
                  double rho1, double rho2, bool literal_pairs) {
  int64_t n = f.dim(0), d = f.dim(1);
  // centers by brute force
  std::map<int, std::vector<double>> c_all;
  std::map<int, std::array<std::vector<double>, 2>> c_mod;
  std::map<int, int> cnt_all;
  std::map<int, std::array<int, 2>> cnt_mod;
  for (int64_t i = 0; i < n; ++i) {
    int y = ids[static_cast<size_t>(i)], m = mods[static_cast<size_t>(i)];
    auto& ca = c_all[y];
    ca.resize(static_cast<size_t>(d), 0.0);
    auto& cm = c_mod[y][static_cast<size_t>(m)];
    cm.resize(static_cast<size_t>(d), 0.0);
    for (int64_t k = 0; k < d; ++k) {
      ca[static_cast<size_t>(k)] += f[i * d + k];
      cm[static_cast<size_t>(k)] += f[i * d + k];
    }
    cnt_all[y]++;
    cnt_mod[y][static_cast<size_t>(m)]++;
  }
  for (auto& [y, v] : c_all)
    for (double& x : v) x /= cnt_all[y];
  for (auto& [y, arr] : c_mod)
    for (int m = 0; m < 2; ++m)
      for (double& x : arr[static_cast<size_t>(m)])
        if (cnt_mod[y][static_cast<size_t>(m)] > 0) x /= cnt_mod[y][static_cast<size_t>(m)];

  double term1 = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    int y = ids[static_cast<size_t>(i)];
    int zbar = 1 - mods[static_cast<size_t>(i)];
    double dist = l2(f.data() + i * d, c_mod[y][static_cast<size_t>(zbar)].data(), d);
    term1 += std::max(0.0, -rho1 + dist);
  }
  term1 /= static_cast<double>(n);

  double term2 = 0.0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (!literal_pairs && ids[static_cast<size_t>(i)] == ids[static_cast<size_t>(j)]) continue;
      double dist = l2(f.data() + i * d, c_all[ids[static_cast<size_t>(j)]].data(), d);
      term2 += std::max(0.0, rho2 - dist);
    }
  term2 *= 2.0 / (static_cast<double>(n) * static_cast<double>(n + 1));
  return term1 + term2;
}

/// Exhaustive CMC/AP for one query against a gallery: returns (first correct
/// rank 1-based or 0 if none, AP). Ascending distance, stable by index.
inline std::pair<int, double> rank_and_ap(const std::vector<double>& dist,
                                          const std::vector<bool>& correct) {
  size_t g = dist.size();
  std::vector<size_t> order(g);
  for (size_t i = 0; i < g; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return dist[a] < dist[b]; });
  int first = 0;
  int hits = 0;
  double ap = 0.0;
  int total_correct = 0;
  for (size_t r = 0; r < g; ++r) {
    if (correct[order[r]]) {
      ++hits;
      if (first == 0) first = static_cast<int>(r + 1);
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
      ++total_correct;
    }
  }
  if (total_correct > 0) ap /= total_correct;
  return {first, ap};
}

}  // namespace icre::oracle
