#include <cmath>

#include "ad_internal.hpp"

namespace icre::ad {

using namespace detail;

namespace {

// Reduction geometry: rank 4 reduces over (N,H,W) per channel with inner
// stride HW; rank 2 reduces over N per column.
struct BnGeom {
  int64_t channels, reduce;  // reduce = elements per channel
};

BnGeom bn_geom(const Tensor& x) {
  if (x.rank() == 4) return {x.dim(1), x.dim(0) * x.dim(2) * x.dim(3)};
  if (x.rank() == 2) return {x.dim(1), x.dim(0)};
  throw std::invalid_argument("batchnorm: rank must be 2 or 4");
}

template <typename F>
void bn_foreach(const Tensor& x, int64_t c_idx, F&& f) {
  // visit every element of channel c_idx
  if (x.rank() == 4) {
    int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (int64_t in = 0; in < n; ++in) {
      int64_t base = (in * c + c_idx) * hw;
      for (int64_t j = 0; j < hw; ++j) f(base + j);
    }
  } else {
    int64_t n = x.dim(0), c = x.dim(1);
    for (int64_t in = 0; in < n; ++in) f(in * c + c_idx);
  }
}

}  // namespace

Var batchnorm(Var x, Var gamma, Var beta, BnState* state, bool train, bool update_stats,
              double momentum, double eps) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  BnGeom geom = bn_geom(xv);
  const Tensor& gv = gamma.val();
  if (gv.numel() != geom.channels) throw std::invalid_argument("batchnorm: gamma size mismatch");
  if (beta.valid() && beta.val().numel() != geom.channels)
    throw std::invalid_argument("batchnorm: beta size mismatch");
  if (state == nullptr) throw std::invalid_argument("batchnorm: missing state");
  if (train && geom.reduce < 2)
    throw std::runtime_error("batchnorm: batch of size 1 in training mode");

  Tensor mean({geom.channels});
  Tensor sigma({geom.channels});
  if (train) {
    for (int64_t c = 0; c < geom.channels; ++c) {
      double s = 0.0;
      bn_foreach(xv, c, [&](int64_t i) { s += xv[i]; });
      double mu = s / static_cast<double>(geom.reduce);
      double v = 0.0;
      bn_foreach(xv, c, [&](int64_t i) {
        double d = xv[i] - mu;
        v += d * d;
      });
      v /= static_cast<double>(geom.reduce);
      mean[c] = mu;
      sigma[c] = std::sqrt(v + eps);
      if (update_stats) {
        double unbiased = v * static_cast<double>(geom.reduce) /
                          static_cast<double>(geom.reduce - 1);
        state->running_mean[c] = (1.0 - momentum) * state->running_mean[c] + momentum * mu;
        state->running_var[c] = (1.0 - momentum) * state->running_var[c] + momentum * unbiased;
      }
    }
  } else {
    for (int64_t c = 0; c < geom.channels; ++c) {
      mean[c] = state->running_mean[c];
      sigma[c] = std::sqrt(state->running_var[c] + eps);
    }
  }

  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  const Tensor* bvp = beta.valid() ? &beta.val() : nullptr;
  for (int64_t c = 0; c < geom.channels; ++c) {
    double mu = mean[c], inv = 1.0 / sigma[c];
    double ga = gv[c], be = bvp ? (*bvp)[c] : 0.0;
    bn_foreach(xv, c, [&](int64_t i) {
      double h = (xv[i] - mu) * inv;
      xhat[i] = h;
      out[i] = ga * h + be;
    });
  }

  bool ng = result_needs_grad(tp, {x, gamma, beta});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    int32_t bid = beta.valid() ? beta.id : -1;
    tp->set_backward(o.id, [tp, xid = x.id, gid = gamma.id, bid, oid = o.id, geom, train,
                            xhat = std::move(xhat), sigma = std::move(sigma)] {
      const Tensor& g = tp->grad(oid);
      const Tensor& gv2 = tp->value(gid);
      Tensor* gx = tp->grad_if_needed(xid);
      Tensor* gg = tp->grad_if_needed(gid);
      Tensor* gb = bid >= 0 ? tp->grad_if_needed(bid) : nullptr;
      const Tensor& xv2 = tp->value(xid);
      double m = static_cast<double>(geom.reduce);
      for (int64_t c = 0; c < geom.channels; ++c) {
        double sum_g = 0.0, sum_gh = 0.0;
        bn_foreach(xv2, c, [&](int64_t i) {
          sum_g += g[i];
          sum_gh += g[i] * xhat[i];
        });
        if (gg) (*gg)[c] += sum_gh;
        if (gb) (*gb)[c] += sum_g;
        if (gx) {
          double ga = gv2[c], inv = 1.0 / sigma[c];
          if (train) {
            double mg = sum_g / m, mgh = sum_gh / m;
            bn_foreach(xv2, c, [&](int64_t i) {
              (*gx)[i] += ga * inv * (g[i] - mg - xhat[i] * mgh);
            });
          } else {
            bn_foreach(xv2, c, [&](int64_t i) { (*gx)[i] += ga * inv * g[i]; });
          }
        }
      }
    });
  }
  return o;
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  int64_t c = xv.shape().back();
  int64_t rows = leading_rows(xv);
  const Tensor& gv = gamma.val();
  const Tensor& bv = beta.val();
  if (gv.numel() != c || bv.numel() != c)
    throw std::invalid_argument("layernorm: parameter size mismatch");
  Tensor xhat(xv.shape());
  Tensor inv_sigma({rows});
  Tensor out(xv.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xp = xv.data() + r * c;
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += xp[j];
    mu /= static_cast<double>(c);
    double v = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double d = xp[j] - mu;
      v += d * d;
    }
    v /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(v + eps);
    inv_sigma[r] = inv;
    for (int64_t j = 0; j < c; ++j) {
      double h = (xp[j] - mu) * inv;
      xhat[r * c + j] = h;
      out[r * c + j] = gv[j] * h + bv[j];
    }
  }
  bool ng = result_needs_grad(tp, {x, gamma, beta});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, gid = gamma.id, bid = beta.id, oid = o.id, rows, c,
                            xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)] {
      const Tensor& g = tp->grad(oid);
      const Tensor& gv2 = tp->value(gid);
      Tensor* gx = tp->grad_if_needed(xid);
      Tensor* gg = tp->grad_if_needed(gid);
      Tensor* gb = tp->grad_if_needed(bid);
      for (int64_t r = 0; r < rows; ++r) {
        const double* gp = g.data() + r * c;
        const double* hp = xhat.data() + r * c;
        if (gg || gb)
          for (int64_t j = 0; j < c; ++j) {
            if (gg) (*gg)[j] += gp[j] * hp[j];
            if (gb) (*gb)[j] += gp[j];
          }
        if (gx) {
          double mg = 0.0, mgh = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            double dh = gp[j] * gv2[j];
            mg += dh;
            mgh += dh * hp[j];
          }
          mg /= static_cast<double>(c);
          mgh /= static_cast<double>(c);
          double inv = inv_sigma[r];
          for (int64_t j = 0; j < c; ++j) {
            double dh = gp[j] * gv2[j];
            (*gx)[r * c + j] += inv * (dh - mg - hp[j] * mgh);
          }
        }
      }
    });
  }
  return o;
}

Var softmax_lastdim(Var x) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  int64_t c = xv.shape().back();
  int64_t rows = leading_rows(xv);
  Tensor out(xv.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xp = xv.data() + r * c;
    double mx = xp[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xp[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double e = std::exp(xp[j] - mx);
      out[r * c + j] = e;
      z += e;
    }
    double inv = 1.0 / z;
    for (int64_t j = 0; j < c; ++j) out[r * c + j] *= inv;
  }
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, rows, c] {
      const Tensor& g = tp->grad(oid);
      const Tensor& y = tp->value(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (int64_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
          for (int64_t j = 0; j < c; ++j)
            (*gx)[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
    });
  }
  return o;
}

Var softmax_dim1(Var x) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  if (xv.rank() != 4) throw std::invalid_argument("softmax_dim1: rank-4 input required");
  int64_t n = xv.dim(0), s = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  for (int64_t in = 0; in < n; ++in)
    for (int64_t j = 0; j < hw; ++j) {
      double mx = xv[(in * s) * hw + j];
      for (int64_t k = 1; k < s; ++k) mx = std::max(mx, xv[(in * s + k) * hw + j]);
      double z = 0.0;
      for (int64_t k = 0; k < s; ++k) {
        double e = std::exp(xv[(in * s + k) * hw + j] - mx);
        out[(in * s + k) * hw + j] = e;
        z += e;
      }
      double inv = 1.0 / z;
      for (int64_t k = 0; k < s; ++k) out[(in * s + k) * hw + j] *= inv;
    }
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, n, s, hw] {
      const Tensor& g = tp->grad(oid);
      const Tensor& y = tp->value(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t j = 0; j < hw; ++j) {
            double dot = 0.0;
            for (int64_t k = 0; k < s; ++k)
              dot += g[(in * s + k) * hw + j] * y[(in * s + k) * hw + j];
            for (int64_t k = 0; k < s; ++k)
              (*gx)[(in * s + k) * hw + j] +=
                  y[(in * s + k) * hw + j] * (g[(in * s + k) * hw + j] - dot);
          }
    });
  }
  return o;
}

}  // namespace icre::ad
