#include "ad_internal.hpp"

namespace icre::ad {

using namespace detail;

namespace {

struct ConvDims {
  int64_t n, cin, h, w, o, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wt, const Conv2dSpec& s) {
  if (x.rank() != 4 || wt.rank() != 4) throw std::invalid_argument("conv2d: rank-4 tensors required");
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.o = wt.dim(0);
  d.kh = wt.dim(2);
  d.kw = wt.dim(3);
  int64_t eff_kh = s.dil_h * (d.kh - 1) + 1;
  int64_t eff_kw = s.dil_w * (d.kw - 1) + 1;
  d.oh = (d.h + 2 * s.pad_h - eff_kh) / s.stride_h + 1;
  d.ow = (d.w + 2 * s.pad_w - eff_kw) / s.stride_w + 1;
  if (d.oh <= 0 || d.ow <= 0) throw std::invalid_argument("conv2d: empty output");
  if (s.groups == 1) {
    if (wt.dim(1) != d.cin) throw std::invalid_argument("conv2d: weight channel mismatch");
  } else {
    if (s.groups != d.cin || d.o != d.cin || wt.dim(1) != 1)
      throw std::invalid_argument("conv2d: only depthwise grouping supported");
  }
  return d;
}

// col layout: [cin*kh*kw, n*oh*ow]
Tensor im2col(const Tensor& x, const ConvDims& d, const Conv2dSpec& s) {
  int64_t krows = d.cin * d.kh * d.kw;
  int64_t cols = d.n * d.oh * d.ow;
  Tensor col({krows, cols});
  double* cd = col.data();
  const double* xd = x.data();
#pragma omp parallel for schedule(static)
  for (int64_t in = 0; in < d.n; ++in) {
    for (int64_t c = 0; c < d.cin; ++c)
      for (int64_t ki = 0; ki < d.kh; ++ki)
        for (int64_t kj = 0; kj < d.kw; ++kj) {
          int64_t row = (c * d.kh + ki) * d.kw + kj;
          for (int64_t ohh = 0; ohh < d.oh; ++ohh) {
            int64_t ih = ohh * s.stride_h - s.pad_h + ki * s.dil_h;
            int64_t base = row * cols + (in * d.oh + ohh) * d.ow;
            if (ih < 0 || ih >= d.h) {
              std::fill_n(cd + base, d.ow, 0.0);
              continue;
            }
            const double* xrow = xd + ((in * d.cin + c) * d.h + ih) * d.w;
            for (int64_t oww = 0; oww < d.ow; ++oww) {
              int64_t iw = oww * s.stride_w - s.pad_w + kj * s.dil_w;
              cd[base + oww] = (iw >= 0 && iw < d.w) ? xrow[iw] : 0.0;
            }
          }
        }
  }
  return col;
}

void col2im_accum(const Tensor& dcol, const ConvDims& d, const Conv2dSpec& s, Tensor& dx) {
  int64_t cols = d.n * d.oh * d.ow;
  const double* cd = dcol.data();
  double* xd = dx.data();
#pragma omp parallel for schedule(static)
  for (int64_t in = 0; in < d.n; ++in) {
    for (int64_t c = 0; c < d.cin; ++c)
      for (int64_t ki = 0; ki < d.kh; ++ki)
        for (int64_t kj = 0; kj < d.kw; ++kj) {
          int64_t row = (c * d.kh + ki) * d.kw + kj;
          for (int64_t ohh = 0; ohh < d.oh; ++ohh) {
            int64_t ih = ohh * s.stride_h - s.pad_h + ki * s.dil_h;
            if (ih < 0 || ih >= d.h) continue;
            int64_t base = row * cols + (in * d.oh + ohh) * d.ow;
            double* xrow = xd + ((in * d.cin + c) * d.h + ih) * d.w;
            for (int64_t oww = 0; oww < d.ow; ++oww) {
              int64_t iw = oww * s.stride_w - s.pad_w + kj * s.dil_w;
              if (iw >= 0 && iw < d.w) xrow[iw] += cd[base + oww];
            }
          }
        }
  }
}

// out [n,o,oh,ow] <- mat [o, n*oh*ow]
void scatter_out(const Tensor& mat, const ConvDims& d, Tensor& out) {
  int64_t cols = d.n * d.oh * d.ow;
  int64_t ohw = d.oh * d.ow;
  for (int64_t in = 0; in < d.n; ++in)
    for (int64_t io = 0; io < d.o; ++io)
      std::copy_n(mat.data() + io * cols + in * ohw, ohw,
                  out.data() + (in * d.o + io) * ohw);
}

Tensor gather_gmat(const Tensor& g, const ConvDims& d) {
  int64_t cols = d.n * d.oh * d.ow;
  int64_t ohw = d.oh * d.ow;
  Tensor mat({d.o, cols});
  for (int64_t in = 0; in < d.n; ++in)
    for (int64_t io = 0; io < d.o; ++io)
      std::copy_n(g.data() + (in * d.o + io) * ohw, ohw, mat.data() + io * cols + in * ohw);
  return mat;
}

}  // namespace

Var conv2d(Var x, Var w, Var b, const Conv2dSpec& spec) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  ConvDims d = conv_dims(xv, wv, spec);
  Tensor out({d.n, d.o, d.oh, d.ow});
  bool ng = result_needs_grad(tp, {x, w, b});

  if (spec.groups == 1) {
    Tensor col = im2col(xv, d, spec);
    int64_t krows = d.cin * d.kh * d.kw;
    int64_t cols = d.n * d.oh * d.ow;
    Tensor mat({d.o, cols});
    map2(mat, d.o, cols).noalias() = map2(wv, d.o, krows) * map2(col, krows, cols);
    if (b.valid()) {
      const Tensor& bv = b.val();
      for (int64_t io = 0; io < d.o; ++io) {
        double bo = bv[io];
        for (int64_t j = 0; j < cols; ++j) mat[io * cols + j] += bo;
      }
    }
    scatter_out(mat, d, out);
    Var o = tp->make(std::move(out), ng, {});
    if (ng) {
      int32_t bid = b.valid() ? b.id : -1;
      tp->set_backward(o.id, [tp, xid = x.id, wid = w.id, bid, oid = o.id, d, spec,
                              col = std::move(col), krows, cols] {
        const Tensor& g = tp->grad(oid);
        Tensor gmat = gather_gmat(g, d);
        if (Tensor* gw = tp->grad_if_needed(wid))
          map2(*gw, d.o, krows).noalias() += map2(gmat, d.o, cols) * map2(col, krows, cols).transpose();
        if (bid >= 0)
          if (Tensor* gb = tp->grad_if_needed(bid))
            for (int64_t io = 0; io < d.o; ++io) {
              double s = 0.0;
              for (int64_t j = 0; j < cols; ++j) s += gmat[io * cols + j];
              (*gb)[io] += s;
            }
        if (Tensor* gx = tp->grad_if_needed(xid)) {
          const Tensor& wv2 = tp->value(wid);
          Tensor dcol({krows, cols});
          map2(dcol, krows, cols).noalias() =
              map2(wv2, d.o, krows).transpose() * map2(gmat, d.o, cols);
          col2im_accum(dcol, d, spec, *gx);
        }
      });
    }
    return o;
  }

  // depthwise: direct taps
  const Tensor* bvp = b.valid() ? &b.val() : nullptr;
#pragma omp parallel for schedule(static)
  for (int64_t in = 0; in < d.n; ++in)
    for (int64_t c = 0; c < d.cin; ++c) {
      const double* xp = xv.data() + (in * d.cin + c) * d.h * d.w;
      const double* wp = wv.data() + c * d.kh * d.kw;
      double* op = out.data() + (in * d.o + c) * d.oh * d.ow;
      double bias = bvp ? (*bvp)[c] : 0.0;
      for (int64_t ohh = 0; ohh < d.oh; ++ohh)
        for (int64_t oww = 0; oww < d.ow; ++oww) {
          double s = bias;
          for (int64_t ki = 0; ki < d.kh; ++ki) {
            int64_t ih = ohh * spec.stride_h - spec.pad_h + ki * spec.dil_h;
            if (ih < 0 || ih >= d.h) continue;
            for (int64_t kj = 0; kj < d.kw; ++kj) {
              int64_t iw = oww * spec.stride_w - spec.pad_w + kj * spec.dil_w;
              if (iw < 0 || iw >= d.w) continue;
              s += wp[ki * d.kw + kj] * xp[ih * d.w + iw];
            }
          }
          op[ohh * d.ow + oww] = s;
        }
    }
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    int32_t bid = b.valid() ? b.id : -1;
    tp->set_backward(o.id, [tp, xid = x.id, wid = w.id, bid, oid = o.id, d, spec] {
      const Tensor& g = tp->grad(oid);
      const Tensor& xv2 = tp->value(xid);
      const Tensor& wv2 = tp->value(wid);
      Tensor* gx = tp->grad_if_needed(xid);
      Tensor* gw = tp->grad_if_needed(wid);
      Tensor* gb = bid >= 0 ? tp->grad_if_needed(bid) : nullptr;
      // weight/bias grads accumulate serially per channel to stay deterministic
      for (int64_t c = 0; c < d.cin; ++c) {
        double* gwp = gw ? gw->data() + c * d.kh * d.kw : nullptr;
        double gbs = 0.0;
        for (int64_t in = 0; in < d.n; ++in) {
          const double* gp = g.data() + (in * d.o + c) * d.oh * d.ow;
          const double* xp = xv2.data() + (in * d.cin + c) * d.h * d.w;
          const double* wp = wv2.data() + c * d.kh * d.kw;
          double* gxp = gx ? gx->data() + (in * d.cin + c) * d.h * d.w : nullptr;
          for (int64_t ohh = 0; ohh < d.oh; ++ohh)
            for (int64_t oww = 0; oww < d.ow; ++oww) {
              double gv = gp[ohh * d.ow + oww];
              if (gv == 0.0) continue;
              gbs += gv;
              for (int64_t ki = 0; ki < d.kh; ++ki) {
                int64_t ih = ohh * spec.stride_h - spec.pad_h + ki * spec.dil_h;
                if (ih < 0 || ih >= d.h) continue;
                for (int64_t kj = 0; kj < d.kw; ++kj) {
                  int64_t iw = oww * spec.stride_w - spec.pad_w + kj * spec.dil_w;
                  if (iw < 0 || iw >= d.w) continue;
                  if (gwp) gwp[ki * d.kw + kj] += gv * xp[ih * d.w + iw];
                  if (gxp) gxp[ih * d.w + iw] += gv * wp[ki * d.kw + kj];
                }
              }
            }
        }
        if (gb) (*gb)[c] += gbs;
      }
    });
  }
  return o;
}

Var maxpool2d(Var x, int64_t k, int64_t stride, int64_t pad) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  if (xv.rank() != 4) throw std::invalid_argument("maxpool2d: rank-4 input required");
  int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  int64_t oh = (h + 2 * pad - k) / stride + 1;
  int64_t ow = (w + 2 * pad - k) / stride + 1;
  Tensor out({n, c, oh, ow});
  std::vector<int64_t> amax(static_cast<size_t>(n * c * oh * ow));
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const double* xp = xv.data() + nc * h * w;
    double* op = out.data() + nc * oh * ow;
    for (int64_t ohh = 0; ohh < oh; ++ohh)
      for (int64_t oww = 0; oww < ow; ++oww) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t bi = -1;
        for (int64_t ki = 0; ki < k; ++ki) {
          int64_t ih = ohh * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          for (int64_t kj = 0; kj < k; ++kj) {
            int64_t iw = oww * stride - pad + kj;
            if (iw < 0 || iw >= w) continue;
            double v = xp[ih * w + iw];
            if (v > best) {
              best = v;
              bi = ih * w + iw;
            }
          }
        }
        op[ohh * ow + oww] = best;
        amax[static_cast<size_t>(nc * oh * ow + ohh * ow + oww)] = bi;
      }
  }
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, amax = std::move(amax), n, c, oh, ow, h,
                            w] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t nc = 0; nc < n * c; ++nc)
          for (int64_t j = 0; j < oh * ow; ++j) {
            int64_t src = amax[static_cast<size_t>(nc * oh * ow + j)];
            if (src >= 0) (*gx)[nc * h * w + src] += g[nc * oh * ow + j];
          }
    });
  }
  return o;
}

}  // namespace icre::ad
