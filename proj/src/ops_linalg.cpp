#include "ad_internal.hpp"

namespace icre::ad {

using namespace detail;

Var matmul(Var a, Var b) {
  Tape* tp = a.tape;
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + av.shape_str() + " x " +
                                bv.shape_str());
  int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  map2(out, m, n).noalias() = map2(av, m, k) * map2(bv, k, n);
  bool ng = result_needs_grad(tp, {a, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, aid = a.id, bid = b.id, oid = o.id, m, k, n] {
      const Tensor& g = tp->grad(oid);
      const Tensor& av2 = tp->value(aid);
      const Tensor& bv2 = tp->value(bid);
      if (Tensor* ga = tp->grad_if_needed(aid))
        map2(*ga, m, k).noalias() += map2(g, m, n) * map2(bv2, k, n).transpose();
      if (Tensor* gb = tp->grad_if_needed(bid))
        map2(*gb, k, n).noalias() += map2(av2, m, k).transpose() * map2(g, m, n);
    });
  }
  return o;
}

Var bmm(Var a, Var b) {
  Tape* tp = a.tape;
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
    throw std::invalid_argument("bmm: incompatible shapes");
  int64_t bsz = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
  Tensor out({bsz, m, n});
  for (int64_t i = 0; i < bsz; ++i)
    MapMat(out.data() + i * m * n, m, n).noalias() =
        CMapMat(av.data() + i * m * k, m, k) * CMapMat(bv.data() + i * k * n, k, n);
  bool ng = result_needs_grad(tp, {a, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, aid = a.id, bid = b.id, oid = o.id, bsz, m, k, n] {
      const Tensor& g = tp->grad(oid);
      const Tensor& av2 = tp->value(aid);
      const Tensor& bv2 = tp->value(bid);
      Tensor* ga = tp->grad_if_needed(aid);
      Tensor* gb = tp->grad_if_needed(bid);
      for (int64_t i = 0; i < bsz; ++i) {
        CMapMat gi(g.data() + i * m * n, m, n);
        if (ga)
          MapMat(ga->data() + i * m * k, m, k).noalias() +=
              gi * CMapMat(bv2.data() + i * k * n, k, n).transpose();
        if (gb)
          MapMat(gb->data() + i * k * n, k, n).noalias() +=
              CMapMat(av2.data() + i * m * k, m, k).transpose() * gi;
      }
    });
  }
  return o;
}

Var bmm_nt(Var a, Var b) {
  Tape* tp = a.tape;
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2))
    throw std::invalid_argument("bmm_nt: incompatible shapes");
  int64_t bsz = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(1);
  Tensor out({bsz, m, n});
  for (int64_t i = 0; i < bsz; ++i)
    MapMat(out.data() + i * m * n, m, n).noalias() =
        CMapMat(av.data() + i * m * k, m, k) * CMapMat(bv.data() + i * n * k, n, k).transpose();
  bool ng = result_needs_grad(tp, {a, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, aid = a.id, bid = b.id, oid = o.id, bsz, m, k, n] {
      const Tensor& g = tp->grad(oid);
      const Tensor& av2 = tp->value(aid);
      const Tensor& bv2 = tp->value(bid);
      Tensor* ga = tp->grad_if_needed(aid);
      Tensor* gb = tp->grad_if_needed(bid);
      for (int64_t i = 0; i < bsz; ++i) {
        CMapMat gi(g.data() + i * m * n, m, n);
        if (ga)
          MapMat(ga->data() + i * m * k, m, k).noalias() +=
              gi * CMapMat(bv2.data() + i * n * k, n, k);
        if (gb)
          MapMat(gb->data() + i * n * k, n, k).noalias() +=
              gi.transpose() * CMapMat(av2.data() + i * m * k, m, k);
      }
    });
  }
  return o;
}

Var linear(Var x, Var w, Var b) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (wv.rank() != 2) throw std::invalid_argument("linear: weight must be rank 2 [Cin,Cout]");
  int64_t cin = wv.dim(0), cout = wv.dim(1);
  if (xv.shape().back() != cin)
    throw std::invalid_argument("linear: input feature dim " +
                                std::to_string(xv.shape().back()) + " != " + std::to_string(cin));
  int64_t rows = leading_rows(xv);
  std::vector<int64_t> oshape = xv.shape();
  oshape.back() = cout;
  Tensor out(oshape);
  map2(out, rows, cout).noalias() = map2(xv, rows, cin) * map2(wv, cin, cout);
  if (b.valid()) {
    const Tensor& bv = b.val();
    if (bv.numel() != cout) throw std::invalid_argument("linear: bias length mismatch");
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < cout; ++j) out[r * cout + j] += bv[j];
  }
  bool ng = result_needs_grad(tp, {x, w, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    int32_t bid = b.valid() ? b.id : -1;
    tp->set_backward(o.id, [tp, xid = x.id, wid = w.id, bid, oid = o.id, rows, cin, cout] {
      const Tensor& g = tp->grad(oid);
      const Tensor& xv2 = tp->value(xid);
      const Tensor& wv2 = tp->value(wid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        map2(*gx, rows, cin).noalias() += map2(g, rows, cout) * map2(wv2, cin, cout).transpose();
      if (Tensor* gw = tp->grad_if_needed(wid))
        map2(*gw, cin, cout).noalias() += map2(xv2, rows, cin).transpose() * map2(g, rows, cout);
      if (bid >= 0)
        if (Tensor* gb = tp->grad_if_needed(bid))
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < cout; ++j) (*gb)[j] += g[r * cout + j];
    });
  }
  return o;
}

}  // namespace icre::ad
