#include "icre/autodiff.hpp"

#include <cmath>

#include "ad_internal.hpp"

namespace icre {

const Tensor& Var::val() const { return tape->value(id); }

Var Tape::leaf(const Tensor* t, bool needs_grad) {
  auto it = leaf_cache_.find(t);
  if (it != leaf_cache_.end()) return Var{this, it->second};
  auto node = std::make_unique<Node>();
  node->ext = t;
  node->needs_grad = grad_enabled_ && needs_grad;
  nodes_.push_back(std::move(node));
  int32_t id = static_cast<int32_t>(nodes_.size() - 1);
  leaf_cache_.emplace(t, id);
  return Var{this, id};
}

Var Tape::constant(Tensor t) {
  auto node = std::make_unique<Node>();
  node->owned = std::move(t);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::make(Tensor value, bool needs_grad, std::function<void()> bw) {
  auto node = std::make_unique<Node>();
  node->owned = std::move(value);
  node->needs_grad = needs_grad;
  node->backward = std::move(bw);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad(int32_t id) {
  Node& n = *nodes_[static_cast<size_t>(id)];
  if (n.grad.empty() && n.value().numel() > 0) n.grad = Tensor::zeros(n.value().shape());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("backward: var from another tape");
  if (root.val().numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  grad(root.id).fill(1.0);
  for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = *nodes_[static_cast<size_t>(i)];
    if (!n.backward || n.grad.empty()) continue;
    n.backward();
  }
}

Tensor Tape::grad_of(const Tensor* param) const {
  auto it = leaf_cache_.find(param);
  if (it == leaf_cache_.end()) return Tensor::zeros(param->shape());
  const Node& n = *nodes_[static_cast<size_t>(it->second)];
  if (n.grad.empty()) return Tensor::zeros(param->shape());
  return n.grad;
}

namespace ad {

using namespace detail;

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "add");
  Tape* tp = a.tape;
  Tensor out = a.val();
  const Tensor& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  bool ng = result_needs_grad(tp, {a, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, aid = a.id, bid = b.id, oid = o.id] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* ga = tp->grad_if_needed(aid))
        for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
      if (Tensor* gb = tp->grad_if_needed(bid))
        for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i];
    });
  }
  return o;
}

Var sub(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tape* tp = a.tape;
  Tensor out = a.val();
  const Tensor& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  bool ng = result_needs_grad(tp, {a, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, aid = a.id, bid = b.id, oid = o.id] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* ga = tp->grad_if_needed(aid))
        for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
      if (Tensor* gb = tp->grad_if_needed(bid))
        for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
    });
  }
  return o;
}

Var mul(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tape* tp = a.tape;
  Tensor out = a.val();
  const Tensor& bv = b.val();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  bool ng = result_needs_grad(tp, {a, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, aid = a.id, bid = b.id, oid = o.id] {
      const Tensor& g = tp->grad(oid);
      const Tensor& av = tp->value(aid);
      const Tensor& bv2 = tp->value(bid);
      if (Tensor* ga = tp->grad_if_needed(aid))
        for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv2[i];
      if (Tensor* gb = tp->grad_if_needed(bid))
        for (int64_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
    });
  }
  return o;
}

Var scale(Var a, double s) {
  Tape* tp = a.tape;
  Tensor out = a.val();
  for (double& v : out.vec()) v *= s;
  bool ng = result_needs_grad(tp, {a});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, aid = a.id, oid = o.id, s] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* ga = tp->grad_if_needed(aid))
        for (int64_t i = 0; i < g.numel(); ++i) (*ga)[i] += s * g[i];
    });
  }
  return o;
}

Var add_bias(Var x, Var b) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  const Tensor& bv = b.val();
  int64_t c = xv.shape().back();
  if (bv.numel() != c) throw std::invalid_argument("add_bias: bias length mismatch");
  int64_t rows = leading_rows(xv);
  Tensor out = xv;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) out[r * c + j] += bv[j];
  bool ng = result_needs_grad(tp, {x, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, bid = b.id, oid = o.id, rows, c] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
      if (Tensor* gb = tp->grad_if_needed(bid))
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) (*gb)[j] += g[r * c + j];
    });
  }
  return o;
}

Var mul_lastdim(Var x, Var v) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  const Tensor& vv = v.val();
  int64_t c = xv.shape().back();
  if (vv.numel() != c) throw std::invalid_argument("mul_lastdim: vector length mismatch");
  int64_t rows = leading_rows(xv);
  Tensor out = xv;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) out[r * c + j] *= vv[j];
  bool ng = result_needs_grad(tp, {x, v});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, vid = v.id, oid = o.id, rows, c] {
      const Tensor& g = tp->grad(oid);
      const Tensor& xv2 = tp->value(xid);
      const Tensor& vv2 = tp->value(vid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) (*gx)[r * c + j] += g[r * c + j] * vv2[j];
      if (Tensor* gv = tp->grad_if_needed(vid))
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) (*gv)[j] += g[r * c + j] * xv2[r * c + j];
    });
  }
  return o;
}

Var relu(Var x) {
  Tape* tp = x.tape;
  Tensor out = x.val();
  for (double& v : out.vec())
    if (v < 0.0) v = 0.0;
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id] {
      const Tensor& g = tp->grad(oid);
      const Tensor& xv = tp->value(xid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t i = 0; i < g.numel(); ++i)
          if (xv[i] > 0.0) (*gx)[i] += g[i];
    });
  }
  return o;
}

Var gelu(Var x) {
  Tape* tp = x.tape;
  Tensor out = x.val();
  for (double& v : out.vec()) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id] {
      const Tensor& g = tp->grad(oid);
      const Tensor& xv = tp->value(xid);
      if (Tensor* gx = tp->grad_if_needed(xid)) {
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (int64_t i = 0; i < g.numel(); ++i) {
          double v = xv[i];
          double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
          double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
          (*gx)[i] += g[i] * (cdf + v * pdf);
        }
      }
    });
  }
  return o;
}

Var sigmoid(Var x) {
  Tape* tp = x.tape;
  Tensor out = x.val();
  for (double& v : out.vec()) v = 1.0 / (1.0 + std::exp(-v));
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id] {
      const Tensor& g = tp->grad(oid);
      const Tensor& yv = tp->value(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * yv[i] * (1.0 - yv[i]);
    });
  }
  return o;
}

Var clamp_min(Var x, double lo) {
  Tape* tp = x.tape;
  Tensor out = x.val();
  for (double& v : out.vec())
    if (v < lo) v = lo;
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, lo] {
      const Tensor& g = tp->grad(oid);
      const Tensor& xv = tp->value(xid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t i = 0; i < g.numel(); ++i)
          if (xv[i] >= lo) (*gx)[i] += g[i];
    });
  }
  return o;
}

Var pow_scalar(Var x, double p) {
  Tape* tp = x.tape;
  Tensor out = x.val();
  for (double& v : out.vec()) v = std::pow(v, p);
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, p] {
      const Tensor& g = tp->grad(oid);
      const Tensor& xv = tp->value(xid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t i = 0; i < g.numel(); ++i)
          (*gx)[i] += g[i] * p * std::pow(xv[i], p - 1.0);
    });
  }
  return o;
}

// ------------------------------------------------------------------- shaping

Var reshape(Var x, std::vector<int64_t> shape) {
  Tape* tp = x.tape;
  Tensor out = x.val().reshaped(std::move(shape));
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
    });
  }
  return o;
}

Var nchw_to_tokens(Var x) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  if (xv.rank() != 4) throw std::invalid_argument("nchw_to_tokens: rank-4 input required");
  int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  int64_t t = h * w;
  Tensor out({n, t, c});
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      for (int64_t it = 0; it < t; ++it)
        out[(in * t + it) * c + ic] = xv[(in * c + ic) * t + it];
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, n, c, t] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t it = 0; it < t; ++it)
              (*gx)[(in * c + ic) * t + it] += g[(in * t + it) * c + ic];
    });
  }
  return o;
}

Var tokens_to_nchw(Var x, int64_t h, int64_t w) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  if (xv.rank() != 3) throw std::invalid_argument("tokens_to_nchw: rank-3 input required");
  int64_t n = xv.dim(0), t = xv.dim(1), c = xv.dim(2);
  if (t != h * w) throw std::invalid_argument("tokens_to_nchw: token count mismatch");
  Tensor out({n, c, h, w});
  for (int64_t in = 0; in < n; ++in)
    for (int64_t it = 0; it < t; ++it)
      for (int64_t ic = 0; ic < c; ++ic)
        out[(in * c + ic) * t + it] = xv[(in * t + it) * c + ic];
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, n, c, t] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t it = 0; it < t; ++it)
            for (int64_t ic = 0; ic < c; ++ic)
              (*gx)[(in * t + it) * c + ic] += g[(in * c + ic) * t + it];
    });
  }
  return o;
}

Var split_heads(Var x, int64_t heads) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  int64_t n = xv.dim(0), t = xv.dim(1), c = xv.dim(2);
  if (c % heads != 0) throw std::invalid_argument("split_heads: C not divisible by head count");
  int64_t d = c / heads;
  Tensor out({n * heads, t, d});
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ih = 0; ih < heads; ++ih)
      for (int64_t it = 0; it < t; ++it)
        for (int64_t id = 0; id < d; ++id)
          out[(((in * heads + ih) * t) + it) * d + id] = xv[(in * t + it) * c + ih * d + id];
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, n, t, c, heads, d] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t ih = 0; ih < heads; ++ih)
            for (int64_t it = 0; it < t; ++it)
              for (int64_t id = 0; id < d; ++id)
                (*gx)[(in * t + it) * c + ih * d + id] +=
                    g[(((in * heads + ih) * t) + it) * d + id];
    });
  }
  return o;
}

Var merge_heads(Var x, int64_t heads) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  int64_t nh = xv.dim(0), t = xv.dim(1), d = xv.dim(2);
  if (nh % heads != 0) throw std::invalid_argument("merge_heads: batch not divisible");
  int64_t n = nh / heads, c = d * heads;
  Tensor out({n, t, c});
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ih = 0; ih < heads; ++ih)
      for (int64_t it = 0; it < t; ++it)
        for (int64_t id = 0; id < d; ++id)
          out[(in * t + it) * c + ih * d + id] = xv[(((in * heads + ih) * t) + it) * d + id];
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, n, t, c, heads, d] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t ih = 0; ih < heads; ++ih)
            for (int64_t it = 0; it < t; ++it)
              for (int64_t id = 0; id < d; ++id)
                (*gx)[(((in * heads + ih) * t) + it) * d + id] +=
                    g[(in * t + it) * c + ih * d + id];
    });
  }
  return o;
}

Var concat_dim1(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_dim1: empty input list");
  Tape* tp = xs[0].tape;
  const auto& s0 = xs[0].shape();
  std::vector<int64_t> oshape = s0;
  int64_t total = 0;
  for (const Var& v : xs) {
    const auto& s = v.shape();
    if (s.size() != s0.size()) throw std::invalid_argument("concat_dim1: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (i != 1 && s[i] != s0[i]) throw std::invalid_argument("concat_dim1: shape mismatch");
    total += s[1];
  }
  oshape[1] = total;
  int64_t outer = s0[0];
  int64_t inner = 1;
  for (size_t i = 2; i < s0.size(); ++i) inner *= s0[i];
  Tensor out(oshape);
  int64_t off = 0;
  for (const Var& v : xs) {
    const Tensor& xv = v.val();
    int64_t c = xv.dim(1);
    for (int64_t n = 0; n < outer; ++n)
      for (int64_t j = 0; j < c * inner; ++j)
        out[(n * total + off) * inner + j] = xv[n * c * inner + j];
    off += c;
  }
  bool ng = false;
  for (const Var& v : xs) ng = ng || wants_grad(v);
  ng = ng && tp->grad_enabled();
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    std::vector<int32_t> ids;
    std::vector<int64_t> chans;
    for (const Var& v : xs) {
      ids.push_back(v.id);
      chans.push_back(v.dim(1));
    }
    tp->set_backward(o.id, [tp, ids, chans, oid = o.id, outer, inner, total] {
      const Tensor& g = tp->grad(oid);
      int64_t off2 = 0;
      for (size_t k = 0; k < ids.size(); ++k) {
        int64_t c = chans[k];
        if (Tensor* gx = tp->grad_if_needed(ids[k]))
          for (int64_t n = 0; n < outer; ++n)
            for (int64_t j = 0; j < c * inner; ++j)
              (*gx)[n * c * inner + j] += g[(n * total + off2) * inner + j];
        off2 += c;
      }
    });
  }
  return o;
}

Var slice_dim1(Var x, int64_t from, int64_t len) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  const auto& s = xv.shape();
  if (from < 0 || from + len > s[1]) throw std::invalid_argument("slice_dim1: out of range");
  std::vector<int64_t> oshape = s;
  oshape[1] = len;
  int64_t outer = s[0];
  int64_t inner = 1;
  for (size_t i = 2; i < s.size(); ++i) inner *= s[i];
  int64_t c = s[1];
  Tensor out(oshape);
  for (int64_t n = 0; n < outer; ++n)
    for (int64_t j = 0; j < len * inner; ++j)
      out[n * len * inner + j] = xv[(n * c + from) * inner + j];
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, outer, inner, c, from, len] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t n = 0; n < outer; ++n)
          for (int64_t j = 0; j < len * inner; ++j)
            (*gx)[(n * c + from) * inner + j] += g[n * len * inner + j];
    });
  }
  return o;
}

Var index_select0(Var x, std::vector<int64_t> idx) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  int64_t slab = xv.numel() / xv.dim(0);
  std::vector<int64_t> oshape = xv.shape();
  oshape[0] = static_cast<int64_t>(idx.size());
  Tensor out(oshape);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= xv.dim(0))
      throw std::invalid_argument("index_select0: index out of range");
    std::copy_n(xv.data() + idx[i] * slab, slab, out.data() + static_cast<int64_t>(i) * slab);
  }
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, idx = std::move(idx), slab] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (size_t i = 0; i < idx.size(); ++i)
          for (int64_t j = 0; j < slab; ++j)
            (*gx)[idx[i] * slab + j] += g[static_cast<int64_t>(i) * slab + j];
    });
  }
  return o;
}

Var merge_rows0(Var a, Var b, std::vector<int64_t> pos_a, std::vector<int64_t> pos_b) {
  Tape* tp = a.tape;
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != bv.rank()) throw std::invalid_argument("merge_rows0: rank mismatch");
  int64_t slab = av.numel() / std::max<int64_t>(av.dim(0), 1);
  if (bv.dim(0) > 0 && bv.numel() / bv.dim(0) != slab)
    throw std::invalid_argument("merge_rows0: slab size mismatch");
  std::vector<int64_t> oshape = av.shape();
  oshape[0] = av.dim(0) + bv.dim(0);
  Tensor out(oshape);
  if (static_cast<int64_t>(pos_a.size()) != av.dim(0) ||
      static_cast<int64_t>(pos_b.size()) != bv.dim(0))
    throw std::invalid_argument("merge_rows0: position count mismatch");
  for (size_t i = 0; i < pos_a.size(); ++i)
    std::copy_n(av.data() + static_cast<int64_t>(i) * slab, slab, out.data() + pos_a[i] * slab);
  for (size_t i = 0; i < pos_b.size(); ++i)
    std::copy_n(bv.data() + static_cast<int64_t>(i) * slab, slab, out.data() + pos_b[i] * slab);
  bool ng = result_needs_grad(tp, {a, b});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, aid = a.id, bid = b.id, oid = o.id, pos_a = std::move(pos_a),
                            pos_b = std::move(pos_b), slab] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* ga = tp->grad_if_needed(aid))
        for (size_t i = 0; i < pos_a.size(); ++i)
          for (int64_t j = 0; j < slab; ++j)
            (*ga)[static_cast<int64_t>(i) * slab + j] += g[pos_a[i] * slab + j];
      if (Tensor* gb = tp->grad_if_needed(bid))
        for (size_t i = 0; i < pos_b.size(); ++i)
          for (int64_t j = 0; j < slab; ++j)
            (*gb)[static_cast<int64_t>(i) * slab + j] += g[pos_b[i] * slab + j];
    });
  }
  return o;
}

// ---------------------------------------------------------------- reductions

Var sum_all(Var x) {
  Tape* tp = x.tape;
  double s = 0.0;
  for (double v : x.val().vec()) s += v;
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(Tensor::scalar(s), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id] {
      double g = tp->grad(oid)[0];
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (double& v : gx->vec()) v += g;
    });
  }
  return o;
}

Var mean_all(Var x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.val().numel())); }

Var spatial_mean(Var x) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  if (xv.rank() != 4) throw std::invalid_argument("spatial_mean: rank-4 input required");
  int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  for (int64_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < hw; ++j) s += xv[i * hw + j];
    out[i] = s / static_cast<double>(hw);
  }
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, n, c, hw] {
      const Tensor& g = tp->grad(oid);
      double inv = 1.0 / static_cast<double>(hw);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t i = 0; i < n * c; ++i)
          for (int64_t j = 0; j < hw; ++j) (*gx)[i * hw + j] += g[i] * inv;
    });
  }
  return o;
}

Var channel_max(Var x) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  if (xv.rank() != 4) throw std::invalid_argument("channel_max: rank-4 input required");
  int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, 1, xv.dim(2), xv.dim(3)});
  std::vector<int32_t> amax(static_cast<size_t>(n * hw));
  for (int64_t in = 0; in < n; ++in)
    for (int64_t j = 0; j < hw; ++j) {
      double best = xv[(in * c) * hw + j];
      int32_t bi = 0;
      for (int64_t ic = 1; ic < c; ++ic) {
        double v = xv[(in * c + ic) * hw + j];
        if (v > best) {
          best = v;
          bi = static_cast<int32_t>(ic);
        }
      }
      out[in * hw + j] = best;
      amax[static_cast<size_t>(in * hw + j)] = bi;
    }
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, amax = std::move(amax), n, c, hw] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t j = 0; j < hw; ++j)
            (*gx)[(in * c + amax[static_cast<size_t>(in * hw + j)]) * hw + j] += g[in * hw + j];
    });
  }
  return o;
}

Var channel_mean(Var x) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  if (xv.rank() != 4) throw std::invalid_argument("channel_mean: rank-4 input required");
  int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out({n, 1, xv.dim(2), xv.dim(3)});
  double inv = 1.0 / static_cast<double>(c);
  for (int64_t in = 0; in < n; ++in)
    for (int64_t j = 0; j < hw; ++j) {
      double s = 0.0;
      for (int64_t ic = 0; ic < c; ++ic) s += xv[(in * c + ic) * hw + j];
      out[in * hw + j] = s * inv;
    }
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, n, c, hw, inv] {
      const Tensor& g = tp->grad(oid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t j = 0; j < hw; ++j)
            for (int64_t ic = 0; ic < c; ++ic) (*gx)[(in * c + ic) * hw + j] += g[in * hw + j] * inv;
    });
  }
  return o;
}

Var frob_inner(Var x, Tensor r) {
  Tape* tp = x.tape;
  check_same_shape(x.val(), r, "frob_inner");
  double s = 0.0;
  const Tensor& xv = x.val();
  for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i] * r[i];
  bool ng = result_needs_grad(tp, {x});
  Var o = tp->make(Tensor::scalar(s), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, oid = o.id, r = std::move(r)] {
      double g = tp->grad(oid)[0];
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t i = 0; i < r.numel(); ++i) (*gx)[i] += g * r[i];
    });
  }
  return o;
}

Var mul_channel_broadcast(Var x, Var m) {
  Tape* tp = x.tape;
  const Tensor& xv = x.val();
  const Tensor& mv = m.val();
  if (xv.rank() != 4 || mv.rank() != 4 || mv.dim(1) != 1 || mv.dim(0) != xv.dim(0) ||
      mv.dim(2) != xv.dim(2) || mv.dim(3) != xv.dim(3))
    throw std::invalid_argument("mul_channel_broadcast: expect x [N,C,H,W], m [N,1,H,W]");
  int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out = xv;
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      for (int64_t j = 0; j < hw; ++j) out[(in * c + ic) * hw + j] *= mv[in * hw + j];
  bool ng = result_needs_grad(tp, {x, m});
  Var o = tp->make(std::move(out), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, xid = x.id, mid = m.id, oid = o.id, n, c, hw] {
      const Tensor& g = tp->grad(oid);
      const Tensor& xv2 = tp->value(xid);
      const Tensor& mv2 = tp->value(mid);
      if (Tensor* gx = tp->grad_if_needed(xid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t j = 0; j < hw; ++j)
              (*gx)[(in * c + ic) * hw + j] += g[(in * c + ic) * hw + j] * mv2[in * hw + j];
      if (Tensor* gm = tp->grad_if_needed(mid))
        for (int64_t in = 0; in < n; ++in)
          for (int64_t j = 0; j < hw; ++j) {
            double s = 0.0;
            for (int64_t ic = 0; ic < c; ++ic)
              s += g[(in * c + ic) * hw + j] * xv2[(in * c + ic) * hw + j];
            (*gm)[in * hw + j] += s;
          }
    });
  }
  return o;
}

}  // namespace ad
}  // namespace icre
