#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "icre/tensor.hpp"

namespace icre {

class Tape;

/// Lightweight handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  int32_t id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& val() const;
  const std::vector<int64_t>& shape() const { return val().shape(); }
  int64_t dim(size_t i) const { return val().dim(i); }
  double item() const { return val()[0]; }
};

/// Reverse-mode tape. One tape per forward pass; ops append nodes, and
/// backward() walks them in reverse creation order.
class Tape {
 public:
  struct Node {
    Tensor owned;
    const Tensor* ext = nullptr;  // leaf referencing external storage
    Tensor grad;                  // allocated lazily during backward
    bool needs_grad = false;
    std::function<void()> backward;

    const Tensor& value() const { return ext ? *ext : owned; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  /// Leaf referencing external storage (no copy). One node per pointer.
  Var leaf(const Tensor* t, bool needs_grad);
  /// Leaf owning a value, never differentiated.
  Var constant(Tensor t);
  /// Generic op node. `bw` may be empty for non-differentiable results.
  Var make(Tensor value, bool needs_grad, std::function<void()> bw);
  /// Attach the backward closure after creation (closures capture the id).
  void set_backward(int32_t id, std::function<void()> bw) {
    nodes_[static_cast<size_t>(id)]->backward = std::move(bw);
  }

  const Tensor& value(int32_t id) const { return nodes_[static_cast<size_t>(id)]->value(); }
  bool needs_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)]->needs_grad; }
  /// Gradient accumulator; allocates zeros of the value's shape on first use.
  Tensor& grad(int32_t id);
  bool has_grad(int32_t id) const { return !nodes_[static_cast<size_t>(id)]->grad.empty(); }
  /// nullptr when the node does not require grad (lets ops skip work).
  Tensor* grad_if_needed(int32_t id) {
    return nodes_[static_cast<size_t>(id)]->needs_grad ? &grad(id) : nullptr;
  }

  /// Backpropagate from a scalar root.
  void backward(Var root);

  /// Gradient of an external parameter after backward(); zeros if the
  /// parameter never entered this graph.
  Tensor grad_of(const Tensor* param) const;

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<const Tensor*, int32_t> leaf_cache_;
  bool grad_enabled_ = true;
};

namespace ad {

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_bias(Var x, Var b);     // x [...,C] + b [C]
Var mul_lastdim(Var x, Var v);  // x [...,C] * v [C], broadcast over leading dims
Var relu(Var x);
Var gelu(Var x);
Var sigmoid(Var x);
Var clamp_min(Var x, double lo);
Var pow_scalar(Var x, double p);  // requires positive inputs when p is fractional

// ---- shaping (pure permutations / copies) ----
Var reshape(Var x, std::vector<int64_t> shape);
Var nchw_to_tokens(Var x);  // [N,C,H,W] -> [N,H*W,C], raster order over H then W
Var tokens_to_nchw(Var x, int64_t h, int64_t w);
Var split_heads(Var x, int64_t heads);  // [N,T,C] -> [N*heads,T,C/heads]
Var merge_heads(Var x, int64_t heads);  // inverse of split_heads
Var concat_dim1(const std::vector<Var>& xs);
Var slice_dim1(Var x, int64_t from, int64_t len);
Var index_select0(Var x, std::vector<int64_t> idx);
/// Inverse of a two-way index_select0 split: out[pos_a[i]] = a[i], out[pos_b[j]] = b[j].
Var merge_rows0(Var a, Var b, std::vector<int64_t> pos_a, std::vector<int64_t> pos_b);

// ---- reductions ----
Var sum_all(Var x);
Var mean_all(Var x);
Var spatial_mean(Var x);  // [N,C,H,W] -> [N,C]
Var channel_max(Var x);   // [N,C,H,W] -> [N,1,H,W]
Var channel_mean(Var x);  // [N,C,H,W] -> [N,1,H,W]
Var frob_inner(Var x, Tensor r);  // scalar sum(x*r) for test readouts

// ---- linear algebra ----
Var matmul(Var a, Var b);  // [M,K]x[K,N]
Var bmm(Var a, Var b);     // [B,M,K]x[B,K,N]
Var bmm_nt(Var a, Var b);  // [B,M,K] x [B,N,K]^T -> [B,M,N]
/// x [...,Cin] -> [...,Cout]; w stored [Cin,Cout]; b optional (invalid Var to skip).
Var linear(Var x, Var w, Var b);

// ---- convolution / pooling ----
struct Conv2dSpec {
  int64_t stride_h = 1, stride_w = 1;
  int64_t pad_h = 0, pad_w = 0;
  int64_t dil_h = 1, dil_w = 1;
  int64_t groups = 1;  // 1 or depthwise (groups == in channels == out channels)
};
Var conv2d(Var x, Var w, Var b, const Conv2dSpec& spec);
Var maxpool2d(Var x, int64_t k, int64_t stride, int64_t pad);

// ---- normalization ----
struct BnState {
  Tensor running_mean, running_var;
};
/// x rank 4 (per channel over N,H,W) or rank 2 (per column over N).
/// beta optional. train=false uses running stats; update_stats gates the
/// running-stat side effect so gradient checks stay pure.
Var batchnorm(Var x, Var gamma, Var beta, BnState* state, bool train, bool update_stats,
              double momentum, double eps);
Var layernorm(Var x, Var gamma, Var beta, double eps);  // normalize last dim
Var softmax_lastdim(Var x);
Var softmax_dim1(Var x);  // rank 4, softmax across channel dim

// ---- broadcast over channels ----
Var mul_channel_broadcast(Var x, Var m);  // [N,C,H,W] * [N,1,H,W]

// ---- losses ----
Var cross_entropy(Var logits, const std::vector<int>& labels);  // mean over batch
struct IcgSpec {
  double rho1 = 0.01;
  double rho2 = 0.7;
  bool literal_pairs = false;  // include same-identity (i,j) pairs in the push term
};
/// fpool [N,D]; mods entries 0 = VIS, 1 = IR. Gradients flow through centers.
Var icg_loss(Var fpool, const std::vector<int>& ids, const std::vector<int>& mods,
             const IcgSpec& spec);
Var batch_hard_triplet(Var fpool, const std::vector<int>& ids, double margin);

}  // namespace ad
}  // namespace icre
