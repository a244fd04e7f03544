#pragma once

#include <Eigen/Dense>

#include "icre/autodiff.hpp"

namespace icre::ad::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline CMapMat map2(const Tensor& t, int64_t rows, int64_t cols) {
  return CMapMat(t.data(), rows, cols);
}
inline MapMat map2(Tensor& t, int64_t rows, int64_t cols) {
  return MapMat(t.data(), rows, cols);
}

inline Tape* tape_of(Var a) { return a.tape; }

inline bool wants_grad(Var v) { return v.valid() && v.tape->needs_grad(v.id); }

inline bool result_needs_grad(Tape* tp, std::initializer_list<Var> parents) {
  if (!tp->grad_enabled()) return false;
  for (Var p : parents)
    if (wants_grad(p)) return true;
  return false;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
}

/// Leading-dims x last-dim view: flattens [..., C] to [R, C].
inline int64_t leading_rows(const Tensor& t) {
  if (t.rank() < 1) throw std::invalid_argument("leading_rows: rank 0");
  return t.numel() / t.shape().back();
}

}  // namespace icre::ad::detail
