#include <array>
#include <cmath>
#include <map>

#include "ad_internal.hpp"

namespace icre::ad {

using namespace detail;

Var cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape* tp = logits.tape;
  const Tensor& lv = logits.val();
  if (lv.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [N,P]");
  int64_t n = lv.dim(0), p = lv.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= p) throw std::out_of_range("cross_entropy: label out of range");
  Tensor probs({n, p});
  double loss = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const double* xp = lv.data() + r * p;
    double mx = xp[0];
    for (int64_t j = 1; j < p; ++j) mx = std::max(mx, xp[j]);
    double z = 0.0;
    for (int64_t j = 0; j < p; ++j) {
      double e = std::exp(xp[j] - mx);
      probs[r * p + j] = e;
      z += e;
    }
    double inv = 1.0 / z;
    for (int64_t j = 0; j < p; ++j) probs[r * p + j] *= inv;
    loss += mx + std::log(z) - xp[labels[static_cast<size_t>(r)]];
  }
  loss /= static_cast<double>(n);
  bool ng = result_needs_grad(tp, {logits});
  Var o = tp->make(Tensor::scalar(loss), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, lid = logits.id, oid = o.id, probs = std::move(probs), labels, n,
                            p] {
      double g = tp->grad(oid)[0] / static_cast<double>(n);
      if (Tensor* gl = tp->grad_if_needed(lid))
        for (int64_t r = 0; r < n; ++r)
          for (int64_t j = 0; j < p; ++j) {
            double d = probs[r * p + j] - (j == labels[static_cast<size_t>(r)] ? 1.0 : 0.0);
            (*gl)[r * p + j] += g * d;
          }
    });
  }
  return o;
}

namespace {

struct IcgGroups {
  // per identity: member row indices, per-modality member indices, centers
  std::map<int, std::vector<int64_t>> all;
  std::map<int, std::array<std::vector<int64_t>, 2>> by_mod;
  std::map<int, Tensor> center_all;                  // c_y over both modalities
  std::map<int, std::array<Tensor, 2>> center_mod;   // c_y^V, c_y^I
};

IcgGroups icg_groups(const Tensor& f, const std::vector<int>& ids, const std::vector<int>& mods) {
  int64_t n = f.dim(0), d = f.dim(1);
  IcgGroups g;
  for (int64_t i = 0; i < n; ++i) {
    int m = mods[static_cast<size_t>(i)];
    if (m != 0 && m != 1) throw std::invalid_argument("icg_loss: modality labels must be 0/1");
    g.all[ids[static_cast<size_t>(i)]].push_back(i);
    g.by_mod[ids[static_cast<size_t>(i)]][static_cast<size_t>(m)].push_back(i);
  }
  for (auto& [y, rows] : g.all) {
    for (int m = 0; m < 2; ++m)
      if (g.by_mod[y][static_cast<size_t>(m)].empty())
        throw std::runtime_error("icg_loss: identity " + std::to_string(y) +
                                 " missing a modality in the batch");
    Tensor c({d});
    for (int64_t r : rows)
      for (int64_t j = 0; j < d; ++j) c[j] += f[r * d + j];
    for (int64_t j = 0; j < d; ++j) c[j] /= static_cast<double>(rows.size());
    g.center_all.emplace(y, std::move(c));
    std::array<Tensor, 2> cm{Tensor({d}), Tensor({d})};
    for (int m = 0; m < 2; ++m) {
      auto& rows_m = g.by_mod[y][static_cast<size_t>(m)];
      for (int64_t r : rows_m)
        for (int64_t j = 0; j < d; ++j) cm[static_cast<size_t>(m)][j] += f[r * d + j];
      for (int64_t j = 0; j < d; ++j)
        cm[static_cast<size_t>(m)][j] /= static_cast<double>(rows_m.size());
    }
    g.center_mod.emplace(y, std::move(cm));
  }
  return g;
}

}  // namespace

Var icg_loss(Var fpool, const std::vector<int>& ids, const std::vector<int>& mods,
             const IcgSpec& spec) {
  Tape* tp = fpool.tape;
  const Tensor& f = fpool.val();
  if (f.rank() != 2) throw std::invalid_argument("icg_loss: features must be [N,D]");
  int64_t n = f.dim(0), d = f.dim(1);
  if (n < 2) throw std::runtime_error("icg_loss: batch must contain at least 2 samples");
  if (static_cast<int64_t>(ids.size()) != n || static_cast<int64_t>(mods.size()) != n)
    throw std::invalid_argument("icg_loss: label arrays must match batch size");

  IcgGroups grp = icg_groups(f, ids, mods);

  // pull term: distance to the opposite-modality center of one's own identity
  double term1 = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    int y = ids[static_cast<size_t>(i)];
    int zbar = 1 - mods[static_cast<size_t>(i)];
    const Tensor& c = grp.center_mod.at(y)[static_cast<size_t>(zbar)];
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double diff = f[i * d + j] - c[j];
      s += diff * diff;
    }
    term1 += std::max(0.0, std::sqrt(s) - spec.rho1);
  }
  term1 /= static_cast<double>(n);

  // push term: margin against other identities' whole-identity centers;
  // normalization constant 2/(N(N+1)) is used verbatim
  double push_coef = 2.0 / (static_cast<double>(n) * static_cast<double>(n + 1));
  double term2 = 0.0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (!spec.literal_pairs && ids[static_cast<size_t>(i)] == ids[static_cast<size_t>(j)])
        continue;
      const Tensor& c = grp.center_all.at(ids[static_cast<size_t>(j)]);
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        double diff = f[i * d + k] - c[k];
        s += diff * diff;
      }
      term2 += std::max(0.0, spec.rho2 - std::sqrt(s));
    }
  term2 *= push_coef;

  bool ng = result_needs_grad(tp, {fpool});
  Var o = tp->make(Tensor::scalar(term1 + term2), ng, {});
  if (ng) {
    tp->set_backward(o.id, [tp, fid = fpool.id, oid = o.id, ids, mods, spec, n, d, push_coef] {
      double g0 = tp->grad(oid)[0];
      Tensor* gf = tp->grad_if_needed(fid);
      if (!gf) return;
      const Tensor& f2 = tp->value(fid);
      IcgGroups grp2 = icg_groups(f2, ids, mods);
      double a = g0 / static_cast<double>(n);
      for (int64_t i = 0; i < n; ++i) {
        int y = ids[static_cast<size_t>(i)];
        int zbar = 1 - mods[static_cast<size_t>(i)];
        const Tensor& c = grp2.center_mod.at(y)[static_cast<size_t>(zbar)];
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          double diff = f2[i * d + j] - c[j];
          s += diff * diff;
        }
        double dist = std::sqrt(s);
        if (dist - spec.rho1 <= 0.0 || dist == 0.0) continue;
        const auto& members = grp2.by_mod.at(y)[static_cast<size_t>(zbar)];
        double inv_m = 1.0 / static_cast<double>(members.size());
        for (int64_t j = 0; j < d; ++j) {
          double u = (f2[i * d + j] - c[j]) / dist;
          (*gf)[i * d + j] += a * u;
          for (int64_t r : members) (*gf)[r * d + j] -= a * u * inv_m;
        }
      }
      double b = g0 * push_coef;
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
          if (i == j) continue;
          if (!spec.literal_pairs && ids[static_cast<size_t>(i)] == ids[static_cast<size_t>(j)])
            continue;
          int yj = ids[static_cast<size_t>(j)];
          const Tensor& c = grp2.center_all.at(yj);
          double s = 0.0;
          for (int64_t k = 0; k < d; ++k) {
            double diff = f2[i * d + k] - c[k];
            s += diff * diff;
          }
          double dist = std::sqrt(s);
          if (spec.rho2 - dist <= 0.0 || dist == 0.0) continue;
          const auto& members = grp2.all.at(yj);
          double inv_m = 1.0 / static_cast<double>(members.size());
          for (int64_t k = 0; k < d; ++k) {
            double v = (f2[i * d + k] - c[k]) / dist;
            (*gf)[i * d + k] -= b * v;
            for (int64_t r : members) (*gf)[r * d + k] += b * v * inv_m;
          }
        }
    });
  }
  return o;
}

Var batch_hard_triplet(Var fpool, const std::vector<int>& ids, double margin) {
  Tape* tp = fpool.tape;
  const Tensor& f = fpool.val();
  if (f.rank() != 2) throw std::invalid_argument("batch_hard_triplet: features must be [N,D]");
  int64_t n = f.dim(0), d = f.dim(1);
  if (static_cast<int64_t>(ids.size()) != n)
    throw std::invalid_argument("batch_hard_triplet: label count mismatch");

  std::vector<double> dist(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        double diff = f[i * d + k] - f[j * d + k];
        s += diff * diff;
      }
      double v = std::sqrt(s);
      dist[static_cast<size_t>(i * n + j)] = v;
      dist[static_cast<size_t>(j * n + i)] = v;
    }

  std::vector<int64_t> hard_pos(static_cast<size_t>(n), -1), hard_neg(static_cast<size_t>(n), -1);
  int64_t valid = 0;
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t p = -1, q = -1;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (ids[static_cast<size_t>(j)] == ids[static_cast<size_t>(i)]) {
        if (p < 0 || dist[static_cast<size_t>(i * n + j)] > dist[static_cast<size_t>(i * n + p)])
          p = j;
      } else {
        if (q < 0 || dist[static_cast<size_t>(i * n + j)] < dist[static_cast<size_t>(i * n + q)])
          q = j;
      }
    }
    if (p < 0 || q < 0) continue;
    hard_pos[static_cast<size_t>(i)] = p;
    hard_neg[static_cast<size_t>(i)] = q;
    ++valid;
    loss += std::max(0.0, margin + dist[static_cast<size_t>(i * n + p)] -
                              dist[static_cast<size_t>(i * n + q)]);
  }
  if (valid > 0) loss /= static_cast<double>(valid);

  bool ng = result_needs_grad(tp, {fpool});
  Var o = tp->make(Tensor::scalar(loss), ng, {});
  if (ng && valid > 0) {
    tp->set_backward(o.id, [tp, fid = fpool.id, oid = o.id, hard_pos = std::move(hard_pos),
                            hard_neg = std::move(hard_neg), margin, n, d, valid] {
      double g0 = tp->grad(oid)[0] / static_cast<double>(valid);
      Tensor* gf = tp->grad_if_needed(fid);
      if (!gf) return;
      const Tensor& f2 = tp->value(fid);
      auto pair_dist = [&](int64_t i, int64_t j) {
        double s = 0.0;
        for (int64_t k = 0; k < d; ++k) {
          double diff = f2[i * d + k] - f2[j * d + k];
          s += diff * diff;
        }
        return std::sqrt(s);
      };
      for (int64_t i = 0; i < n; ++i) {
        int64_t p = hard_pos[static_cast<size_t>(i)], q = hard_neg[static_cast<size_t>(i)];
        if (p < 0 || q < 0) continue;
        double dp = pair_dist(i, p), dq = pair_dist(i, q);
        if (margin + dp - dq <= 0.0) continue;
        if (dp > 0.0)
          for (int64_t k = 0; k < d; ++k) {
            double u = (f2[i * d + k] - f2[p * d + k]) / dp;
            (*gf)[i * d + k] += g0 * u;
            (*gf)[p * d + k] -= g0 * u;
          }
        if (dq > 0.0)
          for (int64_t k = 0; k < d; ++k) {
            double u = (f2[i * d + k] - f2[q * d + k]) / dq;
            (*gf)[i * d + k] -= g0 * u;
            (*gf)[q * d + k] += g0 * u;
          }
      }
    });
  }
  return o;
}

}  // namespace icre::ad
