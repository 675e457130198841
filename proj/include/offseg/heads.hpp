#pragma once

// Classification heads: the per-pixel baseline P = W·Eᵀ and the dual-branch
// offset head M = (W + ΔW)·(E + ΔE)ᵀ, where ΔW is produced from class-wise
// spatial attention pooling of E and ΔE from pixel-wise class attention
// pooling of W. Both attentions share the coupled matrix A_c = W·Eᵀ.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>

#include "offseg/diff.hpp"
#include "offseg/linalg.hpp"
#include "offseg/rng.hpp"

namespace offseg {

struct HeadFlags {
  bool class_offset = true;
  bool feature_offset = true;

  bool any() const { return class_offset || feature_offset; }
  friend bool operator==(const HeadFlags&, const HeadFlags&) = default;
};

template <class T>
struct OffsetHeadParams {
  Matrix<T> w;           // K × C class embeddings
  MLPParams<T> mlp_cls;  // C → C_h → C, produces ΔW
  MLPParams<T> mlp_pos;  // C → C_h → C, produces ΔE
  T temperature = T(1);
  HeadFlags flags;

  std::size_t classes() const { return w.rows(); }
  std::size_t channels() const { return w.cols(); }
  std::size_t hidden() const { return mlp_cls.hidden_dim(); }

  void validate() const {
    if (w.rows() < 2 || w.cols() < 1)
      throw ShapeError("OffsetHeadParams: need K >= 2 and C >= 1, got W " + w.shape());
    mlp_cls.validate();
    mlp_pos.validate();
    for (const auto* m : {&mlp_cls, &mlp_pos})
      if (m->in_dim() != w.cols() || m->out_dim() != w.cols())
        throw ShapeError("OffsetHeadParams: offset MLP " + m->w1.shape() + "/" + m->w2.shape() +
                         " does not map C=" + std::to_string(w.cols()) + " to itself");
    if (!(temperature > T(0)) || !std::isfinite(temperature))
      throw ConfigError("OffsetHeadParams: temperature must be positive and finite");
  }

  template <class U>
  OffsetHeadParams<U> cast() const {
    OffsetHeadParams<U> o;
    o.w = w.template cast<U>();
    for (auto [src, dst] : {std::pair{&mlp_cls, &o.mlp_cls}, std::pair{&mlp_pos, &o.mlp_pos}}) {
      dst->w1 = src->w1.template cast<U>();
      dst->b1 = src->b1.template cast<U>();
      dst->w2 = src->w2.template cast<U>();
      dst->b2 = src->b2.template cast<U>();
    }
    o.temperature = static_cast<U>(temperature);
    o.flags = flags;
    return o;
  }

  friend bool operator==(const OffsetHeadParams&, const OffsetHeadParams&) = default;
};

/// Visits every stored parameter tensor as fn(name, matrix, is_bias). Works on
/// const and mutable params alike.
template <class Head, class Fn>
void for_each_param(Head& h, Fn&& fn) {
  fn("head.w", h.w, false);
  for (auto [prefix, m] : {std::pair{"head.mlp_cls", &h.mlp_cls}, std::pair{"head.mlp_pos", &h.mlp_pos}}) {
    std::string p(prefix);
    fn(p + ".w1", m->w1, false);
    fn(p + ".b1", m->b1, true);
    fn(p + ".w2", m->w2, false);
    fn(p + ".b2", m->b2, true);
  }
}

/// Every intermediate of one offset-head forward pass.
template <class T>
struct OffsetTrace {
  Matrix<T> e;        // HW × C input features
  Matrix<T> a_c;      // K × HW coupled attention
  Matrix<T> a_cls;    // K × HW, rows sum to 1 (spatial softmax)
  Matrix<T> a_pos;    // HW × K, rows sum to 1 (class softmax, transposed)
  Matrix<T> f_cls;    // K × C
  Matrix<T> f_pos;    // HW × C
  Matrix<T> delta_w;  // K × C
  Matrix<T> delta_e;  // HW × C
  Matrix<T> w_adj;    // K × C
  Matrix<T> e_adj;    // HW × C
  Matrix<T> m;        // K × HW logits
  MlpCache<T> cls_cache;
  MlpCache<T> pos_cache;
};

template <class T>
struct OffsetHeadGrads {
  Matrix<T> w;
  MLPParams<T> mlp_cls;
  MLPParams<T> mlp_pos;
  Matrix<T> e;  // gradient w.r.t. the input features
};

/// Per-pixel classification logits P = W·Eᵀ (K × HW), no bias.
template <class T>
Matrix<T> perpixel_forward(const Matrix<T>& w, const Matrix<T>& e) {
  if (w.cols() != e.cols())
    throw ShapeError("perpixel_forward: W " + w.shape() + " and E " + e.shape() +
                     " disagree on channel count");
  return matmul_nt(w, e);
}

namespace detail {
template <class Fn>
auto stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& err) {
    throw NumericError(std::string("offset head stage ") + name + ": " + err.what());
  }
}
}  // namespace detail

template <class T>
OffsetTrace<T> offset_forward(const OffsetHeadParams<T>& p, const Matrix<T>& e) {
  p.validate();
  if (e.cols() != p.channels())
    throw ShapeError("offset_forward: E " + e.shape() + " does not match W " + p.w.shape());
  using detail::stage;
  OffsetTrace<T> tr;
  tr.e = e;
  tr.a_c = stage("A_c", [&] { return matmul_nt(p.w, e); });
  Matrix<T> logits = tr.a_c;
  if (p.temperature != T(1)) logits *= T(1) / p.temperature;
  tr.a_cls = stage("A_cls", [&] { return softmax_rows(logits); });
  tr.a_pos = stage("A_pos", [&] { return softmax_rows(transpose(logits)); });
  tr.f_cls = stage("F_cls", [&] { return matmul(tr.a_cls, e); });
  tr.f_pos = stage("F_pos", [&] { return matmul(tr.a_pos, p.w); });

  if (p.flags.class_offset) {
    auto out = stage("dW", [&] { return mlp_forward(p.mlp_cls, tr.f_cls); });
    require_finite(out.y, "offset head stage dW");
    tr.delta_w = std::move(out.y);
    tr.cls_cache = std::move(out.cache);
    tr.w_adj = p.w + tr.delta_w;
  } else {
    tr.delta_w = Matrix<T>(p.w.rows(), p.w.cols());
    tr.w_adj = p.w;
  }
  if (p.flags.feature_offset) {
    auto out = stage("dE", [&] { return mlp_forward(p.mlp_pos, tr.f_pos); });
    require_finite(out.y, "offset head stage dE");
    tr.delta_e = std::move(out.y);
    tr.pos_cache = std::move(out.cache);
    tr.e_adj = e + tr.delta_e;
  } else {
    tr.delta_e = Matrix<T>(e.rows(), e.cols());
    tr.e_adj = e;
  }
  tr.m = stage("M", [&] { return matmul_nt(tr.w_adj, tr.e_adj); });
  return tr;
}

/// Exact reverse of offset_forward. W and E receive gradient through the final
/// product, through both pooled features, and through A_c.
template <class T>
OffsetHeadGrads<T> offset_backward(const OffsetHeadParams<T>& p, const OffsetTrace<T>& tr,
                                   const Matrix<T>& dm) {
  if (!dm.same_shape(tr.m))
    throw ShapeError("offset_backward: upstream " + dm.shape() + " does not match M " +
                     tr.m.shape());
  OffsetHeadGrads<T> g;
  const Matrix<T> d_wadj = matmul(dm, tr.e_adj);
  const Matrix<T> d_eadj = matmul_tn(dm, tr.w_adj);
  g.w = d_wadj;
  g.e = d_eadj;
  g.mlp_cls = zeros_like(p.mlp_cls);
  g.mlp_pos = zeros_like(p.mlp_pos);
  if (!p.flags.any()) return g;

  Matrix<T> d_logits(tr.a_c.rows(), tr.a_c.cols());
  if (p.flags.class_offset) {
    auto b = mlp_backward(p.mlp_cls, tr.cls_cache, d_wadj);
    g.mlp_cls = std::move(b.grads);
    // F_cls = A_cls·E
    g.e += matmul_tn(tr.a_cls, b.dx);
    d_logits += vjp_softmax_rows(tr.a_cls, matmul_nt(b.dx, tr.e));
  }
  if (p.flags.feature_offset) {
    auto b = mlp_backward(p.mlp_pos, tr.pos_cache, d_eadj);
    g.mlp_pos = std::move(b.grads);
    // F_pos = A_pos·W
    g.w += matmul_tn(tr.a_pos, b.dx);
    d_logits += transpose(vjp_softmax_rows(tr.a_pos, matmul_nt(b.dx, p.w)));
  }
  if (p.temperature != T(1)) d_logits *= T(1) / p.temperature;
  // A_c = W·Eᵀ
  g.w += matmul(d_logits, tr.e);
  g.e += matmul_tn(d_logits, p.w);
  return g;
}

/// Learnable parameter count: K·C for the class embeddings plus
/// C·C_h + C_h + C_h·C + C for each enabled offset branch.
inline std::uint64_t param_count(std::uint64_t k, std::uint64_t c, std::uint64_t c_h,
                                 HeadFlags flags) {
  const std::uint64_t branch = c * c_h + c_h + c_h * c + c;
  return k * c + (flags.class_offset ? branch : 0) + (flags.feature_offset ? branch : 0);
}

/// Counts the parameters actually stored in `p` that take part in the forward
/// pass under its flags.
template <class T>
std::uint64_t enumerate_active_params(const OffsetHeadParams<T>& p) {
  std::uint64_t n = 0;
  for_each_param(p, [&](const std::string& name, const Matrix<T>& m, bool) {
    const bool cls = name.starts_with("head.mlp_cls");
    const bool pos = name.starts_with("head.mlp_pos");
    if ((cls && !p.flags.class_offset) || (pos && !p.flags.feature_offset)) return;
    n += m.size();
  });
  return n;
}

/// W and first-layer MLP weights ~ normal(0, 1/sqrt(C)); first-layer biases
/// and both second layers are zero, so a fresh head reproduces W·Eᵀ.
template <class T>
OffsetHeadParams<T> init_params(std::size_t k, std::size_t c, std::size_t c_h, std::uint64_t seed,
                                HeadFlags flags = {}) {
  if (k < 2 || c < 1 || c_h < 1)
    throw ConfigError("init_params: need K >= 2, C >= 1, C_h >= 1");
  Rng rng = make_stream(seed, "init.head");
  OffsetHeadParams<T> p;
  p.w = Matrix<T>(k, c);
  p.mlp_cls = MLPParams<T>(c, c_h, c);
  p.mlp_pos = MLPParams<T>(c, c_h, c);
  const double sd = 1.0 / std::sqrt(static_cast<double>(c));
  fill_normal(p.w, rng, sd);
  fill_normal(p.mlp_cls.w1, rng, sd);
  fill_normal(p.mlp_pos.w1, rng, sd);
  p.flags = flags;
  return p;
}

}  // namespace offseg
