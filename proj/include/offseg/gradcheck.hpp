#pragma once

// Finite-difference checks of the analytic gradients, grouped by scope:
//   mlp      Σ R⊙mlp(X) over the MLP parameters and X
//   softmax  Σ R⊙softmax_rows(X) over X
//   head     Σ M² of the offset head over its parameters and E
//   loss     cross-entropy of the offset head logits over its parameters and E
// Analytic gradients run in wide precision. The head composites evaluate the
// finite-difference side in extended precision: some coordinates have
// gradients near or exactly zero (a shared shift of every class row leaves the
// cross-entropy unchanged), and double roundoff in f would sit above the 1e-8
// relative floor there.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "offseg/diff.hpp"
#include "offseg/heads.hpp"
#include "offseg/linalg.hpp"
#include "offseg/metrics.hpp"
#include "offseg/rng.hpp"
#include "offseg/train.hpp"

namespace offseg {

struct GradCheckShape {
  std::size_t classes = 5;   // K
  std::size_t channels = 8;  // C
  std::size_t hidden = 4;    // C_h
  std::size_t pixels = 16;   // HW
  double temperature = 1.0;
};

struct ScopeResult {
  std::string scope;
  std::uint64_t seed = 0;
  GradCheckReport report;
  std::string coordinate;  // "<tensor>[i,j]" of the worst coordinate
};

inline const std::vector<std::string>& grad_check_scopes() {
  static const std::vector<std::string> s{"mlp", "softmax", "head", "loss"};
  return s;
}

using Extended = long double;

namespace detail {

/// A list of named tensors viewed as one flat parameter vector.
class Flat {
 public:
  void add(std::string name, Matrix<double>* m) { items_.push_back({std::move(name), m}); }

  std::vector<double> pack() const {
    std::vector<double> v;
    for (const auto& it : items_) v.insert(v.end(), it.m->data().begin(), it.m->data().end());
    return v;
  }

  void unpack(std::span<const double> v) {
    std::size_t o = 0;
    for (auto& it : items_)
      for (auto& x : it.m->data()) x = v[o++];
  }

  std::string name_of(std::size_t flat) const {
    for (const auto& it : items_) {
      if (flat < it.m->size())
        return it.name + "[" + std::to_string(flat / it.m->cols()) + "," +
               std::to_string(flat % it.m->cols()) + "]";
      flat -= it.m->size();
    }
    return "?";
  }

 private:
  struct Item {
    std::string name;
    Matrix<double>* m;
  };
  std::vector<Item> items_;
};

inline void add_mlp(Flat& f, const std::string& prefix, MLPParams<double>& p) {
  f.add(prefix + ".w1", &p.w1);
  f.add(prefix + ".b1", &p.b1);
  f.add(prefix + ".w2", &p.w2);
  f.add(prefix + ".b2", &p.b2);
}

inline void add_head(Flat& f, OffsetHeadParams<double>& h, Matrix<double>& e) {
  f.add("head.w", &h.w);
  add_mlp(f, "head.mlp_cls", h.mlp_cls);
  add_mlp(f, "head.mlp_pos", h.mlp_pos);
  f.add("e", &e);
}

inline void randomize_mlp(MLPParams<double>& p, Rng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(p.in_dim()));
  fill_normal(p.w1, rng, sd);
  fill_normal(p.b1, rng, 0.1);
  fill_normal(p.w2, rng, sd);
  fill_normal(p.b2, rng, 0.1);
}

/// Head with every tensor random, including the normally zero second layers.
inline OffsetHeadParams<double> random_head(const GradCheckShape& s, Rng& rng) {
  OffsetHeadParams<double> h;
  h.w = Matrix<double>(s.classes, s.channels);
  h.mlp_cls = MLPParams<double>(s.channels, s.hidden, s.channels);
  h.mlp_pos = MLPParams<double>(s.channels, s.hidden, s.channels);
  fill_normal(h.w, rng, 1.0 / std::sqrt(static_cast<double>(s.channels)));
  randomize_mlp(h.mlp_cls, rng);
  randomize_mlp(h.mlp_pos, rng);
  h.temperature = s.temperature;
  return h;
}

inline std::vector<double> pack_head_grads(const OffsetHeadGrads<double>& g) {
  std::vector<double> v;
  auto put = [&](const Matrix<double>& m) { v.insert(v.end(), m.data().begin(), m.data().end()); };
  put(g.w);
  for (const auto* m : {&g.mlp_cls, &g.mlp_pos}) {
    put(m->w1);
    put(m->b1);
    put(m->w2);
    put(m->b2);
  }
  put(g.e);
  return v;
}

inline double weighted_sum(const Matrix<double>& r, const Matrix<double>& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += r.data()[i] * y.data()[i];
  return s;
}

}  // namespace detail

/// Runs one scope at one seed. With inject_fault the analytic gradient is
/// scaled by 1.01 before comparison, which must make the check fail.
inline ScopeResult check_scope(const std::string& scope, std::uint64_t seed, bool inject_fault = false,
                               const GradCheckShape& shape = {}) {
  Rng rng = make_stream(seed, "gradcheck." + scope);
  const std::size_t k = shape.classes, c = shape.channels, hw = shape.pixels;
  detail::Flat flat;
  std::function<double(std::span<const double>)> f;
  std::vector<double> analytic;

  MLPParams<double> mlp;
  OffsetHeadParams<double> head;
  Matrix<double> x, r, e;
  std::vector<int> labels;
  std::function<Extended()> ext;

  if (scope == "mlp") {
    mlp = MLPParams<double>(c, shape.hidden, c);
    detail::randomize_mlp(mlp, rng);
    x = Matrix<double>(hw, c);
    r = Matrix<double>(hw, c);
    fill_normal(x, rng, 1.0);
    fill_normal(r, rng, 1.0);
    flat.add("x", &x);
    detail::add_mlp(flat, "mlp", mlp);
    const auto out = mlp_forward(mlp, x);
    const auto b = mlp_backward(mlp, out.cache, r);
    for (const auto* m : {&b.dx, &b.grads.w1, &b.grads.b1, &b.grads.w2, &b.grads.b2})
      analytic.insert(analytic.end(), m->data().begin(), m->data().end());
    f = [&](std::span<const double> th) {
      flat.unpack(th);
      return detail::weighted_sum(r, mlp_forward(mlp, x).y);
    };
  } else if (scope == "softmax") {
    x = Matrix<double>(k, hw);
    r = Matrix<double>(k, hw);
    fill_normal(x, rng, 1.0);
    fill_normal(r, rng, 1.0);
    flat.add("x", &x);
    const auto dx = vjp_softmax_rows(softmax_rows(x), r);
    analytic.assign(dx.data().begin(), dx.data().end());
    f = [&](std::span<const double> th) {
      flat.unpack(th);
      return detail::weighted_sum(r, softmax_rows(x));
    };
  } else if (scope == "head" || scope == "loss") {
    head = detail::random_head(shape, rng);
    e = Matrix<double>(hw, c);
    fill_normal(e, rng, 1.0);
    detail::add_head(flat, head, e);
    const auto tr = offset_forward(head, e);
    Matrix<double> dm;
    if (scope == "head") {
      dm = tr.m;
      dm *= 2.0;
      ext = [&] {
        const auto m = offset_forward(head.cast<Extended>(), e.cast<Extended>()).m;
        Extended s = 0;
        for (Extended v : m.data()) s += v * v;
        return s;
      };
    } else {
      std::uniform_int_distribution<int> lab(0, static_cast<int>(k) - 1);
      labels.resize(hw);
      for (auto& l : labels) l = lab(rng);
      labels[0] = kIgnore;  // exercise the ignore path
      dm = cross_entropy(tr.m, labels).dlogits;
      ext = [&] { return cross_entropy(offset_forward(head.cast<Extended>(), e.cast<Extended>()).m, labels).loss; };
    }
    analytic = detail::pack_head_grads(offset_backward(head, tr, dm));
    // Return f(θ) − f(θ₀) so the cast to double does not round away the
    // extended-precision digits the central difference needs.
    const Extended f0 = ext();
    f = [&, f0](std::span<const double> th) {
      flat.unpack(th);
      return static_cast<double>(ext() - f0);
    };
  } else {
    throw ConfigError("grad-check: unknown scope '" + scope + "' (expected mlp, softmax, head, loss or all)");
  }

  if (inject_fault)
    for (auto& a : analytic) a *= 1.01;
  const std::vector<double> theta = flat.pack();
  ScopeResult res{scope, seed, grad_check(f, theta, analytic, 1e-5, 1e-5), {}};
  flat.unpack(theta);
  res.coordinate = flat.name_of(res.report.worst_index);
  return res;
}

}  // namespace offseg
