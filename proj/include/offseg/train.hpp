#pragma once

// Loss, schedule, optimizer, end-to-end training of encoder + head, and
// evaluation. Training runs in narrow precision.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "offseg/binary_io.hpp"
#include "offseg/data.hpp"
#include "offseg/diff.hpp"
#include "offseg/heads.hpp"
#include "offseg/linalg.hpp"
#include "offseg/metrics.hpp"
#include "offseg/parallel.hpp"
#include "offseg/rng.hpp"

namespace offseg {

template <class T>
struct LossResult {
  T loss = T(0);
  Matrix<T> dlogits;
};

/// Mean over non-ignored pixels of −log softmax_K(logits)_y, with its gradient.
template <class T>
LossResult<T> cross_entropy(const Matrix<T>& logits, std::span<const int> labels) {
  if (labels.size() != logits.cols())
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     logits.shape());
  const std::size_t k = logits.rows(), n = logits.cols();
  std::size_t valid = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (labels[j] == kIgnore) continue;
    if (labels[j] < 0 || static_cast<std::size_t>(labels[j]) >= k)
      throw ConfigError("cross_entropy: label " + std::to_string(labels[j]) + " at pixel " +
                        std::to_string(j) + " outside [0, " + std::to_string(k) + ")");
    ++valid;
  }
  if (valid == 0) throw ConfigError("cross_entropy: every pixel is ignored");

  LossResult<T> r{T(0), Matrix<T>(k, n)};
  const T inv = T(1) / static_cast<T>(valid);
  using Acc = std::common_type_t<T, double>;
  Acc total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (labels[j] == kIgnore) continue;
    T mx = logits(0, j);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits(c, j));
    T sum = 0;
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(logits(c, j) - mx);
    const T lse = mx + std::log(sum);
    const auto y = static_cast<std::size_t>(labels[j]);
    total += static_cast<Acc>(lse - logits(y, j));
    for (std::size_t c = 0; c < k; ++c)
      r.dlogits(c, j) = (std::exp(logits(c, j) - lse) - (c == y ? T(1) : T(0))) * inv;
  }
  r.loss = static_cast<T>(total / static_cast<Acc>(valid));
  return r;
}

struct TrainConfig {
  double base_lr = 6e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_iters = 100;
  int total_iters = 2000;
  double power = 0.9;
  int batch_size = 8;
  std::uint64_t seed = 0;
  HeadFlags flags;
  int channels = 32;        // C
  int hidden = 16;          // C_h of the offset MLPs
  int encoder_hidden = 32;  // C_e
  double temperature = 1.0;
  int eval_interval = 0;  // 0: evaluate on val only after the last iteration

  void validate() const {
    if (total_iters < 0) throw ConfigError("train: total_iters must be >= 0");
    if (total_iters > 0 && (warmup_iters < 0 || warmup_iters >= total_iters))
      throw ConfigError("train: warmup_iters must lie in [0, total_iters)");
    if (!(base_lr > 0) || !(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1) || !(eps > 0) ||
        !(power > 0) || weight_decay < 0)
      throw ConfigError("train: rates must be positive and betas in (0, 1)");
    if (batch_size < 1 || channels < 1 || hidden < 1 || encoder_hidden < 1)
      throw ConfigError("train: batch size and widths must be positive");
    if (!(temperature > 0)) throw ConfigError("train: temperature must be positive");
  }
};

/// Linear warmup to base_lr, then polynomial decay to 0 at total_iters.
inline double poly_lr(int t, const TrainConfig& cfg) {
  if (t < 0 || t > cfg.total_iters)
    throw ConfigError("poly_lr: iteration " + std::to_string(t) + " outside [0, " +
                      std::to_string(cfg.total_iters) + "]");
  if (t < cfg.warmup_iters)
    return cfg.base_lr * static_cast<double>(t + 1) / static_cast<double>(cfg.warmup_iters);
  const double frac = static_cast<double>(t - cfg.warmup_iters) /
                      static_cast<double>(cfg.total_iters - cfg.warmup_iters);
  return cfg.base_lr * std::pow(1.0 - frac, cfg.power);
}

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <class T>
struct AdamWState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  long step = 0;
};

/// A parameter tensor as seen by the optimizer.
template <class T>
struct ParamRef {
  Matrix<T>* value;
  const Matrix<T>* grad;
  bool is_bias;
};

/// Decoupled-decay Adam. Biases are not decayed.
template <class T>
void adamw_step(std::span<const ParamRef<T>> params, AdamWState<T>& st, const AdamWHyper& h) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.value->rows(), p.value->cols());
      st.v.emplace_back(p.value->rows(), p.value->cols());
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adamw_step: optimizer state size mismatch");
  ++st.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& val = *params[i].value;
    const auto& g = *params[i].grad;
    require_same_shape(val, g, "adamw_step");
    require_same_shape(val, st.m[i], "adamw_step state");
    auto vd = val.data();
    auto gd = g.data();
    auto md = st.m[i].data();
    auto sd = st.v[i].data();
    const double wd = params[i].is_bias ? 0.0 : h.weight_decay;
    for (std::size_t j = 0; j < vd.size(); ++j) {
      const double gj = gd[j];
      const double mj = h.beta1 * md[j] + (1.0 - h.beta1) * gj;
      const double sj = h.beta2 * sd[j] + (1.0 - h.beta2) * gj * gj;
      md[j] = static_cast<T>(mj);
      sd[j] = static_cast<T>(sj);
      const double mhat = mj / bc1, vhat = sj / bc2;
      const double theta = vd[j];
      vd[j] = static_cast<T>(theta - h.lr * (mhat / (std::sqrt(vhat) + h.eps) + wd * theta));
    }
  }
}

// ---------------------------------------------------------------------------
// Model

template <class T>
struct Model {
  EncoderParams<T> encoder;
  OffsetHeadParams<T> head;
};

template <class M, class Fn>
void for_each_model_param(M& m, Fn&& fn) {
  fn(std::string("encoder.w1"), m.encoder.w1, false);
  fn(std::string("encoder.b1"), m.encoder.b1, true);
  fn(std::string("encoder.w2"), m.encoder.w2, false);
  fn(std::string("encoder.b2"), m.encoder.b2, true);
  for_each_param(m.head, fn);
}

template <class T>
Model<T> zeros_like(const Model<T>& m) {
  Model<T> z;
  z.encoder = zeros_like(m.encoder);
  z.head.w = Matrix<T>(m.head.w.rows(), m.head.w.cols());
  z.head.mlp_cls = zeros_like(m.head.mlp_cls);
  z.head.mlp_pos = zeros_like(m.head.mlp_pos);
  z.head.temperature = m.head.temperature;
  z.head.flags = m.head.flags;
  return z;
}

template <class T>
Model<T> init_model(const TrainConfig& cfg, std::size_t input_channels, std::size_t classes) {
  Model<T> m;
  m.encoder = init_encoder<T>(input_channels, static_cast<std::size_t>(cfg.encoder_hidden),
                              static_cast<std::size_t>(cfg.channels), cfg.seed);
  m.head = init_params<T>(classes, static_cast<std::size_t>(cfg.channels),
                          static_cast<std::size_t>(cfg.hidden), cfg.seed, cfg.flags);
  m.head.temperature = static_cast<T>(cfg.temperature);
  return m;
}

template <class T>
Matrix<T> model_logits(const Model<T>& m, const Matrix<T>& x) {
  return offset_forward(m.head, encoder_forward(m.encoder, x).y).m;
}

/// Loss of one sample and its gradient w.r.t. every model parameter.
template <class T>
T sample_loss_and_grad(const Model<T>& m, const Matrix<T>& x, std::span<const int> labels,
                       Model<T>& grads) {
  auto enc = encoder_forward(m.encoder, x);
  auto tr = offset_forward(m.head, enc.y);
  auto ce = cross_entropy(tr.m, labels);
  auto hg = offset_backward(m.head, tr, ce.dlogits);
  auto eg = encoder_backward(m.encoder, enc.cache, hg.e);
  grads.encoder = std::move(eg.grads);
  grads.head.w = std::move(hg.w);
  grads.head.mlp_cls = std::move(hg.mlp_cls);
  grads.head.mlp_pos = std::move(hg.mlp_pos);
  return ce.loss;
}

struct LogRecord {
  int iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> val_miou;

  nlohmann::json to_json() const {
    nlohmann::json j{{"iter", iter}, {"lr", lr}, {"loss", loss}};
    if (val_miou) j["val_miou"] = *val_miou;
    return j;
  }
};

template <class T>
MetricsReport evaluate(const Model<T>& m, const Dataset& ds, std::span<const std::size_t> indices) {
  if (m.head.classes() != ds.classes)
    throw ConfigError("evaluate: model has " + std::to_string(m.head.classes()) +
                      " classes, dataset " + std::to_string(ds.classes));
  if (m.encoder.in_dim() != ds.channels)
    throw ConfigError("evaluate: encoder expects " + std::to_string(m.encoder.in_dim()) +
                      " input channels, dataset has " + std::to_string(ds.channels));
  std::vector<ConfusionAccumulator> parts(indices.size(), ConfusionAccumulator(ds.classes));
  parallel_for(indices.size(), [&](std::size_t i) {
    const auto& s = ds.samples.at(indices[i]);
    const auto logits = model_logits(m, s.features.template cast<T>());
    parts[i].add(s.labels, decode_argmax(logits));
  });
  ConfusionAccumulator total(ds.classes);
  for (const auto& p : parts) total.merge(p);
  return total.report();
}

template <class T>
MetricsReport evaluate(const Model<T>& m, const Dataset& ds, const std::string& split) {
  const auto idx = ds.split(split);
  return evaluate(m, ds, std::span<const std::size_t>(idx));
}

template <class T>
struct TrainResult {
  Model<T> model;
  std::vector<LogRecord> log;
};

/// End-to-end AdamW training of encoder and head on the dataset's train split.
template <class T = Narrow>
TrainResult<T> train(const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.train_index.empty()) throw ConfigError("train: empty training split");
  TrainResult<T> res{init_model<T>(cfg, ds.channels, ds.classes), {}};
  Model<T>& model = res.model;
  Rng rng = make_stream(cfg.seed, "train");
  std::uniform_int_distribution<std::size_t> pick(0, ds.train_index.size() - 1);
  AdamWState<T> opt;
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<Model<T>> sample_grads(bs);
  std::vector<T> losses(bs);
  std::vector<Matrix<T>> inputs(bs);

  for (int it = 0; it < cfg.total_iters; ++it) {
    const double lr = poly_lr(it, cfg);
    std::vector<std::size_t> batch(bs);
    for (auto& b : batch) b = ds.train_index[pick(rng)];
    try {
      parallel_for(bs, [&](std::size_t i) {
        const auto& s = ds.samples[batch[i]];
        losses[i] = sample_loss_and_grad(model, s.features.template cast<T>(), s.labels, sample_grads[i]);
      });
    } catch (const NumericError& e) {
      throw NumericError(std::string("train: ") + e.what() + " at iteration " + std::to_string(it) +
                         " (lr " + std::to_string(lr) + ")");
    }
    Model<T> g = std::move(sample_grads[0]);
    double loss = losses[0];
    for (std::size_t i = 1; i < bs; ++i) {
      loss += losses[i];
      g.encoder += sample_grads[i].encoder;
      g.head.w += sample_grads[i].head.w;
      g.head.mlp_cls += sample_grads[i].head.mlp_cls;
      g.head.mlp_pos += sample_grads[i].head.mlp_pos;
    }
    loss /= static_cast<double>(bs);
    if (!std::isfinite(loss))
      throw NumericError("train: non-finite loss at iteration " + std::to_string(it) +
                         " (lr " + std::to_string(lr) + ")");
    const T scale = T(1) / static_cast<T>(bs);
    std::vector<ParamRef<T>> refs;
    std::vector<Matrix<T>*> grad_ptrs;
    for_each_model_param(g, [&](const std::string&, Matrix<T>& gm, bool) {
      gm *= scale;
      grad_ptrs.push_back(&gm);
    });
    std::size_t slot = 0;
    for_each_model_param(model, [&](const std::string&, Matrix<T>& pm, bool bias) {
      refs.push_back({&pm, grad_ptrs[slot++], bias});
    });
    adamw_step<T>(refs, opt, {lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});

    LogRecord rec{it, lr, loss, std::nullopt};
    const bool last = it + 1 == cfg.total_iters;
    if ((cfg.eval_interval > 0 && (it + 1) % cfg.eval_interval == 0) || (last && !ds.val_index.empty()))
      rec.val_miou = evaluate(model, ds, std::span<const std::size_t>(ds.val_index)).miou;
    res.log.push_back(rec);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint container ("OSC1"): magic, version u32, tensor count u32, then
// per tensor: name length u32, name bytes, rows u32, cols u32, float32 data.
// Sidecar JSON records dimensions, flags, temperature and seed.

inline constexpr char kCheckpointMagic[4] = {'O', 'S', 'C', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::size_t classes = 0;
  std::size_t channels = 0;
  std::size_t hidden = 0;
  std::size_t input_channels = 0;
  std::size_t encoder_hidden = 0;
  HeadFlags flags;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"format", "OSC1"},
            {"version", kCheckpointVersion},
            {"K", classes},
            {"C", channels},
            {"C_h", hidden},
            {"C0", input_channels},
            {"C_e", encoder_hidden},
            {"class_offset", flags.class_offset},
            {"feature_offset", flags.feature_offset},
            {"temperature", temperature},
            {"seed", seed}};
  }
};

template <class T>
CheckpointMeta checkpoint_meta(const Model<T>& m, std::uint64_t seed) {
  return {m.head.classes(),     m.head.channels(),      m.head.hidden(),
          m.encoder.in_dim(),   m.encoder.hidden_dim(), m.head.flags,
          static_cast<double>(m.head.temperature), seed};
}

template <class T>
Bytes encode_checkpoint(const Model<T>& m) {
  ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  std::uint32_t n = 0;
  for_each_model_param(m, [&](const std::string&, const Matrix<T>&, bool) { ++n; });
  w.u32(n);
  for_each_model_param(m, [&](const std::string& name, const Matrix<T>& t, bool) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (T v : t.data()) w.f32(static_cast<float>(v));
  });
  return w.take();
}

template <class T>
void write_checkpoint(const Model<T>& m, std::uint64_t seed, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(m));
  write_text(sidecar_path(path), checkpoint_meta(m, seed).to_json().dump(2) + "\n");
}

/// Decodes tensors into a model whose shapes come from `meta`.
inline Model<float> decode_checkpoint(const Bytes& bytes, const CheckpointMeta& meta) {
  Model<float> m;
  m.encoder = EncoderParams<float>(meta.input_channels, meta.encoder_hidden, meta.channels);
  m.head.w = Matrix<float>(meta.classes, meta.channels);
  m.head.mlp_cls = MLPParams<float>(meta.channels, meta.hidden, meta.channels);
  m.head.mlp_pos = MLPParams<float>(meta.channels, meta.hidden, meta.channels);
  m.head.flags = meta.flags;
  m.head.temperature = static_cast<float>(meta.temperature);

  ByteReader r(bytes);
  if (r.raw(4, "magic") != std::string_view(kCheckpointMagic, 4)) r.fail("bad magic, expected OSC1", 0);
  const std::size_t ver_at = r.offset();
  if (auto v = r.u32("format version"); v != kCheckpointVersion)
    r.fail("unsupported checkpoint version " + std::to_string(v), ver_at);
  std::uint32_t expected = 0;
  for_each_model_param(m, [&](const std::string&, Matrix<float>&, bool) { ++expected; });
  const std::size_t count_at = r.offset();
  if (auto n = r.u32("tensor count"); n != expected)
    r.fail("checkpoint holds " + std::to_string(n) + " tensors, expected " + std::to_string(expected),
           count_at);
  for_each_model_param(m, [&](const std::string& name, Matrix<float>& t, bool) {
    const std::size_t at = r.offset();
    const auto len = r.u32("tensor name length");
    const std::string got = r.raw(len, "tensor name");
    if (got != name) r.fail("tensor '" + got + "' where '" + name + "' was expected", at);
    const std::size_t shape_at = r.offset();
    const std::size_t rows = r.u32("rows"), cols = r.u32("cols");
    if (rows != t.rows() || cols != t.cols())
      r.fail("tensor " + name + " is " + std::to_string(rows) + "x" + std::to_string(cols) +
                 ", manifest implies " + t.shape(),
             shape_at);
    r.need(t.size() * 4, "tensor data");
    for (auto& v : t.data()) v = r.f32("tensor value");
  });
  r.expect_end();
  return m;
}

inline CheckpointMeta checkpoint_meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.classes = j.at("K");
  m.channels = j.at("C");
  m.hidden = j.at("C_h");
  m.input_channels = j.at("C0");
  m.encoder_hidden = j.at("C_e");
  m.flags.class_offset = j.at("class_offset");
  m.flags.feature_offset = j.at("feature_offset");
  m.temperature = j.at("temperature");
  m.seed = j.at("seed");
  return m;
}

struct LoadedCheckpoint {
  Model<float> model;
  CheckpointMeta meta;
};

inline LoadedCheckpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side)) throw IoError("checkpoint manifest not found: " + side.string());
  CheckpointMeta meta;
  try {
    meta = checkpoint_meta_from_json(nlohmann::json::parse(read_text(side)));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint manifest " + side.string() + ": " + e.what(), 0);
  }
  return {decode_checkpoint(read_file(path), meta), meta};
}

}  // namespace offseg
