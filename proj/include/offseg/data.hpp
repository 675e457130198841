#pragma once

// Synthetic segmentation tasks, the per-pixel toy encoder, and the "OSG1"
// dataset container.
//
// The context task places a cue strip (the leftmost columns) whose codeword
// encodes a binary context z. Ambiguous codewords elsewhere in the image map
// to different classes depending on z, so any classifier that only sees one
// pixel is capped at static_ceiling().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "offseg/binary_io.hpp"
#include "offseg/diff.hpp"
#include "offseg/linalg.hpp"
#include "offseg/metrics.hpp"
#include "offseg/rng.hpp"

namespace offseg {

inline constexpr std::uint16_t kFileIgnore = 65535;
inline constexpr char kDatasetMagic[4] = {'O', 'S', 'G', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct SegSample {
  std::size_t height = 0;
  std::size_t width = 0;
  Matrix<float> features;   // (height·width) × C0, row-major pixels
  std::vector<int> labels;  // class index or kIgnore
  std::uint8_t context = 0;

  std::size_t pixels() const { return height * width; }
  friend bool operator==(const SegSample&, const SegSample&) = default;
};

struct SeparableConfig {
  int classes = 6;
  int channels = 16;  // C0
  double sigma = 0.05;
  int height = 16;
  int width = 16;
  int samples = 200;

  void validate() const {
    if (classes < 2) throw ConfigError("separable: need at least 2 classes");
    if (channels < 1 || height < 1 || width < 1 || samples < 1)
      throw ConfigError("separable: dimensions and sample count must be positive");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("separable: sigma must be >= 0");
  }
  friend bool operator==(const SeparableConfig&, const SeparableConfig&) = default;
};

struct ContextTaskConfig {
  int classes = 6;      // K
  int codebook = 12;    // V
  int channels = 16;    // C0
  double p_ambiguous = 0.5;
  double sigma = 0.05;
  int cue_width = 1;
  int height = 16;
  int width = 16;
  int samples = 1000;
  double prior_z1 = 0.5;  // P(z = 1)

  int ambiguous_count() const { return static_cast<int>(std::lround(p_ambiguous * codebook)); }
  int unambiguous_count() const { return codebook - ambiguous_count(); }

  /// Number of classes reachable only through ambiguous codewords.
  int ambiguous_classes() const {
    const int amb = ambiguous_count();
    if (amb == 0) return 0;
    if (unambiguous_count() == 0) return classes;
    return std::clamp(static_cast<int>(std::lround(classes * p_ambiguous)), 2, classes - 1);
  }

  void validate() const {
    if (classes < 2) throw ConfigError("context: need at least 2 classes");
    if (codebook < classes)
      throw ConfigError("context: codebook size V=" + std::to_string(codebook) +
                        " smaller than K=" + std::to_string(classes));
    if (!(p_ambiguous >= 0.0 && p_ambiguous <= 1.0))
      throw ConfigError("context: p_amb must lie in [0, 1]");
    const double amb = p_ambiguous * codebook;
    if (std::abs(amb - std::round(amb)) > 1e-9)
      throw ConfigError("context: p_amb·V = " + std::to_string(amb) + " is not an integer");
    if (ambiguous_count() > 0 && unambiguous_count() > 0 && classes < 3)
      throw ConfigError("context: mixing ambiguous and unambiguous codewords needs K >= 3");
    if (channels < 1 || height < 1 || width < 1 || samples < 1)
      throw ConfigError("context: dimensions and sample count must be positive");
    if (cue_width < 1 || cue_width >= width)
      throw ConfigError("context: cue strip width must be in [1, width)");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("context: sigma must be >= 0");
    if (!(prior_z1 >= 0.0 && prior_z1 <= 1.0))
      throw ConfigError("context: prior of z=1 must lie in [0, 1]");
  }

  /// g(v, z): class of codeword v under context z.
  int label_of(int v, int z) const {
    const int n_un = unambiguous_count();
    if (v < n_un) return v % (classes - ambiguous_classes());
    const int ka = ambiguous_classes();
    return (classes - ka) + ((v - n_un) + z) % ka;
  }

  bool is_ambiguous(int v) const { return v >= unambiguous_count(); }

  friend bool operator==(const ContextTaskConfig&, const ContextTaskConfig&) = default;
};

/// One cell of the (codeword, z, label) joint distribution over non-cue pixels.
struct JointEntry {
  int codeword = 0;
  int z = 0;
  int label = 0;
  double mass = 0.0;
  friend bool operator==(const JointEntry&, const JointEntry&) = default;
};

enum class TaskKind { separable, context };

inline const char* to_string(TaskKind t) { return t == TaskKind::separable ? "separable" : "context"; }

struct Dataset {
  TaskKind task = TaskKind::separable;
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::uint64_t seed = 0;
  std::vector<SegSample> samples;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> val_index;
  std::variant<SeparableConfig, ContextTaskConfig> config;
  std::vector<JointEntry> joint;
  std::optional<double> static_ceiling;

  std::vector<std::size_t> split(const std::string& name) const {
    if (name == "train") return train_index;
    if (name == "val") return val_index;
    if (name == "all") {
      std::vector<std::size_t> all(samples.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      return all;
    }
    throw ConfigError("unknown split '" + name + "' (expected train, val or all)");
  }
};

// ---------------------------------------------------------------------------
// Generation

namespace detail {

/// Draws `count` codewords with normal(0, 1) entries whose pairwise distance is
/// at least 6σ. Redraws a bounded number of times before rejecting.
inline Matrix<double> draw_codebook(std::size_t count, std::size_t dim, double sigma, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Matrix<double> c(count, dim);
    for (auto& v : c.data()) v = nd(rng);
    double min_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < count; ++a)
      for (std::size_t b = a + 1; b < count; ++b) {
        double d2 = 0;
        for (std::size_t k = 0; k < dim; ++k) d2 += (c(a, k) - c(b, k)) * (c(a, k) - c(b, k));
        min_d2 = std::min(min_d2, d2);
      }
    if (std::sqrt(min_d2) >= 6.0 * sigma) return c;
  }
  throw ConfigError("cannot place " + std::to_string(count) + " codewords in " +
                    std::to_string(dim) + " dimensions at pairwise distance >= 6·sigma = " +
                    std::to_string(6.0 * sigma));
}

inline void split_80_20(Dataset& ds, Rng& rng) {
  std::vector<std::size_t> idx(ds.samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(0.8 * idx.size()));
  ds.train_index.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.val_index.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(ds.train_index.begin(), ds.train_index.end());
  std::sort(ds.val_index.begin(), ds.val_index.end());
}

}  // namespace detail

/// Class centers of gen_separable for (config, seed).
inline Matrix<double> separable_centers(const SeparableConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_stream(seed, "data");
  return detail::draw_codebook(static_cast<std::size_t>(cfg.classes),
                               static_cast<std::size_t>(cfg.channels), cfg.sigma, rng);
}

/// K Gaussian clusters, one per class; every pixel draws its class uniformly.
inline Dataset gen_separable(const SeparableConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_stream(seed, "data");
  const auto k = static_cast<std::size_t>(cfg.classes), c0 = static_cast<std::size_t>(cfg.channels);
  Matrix<double> centers = detail::draw_codebook(k, c0, cfg.sigma, rng);

  Dataset ds;
  ds.task = TaskKind::separable;
  ds.classes = k;
  ds.height = static_cast<std::size_t>(cfg.height);
  ds.width = static_cast<std::size_t>(cfg.width);
  ds.channels = c0;
  ds.seed = seed;
  ds.config = cfg;
  std::uniform_int_distribution<int> cls(0, cfg.classes - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int s = 0; s < cfg.samples; ++s) {
    SegSample smp{ds.height, ds.width, Matrix<float>(ds.height * ds.width, c0), {}, 0};
    smp.labels.resize(smp.pixels());
    for (std::size_t p = 0; p < smp.pixels(); ++p) {
      const int y = cls(rng);
      smp.labels[p] = y;
      for (std::size_t d = 0; d < c0; ++d)
        smp.features(p, d) = static_cast<float>(centers(static_cast<std::size_t>(y), d) +
                                                cfg.sigma * noise(rng));
    }
    ds.samples.push_back(std::move(smp));
  }
  detail::split_80_20(ds, rng);
  return ds;
}

/// Codebook of gen_context: rows 0..V-1 are the image codewords, rows V and
/// V+1 the cue codewords for z = 0 and z = 1.
inline Matrix<double> context_codebook(const ContextTaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_stream(seed, "data");
  return detail::draw_codebook(static_cast<std::size_t>(cfg.codebook) + 2,
                               static_cast<std::size_t>(cfg.channels), cfg.sigma, rng);
}

/// Joint distribution of (codeword, z, label) over non-cue pixels.
inline std::vector<JointEntry> context_joint(const ContextTaskConfig& cfg) {
  cfg.validate();
  std::vector<JointEntry> joint;
  const double pv = 1.0 / cfg.codebook;
  for (int v = 0; v < cfg.codebook; ++v)
    for (int z = 0; z < 2; ++z)
      joint.push_back({v, z, cfg.label_of(v, z), pv * (z ? cfg.prior_z1 : 1.0 - cfg.prior_z1)});
  return joint;
}

/// Bayes-optimal accuracy on non-cue pixels of any classifier that sees only
/// one pixel's noiseless feature: per codeword, the heaviest label wins.
inline double static_ceiling(const std::vector<JointEntry>& joint, std::size_t classes) {
  int max_v = -1;
  for (const auto& e : joint) max_v = std::max(max_v, e.codeword);
  std::vector<double> mass(static_cast<std::size_t>(max_v + 1) * classes, 0.0);
  for (const auto& e : joint)
    mass[static_cast<std::size_t>(e.codeword) * classes + static_cast<std::size_t>(e.label)] += e.mass;
  double acc = 0.0;
  for (int v = 0; v <= max_v; ++v) {
    auto first = mass.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(v) * classes);
    acc += *std::max_element(first, first + static_cast<std::ptrdiff_t>(classes));
  }
  return acc;
}

/// Same quantity enumerated per codeword: each codeword contributes the
/// heaviest label's P(z) mass, averaged over the uniform codeword draw. Sums
/// of context priors stay exact, so the default task gives 0.75 bit for bit.
inline double static_ceiling(const ContextTaskConfig& cfg) {
  cfg.validate();
  const double prior[2] = {1.0 - cfg.prior_z1, cfg.prior_z1};
  double total = 0.0;
  for (int v = 0; v < cfg.codebook; ++v) {
    const int l0 = cfg.label_of(v, 0), l1 = cfg.label_of(v, 1);
    total += l0 == l1 ? prior[0] + prior[1] : std::max(prior[0], prior[1]);
  }
  return total / cfg.codebook;
}

struct CeilingEstimate {
  double accuracy = 0.0;
  double standard_error = 0.0;
};

/// Monte-Carlo ceiling for σ > 0: the classifier is the exact Bayes posterior
/// over labels given one noisy pixel feature.
inline CeilingEstimate static_ceiling_mc(const ContextTaskConfig& cfg, const Matrix<double>& codebook,
                                         std::size_t draws, std::uint64_t seed) {
  cfg.validate();
  if (cfg.sigma == 0.0) return {static_ceiling(cfg), 0.0};
  const auto joint = context_joint(cfg);
  const auto c0 = static_cast<std::size_t>(cfg.channels);
  Rng rng = make_stream(seed, "ceiling");
  std::uniform_int_distribution<int> pick_v(0, cfg.codebook - 1);
  std::bernoulli_distribution pick_z(cfg.prior_z1);
  std::normal_distribution<double> noise(0.0, cfg.sigma);
  std::vector<double> x(c0), logp(joint.size()), label_post(static_cast<std::size_t>(cfg.classes));
  std::size_t hits = 0;
  for (std::size_t n = 0; n < draws; ++n) {
    const int v = pick_v(rng);
    const int z = pick_z(rng) ? 1 : 0;
    for (std::size_t d = 0; d < c0; ++d) x[d] = codebook(static_cast<std::size_t>(v), d) + noise(rng);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < joint.size(); ++e) {
      double d2 = 0;
      for (std::size_t d = 0; d < c0; ++d) {
        const double t = x[d] - codebook(static_cast<std::size_t>(joint[e].codeword), d);
        d2 += t * t;
      }
      logp[e] = joint[e].mass > 0 ? std::log(joint[e].mass) - d2 / (2 * cfg.sigma * cfg.sigma)
                                  : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, logp[e]);
    }
    std::fill(label_post.begin(), label_post.end(), 0.0);
    for (std::size_t e = 0; e < joint.size(); ++e)
      label_post[static_cast<std::size_t>(joint[e].label)] += std::exp(logp[e] - mx);
    const auto best = std::max_element(label_post.begin(), label_post.end()) - label_post.begin();
    if (best == cfg.label_of(v, z)) ++hits;
  }
  const double p = static_cast<double>(hits) / static_cast<double>(draws);
  return {p, std::sqrt(p * (1 - p) / static_cast<double>(draws))};
}

inline Dataset gen_context(const ContextTaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_stream(seed, "data");
  const auto c0 = static_cast<std::size_t>(cfg.channels);
  const auto V = static_cast<std::size_t>(cfg.codebook);
  Matrix<double> book = detail::draw_codebook(V + 2, c0, cfg.sigma, rng);

  Dataset ds;
  ds.task = TaskKind::context;
  ds.classes = static_cast<std::size_t>(cfg.classes);
  ds.height = static_cast<std::size_t>(cfg.height);
  ds.width = static_cast<std::size_t>(cfg.width);
  ds.channels = c0;
  ds.seed = seed;
  ds.config = cfg;
  ds.joint = context_joint(cfg);
  ds.static_ceiling = static_ceiling(cfg);

  std::bernoulli_distribution pick_z(cfg.prior_z1);
  std::uniform_int_distribution<int> pick_v(0, cfg.codebook - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int s = 0; s < cfg.samples; ++s) {
    const int z = pick_z(rng) ? 1 : 0;
    SegSample smp{ds.height, ds.width, Matrix<float>(ds.height * ds.width, c0), {},
                  static_cast<std::uint8_t>(z)};
    smp.labels.resize(smp.pixels());
    for (std::size_t r = 0; r < ds.height; ++r)
      for (std::size_t col = 0; col < ds.width; ++col) {
        const std::size_t p = r * ds.width + col;
        if (col < static_cast<std::size_t>(cfg.cue_width)) {
          for (std::size_t d = 0; d < c0; ++d)
            smp.features(p, d) = static_cast<float>(book(V + static_cast<std::size_t>(z), d));
          smp.labels[p] = kIgnore;
          continue;
        }
        const int v = pick_v(rng);
        smp.labels[p] = cfg.label_of(v, z);
        for (std::size_t d = 0; d < c0; ++d)
          smp.features(p, d) =
              static_cast<float>(book(static_cast<std::size_t>(v), d) + cfg.sigma * noise(rng));
      }
    ds.samples.push_back(std::move(smp));
  }
  detail::split_80_20(ds, rng);
  return ds;
}

// ---------------------------------------------------------------------------
// Encoder: a per-pixel MLP C0 → C_e → C standing in for backbone + decoder.

template <class T>
using EncoderParams = MLPParams<T>;

template <class T>
EncoderParams<T> init_encoder(std::size_t c0, std::size_t c_e, std::size_t c, std::uint64_t seed) {
  if (c0 < 1 || c_e < 1 || c < 1) throw ConfigError("init_encoder: dimensions must be positive");
  Rng rng = make_stream(seed, "init.encoder");
  EncoderParams<T> p(c0, c_e, c);
  fill_normal(p.w1, rng, 1.0 / std::sqrt(static_cast<double>(c0)));
  fill_normal(p.w2, rng, 1.0 / std::sqrt(static_cast<double>(c_e)));
  return p;
}

/// Row-wise encoder; pixels never interact.
template <class T>
MlpOutput<T> encoder_forward(const EncoderParams<T>& p, const Matrix<T>& x) {
  return mlp_forward(p, x);
}

template <class T>
MlpBackward<T> encoder_backward(const EncoderParams<T>& p, const MlpCache<T>& cache,
                                const Matrix<T>& de) {
  return mlp_backward(p, cache, de);
}

// ---------------------------------------------------------------------------
// Container I/O

namespace detail {

inline nlohmann::json config_to_json(const std::variant<SeparableConfig, ContextTaskConfig>& v) {
  if (const auto* s = std::get_if<SeparableConfig>(&v))
    return {{"classes", s->classes}, {"channels", s->channels}, {"sigma", s->sigma},
            {"height", s->height},   {"width", s->width},       {"samples", s->samples}};
  const auto& c = std::get<ContextTaskConfig>(v);
  return {{"classes", c.classes},   {"codebook", c.codebook},   {"channels", c.channels},
          {"p_ambiguous", c.p_ambiguous}, {"sigma", c.sigma},   {"cue_width", c.cue_width},
          {"height", c.height},     {"width", c.width},         {"samples", c.samples},
          {"prior_z1", c.prior_z1}};
}

inline SeparableConfig separable_from_json(const nlohmann::json& j) {
  SeparableConfig s;
  s.classes = j.at("classes");
  s.channels = j.at("channels");
  s.sigma = j.at("sigma");
  s.height = j.at("height");
  s.width = j.at("width");
  s.samples = j.at("samples");
  return s;
}

inline ContextTaskConfig context_from_json(const nlohmann::json& j) {
  ContextTaskConfig c;
  c.classes = j.at("classes");
  c.codebook = j.at("codebook");
  c.channels = j.at("channels");
  c.p_ambiguous = j.at("p_ambiguous");
  c.sigma = j.at("sigma");
  c.cue_width = j.at("cue_width");
  c.height = j.at("height");
  c.width = j.at("width");
  c.samples = j.at("samples");
  c.prior_z1 = j.at("prior_z1");
  return c;
}

}  // namespace detail

inline Bytes encode_dataset(const Dataset& ds) {
  ByteWriter w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.height));
  w.u32(static_cast<std::uint32_t>(ds.width));
  w.u32(static_cast<std::uint32_t>(ds.channels));
  w.u32(static_cast<std::uint32_t>(ds.classes));
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  for (const auto& s : ds.samples) {
    if (s.height != ds.height || s.width != ds.width || s.features.cols() != ds.channels ||
        s.features.rows() != s.pixels() || s.labels.size() != s.pixels())
      throw ShapeError("encode_dataset: sample shape disagrees with dataset header");
    w.u8(s.context);
    for (float v : s.features.data()) w.f32(v);
    for (int l : s.labels) {
      if (l != kIgnore && (l < 0 || static_cast<std::size_t>(l) >= ds.classes))
        throw ConfigError("encode_dataset: label " + std::to_string(l) + " outside [0, K)");
      w.u16(l == kIgnore ? kFileIgnore : static_cast<std::uint16_t>(l));
    }
  }
  return w.take();
}

inline nlohmann::json dataset_manifest(const Dataset& ds) {
  nlohmann::json j;
  j["format"] = "OSG1";
  j["version"] = kDatasetVersion;
  j["task"] = to_string(ds.task);
  j["config"] = detail::config_to_json(ds.config);
  j["seed"] = ds.seed;
  j["n_samples"] = ds.samples.size();
  j["classes"] = ds.classes;
  j["split"] = {{"train", ds.train_index}, {"val", ds.val_index}};
  if (ds.task == TaskKind::context) {
    nlohmann::json t = nlohmann::json::array();
    for (const auto& e : ds.joint)
      t.push_back({{"codeword", e.codeword}, {"z", e.z}, {"label", e.label}, {"mass", e.mass}});
    j["joint"] = t;
    if (ds.static_ceiling) j["static_ceiling"] = *ds.static_ceiling;
  }
  return j;
}

/// Parses the binary payload into `ds` (header fields and samples only).
inline void decode_dataset(const Bytes& bytes, Dataset& ds) {
  ByteReader r(bytes);
  const std::string magic = r.raw(4, "magic");
  if (magic != std::string_view(kDatasetMagic, 4)) r.fail("bad magic, expected OSG1", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.u32("format version");
  if (version != kDatasetVersion)
    r.fail("unsupported format version " + std::to_string(version), version_at);
  ds.height = r.u32("H");
  ds.width = r.u32("W_s");
  ds.channels = r.u32("C0");
  ds.classes = r.u32("K");
  const std::size_t n = r.u32("n_samples");
  const std::size_t pixels = ds.height * ds.width;
  const std::size_t per_sample = 1 + pixels * ds.channels * 4 + pixels * 2;
  ds.samples.clear();
  ds.samples.reserve(std::min(n, r.remaining() / per_sample + 1));
  for (std::size_t s = 0; s < n; ++s) {
    SegSample smp{ds.height, ds.width, Matrix<float>(pixels, ds.channels), {}, 0};
    const std::size_t tag_at = r.offset();
    smp.context = r.u8("context tag");
    if (smp.context > 1) r.fail("context tag " + std::to_string(smp.context) + " not in {0,1}", tag_at);
    r.need(pixels * ds.channels * 4, "features");
    for (auto& v : smp.features.data()) v = r.f32("feature");
    smp.labels.resize(pixels);
    for (auto& l : smp.labels) {
      const std::size_t at = r.offset();
      const auto raw = r.u16("label");
      if (raw == kFileIgnore) {
        l = kIgnore;
      } else if (raw >= ds.classes) {
        r.fail("label " + std::to_string(raw) + " outside [0, " + std::to_string(ds.classes) + ")", at);
      } else {
        l = raw;
      }
    }
    ds.samples.push_back(std::move(smp));
  }
  r.expect_end();
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_file(path, encode_dataset(ds));
  write_text(sidecar_path(path), dataset_manifest(ds).dump(2) + "\n");
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  Dataset ds;
  decode_dataset(read_file(path), ds);
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side)) throw IoError("missing dataset manifest " + side.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(side));
    const std::string task = j.at("task");
    if (task == "separable") {
      ds.task = TaskKind::separable;
      ds.config = detail::separable_from_json(j.at("config"));
    } else if (task == "context") {
      ds.task = TaskKind::context;
      ds.config = detail::context_from_json(j.at("config"));
    } else {
      throw ParseError("manifest: unknown task '" + task + "'", 0);
    }
    ds.seed = j.at("seed");
    ds.train_index = j.at("split").at("train").get<std::vector<std::size_t>>();
    ds.val_index = j.at("split").at("val").get<std::vector<std::size_t>>();
    if (j.contains("joint"))
      for (const auto& e : j.at("joint"))
        ds.joint.push_back({e.at("codeword"), e.at("z"), e.at("label"), e.at("mass")});
    if (j.contains("static_ceiling")) ds.static_ceiling = j.at("static_ceiling").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("manifest " + side.string() + ": " + e.what(), 0);
  }
  const std::size_t declared = j.at("n_samples");
  if (declared != ds.samples.size())
    throw ParseError("manifest declares " + std::to_string(declared) + " samples but payload holds " +
                         std::to_string(ds.samples.size()),
                     0);
  if (j.at("classes").get<std::size_t>() != ds.classes)
    throw ParseError("manifest class count disagrees with payload header", 0);
  for (const auto* idx : {&ds.train_index, &ds.val_index})
    for (auto i : *idx)
      if (i >= ds.samples.size())
        throw ParseError("manifest split index " + std::to_string(i) + " out of range", 0);
  return ds;
}

}  // namespace offseg
