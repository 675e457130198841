#pragma once

// The offseg command line: gen-data, train, eval, mine, heatmap, grad-check
// and params. run() is the whole program minus main so tests can drive it
// in-process. Exit codes: 0 success, 1 runtime failure, 2 usage or input error.

#include <openssl/evp.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "offseg/binary_io.hpp"
#include "offseg/data.hpp"
#include "offseg/error.hpp"
#include "offseg/gradcheck.hpp"
#include "offseg/heads.hpp"
#include "offseg/heatmap.hpp"
#include "offseg/mining.hpp"
#include "offseg/train.hpp"

namespace offseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2 };

inline std::string sha256_hex(const Bytes& b) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(b.data(), b.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

inline std::string file_sha256(const fs::path& p) { return sha256_hex(read_file(p)); }

/// manifest.json of one output directory: how it was produced and what it holds.
struct RunManifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // path → sha256
  std::map<std::string, std::string> outputs;  // file name inside --out → sha256

  json to_json() const {
    json in = json::object(), out = json::object();
    for (const auto& [p, h] : inputs) in[p] = {{"sha256", h}};
    for (const auto& [p, h] : outputs) out[p] = {{"sha256", h}};
    return {{"command", command}, {"config", config}, {"seed", seed}, {"inputs", in}, {"outputs", out}};
  }

  void add_input(const fs::path& p) { inputs[p.string()] = file_sha256(p); }

  void write(const fs::path& dir, const std::vector<std::string>& files) {
    for (const auto& f : files) outputs[f] = file_sha256(dir / f);
    write_text(dir / "manifest.json", to_json().dump(2) + "\n");
  }
};

namespace detail {

inline bool on_off(const std::string& v) { return v == "on"; }

/// Accepts a container file or the directory that holds it.
inline fs::path resolve_file(const std::string& arg, const char* default_name) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= default_name;
  return p;
}

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create output directory " + p.string());
}

struct GenOpts {
  std::string task;
  SeparableConfig sep;
  ContextTaskConfig ctx;
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainOpts {
  std::string data, out, head = "offset", co, fo;
  std::vector<int> channels{32};
  std::optional<int> hidden, warmup;
  TrainConfig cfg;
};

struct EvalOpts {
  std::string checkpoint, data, split = "val";
};

struct MineOpts {
  std::string data, checkpoint, out;
  int cls = 0;
  std::size_t n = 20;
  std::uint64_t seed = 0;
  double rtol = kStudyRtol;
};

struct HeatmapOpts {
  std::string csv, out;
  std::size_t cell = 8;
};

struct GradOpts {
  std::string scope = "all";
  std::uint64_t seed = 0;
  int seeds = 1;
  bool inject_fault = false;
};

struct ParamsOpts {
  std::uint64_t k = 150, c = 256;
  std::optional<std::uint64_t> hidden;
  std::string co = "on", fo = "on";
};

inline int cmd_gen_data(const GenOpts& o, std::ostream& out) {
  Dataset ds;
  if (o.task == "separable") {
    o.sep.validate();
    ds = gen_separable(o.sep, o.seed);
  } else {
    o.ctx.validate();
    ds = gen_context(o.ctx, o.seed);
  }
  const fs::path dir(o.out);
  ensure_dir(dir);
  write_dataset(ds, dir / "dataset.osg");
  RunManifest m{"gen-data", {{"task", o.task}, {"params", dataset_manifest(ds).at("config")}}, o.seed, {}, {}};
  if (ds.static_ceiling) m.config["static_ceiling"] = *ds.static_ceiling;
  m.write(dir, {"dataset.osg", "dataset.osg.json"});
  out << m.to_json().dump(2) << "\n";
  return kOk;
}

inline json train_config_json(const TrainConfig& c, const std::string& head) {
  return {{"head", head},
          {"class_offset", c.flags.class_offset},
          {"feature_offset", c.flags.feature_offset},
          {"channels", c.channels},
          {"hidden", c.hidden},
          {"encoder_hidden", c.encoder_hidden},
          {"temperature", c.temperature},
          {"iters", c.total_iters},
          {"warmup", c.warmup_iters},
          {"base_lr", c.base_lr},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"power", c.power},
          {"batch", c.batch_size},
          {"eval_interval", c.eval_interval}};
}

/// One training run into `dir`; returns the final metrics document.
inline json train_one(const Dataset& ds, const fs::path& data_path, const TrainConfig& cfg,
                      const std::string& head, const fs::path& dir) {
  ensure_dir(dir);
  auto res = train(ds, cfg);
  write_checkpoint(res.model, cfg.seed, dir / "checkpoint.osc");
  std::string log;
  for (const auto& r : res.log) log += r.to_json().dump() + "\n";
  write_text(dir / "log.ndjson", log);
  const std::string split = ds.val_index.empty() ? "train" : "val";
  json metrics = evaluate(res.model, ds, split).to_json();
  metrics["split"] = split;
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  RunManifest m{"train", train_config_json(cfg, head), cfg.seed, {}, {}};
  m.add_input(data_path);
  m.add_input(sidecar_path(data_path));
  m.write(dir, {"checkpoint.osc", "checkpoint.osc.json", "log.ndjson", "metrics.json"});
  return metrics;
}

inline int cmd_train(TrainOpts o, std::ostream& out) {
  if (o.head == "baseline" && (on_off(o.co) || on_off(o.fo)))
    throw ConfigError("--head baseline has no offset branches; drop --co/--fo or use --head offset");
  TrainConfig cfg = o.cfg;
  cfg.flags = o.head == "baseline" ? HeadFlags{false, false}
                                   : HeadFlags{o.co.empty() || on_off(o.co), o.fo.empty() || on_off(o.fo)};
  cfg.warmup_iters = o.warmup.value_or(std::min(100, cfg.total_iters / 10));
  const fs::path data_path = resolve_file(o.data, "dataset.osg");
  const Dataset ds = read_dataset(data_path);
  const fs::path dir(o.out);
  ensure_dir(dir);
  for (int c : o.channels) {
    cfg.channels = c;
    cfg.hidden = o.hidden.value_or(std::max(1, c / 2));
    cfg.validate();
  }

  if (o.channels.size() == 1) {
    cfg.channels = o.channels[0];
    cfg.hidden = o.hidden.value_or(std::max(1, cfg.channels / 2));
    out << train_one(ds, data_path, cfg, o.head, dir).dump(2) << "\n";
    return kOk;
  }
  // Channel sweep: one sub-run per width plus a summary.
  json sweep = json::array();
  std::vector<std::string> files{"sweep.json"};
  for (int c : o.channels) {
    cfg.channels = c;
    cfg.hidden = o.hidden.value_or(std::max(1, c / 2));
    const std::string sub = "C" + std::to_string(c);
    const json metrics = train_one(ds, data_path, cfg, o.head, dir / sub);
    sweep.push_back({{"channels", c}, {"hidden", cfg.hidden}, {"miou", metrics.at("miou")},
                     {"pixel_accuracy", metrics.at("pixel_accuracy")}, {"run", sub}});
    files.push_back(sub + "/manifest.json");
  }
  write_text(dir / "sweep.json", sweep.dump(2) + "\n");
  json conf = train_config_json(cfg, o.head);
  conf["channels"] = o.channels;
  conf.erase("hidden");
  if (o.hidden) conf["hidden"] = *o.hidden;
  RunManifest m{"train", conf, cfg.seed, {}, {}};
  m.add_input(data_path);
  m.add_input(sidecar_path(data_path));
  m.write(dir, files);
  out << sweep.dump(2) << "\n";
  return kOk;
}

inline int cmd_eval(const EvalOpts& o, std::ostream& out) {
  const auto ck = read_checkpoint(resolve_file(o.checkpoint, "checkpoint.osc"));
  const Dataset ds = read_dataset(resolve_file(o.data, "dataset.osg"));
  json j = evaluate(ck.model, ds, o.split).to_json();
  j["split"] = o.split;
  out << j.dump(2) << "\n";
  return kOk;
}

inline int cmd_mine(const MineOpts& o, std::ostream& out) {
  const fs::path data_path = resolve_file(o.data, "dataset.osg");
  const fs::path ck_path = resolve_file(o.checkpoint, "checkpoint.osc");
  const Dataset ds = read_dataset(data_path);
  const auto ck = read_checkpoint(ck_path);
  if (ck.meta.input_channels != ds.channels)
    throw ConfigError("mine: checkpoint encoder expects " + std::to_string(ck.meta.input_channels) +
                      " input channels, dataset has " + std::to_string(ds.channels));
  if (o.cls < 0 || static_cast<std::size_t>(o.cls) >= ds.classes)
    throw ConfigError("mine: --class " + std::to_string(o.cls) + " outside [0, " + std::to_string(ds.classes) + ")");
  const auto images = select_images(ds, o.cls, o.n, o.seed);
  const auto st = prototype_similarity_study(ds, ck.model.encoder, o.cls, std::span<const std::size_t>(images), o.rtol);

  const fs::path dir(o.out);
  ensure_dir(dir);
  std::vector<std::string> ids;
  for (auto i : st.image_ids) ids.push_back(std::to_string(i));
  write_text(dir / "similarity.csv", similarity_csv(ids, st.similarity));
  json stats = st.stats.to_json();
  stats["image_ids"] = st.image_ids;
  stats["context"] = st.tags;
  stats["skipped"] = st.skipped;
  write_text(dir / "stats.json", stats.dump(2) + "\n");
  RunManifest m{"mine", {{"class", o.cls}, {"n", o.n}, {"rtol", o.rtol}}, o.seed, {}, {}};
  m.add_input(data_path);
  m.add_input(ck_path);
  m.write(dir, {"similarity.csv", "stats.json"});
  out << stats.dump(2) << "\n";
  return kOk;
}

inline int cmd_heatmap(const HeatmapOpts& o, std::ostream& out) {
  const fs::path csv(o.csv);
  const auto lm = parse_similarity_csv(read_text(csv));
  const fs::path dir(o.out);
  ensure_dir(dir);
  write_file(dir / "heatmap.ppm", render_heatmap_ppm(lm.values, o.cell));
  RunManifest m{"heatmap", {{"cell", o.cell}}, 0, {}, {}};
  m.add_input(csv);
  m.write(dir, {"heatmap.ppm"});
  out << "wrote " << (dir / "heatmap.ppm").string() << " (" << lm.ids.size() << "x" << lm.ids.size() << " cells)\n";
  return kOk;
}

inline int cmd_grad_check(const GradOpts& o, std::ostream& out) {
  std::vector<std::string> scopes;
  if (o.scope == "all")
    scopes = grad_check_scopes();
  else
    scopes = {o.scope};
  bool all_ok = true;
  for (const auto& s : scopes) {
    double worst = 0.0;
    std::optional<ScopeResult> first_fail;
    for (int i = 0; i < o.seeds; ++i) {
      auto r = check_scope(s, o.seed + static_cast<std::uint64_t>(i), o.inject_fault);
      worst = std::max(worst, r.report.max_rel_error);
      if (!r.report.passed && !first_fail) first_fail = r;
    }
    out << std::left << std::setw(8) << s;
    if (!first_fail) {
      out << "PASS  seeds=" << o.seeds << " max_rel_error=" << worst << "\n";
      continue;
    }
    all_ok = false;
    const auto& r = *first_fail;
    out << "FAIL  seed=" << r.seed << " coordinate=" << r.coordinate << " (flat " << r.report.worst_index << ")";
    if (r.report.non_finite)
      out << " non-finite f\n";
    else
      out << " rel_error=" << r.report.max_rel_error << " analytic=" << r.report.analytic_at_worst
          << " numeric=" << r.report.numeric_at_worst << "\n";
  }
  return all_ok ? kOk : kRuntime;
}

inline int cmd_params(const ParamsOpts& o, std::ostream& out) {
  if (o.k < 2 || o.c < 1) throw ConfigError("params: need --k >= 2 and --channels >= 1");
  const std::uint64_t h = o.hidden.value_or(std::max<std::uint64_t>(1, o.c / 2));
  if (h < 1) throw ConfigError("params: --hidden must be >= 1");
  const HeadFlags flags{on_off(o.co), on_off(o.fo)};
  const std::uint64_t total = param_count(o.k, o.c, h, flags);
  const std::uint64_t base = param_count(o.k, o.c, h, {false, false});
  const std::uint64_t branch = param_count(o.k, o.c, h, {true, false}) - base;
  json j{{"K", o.k},
         {"C", o.c},
         {"C_h", h},
         {"class_offset", flags.class_offset},
         {"feature_offset", flags.feature_offset},
         {"class_embeddings", base},
         {"class_offset_branch", flags.class_offset ? branch : 0},
         {"feature_offset_branch", flags.feature_offset ? branch : 0},
         {"overhead", total - base},
         {"total", total}};
  out << j.dump(2) << "\n";
  return kOk;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  using namespace detail;
  CLI::App app{"Offset-learning segmentation heads on synthetic tasks", "offseg"};
  app.require_subcommand(1);
  const auto on_off_check = CLI::IsMember({"on", "off"});

  GenOpts gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  g->add_option("task", gen.task, "separable or context")->required()->check(CLI::IsMember({"separable", "context"}));
  g->add_option("--seed", gen.seed, "Seed for every random draw");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option_function<int>("--classes", [&](int v) { gen.sep.classes = gen.ctx.classes = v; }, "K");
  g->add_option_function<int>("--channels", [&](int v) { gen.sep.channels = gen.ctx.channels = v; },
                              "Raw feature width C0");
  g->add_option_function<double>("--sigma", [&](double v) { gen.sep.sigma = gen.ctx.sigma = v; }, "Feature noise");
  g->add_option_function<int>("--height", [&](int v) { gen.sep.height = gen.ctx.height = v; });
  g->add_option_function<int>("--width", [&](int v) { gen.sep.width = gen.ctx.width = v; });
  g->add_option_function<int>("--samples", [&](int v) { gen.sep.samples = gen.ctx.samples = v; });
  g->add_option("--codebook", gen.ctx.codebook, "Codebook size V (context)");
  g->add_option("--p-amb", gen.ctx.p_ambiguous, "Fraction of ambiguous codewords (context)");
  g->add_option("--cue-width", gen.ctx.cue_width, "Cue strip width in columns (context)");
  g->add_option("--prior-z1", gen.ctx.prior_z1, "Probability of context z=1 (context)");

  TrainOpts tr;
  auto* t = app.add_subcommand("train", "Train encoder and head end-to-end");
  t->add_option("--data", tr.data, "Dataset file or directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--head", tr.head, "baseline or offset")->check(CLI::IsMember({"baseline", "offset"}));
  t->add_option("--co", tr.co, "Class offset branch on|off")->check(on_off_check);
  t->add_option("--fo", tr.fo, "Feature offset branch on|off")->check(on_off_check);
  t->add_option("--channels", tr.channels, "Feature width C; several values run a sweep")->delimiter(',');
  t->add_option("--hidden", tr.hidden, "Offset MLP width C_h (default C/2)");
  t->add_option("--encoder-hidden", tr.cfg.encoder_hidden, "Encoder hidden width");
  t->add_option("--iters", tr.cfg.total_iters, "Training iterations");
  t->add_option("--warmup", tr.warmup, "Warmup iterations (default min(100, iters/10))");
  t->add_option("--lr", tr.cfg.base_lr, "Base learning rate");
  t->add_option("--weight-decay", tr.cfg.weight_decay);
  t->add_option("--batch", tr.cfg.batch_size);
  t->add_option("--power", tr.cfg.power, "Poly decay power");
  t->add_option("--temperature", tr.cfg.temperature, "Scale applied to A_c before both softmaxes");
  t->add_option("--eval-interval", tr.cfg.eval_interval, "Validate every N iterations (0: only at the end)");
  t->add_option("--seed", tr.cfg.seed);

  EvalOpts ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint; prints metrics JSON");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--split", ev.split, "train, val or all")->check(CLI::IsMember({"train", "val", "all"}));

  MineOpts mi;
  auto* m = app.add_subcommand("mine", "Prototype similarity study for one class");
  m->add_option("--data", mi.data)->required();
  m->add_option("--checkpoint", mi.checkpoint)->required();
  m->add_option("--class", mi.cls)->required();
  m->add_option("--n", mi.n, "Images to mine, split evenly across contexts when tagged");
  m->add_option("--seed", mi.seed, "Image selection seed");
  m->add_option("--rtol", mi.rtol, "Relative singular-value cutoff of the pseudoinverse");
  m->add_option("--out", mi.out)->required();

  HeatmapOpts hm;
  auto* h = app.add_subcommand("heatmap", "Render a similarity CSV as a PPM heatmap");
  h->add_option("--similarity-csv", hm.csv)->required();
  h->add_option("--out", hm.out)->required();
  h->add_option("--cell", hm.cell, "Pixels per cell edge")->check(CLI::PositiveNumber);

  GradOpts gc;
  auto* c = app.add_subcommand("grad-check", "Finite-difference gradient checks");
  c->add_option("--scope", gc.scope)->check(CLI::IsMember({"mlp", "softmax", "head", "loss", "all"}));
  c->add_option("--seed", gc.seed, "First seed");
  c->add_option("--seeds", gc.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  c->add_flag("--inject-fault", gc.inject_fault, "Scale analytic gradients by 1.01 (must fail)");

  ParamsOpts pa;
  auto* p = app.add_subcommand("params", "Parameter count breakdown of the head");
  p->add_option("--k", pa.k);
  p->add_option("--channels", pa.c);
  p->add_option("--hidden", pa.hidden, "Offset MLP width C_h (default C/2)");
  p->add_option("--co", pa.co)->check(on_off_check);
  p->add_option("--fo", pa.fo)->check(on_off_check);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (m->parsed()) return cmd_mine(mi, out);
    if (h->parsed()) return cmd_heatmap(hm, out);
    if (c->parsed()) return cmd_grad_check(gc, out);
    if (p->parsed()) return cmd_params(pa, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const IoError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const ShapeError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace offseg::cli
