#include "sarjepa/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <future>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "sarjepa/checkpoint.hpp"
#include "sarjepa/dataset.hpp"
#include "sarjepa/errors.hpp"
#include "sarjepa/features.hpp"
#include "sarjepa/image.hpp"
#include "sarjepa/rng.hpp"

namespace sarjepa {

namespace fs = std::filesystem;
using nlohmann::json;

std::string git_blob_hash(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("cannot allocate digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 && EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ValidationError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

std::string content_hash(const fs::path& path) {
  if (fs::is_regular_file(path)) return git_blob_hash(read_file(path));
  if (!fs::is_directory(path)) throw ValidationError("no such input: " + path.string());
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file())
      lines.push_back(fs::relative(e.path(), path).generic_string() + " " + git_blob_hash(read_file(e.path())));
  std::sort(lines.begin(), lines.end());
  std::string listing;
  for (const auto& l : lines) listing += l + "\n";
  return git_blob_hash(listing);
}

std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string RunManifest::input_hash() const {
  std::string listing;
  for (const auto& [name, h] : inputs.items()) listing += name + " " + h.get<std::string>() + "\n";
  listing += "config " + git_blob_hash(config.dump()) + "\n";
  return git_blob_hash(listing);
}

json RunManifest::to_json() const {
  return json{{"command", command},       {"argv", argv},           {"config", config},
              {"inputs", inputs},         {"input_hash", input_hash()}, {"seed", seed},
              {"artifacts", artifacts},   {"started_at", started_at}, {"finished_at", finished_at},
              {"status", status}};
}

void RunManifest::write(const fs::path& dir) const {
  fs::create_directories(dir);
  std::ofstream os(dir / "run_manifest.json");
  if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
  os << to_json().dump(2) << "\n";
}

ModelConfig model_preset(const std::string& name) {
  ModelConfig m;
  if (name == "desk") return m;
  if (name == "small") {
    m.embed_dim = 96;
    m.encoder_depth = 3;
    m.heads = 4;
    return m;
  }
  if (name == "tiny") {
    m.embed_dim = 64;
    m.encoder_depth = 2;
    m.predictor_depth = 1;
    m.heads = 2;
    return m;
  }
  throw ValidationError("unknown model_size '" + name + "' (tiny, small, desk)");
}

std::vector<SweepPoint> sweep_grid(const json& axes, const PretrainConfig& base) {
  require(axes.is_object() && !axes.empty(), "sweep needs at least one axis");
  for (const auto& [k, v] : axes.items()) {
    require(k == "dataset_fraction" || k == "model_size" || k == "epochs", "unknown sweep axis '" + k + "'");
    require(v.is_array() && !v.empty(), "sweep axis '" + k + "' must be a non-empty list");
  }
  std::vector<double> fr{1.0};
  std::vector<std::string> sizes{"config"};
  std::vector<int> ep{base.epochs};
  try {
    if (axes.contains("dataset_fraction")) fr = axes["dataset_fraction"].get<std::vector<double>>();
    if (axes.contains("model_size")) sizes = axes["model_size"].get<std::vector<std::string>>();
    if (axes.contains("epochs")) ep = axes["epochs"].get<std::vector<int>>();
  } catch (const json::exception&) {
    throw ValidationError("sweep axis has the wrong value type");
  }
  std::vector<SweepPoint> out;
  for (double f : fr)
    for (const auto& s : sizes)
      for (int e : ep) out.push_back({f, s, e});
  return out;
}

namespace {

// ---------------------------------------------------------------- config

const std::set<std::string> kPretrainKeys = {
    "base_lr",      "weight_decay", "beta1",         "beta2",         "betas",          "batch_size",
    "epochs",       "warmup_epochs", "feature",      "scales",        "kernel_kind",    "epsilon",
    "mask_mode",    "mask_ratio",   "windows_per_image", "window_side", "crop_scale_min", "crop_scale_max",
    "hflip_prob",   "contrast_min", "contrast_max",  "seed",          "checkpoint_every", "paper_faithful"};
const std::set<std::string> kModelKeys = {"patch", "embed_dim", "encoder_depth", "predictor_depth",
                                          "heads", "mlp_ratio", "log_input",     "paper_faithful"};
const std::set<std::string> kProbeKeys = {"lr",     "weight_decay", "beta1",     "beta2",
                                          "batch_size", "epochs",   "warmup_epochs", "warmup_lr",
                                          "zero_init",  "mode",     "shots",     "repeats",
                                          "probe_per_class", "seed"};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  require(j.is_object(), "config " + path + " must be a JSON object");
  return j;
}

void check_keys(const json& j, std::initializer_list<const std::set<std::string>*> sets,
                std::initializer_list<const char*> extra = {}) {
  for (const auto& [k, v] : j.items()) {
    bool ok = is_scene_key(k);
    for (const auto* s : sets) ok = ok || s->count(k) > 0;
    for (const char* e : extra) ok = ok || k == e;
    if (!ok) throw ValidationError("unknown config key '" + k + "'");
  }
}

template <typename V>
V get_or(const json& j, const char* key, V fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config key '") + key + "' has the wrong type");
  }
}

ModelConfig model_from_json(const json& j, ModelConfig base = {}) {
  json sub = json::object();
  for (const auto& k : kModelKeys)
    if (j.contains(k)) sub[k] = j[k];
  try {
    return model_config_from_json(sub, base);
  } catch (const json::exception&) {
    throw ValidationError("model config key has the wrong type");
  }
}

template <typename T>
std::vector<T> parse_csv(const std::string& s, const char* what) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_same_v<T, int>) {
        out.push_back(std::stoi(item, &used));
      } else {
        out.push_back(static_cast<T>(std::stod(item, &used)));
      }
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError(std::string("bad value '") + item + "' in " + what);
    }
  }
  require(!out.empty(), std::string(what) + " must not be empty");
  return out;
}

ProbeConfig probe_from_json(const json& j, ProbeConfig c = {}) {
  c.lr = get_or(j, "lr", c.lr);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
  c.beta1 = get_or(j, "beta1", c.beta1);
  c.beta2 = get_or(j, "beta2", c.beta2);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.epochs = get_or(j, "epochs", c.epochs);
  c.warmup_epochs = get_or(j, "warmup_epochs", c.warmup_epochs);
  c.warmup_lr = get_or(j, "warmup_lr", c.warmup_lr);
  c.zero_init = get_or(j, "zero_init", c.zero_init);
  if (j.contains("mode")) c.mode = parse_probe_mode(get_or<std::string>(j, "mode", ""));
  c.seed = get_or(j, "seed", c.seed);
  return c;
}

json to_json(const ProbeConfig& c) {
  return json{{"mode", probe_mode_name(c.mode)}, {"lr", c.lr},
              {"weight_decay", c.weight_decay},  {"beta1", c.beta1},
              {"beta2", c.beta2},                {"batch_size", c.batch_size},
              {"epochs", c.epochs},              {"warmup_epochs", c.warmup_epochs},
              {"warmup_lr", c.warmup_lr},        {"zero_init", c.zero_init},
              {"seed", c.seed}};
}

// ---------------------------------------------------------------- flags

struct Flags {
  std::string config, out, data, input, checkpoint, split;
  std::uint64_t seed = 0;
  std::string feature, mask, mode, scales, shots;
  double epsilon = 0, mask_ratio = 0;
  int repeats = 0, patch = 8;
  bool paper_faithful = false, parallel = false, random_init = false;
  CLI::App* sub = nullptr;  // the parsed subcommand

  bool given(const std::string& name) const {
    const CLI::Option* o = sub ? sub->get_option_no_throw(name) : nullptr;
    return o && o->count() > 0;
  }
};

void apply_pretrain_flags(const Flags& f, PretrainConfig& c) {
  if (f.given("--seed")) c.seed = f.seed;
  if (f.given("--feature")) c.feature = parse_feature_kind(f.feature);
  if (f.given("--scales")) c.bank.scales = parse_csv<int>(f.scales, "--scales");
  if (f.given("--epsilon")) c.bank.epsilon = f.epsilon;
  if (f.given("--mask")) {
    require(f.mask == "local" || f.mask == "global", "--mask must be local or global");
    c.mask_mode = f.mask == "local" ? MaskMode::Local : MaskMode::Global;
  }
  if (f.given("--mask-ratio")) c.mask_ratio = f.mask_ratio;
  if (f.paper_faithful) c.paper_faithful = true;
}

std::uint64_t run_seed(const Flags& f, const json& cfg) {
  return f.given("--seed") ? f.seed : get_or<std::uint64_t>(cfg, "seed", 0);
}

struct Run {
  RunManifest m;
  fs::path out;

  Run(std::string command, const std::vector<std::string>& argv, const fs::path& out_dir) : out(out_dir) {
    m.command = std::move(command);
    m.argv = argv;
    m.started_at = utc_timestamp();
  }
  void input(const std::string& name, const fs::path& p) {
    if (!p.empty()) m.inputs[name] = content_hash(p);
  }
  void artifact(const fs::path& p) { m.artifacts.push_back(p.string()); }
  void finish(const std::string& status = "ok") {
    m.finished_at = utc_timestamp();
    m.status = status;
    m.write(out);
  }
};

void require_out(const Flags& f) { require(!f.out.empty(), "--out is required"); }

// ---------------------------------------------------------------- subcommands

void cmd_gen(const Flags& f, Run& run) {
  const json cfg = load_config(f.config);
  check_keys(cfg, {}, {"count", "split", "format", "unlabeled", "seed"});
  const SceneSpec scene = scene_spec_from_json(cfg);
  const int count = get_or(cfg, "count", 1000);
  const std::string split = f.given("--split") ? f.split : get_or<std::string>(cfg, "split", "train");
  const std::string format = get_or<std::string>(cfg, "format", "f32");
  require(format == "f32" || format == "png", "format must be f32 or png");
  const bool unlabeled = get_or(cfg, "unlabeled", false);
  const std::uint64_t seed = run_seed(f, cfg);
  run.m.seed = seed;
  run.input("config", f.config);
  run.m.config = to_json(scene);
  run.m.config.update(json{{"count", count}, {"split", split}, {"format", format}, {"unlabeled", unlabeled}});
  const LabeledDataset data = synthetic_pretrain_corpus(scene, count, seed);
  write_dataset(f.out, split, data, "." + format, unlabeled);
  run.artifact(fs::path(f.out) / split);
}

void cmd_features(const Flags& f, Run& run) {
  require(!f.input.empty(), "--input is required");
  const json cfg = load_config(f.config);
  check_keys(cfg, {}, {"feature", "scales", "epsilon", "kernel_kind", "patch"});
  PretrainConfig pc = pretrain_config_from_json(cfg);
  apply_pretrain_flags(f, pc);
  pc.bank.validate();
  const int patch = get_or(cfg, "patch", f.patch);
  const SarImage img = read_image(f.input);
  const TargetFeature tf = compute_target(img, pc.feature, pc.bank, patch);
  std::string kernel = "none";
  if (pc.feature == FeatureKind::GrLin) kernel = "linear";
  if (pc.feature == FeatureKind::GrGau) kernel = "gaussian";
  if (pc.feature == FeatureKind::SarHog) kernel = pc.bank.kind == KernelKind::Linear ? "linear" : "gaussian";
  const json manifest{{"channels", tf.num_channels()},
                      {"height", tf.channels.front().rows()},
                      {"width", tf.channels.front().cols()},
                      {"cell", tf.cell},
                      {"scales", pc.bank.scales},
                      {"kernel_kind", kernel},
                      {"epsilon", pc.bank.epsilon},
                      {"feature", feature_kind_name(pc.feature)}};
  fs::create_directories(f.out);
  {
    std::ofstream os(fs::path(f.out) / "features.f32", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write features");
    for (const auto& ch : tf.channels) {
      const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> v = ch.cast<float>();
      write_le_floats(os, v.data(), static_cast<std::size_t>(v.size()));
    }
  }
  std::ofstream(fs::path(f.out) / "features.json") << manifest.dump(2) << "\n";
  run.input("image", f.input);
  run.input("config", f.config);
  run.m.config = manifest;
  run.artifact(fs::path(f.out) / "features.f32");
  run.artifact(fs::path(f.out) / "features.json");
}

struct PretrainSetup {
  PretrainConfig cfg;
  ModelConfig model;
  SceneSpec scene;
  int corpus_size = 2000;
};

PretrainSetup pretrain_setup(const json& cfg, const Flags* f) {
  PretrainSetup s;
  s.cfg = pretrain_config_from_json(cfg);
  if (f) apply_pretrain_flags(*f, s.cfg);
  s.model = model_from_json(cfg);
  if (s.cfg.paper_faithful) s.model.paper_faithful = true;
  s.scene = scene_spec_from_json(cfg);
  s.corpus_size = get_or(cfg, "corpus_size", s.corpus_size);
  s.cfg.validate();
  return s;
}

json setup_json(const PretrainSetup& s) {
  json j = to_json(s.cfg.resolved());
  j.update(to_json(s.model.resolved()));
  j.update(to_json(s.scene));
  j["corpus_size"] = s.corpus_size;
  return j;
}

std::vector<SarImage> pretrain_images(const PretrainSetup& s, const Flags& f, Run& run) {
  if (!f.data.empty()) {
    run.input("data", f.data);
    return read_dataset(f.data, f.split.empty() ? "train" : f.split).images;
  }
  return synthetic_pretrain_corpus(s.scene, s.corpus_size, s.cfg.seed).images;
}

void cmd_pretrain(const Flags& f, Run& run) {
  require_out(f);
  const json cfg = load_config(f.config);
  check_keys(cfg, {&kPretrainKeys, &kModelKeys}, {"corpus_size"});
  const PretrainSetup s = pretrain_setup(cfg, &f);
  run.input("config", f.config);
  run.m.seed = s.cfg.seed;
  run.m.config = setup_json(s);
  const auto images = pretrain_images(s, f, run);
  PretrainOptions opts;
  opts.out_dir = f.out;
  opts.on_epoch = [](const EpochRecord& r) {
    std::fprintf(stderr, "epoch %d loss %.6f lr %.3g pred_variance %.4g%s\n", r.epoch, r.loss, r.lr,
                 r.pred_variance, r.collapse_flag ? " (collapse?)" : "");
  };
  run.artifact(fs::path(f.out) / "runlog.csv");
  pretrain(images, s.cfg, s.model, opts);
  run.artifact(fs::path(f.out) / "checkpoint");
}

struct ProbeSetup {
  ProbeConfig cfg;
  std::vector<int> shots{10};
  int repeats = 10;
  int per_class = 100;
  SceneSpec scene;
};

ProbeSetup probe_setup(const json& cfg, const Flags* f) {
  ProbeSetup s;
  s.cfg = probe_from_json(cfg);
  s.shots = get_or(cfg, "shots", s.shots);
  s.repeats = get_or(cfg, "repeats", s.repeats);
  s.per_class = get_or(cfg, "probe_per_class", s.per_class);
  s.scene = scene_spec_from_json(cfg);
  if (f) {
    if (f->given("--seed")) s.cfg.seed = f->seed;
    if (f->given("--mode")) s.cfg.mode = parse_probe_mode(f->mode);
    if (f->given("--shots")) s.shots = parse_csv<int>(f->shots, "--shots");
    if (f->given("--repeats")) s.repeats = f->repeats;
  }
  s.cfg.validate();
  require(s.repeats >= 1, "repeats must be >= 1");
  return s;
}

json setup_json(const ProbeSetup& s) {
  json j = to_json(s.cfg);
  j.update(to_json(s.scene));
  j["shots"] = s.shots;
  j["repeats"] = s.repeats;
  j["probe_per_class"] = s.per_class;
  return j;
}

void write_summary(const fs::path& path, const FewShotTable& t) {
  std::ofstream os(path);
  os << "shots,mean,std\n";
  char buf[96];
  for (const auto& s : t.summary) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", s.shots, s.mean, s.std);
    os << buf;
  }
}

ModelState<float> probe_state(const Flags& f, const json& cfg, Run& run) {
  if (!f.checkpoint.empty()) {
    run.input("checkpoint", f.checkpoint);
    Checkpoint ck = load_checkpoint(f.checkpoint);
    if (!f.random_init) return ck.state;
    return ModelState<float>::initialize(ck.state.config, derive_seed(run.m.seed, 0, stream::init));
  }
  require(f.random_init, "--checkpoint is required unless --random-init is given");
  const PretrainSetup s = pretrain_setup(cfg, nullptr);
  const int size = s.scene.image_size;
  return ModelState<float>::initialize(resolve_model_config(s.model, s.cfg, size),
                                       derive_seed(run.m.seed, 0, stream::init));
}

LabeledDataset probe_data(const ProbeSetup& s, const Flags& f, Run& run) {
  if (!f.data.empty()) {
    run.input("data", f.data);
    return read_dataset(f.data, f.split.empty() ? "test" : f.split);
  }
  return synthetic_probe_set(s.scene, s.per_class, s.cfg.seed);
}

void cmd_probe(const Flags& f, Run& run) {
  require_out(f);
  const json cfg = load_config(f.config);
  check_keys(cfg, {&kProbeKeys, &kModelKeys});
  const ProbeSetup s = probe_setup(cfg, &f);
  run.m.seed = s.cfg.seed;
  run.input("config", f.config);
  run.m.config = setup_json(s);
  run.m.config["random_init"] = f.random_init;
  const ModelState<float> state = probe_state(f, cfg, run);
  const LabeledDataset data = probe_data(s, f, run);
  const FewShotTable table = evaluate_few_shot(state, data, s.shots, s.repeats, s.cfg);
  fs::create_directories(f.out);
  table.write_csv(fs::path(f.out) / "metrics.csv");
  write_summary(fs::path(f.out) / "summary.csv", table);
  for (const auto& r : table.summary)
    std::fprintf(stderr, "shots %d accuracy %.4f +- %.4f\n", r.shots, r.mean, r.std);
  run.artifact(fs::path(f.out) / "metrics.csv");
  run.artifact(fs::path(f.out) / "summary.csv");
}

void cmd_attn(const Flags& f, Run& run) {
  require_out(f);
  require(!f.checkpoint.empty(), "--checkpoint is required");
  const json cfg = load_config(f.config);
  check_keys(cfg, {}, {"num_images", "seed"});
  const int count = get_or(cfg, "num_images", 16);
  require(count >= 1, "num_images must be >= 1");
  const std::uint64_t seed = run_seed(f, cfg);
  run.m.seed = seed;
  run.input("config", f.config);
  run.input("checkpoint", f.checkpoint);
  const SceneSpec scene = scene_spec_from_json(cfg);
  run.m.config = to_json(scene);
  run.m.config["num_images"] = count;
  const Checkpoint ck = load_checkpoint(f.checkpoint);
  std::vector<SarImage> images;
  if (!f.data.empty()) {
    run.input("data", f.data);
    images = read_dataset(f.data, f.split.empty() ? "test" : f.split).images;
  } else {
    images = synthetic_probe_set(scene, (count + kNumShapeClasses - 1) / kNumShapeClasses, seed).images;
  }
  require(!images.empty(), "no images for attention analysis");
  if (static_cast<int>(images.size()) > count) images.resize(static_cast<std::size_t>(count));
  fs::create_directories(f.out);
  write_attention_csv(fs::path(f.out) / "attn.csv", attention_distance(ck.state, images));
  run.artifact(fs::path(f.out) / "attn.csv");
}

SweepRow run_sweep_point(int index, const SweepPoint& p, const PretrainSetup& base, const ProbeSetup& probe_s,
                         const fs::path& out, const std::vector<std::string>& argv) {
  SweepRow row;
  row.point = index;
  row.axes = p;
  row.shots = probe_s.shots.front();
  char name[32];
  std::snprintf(name, sizeof name, "point_%03d", index);
  const fs::path dir = out / name;
  Run run("sweep-point", argv, dir);
  try {
    PretrainSetup s = base;
    s.cfg.epochs = p.epochs;
    if (p.model_size != "config") {
      const ModelConfig preset = model_preset(p.model_size);
      s.model.embed_dim = preset.embed_dim;
      s.model.encoder_depth = preset.encoder_depth;
      s.model.predictor_depth = preset.predictor_depth;
      s.model.heads = preset.heads;
      s.model.mlp_ratio = preset.mlp_ratio;
    }
    run.m.seed = s.cfg.seed;
    run.m.config = setup_json(s);
    run.m.config["dataset_fraction"] = p.dataset_fraction;
    run.m.config["model_size"] = p.model_size;
    run.m.config["probe"] = setup_json(probe_s);
    const auto corpus =
        take_fraction(synthetic_pretrain_corpus(s.scene, s.corpus_size, s.cfg.seed), p.dataset_fraction);
    row.corpus_size = corpus.size();
    PretrainOptions opts;
    opts.out_dir = dir;
    const PretrainResult res = pretrain(corpus.images, s.cfg, s.model, opts);
    const LabeledDataset data = synthetic_probe_set(probe_s.scene, probe_s.per_class, probe_s.cfg.seed);
    const FewShotTable table = evaluate_few_shot(res.state, data, probe_s.shots, probe_s.repeats, probe_s.cfg);
    table.write_csv(dir / "metrics.csv");
    row.accuracy_mean = table.summary.front().mean;
    row.accuracy_std = table.summary.front().std;
    row.status = "ok";
    run.artifact(dir / "runlog.csv");
    run.artifact(dir / "checkpoint");
    run.artifact(dir / "metrics.csv");
  } catch (const DivergenceError& e) {
    row.status = "diverged";
    row.message = e.what();
  } catch (const std::exception& e) {
    row.status = "failed";
    row.message = e.what();
  }
  run.finish(row.status);
  return row;
}

std::string csv_field(std::string s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c == '\n' ? ' ' : c);
  return out + "\"";
}

void cmd_sweep(const Flags& f, Run& run) {
  require_out(f);
  const json cfg = load_config(f.config);
  for (const auto& [k, v] : cfg.items())
    require(k == "axes" || k == "pretrain" || k == "probe" || k == "scene" || k == "seed",
            "unknown config key '" + k + "'");
  require(cfg.contains("axes"), "sweep config needs an 'axes' object");
  json pre = cfg.value("pretrain", json::object()), pro = cfg.value("probe", json::object());
  const json scene = cfg.value("scene", json::object());
  require(pre.is_object() && pro.is_object() && scene.is_object(), "sweep sections must be objects");
  check_keys(pre, {&kPretrainKeys, &kModelKeys}, {"corpus_size"});
  check_keys(pro, {&kProbeKeys});
  for (const auto& [k, v] : scene.items()) {
    require(is_scene_key(k), "unknown scene key '" + k + "'");
    pre[k] = v;
    pro[k] = v;
  }
  const std::uint64_t seed = run_seed(f, cfg);
  pre["seed"] = seed;
  pro["seed"] = seed;
  PretrainSetup base = pretrain_setup(pre, &f);
  const ProbeSetup probe_s = probe_setup(pro, &f);
  require(probe_s.shots.size() == 1, "sweep probes a single shot count");
  const auto grid = sweep_grid(cfg["axes"], base.cfg);
  run.m.seed = seed;
  run.input("config", f.config);
  run.m.config = cfg;
  run.m.config["seed"] = seed;

  std::vector<SweepRow> rows(grid.size());
  if (f.parallel) {
    const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
    for (std::size_t lo = 0; lo < grid.size(); lo += workers) {
      std::vector<std::future<SweepRow>> jobs;
      for (std::size_t i = lo; i < std::min(grid.size(), lo + workers); ++i)
        jobs.push_back(std::async(std::launch::async, run_sweep_point, static_cast<int>(i), grid[i], base, probe_s,
                                  fs::path(f.out), run.m.argv));
      for (std::size_t i = 0; i < jobs.size(); ++i) rows[lo + i] = jobs[i].get();
    }
  } else {
    for (std::size_t i = 0; i < grid.size(); ++i)
      rows[i] = run_sweep_point(static_cast<int>(i), grid[i], base, probe_s, f.out, run.m.argv);
  }
  std::ofstream os(fs::path(f.out) / "sweep.csv");
  os << "point,dataset_fraction,model_size,epochs,corpus_size,shots,accuracy_mean,accuracy_std,status,message\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%s,%d,%zu,%d,%.17g,%.17g,", r.point, r.axes.dataset_fraction,
                  r.axes.model_size.c_str(), r.axes.epochs, r.corpus_size, r.shots, r.accuracy_mean,
                  r.accuracy_std);
    os << buf << r.status << "," << csv_field(r.message) << "\n";
    if (r.status != "ok") std::fprintf(stderr, "point %d %s: %s\n", r.point, r.status.c_str(), r.message.c_str());
  }
  run.artifact(fs::path(f.out) / "sweep.csv");
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Masked SAR feature prediction: data generation, targets, pretraining and few-shot evaluation",
               "sarjepa"};
  app.require_subcommand(1, 1);
  Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON config file (flags override it)");
    sub->add_option("--out", f.out, "Output directory");
    sub->add_option("--seed", f.seed, "Run seed");
  };
  auto feature_flags = [&](CLI::App* sub) {
    sub->add_option("--feature", f.feature, "Target feature")
                        ->check(CLI::IsMember({"pixel", "lpf", "hog", "sarhog", "grlin", "grgau"}));
    sub->add_option("--scales", f.scales, "Kernel half-sizes, comma separated");
    sub->add_option("--epsilon", f.epsilon, "Offset added before ratios");
  };
  auto probe_flags = [&](CLI::App* sub) {
    sub->add_option("--shots", f.shots, "Shots per class, comma separated");
    sub->add_option("--repeats", f.repeats, "Random splits per shot count");
    sub->add_option("--mode", f.mode, "Probe mode")->check(CLI::IsMember({"linear", "finetune"}));
  };
  std::vector<CLI::App*> subs;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic speckled dataset");
  common(gen);
  gen->add_option("--split", f.split, "Split folder name");
  subs.push_back(gen);

  auto* features = app.add_subcommand("features", "Compute target features for one image");
  common(features);
  feature_flags(features);
  features->add_option("--input", f.input, "Image (.f32 or .png)");
  features->add_option("--patch", f.patch, "Cell size for histogram features");
  subs.push_back(features);

  auto* pre = app.add_subcommand("pretrain", "Masked feature-prediction pretraining");
  common(pre);
  feature_flags(pre);
  pre->add_option("--mask", f.mask, "Mask mode")->check(CLI::IsMember({"local", "global"}));
  pre->add_option("--mask-ratio", f.mask_ratio, "Masked fraction per window");
  pre->add_flag("--paper-faithful", f.paper_faithful, "Full-length schedule and deep predictor");
  pre->add_option("--data", f.data, "Dataset root (default: synthetic corpus)");
  pre->add_option("--split", f.split, "Split under --data");
  subs.push_back(pre);

  auto* probe_cmd = app.add_subcommand("probe", "Few-shot linear probe or fine-tune");
  common(probe_cmd);
  probe_flags(probe_cmd);
  probe_cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint directory");
  probe_cmd->add_flag("--random-init", f.random_init, "Use a freshly initialized encoder");
  probe_cmd->add_option("--data", f.data, "Labeled dataset root (default: synthetic set)");
  probe_cmd->add_option("--split", f.split, "Split under --data");
  subs.push_back(probe_cmd);

  auto* attn = app.add_subcommand("attn", "Mean attention distance per layer and head");
  common(attn);
  attn->add_option("--checkpoint", f.checkpoint, "Checkpoint directory");
  attn->add_option("--data", f.data, "Dataset root (default: synthetic images)");
  attn->add_option("--split", f.split, "Split under --data");
  subs.push_back(attn);

  auto* sweep = app.add_subcommand("sweep", "Pretrain and probe over a grid of settings");
  common(sweep);
  feature_flags(sweep);
  sweep->add_flag("--parallel", f.parallel, "Run grid points concurrently");
  probe_flags(sweep);
  subs.push_back(sweep);

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  CLI::App* chosen = app.get_subcommands().front();
  f.sub = chosen;
  const std::string name = chosen->get_name();
  std::unique_ptr<Run> run;
  try {
    require(!f.out.empty(), "--out is required");
    run = std::make_unique<Run>(name, args, f.out);
    if (name == "gen") cmd_gen(f, *run);
    if (name == "features") cmd_features(f, *run);
    if (name == "pretrain") cmd_pretrain(f, *run);
    if (name == "probe") cmd_probe(f, *run);
    if (name == "attn") cmd_attn(f, *run);
    if (name == "sweep") cmd_sweep(f, *run);
    run->finish();
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (run) run->finish(std::string("validation error: ") + e.what());
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (run) run->finish(std::string("diverged: ") + e.what());
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (run) {
      try {
        run->finish(std::string("failed: ") + e.what());
      } catch (const std::exception&) {
      }
    }
    return 1;
  }
}

}  // namespace sarjepa
