#include "sarjepa/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "sarjepa/checkpoint.hpp"
#include "sarjepa/errors.hpp"
#include "sarjepa/loss.hpp"
#include "sarjepa/optim.hpp"
#include "sarjepa/rng.hpp"

namespace sarjepa {

namespace fs = std::filesystem;
using nlohmann::json;

PretrainConfig PretrainConfig::resolved() const {
  PretrainConfig c = *this;
  if (c.paper_faithful) {
    c.epochs = 200;
    c.warmup_epochs = 20;
    c.batch_size = 300;
  }
  return c;
}

void PretrainConfig::validate() const {
  require(base_lr > 0.0 && std::isfinite(base_lr), "base_lr must be positive");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must be in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must be in [0, 1)");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 1, "epochs must be >= 1");
  require(warmup_epochs >= 0, "warmup_epochs must be >= 0");
  require(warmup_epochs < epochs, "warmup_epochs must be smaller than epochs");
  require(mask_ratio >= 0.0 && mask_ratio <= 1.0, "mask_ratio must be in [0, 1]");
  require(windows_per_image >= 1, "windows_per_image must be >= 1");
  require(window_side >= 1, "window_side must be >= 1");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  bank.validate();
  aug.validate();
}

namespace {

std::string_view kernel_name(KernelKind k) { return k == KernelKind::Linear ? "linear" : "gaussian"; }

KernelKind parse_kernel(const std::string& s) {
  if (s == "linear") return KernelKind::Linear;
  if (s == "gaussian") return KernelKind::Gaussian;
  throw ValidationError("kernel_kind must be linear or gaussian, got '" + s + "'");
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "local") return MaskMode::Local;
  if (s == "global") return MaskMode::Global;
  throw ValidationError("mask_mode must be local or global, got '" + s + "'");
}

template <typename V>
void read_key(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace

json to_json(const PretrainConfig& c) {
  return json{{"base_lr", c.base_lr},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"warmup_epochs", c.warmup_epochs},
              {"feature", feature_kind_name(c.feature)},
              {"scales", c.bank.scales},
              {"kernel_kind", kernel_name(c.bank.kind)},
              {"epsilon", c.bank.epsilon},
              {"mask_mode", c.mask_mode == MaskMode::Local ? "local" : "global"},
              {"mask_ratio", c.mask_ratio},
              {"windows_per_image", c.windows_per_image},
              {"window_side", c.window_side},
              {"crop_scale_min", c.aug.crop_scale_range.first},
              {"crop_scale_max", c.aug.crop_scale_range.second},
              {"hflip_prob", c.aug.hflip_prob},
              {"contrast_min", c.aug.contrast_range.first},
              {"contrast_max", c.aug.contrast_range.second},
              {"seed", c.seed},
              {"checkpoint_every", c.checkpoint_every},
              {"paper_faithful", c.paper_faithful}};
}

PretrainConfig pretrain_config_from_json(const json& j, PretrainConfig c) {
  require(j.is_object(), "pretrain config must be a JSON object");
  read_key(j, "base_lr", c.base_lr);
  read_key(j, "weight_decay", c.weight_decay);
  read_key(j, "beta1", c.beta1);
  read_key(j, "beta2", c.beta2);
  if (j.contains("betas")) {
    std::vector<double> b;
    read_key(j, "betas", b);
    require(b.size() == 2, "betas must have two entries");
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "epochs", c.epochs);
  read_key(j, "warmup_epochs", c.warmup_epochs);
  if (j.contains("feature")) {
    std::string s;
    read_key(j, "feature", s);
    c.feature = parse_feature_kind(s);
  }
  read_key(j, "scales", c.bank.scales);
  if (j.contains("kernel_kind")) {
    std::string s;
    read_key(j, "kernel_kind", s);
    c.bank.kind = parse_kernel(s);
  }
  read_key(j, "epsilon", c.bank.epsilon);
  if (j.contains("mask_mode")) {
    std::string s;
    read_key(j, "mask_mode", s);
    c.mask_mode = parse_mask_mode(s);
  }
  read_key(j, "mask_ratio", c.mask_ratio);
  read_key(j, "windows_per_image", c.windows_per_image);
  read_key(j, "window_side", c.window_side);
  read_key(j, "crop_scale_min", c.aug.crop_scale_range.first);
  read_key(j, "crop_scale_max", c.aug.crop_scale_range.second);
  read_key(j, "hflip_prob", c.aug.hflip_prob);
  read_key(j, "contrast_min", c.aug.contrast_range.first);
  read_key(j, "contrast_max", c.aug.contrast_range.second);
  read_key(j, "seed", c.seed);
  read_key(j, "checkpoint_every", c.checkpoint_every);
  read_key(j, "paper_faithful", c.paper_faithful);
  return c;
}

void RunLog::write_csv(const fs::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,loss,lr,seconds,pred_variance\n";
  char buf[256];
  for (const auto& r : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.3f,%.9g\n", r.epoch, r.loss, r.lr, r.seconds, r.pred_variance);
    os << buf;
  }
}

Mat<float> patchify(const SarImage& img, int patch, bool log_input) {
  require(patch >= 1, "patch must be >= 1");
  require(img.height() % patch == 0 && img.width() % patch == 0, "image size must be a multiple of the patch size");
  Plane v = img.data;
  if (log_input) {
    const double floor = 1e-3 * img.data.mean();
    v = floor > 0.0 ? Plane(img.data.max(floor).log()) : Plane(Plane::Zero(v.rows(), v.cols()));
  }
  const double mean = v.mean();
  const double var = (v - mean).square().mean();
  const double inv = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;
  const Eigen::Index gr = img.height() / patch, gc = img.width() / patch;
  Mat<float> out(gr * gc, patch * patch);
  for (Eigen::Index r = 0; r < gr; ++r)
    for (Eigen::Index c = 0; c < gc; ++c)
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          out(r * gc + c, y * patch + x) =
              static_cast<float>((v(r * patch + y, c * patch + x) - mean) * inv);
  return out;
}

ModelConfig resolve_model_config(ModelConfig model, const PretrainConfig& cfg, int image_size) {
  model.target_dim = target_dim(cfg.feature, cfg.bank, model.patch);
  model.window = cfg.mask_mode == MaskMode::Global ? image_size / model.patch : cfg.window_side;
  return model.resolved();
}

PreparedSample prepare_sample(const SarImage& img, const PretrainConfig& cfg, const ModelConfig& model,
                              std::uint64_t sample_seed, bool augment_image) {
  const int p = model.patch;
  const SarImage view = augment_image ? augment(img, cfg.aug, sample_seed) : img;
  const PatchTargets pt = patch_targets(compute_target(view, cfg.feature, cfg.bank, p), p);
  require(pt.vectors.cols() == model.target_dim, "target dimension does not match the model");
  const Mat<float> pix = patchify(view, p, model.log_input);
  const PatchGrid grid{pt.grid_rows, pt.grid_cols, p};

  PreparedSample s;
  s.plan = cfg.mask_mode == MaskMode::Global
               ? global_mask_plan(grid, cfg.mask_ratio, sample_seed)
               : mask_plan(sample_local_windows(grid, cfg.windows_per_image, cfg.window_side, sample_seed),
                           cfg.mask_ratio, sample_seed);
  std::size_t total = 0;
  for (const auto& w : s.plan.windows) total += static_cast<std::size_t>(w.size());
  s.pixels.resize(static_cast<Eigen::Index>(total), pix.cols());
  s.targets.resize(static_cast<Eigen::Index>(total), pt.vectors.cols());
  s.masked.reserve(total);
  Eigen::Index row = 0;
  for (const auto& w : s.plan.windows) {
    const auto flags = w.mask_flags();
    for (int i = 0; i < w.size(); ++i, ++row) {
      const int g = w.grid_index(i, grid.cols);
      s.pixels.row(row) = pix.row(g);
      s.targets.row(row) = pt.vectors.row(g).cast<float>();
      s.masked.push_back(flags[static_cast<std::size_t>(i)]);
    }
  }
  return s;
}

Batch make_batch(const std::vector<PreparedSample>& samples) {
  require(!samples.empty(), "empty batch");
  const auto& w0 = samples.front().plan.windows.front();
  Batch b;
  b.windows_per_image = static_cast<int>(samples.front().plan.windows.size());
  b.layout = SeqLayout{w0.rows, w0.cols, 0};
  Eigen::Index rows = 0;
  for (const auto& s : samples) {
    require(static_cast<int>(s.plan.windows.size()) == b.windows_per_image, "samples disagree on window count");
    for (const auto& w : s.plan.windows)
      require(w.rows == w0.rows && w.cols == w0.cols, "samples disagree on window shape");
    rows += s.pixels.rows();
  }
  b.layout.count = static_cast<int>(samples.size()) * b.windows_per_image;
  b.pixels.resize(rows, samples.front().pixels.cols());
  b.targets.resize(rows, samples.front().targets.cols());
  b.masked.reserve(static_cast<std::size_t>(rows));
  Eigen::Index at = 0;
  for (const auto& s : samples) {
    b.pixels.middleRows(at, s.pixels.rows()) = s.pixels;
    b.targets.middleRows(at, s.targets.rows()) = s.targets;
    b.masked.insert(b.masked.end(), s.masked.begin(), s.masked.end());
    at += s.pixels.rows();
  }
  return b;
}

namespace {

bool any_masked(const std::vector<bool>& m) { return std::find(m.begin(), m.end(), true) != m.end(); }

}  // namespace

double collapse_diagnostic(const ModelState<float>& state, const Batch& probe) {
  const Mat<float> pred = encode_predict(state, probe.pixels, probe.masked, probe.layout);
  const bool all = !any_masked(probe.masked);
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(pred.cols()), sq = Eigen::ArrayXd::Zero(pred.cols());
  double n = 0;
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    if (!all && !probe.masked[static_cast<std::size_t>(r)]) continue;
    const Eigen::ArrayXd v = pred.row(r).cast<double>().transpose().array();
    sum += v;
    n += 1;
  }
  if (n < 2) return 0.0;
  const Eigen::ArrayXd mean = sum / n;
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    if (!all && !probe.masked[static_cast<std::size_t>(r)]) continue;
    sq += (pred.row(r).cast<double>().transpose().array() - mean).square();
  }
  return (sq / n).mean();
}

std::vector<double> per_image_losses(const ModelState<float>& state, const Batch& batch, bool all_positions) {
  const Mat<float> pred = encode_predict(state, batch.pixels, batch.masked, batch.layout);
  std::vector<float> per_seq;
  mim_loss<float>(pred, batch.targets, batch.masked, batch.layout, all_positions, nullptr, &per_seq);
  const int k = batch.windows_per_image;
  std::vector<double> out(per_seq.size() / static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < per_seq.size(); ++i) out[i / static_cast<std::size_t>(k)] += per_seq[i];
  for (auto& v : out) v /= k;
  return out;
}

namespace {

void write_divergence(const std::optional<fs::path>& dir, int epoch, std::int64_t step, double loss, double lr,
                      const std::string& what) {
  if (!dir) return;
  std::ofstream os(*dir / "divergence.json");
  json j{{"epoch", epoch}, {"global_step", step}, {"lr", lr}, {"error", what}};
  j["loss"] = std::isfinite(loss) ? json(loss) : json(std::to_string(loss));
  os << j.dump(2) << "\n";
}

CheckpointMeta make_meta(const PretrainConfig& cfg, std::int64_t step, int epoch) {
  CheckpointMeta m;
  m.global_step = step;
  m.seed = cfg.seed;
  m.extra = json{{"epoch", epoch}, {"pretrain", to_json(cfg)}};
  return m;
}

}  // namespace

PretrainResult pretrain(const std::vector<SarImage>& corpus, const PretrainConfig& config, const ModelConfig& model_in,
                        const PretrainOptions& opts) {
  const PretrainConfig cfg = config.resolved();
  cfg.validate();
  require(!corpus.empty(), "corpus is empty");
  const Eigen::Index h = corpus.front().height(), w = corpus.front().width();
  require(h == w, "pretraining images must be square");
  for (const auto& img : corpus) require(img.height() == h && img.width() == w, "corpus images differ in size");
  const ModelConfig model = resolve_model_config(model_in, cfg, static_cast<int>(h));
  model.validate();
  require(h % model.patch == 0, "image size must be a multiple of the patch size");
  if (cfg.mask_mode == MaskMode::Local)
    require(cfg.window_side <= h / model.patch, "window_side exceeds the patch grid");
  if (cfg.mask_ratio > 0.0) {
    const int n = model.window * model.window;
    require(masked_count(cfg.mask_ratio, n) >= 1, "mask_ratio masks no patch in a window");
  }
  if (opts.out_dir) fs::create_directories(*opts.out_dir);

  PretrainResult res;
  res.state = ModelState<float>::initialize(model, derive_seed(cfg.seed, 0, stream::init));
  ModelState<float> grad = ModelState<float>::zeros(model);
  AdamW<float> opt(AdamWConfig{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

  const auto n = static_cast<std::int64_t>(corpus.size());
  const std::int64_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total = per_epoch * cfg.epochs;
  const std::int64_t warmup = per_epoch * cfg.warmup_epochs;
  const double peak = cfg.peak_lr();
  const bool all_positions = cfg.mask_ratio == 0.0;

  // Fixed, unaugmented probe batch for the collapse diagnostic.
  std::vector<PreparedSample> probe_samples;
  for (std::int64_t i = 0; i < std::min<std::int64_t>(n, 16); ++i)
    probe_samples.push_back(prepare_sample(corpus[static_cast<std::size_t>(i)], cfg, model,
                                           derive_seed(cfg.seed, static_cast<std::uint64_t>(i), stream::probe),
                                           false));
  const Batch probe = make_batch(probe_samples);

  std::vector<std::size_t> order(corpus.size());
  std::int64_t step = 0;
  double lr = 0.0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch), stream::shuffle));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch), stream::augment);

    double loss_sum = 0.0;
    for (std::int64_t b = 0; b < per_epoch; ++b, ++step) {
      const std::int64_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::vector<PreparedSample> samples;
      samples.reserve(static_cast<std::size_t>(hi - lo));
      for (std::int64_t i = lo; i < hi; ++i) {
        const std::size_t idx = order[static_cast<std::size_t>(i)];
        samples.push_back(prepare_sample(corpus[idx], cfg, model, derive_seed(epoch_seed, idx)));
      }
      const Batch batch = make_batch(samples);
      lr = lr_at(step, total, warmup, peak);

      double loss = 0.0;
      try {
        ForwardCache<float> cache;
        const Mat<float> pred = encode_predict(res.state, batch.pixels, batch.masked, batch.layout, &cache);
        Mat<float> dpred;
        loss = mim_loss<float>(pred, batch.targets, batch.masked, batch.layout, all_positions, &dpred);
        if (!std::isfinite(loss)) throw DivergenceError("numerical divergence: non-finite loss");
        grad.set_zero();
        backprop(res.state, cache, dpred, grad);
      } catch (const DivergenceError& e) {
        write_divergence(opts.out_dir, epoch, step, loss, lr, e.what());
        if (opts.out_dir) res.log.write_csv(*opts.out_dir / "runlog.csv");
        throw;
      }
      opt.step(res.state.parameters(), grad.parameters(), lr);
      loss_sum += loss * static_cast<double>(hi - lo);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.lr = lr;
    try {
      rec.pred_variance = collapse_diagnostic(res.state, probe);
    } catch (const DivergenceError& e) {
      write_divergence(opts.out_dir, epoch, step, rec.loss, lr, e.what());
      if (opts.out_dir) res.log.write_csv(*opts.out_dir / "runlog.csv");
      throw;
    }
    rec.collapse_flag = rec.pred_variance < kCollapseThreshold;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.epochs.push_back(rec);
    if (opts.out_dir) {
      res.log.write_csv(*opts.out_dir / "runlog.csv");
      if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04d", epoch);
        save_checkpoint(*opts.out_dir / "checkpoints" / name, res.state, make_meta(cfg, step, epoch));
      }
    }
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  if (opts.out_dir) save_checkpoint(*opts.out_dir / "checkpoint", res.state, make_meta(cfg, step, cfg.epochs));
  res.steps = step;
  return res;
}

}  // namespace sarjepa
