#include "sarjepa/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "sarjepa/errors.hpp"
#include "sarjepa/optim.hpp"
#include "sarjepa/rng.hpp"
#include "sarjepa/trainer.hpp"

namespace sarjepa {

namespace fs = std::filesystem;

FewShotSplit make_few_shot_split(const LabeledDataset& data, int shots, std::uint64_t seed) {
  require(shots >= 1, "shots must be >= 1");
  require(data.labels.size() == data.images.size() || data.images.empty(), "labels and images disagree");
  const int classes = data.num_classes();
  require(classes >= 1, "dataset has no classes");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    const int l = data.labels[i];
    require(l >= 0 && l < classes, "label out of range");
    by_class[static_cast<std::size_t>(l)].push_back(i);
  }
  FewShotSplit s;
  s.shots = shots;
  s.seed = seed;
  for (int c = 0; c < classes; ++c) {
    auto& items = by_class[static_cast<std::size_t>(c)];
    if (static_cast<int>(items.size()) <= shots)
      throw ValidationError("class '" + data.class_names[static_cast<std::size_t>(c)] + "' has " +
                            std::to_string(items.size()) + " items; need more than " + std::to_string(shots));
    Rng rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(c), stream::split));
    for (int k = 0; k < shots; ++k) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), items.size() - 1);
      std::swap(items[static_cast<std::size_t>(k)], items[pick(rng)]);
    }
    s.train.insert(s.train.end(), items.begin(), items.begin() + shots);
    s.test.insert(s.test.end(), items.begin() + shots, items.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

ProbeMode parse_probe_mode(const std::string& s) {
  if (s == "linear") return ProbeMode::Linear;
  if (s == "finetune") return ProbeMode::Finetune;
  throw ValidationError("mode must be linear or finetune, got '" + s + "'");
}

std::string probe_mode_name(ProbeMode m) { return m == ProbeMode::Linear ? "linear" : "finetune"; }

void ProbeConfig::validate() const {
  require(lr > 0.0, "lr must be positive");
  require(weight_decay >= 0.0, "weight_decay must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0, 1)");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(epochs >= 0, "epochs must be >= 0");
  require(warmup_epochs >= 0, "warmup_epochs must be >= 0");
  require(epochs == 0 || warmup_epochs < epochs, "warmup_epochs must be smaller than epochs");
  require(warmup_lr >= 0.0, "warmup_lr must be >= 0");
}

namespace {

SeqLayout grid_layout(const ModelState<float>& state, const SarImage& img, int count) {
  const int p = state.config.patch;
  return SeqLayout{static_cast<int>(img.height() / p), static_cast<int>(img.width() / p), count};
}

Mat<float> stack_pixels(const ModelState<float>& state, const std::vector<SarImage>& images, std::size_t lo,
                        std::size_t hi) {
  std::vector<Mat<float>> parts;
  Eigen::Index rows = 0;
  for (std::size_t i = lo; i < hi; ++i) {
    parts.push_back(patchify(images[i], state.config.patch, state.config.log_input));
    rows += parts.back().rows();
  }
  Mat<float> out(rows, state.config.patch * state.config.patch);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

Mat<float> mean_pool(const Mat<float>& x, const SeqLayout& layout) {
  Mat<float> out(layout.count, x.cols());
  const int t = layout.tokens();
  for (int s = 0; s < layout.count; ++s) out.row(s) = x.middleRows(s * t, t).colwise().mean();
  return out;
}

void check_same_size(const std::vector<SarImage>& images) {
  for (const auto& img : images)
    require(img.height() == images.front().height() && img.width() == images.front().width(),
            "images differ in size");
}

}  // namespace

Eigen::VectorXf encode_image_features(const ModelState<float>& state, const SarImage& img) {
  return encode_features(state, {img}).row(0).transpose();
}

Mat<float> encode_features(const ModelState<float>& state, const std::vector<SarImage>& images) {
  const int d = state.config.embed_dim;
  Mat<float> out(static_cast<Eigen::Index>(images.size()), d);
  if (images.empty()) return out;
  check_same_size(images);
  constexpr std::size_t chunk = 64;
  for (std::size_t lo = 0; lo < images.size(); lo += chunk) {
    const std::size_t hi = std::min(images.size(), lo + chunk);
    const SeqLayout layout = grid_layout(state, images.front(), static_cast<int>(hi - lo));
    const Mat<float> pix = stack_pixels(state, images, lo, hi);
    Mat<float> x = embed_tokens(state, pix, std::vector<bool>(static_cast<std::size_t>(pix.rows()), false));
    x = run_blocks(state, 0, state.config.encoder_depth, std::move(x), layout);
    out.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo)) = mean_pool(x, layout);
  }
  return out;
}

int argmax_lowest(const Eigen::Ref<const Eigen::VectorXf>& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<int>(i);
  return best;
}

namespace {

// Feature standardization with running statistics (no affine) followed by a
// linear layer.
struct Classifier {
  Mat<float> w, b;  // d x C, 1 x C
  Eigen::RowVectorXf running_mean, running_var;
  static constexpr float momentum = 0.1f;
  static constexpr float eps = 1e-5f;

  Classifier(int d, int classes, bool zero_init, std::uint64_t seed)
      : w(Mat<float>::Zero(d, classes)),
        b(Mat<float>::Zero(1, classes)),
        running_mean(Eigen::RowVectorXf::Zero(d)),
        running_var(Eigen::RowVectorXf::Ones(d)) {
    if (zero_init) return;
    Rng rng = make_rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      float v;
      do v = n(rng);
      while (std::abs(v) > 2.0f);
      w.data()[i] = 0.01f * v;
    }
  }

  std::vector<ParamRef<float>> params() { return {{{"w", true}, &w}, {{"b", false}, &b}}; }

  Mat<float> eval_logits(const Mat<float>& x) const {
    Mat<float> z = ((x.rowwise() - running_mean).array().rowwise() / (running_var.array() + eps).sqrt()).matrix();
    Mat<float> logits = z * w;
    logits.rowwise() += b.row(0);
    return logits;
  }
};

// Softmax cross-entropy with batch-statistics standardization. Fills
// parameter gradients and dL/dx; updates running statistics.
float train_step_grads(Classifier& clf, const Mat<float>& x, const std::vector<int>& y, Mat<float>& gw,
                       Mat<float>& gb, Mat<float>* dx) {
  const auto n = x.rows();
  const Eigen::RowVectorXf mean = x.colwise().mean();
  const Mat<float> xc = x.rowwise() - mean;
  const Eigen::RowVectorXf var = xc.array().square().colwise().mean();
  const Eigen::RowVectorXf rstd = (var.array() + Classifier::eps).rsqrt();
  const Mat<float> z = (xc.array().rowwise() * rstd.array()).matrix();
  const float unbiased = n > 1 ? static_cast<float>(n) / static_cast<float>(n - 1) : 1.0f;
  clf.running_mean = (1 - Classifier::momentum) * clf.running_mean + Classifier::momentum * mean;
  clf.running_var = (1 - Classifier::momentum) * clf.running_var + Classifier::momentum * unbiased * var;

  Mat<float> logits = z * clf.w;
  logits.rowwise() += clf.b.row(0);
  double loss = 0.0;
  Mat<float> dlogits(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const float m = logits.row(i).maxCoeff();
    Eigen::RowVectorXf e = (logits.row(i).array() - m).exp().matrix();
    const float s = e.sum();
    loss += std::log(s) + m - logits(i, y[static_cast<std::size_t>(i)]);
    dlogits.row(i) = e / s;
    dlogits(i, y[static_cast<std::size_t>(i)]) -= 1.0f;
  }
  dlogits /= static_cast<float>(n);
  gw = z.transpose() * dlogits;
  gb = dlogits.colwise().sum();
  if (dx) {
    const Mat<float> dz = dlogits * clf.w.transpose();
    const Eigen::RowVectorXf dz_mean = dz.colwise().mean();
    const Eigen::RowVectorXf dzz_mean = dz.cwiseProduct(z).colwise().mean();
    Mat<float> t = dz;
    t.rowwise() -= dz_mean;
    t -= (z.array().rowwise() * dzz_mean.array()).matrix();
    *dx = (t.array().rowwise() * rstd.array()).matrix();
  }
  return static_cast<float>(loss / static_cast<double>(n));
}

ProbeResult score(const Classifier& clf, const Mat<float>& test_x, const std::vector<int>& test_y) {
  ProbeResult r;
  const Mat<float> logits = clf.eval_logits(test_x);
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int p = argmax_lowest(logits.row(i).transpose());
    r.predictions.push_back(p);
    correct += p == test_y[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  r.accuracy = test_y.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_y.size());
  return r;
}

struct Schedule {
  std::int64_t total, warmup;
  const ProbeConfig& cfg;
  double at(std::int64_t step) const { return lr_constant_warmup(step, total, warmup, cfg.lr, cfg.warmup_lr); }
};

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(epoch), stream::shuffle));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

AdamWConfig adam_config(const ProbeConfig& cfg) { return AdamWConfig{cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay}; }

}  // namespace

ProbeResult probe_features(const Mat<float>& features, const std::vector<int>& labels, int num_classes,
                           const FewShotSplit& split, const ProbeConfig& cfg) {
  cfg.validate();
  require(features.rows() == static_cast<Eigen::Index>(labels.size()), "features and labels disagree");
  require(!split.train.empty(), "split has no training items");
  const int d = static_cast<int>(features.cols());
  Classifier clf(d, num_classes, cfg.zero_init, derive_seed(split.seed, 0, stream::probe));
  AdamW<float> opt(adam_config(cfg));
  const auto n = static_cast<std::int64_t>(split.train.size());
  const std::int64_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const Schedule sched{per_epoch * cfg.epochs, per_epoch * cfg.warmup_epochs, cfg};
  Mat<float> gw, gb;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(split.train.size(), split.seed, epoch);
    for (std::int64_t lo = 0; lo < n; lo += cfg.batch_size, ++step) {
      const std::int64_t hi = std::min(n, lo + cfg.batch_size);
      Mat<float> x(hi - lo, d);
      std::vector<int> y;
      for (std::int64_t i = lo; i < hi; ++i) {
        const std::size_t item = split.train[order[static_cast<std::size_t>(i)]];
        x.row(i - lo) = features.row(static_cast<Eigen::Index>(item));
        y.push_back(labels[item]);
      }
      const float loss = train_step_grads(clf, x, y, gw, gb, nullptr);
      if (!std::isfinite(loss)) throw DivergenceError("numerical divergence in probe");
      opt.step(clf.params(), {{{"w", true}, &gw}, {{"b", false}, &gb}}, sched.at(step));
    }
  }
  Mat<float> test_x(static_cast<Eigen::Index>(split.test.size()), d);
  std::vector<int> test_y;
  for (std::size_t i = 0; i < split.test.size(); ++i) {
    test_x.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(split.test[i]));
    test_y.push_back(labels[split.test[i]]);
  }
  return score(clf, test_x, test_y);
}

namespace {

bool is_encoder_param(const std::string& name, int encoder_depth) {
  if (name == "patch_w" || name == "patch_b") return true;
  if (!name.starts_with("blocks.")) return false;
  return std::stoi(name.substr(7)) < encoder_depth;
}

template <typename Ref>
std::vector<Ref> encoder_only(std::vector<Ref> all, int depth) {
  std::vector<Ref> out;
  for (auto& p : all)
    if (is_encoder_param(p.info.name, depth)) out.push_back(p);
  return out;
}

ProbeResult probe_finetune(const ModelState<float>& state0, const FewShotSplit& split, const ProbeConfig& cfg,
                           const LabeledDataset& data) {
  ModelState<float> state = state0;
  ModelState<float> grad = ModelState<float>::zeros(state.config);
  const int d = state.config.embed_dim, enc = state.config.encoder_depth;
  Classifier clf(d, data.num_classes(), cfg.zero_init, derive_seed(split.seed, 0, stream::probe));
  AdamW<float> opt_clf(adam_config(cfg)), opt_enc(adam_config(cfg));
  const auto n = static_cast<std::int64_t>(split.train.size());
  const std::int64_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const Schedule sched{per_epoch * cfg.epochs, per_epoch * cfg.warmup_epochs, cfg};
  Mat<float> gw, gb, dfeat;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(split.train.size(), split.seed, epoch);
    for (std::int64_t lo = 0; lo < n; lo += cfg.batch_size, ++step) {
      const std::int64_t hi = std::min(n, lo + cfg.batch_size);
      std::vector<SarImage> imgs;
      std::vector<int> y;
      for (std::int64_t i = lo; i < hi; ++i) {
        const std::size_t item = split.train[order[static_cast<std::size_t>(i)]];
        imgs.push_back(data.images[item]);
        y.push_back(data.labels[item]);
      }
      const SeqLayout layout = grid_layout(state, imgs.front(), static_cast<int>(imgs.size()));
      const Mat<float> pix = stack_pixels(state, imgs, 0, imgs.size());
      std::vector<BlockCache<float>> caches;
      Mat<float> x = embed_tokens(state, pix, std::vector<bool>(static_cast<std::size_t>(pix.rows()), false));
      x = run_blocks(state, 0, enc, std::move(x), layout, &caches);
      const Mat<float> feats = mean_pool(x, layout);
      const float loss = train_step_grads(clf, feats, y, gw, gb, &dfeat);
      if (!std::isfinite(loss)) throw DivergenceError("numerical divergence in probe");

      const int t = layout.tokens();
      Mat<float> dx(x.rows(), d);
      for (int s = 0; s < layout.count; ++s) dx.middleRows(s * t, t).rowwise() = dfeat.row(s) / static_cast<float>(t);
      grad.set_zero();
      const Mat<float> d0 = backprop_blocks(state, 0, enc, std::move(dx), layout, caches, grad);
      grad.patch_w.noalias() = pix.transpose() * d0;
      grad.patch_b = d0.colwise().sum();

      const double lr = sched.at(step);
      opt_clf.step(clf.params(), {{{"w", true}, &gw}, {{"b", false}, &gb}}, lr);
      opt_enc.step(encoder_only(state.parameters(), enc), encoder_only(grad.parameters(), enc), lr);
    }
  }
  std::vector<SarImage> test_imgs;
  std::vector<int> test_y;
  for (std::size_t i : split.test) {
    test_imgs.push_back(data.images[i]);
    test_y.push_back(data.labels[i]);
  }
  return score(clf, encode_features(state, test_imgs), test_y);
}

}  // namespace

ProbeResult probe(const ModelState<float>& state, const FewShotSplit& split, const ProbeConfig& cfg,
                  const LabeledDataset& data) {
  cfg.validate();
  if (cfg.mode == ProbeMode::Finetune && cfg.epochs > 0) return probe_finetune(state, split, cfg, data);
  return probe_features(encode_features(state, data.images), data.labels, data.num_classes(), split, cfg);
}

void FewShotTable::write_csv(const fs::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "shots,repeat,seed,mode,accuracy\n";
  char buf[160];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%d,%d,%llu,%s,%.17g\n", r.shots, r.repeat,
                  static_cast<unsigned long long>(r.seed), probe_mode_name(r.mode).c_str(), r.accuracy);
    os << buf;
  }
}

std::uint64_t split_seed(std::uint64_t seed, int shots, int repeat) {
  return derive_seed(derive_seed(seed, static_cast<std::uint64_t>(shots), stream::split),
                     static_cast<std::uint64_t>(repeat));
}

FewShotSummary summarize(int shots, const std::vector<double>& acc) {
  FewShotSummary s;
  s.shots = shots;
  if (acc.empty()) return s;
  s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
  if (acc.size() > 1) {
    double ss = 0.0;
    for (double a : acc) ss += (a - s.mean) * (a - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(acc.size() - 1));
  }
  return s;
}

FewShotTable evaluate_few_shot(const ModelState<float>& state, const LabeledDataset& data,
                               const std::vector<int>& shots, int repeats, const ProbeConfig& cfg) {
  cfg.validate();
  require(repeats >= 1, "repeats must be >= 1");
  require(!shots.empty(), "shots list is empty");
  const bool linear = cfg.mode == ProbeMode::Linear || cfg.epochs == 0;
  Mat<float> features;
  if (linear) features = encode_features(state, data.images);
  FewShotTable table;
  for (int n : shots) {
    std::vector<double> acc;
    for (int r = 0; r < repeats; ++r) {
      const FewShotSplit split = make_few_shot_split(data, n, split_seed(cfg.seed, n, r));
      const ProbeResult res = linear ? probe_features(features, data.labels, data.num_classes(), split, cfg)
                                     : probe(state, split, cfg, data);
      table.runs.push_back({n, r, split.seed, cfg.mode, res.accuracy});
      acc.push_back(res.accuracy);
    }
    table.summary.push_back(summarize(n, acc));
  }
  return table;
}

double mean_attention_distance(const Eigen::Ref<const Eigen::MatrixXd>& attn, int rows, int cols, int patch) {
  const int n = rows * cols;
  require(attn.rows() == n && attn.cols() == n, "attention matrix does not match the grid");
  double total = 0.0;
  for (int q = 0; q < n; ++q) {
    double acc = 0.0;
    for (int k = 0; k < n; ++k) {
      const double dy = q / cols - k / cols, dx = q % cols - k % cols;
      acc += attn(q, k) * std::sqrt(dy * dy + dx * dx);
    }
    total += acc;
  }
  return patch * total / n;
}

std::vector<AttentionDistance> attention_distance(const ModelState<float>& state,
                                                  const std::vector<SarImage>& images) {
  require(!images.empty(), "attention distance needs at least one image");
  check_same_size(images);
  const int heads = state.config.heads, enc = state.config.encoder_depth;
  const SeqLayout layout = grid_layout(state, images.front(), static_cast<int>(images.size()));
  const Mat<float> pix = stack_pixels(state, images, 0, images.size());
  std::vector<BlockCache<float>> caches;
  Mat<float> x = embed_tokens(state, pix, std::vector<bool>(static_cast<std::size_t>(pix.rows()), false));
  run_blocks(state, 0, enc, std::move(x), layout, &caches);
  std::vector<AttentionDistance> out;
  for (int l = 0; l < enc; ++l)
    for (int h = 0; h < heads; ++h) {
      double sum = 0.0;
      for (int s = 0; s < layout.count; ++s) {
        const auto& a = caches[static_cast<std::size_t>(l)].attn[static_cast<std::size_t>(s * heads + h)];
        sum += mean_attention_distance(a.cast<double>(), layout.rows, layout.cols, state.config.patch);
      }
      out.push_back({l, h, sum / layout.count});
    }
  return out;
}

void write_attention_csv(const fs::path& path, const std::vector<AttentionDistance>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "layer,head,mean_distance_px\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g\n", r.layer, r.head, r.mean_distance_px);
    os << buf;
  }
}

}  // namespace sarjepa
