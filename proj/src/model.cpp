#include "sarjepa/model.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "sarjepa/errors.hpp"
#include "sarjepa/rng.hpp"

namespace sarjepa {

ModelConfig ModelConfig::resolved() const {
  ModelConfig c = *this;
  if (c.paper_faithful) c.predictor_depth = 8;
  return c;
}

void ModelConfig::validate() const {
  require(patch >= 1, "model.patch must be >= 1");
  require(embed_dim >= 1 && heads >= 1, "model.embed_dim and model.heads must be >= 1");
  require(embed_dim % heads == 0, "model.embed_dim must be divisible by model.heads");
  require(encoder_depth >= 1, "model.encoder_depth must be >= 1");
  require(predictor_depth >= 0, "model.predictor_depth must be >= 0");
  require(mlp_ratio >= 1, "model.mlp_ratio must be >= 1");
  require(target_dim >= 1, "model.target_dim must be >= 1");
  require(window >= 1, "model.window must be >= 1");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"patch", c.patch},
          {"embed_dim", c.embed_dim},
          {"encoder_depth", c.encoder_depth},
          {"predictor_depth", c.predictor_depth},
          {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},
          {"target_dim", c.target_dim},
          {"window", c.window},
          {"log_input", c.log_input},
          {"paper_faithful", c.paper_faithful}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  c.patch = j.value("patch", c.patch);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.encoder_depth = j.value("encoder_depth", c.encoder_depth);
  c.predictor_depth = j.value("predictor_depth", c.predictor_depth);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.target_dim = j.value("target_dim", c.target_dim);
  c.window = j.value("window", c.window);
  c.log_input = j.value("log_input", c.log_input);
  c.paper_faithful = j.value("paper_faithful", c.paper_faithful);
  return c;
}

Eigen::MatrixXi relative_bias_index(int rows, int cols, int window) {
  const int n = rows * cols;
  const int side = 2 * window - 1;
  Eigen::MatrixXi idx(n, n);
  for (int q = 0; q < n; ++q) {
    for (int k = 0; k < n; ++k) {
      const int dr = std::clamp(q / cols - k / cols, -(window - 1), window - 1);
      const int dc = std::clamp(q % cols - k % cols, -(window - 1), window - 1);
      idx(q, k) = (dr + window - 1) * side + (dc + window - 1);
    }
  }
  return idx;
}

// ---------------------------------------------------------------------------
// State

template <typename T>
ModelState<T> ModelState<T>::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.embed_dim, hid = cfg.hidden_dim(), pp = cfg.patch * cfg.patch;
  ModelState s;
  s.config = cfg;
  s.patch_w = Mat<T>::Zero(pp, d);
  s.patch_b = Mat<T>::Zero(1, d);
  s.mask_token = Mat<T>::Zero(1, d);
  s.blocks.resize(static_cast<std::size_t>(cfg.depth()));
  for (auto& b : s.blocks) {
    b.ln1_g = Mat<T>::Zero(1, d);
    b.ln1_b = Mat<T>::Zero(1, d);
    b.qkv_w = Mat<T>::Zero(d, 3 * d);
    b.qkv_b = Mat<T>::Zero(1, 3 * d);
    b.proj_w = Mat<T>::Zero(d, d);
    b.proj_b = Mat<T>::Zero(1, d);
    b.ln2_g = Mat<T>::Zero(1, d);
    b.ln2_b = Mat<T>::Zero(1, d);
    b.fc1_w = Mat<T>::Zero(d, hid);
    b.fc1_b = Mat<T>::Zero(1, hid);
    b.fc2_w = Mat<T>::Zero(hid, d);
    b.fc2_b = Mat<T>::Zero(1, d);
    b.rel_bias = Mat<T>::Zero(cfg.heads, cfg.bias_side() * cfg.bias_side());
  }
  s.norm_g = Mat<T>::Zero(1, d);
  s.norm_b = Mat<T>::Zero(1, d);
  s.head_w = Mat<T>::Zero(d, cfg.target_dim);
  s.head_b = Mat<T>::Zero(1, cfg.target_dim);
  return s;
}

template <typename T>
ModelState<T> ModelState<T>::initialize(const ModelConfig& cfg, std::uint64_t seed) {
  ModelState s = zeros(cfg);
  Rng rng = make_rng(derive_seed(seed, 0, stream::init));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto trunc_normal = [&](Mat<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double z;
      do z = normal(rng);
      while (std::abs(z) > 2.0);
      m.data()[i] = static_cast<T>(0.02 * z);
    }
  };
  for (auto& p : s.parameters()) {
    const auto& name = p.info.name;
    if (name.ends_with("_g")) {
      p.value->setOnes();
    } else if (name.ends_with("_w") || name == "mask_token") {
      trunc_normal(*p.value);
    }
  }
  return s;
}

template <typename T>
std::vector<ParamRef<T>> ModelState<T>::parameters() {
  std::vector<ParamRef<T>> out;
  auto add = [&](std::string name, Mat<T>& m, bool decay) { out.push_back({{std::move(name), decay}, &m}); };
  add("patch_w", patch_w, true);
  add("patch_b", patch_b, false);
  add("mask_token", mask_token, false);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    add(pre + "ln1_g", b.ln1_g, false);
    add(pre + "ln1_b", b.ln1_b, false);
    add(pre + "qkv_w", b.qkv_w, true);
    add(pre + "qkv_b", b.qkv_b, false);
    add(pre + "proj_w", b.proj_w, true);
    add(pre + "proj_b", b.proj_b, false);
    add(pre + "ln2_g", b.ln2_g, false);
    add(pre + "ln2_b", b.ln2_b, false);
    add(pre + "fc1_w", b.fc1_w, true);
    add(pre + "fc1_b", b.fc1_b, false);
    add(pre + "fc2_w", b.fc2_w, true);
    add(pre + "fc2_b", b.fc2_b, false);
    add(pre + "rel_bias", b.rel_bias, false);
  }
  add("norm_g", norm_g, false);
  add("norm_b", norm_b, false);
  add("head_w", head_w, true);
  add("head_b", head_b, false);
  return out;
}

template <typename T>
std::vector<ConstParamRef<T>> ModelState<T>::parameters() const {
  std::vector<ConstParamRef<T>> out;
  for (auto& p : const_cast<ModelState*>(this)->parameters()) out.push_back({p.info, p.value});
  return out;
}

template <typename T>
void ModelState<T>::set_zero() {
  for (auto& p : parameters()) p.value->setZero();
}

template <typename T>
std::size_t ModelState<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += static_cast<std::size_t>(p.value->size());
  return n;
}

template <typename T>
template <typename U>
ModelState<U> ModelState<T>::cast() const {
  ModelState<U> out = ModelState<U>::zeros(config);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].value = src[i].value->template cast<U>();
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward primitives

namespace {

template <typename T>
using Col = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, LayerNormCache<T>& cache) {
  const T eps = T(1e-6);
  const Col<T> mu = x.rowwise().mean();
  Mat<T> xc = x.colwise() - mu;
  const Col<T> var = xc.rowwise().squaredNorm() / static_cast<T>(x.cols());
  cache.rstd = (var.array() + eps).rsqrt().matrix();
  cache.xhat = cache.rstd.asDiagonal() * xc;
  return (cache.xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& g, const LayerNormCache<T>& cache, Mat<T>& dg,
                           Mat<T>& db) {
  dg += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * g.row(0).array();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  const Col<T> mean_dxhat = dxhat.rowwise().sum() * inv_d;
  const Col<T> mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum().matrix() * inv_d;
  Mat<T> dx = dxhat.colwise() - mean_dxhat;
  dx -= mean_dxhat_xhat.asDiagonal() * cache.xhat;
  return cache.rstd.asDiagonal() * dx;
}

template <typename T>
T gelu(T u) {
  return T(0.5) * u * (T(1) + std::erf(u * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T u) {
  const T cdf = T(0.5) * (T(1) + std::erf(u * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * u * u) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + u * pdf;
}

template <typename T>
void softmax_rows(Mat<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    auto row = s.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

template <typename T>
Mat<T> block_forward(const BlockParams<T>& p, const ModelConfig& cfg, const Mat<T>& x, const SeqLayout& layout,
                     const Eigen::MatrixXi& bias_index, BlockCache<T>& c) {
  const int d = cfg.embed_dim, dh = cfg.head_dim(), n = layout.tokens();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  c.h1 = layer_norm(x, p.ln1_g, p.ln1_b, c.ln1);
  c.qkv.noalias() = c.h1 * p.qkv_w;
  c.qkv.rowwise() += p.qkv_b.row(0);

  c.attn.resize(static_cast<std::size_t>(layout.count * cfg.heads));
  c.attn_out.resize(x.rows(), d);
  for (int s = 0; s < layout.count; ++s) {
    for (int h = 0; h < cfg.heads; ++h) {
      const auto q = c.qkv.block(s * n, h * dh, n, dh);
      const auto k = c.qkv.block(s * n, d + h * dh, n, dh);
      const auto v = c.qkv.block(s * n, 2 * d + h * dh, n, dh);
      Mat<T>& a = c.attn[static_cast<std::size_t>(s * cfg.heads + h)];
      a.noalias() = q * k.transpose();
      a *= scale;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) += p.rel_bias(h, bias_index(i, j));
      softmax_rows(a);
      c.attn_out.block(s * n, h * dh, n, dh).noalias() = a * v;
    }
  }

  Mat<T> y = x;
  y.noalias() += c.attn_out * p.proj_w;
  y.rowwise() += p.proj_b.row(0);

  c.h2 = layer_norm(y, p.ln2_g, p.ln2_b, c.ln2);
  c.fc1_pre.noalias() = c.h2 * p.fc1_w;
  c.fc1_pre.rowwise() += p.fc1_b.row(0);
  c.fc1_act = c.fc1_pre.unaryExpr([](T u) { return gelu(u); });
  y.noalias() += c.fc1_act * p.fc2_w;
  y.rowwise() += p.fc2_b.row(0);
  return y;
}

template <typename T>
Mat<T> block_backward(const BlockParams<T>& p, const ModelConfig& cfg, const Mat<T>& dy, const SeqLayout& layout,
                      const Eigen::MatrixXi& bias_index, const BlockCache<T>& c, BlockParams<T>& g) {
  const int d = cfg.embed_dim, dh = cfg.head_dim(), n = layout.tokens();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  // MLP branch.
  g.fc2_w.noalias() += c.fc1_act.transpose() * dy;
  g.fc2_b += dy.colwise().sum();
  Mat<T> dpre = dy * p.fc2_w.transpose();
  dpre.array() *= c.fc1_pre.unaryExpr([](T u) { return gelu_grad(u); }).array();
  g.fc1_w.noalias() += c.h2.transpose() * dpre;
  g.fc1_b += dpre.colwise().sum();
  const Mat<T> dh2 = dpre * p.fc1_w.transpose();
  Mat<T> dmid = dy + layer_norm_backward(dh2, p.ln2_g, c.ln2, g.ln2_g, g.ln2_b);

  // Attention branch.
  g.proj_w.noalias() += c.attn_out.transpose() * dmid;
  g.proj_b += dmid.colwise().sum();
  const Mat<T> dattn_out = dmid * p.proj_w.transpose();
  Mat<T> dqkv(dy.rows(), 3 * d);
  for (int s = 0; s < layout.count; ++s) {
    for (int h = 0; h < cfg.heads; ++h) {
      const Mat<T>& a = c.attn[static_cast<std::size_t>(s * cfg.heads + h)];
      const auto q = c.qkv.block(s * n, h * dh, n, dh);
      const auto k = c.qkv.block(s * n, d + h * dh, n, dh);
      const auto v = c.qkv.block(s * n, 2 * d + h * dh, n, dh);
      const auto dout = dattn_out.block(s * n, h * dh, n, dh);

      const Mat<T> da = dout * v.transpose();
      dqkv.block(s * n, 2 * d + h * dh, n, dh).noalias() = a.transpose() * dout;
      const Col<T> row_dot = (da.array() * a.array()).rowwise().sum().matrix();
      const Mat<T> ds = a.array() * (da.colwise() - row_dot).array();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g.rel_bias(h, bias_index(i, j)) += ds(i, j);
      dqkv.block(s * n, h * dh, n, dh).noalias() = scale * (ds * k);
      dqkv.block(s * n, d + h * dh, n, dh).noalias() = scale * (ds.transpose() * q);
    }
  }
  g.qkv_w.noalias() += c.h1.transpose() * dqkv;
  g.qkv_b += dqkv.colwise().sum();
  const Mat<T> dh1 = dqkv * p.qkv_w.transpose();
  dmid += layer_norm_backward(dh1, p.ln1_g, c.ln1, g.ln1_g, g.ln1_b);
  return dmid;
}

}  // namespace

template <typename T>
Mat<T> embed_tokens(const ModelState<T>& state, const Mat<T>& pixels, const std::vector<bool>& masked) {
  const int pp = state.config.patch * state.config.patch;
  if (pixels.cols() != pp || static_cast<std::size_t>(pixels.rows()) != masked.size())
    throw ValidationError("token pixel block shape mismatch");
  Mat<T> x = pixels * state.patch_w;
  x.rowwise() += state.patch_b.row(0);
  for (std::size_t i = 0; i < masked.size(); ++i)
    if (masked[i]) x.row(static_cast<Eigen::Index>(i)) = state.mask_token.row(0);
  return x;
}

template <typename T>
Mat<T> run_blocks(const ModelState<T>& state, int first, int last, Mat<T> x, const SeqLayout& layout,
                  std::type_identity_t<std::vector<BlockCache<T>>>* caches) {
  if (x.rows() != layout.total() || x.cols() != state.config.embed_dim)
    throw ValidationError("token sequence shape mismatch");
  const Eigen::MatrixXi index = relative_bias_index(layout.rows, layout.cols, state.config.window);
  BlockCache<T> scratch;
  if (caches) caches->resize(static_cast<std::size_t>(state.config.depth()));
  for (int b = first; b < last; ++b) {
    BlockCache<T>& c = caches ? (*caches)[static_cast<std::size_t>(b)] : scratch;
    x = block_forward(state.blocks[static_cast<std::size_t>(b)], state.config, x, layout, index, c);
  }
  if (!x.allFinite()) throw DivergenceError("numerical divergence");
  return x;
}

template <typename T>
Mat<T> backprop_blocks(const ModelState<T>& state, int first, int last, Mat<T> dy, const SeqLayout& layout,
                       const std::vector<BlockCache<T>>& caches, ModelState<T>& grad) {
  const Eigen::MatrixXi index = relative_bias_index(layout.rows, layout.cols, state.config.window);
  for (int b = last - 1; b >= first; --b) {
    const auto ub = static_cast<std::size_t>(b);
    dy = block_backward(state.blocks[ub], state.config, dy, layout, index, caches[ub], grad.blocks[ub]);
  }
  return dy;
}

template <typename T>
Mat<T> encode_predict(const ModelState<T>& state, const Mat<T>& pixels, const std::vector<bool>& masked,
                      const SeqLayout& layout, std::type_identity_t<ForwardCache<T>>* cache) {
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.layout = layout;
  Mat<T> x = embed_tokens(state, pixels, masked);
  x = run_blocks(state, 0, state.config.depth(), std::move(x), layout, &c.blocks);
  c.normed = layer_norm(x, state.norm_g, state.norm_b, c.norm);
  Mat<T> pred = c.normed * state.head_w;
  pred.rowwise() += state.head_b.row(0);
  if (!pred.allFinite()) throw DivergenceError("numerical divergence");
  if (cache) {
    c.pixels = pixels;
    c.masked = masked;
  }
  return pred;
}

template <typename T>
void backprop(const ModelState<T>& state, const ForwardCache<T>& c, const Mat<T>& dpred, ModelState<T>& grad) {
  grad.head_w.noalias() += c.normed.transpose() * dpred;
  grad.head_b += dpred.colwise().sum();
  const Mat<T> dnormed = dpred * state.head_w.transpose();
  Mat<T> dx = layer_norm_backward(dnormed, state.norm_g, c.norm, grad.norm_g, grad.norm_b);
  dx = backprop_blocks(state, 0, state.config.depth(), std::move(dx), c.layout, c.blocks, grad);
  for (std::size_t i = 0; i < c.masked.size(); ++i) {
    if (!c.masked[i]) continue;
    const auto row = static_cast<Eigen::Index>(i);
    grad.mask_token += dx.row(row);
    dx.row(row).setZero();
  }
  grad.patch_w.noalias() += c.pixels.transpose() * dx;
  grad.patch_b += dx.colwise().sum();
}

#define SARJEPA_INSTANTIATE(T)                                                                                 \
  template struct ModelState<T>;                                                                              \
  template Mat<T> embed_tokens(const ModelState<T>&, const Mat<T>&, const std::vector<bool>&);               \
  template Mat<T> run_blocks(const ModelState<T>&, int, int, Mat<T>, const SeqLayout&,                        \
                             std::vector<BlockCache<T>>*);                                                    \
  template Mat<T> backprop_blocks(const ModelState<T>&, int, int, Mat<T>, const SeqLayout&,                   \
                                  const std::vector<BlockCache<T>>&, ModelState<T>&);                         \
  template Mat<T> encode_predict(const ModelState<T>&, const Mat<T>&, const std::vector<bool>&,              \
                                 const SeqLayout&, ForwardCache<T>*);                                         \
  template void backprop(const ModelState<T>&, const ForwardCache<T>&, const Mat<T>&, ModelState<T>&);

SARJEPA_INSTANTIATE(float)
SARJEPA_INSTANTIATE(double)
#undef SARJEPA_INSTANTIATE

template ModelState<double> ModelState<float>::cast<double>() const;
template ModelState<float> ModelState<double>::cast<float>() const;
template ModelState<float> ModelState<float>::cast<float>() const;
template ModelState<double> ModelState<double>::cast<double>() const;

}  // namespace sarjepa
