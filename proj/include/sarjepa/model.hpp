#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <type_traits>
#include <vector>

namespace sarjepa {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int patch = 8;
  int embed_dim = 128;
  int encoder_depth = 4;
  int predictor_depth = 2;
  int heads = 4;
  int mlp_ratio = 4;
  int target_dim = 256;
  /// Window side in patches; sizes the relative-position bias tables.
  int window = 4;
  /// Feed log-amplitude instead of amplitude to the patch embedding.
  bool log_input = true;
  bool paper_faithful = false;

  int head_dim() const { return embed_dim / heads; }
  int hidden_dim() const { return embed_dim * mlp_ratio; }
  int depth() const { return encoder_depth + predictor_depth; }
  int bias_side() const { return 2 * window - 1; }
  /// Sets predictor_depth to 8 when paper_faithful is on.
  ModelConfig resolved() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Pre-norm transformer block weights. Vectors are stored as 1 x n matrices.
template <typename T>
struct BlockParams {
  Mat<T> ln1_g, ln1_b;
  Mat<T> qkv_w, qkv_b;    ///< d x 3d, columns [q | k | v], head h at h * head_dim
  Mat<T> proj_w, proj_b;  ///< d x d
  Mat<T> ln2_g, ln2_b;
  Mat<T> fc1_w, fc1_b;    ///< d x hidden
  Mat<T> fc2_w, fc2_b;    ///< hidden x d
  Mat<T> rel_bias;        ///< heads x bias_side^2, indexed by clamped 2-D offset
};

struct ParamInfo {
  std::string name;
  bool decay;
};

template <typename T>
struct ParamRef {
  ParamInfo info;
  Mat<T>* value;
};

template <typename T>
struct ConstParamRef {
  ParamInfo info;
  const Mat<T>* value;
};

/// All learnable tensors. Also used, zero-filled, as a gradient accumulator.
template <typename T>
struct ModelState {
  ModelConfig config;
  Mat<T> patch_w, patch_b;  ///< p^2 x d
  Mat<T> mask_token;        ///< 1 x d
  std::vector<BlockParams<T>> blocks;  ///< encoder blocks, then predictor blocks
  Mat<T> norm_g, norm_b;
  Mat<T> head_w, head_b;    ///< d x target_dim

  /// Zero-filled tensors with the shapes implied by `cfg`.
  static ModelState zeros(const ModelConfig& cfg);
  /// Truncated-normal(0.02) projections and mask token; zero biases and bias
  /// tables; unit norm gains.
  static ModelState initialize(const ModelConfig& cfg, std::uint64_t seed);

  /// Canonical tensor order shared by the optimizer and checkpoints.
  std::vector<ParamRef<T>> parameters();
  std::vector<ConstParamRef<T>> parameters() const;

  void set_zero();
  std::size_t num_scalars() const;

  template <typename U>
  ModelState<U> cast() const;
};

/// Token arrangement: `count` independent sequences, each a rows x cols
/// block of patches in raster order.
struct SeqLayout {
  int rows = 0;
  int cols = 0;
  int count = 0;

  int tokens() const { return rows * cols; }
  int total() const { return tokens() * count; }
};

/// Bias-table column for every (query, key) pair of a rows x cols sequence.
/// Offsets are clamped to +/-(window - 1).
Eigen::MatrixXi relative_bias_index(int rows, int cols, int window);

template <typename T>
struct LayerNormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <typename T>
struct BlockCache {
  LayerNormCache<T> ln1, ln2;
  Mat<T> h1, qkv;
  std::vector<Mat<T>> attn;  ///< post-softmax, index seq * heads + head
  Mat<T> attn_out;
  Mat<T> h2, fc1_pre, fc1_act;
};

template <typename T>
struct ForwardCache {
  SeqLayout layout;
  Mat<T> pixels;              ///< embedding input
  std::vector<bool> masked;   ///< per token row
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> norm;
  Mat<T> normed;
};

/// Patch embeddings for visible rows, the mask token for masked rows. All
/// rows are kept. `pixels` has one p^2 row per token.
template <typename T>
Mat<T> embed_tokens(const ModelState<T>& state, const Mat<T>& pixels, const std::vector<bool>& masked);

/// Runs blocks [first, last) in place. Fills `caches` when non-null.
template <typename T>
Mat<T> run_blocks(const ModelState<T>& state, int first, int last, Mat<T> x, const SeqLayout& layout,
                  std::type_identity_t<std::vector<BlockCache<T>>>* caches = nullptr);

/// Backpropagates through blocks [first, last) given dL/d(output); returns dL/d(input).
template <typename T>
Mat<T> backprop_blocks(const ModelState<T>& state, int first, int last, Mat<T> dy, const SeqLayout& layout,
                       const std::vector<BlockCache<T>>& caches, ModelState<T>& grad);

/// Embedding, every block, final norm and target projection. Throws
/// DivergenceError on non-finite outputs.
template <typename T>
Mat<T> encode_predict(const ModelState<T>& state, const Mat<T>& pixels, const std::vector<bool>& masked,
                      const SeqLayout& layout, std::type_identity_t<ForwardCache<T>>* cache = nullptr);

/// Accumulates parameter gradients of a loss with dL/d(pred) = dpred.
template <typename T>
void backprop(const ModelState<T>& state, const ForwardCache<T>& cache, const Mat<T>& dpred, ModelState<T>& grad);

}  // namespace sarjepa
