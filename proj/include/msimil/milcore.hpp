#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "msimil/colorlab.hpp"
#include "msimil/rng.hpp"

namespace msimil::mil {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
using MatU8 = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Architecture of the tile feature extractor and the MIL head.
struct ModelShape {
  int in_channels = 3;
  std::array<int, 3> conv_channels = {8, 16, 32};
  int feature_dim = 32;     // D
  int attention_dim = 128;  // L
  bool gated_attention = false;

  bool operator==(const ModelShape&) const = default;
};

/// One 3x3 stride-1 same-padding convolution; weight is out_ch x (in_ch*9).
template <class S>
struct ConvLayer {
  Mat<S> weight;
  Vec<S> bias;
};

/// Three conv blocks (each conv -> ReLU -> 2x2 max-pool), global average
/// pool, then a linear map to the feature dimension.
template <class S>
struct FeatureExtractor {
  std::array<ConvLayer<S>, 3> conv;
  Mat<S> head_weight;  // D x conv_channels[2]
  Vec<S> head_bias;    // D
};

/// Tanh attention: e_k = w . tanh(V h_k), optionally gated by sigmoid(U h_k).
template <class S>
struct AttentionParams {
  Mat<S> V;  // L x D
  Vec<S> w;  // L
  Mat<S> U;  // L x D, used only when the shape is gated
};

template <class S>
struct ClassifierParams {
  Vec<S> weight;  // D
  S bias = S(0);
  double dropout_rate = 0.1;
};

template <class S>
struct MilModel {
  ModelShape shape;
  FeatureExtractor<S> extractor;
  AttentionParams<S> attention;
  ClassifierParams<S> classifier;
};

/// Zero-initialized model used as a gradient / moment buffer.
template <class S>
MilModel<S> zeros_like(const MilModel<S>& model);

/// Zero model with all tensors allocated for the given shape.
template <class S>
MilModel<S> zero_model(const ModelShape& shape);

/// He-normal conv/head init, Xavier-normal attention, zero classifier.
template <class S>
MilModel<S> init_model(const ModelShape& shape, uint64_t seed);

/// Named view of one parameter tensor; the order of param_refs() is the
/// canonical serialization and update order.
template <class S>
struct ParamRef {
  std::string name;
  S* data;
  size_t size;
  std::vector<int64_t> dims;
};

template <class S>
std::vector<ParamRef<S>> param_refs(MilModel<S>& model);

/// Class weights w_c = N / (2 N_c), so w_pos*N_pos + w_neg*N_neg = N.
struct LossWeights {
  double w_pos = 1.0;
  double w_neg = 1.0;
  static LossWeights from_counts(size_t n_pos, size_t n_neg);
};

/// A bag is either raw normalized tiles or precomputed per-tile features.
template <class S>
struct Bag {
  std::vector<colorlab::TilePlanes<S>> tiles;
  Mat<S> features;  // K x D when from_features
  bool from_features = false;
  int size() const {
    return from_features ? static_cast<int>(features.rows())
                         : static_cast<int>(tiles.size());
  }
};

/// Everything backward() needs to replay the forward pass, including the
/// dropout masks.
template <class S>
struct MilCache {
  struct TileCache {
    Mat<S> input;                   // in_ch x h*w
    int h = 0, w = 0;
    std::array<Mat<S>, 3> conv_pre;     // pre-ReLU conv outputs
    std::array<MatU8, 3> pool_argmax;   // winner index 0..3 per pooled cell
    std::array<Mat<S>, 3> pooled;       // ReLU+pool outputs
    Vec<S> gap;
  };
  std::vector<TileCache> tiles;  // empty for feature bags
  bool from_features = false;
  bool training = false;
  double dropout_rate = 0.0;

  Mat<S> H;        // K x D features
  Mat<S> Hd;       // after dropout
  MatU8 mask_h;    // K x D keep mask (training only)
  Mat<S> T;        // L x K tanh activations
  Mat<S> G;        // L x K gate activations (gated only)
  Vec<S> e;        // K logits
  Vec<S> a;        // K attention weights
  Vec<S> z;        // D pooled embedding
  Vec<S> zd;       // after dropout
  Eigen::Matrix<uint8_t, Eigen::Dynamic, 1> mask_z;
  S u = S(0);      // classifier logit
  S s = S(0);      // sigmoid output
};

/// Per-tile features; row k depends on tile k alone. Tiles may be any size
/// >= 8x8 (spatial dims are halved by each of the three pools).
template <class S>
Mat<S> extract_features(const std::vector<colorlab::TilePlanes<S>>& tiles,
                        const FeatureExtractor<S>& extractor, int workers = 1,
                        typename MilCache<S>::TileCache* caches = nullptr);

/// Attention pooling over feature rows. Returns (z, a) with sum(a) = 1.
/// Softmax is max-subtracted. Dropout applies to the rows when training.
template <class S>
std::pair<Vec<S>, Vec<S>> attention_pool(const Mat<S>& H, const AttentionParams<S>& params,
                                         bool gated, double dropout_rate, RandomStream& rng,
                                         bool training, MilCache<S>* cache = nullptr);

/// s = sigmoid(weight . dropout(z) + bias)
template <class S>
S classify(const Vec<S>& z, const ClassifierParams<S>& params, double dropout_rate,
           RandomStream& rng, bool training, MilCache<S>* cache = nullptr);

/// Weighted binary cross-entropy with the score clamped to [eps, 1-eps].
double weighted_bce(double score, bool positive, const LossWeights& weights);
inline constexpr double kBceEps = 1e-7;

template <class S>
struct ForwardResult {
  S score = S(0);
  Vec<S> attention;
};

/// Full forward pass; fills cache for backward when requested. Dropout draws
/// are consumed only when training with a positive dropout rate (first the
/// K x D feature mask, then the D embedding mask, row-major).
template <class S>
ForwardResult<S> forward(const Bag<S>& bag, const MilModel<S>& model, bool training,
                         RandomStream& rng, MilCache<S>* cache = nullptr, int workers = 1);

/// Exact reverse-mode gradients of weighted_bce(forward(bag)) for every
/// parameter, replaying the cached dropout masks.
template <class S>
MilModel<S> backward(const MilModel<S>& model, const MilCache<S>& cache, bool positive,
                     const LossWeights& weights);

/// Precomputed-feature file ("MILF"): u32 version, u32 K, u32 D header, then
/// K*D little-endian 32-bit reals, row-major.
void save_features(const std::string& path, const Eigen::MatrixXf& features);
Eigen::MatrixXf load_features(const std::string& path);

}  // namespace msimil::mil
