#include "msimil/milcore.hpp"

#include <cmath>
#include <cstring>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"

namespace msimil::mil {

namespace {

// 3x3 neighborhood offsets in im2col row-block order.
constexpr int kKernel = 3;
constexpr int kPad = 1;
constexpr int kTaps = kKernel * kKernel;

/// im2col for a 3x3 same-padding convolution. X is in_ch x (h*w) with one
/// column per pixel (row-major pixel order); the result has in_ch*9 rows.
template <class S>
void im2col(const Mat<S>& X, int h, int w, Mat<S>& C) {
  const int in_ch = static_cast<int>(X.rows());
  C.setZero(in_ch * kTaps, h * w);
  const int ldc = in_ch * kTaps;
  const S* src_base = X.data();
  S* dst_base = C.data();
  for (int tap = 0; tap < kTaps; ++tap) {
    const int dy = tap / kKernel - kPad;
    const int dx = tap % kKernel - kPad;
    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
    if (x0 >= x1) continue;
    for (int y = 0; y < h; ++y) {
      const int ny = y + dy;
      if (ny < 0 || ny >= h) continue;
      const S* src = src_base + (static_cast<size_t>(ny) * w + (x0 + dx)) * in_ch;
      S* dst = dst_base + (static_cast<size_t>(y) * w + x0) * ldc + tap * in_ch;
      for (int x = x0; x < x1; ++x) {
        for (int c = 0; c < in_ch; ++c) dst[c] = src[c];
        src += in_ch;
        dst += ldc;
      }
    }
  }
}

/// Transpose of im2col: scatter-adds column gradients back onto the image.
template <class S>
void col2im(const Mat<S>& C, int h, int w, Mat<S>& X) {
  const int in_ch = static_cast<int>(C.rows()) / kTaps;
  X.setZero(in_ch, h * w);
  const int ldc = in_ch * kTaps;
  const S* src_base = C.data();
  S* dst_base = X.data();
  for (int tap = 0; tap < kTaps; ++tap) {
    const int dy = tap / kKernel - kPad;
    const int dx = tap % kKernel - kPad;
    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
    if (x0 >= x1) continue;
    for (int y = 0; y < h; ++y) {
      const int ny = y + dy;
      if (ny < 0 || ny >= h) continue;
      S* dst = dst_base + (static_cast<size_t>(ny) * w + (x0 + dx)) * in_ch;
      const S* src = src_base + (static_cast<size_t>(y) * w + x0) * ldc + tap * in_ch;
      for (int x = x0; x < x1; ++x) {
        for (int c = 0; c < in_ch; ++c) dst[c] += src[c];
        src += ldc;
        dst += in_ch;
      }
    }
  }
}

/// ReLU + 2x2/2 max-pool fused: pooling the pre-activation and clamping at
/// zero afterwards is equivalent because ReLU is monotone.
template <class S>
void relu_maxpool(const Mat<S>& pre, int h, int w, Mat<S>& pooled, MatU8& argmax) {
  const int ch = static_cast<int>(pre.rows());
  const int oh = h / 2, ow = w / 2;
  pooled.resize(ch, oh * ow);
  argmax.resize(ch, oh * ow);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int j00 = (2 * oy) * w + 2 * ox;
      const int j10 = (2 * oy + 1) * w + 2 * ox;
      const int cols[4] = {j00, j00 + 1, j10, j10 + 1};
      const int out = oy * ow + ox;
      for (int c = 0; c < ch; ++c) {
        S best = pre(c, cols[0]);
        uint8_t idx = 0;
        for (uint8_t m = 1; m < 4; ++m) {
          const S v = pre(c, cols[m]);
          if (v > best) {
            best = v;
            idx = m;
          }
        }
        pooled(c, out) = best > S(0) ? best : S(0);
        argmax(c, out) = idx;
      }
    }
  }
}

/// Routes pooled gradients to the argmax cell; the ReLU mask drops cells
/// whose pre-activation was <= 0.
template <class S>
void relu_maxpool_backward(const Mat<S>& d_pooled, const MatU8& argmax, const Mat<S>& pre,
                           int h, int w, Mat<S>& d_pre) {
  const int ch = static_cast<int>(pre.rows());
  const int oh = h / 2, ow = w / 2;
  d_pre.setZero(ch, h * w);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int j00 = (2 * oy) * w + 2 * ox;
      const int j10 = (2 * oy + 1) * w + 2 * ox;
      const int cols[4] = {j00, j00 + 1, j10, j10 + 1};
      const int out = oy * ow + ox;
      for (int c = 0; c < ch; ++c) {
        const int j = cols[argmax(c, out)];
        if (pre(c, j) > S(0)) d_pre(c, j) += d_pooled(c, out);
      }
    }
  }
}

template <class S>
void extractor_forward_tile(const colorlab::TilePlanes<S>& tile,
                            const FeatureExtractor<S>& ex,
                            typename MilCache<S>::TileCache& tc, Vec<S>& feat) {
  const int h0 = tile.height, w0 = tile.width;
  if (h0 < 8 || w0 < 8) throw DataError("extractor needs tiles of at least 8x8 pixels");
  const int in_ch = static_cast<int>(ex.conv[0].weight.cols()) / kTaps;
  const size_t plane = static_cast<size_t>(h0) * w0;
  if (tile.data.size() != static_cast<size_t>(in_ch) * plane)
    throw DataError("tile has " + std::to_string(tile.data.size() / plane) +
                    " channels but the extractor expects " + std::to_string(in_ch));

  // planar (c-major) tile -> pixel-major matrix, one column per pixel
  tc.h = h0;
  tc.w = w0;
  tc.input.resize(in_ch, h0 * w0);
  for (int c = 0; c < in_ch; ++c)
    for (size_t j = 0; j < plane; ++j) tc.input(c, j) = tile.data[c * plane + j];

  Mat<S> C;
  int h = h0, w = w0;
  const Mat<S>* cur = &tc.input;
  for (int l = 0; l < 3; ++l) {
    im2col(*cur, h, w, C);
    tc.conv_pre[l].noalias() = ex.conv[l].weight * C;
    tc.conv_pre[l].colwise() += ex.conv[l].bias;
    relu_maxpool(tc.conv_pre[l], h, w, tc.pooled[l], tc.pool_argmax[l]);
    h /= 2;
    w /= 2;
    cur = &tc.pooled[l];
  }
  tc.gap = tc.pooled[2].rowwise().mean();
  feat.noalias() = ex.head_weight * tc.gap;
  feat += ex.head_bias;
}

template <class S>
void extractor_backward_tile(const typename MilCache<S>::TileCache& tc,
                             const FeatureExtractor<S>& ex, const Vec<S>& d_feat,
                             FeatureExtractor<S>& grads) {
  grads.head_weight.noalias() += d_feat * tc.gap.transpose();
  grads.head_bias += d_feat;

  const int npix3 = static_cast<int>(tc.pooled[2].cols());
  Vec<S> d_gap = ex.head_weight.transpose() * d_feat;
  Mat<S> d_pooled = (d_gap / S(npix3)).replicate(1, npix3);

  Mat<S> C, d_pre;
  for (int l = 2; l >= 0; --l) {
    // spatial dims at the input of layer l
    int h = tc.h, w = tc.w;
    for (int m = 0; m < l; ++m) {
      h /= 2;
      w /= 2;
    }
    relu_maxpool_backward(d_pooled, tc.pool_argmax[l], tc.conv_pre[l], h, w, d_pre);
    const Mat<S>& input = (l == 0) ? tc.input : tc.pooled[l - 1];
    im2col(input, h, w, C);
    grads.conv[l].weight.noalias() += d_pre * C.transpose();
    grads.conv[l].bias += d_pre.rowwise().sum();
    if (l > 0) {
      Mat<S> d_cols = ex.conv[l].weight.transpose() * d_pre;
      col2im(d_cols, h, w, d_pooled);
    }
  }
}

/// Inverted dropout over feature rows; draws are row-major (k outer, d inner).
template <class S>
void dropout_rows(const Mat<S>& H, double rate, RandomStream& rng, MatU8& mask, Mat<S>& out) {
  const auto K = H.rows(), D = H.cols();
  mask.resize(K, D);
  out.resize(K, D);
  const S scale = S(1.0 / (1.0 - rate));
  for (Eigen::Index k = 0; k < K; ++k)
    for (Eigen::Index d = 0; d < D; ++d) {
      const bool keep = rng.uniform01() >= rate;
      mask(k, d) = keep ? 1 : 0;
      out(k, d) = keep ? H(k, d) * scale : S(0);
    }
}

}  // namespace

template <class S>
MilModel<S> zero_model(const ModelShape& shape) {
  MilModel<S> out;
  out.shape = shape;
  int in_ch = shape.in_channels;
  for (int l = 0; l < 3; ++l) {
    const int out_ch = shape.conv_channels[l];
    out.extractor.conv[l].weight = Mat<S>::Zero(out_ch, in_ch * kTaps);
    out.extractor.conv[l].bias = Vec<S>::Zero(out_ch);
    in_ch = out_ch;
  }
  out.extractor.head_weight = Mat<S>::Zero(shape.feature_dim, shape.conv_channels[2]);
  out.extractor.head_bias = Vec<S>::Zero(shape.feature_dim);
  out.attention.V = Mat<S>::Zero(shape.attention_dim, shape.feature_dim);
  out.attention.w = Vec<S>::Zero(shape.attention_dim);
  if (shape.gated_attention)
    out.attention.U = Mat<S>::Zero(shape.attention_dim, shape.feature_dim);
  out.classifier.weight = Vec<S>::Zero(shape.feature_dim);
  out.classifier.bias = S(0);
  return out;
}

template <class S>
MilModel<S> zeros_like(const MilModel<S>& model) {
  MilModel<S> out = zero_model<S>(model.shape);
  out.classifier.dropout_rate = model.classifier.dropout_rate;
  return out;
}

template <class S>
MilModel<S> init_model(const ModelShape& shape, uint64_t seed) {
  RandomStream rng(seed);
  MilModel<S> m;
  m.shape = shape;
  int in_ch = shape.in_channels;
  for (int l = 0; l < 3; ++l) {
    const int out_ch = shape.conv_channels[l];
    const double sigma = std::sqrt(2.0 / (in_ch * kTaps));
    m.extractor.conv[l].weight.resize(out_ch, in_ch * kTaps);
    for (Eigen::Index i = 0; i < m.extractor.conv[l].weight.size(); ++i)
      m.extractor.conv[l].weight.data()[i] = static_cast<S>(rng.normal() * sigma);
    m.extractor.conv[l].bias = Vec<S>::Zero(out_ch);
    in_ch = out_ch;
  }
  const int c3 = shape.conv_channels[2];
  const double sigma_head = std::sqrt(2.0 / c3);
  m.extractor.head_weight.resize(shape.feature_dim, c3);
  for (Eigen::Index i = 0; i < m.extractor.head_weight.size(); ++i)
    m.extractor.head_weight.data()[i] = static_cast<S>(rng.normal() * sigma_head);
  m.extractor.head_bias = Vec<S>::Zero(shape.feature_dim);

  const double sigma_v = std::sqrt(1.0 / shape.feature_dim);
  m.attention.V.resize(shape.attention_dim, shape.feature_dim);
  for (Eigen::Index i = 0; i < m.attention.V.size(); ++i)
    m.attention.V.data()[i] = static_cast<S>(rng.normal() * sigma_v);
  m.attention.w.resize(shape.attention_dim);
  const double sigma_w = std::sqrt(1.0 / shape.attention_dim);
  for (Eigen::Index i = 0; i < m.attention.w.size(); ++i)
    m.attention.w.data()[i] = static_cast<S>(rng.normal() * sigma_w);
  if (shape.gated_attention) {
    m.attention.U.resize(shape.attention_dim, shape.feature_dim);
    for (Eigen::Index i = 0; i < m.attention.U.size(); ++i)
      m.attention.U.data()[i] = static_cast<S>(rng.normal() * sigma_v);
  }
  // Zero-initialized classifier starts every bag at s = 0.5.
  m.classifier.weight = Vec<S>::Zero(shape.feature_dim);
  m.classifier.bias = S(0);
  return m;
}

template <class S>
std::vector<ParamRef<S>> param_refs(MilModel<S>& m) {
  std::vector<ParamRef<S>> refs;
  auto add_mat = [&](const std::string& name, Mat<S>& mat) {
    refs.push_back({name, mat.data(), static_cast<size_t>(mat.size()),
                    {mat.rows(), mat.cols()}});
  };
  auto add_vec = [&](const std::string& name, Vec<S>& v) {
    refs.push_back({name, v.data(), static_cast<size_t>(v.size()), {v.size()}});
  };
  for (int l = 0; l < 3; ++l) {
    add_mat("conv" + std::to_string(l + 1) + ".weight", m.extractor.conv[l].weight);
    add_vec("conv" + std::to_string(l + 1) + ".bias", m.extractor.conv[l].bias);
  }
  add_mat("head.weight", m.extractor.head_weight);
  add_vec("head.bias", m.extractor.head_bias);
  add_mat("attention.V", m.attention.V);
  add_vec("attention.w", m.attention.w);
  if (m.shape.gated_attention) add_mat("attention.U", m.attention.U);
  add_vec("classifier.weight", m.classifier.weight);
  refs.push_back({"classifier.bias", &m.classifier.bias, 1, {1}});
  return refs;
}

LossWeights LossWeights::from_counts(size_t n_pos, size_t n_neg) {
  if (n_pos == 0 || n_neg == 0)
    throw DataError("class weights need at least one case of each class");
  const double n = static_cast<double>(n_pos + n_neg);
  return {n / (2.0 * static_cast<double>(n_pos)), n / (2.0 * static_cast<double>(n_neg))};
}

template <class S>
Mat<S> extract_features(const std::vector<colorlab::TilePlanes<S>>& tiles,
                        const FeatureExtractor<S>& ex, int workers,
                        typename MilCache<S>::TileCache* caches) {
  if (tiles.empty()) throw DataError("extract_features: empty bag");
  const int K = static_cast<int>(tiles.size());
  const int D = static_cast<int>(ex.head_bias.size());
  Mat<S> H(K, D);
  std::vector<typename MilCache<S>::TileCache> local;
  typename MilCache<S>::TileCache* tc = caches;
  if (!tc) {
    local.resize(K);
    tc = local.data();
  }
  parallel_for(static_cast<size_t>(K), workers, [&](size_t k) {
    Vec<S> feat;
    extractor_forward_tile(tiles[k], ex, tc[k], feat);
    H.row(k) = feat.transpose();
  });
  return H;
}

template <class S>
std::pair<Vec<S>, Vec<S>> attention_pool(const Mat<S>& H, const AttentionParams<S>& params,
                                         bool gated, double dropout_rate, RandomStream& rng,
                                         bool training, MilCache<S>* cache) {
  if (H.rows() < 1) throw DataError("attention_pool: empty bag");
  MilCache<S> local;
  MilCache<S>& c = cache ? *cache : local;
  c.training = training;
  c.dropout_rate = dropout_rate;
  c.H = H;
  if (training && dropout_rate > 0.0) {
    dropout_rows(H, dropout_rate, rng, c.mask_h, c.Hd);
  } else {
    c.Hd = H;
    c.mask_h.resize(0, 0);
  }

  Mat<S> Q = params.V * c.Hd.transpose();  // L x K
  c.T = Q.array().tanh().matrix();
  Mat<S> scores;  // L x K, gated or plain
  if (gated) {
    Mat<S> R = params.U * c.Hd.transpose();
    c.G = (S(1) / (S(1) + (-R.array()).exp())).matrix();
    scores = c.T.cwiseProduct(c.G);
  } else {
    scores = c.T;
  }
  c.e = scores.transpose() * params.w;  // K

  const S emax = c.e.maxCoeff();
  c.a = (c.e.array() - emax).exp().matrix();
  c.a /= c.a.sum();
  c.z = c.Hd.transpose() * c.a;  // D
  return {c.z, c.a};
}

template <class S>
S classify(const Vec<S>& z, const ClassifierParams<S>& params, double dropout_rate,
           RandomStream& rng, bool training, MilCache<S>* cache) {
  MilCache<S> local;
  MilCache<S>& c = cache ? *cache : local;
  if (training && dropout_rate > 0.0) {
    const auto D = z.size();
    c.mask_z.resize(D);
    c.zd.resize(D);
    const S scale = S(1.0 / (1.0 - dropout_rate));
    for (Eigen::Index d = 0; d < D; ++d) {
      const bool keep = rng.uniform01() >= dropout_rate;
      c.mask_z(d) = keep ? 1 : 0;
      c.zd(d) = keep ? z(d) * scale : S(0);
    }
  } else {
    c.zd = z;
    c.mask_z.resize(0);
  }
  c.u = params.weight.dot(c.zd) + params.bias;
  c.s = S(1) / (S(1) + std::exp(-static_cast<double>(c.u)));
  return c.s;
}

double weighted_bce(double score, bool positive, const LossWeights& weights) {
  const double s = std::min(1.0 - kBceEps, std::max(kBceEps, score));
  return positive ? -weights.w_pos * std::log(s) : -weights.w_neg * std::log(1.0 - s);
}

template <class S>
ForwardResult<S> forward(const Bag<S>& bag, const MilModel<S>& model, bool training,
                         RandomStream& rng, MilCache<S>* cache, int workers) {
  if (bag.size() < 1) throw DataError("forward: empty bag");
  MilCache<S> local;
  MilCache<S>& c = cache ? *cache : local;
  c.from_features = bag.from_features;

  Mat<S> H;
  if (bag.from_features) {
    if (bag.features.cols() != model.shape.feature_dim)
      throw DataError("feature bag dimension " + std::to_string(bag.features.cols()) +
                      " does not match model feature_dim " +
                      std::to_string(model.shape.feature_dim));
    H = bag.features;
    c.tiles.clear();
  } else {
    c.tiles.resize(bag.tiles.size());
    H = extract_features<S>(bag.tiles, model.extractor, workers, c.tiles.data());
  }

  const double rate = model.classifier.dropout_rate;
  attention_pool<S>(H, model.attention, model.shape.gated_attention, rate, rng, training, &c);
  classify<S>(c.z, model.classifier, rate, rng, training, &c);
  return {c.s, c.a};
}

template <class S>
MilModel<S> backward(const MilModel<S>& model, const MilCache<S>& c, bool positive,
                     const LossWeights& weights) {
  if (c.H.rows() == 0) throw DataError("backward: cache is empty or stale");
  if (!c.from_features && c.tiles.empty())
    throw DataError("backward: cache is missing tile activations");
  MilModel<S> g = zeros_like(model);

  // d loss / d s; the clamp zeroes the gradient at saturation
  const double s = static_cast<double>(c.s);
  double dLds = 0.0;
  if (s > kBceEps && s < 1.0 - kBceEps)
    dLds = positive ? -weights.w_pos / s : weights.w_neg / (1.0 - s);
  const S du = static_cast<S>(dLds * s * (1.0 - s));

  g.classifier.bias = du;
  g.classifier.weight = du * c.zd;
  Vec<S> dzd = du * model.classifier.weight;

  Vec<S> dz;
  if (c.mask_z.size() > 0) {
    const S scale = S(1.0 / (1.0 - c.dropout_rate));
    dz = (dzd.array() * c.mask_z.template cast<S>().array() * scale).matrix();
  } else {
    dz = dzd;
  }

  // z = Hd^T a
  Vec<S> da = c.Hd * dz;                    // K
  Mat<S> dHd = c.a * dz.transpose();        // K x D

  // softmax: de = a (da - a.da)
  const S adot = c.a.dot(da);
  Vec<S> de = (c.a.array() * (da.array() - adot)).matrix();

  Mat<S> scores = model.shape.gated_attention ? c.T.cwiseProduct(c.G) : c.T;
  g.attention.w = scores * de;              // L
  Mat<S> dscores = model.attention.w * de.transpose();  // L x K

  if (model.shape.gated_attention) {
    Mat<S> dT = dscores.cwiseProduct(c.G);
    Mat<S> dG = dscores.cwiseProduct(c.T);
    Mat<S> dQ = dT.cwiseProduct((S(1) - c.T.array().square()).matrix());
    Mat<S> dR = dG.cwiseProduct((c.G.array() * (S(1) - c.G.array())).matrix());
    g.attention.V.noalias() = dQ * c.Hd;
    g.attention.U.noalias() = dR * c.Hd;
    dHd.noalias() += dQ.transpose() * model.attention.V;
    dHd.noalias() += dR.transpose() * model.attention.U;
  } else {
    Mat<S> dQ = dscores.cwiseProduct((S(1) - c.T.array().square()).matrix());
    g.attention.V.noalias() = dQ * c.Hd;
    dHd.noalias() += dQ.transpose() * model.attention.V;
  }

  Mat<S> dH;
  if (c.mask_h.size() > 0) {
    const S scale = S(1.0 / (1.0 - c.dropout_rate));
    dH = (dHd.array() * c.mask_h.template cast<S>().array() * scale).matrix();
  } else {
    dH = dHd;
  }

  if (!c.from_features) {
    for (size_t k = 0; k < c.tiles.size(); ++k) {
      const Vec<S> dfeat = dH.row(static_cast<Eigen::Index>(k)).transpose();
      extractor_backward_tile<S>(c.tiles[k], model.extractor, dfeat, g.extractor);
    }
  }
  return g;
}

void save_features(const std::string& path, const Eigen::MatrixXf& features) {
  const uint32_t K = static_cast<uint32_t>(features.rows());
  const uint32_t D = static_cast<uint32_t>(features.cols());
  std::vector<uint8_t> out;
  out.reserve(16 + static_cast<size_t>(K) * D * 4);
  const char magic[4] = {'M', 'I', 'L', 'F'};
  out.insert(out.end(), magic, magic + 4);
  auto put_u32 = [&](uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
  };
  put_u32(kFeatureFileFormatVersion);
  put_u32(K);
  put_u32(D);
  for (uint32_t k = 0; k < K; ++k)
    for (uint32_t d = 0; d < D; ++d) {
      const float v = features(k, d);
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(bits);
    }
  atomic_write_file(path, out.data(), out.size());
}

Eigen::MatrixXf load_features(const std::string& path) {
  const auto bytes = read_binary_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "MILF", 4) != 0)
    throw DataError("not a feature file: " + path);
  auto get_u32 = [&](size_t off) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[off + i]) << (8 * i);
    return v;
  };
  const uint32_t version = get_u32(4);
  if (version != static_cast<uint32_t>(kFeatureFileFormatVersion))
    throw DataError("unsupported feature file version in " + path);
  const uint32_t K = get_u32(8), D = get_u32(12);
  if (bytes.size() != 16 + static_cast<size_t>(K) * D * 4)
    throw DataError("feature file size mismatch: " + path);
  Eigen::MatrixXf out(K, D);
  size_t off = 16;
  for (uint32_t k = 0; k < K; ++k)
    for (uint32_t d = 0; d < D; ++d) {
      const uint32_t bits = get_u32(off);
      off += 4;
      float v;
      std::memcpy(&v, &bits, 4);
      out(k, d) = v;
    }
  return out;
}

// explicit instantiations: 64-bit for tests/oracles, 32-bit for production
#define MSIMIL_INSTANTIATE(S)                                                              \
  template MilModel<S> zeros_like<S>(const MilModel<S>&);                                  \
  template MilModel<S> zero_model<S>(const ModelShape&);                                   \
  template MilModel<S> init_model<S>(const ModelShape&, uint64_t);                         \
  template std::vector<ParamRef<S>> param_refs<S>(MilModel<S>&);                           \
  template Mat<S> extract_features<S>(const std::vector<colorlab::TilePlanes<S>>&,         \
                                      const FeatureExtractor<S>&, int,                     \
                                      typename MilCache<S>::TileCache*);                   \
  template std::pair<Vec<S>, Vec<S>> attention_pool<S>(const Mat<S>&,                      \
                                                       const AttentionParams<S>&, bool,    \
                                                       double, RandomStream&, bool,        \
                                                       MilCache<S>*);                      \
  template S classify<S>(const Vec<S>&, const ClassifierParams<S>&, double, RandomStream&, \
                         bool, MilCache<S>*);                                              \
  template ForwardResult<S> forward<S>(const Bag<S>&, const MilModel<S>&, bool,            \
                                       RandomStream&, MilCache<S>*, int);                  \
  template MilModel<S> backward<S>(const MilModel<S>&, const MilCache<S>&, bool,           \
                                   const LossWeights&);

MSIMIL_INSTANTIATE(float)
MSIMIL_INSTANTIATE(double)
#undef MSIMIL_INSTANTIATE

}  // namespace msimil::mil
