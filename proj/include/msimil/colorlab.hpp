#pragma once

#include <Eigen/Dense>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "msimil/image.hpp"
#include "msimil/rng.hpp"

namespace msimil::colorlab {

/// Parametric scanner color profile: per-channel power-law transfer plus a
/// 3x3 device-RGB -> reference-linear-RGB matrix.
struct ScannerProfile {
  std::string profile_id;
  std::array<double, 3> decode_gamma = {1.0, 1.0, 1.0};
  Eigen::Matrix3d primaries = Eigen::Matrix3d::Identity();

  static ScannerProfile identity(const std::string& id = "identity");
  bool same_parameters(const ScannerProfile& other) const;
};

/// Profile registry file: plain-text key-value, one "<id>.gamma = r g b" and
/// one "<id>.matrix = m00 ... m22" (row-major) line per profile id. '#'
/// starts a comment. A profile with a singular matrix is rejected at load.
class ProfileRegistry {
 public:
  ProfileRegistry();  // holds the built-in identity profile
  static ProfileRegistry parse(const std::string& text);
  static ProfileRegistry load(const std::string& path);

  void add(const ScannerProfile& profile);
  const ScannerProfile& get(const std::string& id) const;
  bool contains(const std::string& id) const;
  std::vector<std::string> ids() const;

 private:
  std::map<std::string, ScannerProfile> profiles_;
};

/// Decode through the source profile, move to the target device space, and
/// re-encode: decode gamma -> source matrix -> inverse target matrix ->
/// target gamma, clamped to [0,1] before 8-bit quantization. Exact identity
/// when the two profiles have equal parameters.
ImageU8 apply_profile_transform(const ImageU8& tile, const ScannerProfile& source,
                                const ScannerProfile& target);

struct NormalizationStats {
  std::array<double, 3> mean = {0.0, 0.0, 0.0};
  std::array<double, 3> std = {1.0, 1.0, 1.0};
};

/// Channel-major real tensor, 3 x height x width.
template <class S>
struct TilePlanes {
  int height = 0;
  int width = 0;
  std::vector<S> data;

  TilePlanes() = default;
  TilePlanes(int h, int w) : height(h), width(w), data(static_cast<size_t>(3) * h * w, S(0)) {}
  S& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
  S at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * height + y) * width + x];
  }
};

/// out[c][y][x] = (pixel/255 - mean[c]) / std[c]
template <class S>
TilePlanes<S> normalize(const ImageU8& tile, const NormalizationStats& stats);

/// Per-channel mean/std of pixel/255 over a reference tile set.
NormalizationStats compute_normalization_stats(const std::vector<ImageU8>& tiles);

enum class JitterScope { SLIDE, TILE };

struct JitterParams {
  double brightness = 0.25;
  double contrast = 0.5;
  double saturation = 0.25;
  double hue = 0.04;  // turns
  JitterScope scope = JitterScope::SLIDE;

  void validate() const;
};

struct JitterFactors {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue_shift = 0.0;
};

/// One factor tuple: brightness/contrast/saturation in [max(0,1-m), 1+m],
/// hue shift in [-m, +m] turns. Always consumes exactly four draws.
JitterFactors draw_jitter_factors(const JitterParams& params, RandomStream& rng);

/// Applies brightness -> contrast -> saturation -> hue in that order.
/// Stages whose factor is the identity are skipped, so zero magnitudes
/// reproduce the input bytes exactly.
ImageU8 apply_color_jitter(const ImageU8& tile, const JitterFactors& factors);

/// Scope SLIDE draws one factor tuple shared by all tiles of the call;
/// scope TILE draws an independent tuple per tile.
std::vector<ImageU8> color_jitter(const std::vector<ImageU8>& tiles,
                                  const JitterParams& params, RandomStream& rng);

inline constexpr int kTileSize = 256;
inline constexpr int kCropSize = 224;

/// Deterministic geometric transform: crop at (crop_x, crop_y), rotate by
/// quarter_turns * 90 degrees counter-clockwise, then optional horizontal flip.
ImageU8 apply_geometric(const ImageU8& tile, int crop_x, int crop_y, int quarter_turns,
                        bool hflip);

/// Training: uniform crop origin in [0,32]^2, quarter turns in {0..3}, flip
/// with probability 1/2. Evaluation: center crop, no rotation, no flip.
ImageU8 geometric_augment(const ImageU8& tile, RandomStream& rng, bool training);

}  // namespace msimil::colorlab
