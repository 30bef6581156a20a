#include "msimil/colorlab.hpp"

#include <cmath>
#include <sstream>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"

namespace msimil::colorlab {

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) h = (g - b) / d;
  else if (mx == g) h = 2.0 + (b - r) / d;
  else h = 4.0 + (r - g) / d;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h -= std::floor(h);  // wrap into [0,1)
  const double x = h * 6.0;
  const int sector = std::min(5, static_cast<int>(x));
  const double f = x - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

uint8_t quantize(double v) {
  return static_cast<uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
}

double luma601(double r, double g, double b) {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

}  // namespace

ScannerProfile ScannerProfile::identity(const std::string& id) {
  ScannerProfile p;
  p.profile_id = id;
  return p;
}

bool ScannerProfile::same_parameters(const ScannerProfile& other) const {
  return decode_gamma == other.decode_gamma && primaries == other.primaries;
}

ProfileRegistry::ProfileRegistry() { add(ScannerProfile::identity()); }

void ProfileRegistry::add(const ScannerProfile& profile) {
  if (std::abs(profile.primaries.determinant()) < 1e-12)
    throw DataError("profile '" + profile.profile_id + "': singular primaries matrix");
  for (double g : profile.decode_gamma)
    if (!(g > 0.0)) throw DataError("profile '" + profile.profile_id + "': gamma must be > 0");
  profiles_[profile.profile_id] = profile;
}

const ScannerProfile& ProfileRegistry::get(const std::string& id) const {
  const auto it = profiles_.find(id);
  if (it == profiles_.end()) throw DataError("unknown scanner profile: '" + id + "'");
  return it->second;
}

bool ProfileRegistry::contains(const std::string& id) const { return profiles_.count(id) > 0; }

std::vector<std::string> ProfileRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, _] : profiles_) out.push_back(id);
  return out;
}

ProfileRegistry ProfileRegistry::parse(const std::string& text) {
  ProfileRegistry reg;
  std::map<std::string, ScannerProfile> partial;
  std::map<std::string, int> fields_seen;  // bit 1 = gamma, bit 2 = matrix
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (line.find_first_not_of(" \t\r") != std::string::npos)
        throw DataError("profile registry line " + std::to_string(line_no) + ": expected key = value");
      continue;
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto dot = key.rfind('.');
    if (dot == std::string::npos || dot == 0)
      throw DataError("profile registry line " + std::to_string(line_no) + ": key must be <id>.gamma or <id>.matrix");
    const std::string id = key.substr(0, dot);
    const std::string field = key.substr(dot + 1);
    auto& prof = partial[id];
    prof.profile_id = id;
    std::istringstream vs(value);
    if (field == "gamma") {
      if (!(vs >> prof.decode_gamma[0] >> prof.decode_gamma[1] >> prof.decode_gamma[2]))
        throw DataError("profile '" + id + "': gamma needs 3 values");
      fields_seen[id] |= 1;
    } else if (field == "matrix") {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          if (!(vs >> prof.primaries(r, c)))
            throw DataError("profile '" + id + "': matrix needs 9 values");
      fields_seen[id] |= 2;
    } else {
      throw DataError("profile registry line " + std::to_string(line_no) + ": unknown field '" + field + "'");
    }
    double extra;
    if (vs >> extra)
      throw DataError("profile '" + id + "': too many values for " + field);
  }
  for (const auto& [id, prof] : partial) {
    if (fields_seen[id] != 3)
      throw DataError("profile '" + id + "': needs both gamma and matrix entries");
    reg.add(prof);
  }
  return reg;
}

ProfileRegistry ProfileRegistry::load(const std::string& path) {
  return parse(read_text_file(path));
}

ImageU8 apply_profile_transform(const ImageU8& tile, const ScannerProfile& source,
                                const ScannerProfile& target) {
  if (source.same_parameters(target)) return tile;  // exact identity path

  // Decode is a function of the 8-bit input, so a 256-entry LUT per channel
  // is exact. Encode sees continuous values and uses pow directly.
  double decode_lut[3][256];
  for (int c = 0; c < 3; ++c)
    for (int v = 0; v < 256; ++v)
      decode_lut[c][v] = std::pow(v / 255.0, source.decode_gamma[c]);

  const Eigen::Matrix3d combined = target.primaries.inverse() * source.primaries;
  const std::array<double, 3> inv_gamma = {1.0 / target.decode_gamma[0],
                                           1.0 / target.decode_gamma[1],
                                           1.0 / target.decode_gamma[2]};
  ImageU8 out(tile.height, tile.width);
  const size_t n = static_cast<size_t>(tile.height) * tile.width;
  for (size_t i = 0; i < n; ++i) {
    Eigen::Vector3d lin(decode_lut[0][tile.px[i * 3 + 0]],
                        decode_lut[1][tile.px[i * 3 + 1]],
                        decode_lut[2][tile.px[i * 3 + 2]]);
    const Eigen::Vector3d mapped = combined * lin;
    for (int c = 0; c < 3; ++c) {
      const double clamped = std::min(1.0, std::max(0.0, mapped[c]));
      out.px[i * 3 + c] = quantize(255.0 * std::pow(clamped, inv_gamma[c]));
    }
  }
  return out;
}

template <class S>
TilePlanes<S> normalize(const ImageU8& tile, const NormalizationStats& stats) {
  for (double s : stats.std)
    if (!(s > 0.0)) throw DataError("normalization std must be positive");
  TilePlanes<S> out(tile.height, tile.width);
  const size_t plane = static_cast<size_t>(tile.height) * tile.width;
  for (int c = 0; c < 3; ++c) {
    const double mean = stats.mean[c], inv_std = 1.0 / stats.std[c];
    S* dst = out.data.data() + static_cast<size_t>(c) * plane;
    for (size_t i = 0; i < plane; ++i)
      dst[i] = static_cast<S>((tile.px[i * 3 + c] / 255.0 - mean) * inv_std);
  }
  return out;
}

template TilePlanes<float> normalize<float>(const ImageU8&, const NormalizationStats&);
template TilePlanes<double> normalize<double>(const ImageU8&, const NormalizationStats&);

NormalizationStats compute_normalization_stats(const std::vector<ImageU8>& tiles) {
  NormalizationStats stats;
  double sum[3] = {0, 0, 0}, sumsq[3] = {0, 0, 0};
  size_t n = 0;
  for (const auto& t : tiles) {
    const size_t plane = static_cast<size_t>(t.height) * t.width;
    n += plane;
    for (size_t i = 0; i < plane; ++i)
      for (int c = 0; c < 3; ++c) {
        const double v = t.px[i * 3 + c] / 255.0;
        sum[c] += v;
        sumsq[c] += v * v;
      }
  }
  if (n == 0) throw DataError("cannot compute normalization stats from an empty tile set");
  for (int c = 0; c < 3; ++c) {
    stats.mean[c] = sum[c] / static_cast<double>(n);
    const double var = std::max(0.0, sumsq[c] / static_cast<double>(n) - stats.mean[c] * stats.mean[c]);
    stats.std[c] = std::max(1e-6, std::sqrt(var));
  }
  return stats;
}

void JitterParams::validate() const {
  if (brightness < 0 || contrast < 0 || saturation < 0)
    throw DataError("jitter magnitudes must be >= 0");
  if (hue < 0 || hue > 0.5) throw DataError("hue jitter must be in [0, 0.5]");
}

JitterFactors draw_jitter_factors(const JitterParams& params, RandomStream& rng) {
  JitterFactors f;
  f.brightness = rng.uniform(std::max(0.0, 1.0 - params.brightness), 1.0 + params.brightness);
  f.contrast = rng.uniform(std::max(0.0, 1.0 - params.contrast), 1.0 + params.contrast);
  f.saturation = rng.uniform(std::max(0.0, 1.0 - params.saturation), 1.0 + params.saturation);
  f.hue_shift = rng.uniform(-params.hue, params.hue);
  return f;
}

ImageU8 apply_color_jitter(const ImageU8& tile, const JitterFactors& factors) {
  const bool do_b = factors.brightness != 1.0;
  const bool do_c = factors.contrast != 1.0;
  const bool do_s = factors.saturation != 1.0;
  const bool do_h = factors.hue_shift != 0.0;
  if (!do_b && !do_c && !do_s && !do_h) return tile;

  const size_t n = static_cast<size_t>(tile.height) * tile.width;
  std::vector<double> buf(n * 3);
  for (size_t i = 0; i < n * 3; ++i) buf[i] = tile.px[i];

  if (do_b)
    for (auto& v : buf) v *= factors.brightness;

  if (do_c) {
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i)
      mean += luma601(buf[i * 3], buf[i * 3 + 1], buf[i * 3 + 2]);
    mean /= static_cast<double>(n);
    for (auto& v : buf) v = mean + factors.contrast * (v - mean);
  }

  if (do_s) {
    for (size_t i = 0; i < n; ++i) {
      const double g = luma601(buf[i * 3], buf[i * 3 + 1], buf[i * 3 + 2]);
      for (int c = 0; c < 3; ++c)
        buf[i * 3 + c] = g + factors.saturation * (buf[i * 3 + c] - g);
    }
  }

  if (do_h) {
    for (size_t i = 0; i < n; ++i) {
      double r = std::min(255.0, std::max(0.0, buf[i * 3 + 0]));
      double g = std::min(255.0, std::max(0.0, buf[i * 3 + 1]));
      double b = std::min(255.0, std::max(0.0, buf[i * 3 + 2]));
      double h, s, v;
      rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0, h, s, v);
      hsv_to_rgb(h + factors.hue_shift, s, v, r, g, b);
      buf[i * 3 + 0] = r * 255.0;
      buf[i * 3 + 1] = g * 255.0;
      buf[i * 3 + 2] = b * 255.0;
    }
  }

  ImageU8 out(tile.height, tile.width);
  for (size_t i = 0; i < n * 3; ++i) out.px[i] = quantize(buf[i]);
  return out;
}

std::vector<ImageU8> color_jitter(const std::vector<ImageU8>& tiles,
                                  const JitterParams& params, RandomStream& rng) {
  params.validate();
  std::vector<ImageU8> out;
  out.reserve(tiles.size());
  if (params.scope == JitterScope::SLIDE) {
    const JitterFactors f = draw_jitter_factors(params, rng);
    for (const auto& t : tiles) out.push_back(apply_color_jitter(t, f));
  } else {
    for (const auto& t : tiles)
      out.push_back(apply_color_jitter(t, draw_jitter_factors(params, rng)));
  }
  return out;
}

ImageU8 apply_geometric(const ImageU8& tile, int crop_x, int crop_y, int quarter_turns,
                        bool hflip) {
  if (tile.height != kTileSize || tile.width != kTileSize)
    throw DataError("geometric_augment expects a 256x256 tile");
  if (crop_x < 0 || crop_y < 0 || crop_x > kTileSize - kCropSize || crop_y > kTileSize - kCropSize)
    throw DataError("crop origin out of range");

  ImageU8 out(kCropSize, kCropSize);
  const int k = ((quarter_turns % 4) + 4) % 4;
  constexpr int N = kCropSize;
  for (int y = 0; y < N; ++y) {
    for (int x = 0; x < N; ++x) {
      // invert the (rotate then flip) mapping to find the source crop pixel
      int ry = y, rx = x;
      if (hflip) rx = N - 1 - rx;
      int sy, sx;
      switch (k) {  // out(y,x) = rot_ccw^k(crop)(y,x)
        case 0: sy = ry; sx = rx; break;
        case 1: sy = rx; sx = N - 1 - ry; break;
        case 2: sy = N - 1 - ry; sx = N - 1 - rx; break;
        default: sy = N - 1 - rx; sx = ry; break;
      }
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = tile.at(crop_y + sy, crop_x + sx, c);
    }
  }
  return out;
}

ImageU8 geometric_augment(const ImageU8& tile, RandomStream& rng, bool training) {
  if (!training) {
    constexpr int center = (kTileSize - kCropSize) / 2;
    return apply_geometric(tile, center, center, 0, false);
  }
  const int cx = static_cast<int>(rng.uniform_int(0, kTileSize - kCropSize));
  const int cy = static_cast<int>(rng.uniform_int(0, kTileSize - kCropSize));
  const int k = static_cast<int>(rng.uniform_int(0, 3));
  const bool flip = rng.bernoulli(0.5);
  return apply_geometric(tile, cx, cy, k, flip);
}

}  // namespace msimil::colorlab
