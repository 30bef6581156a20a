#include "msimil/slideio.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "msimil/common.hpp"
#include "msimil/ioutil.hpp"

namespace msimil::slideio {

namespace {

const char* kRequiredColumns[] = {
    "slide_id",   "image_path",      "label",           "gleason_total", "procedure",
    "scanner_profile", "stain_site", "collection_date", "tumor_purity",  "paired_id"};

bool is_absent(const std::string& s) { return s.empty() || s == "NA"; }

void warn(std::vector<std::string>* warnings, const std::string& msg) {
  if (warnings) warnings->push_back(msg);
}

std::optional<Label> parse_label(const std::string& s) {
  if (s == "MSI_H" || s == "MSI-H") return Label::MSI_H;
  if (s == "MSS") return Label::MSS;
  if (s == "UNKNOWN") return Label::UNKNOWN;
  return std::nullopt;
}

std::optional<Procedure> parse_procedure(const std::string& s) {
  if (s == "CORE_NEEDLE_BIOPSY") return Procedure::CORE_NEEDLE_BIOPSY;
  if (s == "RESECTION") return Procedure::RESECTION;
  if (s == "AMBIGUOUS_BIOPSY") return Procedure::AMBIGUOUS_BIOPSY;
  return std::nullopt;
}

std::optional<StainSite> parse_stain_site(const std::string& s) {
  if (s == "INTERNAL") return StainSite::INTERNAL;
  if (s == "EXTERNAL") return StainSite::EXTERNAL;
  return std::nullopt;
}

bool looks_like_iso_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  for (size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  return true;
}

// RGB (0..255) -> HSV with hue in turns, saturation/value in [0,1].
void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  r /= 255.0; g /= 255.0; b /= 255.0;
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

double luminance601(double r, double g, double b) {
  return (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
}

bool in_hue_bands(double h, const std::vector<std::pair<double, double>>& bands) {
  for (const auto& [lo, hi] : bands) {
    if (lo <= hi) {
      if (h >= lo && h <= hi) return true;
    } else {  // band wrapping around 0
      if (h >= lo || h <= hi) return true;
    }
  }
  return false;
}

}  // namespace

std::string to_string(Label v) {
  switch (v) {
    case Label::MSI_H: return "MSI_H";
    case Label::MSS: return "MSS";
    default: return "UNKNOWN";
  }
}

std::string to_string(Procedure v) {
  switch (v) {
    case Procedure::CORE_NEEDLE_BIOPSY: return "CORE_NEEDLE_BIOPSY";
    case Procedure::RESECTION: return "RESECTION";
    default: return "AMBIGUOUS_BIOPSY";
  }
}

std::string to_string(StainSite v) {
  return v == StainSite::INTERNAL ? "INTERNAL" : "EXTERNAL";
}

std::vector<SlideRecord> parse_manifest(const std::string& text,
                                        std::vector<std::string>* warnings) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("manifest: empty input");

  const auto header = split_csv_line(line);
  std::unordered_map<std::string, size_t> col;
  for (size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* name : kRequiredColumns)
    if (!col.count(name)) throw DataError(std::string("manifest: missing required column: ") + name);
  for (const auto& name : header)
    if (std::find_if(std::begin(kRequiredColumns), std::end(kRequiredColumns),
                     [&](const char* c) { return name == c; }) == std::end(kRequiredColumns) &&
        name != "microns_per_pixel")
      warn(warnings, "manifest: ignoring unknown column: " + name);

  auto field = [&](const std::vector<std::string>& row, const char* name) -> std::string {
    const auto it = col.find(name);
    if (it == col.end() || it->second >= row.size()) return "";
    return row[it->second];
  };

  std::vector<SlideRecord> records;
  std::unordered_set<std::string> seen_ids;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto row = split_csv_line(line);
    SlideRecord rec;
    rec.slide_id = field(row, "slide_id");
    if (rec.slide_id.empty())
      throw DataError("manifest line " + std::to_string(line_no) + ": empty slide_id");
    if (!seen_ids.insert(rec.slide_id).second)
      throw DataError("manifest: duplicate slide_id: " + rec.slide_id);
    rec.image_path = field(row, "image_path");

    if (const auto s = field(row, "label"); !is_absent(s)) {
      if (const auto v = parse_label(s)) {
        rec.label = *v;
      } else {
        warn(warnings, rec.slide_id + ": unknown label '" + s + "', treated as UNKNOWN");
      }
    }
    if (const auto s = field(row, "gleason_total"); !is_absent(s)) {
      try {
        const int g = std::stoi(s);
        if (g >= 7 && g <= 10) rec.gleason_total = g;
        else warn(warnings, rec.slide_id + ": gleason_total out of range: " + s);
      } catch (...) {
        warn(warnings, rec.slide_id + ": bad gleason_total: " + s);
      }
    }
    if (const auto s = field(row, "procedure"); !is_absent(s)) {
      if (const auto v = parse_procedure(s)) rec.procedure = *v;
      else warn(warnings, rec.slide_id + ": unknown procedure '" + s + "'");
    }
    rec.scanner_profile = field(row, "scanner_profile");
    if (rec.scanner_profile == "NA") rec.scanner_profile.clear();
    if (const auto s = field(row, "stain_site"); !is_absent(s)) {
      if (const auto v = parse_stain_site(s)) rec.stain_site = *v;
      else warn(warnings, rec.slide_id + ": unknown stain_site '" + s + "'");
    }
    if (const auto s = field(row, "collection_date"); !is_absent(s)) {
      if (looks_like_iso_date(s)) rec.collection_date = s;
      else warn(warnings, rec.slide_id + ": bad collection_date '" + s + "'");
    }
    if (const auto s = field(row, "tumor_purity"); !is_absent(s)) {
      try {
        const double p = std::stod(s);
        if (p >= 0.0 && p <= 1.0) rec.tumor_purity = p;
        else warn(warnings, rec.slide_id + ": tumor_purity out of range: " + s);
      } catch (...) {
        warn(warnings, rec.slide_id + ": bad tumor_purity: " + s);
      }
    }
    if (const auto s = field(row, "paired_id"); !is_absent(s)) rec.paired_id = s;
    if (col.count("microns_per_pixel")) {
      if (const auto s = field(row, "microns_per_pixel"); !is_absent(s)) {
        try {
          const double mpp = std::stod(s);
          if (mpp > 0.0) rec.microns_per_pixel = mpp;
          else warn(warnings, rec.slide_id + ": microns_per_pixel must be positive");
        } catch (...) {
          warn(warnings, rec.slide_id + ": bad microns_per_pixel: " + s);
        }
      }
    }
    records.push_back(std::move(rec));
  }

  for (const auto& rec : records)
    if (rec.paired_id && !seen_ids.count(*rec.paired_id))
      warn(warnings, rec.slide_id + ": paired_id '" + *rec.paired_id +
                         "' not found in this manifest");
  return records;
}

std::string write_manifest(const std::vector<SlideRecord>& records) {
  std::ostringstream out;
  out << "slide_id,image_path,label,gleason_total,procedure,scanner_profile,"
         "stain_site,collection_date,tumor_purity,paired_id,microns_per_pixel\n";
  for (const auto& r : records) {
    out << csv_escape(r.slide_id) << ',' << csv_escape(r.image_path) << ','
        << to_string(r.label) << ',';
    if (r.gleason_total) out << *r.gleason_total;
    out << ',';
    if (r.procedure) out << to_string(*r.procedure);
    out << ',' << csv_escape(r.scanner_profile) << ',';
    if (r.stain_site) out << to_string(*r.stain_site);
    out << ',';
    if (r.collection_date) out << *r.collection_date;
    out << ',';
    if (r.tumor_purity) out << *r.tumor_purity;
    out << ',';
    if (r.paired_id) out << csv_escape(*r.paired_id);
    out << ',' << r.microns_per_pixel << '\n';
  }
  return out.str();
}

std::vector<SlideRecord> load_manifest(const std::string& path,
                                       std::vector<std::string>* warnings) {
  return parse_manifest(read_text_file(path), warnings);
}

TissueMask compute_tissue_mask(const SlideImage& image, const MaskParams& params) {
  const ImageU8& img = image.pixels;
  TissueMask mask;
  mask.height = img.height;
  mask.width = img.width;
  const size_t n = static_cast<size_t>(img.height) * img.width;
  mask.tissue.assign(n, 0);
  mask.marker.assign(n, 0);
  for (size_t i = 0; i < n; ++i) {
    const double r = img.px[i * 3 + 0];
    const double g = img.px[i * 3 + 1];
    const double b = img.px[i * 3 + 2];
    double h, s, v;
    rgb_to_hsv(r, g, b, h, s, v);
    if (s >= params.marker_saturation_min && in_hue_bands(h, params.marker_hue_bands)) {
      mask.marker[i] = 1;
      continue;  // marker wins
    }
    if (luminance601(r, g, b) < params.white_threshold && s >= params.tissue_saturation_min)
      mask.tissue[i] = 1;
  }
  return mask;
}

std::vector<TileRef> extract_tiles(const SlideImage& image, const TissueMask& mask,
                                   int magnification, double min_tissue_fraction) {
  if (magnification != 5 && magnification != 10 && magnification != 20)
    throw DataError("magnification must be 5, 10 or 20");
  if (min_tissue_fraction < 0.0 || min_tissue_fraction > 1.0)
    throw DataError("min_tissue_fraction must be in [0,1]");
  if (mask.height != image.pixels.height || mask.width != image.pixels.width)
    throw DataError("mask dimensions do not match image");

  const int factor = SlideImage::kNativeMagnification / magnification;
  const int foot = TileRef::kSizePx * factor;  // native-pixel footprint edge
  const int nx = image.pixels.width / foot;
  const int ny = image.pixels.height / foot;

  std::vector<TileRef> tiles;
  for (int gy = 0; gy < ny; ++gy) {
    for (int gx = 0; gx < nx; ++gx) {
      size_t tissue = 0, marker = 0;
      const int y0 = gy * foot, x0 = gx * foot;
      for (int y = y0; y < y0 + foot; ++y) {
        const size_t row = static_cast<size_t>(y) * mask.width;
        for (int x = x0; x < x0 + foot; ++x) {
          tissue += mask.tissue[row + x];
          marker += mask.marker[row + x];
        }
      }
      if (marker > 0) continue;
      const double frac = static_cast<double>(tissue) / (static_cast<double>(foot) * foot);
      if (frac >= min_tissue_fraction)
        tiles.push_back(TileRef{"", gx, gy, magnification});
    }
  }
  return tiles;
}

ImageU8 downsample_block_mean(const ImageU8& img, int factor) {
  if (factor == 1) return img;
  const int h = img.height / factor;
  const int w = img.width / factor;
  ImageU8 out(h, w);
  const unsigned denom = static_cast<unsigned>(factor) * factor;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      unsigned sum[3] = {0, 0, 0};
      for (int dy = 0; dy < factor; ++dy) {
        const uint8_t* row = img.px.data() +
            ((static_cast<size_t>(y) * factor + dy) * img.width + static_cast<size_t>(x) * factor) * 3;
        for (int dx = 0; dx < factor; ++dx) {
          sum[0] += row[dx * 3 + 0];
          sum[1] += row[dx * 3 + 1];
          sum[2] += row[dx * 3 + 2];
        }
      }
      // round half up
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = static_cast<uint8_t>((2 * sum[c] + denom) / (2 * denom));
    }
  }
  return out;
}

ImageU8 load_tile(const SlideImage& image, const TileRef& ref) {
  const int factor = SlideImage::kNativeMagnification / ref.magnification;
  const int foot = TileRef::kSizePx * factor;
  const int x0 = ref.grid_x * foot;
  const int y0 = ref.grid_y * foot;
  if (ref.grid_x < 0 || ref.grid_y < 0 || x0 + foot > image.pixels.width ||
      y0 + foot > image.pixels.height)
    throw DataError("tile footprint out of bounds: grid (" + std::to_string(ref.grid_x) +
                    "," + std::to_string(ref.grid_y) + ") at " +
                    std::to_string(ref.magnification) + "x");

  // Crop the native footprint, then block-mean it; equivalent to
  // downsampling the whole image first since footprints are factor-aligned.
  ImageU8 crop(foot, foot);
  for (int y = 0; y < foot; ++y) {
    const uint8_t* src = image.pixels.px.data() +
        ((static_cast<size_t>(y0) + y) * image.pixels.width + x0) * 3;
    std::copy(src, src + static_cast<size_t>(foot) * 3,
              crop.px.data() + static_cast<size_t>(y) * foot * 3);
  }
  return downsample_block_mean(crop, factor);
}

double tissue_area_mm2(const TissueMask& mask, double microns_per_pixel) {
  size_t count = 0;
  for (uint8_t v : mask.tissue) count += v;
  return static_cast<double>(count) * microns_per_pixel * microns_per_pixel / 1e6;
}

}  // namespace msimil::slideio
