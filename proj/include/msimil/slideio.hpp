#pragma once

#include <optional>
#include <string>
#include <vector>

#include "msimil/image.hpp"

namespace msimil::slideio {

enum class Label { MSI_H, MSS, UNKNOWN };
enum class Procedure { CORE_NEEDLE_BIOPSY, RESECTION, AMBIGUOUS_BIOPSY };
enum class StainSite { INTERNAL, EXTERNAL };

std::string to_string(Label v);
std::string to_string(Procedure v);
std::string to_string(StainSite v);

/// One clinical case row of the manifest.
struct SlideRecord {
  std::string slide_id;
  std::string image_path;
  Label label = Label::UNKNOWN;
  std::optional<int> gleason_total;          // 7..10
  std::optional<Procedure> procedure;
  std::string scanner_profile;
  std::optional<StainSite> stain_site;
  std::optional<std::string> collection_date;  // ISO-8601 date
  std::optional<double> tumor_purity;          // 0..1
  std::optional<std::string> paired_id;
  double microns_per_pixel = 0.5;  // at native 20x; optional manifest column
};

/// Single-resolution raster standing in for a WSI pyramid.
struct SlideImage {
  ImageU8 pixels;
  double microns_per_pixel = 0.5;
  static constexpr int kNativeMagnification = 20;
};

struct TissueMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> tissue;  // 1 = tissue
  std::vector<uint8_t> marker;  // 1 = pen marker; marker wins over tissue

  bool tissue_at(int y, int x) const { return tissue[static_cast<size_t>(y) * width + x] != 0; }
  bool marker_at(int y, int x) const { return marker[static_cast<size_t>(y) * width + x] != 0; }
};

struct MaskParams {
  double white_threshold = 0.92;        // Rec.601 luminance, 0..1
  double tissue_saturation_min = 0.05;  // HSV saturation, 0..1
  double marker_saturation_min = 0.30;
  // Hue bands in turns [0,1); defaults cover green and blue pen ink.
  std::vector<std::pair<double, double>> marker_hue_bands = {{0.22, 0.45}, {0.50, 0.75}};
};

struct TileRef {
  std::string slide_id;
  int grid_x = 0;
  int grid_y = 0;
  int magnification = 20;  // 5, 10 or 20
  static constexpr int kSizePx = 256;

  bool operator==(const TileRef&) const = default;
};

/// Parses the manifest CSV. Columns: slide_id,image_path,label,gleason_total,
/// procedure,scanner_profile,stain_site,collection_date,tumor_purity,paired_id
/// (+ optional microns_per_pixel). Absent values are "" or "NA".
/// Duplicate slide_id or a missing required column is a hard error; anything
/// recoverable (unknown enum string, dangling paired_id) becomes a warning and
/// the field is left absent.
std::vector<SlideRecord> parse_manifest(const std::string& text,
                                        std::vector<std::string>* warnings = nullptr);

std::string write_manifest(const std::vector<SlideRecord>& records);

std::vector<SlideRecord> load_manifest(const std::string& path,
                                       std::vector<std::string>* warnings = nullptr);

/// Luminance/saturation threshold heuristic standing in for a learned
/// segmenter. A pixel is tissue iff it is non-white and non-gray; it is
/// marker iff it is saturated with hue inside one of the configured ink
/// bands. Marker overrides tissue.
TissueMask compute_tissue_mask(const SlideImage& image, const MaskParams& params = {});

/// Non-overlapping 256px grid tiles at the requested magnification, row-major
/// (grid_y outer, grid_x inner). A tile is kept iff the tissue fraction over
/// its native footprint is >= min_tissue_fraction and it contains no marker.
/// Partial edge tiles are discarded.
std::vector<TileRef> extract_tiles(const SlideImage& image, const TissueMask& mask,
                                   int magnification, double min_tissue_fraction);

/// Cuts the 256x256 tile at ref's grid position after block-mean
/// downsampling by 20/magnification (round half up to 8 bits).
ImageU8 load_tile(const SlideImage& image, const TileRef& ref);

/// Block-mean downsample by an integer factor; remainder rows/cols dropped.
ImageU8 downsample_block_mean(const ImageU8& img, int factor);

double tissue_area_mm2(const TissueMask& mask, double microns_per_pixel);

}  // namespace msimil::slideio
