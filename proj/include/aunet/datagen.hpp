#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace aunet {

enum class Modality : int { kRgb = 0, kNir = 1, kTir = 2 };

inline constexpr std::array<Modality, 3> kModalities = {Modality::kRgb, Modality::kNir,
                                                        Modality::kTir};
inline constexpr int kNumModalities = 3;

inline constexpr std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }
const char* modality_name(Modality m);    // "RGB", "NIR", "TIR"
char modality_letter(Modality m);         // 'R', 'N', 'T'

// Ordered (R, N, T) availability flags.
class AvailabilityVector {
 public:
  constexpr AvailabilityVector() = default;
  constexpr AvailabilityVector(bool r, bool n, bool t) : bits_{r, n, t} {}

  constexpr bool operator[](Modality m) const { return bits_[index_of(m)]; }
  constexpr bool operator[](std::size_t i) const { return bits_[i]; }
  void set(Modality m, bool v) { bits_[index_of(m)] = v; }

  bool any() const { return bits_[0] || bits_[1] || bits_[2]; }
  int count() const { return int(bits_[0]) + int(bits_[1]) + int(bits_[2]); }

  // "101" style, in (R, N, T) order.
  std::string bits() const;
  // Throws UsageError unless `s` is three characters of 0/1.
  static AvailabilityVector parse(const std::string& s);
  // Row label used in ablation tables: R, N, T, RN, NT, RT, RNT.
  std::string label() const;
  // Human label: RGB, NIR-TIR, RGB-NIR-TIR, ...
  std::string long_label() const;

  friend constexpr bool operator==(const AvailabilityVector&, const AvailabilityVector&) = default;

 private:
  std::array<bool, 3> bits_{false, false, false};
};

// The seven non-empty combinations in table order: singles, pairs, triple.
const std::array<AvailabilityVector, 7>& all_combos();

struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  static BoundingBox from_corners(double x0, double y0, double x1, double y1) {
    return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// H x W x 3 interleaved intensities in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  static Image zeros(int h, int w) {
    return {h, w, std::vector<double>(static_cast<std::size_t>(h) * w * 3, 0.0)};
  }
  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool is_zero() const;

  friend bool operator==(const Image&, const Image&) = default;
};

enum class Illumination { kDay, kNight };
const char* illumination_name(Illumination i);

struct ModalSample {
  std::string id;
  std::array<Image, 3> images;  // indexed by Modality
  AvailabilityVector availability;
  std::vector<BoundingBox> boxes;
  Illumination illumination = Illumination::kDay;
  std::uint64_t seed = 0;

  const Image& image(Modality m) const { return images[index_of(m)]; }
  int height() const { return images[0].height; }
  int width() const { return images[0].width; }

  friend bool operator==(const ModalSample&, const ModalSample&) = default;
};

// Fixed scene vocabulary; bump `version` whenever rendering changes.
struct SceneConfig {
  int version = 1;
  int height = 64;
  int width = 64;
  int min_pedestrians = 1;
  int max_pedestrians = 3;
  double min_pedestrian_height = 24.0;
  double max_pedestrian_height = 44.0;
  double min_aspect = 0.4;  // width / height
  double max_aspect = 0.55;
  double night_fraction = 0.5;
  int max_streetlights = 3;  // RGB night distractors
  int max_vehicles = 1;      // warm non-pedestrian objects, all modalities
  std::optional<Illumination> force_illumination;

  void validate() const;
};

ModalSample generate_scene(std::uint64_t seed, const SceneConfig& config);

// Zeroes every modality whose mask bit is 0 and clears its availability bit.
ModalSample drop_modalities(const ModalSample& sample, AvailabilityVector mask);

struct DistributionMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> grid;

  std::uint8_t at(int y, int x) const { return grid[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
};

inline constexpr double kEllipseEpsilon = 1e-4;

// grid[y][x] = 1 iff some box has (x-cx)^2/a^2 + (y-cy)^2/b^2 < 1 + eps, with
// a = w/2, b = h/2 and (x, y) integer grid indices. Boxes must already be in
// the grid's coordinate frame.
DistributionMap render_distribution_map(std::span<const BoundingBox> boxes, int h, int w);

// Maps an image-pixel box onto the index frame of a feature map with the given
// stride: cell index i has its center at image coordinate (i + 0.5) * stride.
BoundingBox to_feature_frame(const BoundingBox& box, int stride);

struct Dataset {
  std::vector<ModalSample> samples;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// First round(n * train_fraction) samples train, the rest test.
void assign_split(Dataset& ds, double train_fraction);

// `count` scenes with per-sample seeds derived from `seed`, ids sample_000000...
Dataset generate_dataset(int count, std::uint64_t seed, const SceneConfig& config,
                         double train_fraction = 0.85);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace aunet
