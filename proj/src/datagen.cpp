#include "aunet/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <unordered_map>

#include "aunet/error.hpp"
#include "aunet/rng.hpp"

namespace aunet {

namespace fs = std::filesystem;
using nlohmann::json;

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kRgb: return "RGB";
    case Modality::kNir: return "NIR";
    case Modality::kTir: return "TIR";
  }
  return "?";
}

char modality_letter(Modality m) { return "RNT"[index_of(m)]; }

std::string AvailabilityVector::bits() const {
  std::string s;
  for (bool b : bits_) s.push_back(b ? '1' : '0');
  return s;
}

AvailabilityVector AvailabilityVector::parse(const std::string& s) {
  if (s.size() != 3 || s.find_first_not_of("01") != std::string::npos)
    throw UsageError("availability must be three 0/1 digits in R,N,T order, got '" + s + "'");
  return {s[0] == '1', s[1] == '1', s[2] == '1'};
}

std::string AvailabilityVector::label() const {
  // Pairs follow table convention: RN, NT, RT.
  if (bits_[0] && bits_[2] && !bits_[1]) return "RT";
  std::string s;
  for (Modality m : kModalities)
    if ((*this)[m]) s.push_back(modality_letter(m));
  return s;
}

std::string AvailabilityVector::long_label() const {
  std::string s;
  for (char c : label()) {
    if (!s.empty()) s += '-';
    s += c == 'R' ? "RGB" : c == 'N' ? "NIR" : "TIR";
  }
  return s;
}

const std::array<AvailabilityVector, 7>& all_combos() {
  static const std::array<AvailabilityVector, 7> combos = {
      AvailabilityVector{true, false, false}, AvailabilityVector{false, true, false},
      AvailabilityVector{false, false, true}, AvailabilityVector{true, true, false},
      AvailabilityVector{false, true, true},  AvailabilityVector{true, false, true},
      AvailabilityVector{true, true, true}};
  return combos;
}

bool Image::is_zero() const {
  return std::all_of(pixels.begin(), pixels.end(), [](double v) { return v == 0.0; });
}

const char* illumination_name(Illumination i) { return i == Illumination::kDay ? "day" : "night"; }

void SceneConfig::validate() const {
  if (height <= 0 || width <= 0) throw ConfigError("scene size must be positive");
  if (min_pedestrians < 1)
    throw ConfigError("every scene needs at least one pedestrian (min_pedestrians >= 1)");
  if (max_pedestrians < min_pedestrians) throw ConfigError("empty pedestrian count range");
  if (min_pedestrian_height <= 0 || max_pedestrian_height < min_pedestrian_height)
    throw ConfigError("invalid pedestrian height range");
  if (max_pedestrian_height > height) throw ConfigError("pedestrians taller than the image");
  if (min_aspect <= 0 || max_aspect < min_aspect) throw ConfigError("invalid aspect range");
  if (max_pedestrian_height * max_aspect > width) throw ConfigError("pedestrians wider than the image");
  if (night_fraction < 0.0 || night_fraction > 1.0) throw ConfigError("night_fraction outside [0,1]");
  if (max_streetlights < 0 || max_vehicles < 0) throw ConfigError("negative distractor count");
}

namespace {

// Single-channel float plane used while composing a scene.
struct Plane {
  int h, w;
  std::vector<double> v;
  Plane(int h_, int w_, double fill = 0.0) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}
  double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

// Smooth noise in [-1, 1]: a coarse random lattice, bilinearly upsampled.
Plane smooth_noise(int h, int w, int cells, Rng& rng) {
  std::vector<double> lattice(static_cast<std::size_t>(cells + 1) * (cells + 1));
  for (double& x : lattice) x = rng.uniform(-1.0, 1.0);
  Plane p(h, w);
  for (int y = 0; y < h; ++y) {
    const double fy = (y + 0.5) / h * cells;
    const int iy = std::min(static_cast<int>(fy), cells - 1);
    const double ty = fy - iy;
    for (int x = 0; x < w; ++x) {
      const double fx = (x + 0.5) / w * cells;
      const int ix = std::min(static_cast<int>(fx), cells - 1);
      const double tx = fx - ix;
      auto l = [&](int a, int b) { return lattice[static_cast<std::size_t>(a) * (cells + 1) + b]; };
      const double top = l(iy, ix) * (1 - tx) + l(iy, ix + 1) * tx;
      const double bot = l(iy + 1, ix) * (1 - tx) + l(iy + 1, ix + 1) * tx;
      p.at(y, x) = top * (1 - ty) + bot * ty;
    }
  }
  return p;
}

struct Pedestrian {
  int x0, y0, w, h;
  std::vector<std::uint8_t> mask;  // w*h, 1 = body pixel
  std::array<double, 3> clothing;
  std::array<double, 3> skin;
  double stripe_freq;
  double stripe_phase;
  double nir_reflectance;
  double heat;

  bool inside(int y, int x) const {
    const int ly = y - y0, lx = x - x0;
    if (ly < 0 || lx < 0 || ly >= h || lx >= w) return false;
    return mask[static_cast<std::size_t>(ly) * w + lx] != 0;
  }
  bool is_head(int y) const { return y - y0 < head_rows(); }
  int head_rows() const { return std::max(2, static_cast<int>(std::lround(0.22 * h))); }
  // Horizontal clothing stripes give RGB/NIR their texture.
  double stripe(int y) const { return std::sin(stripe_freq * (y - y0) + stripe_phase); }
};

// Head ellipse over the top rows, full-width torso, two legs with a gap.
std::vector<std::uint8_t> pedestrian_mask(int w, int h, int head_rows) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(w) * h, 0);
  const double head_a = std::max(1.0, 0.3 * w);
  const double head_b = 0.5 * head_rows;
  const double head_cx = 0.5 * w;
  const int leg_start = head_rows + static_cast<int>(std::lround(0.45 * (h - head_rows)));
  const int gap = std::max(1, w / 5);
  const int gap_x0 = (w - gap) / 2;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool on;
      if (y < head_rows) {
        const double dx = (x + 0.5 - head_cx) / head_a;
        const double dy = (y + 0.5 - head_b) / head_b;
        on = dx * dx + dy * dy <= 1.0 || (y == 0 && x == w / 2);
      } else if (y < leg_start) {
        on = true;
      } else {
        on = x < gap_x0 || x >= gap_x0 + gap;
      }
      m[static_cast<std::size_t>(y) * w + x] = on ? 1 : 0;
    }
  return m;
}

struct Vehicle {
  int x0, y0, w, h;
  std::array<double, 3> color;
  double heat;
  bool inside(int y, int x) const { return x >= x0 && x < x0 + w && y >= y0 && y < y0 + h; }
};

struct Streetlight {
  double cx, cy, radius, peak;
};

bool overlaps(int ax, int ay, int aw, int ah, int bx, int by, int bw, int bh, int margin) {
  return ax < bx + bw + margin && bx < ax + aw + margin && ay < by + bh + margin &&
         by < ay + ah + margin;
}

double quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<double>(std::lround(v * 255.0)) / 255.0;
}

Image to_image(const std::array<Plane, 3>& planes) {
  const int h = planes[0].h, w = planes[0].w;
  Image img = Image::zeros(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = quantize(planes[c].at(y, x));
  return img;
}

}  // namespace

ModalSample generate_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  Rng rng(derive_seed(seed, 0x5ce7e, static_cast<std::uint64_t>(config.version)));
  const int H = config.height, W = config.width;

  ModalSample s;
  s.seed = seed;
  s.availability = {true, true, true};
  const bool night = config.force_illumination
                         ? *config.force_illumination == Illumination::kNight
                         : rng.bernoulli(config.night_fraction);
  s.illumination = night ? Illumination::kNight : Illumination::kDay;

  // Geometry.
  std::vector<Pedestrian> peds;
  const int want = rng.uniform_int(config.min_pedestrians, config.max_pedestrians);
  int attempts = 0;
  while (static_cast<int>(peds.size()) < want) {
    const double ph = rng.uniform(config.min_pedestrian_height, config.max_pedestrian_height);
    const double aspect = rng.uniform(config.min_aspect, config.max_aspect);
    int h = std::max(4, static_cast<int>(std::lround(ph)));
    int w = std::max(3, static_cast<int>(std::lround(ph * aspect)));
    // Late attempts shrink the figure so crowded configs still terminate.
    if (attempts > 200) {
      h = std::max(4, h / 2);
      w = std::max(3, w / 2);
    }
    const int x0 = rng.uniform_int(0, W - w);
    const int y0 = rng.uniform_int(0, H - h);
    ++attempts;
    bool clash = false;
    for (const auto& p : peds)
      if (overlaps(x0, y0, w, h, p.x0, p.y0, p.w, p.h, 1)) clash = true;
    if (clash) {
      if (attempts > 400) {
        if (peds.size() >= static_cast<std::size_t>(config.min_pedestrians)) break;
        throw ConfigError("cannot place the minimum number of pedestrians without overlap");
      }
      continue;
    }
    Pedestrian p;
    p.x0 = x0;
    p.y0 = y0;
    p.w = w;
    p.h = h;
    p.mask = pedestrian_mask(w, h, p.head_rows());
    for (double& c : p.clothing) c = rng.uniform(0.05, 0.95);
    p.skin = {rng.uniform(0.55, 0.85), 0.0, 0.0};
    p.skin[1] = p.skin[0] * 0.8;
    p.skin[2] = p.skin[0] * 0.65;
    p.stripe_freq = rng.uniform(0.9, 2.2);
    p.stripe_phase = rng.uniform(0.0, 6.283185307179586);
    p.nir_reflectance = rng.uniform(0.25, 0.95);
    p.heat = rng.uniform(0.72, 0.9);
    peds.push_back(std::move(p));
  }

  std::vector<Vehicle> vehicles;
  const int n_vehicles = rng.uniform_int(0, config.max_vehicles);
  for (int i = 0; i < n_vehicles; ++i) {
    const int h = rng.uniform_int(std::max(3, H / 10), std::max(4, H / 6));
    const int w = std::min(W, static_cast<int>(std::lround(h * rng.uniform(1.8, 2.6))));
    const int x0 = rng.uniform_int(0, W - w);
    const int y0 = rng.uniform_int(0, H - h);
    bool clash = false;
    for (const auto& p : peds)
      if (overlaps(x0, y0, w, h, p.x0, p.y0, p.w, p.h, 1)) clash = true;
    if (clash) continue;
    vehicles.push_back({x0, y0, w, h, {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)},
                        rng.uniform(0.5, 0.62)});
  }

  std::vector<Streetlight> lights;
  if (night) {
    const int n_lights = rng.uniform_int(config.max_streetlights > 0 ? 1 : 0, config.max_streetlights);
    for (int i = 0; i < n_lights; ++i)
      lights.push_back({rng.uniform(0.0, W), rng.uniform(0.0, H), rng.uniform(1.5, 4.0),
                        rng.uniform(0.75, 1.0)});
  }

  // Shared background structure.
  const Plane texture = smooth_noise(H, W, 6, rng);
  const Plane fine = smooth_noise(H, W, std::max(8, W / 4), rng);
  const std::array<double, 3> bg_color = {rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8),
                                          rng.uniform(0.3, 0.8)};
  const double nir_bg = rng.uniform(0.35, 0.65);
  const double tir_bg = night ? rng.uniform(0.15, 0.25) : rng.uniform(0.3, 0.4);

  auto ped_at = [&](int y, int x) -> const Pedestrian* {
    for (const auto& p : peds)
      if (p.inside(y, x)) return &p;
    return nullptr;
  };
  auto vehicle_at = [&](int y, int x) -> const Vehicle* {
    for (const auto& v : vehicles)
      if (v.inside(y, x)) return &v;
    return nullptr;
  };

  // RGB.
  {
    const double gain = night ? rng.uniform(0.15, 0.25) : 1.0;
    const double ped_contrast = night ? 0.2 : 1.0;  // night pulls figures toward background
    std::array<Plane, 3> rgb{Plane(H, W), Plane(H, W), Plane(H, W)};
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const Pedestrian* p = ped_at(y, x);
        const Vehicle* v = vehicle_at(y, x);
        for (int c = 0; c < 3; ++c) {
          const double bg = bg_color[c] * (0.75 + 0.2 * texture.at(y, x) + 0.05 * fine.at(y, x));
          double day;
          if (p) {
            day = p->is_head(y) ? p->skin[c] : p->clothing[c] * (1.0 + 0.35 * p->stripe(y));
          } else if (v) {
            day = v->color[c] * (0.9 + 0.1 * fine.at(y, x));
          } else {
            day = bg;
          }
          double val = gain * (bg + ped_contrast * (day - bg));
          for (const auto& l : lights) {
            const double dx = x + 0.5 - l.cx, dy = y + 0.5 - l.cy;
            const double d2 = (dx * dx + dy * dy) / (l.radius * l.radius);
            const double tint = c == 2 ? 0.75 : 1.0;
            val += tint * l.peak * std::exp(-d2);
            // Reflection streak on the pavement below the lamp.
            const double ry = (y + 0.5 - l.cy - 3.0 * l.radius) / (2.5 * l.radius);
            const double rx = dx / (0.8 * l.radius);
            if (ry > -1.0) val += 0.25 * tint * l.peak * std::exp(-(rx * rx + ry * ry));
          }
          rgb[c].at(y, x) = val + 0.015 * rng.normal();
        }
      }
    s.images[index_of(Modality::kRgb)] = to_image(rgb);
  }

  // NIR: active illumination keeps texture at night.
  {
    const double gain = night ? 0.8 : 1.0;
    Plane g(H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const Pedestrian* p = ped_at(y, x);
        const Vehicle* v = vehicle_at(y, x);
        double val;
        if (p) {
          val = p->is_head(y) ? 0.5 * (p->nir_reflectance + 0.7)
                              : p->nir_reflectance * (1.0 + 0.3 * p->stripe(y));
        } else if (v) {
          val = 0.3 + 0.4 * v->color[1];
        } else {
          val = nir_bg * (1.0 + 0.3 * texture.at(y, x) + 0.1 * fine.at(y, x));
        }
        g.at(y, x) = gain * val + 0.02 * rng.normal();
      }
    s.images[index_of(Modality::kNir)] = to_image({g, g, g});
  }

  // TIR: bright, nearly textureless silhouettes day and night.
  {
    Plane g(H, W);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const Pedestrian* p = ped_at(y, x);
        const Vehicle* v = vehicle_at(y, x);
        double val;
        if (p) {
          val = p->heat + (p->is_head(y) ? 0.04 : 0.0);
        } else if (v) {
          val = v->heat;
        } else {
          val = tir_bg + 0.04 * texture.at(y, x);
        }
        g.at(y, x) = val + 0.01 * rng.normal();
      }
    s.images[index_of(Modality::kTir)] = to_image({g, g, g});
  }

  // Boxes are the exact extents of the rendered body masks.
  for (const auto& p : peds) {
    int mx0 = p.w, my0 = p.h, mx1 = -1, my1 = -1;
    for (int y = 0; y < p.h; ++y)
      for (int x = 0; x < p.w; ++x)
        if (p.mask[static_cast<std::size_t>(y) * p.w + x]) {
          mx0 = std::min(mx0, x);
          my0 = std::min(my0, y);
          mx1 = std::max(mx1, x);
          my1 = std::max(my1, y);
        }
    s.boxes.push_back(BoundingBox::from_corners(p.x0 + mx0, p.y0 + my0, p.x0 + mx1 + 1.0,
                                                p.y0 + my1 + 1.0));
  }
  return s;
}

ModalSample drop_modalities(const ModalSample& sample, AvailabilityVector mask) {
  if (!mask.any()) throw InvalidMaskError("modality mask (0,0,0) removes every input");
  ModalSample out = sample;
  for (Modality m : kModalities) {
    if (mask[m]) continue;
    Image& img = out.images[index_of(m)];
    std::fill(img.pixels.begin(), img.pixels.end(), 0.0);
    out.availability.set(m, false);
  }
  return out;
}

std::size_t DistributionMap::count() const {
  return static_cast<std::size_t>(std::count(grid.begin(), grid.end(), std::uint8_t{1}));
}

DistributionMap render_distribution_map(std::span<const BoundingBox> boxes, int h, int w) {
  if (h <= 0 || w <= 0) throw ShapeError("distribution map size must be positive");
  DistributionMap map{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  for (const auto& b : boxes) {
    const double a = 0.5 * b.w, bb = 0.5 * b.h;
    if (!(a > 0.0) || !(bb > 0.0))
      throw DegenerateBoxError("box with zero half-extent cannot define an ellipse");
    const double a2 = a * a, b2 = bb * bb;
    for (int y = 0; y < h; ++y) {
      const double dy = y - b.cy;
      const double ty = dy * dy / b2;
      if (ty >= 1.0 + kEllipseEpsilon) continue;
      for (int x = 0; x < w; ++x) {
        const double dx = x - b.cx;
        if (dx * dx / a2 + ty < 1.0 + kEllipseEpsilon) map.grid[static_cast<std::size_t>(y) * w + x] = 1;
      }
    }
  }
  return map;
}

BoundingBox to_feature_frame(const BoundingBox& box, int stride) {
  const double s = static_cast<double>(stride);
  return {box.cx / s - 0.5, box.cy / s - 0.5, box.w / s, box.h / s};
}

void assign_split(Dataset& ds, double train_fraction) {
  if (train_fraction < 0.0 || train_fraction > 1.0) throw ConfigError("train fraction outside [0,1]");
  const std::size_t n = ds.samples.size();
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(n)));
  ds.train.clear();
  ds.test.clear();
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? ds.train : ds.test).push_back(i);
}

Dataset generate_dataset(int count, std::uint64_t seed, const SceneConfig& config,
                         double train_fraction) {
  if (count <= 0) throw ConfigError("sample count must be positive");
  Dataset ds;
  ds.samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    ModalSample s = generate_scene(derive_seed(seed, 0xda7a, static_cast<std::uint64_t>(i)), config);
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%06d", i);
    s.id = buf;
    ds.samples.push_back(std::move(s));
  }
  assign_split(ds, train_fraction);
  return ds;
}

// ---- persistence ----------------------------------------------------------

namespace {

constexpr int kDatasetFormatVersion = 1;
constexpr const char* kImageFiles[3] = {"rgb.ppm", "nir.ppm", "tir.ppm"};

void write_ppm(const Image& img, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write to " + path.string());
}

Image read_ppm(const fs::path& path, const std::string& sample_id) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IntegrityError("sample " + sample_id + ": cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw ParseError("sample " + sample_id + ": " + path.filename().string() + " is not an 8-bit P6 image");
  is.get();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw IntegrityError("sample " + sample_id + ": truncated " + path.filename().string());
  Image img = Image::zeros(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

json annotation_json(const ModalSample& s) {
  json boxes = json::array();
  for (const auto& b : s.boxes) boxes.push_back({{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}});
  return {{"id", s.id},
          {"height", s.height()},
          {"width", s.width()},
          {"availability", {int(s.availability[0]), int(s.availability[1]), int(s.availability[2])}},
          {"illumination", illumination_name(s.illumination)},
          {"seed", s.seed},
          {"boxes", boxes}};
}

std::string sample_dir_name(const ModalSample& s, std::size_t index) {
  if (!s.id.empty()) return s.id;
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%06zu", index);
  return buf;
}

ModalSample parse_annotation(const fs::path& dir, const std::string& name) {
  const fs::path ann_path = dir / "annotation.json";
  std::ifstream is(ann_path);
  if (!is) throw IntegrityError("sample " + name + ": missing annotation.json");
  ModalSample s;
  try {
    const json j = json::parse(is);
    s.id = j.at("id").get<std::string>();
    const int h = j.at("height").get<int>();
    const int w = j.at("width").get<int>();
    if (h <= 0 || w <= 0) throw ParseError("sample " + name + ": non-positive image size");
    const auto& av = j.at("availability");
    if (!av.is_array() || av.size() != 3) throw ParseError("sample " + name + ": availability needs 3 flags");
    for (std::size_t m = 0; m < 3; ++m) {
      const int bit = av[m].get<int>();
      if (bit != 0 && bit != 1) throw ParseError("sample " + name + ": availability flags must be 0 or 1");
      s.availability.set(kModalities[m], bit == 1);
    }
    const std::string illum = j.at("illumination").get<std::string>();
    if (illum != "day" && illum != "night")
      throw ParseError("sample " + name + ": unknown illumination '" + illum + "'");
    s.illumination = illum == "day" ? Illumination::kDay : Illumination::kNight;
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& b : j.at("boxes")) {
      BoundingBox box{b.at("cx").get<double>(), b.at("cy").get<double>(), b.at("w").get<double>(),
                      b.at("h").get<double>()};
      if (!(box.w > 0.0) || !(box.h > 0.0))
        throw ParseError("sample " + name + ": box with non-positive width or height");
      s.boxes.push_back(box);
    }
    for (std::size_t m = 0; m < 3; ++m) s.images[m] = Image::zeros(h, w);
  } catch (const json::exception& e) {
    throw ParseError("sample " + name + ": malformed annotation: " + e.what());
  }
  return s;
}

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json names = json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const ModalSample& s = ds.samples[i];
    const std::string name = sample_dir_name(s, i);
    const fs::path sdir = dir / name;
    fs::create_directories(sdir, ec);
    if (ec) throw IoError("cannot create " + sdir.string() + ": " + ec.message());
    for (Modality m : kModalities) {
      const fs::path img_path = sdir / kImageFiles[index_of(m)];
      if (s.availability[m]) {
        write_ppm(s.image(m), img_path);
      } else {
        fs::remove(img_path, ec);
      }
    }
    ModalSample named = s;
    named.id = name;
    std::ofstream os(sdir / "annotation.json");
    if (!os) throw IoError("cannot write annotation for " + name);
    os << annotation_json(named).dump(2) << '\n';
    names.push_back(name);
  }
  auto to_names = [&](const std::vector<std::size_t>& idx) {
    json a = json::array();
    for (std::size_t i : idx) a.push_back(names.at(i));
    return a;
  };
  const json manifest = {{"format_version", kDatasetFormatVersion},
                         {"samples", names},
                         {"train", to_names(ds.train)},
                         {"test", to_names(ds.test)}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed manifest: ") + e.what());
  }
  Dataset ds;
  std::vector<std::string> names;
  try {
    if (manifest.at("format_version").get<int>() != kDatasetFormatVersion)
      throw VersionError("unsupported dataset format version");
    names = manifest.at("samples").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed manifest: ") + e.what());
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const fs::path sdir = dir / names[i];
    if (!fs::is_directory(sdir))
      throw IntegrityError("manifest lists " + names[i] + " but the directory is missing");
    ModalSample s = parse_annotation(sdir, names[i]);
    for (Modality m : kModalities) {
      if (!s.availability[m]) continue;
      const fs::path img_path = sdir / kImageFiles[index_of(m)];
      if (!fs::exists(img_path))
        throw IntegrityError("sample " + names[i] + ": " + modality_name(m) +
                             " is marked available but " + img_path.filename().string() + " is missing");
      Image img = read_ppm(img_path, names[i]);
      if (img.height != s.height() || img.width != s.width())
        throw IntegrityError("sample " + names[i] + ": " + img_path.filename().string() +
                             " size disagrees with annotation");
      s.images[index_of(m)] = std::move(img);
    }
    index.emplace(names[i], i);
    ds.samples.push_back(std::move(s));
  }
  auto to_idx = [&](const char* key) {
    std::vector<std::size_t> out;
    for (const auto& n : manifest.at(key).get<std::vector<std::string>>()) {
      auto it = index.find(n);
      if (it == index.end()) throw IntegrityError(std::string(key) + " split references unknown sample " + n);
      out.push_back(it->second);
    }
    return out;
  };
  try {
    ds.train = to_idx("train");
    ds.test = to_idx("test");
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed manifest split: ") + e.what());
  }
  return ds;
}

}  // namespace aunet
