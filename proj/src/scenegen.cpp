#include "arwb/scenegen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "arwb/errors.hpp"
#include "arwb/rng.hpp"

namespace arwb {
namespace {

using Color = std::array<float, 3>;
constexpr std::size_t N = kImageSize;

void fill_rect(Tensor& img, float x0, float y0, float x1, float y1, const Color& c) {
  // Area-weighted coverage so that sub-pixel edges stay visible.
  const auto lo_y = static_cast<std::size_t>(std::max(0.0f, std::floor(y0)));
  const auto hi_y = static_cast<std::size_t>(std::min<float>(N, std::ceil(y1)));
  const auto lo_x = static_cast<std::size_t>(std::max(0.0f, std::floor(x0)));
  const auto hi_x = static_cast<std::size_t>(std::min<float>(N, std::ceil(x1)));
  for (std::size_t y = lo_y; y < hi_y; ++y) {
    const float cy = std::min(y1, static_cast<float>(y + 1)) - std::max(y0, static_cast<float>(y));
    if (cy <= 0) continue;
    for (std::size_t x = lo_x; x < hi_x; ++x) {
      const float cx = std::min(x1, static_cast<float>(x + 1)) - std::max(x0, static_cast<float>(x));
      if (cx <= 0) continue;
      const float a = cx * cy;
      for (std::size_t k = 0; k < 3; ++k) img.at(y, x, k) = (1 - a) * img.at(y, x, k) + a * c[k];
    }
  }
}

bool in_octagon(float px, float py, float apothem) {
  px = std::abs(px);
  py = std::abs(py);
  return px <= apothem && py <= apothem && (px + py) <= apothem * std::numbers::sqrt2_v<float>;
}

Color random_color(Rng& rng, double lo, double hi) {
  return {static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi)),
          static_cast<float>(rng.uniform(lo, hi))};
}

void smooth_background(Tensor& img, Rng& rng) {
  constexpr std::size_t G = 5;
  std::array<std::array<Color, G>, G> grid{};
  for (auto& row : grid)
    for (auto& c : row) c = random_color(rng, 0.15, 0.75);
  const float step = static_cast<float>(N - 1) / static_cast<float>(G - 1);
  for (std::size_t y = 0; y < N; ++y)
    for (std::size_t x = 0; x < N; ++x) {
      const float gx = static_cast<float>(x) / step, gy = static_cast<float>(y) / step;
      const auto ix = std::min<std::size_t>(static_cast<std::size_t>(gx), G - 2);
      const auto iy = std::min<std::size_t>(static_cast<std::size_t>(gy), G - 2);
      const float ax = gx - static_cast<float>(ix), ay = gy - static_cast<float>(iy);
      for (std::size_t k = 0; k < 3; ++k)
        img.at(y, x, k) = (1 - ax) * (1 - ay) * grid[iy][ix][k] + ax * (1 - ay) * grid[iy][ix + 1][k] +
                          (1 - ax) * ay * grid[iy + 1][ix][k] + ax * ay * grid[iy + 1][ix + 1][k];
    }
}

std::string csv_escape_check(const std::string& s) {
  if (s.find_first_of(",\n\"") != std::string::npos)
    throw IoError("path contains characters not allowed in the manifest: " + s);
  return s;
}

}  // namespace

std::string to_string(DatasetKind k) { return k == DatasetKind::Sign ? "sign" : "road"; }
std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

SignScene render_sign_scene(std::uint64_t seed, bool with_sign) {
  Rng rng(seed);
  SignScene s;
  s.image = Tensor(image_shape(), 0.0f);
  smooth_background(s.image, rng);

  const auto clutter = rng.uniform_int(2, 4);
  for (std::int64_t i = 0; i < clutter; ++i) {
    const float w = static_cast<float>(rng.uniform(5.0, 20.0));
    const float h = static_cast<float>(rng.uniform(5.0, 20.0));
    const float x0 = static_cast<float>(rng.uniform(0.0, N - w));
    const float y0 = static_cast<float>(rng.uniform(0.0, N - h));
    fill_rect(s.image, x0, y0, x0 + w, y0 + h, random_color(rng, 0.0, 1.0));
  }

  s.has_sign = with_sign;
  if (with_sign) {
    const float a = static_cast<float>(rng.uniform(7.0, 15.0));
    const float cx = static_cast<float>(rng.uniform(a + 1.0, N - a - 1.0));
    const float cy = static_cast<float>(rng.uniform(a + 1.0, N - a - 1.0));
    const Color red{static_cast<float>(rng.uniform(0.7, 0.95)), static_cast<float>(rng.uniform(0.0, 0.15)),
                    static_cast<float>(rng.uniform(0.0, 0.15))};
    const float white = static_cast<float>(rng.uniform(0.85, 1.0));
    const float rim = 0.82f * a;
    for (std::size_t y = 0; y < N; ++y)
      for (std::size_t x = 0; x < N; ++x) {
        const float px = static_cast<float>(x) + 0.5f - cx, py = static_cast<float>(y) + 0.5f - cy;
        if (!in_octagon(px, py, a)) continue;
        const bool inner = in_octagon(px, py, rim);
        for (std::size_t k = 0; k < 3; ++k) s.image.at(y, x, k) = inner ? red[k] : white;
      }
    s.gt_box = {cx, cy, 2 * a, 2 * a};
  }
  return s;
}

std::size_t positive_count(std::size_t n) { return (7 * n + 5) / 10; }

DatasetManifest generate_sign_dataset(std::size_t n, std::uint64_t seed) {
  require(n >= 1, "generate_sign_dataset: n must be >= 1");
  Rng rng(seed);
  const auto order = rng.permutation(n);
  std::vector<bool> positive(n, false);
  for (std::size_t i = 0; i < positive_count(n); ++i) positive[order[i]] = true;

  DatasetManifest m;
  m.kind = DatasetKind::Sign;
  m.seed = seed;
  m.entries.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto scene = render_sign_scene(Rng::mix(seed, i), positive[i]);
    Sample s;
    s.image = std::move(scene.image);
    s.labels.has_sign = scene.has_sign;
    s.labels.box = scene.gt_box;
    m.entries.push_back(std::move(s));
  }
  return m;
}

int lead_width_px(double distance_m) { return static_cast<int>(std::lround(kCameraK / distance_m)); }

RoadScene render_road_scene(double distance_m, std::uint64_t seed) {
  require(distance_m >= kMinDistance && distance_m <= kMaxDistance,
          "road scene distance must lie in [5, 80] m");
  Rng rng(seed);
  constexpr float horizon = 24.0f;
  const Color sky_top = {static_cast<float>(rng.uniform(0.35, 0.55)), static_cast<float>(rng.uniform(0.55, 0.7)),
                         static_cast<float>(rng.uniform(0.8, 0.95))};
  const Color ground = random_color(rng, 0.25, 0.45);
  const float road_gray = static_cast<float>(rng.uniform(0.3, 0.45));
  const Color car = random_color(rng, 0.05, 0.9);
  const double lateral_m = rng.uniform(-0.3, 0.3);

  RoadScene s;
  s.distance_m = static_cast<float>(distance_m);
  s.image = Tensor(image_shape(), 0.0f);
  for (std::size_t y = 0; y < N; ++y) {
    const float fy = static_cast<float>(y);
    for (std::size_t x = 0; x < N; ++x) {
      Color c;
      if (fy < horizon) {
        const float t = fy / horizon;
        for (std::size_t k = 0; k < 3; ++k) c[k] = sky_top[k] * (1 - 0.3f * t) + 0.3f * t;
      } else {
        const float half = 3.0f + (fy - horizon) * 0.8f;
        const float dx = std::abs(static_cast<float>(x) + 0.5f - 32.0f);
        if (dx < half) {
          const bool marking = dx > half - 1.0f;
          c = marking ? Color{0.85f, 0.85f, 0.85f} : Color{road_gray, road_gray, road_gray};
        } else {
          c = ground;
        }
      }
      for (std::size_t k = 0; k < 3; ++k) s.image.at(y, x, k) = c[k];
    }
  }

  const double raw_w = kCameraK / distance_m;
  s.width_clamped = raw_w > kMaxLeadWidth;
  const float w = static_cast<float>(std::min<double>(raw_w, kMaxLeadWidth));
  const float h = 0.8f * w;
  const float bottom = std::min(horizon + static_cast<float>(320.0 / distance_m), static_cast<float>(N));
  float cx = 32.0f + static_cast<float>(lateral_m * kCameraK / distance_m);
  cx = std::clamp(cx, w / 2, static_cast<float>(N) - w / 2);
  const float top = bottom - h;

  fill_rect(s.image, cx - w / 2, top, cx + w / 2, bottom, car);
  const Color glass{0.15f, 0.2f, 0.3f};
  fill_rect(s.image, cx - 0.38f * w, top + 0.1f * h, cx + 0.38f * w, top + 0.45f * h, glass);
  const Color tail{0.95f, 0.1f, 0.05f};
  fill_rect(s.image, cx - 0.47f * w, bottom - 0.4f * h, cx - 0.3f * w, bottom - 0.25f * h, tail);
  fill_rect(s.image, cx + 0.3f * w, bottom - 0.4f * h, cx + 0.47f * w, bottom - 0.25f * h, tail);

  const float label_w = std::min(static_cast<float>(lead_width_px(distance_m)), kMaxLeadWidth);
  const float label_h = std::round(0.8f * label_w);
  const float x0 = std::clamp(cx - label_w / 2, 0.0f, static_cast<float>(N));
  const float x1 = std::clamp(cx + label_w / 2, 0.0f, static_cast<float>(N));
  const float y1 = std::clamp(bottom, 0.0f, static_cast<float>(N));
  const float y0 = std::clamp(bottom - label_h, 0.0f, static_cast<float>(N));
  s.lead_box = Box::from_corners(x0, y0, x1, y1);
  return s;
}

std::vector<RoadScene> generate_road_sequence(std::size_t frames, double d0, double d1,
                                              std::uint64_t seed) {
  require(frames >= 1, "generate_road_sequence: frames must be >= 1");
  require(d0 >= kMinDistance && d0 <= kMaxDistance && d1 >= kMinDistance && d1 <= kMaxDistance,
          "generate_road_sequence: distances must lie in [5, 80] m");
  std::vector<RoadScene> out;
  out.reserve(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    const double t = frames == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(frames - 1);
    out.push_back(render_road_scene(d0 + (d1 - d0) * t, seed));
  }
  return out;
}

std::vector<std::vector<RoadScene>> generate_road_sequences(std::size_t count, std::size_t frames,
                                                             std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<RoadScene>> out;
  for (std::size_t k = 0; k < count; ++k) {
    const double d0 = rng.uniform(kMinDistance, kMaxDistance);
    const double d1 = std::clamp(d0 + rng.uniform(-10.0, 10.0), kMinDistance, kMaxDistance);
    out.push_back(generate_road_sequence(frames, d0, d1, Rng::mix(seed, k)));
  }
  return out;
}

std::vector<RoadScene> to_road_scenes(const DatasetManifest& m) {
  require(m.kind == DatasetKind::Road, "to_road_scenes: not a road dataset");
  std::vector<RoadScene> out;
  for (const auto& s : m.entries) out.push_back({s.image, s.labels.distance_m, s.labels.box, false});
  return out;
}

DatasetManifest to_manifest(const std::vector<RoadScene>& frames, std::uint64_t seed) {
  DatasetManifest m;
  m.kind = DatasetKind::Road;
  m.seed = seed;
  for (const auto& f : frames) {
    Sample s;
    s.image = f.image;
    s.labels.box = f.lead_box;
    s.labels.distance_m = f.distance_m;
    m.entries.push_back(std::move(s));
  }
  return m;
}

DatasetManifest generate_road_dataset(std::size_t n, std::uint64_t seed) {
  require(n >= 1, "generate_road_dataset: n must be >= 1");
  Rng rng(seed);
  std::vector<RoadScene> scenes;
  scenes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double d = rng.uniform(kMinDistance, kMaxDistance);
    scenes.push_back(render_road_scene(d, Rng::mix(seed, i)));
  }
  return to_manifest(scenes, seed);
}

Tensor sign_mask(const Box& box) {
  Tensor m(image_shape(), 0.0f);
  const float a = std::min(box.w, box.h) / 2;
  for (std::size_t y = 0; y < N; ++y)
    for (std::size_t x = 0; x < N; ++x)
      if (in_octagon(static_cast<float>(x) + 0.5f - box.cx, static_cast<float>(y) + 0.5f - box.cy, a))
        for (std::size_t k = 0; k < 3; ++k) m.at(y, x, k) = 1.0f;
  return m;
}

std::pair<DatasetManifest, DatasetManifest> train_test_split(const DatasetManifest& m,
                                                             double test_fraction,
                                                             std::uint64_t seed) {
  require(test_fraction > 0.0 && test_fraction < 1.0, "train_test_split: fraction must be in (0,1)");
  Rng rng(seed);
  const auto perm = rng.permutation(m.size());
  const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(m.size())));
  DatasetManifest train{m.kind, Split::Train, seed, {}};
  DatasetManifest test{m.kind, Split::Test, seed, {}};
  for (std::size_t i = 0; i < perm.size(); ++i)
    (i < n_test ? test : train).entries.push_back(m.entries[perm[i]]);
  return {std::move(train), std::move(test)};
}

std::string encode_ppm(const Tensor& image, const std::string& comment) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("encode_ppm expects H x W x 3");
  std::ostringstream os;
  os << "P6\n";
  if (!comment.empty()) os << "# " << comment << "\n";
  os << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
  std::string out = os.str();
  out.reserve(out.size() + image.numel());
  for (float v : image.data())
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  return out;
}

Tensor decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space_and_comments = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&]() -> std::size_t {
    skip_space_and_comments();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos || pos - start > 6) throw FormatError("ppm: malformed header number");
    return static_cast<std::size_t>(std::stoul(bytes.substr(start, pos - start)));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: missing P6 magic");
  pos = 2;
  const std::size_t w = read_uint();
  const std::size_t h = read_uint();
  const std::size_t maxval = read_uint();
  if (w == 0 || h == 0) throw FormatError("ppm: zero dimension");
  if (maxval != 255) throw FormatError("ppm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw FormatError("ppm: missing separator after maxval");
  ++pos;
  const std::size_t need = w * h * 3;
  if (bytes.size() - pos < need) throw FormatError("ppm: truncated payload");
  std::vector<float> v(need);
  for (std::size_t i = 0; i < need; ++i)
    v[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
  return Tensor({h, w, 3}, std::move(v));
}

void write_ppm(const std::filesystem::path& path, const Tensor& image, const std::string& comment) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  const auto bytes = encode_ppm(image, comment);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_ppm(ss.str());
}

void write_dataset(const std::filesystem::path& dir, const DatasetManifest& m, const std::string& header) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream csv(dir / "manifest.csv");
  if (!csv) throw IoError("cannot write " + (dir / "manifest.csv").string());
  csv << std::setprecision(9);
  csv << "# " << header << "\n";
  csv << "path,kind,split,has_sign,cx,cy,w,h,distance_m\n";
  char name[32];
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& e = m.entries[i];
    std::snprintf(name, sizeof name, "img_%05zu.ppm", i);
    write_ppm(dir / name, e.image, header);
    const auto& b = e.labels.box;
    csv << csv_escape_check(name) << ',' << to_string(m.kind) << ',' << to_string(m.split) << ','
        << (e.labels.has_sign ? 1 : 0) << ',' << b.cx << ',' << b.cy << ',' << b.w << ',' << b.h << ','
        << e.labels.distance_m << '\n';
  }
  if (!csv) throw IoError("write failed: manifest.csv");
}

DatasetManifest load_dataset(const std::filesystem::path& dir) {
  std::ifstream csv(dir / "manifest.csv");
  if (!csv) throw IoError("missing dataset manifest: " + (dir / "manifest.csv").string());
  DatasetManifest m;
  std::string line;
  bool header_seen = false;
  while (std::getline(csv, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw FormatError("manifest row has " + std::to_string(f.size()) + " columns");
    Sample s;
    s.path = (dir / f[0]).string();
    s.image = read_ppm(dir / f[0]);
    m.kind = f[1] == "road" ? DatasetKind::Road : DatasetKind::Sign;
    m.split = f[2] == "test" ? Split::Test : Split::Train;
    s.labels.has_sign = f[3] == "1";
    s.labels.box = {std::stof(f[4]), std::stof(f[5]), std::stof(f[6]), std::stof(f[7])};
    s.labels.distance_m = std::stof(f[8]);
    m.entries.push_back(std::move(s));
  }
  return m;
}

}  // namespace arwb
