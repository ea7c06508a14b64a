#include "arwb/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "arwb/grad.hpp"
#include "arwb/hash.hpp"
#include "arwb/ops.hpp"
#include "arwb/rng.hpp"

namespace arwb {
namespace {

constexpr std::size_t kMapSize = 7;
constexpr std::size_t kMapChannels = 32;
constexpr std::size_t kFeatures = kMapSize * kMapSize * kMapChannels;
// Each grid cell reads a 4 x 4 window of the feature map (zero beyond edges).
constexpr std::size_t kWindow = 4;
constexpr std::size_t kMapPad = 2;
constexpr std::size_t kCellWindow = kWindow * kWindow * kMapChannels;
constexpr float kDistanceScale = 80.0f;
constexpr float kBoxWeight = 5.0f;
constexpr float kPositiveCellWeight = 4.0f;

Tensor use(const ModelBundle& m, const char* name, Track track) {
  const Tensor& p = m.param(name);
  return track == Track::Params ? p : p.detach();
}

Tensor conv_block(const ModelBundle& m, const Tensor& x, const char* k, const char* b, std::size_t stride,
                  Track track) {
  return relu(bias_add(conv2d(x, use(m, k, track), stride), use(m, b, track)));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (in.size() - pos < 4) throw FormatError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::SignDetector: return "detector";
    case ModelKind::DistanceRegressor: return "regressor";
    case ModelKind::Denoiser: return "denoiser";
  }
  return "unknown";
}

std::vector<LayerSpec> architecture(ModelKind kind) {
  if (kind == ModelKind::Denoiser)
    return {{"dn1.k", {3, 3, 4, 16}}, {"dn1.b", {16}}, {"dn2.k", {3, 3, 16, 16}},
            {"dn2.b", {16}},          {"dn3.k", {3, 3, 16, 3}}, {"dn3.b", {3}}};
  std::vector<LayerSpec> a{{"conv1.k", {3, 3, 3, 8}},  {"conv1.b", {8}},  {"conv2.k", {3, 3, 8, 16}},
                           {"conv2.b", {16}},          {"conv3.k", {3, 3, 16, 32}}, {"conv3.b", {32}}};
  if (kind == ModelKind::SignDetector) {
    a.push_back({"head.w", {kCellWindow, kCellValues}});
    a.push_back({"head.b", {kCellValues}});
  } else {
    a.push_back({"fc1.w", {kFeatures, 32}});
    a.push_back({"fc1.b", {32}});
    a.push_back({"fc2.w", {32, 1}});
    a.push_back({"fc2.b", {1}});
  }
  return a;
}

ModelBundle ModelBundle::zeros(ModelKind kind) {
  ModelBundle m;
  m.kind_ = kind;
  m.arch_ = architecture(kind);
  for (const auto& l : m.arch_) {
    Tensor t(l.shape, 0.0f);
    t.set_requires_grad(true);
    m.params_.emplace(l.name, std::move(t));
  }
  return m;
}

ModelBundle ModelBundle::init(ModelKind kind, std::uint64_t seed) {
  ModelBundle m = zeros(kind);
  Rng rng(seed);
  for (const auto& l : m.arch_) {
    if (l.shape.size() < 2) continue;  // biases stay zero
    const std::size_t fan_out = l.shape.back();
    const std::size_t fan_in = numel(l.shape) / fan_out;
    const bool last = &l == &m.arch_[m.arch_.size() - 2];
    const double stddev = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(fan_in));
    for (auto& v : m.params_.at(l.name).mutable_data()) v = static_cast<float>(rng.normal(0.0, stddev));
  }
  return m;
}

const Tensor& ModelBundle::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("model has no parameter '" + name + "'");
  return it->second;
}

Tensor& ModelBundle::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("model has no parameter '" + name + "'");
  return it->second;
}

std::vector<Tensor> ModelBundle::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : arch_) out.push_back(params_.at(l.name));
  return out;
}

ModelBundle ModelBundle::clone() const {
  ModelBundle m;
  m.kind_ = kind_;
  m.arch_ = arch_;
  for (const auto& [name, t] : params_) {
    Tensor c = t.clone();
    c.set_requires_grad(true);
    m.params_.emplace(name, std::move(c));
  }
  return m;
}

bool ModelBundle::bitwise_equal(const ModelBundle& other) const {
  if (kind_ != other.kind_ || params_.size() != other.params_.size()) return false;
  for (const auto& [name, t] : params_) {
    auto it = other.params_.find(name);
    if (it == other.params_.end() || it->second.shape() != t.shape()) return false;
    if (std::memcmp(t.data().data(), it->second.data().data(), t.numel() * sizeof(float)) != 0) return false;
  }
  return true;
}

std::uint64_t ModelBundle::checksum() const { return fnv1a(serialize(*this)); }

namespace {

Tensor backbone_map(const ModelBundle& m, const Tensor& image, Track track) {
  check_image(image, "backbone");
  Tensor x = conv_block(m, image, "conv1.k", "conv1.b", 2, track);
  x = conv_block(m, x, "conv2.k", "conv2.b", 2, track);
  return conv_block(m, x, "conv3.k", "conv3.b", 2, track);
}

// Flat indices into the padded feature map for every grid cell. Map column k
// is centered near pixel 8k + 7, so cell c is covered by columns 2c-1 .. 2c+2.
const std::vector<std::vector<std::size_t>>& cell_windows() {
  static const auto windows = [] {
    const std::size_t side = kMapSize + 2 * kMapPad;
    std::vector<std::vector<std::size_t>> w(kGrid * kGrid);
    for (std::size_t r = 0; r < kGrid; ++r)
      for (std::size_t c = 0; c < kGrid; ++c) {
        auto& idx = w[r * kGrid + c];
        for (std::size_t dy = 0; dy < kWindow; ++dy)
          for (std::size_t dx = 0; dx < kWindow; ++dx)
            for (std::size_t ch = 0; ch < kMapChannels; ++ch) {
              const std::size_t py = 2 * r + 1 + dy, px = 2 * c + 1 + dx;  // (2c - 1) + kMapPad
              idx.push_back((py * side + px) * kMapChannels + ch);
            }
      }
    return w;
  }();
  return windows;
}

}  // namespace

std::size_t backbone_feature_count() { return kFeatures; }

Tensor backbone_features(const ModelBundle& m, const Tensor& image, Track track) {
  return flatten(backbone_map(m, image, track));
}

float GridPrediction::objectness(std::size_t cell) const {
  const float z = objectness_logit(cell);
  return z >= 0 ? 1.0f / (1.0f + std::exp(-z)) : std::exp(z) / (1.0f + std::exp(z));
}

Box GridPrediction::box(std::size_t cell) const {
  const std::size_t row = cell / kGrid, col = cell % kGrid;
  const float* v = raw.data().data() + cell * kCellValues;
  const float size = static_cast<float>(kImageSize);
  const float cx = (static_cast<float>(col) + v[1]) * kCellSize;
  const float cy = (static_cast<float>(row) + v[2]) * kCellSize;
  const float w = std::clamp(v[3] * size, 1.0f, size);
  const float h = std::clamp(v[4] * size, 1.0f, size);
  float x0 = std::clamp(cx - w / 2, 0.0f, size - 1.0f), x1 = std::clamp(cx + w / 2, x0 + 1.0f, size);
  float y0 = std::clamp(cy - h / 2, 0.0f, size - 1.0f), y1 = std::clamp(cy + h / 2, y0 + 1.0f, size);
  return Box::from_corners(x0, y0, x1, y1);
}

GridPrediction detector_forward(const ModelBundle& m, const Tensor& image, Track track) {
  if (m.kind() != ModelKind::SignDetector) throw ContractError("detector_forward on a non-detector model");
  const Tensor padded = pad2d(backbone_map(m, image, track), kMapPad);
  const Tensor w = use(m, "head.w", track), b = use(m, "head.b", track);
  std::vector<Tensor> cells;
  cells.reserve(kGrid * kGrid);
  for (const auto& idx : cell_windows()) cells.push_back(dense(gather(padded, idx), w, b));
  return {flatten(stack(cells))};
}

std::vector<Detection> decode_detections(const GridPrediction& pred, float conf_threshold, float nms_iou) {
  require(conf_threshold >= 0 && conf_threshold <= 1 && nms_iou >= 0 && nms_iou <= 1,
          "decode_detections: thresholds must lie in [0,1]");
  std::vector<std::pair<Detection, std::size_t>> cand;
  for (std::size_t c = 0; c < kGrid * kGrid; ++c) {
    const float s = pred.objectness(c);
    if (s >= conf_threshold) cand.push_back({{pred.box(c), s}, c});
  }
  std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
    return a.first.score > b.first.score;
  });
  std::vector<Detection> kept;
  for (const auto& [d, cell] : cand) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(),
                                        [&](const Detection& k) { return iou(k.box, d.box) > nms_iou; });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

Tensor regressor_forward(const ModelBundle& m, const Tensor& image, Track track) {
  if (m.kind() != ModelKind::DistanceRegressor) throw ContractError("regressor_forward on a non-regressor model");
  const Tensor f = backbone_features(m, image, track);
  const Tensor h = relu(dense(f, use(m, "fc1.w", track), use(m, "fc1.b", track)));
  return scale(dense(h, use(m, "fc2.w", track), use(m, "fc2.b", track)), kDistanceScale);
}

Tensor denoiser_forward(const ModelBundle& m, const Tensor& image, float sigma, Track track) {
  if (m.kind() != ModelKind::Denoiser) throw ContractError("denoiser_forward on a non-denoiser model");
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("denoiser expects H x W x 3");
  const std::size_t pixels = image.dim(0) * image.dim(1);
  std::vector<float> in(pixels * 4);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t c = 0; c < 3; ++c) in[p * 4 + c] = image[p * 3 + c];
    in[p * 4 + 3] = sigma;
  }
  const Tensor stacked({image.dim(0), image.dim(1), 4}, std::move(in));
  Tensor x = relu(bias_add(conv2d(pad2d(stacked, 1), use(m, "dn1.k", track)), use(m, "dn1.b", track)));
  x = relu(bias_add(conv2d(pad2d(x, 1), use(m, "dn2.k", track)), use(m, "dn2.b", track)));
  const Tensor residual = bias_add(conv2d(pad2d(x, 1), use(m, "dn3.k", track)), use(m, "dn3.b", track));
  return sub(image, scale(residual, sigma));
}

std::size_t cell_of(float cx, float cy) {
  const auto col = std::min<std::size_t>(kGrid - 1, static_cast<std::size_t>(std::max(0.0f, cx) / kCellSize));
  const auto row = std::min<std::size_t>(kGrid - 1, static_cast<std::size_t>(std::max(0.0f, cy) / kCellSize));
  return row * kGrid + col;
}

Tensor detector_loss(const GridPrediction& pred, const Labels& labels) {
  constexpr std::size_t cells = kGrid * kGrid;
  std::vector<std::size_t> obj_idx(cells);
  for (std::size_t c = 0; c < cells; ++c) obj_idx[c] = c * kCellValues;
  std::vector<float> target(cells, 0.0f), weight(cells, 1.0f);
  std::size_t pos = cells;
  if (labels.has_sign) {
    pos = cell_of(labels.box.cx, labels.box.cy);
    target[pos] = 1.0f;
    weight[pos] = kPositiveCellWeight;
  }
  Tensor loss = bce_with_logits(gather(pred.raw, obj_idx), Tensor({cells}, target), weight);
  if (pos < cells) {
    const float row = static_cast<float>(pos / kGrid), col = static_cast<float>(pos % kGrid);
    const float size = static_cast<float>(kImageSize);
    const Tensor box_t({4}, {labels.box.cx / kCellSize - col, labels.box.cy / kCellSize - row,
                             labels.box.w / size, labels.box.h / size});
    const std::size_t b = pos * kCellValues;
    loss = add(loss, scale(mse(gather(pred.raw, {b + 1, b + 2, b + 3, b + 4}), box_t), kBoxWeight));
  }
  return loss;
}

Tensor regressor_loss(const Tensor& distance_m, float target_m) {
  return mse(scale(distance_m, 1.0f / kDistanceScale), Tensor({1}, target_m / kDistanceScale));
}

Tensor task_loss(const ModelBundle& m, const Tensor& image, const Labels& labels, Track track) {
  switch (m.kind()) {
    case ModelKind::SignDetector: return detector_loss(detector_forward(m, image, track), labels);
    case ModelKind::DistanceRegressor: return regressor_loss(regressor_forward(m, image, track), labels.distance_m);
    case ModelKind::Denoiser: break;
  }
  throw ContractError("task_loss is not defined for the denoiser");
}

Sample augment_sample(const Sample& s, DatasetKind kind, std::uint64_t seed) {
  Rng rng(seed);
  const bool hflip = rng.uniform() < 0.5;
  const bool vflip = kind == DatasetKind::Sign && rng.uniform() < 0.5;
  long dx = 0, dy = 0;
  const auto& b = s.labels.box;
  const auto n = static_cast<long>(kImageSize);
  if (kind == DatasetKind::Sign) {
    long lo_x = -8, hi_x = 8, lo_y = -8, hi_y = 8;
    if (s.labels.has_sign) {
      lo_x = std::max(lo_x, static_cast<long>(std::ceil(-b.x0())));
      hi_x = std::min(hi_x, static_cast<long>(std::floor(static_cast<float>(n) - b.x1())));
      lo_y = std::max(lo_y, static_cast<long>(std::ceil(-b.y0())));
      hi_y = std::min(hi_y, static_cast<long>(std::floor(static_cast<float>(n) - b.y1())));
    }
    dx = lo_x <= hi_x ? static_cast<long>(rng.uniform_int(lo_x, hi_x)) : 0;
    dy = lo_y <= hi_y ? static_cast<long>(rng.uniform_int(lo_y, hi_y)) : 0;
  }
  Sample out = s;
  out.image = Tensor(s.image.shape(), 0.0f);
  for (long y = 0; y < n; ++y)
    for (long x = 0; x < n; ++x) {
      // output (x, y) reads the flipped source at (x - dx, y - dy), edge-replicated
      long sx = std::clamp(x - dx, 0L, n - 1), sy = std::clamp(y - dy, 0L, n - 1);
      if (hflip) sx = n - 1 - sx;
      if (vflip) sy = n - 1 - sy;
      for (std::size_t c = 0; c < kChannels; ++c)
        out.image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) =
            s.image.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c);
    }
  Box nb = b;
  if (hflip) nb.cx = static_cast<float>(n) - nb.cx;
  if (vflip) nb.cy = static_cast<float>(n) - nb.cy;
  nb.cx += static_cast<float>(dx);
  nb.cy += static_cast<float>(dy);
  out.labels.box = nb;
  return out;
}

TrainReport train(ModelBundle& model, const DatasetManifest& data, const TrainOptions& opts,
                  const InputTransform& transform) {
  require(!data.empty(), "train: dataset is empty");
  require(opts.batch_size >= 1, "train: batch size must be >= 1");
  TrainReport report;
  if (opts.epochs == 0) return report;
  auto params = model.parameters();
  Adam opt(opts.lr);
  Rng rng(opts.seed);
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += opts.batch_size) {
      const std::size_t end = std::min(n, start + opts.batch_size);
      const float inv = 1.0f / static_cast<float>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const std::uint64_t sample_seed = Rng::mix(opts.seed, epoch * n + order[k]);
        const Sample s = opts.augment ? augment_sample(data.entries[order[k]], data.kind, sample_seed)
                                      : data.entries[order[k]];
        const Tensor x = transform ? transform(model, s, Rng::mix(sample_seed, 1)) : s.image;
        const Tensor loss = task_loss(model, x, s.labels, Track::Params);
        total += loss.item();
        backward(scale(loss, inv));
      }
      opt.step(params);
    }
    report.epoch_loss.push_back(total / static_cast<double>(n));
  }
  return report;
}

TrainReport train(ModelBundle& model, const DatasetManifest& data, std::size_t epochs, float lr,
                  std::uint64_t seed) {
  TrainOptions o;
  o.epochs = epochs;
  o.lr = lr;
  o.seed = seed;
  return train(model, data, o);
}

void sgd_step(ModelBundle& model, float lr) {
  auto params = model.parameters();
  sgd_step(std::span<Tensor>(params), lr);
}

std::string serialize(const ModelBundle& m) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian floats");
  std::string out = "ARWB1";
  out.push_back(static_cast<char>(m.kind()));
  put_u32(out, static_cast<std::uint32_t>(m.arch().size()));
  for (const auto& l : m.arch()) {
    const Tensor& t = m.param(l.name);
    put_u32(out, static_cast<std::uint32_t>(l.name.size()));
    out += l.name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    const auto* bytes = reinterpret_cast<const char*>(t.data().data());
    out.append(bytes, t.numel() * sizeof(float));
  }
  return out;
}

ModelBundle deserialize(const std::string& bytes) {
  if (bytes.size() < 6 || bytes.compare(0, 5, "ARWB1") != 0) throw FormatError("checkpoint: bad magic");
  const auto kind_byte = static_cast<std::uint8_t>(bytes[5]);
  if (kind_byte < 1 || kind_byte > 3) throw FormatError("checkpoint: unknown model kind");
  ModelBundle m = ModelBundle::zeros(static_cast<ModelKind>(kind_byte));
  std::size_t pos = 6;
  const std::uint32_t count = get_u32(bytes, pos);
  if (count != m.arch().size()) throw FormatError("checkpoint: tensor count does not match architecture");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(bytes, pos);
    if (bytes.size() - pos < len) throw FormatError("checkpoint truncated");
    const std::string name = bytes.substr(pos, len);
    pos += len;
    const std::uint32_t rank = get_u32(bytes, pos);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get_u32(bytes, pos));
    Tensor* dst = nullptr;
    try {
      dst = &m.param(name);
    } catch (const ContractError&) {
      throw FormatError("checkpoint: unexpected tensor '" + name + "'");
    }
    if (dst->shape() != shape) throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    const std::size_t nbytes = dst->numel() * sizeof(float);
    if (bytes.size() - pos < nbytes) throw FormatError("checkpoint truncated");
    std::memcpy(dst->mutable_data().data(), bytes.data() + pos, nbytes);
    pos += nbytes;
  }
  if (pos != bytes.size()) throw FormatError("checkpoint: trailing bytes");
  return m;
}

void save(const ModelBundle& m, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  const auto bytes = serialize(m);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

ModelBundle load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

ModelBundle load(const std::filesystem::path& path, ModelKind expected) {
  ModelBundle m = load(path);
  if (m.kind() != expected)
    throw KindMismatch("checkpoint holds a " + to_string(m.kind()) + ", expected a " + to_string(expected));
  return m;
}

}  // namespace arwb
