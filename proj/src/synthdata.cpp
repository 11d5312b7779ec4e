#include "dadet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dadet {

using nlohmann::json;

namespace {

constexpr std::uint16_t kFormatVersion = 1;
constexpr char kMagic[4] = {'S', 'H', 'P', 'W'};
constexpr float kAirlight = 0.8f;

// Row = output channel. Rows sum to 1 so a flat gray stays flat.
constexpr float kStyleRemix[3][3] = {
    {0.1f, 0.6f, 0.3f},
    {0.7f, 0.2f, 0.1f},
    {0.2f, 0.2f, 0.6f},
};

constexpr float kClassColors[3][3] = {
    {0.80f, 0.25f, 0.20f},  // circle
    {0.20f, 0.70f, 0.30f},  // square
    {0.25f, 0.35f, 0.85f},  // triangle
};

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

}  // namespace

const char* shift_kind_name(ShiftKind k) {
  switch (k) {
    case ShiftKind::kNone:
      return "none";
    case ShiftKind::kStyle:
      return "style";
    case ShiftKind::kFog:
      return "fog";
    case ShiftKind::kScale:
      return "scale";
  }
  throw std::logic_error("unknown shift kind");
}

ShiftKind shift_kind_from_name(const std::string& name) {
  if (name == "none") return ShiftKind::kNone;
  if (name == "style") return ShiftKind::kStyle;
  if (name == "fog") return ShiftKind::kFog;
  if (name == "scale") return ShiftKind::kScale;
  throw std::invalid_argument("unknown shift kind: " + name);
}

void ShiftSpec::validate() const {
  if (!(intensity >= 0.0f && intensity <= 1.0f)) {
    throw std::invalid_argument("shift intensity must be in [0, 1]");
  }
  if (!(scale_factor > 0.0f && scale_factor <= 4.0f)) {
    throw std::invalid_argument("scale_factor must be in (0, 4]");
  }
}

void DatasetSpec::validate() const {
  if (image_size < 8 || image_size > 4096) {
    throw std::invalid_argument("image_size must be in [8, 4096]");
  }
  if (num_images < 0) throw std::invalid_argument("num_images must be >= 0");
  if (num_classes < 1 || num_classes > 60) {
    throw std::invalid_argument("num_classes must be in [1, 60]");
  }
  if (min_objects < 0 || min_objects > max_objects || max_objects > 64) {
    throw std::invalid_argument("need 0 <= min_objects <= max_objects <= 64");
  }
  if (!(min_object_size >= 2.0f && min_object_size <= max_object_size)) {
    throw std::invalid_argument("need 2 <= min_object_size <= max_object_size");
  }
  if (max_object_size > static_cast<float>(image_size - 4)) {
    throw std::invalid_argument("max_object_size leaves no placement margin");
  }
  if (domain < -1 || domain > 1) {
    throw std::invalid_argument("domain must be -1, 0 or 1");
  }
  shift.validate();
}

int DatasetSpec::resolved_domain() const {
  if (domain >= 0) return domain;
  return shift.kind == ShiftKind::kNone ? 0 : 1;
}

int DatasetSpec::effective_image_size() const {
  if (shift.kind != ShiftKind::kScale) return image_size;
  float f = 1.0f + shift.intensity * (shift.scale_factor - 1.0f);
  int s = static_cast<int>(std::lround(static_cast<double>(image_size) * f));
  return std::max(1, s);
}

std::string DatasetSpec::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["num_images"] = num_images;
  j["num_classes"] = num_classes;
  j["min_objects"] = min_objects;
  j["max_objects"] = max_objects;
  j["min_object_size"] = min_object_size;
  j["max_object_size"] = max_object_size;
  j["shift"] = {{"kind", shift_kind_name(shift.kind)},
                {"intensity", shift.intensity},
                {"scale_factor", shift.scale_factor}};
  j["seed"] = seed;
  j["domain"] = domain;
  return j.dump();
}

DatasetSpec DatasetSpec::from_json(const std::string& text) {
  json j = json::parse(text);
  DatasetSpec s;
  s.image_size = j.at("image_size").get<int>();
  s.num_images = j.at("num_images").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.min_objects = j.at("min_objects").get<int>();
  s.max_objects = j.at("max_objects").get<int>();
  s.min_object_size = j.at("min_object_size").get<float>();
  s.max_object_size = j.at("max_object_size").get<float>();
  const json& sh = j.at("shift");
  s.shift.kind = shift_kind_from_name(sh.at("kind").get<std::string>());
  s.shift.intensity = sh.at("intensity").get<float>();
  s.shift.scale_factor = sh.at("scale_factor").get<float>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.domain = j.at("domain").get<int>();
  s.validate();
  return s;
}

const std::vector<Box>& Sample::boxes() const {
  if (!has_annotations_) throw std::logic_error("annotations were stripped");
  return boxes_;
}

const std::vector<int>& Sample::labels() const {
  if (!has_annotations_) throw std::logic_error("annotations were stripped");
  return labels_;
}

void Sample::set_annotations(std::vector<Box> boxes, std::vector<int> labels) {
  if (boxes.size() != labels.size()) {
    throw std::invalid_argument("boxes/labels size mismatch");
  }
  boxes_ = std::move(boxes);
  labels_ = std::move(labels);
  has_annotations_ = true;
}

void Sample::strip_annotations() {
  boxes_.clear();
  labels_.clear();
  has_annotations_ = false;
}

namespace {

// Coarse value noise bilinearly upsampled to the full frame, plus per-pixel
// grain, over a per-channel tint. Gives the detector a background it cannot
// trivially threshold away.
void paint_background(Tensor& img, int size, SplitMix64& rng) {
  float tint[3];
  for (float& t : tint) t = 0.18f + 0.10f * rng.uniform();

  constexpr int kCells = 8;
  float grid[kCells + 1][kCells + 1];
  for (auto& row : grid) {
    for (float& g : row) g = rng.uniform();
  }

  float* d = img.data();
  const int plane = size * size;
  std::vector<float> noise(static_cast<std::size_t>(plane));
  for (int y = 0; y < size; ++y) {
    float v = (static_cast<float>(y) + 0.5f) / static_cast<float>(size) * kCells;
    int iy = std::min(kCells - 1, static_cast<int>(v));
    float fy = v - static_cast<float>(iy);
    for (int x = 0; x < size; ++x) {
      float u = (static_cast<float>(x) + 0.5f) / static_cast<float>(size) * kCells;
      int ix = std::min(kCells - 1, static_cast<int>(u));
      float fx = u - static_cast<float>(ix);
      float n00 = grid[iy][ix], n01 = grid[iy][ix + 1];
      float n10 = grid[iy + 1][ix], n11 = grid[iy + 1][ix + 1];
      float n = (1.0f - fy) * ((1.0f - fx) * n00 + fx * n01) +
                fy * ((1.0f - fx) * n10 + fx * n11);
      noise[static_cast<std::size_t>(y * size + x)] =
          0.12f * (n - 0.5f) + 0.02f * (rng.uniform() - 0.5f);
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < plane; ++i) {
      d[c * plane + i] = clamp01(tint[c] + noise[static_cast<std::size_t>(i)]);
    }
  }
}

// Coverage predicates sample pixel centers; shapes are drawn hard-edged so
// the recorded boxes bound the painted extent to within a pixel.
bool covers(int cls_idx, float px, float py, float cx, float cy, float s) {
  float h = s * 0.5f;
  switch (cls_idx % 3) {
    case 0: {  // circle
      float dx = px - cx, dy = py - cy;
      return dx * dx + dy * dy <= h * h;
    }
    case 1:  // square
      return std::fabs(px - cx) <= h && std::fabs(py - cy) <= h;
    default: {  // triangle, apex up; tip blunted half a pixel so the top
                // raster row lands inside the recorded box
      if (py < cy - h || py > cy + h) return false;
      float half_width = std::min(h, (py - (cy - h)) / s * h + 0.5f);
      return std::fabs(px - cx) <= half_width;
    }
  }
}

void paint_object(Tensor& img, int size, int cls_idx, float cx, float cy,
                  float s, const float color[3]) {
  float h = s * 0.5f;
  int x_lo = std::max(0, static_cast<int>(std::floor(cx - h)));
  int x_hi = std::min(size - 1, static_cast<int>(std::ceil(cx + h)));
  int y_lo = std::max(0, static_cast<int>(std::floor(cy - h)));
  int y_hi = std::min(size - 1, static_cast<int>(std::ceil(cy + h)));
  float* d = img.data();
  const int plane = size * size;
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      float px = static_cast<float>(x) + 0.5f;
      float py = static_cast<float>(y) + 0.5f;
      if (!covers(cls_idx, px, py, cx, cy, s)) continue;
      for (int c = 0; c < 3; ++c) d[c * plane + y * size + x] = color[c];
    }
  }
}

}  // namespace

Sample render_scene(const DatasetSpec& spec, int index) {
  spec.validate();
  if (index < 0) throw std::invalid_argument("sample index must be non-negative");
  SplitMix64 base(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  SplitMix64 rng_bg = base.fork(1);
  SplitMix64 rng_obj = base.fork(2);
  SplitMix64 rng_shift = base.fork(3);

  const int size = spec.image_size;
  Sample sample;
  sample.image = Tensor::zeros({3, size, size});
  sample.domain = spec.resolved_domain();
  paint_background(sample.image, size, rng_bg);

  int count = spec.min_objects +
              (spec.max_objects > spec.min_objects
                   ? rng_obj.uniform_int(spec.max_objects - spec.min_objects + 1)
                   : 0);
  std::vector<Box> boxes;
  std::vector<int> labels;
  for (int i = 0; i < count; ++i) {
    int cls_idx = rng_obj.uniform_int(spec.num_classes);
    float s = rng_obj.uniform(spec.min_object_size, spec.max_object_size);
    float h = s * 0.5f;
    float lo = h + 1.0f;
    float hi = static_cast<float>(size) - h - 1.0f;
    bool placed = false;
    float cx = 0.0f, cy = 0.0f;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      cx = rng_obj.uniform(lo, hi);
      cy = rng_obj.uniform(lo, hi);
      Box cand{cx - h, cy - h, cx + h, cy + h};
      placed = true;
      for (const Box& b : boxes) {
        if (iou(cand, b) > 0.3f) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) continue;  // crowded frame; drop the extra object

    float color[3];
    for (int c = 0; c < 3; ++c) {
      float base_c = kClassColors[cls_idx % 3][c] +
                     0.10f * static_cast<float>(cls_idx / 3);
      color[c] = std::min(0.95f, std::max(0.05f, base_c + rng_obj.uniform(-0.06f, 0.06f)));
    }
    paint_object(sample.image, size, cls_idx, cx, cy, s, color);
    boxes.push_back(clip_box(Box{cx - h, cy - h, cx + h, cy + h},
                             static_cast<float>(size), static_cast<float>(size)));
    labels.push_back(cls_idx + 1);  // 0 is background
  }
  sample.set_annotations(std::move(boxes), std::move(labels));

  switch (spec.shift.kind) {
    case ShiftKind::kNone:
      break;
    case ShiftKind::kStyle:
      sample.image = apply_style_shift(sample.image, spec.shift.intensity, rng_shift);
      break;
    case ShiftKind::kFog:
      sample.image = apply_fog(sample.image, 2.0f * spec.shift.intensity);
      break;
    case ShiftKind::kScale: {
      float f = 1.0f + spec.shift.intensity * (spec.shift.scale_factor - 1.0f);
      sample = resize_sample(sample, f);
      break;
    }
  }
  return sample;
}

Tensor apply_fog(const Tensor& image, float beta) {
  if (image.shape().size() != 3 || image.shape()[0] != 3) {
    throw std::invalid_argument("apply_fog expects a [3,H,W] image");
  }
  if (!(beta >= 0.0f)) throw std::invalid_argument("beta must be >= 0");
  if (beta == 0.0f) return image.clone_values();

  const int h = image.shape()[1];
  const int w = image.shape()[2];
  Tensor out = Tensor::zeros({3, h, w});
  const float* in = image.data();
  float* o = out.data();
  const int plane = h * w;
  for (int y = 0; y < h; ++y) {
    // Synthetic depth: far at the top of the frame, near at the bottom.
    float d = 2.0f * (1.0f - (static_cast<float>(y) + 0.5f) / static_cast<float>(h));
    float t = std::exp(-beta * d);
    float air = (1.0f - t) * kAirlight;
    for (int c = 0; c < 3; ++c) {
      for (int x = 0; x < w; ++x) {
        int i = c * plane + y * w + x;
        o[i] = t * in[i] + air;
      }
    }
  }
  return out;
}

Tensor apply_style_shift(const Tensor& image, float intensity, SplitMix64& rng) {
  if (image.shape().size() != 3 || image.shape()[0] != 3) {
    throw std::invalid_argument("apply_style_shift expects a [3,H,W] image");
  }
  if (!(intensity >= 0.0f && intensity <= 1.0f)) {
    throw std::invalid_argument("intensity must be in [0, 1]");
  }
  if (intensity == 0.0f) return image.clone_values();

  const float t = intensity;
  float m[3][3];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      float eye = r == c ? 1.0f : 0.0f;
      m[r][c] = (1.0f - t) * eye + t * kStyleRemix[r][c];
    }
  }
  float brightness = t * rng.uniform(-0.08f, 0.08f);
  float contrast = 1.0f + t * rng.uniform(-0.15f, 0.15f);

  const int h = image.shape()[1];
  const int w = image.shape()[2];
  const int plane = h * w;
  Tensor out = Tensor::zeros({3, h, w});
  const float* in = image.data();
  float* o = out.data();
  for (int i = 0; i < plane; ++i) {
    float grain = t * rng.uniform(-0.05f, 0.05f);
    float r = in[i], g = in[plane + i], b = in[2 * plane + i];
    for (int c = 0; c < 3; ++c) {
      float v = m[c][0] * r + m[c][1] * g + m[c][2] * b;
      v = (v - 0.5f) * contrast + 0.5f + brightness + grain;
      o[c * plane + i] = clamp01(v);
    }
  }
  return out;
}

Tensor resize_image(const Tensor& image, int out_h, int out_w) {
  if (image.shape().size() != 3) {
    throw std::invalid_argument("resize_image expects a [C,H,W] image");
  }
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("output dims must be >= 1");
  const int ch = image.shape()[0];
  const int in_h = image.shape()[1];
  const int in_w = image.shape()[2];
  Tensor out = Tensor::zeros({ch, out_h, out_w});
  const float* in = image.data();
  float* o = out.data();
  const float ry = static_cast<float>(in_h) / static_cast<float>(out_h);
  const float rx = static_cast<float>(in_w) / static_cast<float>(out_w);
  for (int y = 0; y < out_h; ++y) {
    float sy = (static_cast<float>(y) + 0.5f) * ry - 0.5f;
    sy = std::min(static_cast<float>(in_h - 1), std::max(0.0f, sy));
    int y0 = static_cast<int>(sy);
    int y1 = std::min(in_h - 1, y0 + 1);
    float fy = sy - static_cast<float>(y0);
    for (int x = 0; x < out_w; ++x) {
      float sx = (static_cast<float>(x) + 0.5f) * rx - 0.5f;
      sx = std::min(static_cast<float>(in_w - 1), std::max(0.0f, sx));
      int x0 = static_cast<int>(sx);
      int x1 = std::min(in_w - 1, x0 + 1);
      float fx = sx - static_cast<float>(x0);
      for (int c = 0; c < ch; ++c) {
        const float* p = in + c * in_h * in_w;
        float v = (1.0f - fy) * ((1.0f - fx) * p[y0 * in_w + x0] + fx * p[y0 * in_w + x1]) +
                  fy * ((1.0f - fx) * p[y1 * in_w + x0] + fx * p[y1 * in_w + x1]);
        o[(c * out_h + y) * out_w + x] = v;
      }
    }
  }
  return out;
}

Sample resize_sample(const Sample& s, float factor) {
  if (!(factor > 0.0f)) throw std::invalid_argument("factor must be > 0");
  Sample out;
  out.domain = s.domain;
  if (factor == 1.0f) {
    out.image = s.image.clone_values();
  } else {
    const int in_h = s.image.shape()[1];
    const int in_w = s.image.shape()[2];
    int oh = std::max(1, static_cast<int>(std::lround(static_cast<double>(in_h) * factor)));
    int ow = std::max(1, static_cast<int>(std::lround(static_cast<double>(in_w) * factor)));
    out.image = resize_image(s.image, oh, ow);
  }
  if (s.has_annotations()) {
    std::vector<Box> boxes = s.boxes();
    for (Box& b : boxes) {
      b.x1 *= factor;
      b.y1 *= factor;
      b.x2 *= factor;
      b.y2 *= factor;
    }
    out.set_annotations(std::move(boxes), s.labels());
  } else {
    out.strip_annotations();
  }
  return out;
}

namespace {

std::string serialize_samples(const Dataset& ds) {
  const int size = ds.spec.effective_image_size();
  std::string payload;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    if (s.image.shape() != Shape{3, size, size}) {
      throw std::invalid_argument("sample " + std::to_string(i) +
                                  " image shape does not match the dataset spec");
    }
    if (!s.has_annotations()) {
      throw std::invalid_argument("cannot serialize a stripped sample");
    }
    append_f32_span(payload, s.image.data(), static_cast<std::size_t>(3) * size * size);
    const auto& boxes = s.boxes();
    const auto& labels = s.labels();
    if (boxes.size() > 65535) throw std::invalid_argument("too many boxes");
    append_u16le(payload, static_cast<std::uint16_t>(boxes.size()));
    for (const Box& b : boxes) {
      append_f32le(payload, b.x1);
      append_f32le(payload, b.y1);
      append_f32le(payload, b.x2);
      append_f32le(payload, b.y2);
    }
    for (int label : labels) {
      if (label < 0 || label > 65535) throw std::invalid_argument("label out of range");
      append_u16le(payload, static_cast<std::uint16_t>(label));
    }
    append_u8(payload, static_cast<std::uint8_t>(s.domain));
  }
  return payload;
}

}  // namespace

Dataset build_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.samples.reserve(static_cast<std::size_t>(spec.num_images));
  for (int i = 0; i < spec.num_images; ++i) {
    ds.samples.push_back(render_scene(spec, i));
  }
  std::string payload = serialize_samples(ds);
  ds.digest = fnv1a(payload.data(), payload.size());
  return ds;
}

Dataset resized_dataset(const Dataset& ds, float factor) {
  if (!(factor > 0.0f)) throw std::invalid_argument("factor must be positive");
  Dataset out;
  out.spec = ds.spec;
  out.spec.image_size = std::max(
      1, static_cast<int>(std::lround(ds.spec.image_size * factor)));
  out.spec.min_object_size = ds.spec.min_object_size * factor;
  out.spec.max_object_size = ds.spec.max_object_size * factor;
  out.samples.reserve(ds.samples.size());
  for (const Sample& s : ds.samples) {
    out.samples.push_back(resize_sample(s, factor));
  }
  std::string payload = serialize_samples(out);
  out.digest = fnv1a(payload.data(), payload.size());
  return out;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::string payload = serialize_samples(ds);
  std::uint64_t digest = fnv1a(payload.data(), payload.size());

  json header;
  header["spec"] = json::parse(ds.spec.to_json());
  header["sample_count"] = ds.samples.size();
  header["effective_image_size"] = ds.spec.effective_image_size();
  std::string header_text = header.dump();

  std::string blob;
  blob.append(kMagic, 4);
  append_u16le(blob, kFormatVersion);
  append_u32le(blob, static_cast<std::uint32_t>(header_text.size()));
  blob += header_text;
  blob += payload;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw std::runtime_error("write failed: " + path);

  json manifest;
  manifest["digest"] = hex64(digest);
  manifest["sample_count"] = ds.samples.size();
  manifest["payload_bytes"] = payload.size();
  manifest["spec"] = json::parse(ds.spec.to_json());
  std::ofstream mf(path + ".manifest.json", std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot open for writing: " + path + ".manifest.json");
  mf << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string blob = ss.str();

  ByteReader r(blob);
  std::string magic = r.read_bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw std::runtime_error("not a dataset file: " + path);
  }
  std::uint16_t version = r.read_u16le();
  if (version != kFormatVersion) {
    throw std::runtime_error("unsupported dataset format version " + std::to_string(version));
  }
  std::uint32_t header_len = r.read_u32le();
  json header = json::parse(r.read_bytes(header_len));

  Dataset ds;
  ds.spec = DatasetSpec::from_json(header.at("spec").dump());
  auto sample_count = header.at("sample_count").get<std::size_t>();
  const int size = header.at("effective_image_size").get<int>();
  if (size != ds.spec.effective_image_size()) {
    throw std::runtime_error("header image size does not match the spec");
  }

  std::size_t payload_start = r.pos;
  ds.samples.reserve(sample_count);
  for (std::size_t i = 0; i < sample_count; ++i) {
    Sample s;
    s.image = Tensor::zeros({3, size, size});
    r.read_f32_span(s.image.data(), static_cast<std::size_t>(3) * size * size);
    std::uint16_t nboxes = r.read_u16le();
    std::vector<Box> boxes(nboxes);
    for (Box& b : boxes) {
      b.x1 = r.read_f32le();
      b.y1 = r.read_f32le();
      b.x2 = r.read_f32le();
      b.y2 = r.read_f32le();
    }
    std::vector<int> labels(nboxes);
    for (int& label : labels) label = r.read_u16le();
    s.domain = r.read_u8();
    s.set_annotations(std::move(boxes), std::move(labels));
    ds.samples.push_back(std::move(s));
  }
  if (!r.exhausted()) throw std::runtime_error("trailing bytes in dataset file: " + path);
  ds.digest = fnv1a(blob.data() + payload_start, blob.size() - payload_start);

  std::ifstream mf(path + ".manifest.json");
  if (mf) {
    json manifest = json::parse(mf);
    if (manifest.at("digest").get<std::string>() != hex64(ds.digest)) {
      throw std::runtime_error("dataset digest does not match its manifest: " + path);
    }
  }
  return ds;
}

Dataset make_dataset(const DatasetSpec& spec, const std::string& path) {
  Dataset ds = build_dataset(spec);
  save_dataset(ds, path);
  return ds;
}

}  // namespace dadet
