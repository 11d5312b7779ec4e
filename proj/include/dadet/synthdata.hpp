#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dadet/boxes.hpp"
#include "dadet/common.hpp"
#include "dadet/tensor.hpp"

namespace dadet {

enum class ShiftKind { kNone, kStyle, kFog, kScale };

const char* shift_kind_name(ShiftKind k);
ShiftKind shift_kind_from_name(const std::string& name);

struct ShiftSpec {
  ShiftKind kind = ShiftKind::kNone;
  float intensity = 0.0f;     // 0 reproduces the unshifted rendering exactly
  float scale_factor = 1.0f;  // scale kind only

  void validate() const;
};

struct DatasetSpec {
  int image_size = 64;
  int num_images = 0;
  int num_classes = 3;  // circle, square, triangle
  int min_objects = 1;
  int max_objects = 4;
  float min_object_size = 10.0f;
  float max_object_size = 26.0f;
  ShiftSpec shift{};
  std::uint64_t seed = 0;
  // -1 derives the domain label from the shift kind (none -> source).
  int domain = -1;

  void validate() const;
  int resolved_domain() const;
  // Post-shift image extent; scale shifts resize the rendered frame.
  int effective_image_size() const;
  std::string to_json() const;
  static DatasetSpec from_json(const std::string& text);
};

// One image with its annotations. Target-domain annotations exist for
// evaluation only; the training path strips them, after which any access
// throws. The image tensor is shared across copies.
class Sample {
 public:
  Tensor image;  // [3,H,W], values in [0,1]
  int domain = 0;

  const std::vector<Box>& boxes() const;
  const std::vector<int>& labels() const;
  bool has_annotations() const { return has_annotations_; }
  void set_annotations(std::vector<Box> boxes, std::vector<int> labels);
  void strip_annotations();

 private:
  std::vector<Box> boxes_;
  std::vector<int> labels_;
  bool has_annotations_ = true;
};

// Deterministic in (spec.seed, index): same pair, same bytes.
Sample render_scene(const DatasetSpec& spec, int index);

// out = t*in + (1-t)*airlight, t = exp(-beta*d), with d a synthetic depth
// ramp that is far (d -> 2) at the top of the image and near at the bottom.
Tensor apply_fog(const Tensor& image, float beta);

// Channel remix interpolated from identity by intensity, plus seeded
// brightness/contrast jitter and additive texture noise. Geometry untouched.
Tensor apply_style_shift(const Tensor& image, float intensity, SplitMix64& rng);

// Bilinear resize; boxes are scaled by exactly `factor` by callers.
Tensor resize_image(const Tensor& image, int out_h, int out_w);
Sample resize_sample(const Sample& s, float factor);

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> samples;
  std::uint64_t digest = 0;  // FNV-1a over the serialized sample payload
};

Dataset build_dataset(const DatasetSpec& spec);

// Derived dataset with every sample resized by factor; annotations scale
// along, the spec's geometry fields follow, and the digest is recomputed
// over the new payload.
Dataset resized_dataset(const Dataset& ds, float factor);

// File format (little-endian): magic "SHPW", u16 format version, u32 header
// length, header JSON (spec echo + sample count + effective image size),
// then per sample: raw f32 CHW image, u16 box count, boxes as 4 f32 each,
// u16 label each, u8 domain. A JSON manifest sidecar (<path>.manifest.json)
// carries the payload digest and the spec echo.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// build + save; returns the in-memory dataset.
Dataset make_dataset(const DatasetSpec& spec, const std::string& path);

}  // namespace dadet
