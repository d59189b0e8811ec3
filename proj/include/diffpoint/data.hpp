// SPDX-License-Identifier: Apache-2.0
// Synthetic data pipeline: parametric primitives sampled uniformly by surface
// area, posed and normalized; orthographic depth renders from 24 azimuths at
// 30 degrees elevation; and a little-endian binary dataset container.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffpoint/geometry.hpp"
#include "diffpoint/rng.hpp"
#include "diffpoint/vision.hpp"

namespace diffpoint {

enum class PrimitiveKind : std::uint8_t { sphere = 0, box = 1, cylinder = 2, torus = 3 };

struct PrimitiveSpec {
  PrimitiveKind kind = PrimitiveKind::sphere;
  // sphere: {radius}; box: half-extents {hx, hy, hz};
  // cylinder: {radius, full height}; torus: {major radius, minor radius}
  std::array<float, 3> size{1.f, 1.f, 1.f};
};

struct ShapeSpec {
  PrimitiveSpec a;
  bool composite = false;  // when true, union of a and b (offset applied to b)
  PrimitiveSpec b;
  std::array<float, 3> offset_b{0.f, 0.f, 0.f};
  std::array<float, 3> euler{0.f, 0.f, 0.f};        // pose rotation, Rz*Ry*Rx
  std::array<float, 3> translation{0.f, 0.f, 0.f};  // pose offset

  std::uint16_t category() const {
    return composite ? 4 : static_cast<std::uint16_t>(a.kind);
  }
};

// Uniform area-weighted sampling of one primitive's surface, in its local
// frame (no pose, no normalization).
PointCloud sample_surface(const PrimitiveSpec& spec, int n, SeededRng& rng);

// Full shape: area-weighted sampling (split across composite parts), pose
// applied, then normalize_cloud.
PointCloud generate_shape(const ShapeSpec& spec, int n, SeededRng& rng);

// Random spec drawn from sensible parameter ranges. `kinds` lists the
// categories to draw from uniformly (0-3 = primitives, 4 = composite);
// empty = all five.
ShapeSpec random_shape_spec(SeededRng& rng, const std::vector<int>& kinds = {});

// Parse a comma-separated kind list ("sphere,box,cylinder,torus,composite",
// or "random" for all) into category indices.
std::vector<int> parse_shape_kinds(const std::string& text);

struct ViewSpec {
  int azimuth_index = 0;           // 15-degree steps; reduced mod 24, so index
                                   // a and a+24 give identical images
  double elevation_deg = 30.0;
  double ortho_half_extent = 1.0;  // screen covers [-E, E] in camera x/y
};

// Orthographic depth splat: nearest-depth wins per pixel, values in [0,1]
// ((1+depth)/2 toward the camera), empty pixels exactly 0.
ImageTensor render_depth(const PointCloud& cloud, const ViewSpec& view, int resolution);

// Binary P5 export for eyeballing renders.
void write_pgm(const ImageTensor& img, const std::string& path);

struct DatasetRecord {
  std::uint64_t id = 0;
  std::uint16_t category = 0;
  PointCloud cloud;
  std::vector<ImageTensor> views;
};

// Container layout (little-endian): magic "DFPT", version u32, record count
// u64; per record: id u64, category u16, point count u32 + f32 xyz triples,
// view count u8, per view u16 width/height + f32 pixels.
void write_dataset(const std::vector<DatasetRecord>& records, const std::string& path);
std::vector<DatasetRecord> read_dataset(const std::string& path);

enum class Split { train, val, test };

// 70/10/20 by hashed id: splitmix64(id) % 10 -> 0-6 train, 7 val, 8-9 test.
inline Split split_of(std::uint64_t id) {
  const std::uint64_t bucket = splitmix64(id) % 10;
  if (bucket < 7) return Split::train;
  if (bucket == 7) return Split::val;
  return Split::test;
}

// Reproducible dataset: record i uses the derived stream seed^i, so two runs
// with the same arguments produce bit-identical files. `kinds` as in
// random_shape_spec.
std::vector<DatasetRecord> make_dataset(int count, std::uint64_t seed, int n_points, int n_views,
                                        int resolution, const std::vector<int>& kinds = {});

}  // namespace diffpoint
