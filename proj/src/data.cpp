// SPDX-License-Identifier: Apache-2.0

#include "diffpoint/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <type_traits>

namespace diffpoint {

namespace {

constexpr double kPi = std::numbers::pi;

double primitive_area(const PrimitiveSpec& p) {
  const double a = p.size[0], b = p.size[1], c = p.size[2];
  switch (p.kind) {
    case PrimitiveKind::sphere:
      return 4.0 * kPi * a * a;
    case PrimitiveKind::box:
      return 8.0 * (a * b + b * c + a * c);
    case PrimitiveKind::cylinder:
      return 2.0 * kPi * a * b + 2.0 * kPi * a * a;  // side + two caps
    case PrimitiveKind::torus:
      return 4.0 * kPi * kPi * a * b;
  }
  throw ContractError("primitive_area: unknown kind");
}

void validate_primitive(const PrimitiveSpec& p) {
  const int used = p.kind == PrimitiveKind::sphere ? 1 : p.kind == PrimitiveKind::box ? 3 : 2;
  for (int i = 0; i < used; ++i)
    if (!(p.size[i] > 0.f))
      throw ContractError("shape parameters must be positive");
  if (p.kind == PrimitiveKind::torus && !(p.size[1] < p.size[0]))
    throw ContractError("torus minor radius must be smaller than major radius");
}

Point sample_primitive_point(const PrimitiveSpec& p, SeededRng& rng) {
  switch (p.kind) {
    case PrimitiveKind::sphere: {
      const double r = p.size[0];
      double x, y, z, norm;
      do {
        x = rng.normal();
        y = rng.normal();
        z = rng.normal();
        norm = std::sqrt(x * x + y * y + z * z);
      } while (norm < 1e-12);
      return {static_cast<float>(r * x / norm), static_cast<float>(r * y / norm),
              static_cast<float>(r * z / norm)};
    }
    case PrimitiveKind::box: {
      const double hx = p.size[0], hy = p.size[1], hz = p.size[2];
      // face order: x+, x-, y+, y-, z+, z-
      const double areas[6] = {4 * hy * hz, 4 * hy * hz, 4 * hx * hz,
                               4 * hx * hz, 4 * hx * hy, 4 * hx * hy};
      double total = 0;
      for (double a : areas) total += a;
      double pick = rng.uniform() * total;
      int face = 0;
      for (; face < 5; ++face) {
        if (pick < areas[face]) break;
        pick -= areas[face];
      }
      const double u = (rng.uniform() * 2.0 - 1.0);
      const double v = (rng.uniform() * 2.0 - 1.0);
      switch (face) {
        case 0: return {static_cast<float>(hx), static_cast<float>(u * hy), static_cast<float>(v * hz)};
        case 1: return {static_cast<float>(-hx), static_cast<float>(u * hy), static_cast<float>(v * hz)};
        case 2: return {static_cast<float>(u * hx), static_cast<float>(hy), static_cast<float>(v * hz)};
        case 3: return {static_cast<float>(u * hx), static_cast<float>(-hy), static_cast<float>(v * hz)};
        case 4: return {static_cast<float>(u * hx), static_cast<float>(v * hy), static_cast<float>(hz)};
        default: return {static_cast<float>(u * hx), static_cast<float>(v * hy), static_cast<float>(-hz)};
      }
    }
    case PrimitiveKind::cylinder: {
      const double r = p.size[0], h = p.size[1];
      const double side = 2 * kPi * r * h;
      const double cap = kPi * r * r;
      const double pick = rng.uniform() * (side + 2 * cap);
      if (pick < side) {
        const double theta = 2 * kPi * rng.uniform();
        const double y = (rng.uniform() - 0.5) * h;
        return {static_cast<float>(r * std::cos(theta)), static_cast<float>(y),
                static_cast<float>(r * std::sin(theta))};
      }
      const double y = pick < side + cap ? h / 2 : -h / 2;
      const double rad = r * std::sqrt(rng.uniform());
      const double theta = 2 * kPi * rng.uniform();
      return {static_cast<float>(rad * std::cos(theta)), static_cast<float>(y),
              static_cast<float>(rad * std::sin(theta))};
    }
    case PrimitiveKind::torus: {
      const double R = p.size[0], r = p.size[1];
      const double theta = 2 * kPi * rng.uniform();
      double phi;
      // rejection keeps the sampling uniform in area over the tube angle
      for (;;) {
        phi = 2 * kPi * rng.uniform();
        if (rng.uniform() <= (R + r * std::cos(phi)) / (R + r)) break;
      }
      const double ring = R + r * std::cos(phi);
      return {static_cast<float>(ring * std::cos(theta)), static_cast<float>(r * std::sin(phi)),
              static_cast<float>(ring * std::sin(theta))};
    }
  }
  throw ContractError("sample_primitive_point: unknown kind");
}

}  // namespace

PointCloud sample_surface(const PrimitiveSpec& spec, int n, SeededRng& rng) {
  if (n < 1) throw ContractError("sample_surface: n must be >= 1");
  validate_primitive(spec);
  PointCloud cloud(n);
  for (int i = 0; i < n; ++i) cloud[i] = sample_primitive_point(spec, rng);
  return cloud;
}

PointCloud generate_shape(const ShapeSpec& spec, int n, SeededRng& rng) {
  if (n < 1) throw ContractError("generate_shape: n must be >= 1");
  validate_primitive(spec.a);
  if (spec.composite) validate_primitive(spec.b);
  const double area_a = primitive_area(spec.a);
  const double frac_a =
      spec.composite ? area_a / (area_a + primitive_area(spec.b)) : 1.0;
  PointCloud cloud(n);
  for (int i = 0; i < n; ++i) {
    if (!spec.composite || rng.uniform() < frac_a) {
      cloud[i] = sample_primitive_point(spec.a, rng);
    } else {
      Point q = sample_primitive_point(spec.b, rng);
      cloud[i] = {q[0] + spec.offset_b[0], q[1] + spec.offset_b[1], q[2] + spec.offset_b[2]};
    }
  }
  // pose: R = Rz * Ry * Rx, then translate
  const double cx = std::cos(spec.euler[0]), sx = std::sin(spec.euler[0]);
  const double cy = std::cos(spec.euler[1]), sy = std::sin(spec.euler[1]);
  const double cz = std::cos(spec.euler[2]), sz = std::sin(spec.euler[2]);
  const double r00 = cz * cy, r01 = cz * sy * sx - sz * cx, r02 = cz * sy * cx + sz * sx;
  const double r10 = sz * cy, r11 = sz * sy * sx + cz * cx, r12 = sz * sy * cx - cz * sx;
  const double r20 = -sy, r21 = cy * sx, r22 = cy * cx;
  for (Point& pt : cloud) {
    const double x = pt[0], y = pt[1], z = pt[2];
    pt[0] = static_cast<float>(r00 * x + r01 * y + r02 * z + spec.translation[0]);
    pt[1] = static_cast<float>(r10 * x + r11 * y + r12 * z + spec.translation[1]);
    pt[2] = static_cast<float>(r20 * x + r21 * y + r22 * z + spec.translation[2]);
  }
  return normalize_cloud(cloud).cloud;
}

std::vector<int> parse_shape_kinds(const std::string& text) {
  if (text.empty() || text == "random") return {};
  std::vector<int> kinds;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string name =
        text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (name == "sphere") kinds.push_back(0);
    else if (name == "box") kinds.push_back(1);
    else if (name == "cylinder") kinds.push_back(2);
    else if (name == "torus") kinds.push_back(3);
    else if (name == "composite") kinds.push_back(4);
    else throw ContractError("unknown shape kind: '" + name + "'");
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return kinds;
}

ShapeSpec random_shape_spec(SeededRng& rng, const std::vector<int>& kinds) {
  auto draw_primitive = [&rng](int kind) {
    PrimitiveSpec p;
    p.kind = static_cast<PrimitiveKind>(kind);
    switch (p.kind) {
      case PrimitiveKind::sphere:
        p.size = {static_cast<float>(0.5 + 0.5 * rng.uniform()), 0.f, 0.f};
        break;
      case PrimitiveKind::box:
        p.size = {static_cast<float>(0.3 + 0.7 * rng.uniform()),
                  static_cast<float>(0.3 + 0.7 * rng.uniform()),
                  static_cast<float>(0.3 + 0.7 * rng.uniform())};
        break;
      case PrimitiveKind::cylinder:
        p.size = {static_cast<float>(0.3 + 0.5 * rng.uniform()),
                  static_cast<float>(0.6 + 1.4 * rng.uniform()), 0.f};
        break;
      case PrimitiveKind::torus:
        p.size = {static_cast<float>(0.5 + 0.4 * rng.uniform()),
                  static_cast<float>(0.1 + 0.25 * rng.uniform()), 0.f};
        break;
    }
    return p;
  };
  ShapeSpec spec;
  const int category =
      kinds.empty() ? rng.randint(5) : kinds[rng.randint(static_cast<int>(kinds.size()))];
  spec.composite = category == 4;
  spec.a = draw_primitive(spec.composite ? rng.randint(4) : category);
  if (spec.composite) {
    spec.b = draw_primitive(rng.randint(4));
    for (int c = 0; c < 3; ++c)
      spec.offset_b[c] = static_cast<float>(rng.uniform() - 0.5);
  }
  for (int c = 0; c < 3; ++c)
    spec.euler[c] = static_cast<float>(2.0 * kPi * rng.uniform());
  for (;;) {
    const double x = rng.uniform() * 2 - 1, y = rng.uniform() * 2 - 1, z = rng.uniform() * 2 - 1;
    if (x * x + y * y + z * z <= 1.0) {
      spec.translation = {static_cast<float>(0.3 * x), static_cast<float>(0.3 * y),
                          static_cast<float>(0.3 * z)};
      break;
    }
  }
  return spec;
}

ImageTensor render_depth(const PointCloud& cloud, const ViewSpec& view, int resolution) {
  if (cloud.empty()) throw ContractError("render_depth: empty cloud");
  if (resolution < 1) throw ContractError("render_depth: resolution must be positive");
  if (!(view.ortho_half_extent > 0))
    throw ContractError("render_depth: ortho_half_extent must be positive");
  // reduce the index first so azimuth a and a+360 degrees match bit-for-bit
  const int az = ((view.azimuth_index % 24) + 24) % 24;
  const double theta = az * (15.0 * kPi / 180.0);
  const double phi = view.elevation_deg * kPi / 180.0;
  // y-up camera on the sphere at (theta, phi), looking at the origin
  const double dir[3] = {std::cos(phi) * std::sin(theta), std::sin(phi),
                         std::cos(phi) * std::cos(theta)};
  const double right[3] = {std::cos(theta), 0.0, -std::sin(theta)};
  const double up[3] = {-std::sin(phi) * std::sin(theta), std::cos(phi),
                        -std::sin(phi) * std::cos(theta)};
  const double e = view.ortho_half_extent;
  ImageTensor img;
  img.height = resolution;
  img.width = resolution;
  img.channels = 1;
  img.pixels.assign(static_cast<std::size_t>(resolution) * resolution, 0.f);
  std::vector<double> depth(img.pixels.size(), -std::numeric_limits<double>::infinity());
  for (const Point& p : cloud) {
    const double u = p[0] * right[0] + p[1] * right[1] + p[2] * right[2];
    const double v = p[0] * up[0] + p[1] * up[1] + p[2] * up[2];
    const double w = p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2];
    if (u < -e || u > e || v < -e || v > e) continue;
    int col = static_cast<int>((u + e) / (2 * e) * resolution);
    int row = static_cast<int>((e - v) / (2 * e) * resolution);
    col = std::min(col, resolution - 1);
    row = std::min(row, resolution - 1);
    const std::size_t idx = static_cast<std::size_t>(row) * resolution + col;
    if (w > depth[idx]) {
      depth[idx] = w;
      // w in [-E, E] for an in-frame point; map toward-camera depth to (0,1]
      img.pixels[idx] = static_cast<float>(std::clamp((1.0 + w / e) / 2.0, 0.0, 1.0));
    }
  }
  return img;
}

void write_pgm(const ImageTensor& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  for (float v : img.pixels) {
    const int g = std::clamp(static_cast<int>(v * 255.0f + 0.5f), 0, 255);
    out.put(static_cast<char>(g));
  }
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// container I/O

namespace {

constexpr char kMagic[4] = {'D', 'F', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }
  template <class T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));  // little-endian host assumed; asserted below
    out_.write(bytes, sizeof(T));
  }
  void put_f32(const float* data, std::size_t count) {
    out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
  }
  void close() {
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path);
  }
  template <class T>
  T get(const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    char bytes[sizeof(T)];
    in_.read(bytes, sizeof(T));
    if (in_.gcount() != static_cast<std::streamsize>(sizeof(T)))
      throw FormatError(std::string("truncated while reading ") + what, offset_, record_);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    offset_ += sizeof(T);
    return value;
  }
  void get_f32(float* data, std::size_t count, const char* what) {
    in_.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * 4));
    if (in_.gcount() != static_cast<std::streamsize>(count * 4))
      throw FormatError(std::string("truncated while reading ") + what, offset_, record_);
    offset_ += count * 4;
  }
  std::uint64_t offset() const { return offset_; }
  void set_record(std::int64_t r) { record_ = r; }
  std::int64_t record() const { return record_; }

 private:
  std::ifstream in_;
  std::uint64_t offset_ = 0;
  std::int64_t record_ = -1;
};

}  // namespace

void write_dataset(const std::vector<DatasetRecord>& records, const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "container writer assumes a little-endian host");
  Writer w(path);
  w.put(kMagic[0]);
  w.put(kMagic[1]);
  w.put(kMagic[2]);
  w.put(kMagic[3]);
  w.put(kVersion);
  w.put(static_cast<std::uint64_t>(records.size()));
  for (const DatasetRecord& rec : records) {
    w.put(rec.id);
    w.put(rec.category);
    w.put(static_cast<std::uint32_t>(rec.cloud.size()));
    for (const Point& p : rec.cloud) w.put_f32(p.data(), 3);
    if (rec.views.size() > 255) throw ContractError("write_dataset: more than 255 views");
    w.put(static_cast<std::uint8_t>(rec.views.size()));
    for (const ImageTensor& img : rec.views) {
      if (img.channels != 1) throw ContractError("write_dataset: views must be single-channel");
      w.put(static_cast<std::uint16_t>(img.width));
      w.put(static_cast<std::uint16_t>(img.height));
      w.put_f32(img.pixels.data(), img.pixels.size());
    }
  }
  w.close();
}

std::vector<DatasetRecord> read_dataset(const std::string& path) {
  Reader r(path);
  char magic[4];
  for (char& c : magic) c = r.get<char>("magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad magic (not a dataset file)", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw FormatError("unsupported dataset version " + std::to_string(version), 4);
  const auto count = r.get<std::uint64_t>("record count");
  if (count > (1ull << 32)) throw FormatError("implausible record count", 8);
  std::vector<DatasetRecord> records;
  records.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    r.set_record(static_cast<std::int64_t>(i));
    DatasetRecord rec;
    rec.id = r.get<std::uint64_t>("record id");
    rec.category = r.get<std::uint16_t>("category");
    const auto n_points = r.get<std::uint32_t>("point count");
    if (n_points == 0 || n_points > (1u << 24))
      throw FormatError("implausible point count " + std::to_string(n_points), r.offset() - 4,
                        r.record());
    rec.cloud.resize(n_points);
    for (auto& p : rec.cloud) r.get_f32(p.data(), 3, "cloud points");
    const auto n_views = r.get<std::uint8_t>("view count");
    rec.views.resize(n_views);
    for (ImageTensor& img : rec.views) {
      img.width = r.get<std::uint16_t>("view width");
      img.height = r.get<std::uint16_t>("view height");
      img.channels = 1;
      if (img.width == 0 || img.height == 0)
        throw FormatError("zero view dimensions", r.offset() - 4, r.record());
      img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
      r.get_f32(img.pixels.data(), img.pixels.size(), "view pixels");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<DatasetRecord> make_dataset(int count, std::uint64_t seed, int n_points, int n_views,
                                        int resolution, const std::vector<int>& kinds) {
  if (count < 1) throw ContractError("make_dataset: count must be >= 1");
  if (n_views < 1 || n_views > 24) throw ContractError("make_dataset: views must be in 1..24");
  const SeededRng base(seed);
  std::vector<DatasetRecord> records;
  records.reserve(count);
  for (int i = 0; i < count; ++i) {
    SeededRng rec_rng = base.derive(static_cast<std::uint64_t>(i));
    DatasetRecord rec;
    rec.id = static_cast<std::uint64_t>(i);
    const ShapeSpec spec = random_shape_spec(rec_rng, kinds);
    rec.category = spec.category();
    rec.cloud = generate_shape(spec, n_points, rec_rng);
    rec.views.reserve(n_views);
    for (int v = 0; v < n_views; ++v)
      rec.views.push_back(render_depth(rec.cloud, ViewSpec{v}, resolution));
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace diffpoint
