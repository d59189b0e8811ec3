// SPDX-License-Identifier: Apache-2.0

#include "diffpoint/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <type_traits>

namespace diffpoint {

namespace {

constexpr char kMagic[4] = {'D', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }
  template <class T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void put_bytes(const void* data, std::size_t len) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
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
    T value;
    in_.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (in_.gcount() != static_cast<std::streamsize>(sizeof(T)))
      throw FormatError(std::string("checkpoint truncated while reading ") + what, offset_);
    offset_ += sizeof(T);
    return value;
  }
  void get_bytes(void* data, std::size_t len, const char* what) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(len));
    if (in_.gcount() != static_cast<std::streamsize>(len))
      throw FormatError(std::string("checkpoint truncated while reading ") + what, offset_);
    offset_ += len;
  }
  std::string get_string(const char* what) {
    const auto len = get<std::uint32_t>(what);
    if (len > (1u << 26)) throw FormatError("implausible string length", offset_ - 4);
    std::string s(len, '\0');
    get_bytes(s.data(), len, what);
    return s;
  }
  std::uint64_t offset() const { return offset_; }

 private:
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& state) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  Writer w(path);
  w.put_bytes(kMagic, 4);
  w.put(kVersion);
  // config snapshot as canonical text
  const std::string cfg_text = serialize_config(state.config);
  w.put(static_cast<std::uint64_t>(cfg_text.size()));
  w.put_bytes(cfg_text.data(), cfg_text.size());
  w.put(state.step);
  // RNG state
  w.put(state.rng.seed());
  for (std::uint64_t word : state.rng.state()) w.put(word);
  w.put(static_cast<std::uint8_t>(state.rng.has_spare() ? 1 : 0));
  w.put(state.rng.spare());
  // parameters, in the store's (sorted-name) order
  w.put(static_cast<std::uint64_t>(state.params.count()));
  for (const auto& [name, tensor] : state.params.map()) {
    w.put_string(name);
    const Shape& shape = tensor.shape();
    w.put(static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) w.put(static_cast<std::uint32_t>(d));
    w.put_bytes(tensor.data(), tensor.size() * sizeof(float));
  }
  // optimizer moments in the same order; zeros when a slot was never touched
  const AdamW& opt = state.opt;
  w.put(opt.step_count());
  for (const auto& [name, tensor] : state.params.map()) {
    auto it = opt.slots().find(name);
    if (it != opt.slots().end() && it->second.m.size() == tensor.size()) {
      w.put_bytes(it->second.m.data(), tensor.size() * sizeof(float));
      w.put_bytes(it->second.v.data(), tensor.size() * sizeof(float));
    } else {
      const std::vector<float> zeros(tensor.size(), 0.f);
      w.put_bytes(zeros.data(), tensor.size() * sizeof(float));
      w.put_bytes(zeros.data(), tensor.size() * sizeof(float));
    }
  }
  w.close();
}

TrainState load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad magic (not a checkpoint)", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto cfg_len = r.get<std::uint64_t>("config length");
  if (cfg_len > (1u << 26)) throw FormatError("implausible config length", r.offset() - 8);
  std::string cfg_text(static_cast<std::size_t>(cfg_len), '\0');
  r.get_bytes(cfg_text.data(), cfg_text.size(), "config text");

  TrainState state;
  state.config = parse_config_text(cfg_text);
  state.step = r.get<std::uint64_t>("global step");
  const auto rng_seed = r.get<std::uint64_t>("rng seed");
  std::array<std::uint64_t, 4> rng_words{};
  for (auto& word : rng_words) word = r.get<std::uint64_t>("rng state");
  const auto has_spare = r.get<std::uint8_t>("rng spare flag");
  const auto spare = r.get<double>("rng spare");
  state.rng.restore(rng_seed, rng_words, has_spare != 0, spare);

  const auto param_count = r.get<std::uint64_t>("parameter count");
  if (param_count > (1u << 20)) throw FormatError("implausible parameter count", r.offset() - 8);
  for (std::uint64_t i = 0; i < param_count; ++i) {
    const std::string name = r.get_string("parameter name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 4) throw FormatError("implausible tensor rank for " + name, r.offset() - 4);
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      const auto dim = r.get<std::uint32_t>("tensor dim");
      if (dim == 0 || dim > (1u << 24)) throw FormatError("implausible dim for " + name, r.offset() - 4);
      d = static_cast<int>(dim);
      numel *= dim;
    }
    Tensor t = Tensor::zeros(shape, true);
    r.get_bytes(t.data(), numel * sizeof(float), "tensor data");
    state.params.add(name, std::move(t));
  }

  AdamWConfig ocfg;
  ocfg.lr = state.config.lr;
  ocfg.weight_decay = state.config.weight_decay;
  ocfg.beta1 = state.config.adam_beta1;
  ocfg.beta2 = state.config.adam_beta2;
  ocfg.eps = state.config.adam_eps;
  state.opt = AdamW(ocfg);
  state.opt.set_step_count(r.get<std::uint64_t>("optimizer step"));
  for (const auto& [name, tensor] : state.params.map()) {
    auto& slot = state.opt.slots()[name];
    slot.m.resize(tensor.size());
    slot.v.resize(tensor.size());
    r.get_bytes(slot.m.data(), tensor.size() * sizeof(float), "first moment");
    r.get_bytes(slot.v.data(), tensor.size() * sizeof(float), "second moment");
  }
  return state;
}

}  // namespace diffpoint
