#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "mtask/dataset.hpp"
#include "mtask/train.hpp"

namespace mtask::io {

/// Base of every load failure; the subclasses tell the causes apart.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public DataError {
 public:
  using DataError::DataError;
};
class VersionError : public DataError {
 public:
  using DataError::DataError;
};
class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};
class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

constexpr std::uint16_t kDatasetVersion = 1;
constexpr std::uint16_t kCheckpointVersion = 1;

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void i64(std::int64_t v) { put_le(static_cast<std::uint64_t>(v), 8); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void str16(std::string_view s) {
    if (s.size() > 0xFFFF) throw FormatError("string too long for u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }
  void str32(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }

  std::size_t size() const { return bytes_.size(); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked little-endian reader; running off the end is a TruncatedError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (n > remaining()) throw TruncatedError("truncated while reading " + std::string(what));
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1, "u8")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2, "u16")); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4, "u32")); }
  std::uint64_t u64() { return get_le(8, "u64"); }
  std::int64_t i64() { return static_cast<std::int64_t>(get_le(8, "i64")); }
  double f64() { return std::bit_cast<double>(get_le(8, "f64")); }
  std::span<const std::uint8_t> raw(std::size_t n, std::string_view what = "bytes") {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str16() {
    const auto n = u16();
    auto s = raw(n, "string");
    return std::string(s.begin(), s.end());
  }
  std::string str32() {
    const auto n = u32();
    auto s = raw(n, "string");
    return std::string(s.begin(), s.end());
  }

 private:
  std::uint64_t get_le(int n, std::string_view what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Dataset files
//
//   "MTMD" | u16 version | u8 task | u64 count | payload | u32 crc32(payload)
//
// See docs/FORMATS.md for the per-task record layout.

constexpr std::size_t kDatasetHeaderBytes = 4 + 2 + 1 + 8;

template <class S>
constexpr std::size_t record_bytes();
template <>
constexpr std::size_t record_bytes<GraspSample>() { return world::kImageBytes + 2; }
template <>
constexpr std::size_t record_bytes<PushSample>() { return 2 * world::kImageBytes + 5 * 8; }
template <>
constexpr std::size_t record_bytes<PokeSample>() { return world::kImageBytes + 2 * 8; }

namespace detail {

inline void put_image(ByteWriter& w, const world::Image& img) {
  if (img.size() != world::kImageBytes) throw FormatError("image is not 64x64x3");
  w.raw(img);
}

inline world::Image get_image(ByteReader& r) {
  auto s = r.raw(world::kImageBytes, "image");
  return world::Image(s.begin(), s.end());
}

inline void put_record(ByteWriter& w, const GraspSample& s) {
  put_image(w, s.patch);
  w.u8(s.theta_d);
  w.u8(s.success);
}
inline void put_record(ByteWriter& w, const PushSample& s) {
  put_image(w, s.begin);
  put_image(w, s.end);
  for (double v : s.action) w.f64(v);
}
inline void put_record(ByteWriter& w, const PokeSample& s) {
  put_image(w, s.image);
  for (double v : s.response) w.f64(v);
}

inline void get_record(ByteReader& r, GraspSample& s) {
  s.patch = get_image(r);
  s.theta_d = r.u8();
  s.success = r.u8();
  if (s.theta_d >= world::kAngleBins || s.success > 1) throw FormatError("grasp record label out of range");
}
inline void get_record(ByteReader& r, PushSample& s) {
  s.begin = get_image(r);
  s.end = get_image(r);
  for (double& v : s.action) v = r.f64();
}
inline void get_record(ByteReader& r, PokeSample& s) {
  s.image = get_image(r);
  for (double& v : s.response) v = r.f64();
}

}  // namespace detail

template <class S>
std::vector<std::uint8_t> encode_dataset(const Dataset<S>& ds) {
  ByteWriter w;
  w.raw(std::string_view("MTMD"));
  w.u16(kDatasetVersion);
  w.u8(static_cast<std::uint8_t>(task_of<S>()));
  w.u64(ds.records.size());
  const std::size_t payload_start = w.size();
  for (const auto& r : ds.records) detail::put_record(w, r);
  const auto crc = crc32_of(std::span(w.bytes()).subspan(payload_start));
  w.u32(crc);
  return w.take();
}

/// Reads the task tag of a dataset file without decoding the payload.
inline Task peek_dataset_task(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), "MTMD", 4) != 0) throw BadMagicError("not a dataset file (bad magic)");
  const auto version = r.u16();
  if (version != kDatasetVersion) throw VersionError("unsupported dataset version " + std::to_string(version));
  const auto tag = r.u8();
  if (tag > 2) throw FormatError("unknown task tag " + std::to_string(tag));
  return static_cast<Task>(tag);
}

template <class S>
Dataset<S> decode_dataset(std::span<const std::uint8_t> bytes) {
  const Task task = peek_dataset_task(bytes);
  if (task != task_of<S>()) {
    throw FormatError("dataset holds " + std::string(task_name(task)) + " records, expected " +
                      std::string(task_name(task_of<S>())));
  }
  ByteReader r(bytes);
  r.raw(4 + 2 + 1);
  const std::uint64_t count = r.u64();
  // Validate the count against the file size before allocating anything.
  if (r.remaining() < 4) throw TruncatedError("dataset file has no checksum trailer");
  const std::size_t payload_bytes = r.remaining() - 4;
  constexpr std::size_t rec = record_bytes<S>();
  if (count > payload_bytes / rec) {
    throw TruncatedError("dataset declares " + std::to_string(count) + " records but only " +
                         std::to_string(payload_bytes / rec) + " fit in the file");
  }
  if (count * rec != payload_bytes) throw FormatError("dataset payload has trailing bytes");
  const auto payload = bytes.subspan(kDatasetHeaderBytes, payload_bytes);
  ByteReader tail(bytes.subspan(kDatasetHeaderBytes + payload_bytes));
  if (tail.u32() != crc32_of(payload)) throw ChecksumError("dataset payload CRC mismatch");

  Dataset<S> ds;
  ds.records.resize(static_cast<std::size_t>(count));
  ByteReader pr(payload);
  for (auto& rec_out : ds.records) detail::get_record(pr, rec_out);
  return ds;
}

template <class S>
void save_dataset(const std::filesystem::path& path, const Dataset<S>& ds) {
  write_file(path, encode_dataset(ds));
}

template <class S>
Dataset<S> load_dataset(const std::filesystem::path& path) {
  return decode_dataset<S>(read_file(path));
}

inline std::string dataset_filename(Task t) { return std::string(task_name(t)) + ".mtmd"; }

/// Writes one file per present task into `dir`.
inline std::vector<std::filesystem::path> save_bundle(const std::filesystem::path& dir, const DatasetBundle& b) {
  std::vector<std::filesystem::path> written;
  std::filesystem::create_directories(dir);
  if (b.grasp) save_dataset(written.emplace_back(dir / dataset_filename(Task::grasp)), *b.grasp);
  if (b.push) save_dataset(written.emplace_back(dir / dataset_filename(Task::push)), *b.push);
  if (b.poke) save_dataset(written.emplace_back(dir / dataset_filename(Task::poke)), *b.poke);
  return written;
}

/// Loads whichever task files exist in `dir`.
inline DatasetBundle load_bundle(const std::filesystem::path& dir) {
  DatasetBundle b;
  if (auto p = dir / dataset_filename(Task::grasp); std::filesystem::exists(p)) b.grasp = load_dataset<GraspSample>(p);
  if (auto p = dir / dataset_filename(Task::push); std::filesystem::exists(p)) b.push = load_dataset<PushSample>(p);
  if (auto p = dir / dataset_filename(Task::poke); std::filesystem::exists(p)) b.poke = load_dataset<PokeSample>(p);
  return b;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "MTCK" | u16 version | u64 file length | net config | optimizer config + iteration |
//   tensors | optimizer slots | rng state | u32 crc32(all preceding bytes)

namespace detail {

inline void put_conv_spec(ByteWriter& w, const ConvSpec& c) {
  w.u64(c.channels);
  w.u64(c.kernel);
  w.u64(c.stride);
  w.u64(c.pad);
}

inline ConvSpec get_conv_spec(ByteReader& r) {
  ConvSpec c{};
  c.channels = r.u64();
  c.kernel = r.u64();
  c.stride = r.u64();
  c.pad = r.u64();
  return c;
}

inline void put_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str16(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.u64(d);
  for (double v : t.data()) w.f64(v);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Trainer& trainer) {
  ByteWriter w;
  w.raw(std::string_view("MTCK"));
  w.u16(kCheckpointVersion);
  w.u64(0);  // total file length, patched below

  const auto& c = trainer.net().config();
  w.u64(c.input_side);
  w.u64(c.input_channels);
  detail::put_conv_spec(w, c.conv1);
  detail::put_conv_spec(w, c.conv2);
  detail::put_conv_spec(w, c.conv3);
  detail::put_conv_spec(w, c.push_conv);
  w.u64(c.grasp_hidden);
  w.u64(c.push_hidden);
  w.u64(c.poke_hidden);
  w.f64(c.dropout);
  w.i64(c.width.num);
  w.i64(c.width.den);

  const auto& o = trainer.optimizer().config();
  w.f64(o.learning_rate);
  w.f64(o.momentum);
  w.f64(o.decay);
  w.f64(o.epsilon);
  w.u64(o.step_size);
  w.f64(o.gamma);
  w.u64(trainer.optimizer().iteration());

  const auto params = trainer.net().params().parameters();
  const auto buffers = trainer.net().params().buffers();
  w.u32(static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (const auto& p : params) detail::put_tensor(w, p.name, p.tensor);
  for (const auto& b : buffers) detail::put_tensor(w, b.name, b.tensor);

  const auto& slots = trainer.optimizer().slots();
  w.u32(static_cast<std::uint32_t>(slots.size()));
  for (const auto& [name, slot] : slots) {
    w.str16(name);
    w.u64(slot.mean_square.size());
    for (double v : slot.mean_square) w.f64(v);
    for (double v : slot.velocity) w.f64(v);
  }

  std::ostringstream rng_text;
  rng_text << trainer.rng();
  w.str32(rng_text.str());

  const std::uint64_t total = w.size() + 4;
  for (int i = 0; i < 8; ++i) w.bytes()[6 + i] = static_cast<std::uint8_t>(total >> (8 * i));
  w.u32(crc32_of(w.bytes()));
  return w.take();
}

inline Trainer decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), "MTCK", 4) != 0) throw BadMagicError("not a checkpoint file (bad magic)");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));
  const auto declared = r.u64();
  if (bytes.size() < declared) throw TruncatedError("checkpoint shorter than its declared length");
  if (bytes.size() > declared) throw FormatError("checkpoint has trailing bytes");
  {
    ByteReader tail(bytes.subspan(bytes.size() - 4));
    if (tail.u32() != crc32_of(bytes.first(bytes.size() - 4))) throw ChecksumError("checkpoint CRC mismatch");
  }

  NetConfig c;
  c.input_side = r.u64();
  c.input_channels = r.u64();
  c.conv1 = detail::get_conv_spec(r);
  c.conv2 = detail::get_conv_spec(r);
  c.conv3 = detail::get_conv_spec(r);
  c.push_conv = detail::get_conv_spec(r);
  c.grasp_hidden = r.u64();
  c.push_hidden = r.u64();
  c.poke_hidden = r.u64();
  c.dropout = r.f64();
  c.width.num = r.i64();
  c.width.den = r.i64();
  if (c.width.num <= 0 || c.width.den <= 0) throw FormatError("checkpoint width scale is not positive");

  RmsPropConfig o;
  o.learning_rate = r.f64();
  o.momentum = r.f64();
  o.decay = r.f64();
  o.epsilon = r.f64();
  o.step_size = r.u64();
  o.gamma = r.f64();
  const auto iteration = r.u64();

  MultiTaskNet net(c, 0);
  std::vector<NamedTensor> targets = net.params().parameters();
  for (auto& b : net.params().buffers()) targets.push_back(b);
  const auto count = r.u32();
  if (count != targets.size()) throw FormatError("checkpoint tensor count does not match the network");
  for (auto& t : targets) {
    const auto name = r.str16();
    if (name != t.name) throw FormatError("checkpoint tensor '" + name + "' where '" + t.name + "' expected");
    const auto rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != t.tensor.shape()) throw FormatError("checkpoint tensor '" + name + "' has the wrong shape");
    r.need(t.tensor.numel() * 8, "tensor data");
    for (auto& v : t.tensor.data()) v = r.f64();
  }

  RmsProp opt(o);
  opt.set_iteration(iteration);
  const auto nslots = r.u32();
  for (std::uint32_t i = 0; i < nslots; ++i) {
    const auto name = r.str16();
    const auto len = r.u64();
    if (len > r.remaining() / 16) throw TruncatedError("checkpoint optimizer slot overruns the file");
    RmsPropSlot slot;
    slot.mean_square.resize(len);
    slot.velocity.resize(len);
    for (auto& v : slot.mean_square) v = r.f64();
    for (auto& v : slot.velocity) v = r.f64();
    opt.slots()[name] = std::move(slot);
  }

  Rng rng;
  std::istringstream rng_text(r.str32());
  rng_text >> rng;
  if (!rng_text) throw FormatError("checkpoint rng state unreadable");
  if (r.remaining() != 4) throw FormatError("checkpoint has trailing bytes");
  return Trainer(std::move(net), std::move(opt), rng);
}

inline void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer) {
  write_file(path, encode_checkpoint(trainer));
}

inline Trainer load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace mtask::io
