#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unordered_set>
#include <vector>

#include "roadseg/model.hpp"

namespace roadseg {

// Little-endian layout:
//   "RSEG" | u32 version
//   config: u32 depths[4] | u32 channels[4] | u32 stem | u32 decoder_reduction
//           | u32 input_channels | u32 output_channels | f64 dropout_p
//   metadata: u64 iteration | f64 best_iou | u64 seed
//   u32 tensor_count, then per tensor:
//     u32 name_len | name bytes | u8 rank | u32 dims[rank] | f32 data[]
//   u32 CRC32 of everything before it
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'R', 'S', 'E', 'G'};

struct CheckpointMeta {
  std::uint64_t iteration = 0;
  double best_iou = 0.0;
  std::uint64_t seed = 0;

  bool operator==(const CheckpointMeta&) const = default;
};

struct LoadedCheckpoint {
  Model<float> model;
  CheckpointMeta meta;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
public:
  template <class V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::string path) : data_(data), size_(size),
                                                                             path_(std::move(path)) {}
  template <class V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > size_ - pos_) throw IntegrityError("checkpoint " + path_ + " is truncated");
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return size_ - pos_; }

private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string path_;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

} // namespace detail

/// Serializes parameters, batch-norm buffers, config and metadata.
inline std::vector<std::uint8_t> encode_checkpoint(const Model<float>& model, const CheckpointMeta& meta) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  const auto& c = model.config();
  for (int d : c.stage_depths) w.put(static_cast<std::uint32_t>(d));
  for (int ch : c.stage_channels) w.put(static_cast<std::uint32_t>(ch));
  w.put(static_cast<std::uint32_t>(c.stem_channels));
  w.put(static_cast<std::uint32_t>(c.decoder_reduction));
  w.put(static_cast<std::uint32_t>(c.input_channels));
  w.put(static_cast<std::uint32_t>(c.output_channels));
  w.put(c.dropout_p);
  w.put(meta.iteration);
  w.put(meta.best_iou);
  w.put(meta.seed);
  w.put(static_cast<std::uint32_t>(model.parameters().size() + model.buffers().size()));
  for (const auto* group : {&model.parameters(), &model.buffers()})
    for (const auto& nt : *group) {
      w.put(static_cast<std::uint32_t>(nt.name.size()));
      w.put_bytes(nt.name.data(), nt.name.size());
      w.put(static_cast<std::uint8_t>(nt.tensor.rank()));
      for (auto d : nt.tensor.shape()) w.put(static_cast<std::uint32_t>(d));
      w.put_bytes(nt.tensor.data().data(), nt.tensor.numel() * sizeof(float));
    }
  w.put(detail::crc32_of(w.bytes().data(), w.bytes().size()));
  return std::move(w.bytes());
}

inline LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < 12) throw IntegrityError("checkpoint " + path + " is truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint " + path + " has bad magic (expected \"RSEG\")");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint " + path + ": unsupported version, expected " +
                       std::to_string(kCheckpointVersion) + ", found " + std::to_string(version));
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (detail::crc32_of(bytes.data(), bytes.size() - 4) != stored_crc)
    throw IntegrityError("checkpoint " + path + " failed CRC check (truncated or corrupt)");

  detail::ByteReader r(bytes.data() + 8, bytes.size() - 12, path);
  ModelConfig c;
  for (auto& d : c.stage_depths) d = static_cast<int>(r.get<std::uint32_t>());
  for (auto& ch : c.stage_channels) ch = static_cast<int>(r.get<std::uint32_t>());
  c.stem_channels = static_cast<int>(r.get<std::uint32_t>());
  c.decoder_reduction = static_cast<int>(r.get<std::uint32_t>());
  c.input_channels = static_cast<int>(r.get<std::uint32_t>());
  c.output_channels = static_cast<int>(r.get<std::uint32_t>());
  c.dropout_p = r.get<double>();
  CheckpointMeta meta;
  meta.iteration = r.get<std::uint64_t>();
  meta.best_iou = r.get<double>();
  meta.seed = r.get<std::uint64_t>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IntegrityError("checkpoint " + path + " embeds an invalid config: " + e.what());
  }

  Model<float> model(c, meta.seed);
  const auto count = r.get<std::uint32_t>();
  const auto expected = model.parameters().size() + model.buffers().size();
  if (count != expected)
    throw IntegrityError("checkpoint " + path + " holds " + std::to_string(count) + " tensors, config implies " +
                         std::to_string(expected));
  std::unordered_set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.get<std::uint32_t>();
    const auto* name_bytes = r.take(len);
    std::string name(reinterpret_cast<const char*>(name_bytes), len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape;
    for (std::uint8_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint32_t>());
    const Tensor<float>* target = nullptr;
    try {
      target = &model.find(name);
    } catch (const ContractError&) {
      throw IntegrityError("checkpoint " + path + " has unexpected tensor '" + name + "'");
    }
    if (target->shape() != shape)
      throw IntegrityError("checkpoint " + path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                           ", config implies " + shape_str(target->shape()));
    if (!seen.insert(name).second) throw IntegrityError("checkpoint " + path + " repeats tensor '" + name + "'");
    const auto* raw = r.take(target->numel() * sizeof(float));
    std::memcpy(target->mutable_data().data(), raw, target->numel() * sizeof(float));
  }
  if (r.remaining() != 0) throw IntegrityError("checkpoint " + path + " has trailing bytes");
  model.set_mode(Mode::eval);
  return {std::move(model), meta};
}

/// Writes through a temporary file and renames it into place.
inline void save_checkpoint(const Model<float>& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model, meta);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

} // namespace roadseg
