#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "neuneu/datapipe/io.hpp"
#include "neuneu/forecaster/model.hpp"

// Checkpoint container:
//   "NNCK" | u32 version | u64 n | n bytes of JSON {config, seed, format_version}
//   then until EOF, per tensor in registration order:
//   u32 name_len | name | u32 rank | rank x u64 extents | f64 values
// All integers and doubles little-endian.

namespace neuneu {

inline constexpr char kCheckpointMagic[4] = {'N', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated in ") + what, pos_);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline nlohmann::json checkpoint_header(const Forecaster& model) {
  return nlohmann::json{{"config", model.config()}, {"seed", model.seed()}, {"format_version", kCheckpointVersion}};
}

inline std::string encode_checkpoint(const Forecaster& model) {
  std::string out(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = checkpoint_header(model).dump();
  detail::put<std::uint64_t>(out, header.size());
  out += header;
  for (const auto& e : model.params().entries()) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto x : e.tensor.shape()) detail::put<std::uint64_t>(out, x);
    const auto v = e.tensor.data();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  return out;
}

inline Forecaster decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("bad magic, expected NNCK", 0);
  }
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto header_len = r.get<std::uint64_t>("header length");
  const std::size_t header_at = r.pos();
  nlohmann::json header;
  ModelConfig config;
  std::uint64_t seed = 0;
  try {
    header = nlohmann::json::parse(r.take(header_len, "header"));
    config = model_config_from_json(header.at("config"));
    seed = header.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what(), header_at);
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what(), header_at);
  }
  Forecaster model(std::move(config), seed);
  std::size_t loaded = 0;
  while (!r.done()) {
    const std::size_t at = r.pos();
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    const std::string name(r.take(name_len, "tensor name"));
    if (!model.params().contains(name)) throw FormatError("unexpected tensor '" + name + "'", at);
    auto& t = model.params().get(name);
    const auto rank = r.get<std::uint32_t>("tensor rank");
    nd::Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint64_t>("tensor extents"));
    if (shape != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + nd::shape_str(shape) + ", expected " +
                            nd::shape_str(t.shape()),
                        at);
    }
    const auto payload = r.take(t.size() * sizeof(double), "tensor values");
    std::memcpy(t.mutable_data().data(), payload.data(), payload.size());
    ++loaded;
  }
  if (loaded != model.params().size()) {
    throw FormatError("checkpoint has " + std::to_string(loaded) + " tensors, model needs " +
                          std::to_string(model.params().size()),
                      bytes.size());
  }
  return model;
}

inline void save_checkpoint(const Forecaster& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(model));
}

inline Forecaster load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.reason, e.byte_offset);
  }
}

// Copies parameter values between models of identical structure.
inline void copy_parameters(const Forecaster& from, Forecaster& to) {
  for (auto& e : to.params().entries()) {
    const auto& src = from.params().get(e.name);
    if (src.shape() != e.tensor.shape()) throw InvalidArgument("copy_parameters: shape mismatch for " + e.name);
    std::copy(src.data().begin(), src.data().end(), e.tensor.mutable_data().begin());
  }
}

}  // namespace neuneu
