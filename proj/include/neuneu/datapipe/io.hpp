#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuneu/datapipe/types.hpp"

namespace neuneu {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Writes via a sibling temporary file and rename so readers never observe a
// partially written file.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

// ---- trajectory JSON ----

inline nlohmann::json trajectory_to_json(const Trajectory& t) {
  nlohmann::json j;
  j["run_id"] = t.run_id;
  j["task_id"] = t.task_id;
  j["compute_unit_flops"] = t.compute_unit_flops;
  j["accuracies"] = t.accuracies;
  if (t.token_prob_files) {
    j["token_prob_files"] = *t.token_prob_files;
  } else {
    j["token_prob_files"] = nullptr;
  }
  return j;
}

inline Trajectory trajectory_from_json(const nlohmann::json& j, const std::string& origin) {
  Trajectory t;
  try {
    t.run_id = j.at("run_id").get<std::string>();
    t.task_id = j.at("task_id").get<std::string>();
    t.compute_unit_flops = j.at("compute_unit_flops").get<double>();
    t.accuracies = j.at("accuracies").get<std::vector<double>>();
    if (j.contains("token_prob_files") && !j.at("token_prob_files").is_null()) {
      t.token_prob_files = j.at("token_prob_files").get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed trajectory: " + e.what());
  }
  try {
    t.validate();
  } catch (const DataError& e) {
    throw DataError(origin + ": " + e.what());
  }
  return t;
}

inline void write_trajectory(const Trajectory& t, const fs::path& path) {
  t.validate();
  write_file_atomic(path, trajectory_to_json(t).dump(2) + "\n");
}

// Relative token-probability paths are resolved against the directory of the
// trajectory file.
inline Trajectory read_trajectory(const fs::path& path) {
  const std::string text = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what(), e.byte);
  }
  Trajectory t = trajectory_from_json(j, path.string());
  if (t.token_prob_files) {
    for (auto& f : *t.token_prob_files) {
      fs::path p(f);
      if (p.is_relative()) f = (path.parent_path() / p).lexically_normal().string();
    }
  }
  return t;
}

// ---- token-probability binary ----
//
// "NNSL" | u32 version = 1 | u64 count | count x f32, little-endian.

inline constexpr char kTokenProbMagic[4] = {'N', 'N', 'S', 'L'};
inline constexpr std::uint32_t kTokenProbVersion = 1;
inline constexpr double kTokenProbTolerance = 1e-6;

inline std::string encode_token_probs(std::span<const double> probs) {
  std::string out;
  out.reserve(16 + probs.size() * 4);
  out.append(kTokenProbMagic, 4);
  const std::uint32_t version = kTokenProbVersion;
  const std::uint64_t count = probs.size();
  out.append(reinterpret_cast<const char*>(&version), 4);
  out.append(reinterpret_cast<const char*>(&count), 8);
  for (double p : probs) {
    if (!(p >= -kTokenProbTolerance && p <= 1.0 + kTokenProbTolerance)) {
      throw InvalidArgument("token probability " + std::to_string(p) + " outside [0,1]");
    }
    const float f = static_cast<float>(std::clamp(p, 0.0, 1.0));
    out.append(reinterpret_cast<const char*>(&f), 4);
  }
  return out;
}

inline std::vector<float> decode_token_probs(std::string_view bytes) {
  if (bytes.size() < 4) throw FormatError("token-probability file truncated in header", bytes.size());
  if (std::memcmp(bytes.data(), kTokenProbMagic, 4) != 0) throw FormatError("bad magic, expected NNSL", 0);
  if (bytes.size() < 16) throw FormatError("token-probability file truncated in header", bytes.size());
  std::uint32_t version;
  std::uint64_t count;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&count, bytes.data() + 8, 8);
  if (version != kTokenProbVersion) throw FormatError("unsupported version " + std::to_string(version), 4);
  if (count == 0) throw FormatError("empty token-probability vector", 8);
  if ((bytes.size() - 16) / 4 < count || bytes.size() - 16 != count * 4) {
    throw FormatError("payload length " + std::to_string(bytes.size() - 16) + " does not match count " +
                          std::to_string(count),
                      std::min<std::uint64_t>(bytes.size(), 16 + count * 4));
  }
  std::vector<float> probs(count);
  std::memcpy(probs.data(), bytes.data() + 16, count * 4);
  for (std::size_t i = 0; i < count; ++i) {
    const double p = probs[i];
    if (!(p >= -kTokenProbTolerance && p <= 1.0 + kTokenProbTolerance)) {
      throw FormatError("probability " + std::to_string(p) + " outside [0,1]", 16 + 4 * i);
    }
    probs[i] = std::clamp(probs[i], 0.0f, 1.0f);
  }
  return probs;
}

inline void write_token_probs(const fs::path& path, std::span<const double> probs) {
  write_file_atomic(path, encode_token_probs(probs));
}

inline std::vector<float> read_token_probs_f32(const fs::path& path) {
  try {
    return decode_token_probs(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.reason, e.byte_offset);
  }
}

inline TokenProbVector read_token_probs(const fs::path& path) {
  auto f = read_token_probs_f32(path);
  return TokenProbVector{std::vector<double>(f.begin(), f.end())};
}

}  // namespace neuneu
