#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace nback {

// File layout shared by checkpoints, hidden-state files and subspace files:
// one line of JSON (the header, which records "blob_floats"), then raw little-endian
// IEEE-754 float32 values.
void write_blob_file(const std::filesystem::path& path, nlohmann::json header,
                     std::span<const float> blob);

struct BlobFile {
  nlohmann::json header;
  std::vector<float> blob;
};
BlobFile read_blob_file(const std::filesystem::path& path);

// Base64 of little-endian float32 values (wire payloads).
std::string encode_floats_b64(std::span<const float> values);
std::vector<float> decode_floats_b64(const std::string& text);

// 64-bit FNV-1a digest of a file's bytes, hex encoded (manifest fingerprints).
std::string file_digest(const std::filesystem::path& path);

}  // namespace nback
