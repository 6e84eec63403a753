#pragma once

// Hand-built binary dataset fixtures shared by unit and acceptance tests.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace ofit::testing {

inline void append_u32_be(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void write_bytes(const std::string& path,
                        const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

/// IDX image file: magic 0x00000803, then (count, rows, cols) and pixels.
inline std::vector<unsigned char> idx_image_bytes(
    const std::vector<std::vector<unsigned char>>& images, uint32_t rows,
    uint32_t cols) {
  std::vector<unsigned char> out;
  append_u32_be(out, 0x00000803);
  append_u32_be(out, static_cast<uint32_t>(images.size()));
  append_u32_be(out, rows);
  append_u32_be(out, cols);
  for (const auto& img : images) out.insert(out.end(), img.begin(), img.end());
  return out;
}

/// IDX label file: magic 0x00000801, then count and label bytes.
inline std::vector<unsigned char> idx_label_bytes(
    const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> out;
  append_u32_be(out, 0x00000801);
  append_u32_be(out, static_cast<uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

/// One CIFAR-10 binary record: label byte + planar R, G, B planes.
inline std::vector<unsigned char> cifar_record(unsigned char label,
                                               unsigned char r, unsigned char g,
                                               unsigned char b) {
  std::vector<unsigned char> out;
  out.push_back(label);
  out.insert(out.end(), 1024, r);
  out.insert(out.end(), 1024, g);
  out.insert(out.end(), 1024, b);
  return out;
}

inline std::string temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("ofit_" + tag);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace ofit::testing
