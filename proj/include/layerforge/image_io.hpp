#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace layerforge::io {

// 8-bit interleaved image, 1 (gray), 3 (RGB) or 4 (RGBA) channels.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

std::vector<std::uint8_t> encode_png(const Image8& img);
Image8 decode_png(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temp file, then renames over the target.
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

void write_png(const std::filesystem::path& path, const Image8& img);
Image8 read_png(const std::filesystem::path& path);

std::uint32_t crc32(const std::vector<std::uint8_t>& bytes);
std::uint32_t crc32(const std::string& text);

// Uncompressed (stored) zip with fixed timestamps, so identical entries give
// identical files.
struct ZipEntry {
  std::string name;
  std::vector<std::uint8_t> data;
};

std::vector<std::uint8_t> build_zip(const std::vector<ZipEntry>& entries);
// Verifies every entry's CRC.
std::vector<ZipEntry> parse_zip(const std::vector<std::uint8_t>& bytes);

}  // namespace layerforge::io
