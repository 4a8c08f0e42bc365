#include "layerforge/image_io.hpp"

#include <png.h>
#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "layerforge/errors.hpp"

namespace layerforge::io {

namespace {

png_uint_32 png_format(int channels) {
  switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 3: return PNG_FORMAT_RGB;
    case 4: return PNG_FORMAT_RGBA;
    default: throw ValidationError("png: unsupported channel count " + std::to_string(channels));
  }
}

void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint16_t get16(const std::vector<std::uint8_t>& b, std::size_t at) {
  if (at + 2 > b.size()) throw FormatError("zip: truncated");
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

std::uint32_t get32(const std::vector<std::uint8_t>& b, std::size_t at) {
  if (at + 4 > b.size()) throw FormatError("zip: truncated");
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint16_t kDosTime = 0;
constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01

}  // namespace

std::vector<std::uint8_t> encode_png(const Image8& img) {
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw ValidationError("png: pixel buffer size does not match dimensions");
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = png_format(img.channels);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr))
    throw FormatError(std::string("png encode: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr))
    throw FormatError(std::string("png encode: ") + image.message);
  out.resize(size);
  return out;
}

Image8 decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw FormatError(std::string("png decode: ") + image.message);
  Image8 out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  const bool has_alpha = image.format & PNG_FORMAT_FLAG_ALPHA;
  const bool color = image.format & PNG_FORMAT_FLAG_COLOR;
  out.channels = has_alpha ? 4 : (color ? 3 : 1);
  image.format = png_format(out.channels);
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr))
    throw FormatError(std::string("png decode: ") + image.message);
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_png(const std::filesystem::path& path, const Image8& img) { write_file(path, encode_png(img)); }

Image8 read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

std::uint32_t crc32(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

std::uint32_t crc32(const std::string& text) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

std::vector<std::uint8_t> build_zip(const std::vector<ZipEntry>& entries) {
  std::vector<std::uint8_t> out, central;
  for (const auto& e : entries) {
    if (e.name.empty() || e.name.size() > 0xffff) throw ValidationError("zip: bad entry name");
    if (e.data.size() > 0xffffffffu) throw ValidationError("zip: entry too large");
    const auto offset = static_cast<std::uint32_t>(out.size());
    const std::uint32_t crc = crc32(e.data);
    const auto size = static_cast<std::uint32_t>(e.data.size());
    const auto name_len = static_cast<std::uint16_t>(e.name.size());

    put32(out, kLocalSig);
    put16(out, 20);
    put16(out, 0);
    put16(out, 0);  // stored
    put16(out, kDosTime);
    put16(out, kDosDate);
    put32(out, crc);
    put32(out, size);
    put32(out, size);
    put16(out, name_len);
    put16(out, 0);
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.insert(out.end(), e.data.begin(), e.data.end());

    put32(central, kCentralSig);
    put16(central, 20);
    put16(central, 20);
    put16(central, 0);
    put16(central, 0);
    put16(central, kDosTime);
    put16(central, kDosDate);
    put32(central, crc);
    put32(central, size);
    put32(central, size);
    put16(central, name_len);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put32(central, 0);
    put32(central, offset);
    central.insert(central.end(), e.name.begin(), e.name.end());
  }
  const auto cd_offset = static_cast<std::uint32_t>(out.size());
  out.insert(out.end(), central.begin(), central.end());
  put32(out, kEndSig);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint16_t>(entries.size()));
  put16(out, static_cast<std::uint16_t>(entries.size()));
  put32(out, static_cast<std::uint32_t>(central.size()));
  put32(out, cd_offset);
  put16(out, 0);
  return out;
}

std::vector<ZipEntry> parse_zip(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 22) throw FormatError("zip: too short");
  std::size_t end = bytes.size() - 22;
  while (get32(bytes, end) != kEndSig) {
    if (end == 0 || bytes.size() - end > 22 + 0xffff) throw FormatError("zip: no end-of-directory record");
    --end;
  }
  const std::uint16_t count = get16(bytes, end + 10);
  std::size_t at = get32(bytes, end + 16);
  std::vector<ZipEntry> entries;
  for (int i = 0; i < count; ++i) {
    if (get32(bytes, at) != kCentralSig) throw FormatError("zip: bad central directory");
    const std::uint16_t method = get16(bytes, at + 10);
    const std::uint32_t crc = get32(bytes, at + 16);
    const std::uint32_t csize = get32(bytes, at + 20);
    const std::uint32_t usize = get32(bytes, at + 24);
    const std::uint16_t name_len = get16(bytes, at + 28);
    const std::uint16_t extra_len = get16(bytes, at + 30);
    const std::uint16_t comment_len = get16(bytes, at + 32);
    const std::uint32_t local = get32(bytes, at + 42);
    if (at + 46 + name_len > bytes.size()) throw FormatError("zip: truncated name");
    ZipEntry e;
    e.name.assign(bytes.begin() + static_cast<std::ptrdiff_t>(at + 46),
                  bytes.begin() + static_cast<std::ptrdiff_t>(at + 46 + name_len));
    if (method != 0 || csize != usize) throw FormatError("zip: entry " + e.name + " is compressed; only stored entries are supported");
    if (get32(bytes, local) != kLocalSig) throw FormatError("zip: bad local header for " + e.name);
    const std::size_t data = local + 30 + get16(bytes, local + 26) + get16(bytes, local + 28);
    if (data + usize > bytes.size()) throw FormatError("zip: truncated data for " + e.name);
    e.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data),
                  bytes.begin() + static_cast<std::ptrdiff_t>(data + usize));
    if (crc32(e.data) != crc) throw FormatError("zip: CRC mismatch in " + e.name);
    entries.push_back(std::move(e));
    at += 46 + name_len + extra_len + comment_len;
  }
  return entries;
}

}  // namespace layerforge::io
