#pragma once

// File formats: Middlebury .flo, PFM depth, binary PLY point clouds, PNG
// color images and label maps, raw label maps with a JSON sidecar, and the
// intrinsics JSON document.

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sps/errors.hpp"
#include "sps/geometry.hpp"
#include "sps/image.hpp"

namespace sps {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written assuming a little-endian host");

namespace fs = std::filesystem;

namespace detail {

inline std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "' for reading");
  return in;
}

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  return out;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::istream& in, T& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

inline void check_written(std::ostream& out, const fs::path& path) {
  out.flush();
  if (!out) throw InputError("write failed for '" + path.string() + "'");
}

}  // namespace detail

// ---------------------------------------------------------------- .flo

inline constexpr float kFloMagic = 202021.25f;

inline void write_flo(const FlowField& flow, const fs::path& path) {
  auto out = detail::open_out(path);
  detail::write_pod(out, kFloMagic);
  detail::write_pod(out, static_cast<std::int32_t>(flow.width()));
  detail::write_pod(out, static_cast<std::int32_t>(flow.height()));
  std::vector<float> row(static_cast<std::size_t>(flow.width()) * 2);
  for (int v = 0; v < flow.height(); ++v) {
    for (int u = 0; u < flow.width(); ++u) {
      row[2 * u] = flow.du(u, v);
      row[2 * u + 1] = flow.dv(u, v);
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  detail::check_written(out, path);
}

inline FlowField read_flo(const fs::path& path) {
  auto in = detail::open_in(path);
  float magic = 0.f;
  std::int32_t w = 0, h = 0;
  if (!detail::read_pod(in, magic) || std::memcmp(&magic, &kFloMagic, 4) != 0)
    throw FormatError("'" + path.string() + "': bad .flo magic");
  if (!detail::read_pod(in, w) || !detail::read_pod(in, h))
    throw FormatError("'" + path.string() + "': truncated .flo header");
  if (w <= 0 || h <= 0 || static_cast<long>(w) * h > (1L << 28))
    throw FormatError("'" + path.string() + "': implausible .flo size");
  FlowField flow(w, h);
  std::vector<float> row(static_cast<std::size_t>(w) * 2);
  for (int v = 0; v < h; ++v) {
    if (!in.read(reinterpret_cast<char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float))))
      throw FormatError("'" + path.string() + "': truncated .flo payload");
    for (int u = 0; u < w; ++u) {
      flow.du(u, v) = row[2 * u];
      flow.dv(u, v) = row[2 * u + 1];
    }
  }
  return flow;
}

// ---------------------------------------------------------------- PFM

/// Grayscale PFM, little-endian (scale -1.0), rows stored bottom-to-top.
inline void write_pfm(const DepthMap& depth, const fs::path& path) {
  auto out = detail::open_out(path);
  const std::string header = "Pf\n" + std::to_string(depth.width()) + " " +
                             std::to_string(depth.height()) + "\n-1.0\n";
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (int v = depth.height() - 1; v >= 0; --v)
    out.write(reinterpret_cast<const char*>(&depth(0, v)),
              static_cast<std::streamsize>(depth.width() * sizeof(float)));
  detail::check_written(out, path);
}

inline DepthMap read_pfm(const fs::path& path) {
  auto in = detail::open_in(path);
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
      } else {
        t.push_back(c);
      }
    }
    return t;
  };
  const std::string tag = token();
  if (tag != "Pf") throw FormatError("'" + path.string() + "': not a grayscale PFM");
  int w = 0, h = 0;
  double scale = 0.0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    scale = std::stod(token());
  } catch (const std::exception&) {
    throw FormatError("'" + path.string() + "': malformed PFM header");
  }
  if (w <= 0 || h <= 0) throw FormatError("'" + path.string() + "': bad PFM size");
  if (scale >= 0.0)
    throw FormatError("'" + path.string() + "': big-endian PFM not supported");
  DepthMap depth(w, h);
  for (int v = h - 1; v >= 0; --v)
    if (!in.read(reinterpret_cast<char*>(&depth(0, v)),
                 static_cast<std::streamsize>(w * sizeof(float))))
      throw FormatError("'" + path.string() + "': truncated PFM payload");
  return depth;
}

// ---------------------------------------------------------------- PLY

struct ColoredPoint {
  Eigen::Vector3f xyz;
  std::array<std::uint8_t, 3> rgb{};
};

inline void write_ply(std::span<const ColoredPoint> points, const fs::path& path) {
  auto out = detail::open_out(path);
  std::ostringstream header;
  header << "ply\nformat binary_little_endian 1.0\n"
         << "element vertex " << points.size() << "\n"
         << "property float x\nproperty float y\nproperty float z\n"
         << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
         << "end_header\n";
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& p : points) {
    out.write(reinterpret_cast<const char*>(p.xyz.data()), 3 * sizeof(float));
    out.write(reinterpret_cast<const char*>(p.rgb.data()), 3);
  }
  detail::check_written(out, path);
}

/// Reads back files produced by write_ply (xyz float + rgb uchar vertices).
inline std::vector<ColoredPoint> read_ply(const fs::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  std::size_t count = 0;
  bool binary_le = false;
  std::vector<std::string> props;
  if (!std::getline(in, line) || line != "ply")
    throw FormatError("'" + path.string() + "': not a PLY file");
  while (std::getline(in, line)) {
    if (line == "end_header") break;
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      binary_le = fmt == "binary_little_endian";
    } else if (kw == "element") {
      std::string name;
      ls >> name >> count;
    } else if (kw == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(type + " " + name);
    }
  }
  const std::vector<std::string> expected = {"float x", "float y", "float z",
                                             "uchar red", "uchar green", "uchar blue"};
  if (!binary_le || props != expected)
    throw FormatError("'" + path.string() + "': unsupported PLY layout");
  std::vector<ColoredPoint> points(count);
  for (auto& p : points) {
    if (!in.read(reinterpret_cast<char*>(p.xyz.data()), 3 * sizeof(float)) ||
        !in.read(reinterpret_cast<char*>(p.rgb.data()), 3))
      throw FormatError("'" + path.string() + "': truncated PLY payload");
  }
  return points;
}

// ---------------------------------------------------------------- PNG

namespace detail {

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;   // 1..4 after expansion
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> samples;  // row-major, interleaved
};

inline PngImage read_png_raw(const fs::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw InputError("cannot open '" + path.string() + "' for reading");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw FormatError("'" + path.string() + "': not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw NumericalError("libpng initialization failed");
  PngImage img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("'" + path.string() + "': corrupt PNG");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_swap(png);  // host order
  png_read_update_info(png, info);

  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * static_cast<std::size_t>(img.height));
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.samples.resize(n);
  if (img.bit_depth == 16) {
    std::memcpy(img.samples.data(), buffer.data(), n * 2);
  } else {
    for (int y = 0; y < img.height; ++y)
      for (std::size_t i = 0; i < static_cast<std::size_t>(img.width) * img.channels; ++i)
        img.samples[y * static_cast<std::size_t>(img.width) * img.channels + i] = rows[y][i];
  }
  return img;
}

inline void write_png_raw(const fs::path& path, int width, int height,
                          int color_type, int bit_depth,
                          const std::vector<std::uint8_t>& bytes) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw InputError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw NumericalError("libpng initialization failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InputError("write failed for '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
               bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t rowbytes = bytes.size() / static_cast<std::size_t>(height);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(bytes.data() + rowbytes * y));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(float c) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.f, 1.f) * 255.f));
}

}  // namespace detail

/// 8-bit RGB PNG. Gray and RGBA inputs are converted (alpha dropped).
inline ColorImage read_png_rgb(const fs::path& path) {
  const auto raw = detail::read_png_raw(path);
  const float maxv = raw.bit_depth == 16 ? 65535.f : 255.f;
  ColorImage img(raw.width, raw.height);
  for (int v = 0; v < raw.height; ++v)
    for (int u = 0; u < raw.width; ++u) {
      const std::size_t base = (static_cast<std::size_t>(v) * raw.width + u) * raw.channels;
      Rgb c;
      if (raw.channels >= 3)
        c = Rgb(raw.samples[base], raw.samples[base + 1], raw.samples[base + 2]);
      else
        c = Rgb::Constant(static_cast<float>(raw.samples[base]));
      img(u, v) = c / maxv;
    }
  return img;
}

inline void write_png_rgb(const ColorImage& img, const fs::path& path) {
  std::vector<std::uint8_t> bytes(img.size() * 3);
  for (std::size_t i = 0; i < img.size(); ++i)
    for (int c = 0; c < 3; ++c) bytes[3 * i + c] = detail::to_byte(img.data()[i](c));
  detail::write_png_raw(path, img.width(), img.height(), PNG_COLOR_TYPE_RGB, 8, bytes);
}

/// Label maps as PNG: 8/16-bit single channel holds the id directly; 32-bit
/// ids are packed little-endian into the four channels of an 8-bit RGBA PNG.
inline LabelMap read_png_labels(const fs::path& path) {
  const auto raw = detail::read_png_raw(path);
  LabelMap labels(raw.width, raw.height);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (raw.channels == 1) {
      labels.data()[i] = raw.samples[i];
    } else if (raw.channels == 4 && raw.bit_depth == 8) {
      std::uint32_t id = 0;
      for (int c = 0; c < 4; ++c)
        id |= static_cast<std::uint32_t>(raw.samples[4 * i + c]) << (8 * c);
      labels.data()[i] = static_cast<std::int32_t>(id);
    } else {
      throw FormatError("'" + path.string() +
                        "': label PNG must be single-channel or 8-bit RGBA");
    }
  }
  return labels;
}

inline void write_png_labels(const LabelMap& labels, const fs::path& path) {
  std::int32_t maxid = 0;
  for (auto id : labels.data()) {
    if (id < 0) throw InputError("negative label id");
    maxid = std::max(maxid, id);
  }
  if (maxid <= 0xffff) {
    std::vector<std::uint8_t> bytes(labels.size() * 2);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      // PNG stores 16-bit samples big-endian.
      bytes[2 * i] = static_cast<std::uint8_t>(labels.data()[i] >> 8);
      bytes[2 * i + 1] = static_cast<std::uint8_t>(labels.data()[i] & 0xff);
    }
    detail::write_png_raw(path, labels.width(), labels.height(), PNG_COLOR_TYPE_GRAY, 16, bytes);
  } else {
    std::vector<std::uint8_t> bytes(labels.size() * 4);
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (int c = 0; c < 4; ++c)
        bytes[4 * i + c] = static_cast<std::uint8_t>(
            static_cast<std::uint32_t>(labels.data()[i]) >> (8 * c));
    detail::write_png_raw(path, labels.width(), labels.height(), PNG_COLOR_TYPE_RGBA, 8, bytes);
  }
}

/// Raw row-major int32 labels with a JSON sidecar {width, height, n_labels}
/// at `<path>.json`.
inline void write_raw_labels(const LabelMap& labels, int n_labels, const fs::path& path) {
  {
    auto out = detail::open_out(path);
    out.write(reinterpret_cast<const char*>(labels.data().data()),
              static_cast<std::streamsize>(labels.size() * sizeof(std::int32_t)));
    detail::check_written(out, path);
  }
  nlohmann::json meta = {{"width", labels.width()},
                         {"height", labels.height()},
                         {"n_labels", n_labels}};
  auto sidecar = detail::open_out(fs::path(path.string() + ".json"));
  sidecar << meta.dump(2) << "\n";
}

inline LabelMap read_raw_labels(const fs::path& path) {
  const fs::path sidecar_path(path.string() + ".json");
  nlohmann::json meta;
  try {
    auto in = detail::open_in(sidecar_path);
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + sidecar_path.string() + "': " + e.what());
  }
  const int w = meta.value("width", 0), h = meta.value("height", 0);
  if (w <= 0 || h <= 0) throw FormatError("'" + sidecar_path.string() + "': bad size");
  LabelMap labels(w, h);
  auto in = detail::open_in(path);
  if (!in.read(reinterpret_cast<char*>(labels.data().data()),
               static_cast<std::streamsize>(labels.size() * sizeof(std::int32_t))))
    throw FormatError("'" + path.string() + "': truncated raw label payload");
  return labels;
}

/// Dispatches on extension: `.png` or anything else as raw + sidecar.
inline LabelMap read_labels(const fs::path& path) {
  if (path.extension() == ".png") return read_png_labels(path);
  return read_raw_labels(path);
}

// ---------------------------------------------------------------- intrinsics

inline Intrinsics intrinsics_from_json(const nlohmann::json& j) {
  for (const char* key : {"fx", "fy", "cx", "cy"})
    if (!j.contains(key) || !j[key].is_number())
      throw InputError(std::string("intrinsics: missing numeric field '") + key + "'");
  return Intrinsics(j["fx"].get<double>(), j["fy"].get<double>(),
                    j["cx"].get<double>(), j["cy"].get<double>());
}

inline nlohmann::json intrinsics_to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
}

inline nlohmann::json read_json(const fs::path& path) {
  auto in = detail::open_in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("'" + path.string() + "': " + e.what());
  }
}

inline void write_json(const nlohmann::json& j, const fs::path& path) {
  auto out = detail::open_out(path);
  out << j.dump(2) << "\n";
  detail::check_written(out, path);
}

}  // namespace sps
