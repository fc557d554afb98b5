#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lgmae/core.hpp"
#include "lgmae/tokenizer.hpp"

namespace lgmae {

struct IoError : std::runtime_error {
  explicit IoError(const std::string& w) : std::runtime_error(w) {}
};

// ---------------------------------------------------------------------------
// portable pixmap (P6) frames

template <typename T>
void write_ppm(const std::string& path, int height, int width, const T* rgb) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_ppm: cannot open " + path);
  f << "P6\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<size_t>(height) * width * 3);
  for (size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(static_cast<double>(rgb[i]), 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {

inline int ppm_next_int(std::istream& in) {
  // Skips whitespace and '#' comments per the netpbm grammar.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  int value = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw IoError("ppm: malformed header");
  return value;
}

}  // namespace detail

template <typename T>
void read_ppm(const std::string& path, int& height, int& width, std::vector<T>& rgb) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_ppm: cannot open " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || m1 != '6') throw IoError("read_ppm: not a P6 pixmap: " + path);
  width = detail::ppm_next_int(f);
  height = detail::ppm_next_int(f);
  const int maxval = detail::ppm_next_int(f);
  if (maxval != 255) throw IoError("read_ppm: only maxval 255 supported");
  std::vector<unsigned char> bytes(static_cast<size_t>(height) * width * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw IoError("read_ppm: truncated pixel data in " + path);
  rgb.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) rgb[i] = static_cast<T>(bytes[i] / 255.0);
}

// One image file per frame, lexicographically ordered.
template <typename T>
VideoClip<T> load_frame_dir(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path().string());
  if (files.empty()) throw IoError("load_frame_dir: no .ppm frames in " + dir);
  std::sort(files.begin(), files.end());
  VideoClip<T> clip;
  for (size_t i = 0; i < files.size(); ++i) {
    int h = 0, w = 0;
    std::vector<T> rgb;
    read_ppm(files[i], h, w, rgb);
    if (i == 0) {
      clip = VideoClip<T>(static_cast<int>(files.size()), h, w);
      clip.source_id = dir;
    } else if (h != clip.height || w != clip.width) {
      throw IoError("load_frame_dir: frame size changes at " + files[i]);
    }
    std::copy(rgb.begin(), rgb.end(), clip.data.begin() + i * rgb.size());
  }
  return clip;
}

// ---------------------------------------------------------------------------
// raw tensor container: magic, dtype, dims, little-endian payload

namespace detail {

template <typename U>
void write_le(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U read_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  in.read(reinterpret_cast<char*>(b), sizeof(U));
  if (in.gcount() != sizeof(U)) throw IoError("raw tensor: truncated header");
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void write_f64_payload(std::ostream& out, const double* data, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &data[i], 8);
    write_le(out, bits);
  }
}

inline void write_f32_payload(std::ostream& out, const float* data, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    write_le(out, bits);
  }
}

}  // namespace detail

inline constexpr std::uint32_t kTensorDtypeF32 = 0;
inline constexpr std::uint32_t kTensorDtypeF64 = 1;

template <typename T>
void write_raw_tensor(const std::string& path, const std::vector<std::uint64_t>& dims,
                      const std::vector<T>& data) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::uint64_t total = 1;
  for (auto d : dims) total *= d;
  require_shape(total == data.size(), "write_raw_tensor: dims do not match payload");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_raw_tensor: cannot open " + path);
  f.write("VTNS", 4);
  detail::write_le<std::uint32_t>(f, 1);  // version
  detail::write_le<std::uint32_t>(f, std::is_same_v<T, float> ? kTensorDtypeF32 : kTensorDtypeF64);
  detail::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) detail::write_le<std::uint64_t>(f, d);
  if constexpr (std::is_same_v<T, float>)
    detail::write_f32_payload(f, data.data(), data.size());
  else
    detail::write_f64_payload(f, data.data(), data.size());
}

template <typename T>
void read_raw_tensor(const std::string& path, std::vector<std::uint64_t>& dims,
                     std::vector<T>& data) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_raw_tensor: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != "VTNS")
    throw IoError("read_raw_tensor: bad magic in " + path);
  if (detail::read_le<std::uint32_t>(f) != 1) throw IoError("read_raw_tensor: unsupported version");
  const std::uint32_t dtype = detail::read_le<std::uint32_t>(f);
  const std::uint32_t expected = std::is_same_v<T, float> ? kTensorDtypeF32 : kTensorDtypeF64;
  if (dtype != expected) throw IoError("read_raw_tensor: dtype mismatch in " + path);
  const std::uint32_t ndims = detail::read_le<std::uint32_t>(f);
  dims.resize(ndims);
  std::uint64_t total = 1;
  for (auto& d : dims) {
    d = detail::read_le<std::uint64_t>(f);
    total *= d;
  }
  data.resize(total);
  for (auto& v : data) {
    if constexpr (std::is_same_v<T, float>) {
      const std::uint32_t bits = detail::read_le<std::uint32_t>(f);
      std::memcpy(&v, &bits, 4);
    } else {
      const std::uint64_t bits = detail::read_le<std::uint64_t>(f);
      std::memcpy(&v, &bits, 8);
    }
  }
}

// Raw [T, H, W, 3] tensor file as a clip source.
template <typename T>
VideoClip<T> load_raw_clip(const std::string& path) {
  std::vector<std::uint64_t> dims;
  std::vector<T> data;
  read_raw_tensor(path, dims, data);
  if (dims.size() != 4 || dims[3] != 3)
    throw IoError("load_raw_clip: expected [T, H, W, 3] dims in " + path);
  VideoClip<T> clip(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                    static_cast<int>(dims[2]));
  clip.data = std::move(data);
  clip.source_id = path;
  return clip;
}

// ---------------------------------------------------------------------------
// JSON-lines training log

class JsonlLogger {
 public:
  JsonlLogger() = default;
  explicit JsonlLogger(const std::string& path) {
    if (!path.empty()) {
      out_.open(path);
      if (!out_) throw IoError("JsonlLogger: cannot open " + path);
    }
  }

  void log(const std::string& json_line) {
    if (out_.is_open()) out_ << json_line << "\n";
  }

  void flush() {
    if (out_.is_open()) out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace lgmae
