#include "mf/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

#include "mf/errors.hpp"

namespace mf {

namespace {

constexpr double kScale = 255.0;

unsigned char to_byte(float v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(c * kScale));
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// ---- PNG ----------------------------------------------------------------

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

Tensor<float> read_png(std::FILE* f, const std::string& path) {
  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) throw IoError("libpng init failed");
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw IoError("libpng info init failed");
  if (setjmp(png_jmpbuf(r.png))) {
    throw IoError("corrupt or truncated PNG: " + path);
  }
  png_init_io(r.png, f);
  png_read_info(r.png, r.info);

  png_set_expand(r.png);       // palette -> rgb, gray<8 -> 8, tRNS -> alpha
  png_set_strip_16(r.png);
  png_set_strip_alpha(r.png);
  png_read_update_info(r.png, r.info);

  const png_uint_32 w = png_get_image_width(r.png, r.info);
  const png_uint_32 h = png_get_image_height(r.png, r.info);
  const int channels = png_get_channels(r.png, r.info);
  if (channels != 1 && channels != 3) {
    throw IoError("unsupported PNG channel count " + std::to_string(channels) +
                  ": " + path);
  }
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * channels);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) {
    rows[y] = buf.data() + static_cast<std::size_t>(y) * w * channels;
  }
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);

  std::vector<float> data(static_cast<std::size_t>(channels) * h * w);
  for (int c = 0; c < channels; ++c) {
    for (png_uint_32 y = 0; y < h; ++y) {
      for (png_uint_32 x = 0; x < w; ++x) {
        data[(static_cast<std::size_t>(c) * h + y) * w + x] =
            static_cast<float>(buf[(static_cast<std::size_t>(y) * w + x) * channels + c] / kScale);
      }
    }
  }
  return Tensor<float>::from_vector(
      {channels, static_cast<int>(h), static_cast<int>(w)}, std::move(data));
}

void write_png(const std::string& path, const Tensor<float>& image) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for writing: " + path);
  PngWriter wr;
  wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!wr.png) throw IoError("libpng init failed");
  wr.info = png_create_info_struct(wr.png);
  if (!wr.info) throw IoError("libpng info init failed");
  if (setjmp(png_jmpbuf(wr.png))) {
    throw IoError("PNG write failed: " + path);
  }
  png_init_io(wr.png, f.get());
  png_set_IHDR(wr.png, wr.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
               8, c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wr.png, wr.info);

  auto v = image.values();
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ci = 0; ci < c; ++ci) {
        row[static_cast<std::size_t>(x) * c + ci] =
            to_byte(v[(static_cast<std::size_t>(ci) * h + y) * w + x]);
      }
    }
    png_write_row(wr.png, row.data());
  }
  png_write_end(wr.png, nullptr);
}

std::pair<int, int> png_size(std::FILE* f, const std::string& path) {
  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) throw IoError("libpng init failed");
  r.info = png_create_info_struct(r.png);
  if (!r.info) throw IoError("libpng info init failed");
  if (setjmp(png_jmpbuf(r.png))) {
    throw IoError("corrupt PNG header: " + path);
  }
  png_init_io(r.png, f);
  png_read_info(r.png, r.info);
  return {static_cast<int>(png_get_image_height(r.png, r.info)),
          static_cast<int>(png_get_image_width(r.png, r.info))};
}

// ---- binary PPM / PGM ----------------------------------------------------

struct PnmHeader {
  int channels = 0;
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::streampos data_start;
};

PnmHeader read_pnm_header(std::ifstream& in, const std::string& path) {
  PnmHeader h;
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (!in || m0 != 'P' || (m1 != '5' && m1 != '6')) {
    throw IoError("not a binary PGM/PPM file: " + path);
  }
  h.channels = m1 == '5' ? 1 : 3;

  auto next_int = [&](int& out) {
    // skip whitespace and '#' comments
    for (;;) {
      const int ch = in.peek();
      if (ch == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(ch)) {
        in.get();
      } else {
        break;
      }
    }
    if (!(in >> out)) throw IoError("truncated PNM header: " + path);
  };
  next_int(h.width);
  next_int(h.height);
  next_int(h.maxval);
  if (h.width < 1 || h.height < 1) throw IoError("bad PNM dimensions: " + path);
  if (h.maxval < 1 || h.maxval > 255) {
    throw IoError("only 8-bit PNM supported (maxval " + std::to_string(h.maxval) +
                  "): " + path);
  }
  in.get();  // the single whitespace byte before the raster
  h.data_start = in.tellg();
  return h;
}

Tensor<float> read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  const PnmHeader h = read_pnm_header(in, path);
  const std::size_t count =
      static_cast<std::size_t>(h.width) * h.height * h.channels;
  std::vector<unsigned char> buf(count);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) {
    throw IoError("truncated PNM raster: " + path);
  }
  std::vector<float> data(count);
  const float scale = 1.0f / static_cast<float>(h.maxval);
  for (int c = 0; c < h.channels; ++c) {
    for (int y = 0; y < h.height; ++y) {
      for (int x = 0; x < h.width; ++x) {
        data[(static_cast<std::size_t>(c) * h.height + y) * h.width + x] =
            static_cast<float>(buf[(static_cast<std::size_t>(y) * h.width + x) * h.channels + c]) *
            scale;
      }
    }
  }
  return Tensor<float>::from_vector({h.channels, h.height, h.width}, std::move(data));
}

void write_pnm(const std::string& path, const Tensor<float>& image, int channels) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (c != channels) {
    throw IoError("image has " + std::to_string(c) + " channels; " +
                  (channels == 1 ? ".pgm" : ".ppm") + " requires " +
                  std::to_string(channels));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << (channels == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
  auto v = image.values();
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ci = 0; ci < c; ++ci) {
        row[static_cast<std::size_t>(x) * c + ci] =
            to_byte(v[(static_cast<std::size_t>(ci) * h + y) * w + x]);
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write failed: " + path);
}

void validate_image_tensor(const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ShapeError("image tensors must be [C,H,W] with C in {1,3}, got " +
                     shape_str(image.shape()));
  }
}

bool has_png_magic(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() >= 8 && png_sig_cmp(sig, 0, 8) == 0;
}

}  // namespace

Tensor<float> read_image(const std::string& path) {
  if (has_png_magic(path)) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open: " + path);
    return read_png(f.get(), path);
  }
  return read_pnm(path);
}

void write_image(const std::string& path, const Tensor<float>& image) {
  validate_image_tensor(image);
  const auto dot = path.find_last_of('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  if (ext == ".png") {
    write_png(path, image);
  } else if (ext == ".ppm") {
    write_pnm(path, image, 3);
  } else if (ext == ".pgm") {
    write_pnm(path, image, 1);
  } else {
    throw IoError("unsupported image extension '" + ext + "': " + path);
  }
}

std::pair<int, int> read_image_size(const std::string& path) {
  if (has_png_magic(path)) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open: " + path);
    return png_size(f.get(), path);
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  const PnmHeader h = read_pnm_header(in, path);
  return {h.height, h.width};
}

}  // namespace mf
