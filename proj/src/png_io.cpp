#include "png_io.hpp"

#include <png.h>

#include <array>
#include <cstdio>
#include <memory>

namespace lsc::png {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw InputError("cannot open " + path.string());
  return f;
}

[[noreturn]] void on_error(png_structp, png_const_charp msg) { throw InputError(std::string("png: ") + msg); }
void on_warning(png_structp, png_const_charp) {}

// 256-entry palette; label 0 black, then a fixed hue walk.
std::array<png_color, 256> make_palette() {
  std::array<png_color, 256> pal{};
  for (int i = 0; i < 256; ++i) {
    int r = 0, g = 0, b = 0, c = i;
    for (int bit = 0; bit < 8; ++bit) {  // PASCAL VOC bit-interleaved colormap
      r |= ((c >> 0) & 1) << (7 - bit);
      g |= ((c >> 1) & 1) << (7 - bit);
      b |= ((c >> 2) & 1) << (7 - bit);
      c >>= 3;
    }
    pal[i] = {static_cast<png_byte>(r), static_cast<png_byte>(g), static_cast<png_byte>(b)};
  }
  return pal;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : file_(open(path, "wb")) {
    png_ = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_error, on_warning);
    info_ = png_create_info_struct(png_);
    png_init_io(png_, file_.get());
  }
  ~Writer() { png_destroy_write_struct(&png_, &info_); }
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  png_structp png() { return png_; }
  png_infop info() { return info_; }

  void write_rows(std::vector<png_bytep>& rows) {
    png_write_info(png_, info_);
    png_write_image(png_, rows.data());
    png_write_end(png_, nullptr);
  }

 private:
  FilePtr file_;
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

}  // namespace

void write_indexed8(const std::filesystem::path& path, Grid grid, const std::vector<int>& labels) {
  Writer w(path);
  png_set_IHDR(w.png(), w.info(), grid.cols, grid.rows, 8, PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  static const auto palette = make_palette();
  png_set_PLTE(w.png(), w.info(), palette.data(), 256);
  std::vector<png_byte> buf(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) buf[i] = static_cast<png_byte>(labels[i]);
  std::vector<png_bytep> rows(grid.rows);
  for (int r = 0; r < grid.rows; ++r) rows[r] = buf.data() + static_cast<std::size_t>(r) * grid.cols;
  w.write_rows(rows);
}

void write_gray16(const std::filesystem::path& path, Grid grid, const std::vector<int>& labels) {
  Writer w(path);
  png_set_IHDR(w.png(), w.info(), grid.cols, grid.rows, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_byte> buf(labels.size() * 2);
  for (std::size_t i = 0; i < labels.size(); ++i) {  // PNG is big-endian
    buf[2 * i] = static_cast<png_byte>((labels[i] >> 8) & 0xff);
    buf[2 * i + 1] = static_cast<png_byte>(labels[i] & 0xff);
  }
  std::vector<png_bytep> rows(grid.rows);
  for (int r = 0; r < grid.rows; ++r) rows[r] = buf.data() + static_cast<std::size_t>(r) * grid.cols * 2;
  w.write_rows(rows);
}

void write_rgb8(const std::filesystem::path& path, Grid grid, const std::vector<std::uint8_t>& rgb) {
  Writer w(path);
  png_set_IHDR(w.png(), w.info(), grid.cols, grid.rows, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_byte> buf(rgb.begin(), rgb.end());
  std::vector<png_bytep> rows(grid.rows);
  for (int r = 0; r < grid.rows; ++r) rows[r] = buf.data() + static_cast<std::size_t>(r) * grid.cols * 3;
  w.write_rows(rows);
}

Decoded read_labels(const std::filesystem::path& path) {
  FilePtr f = open(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_error, on_warning);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  png_init_io(png, f.get());
  png_read_info(png, info);
  const auto width = static_cast<int>(png_get_image_width(png, info));
  const auto height = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
    throw InputError(path.string() + ": label PNG must be palette-indexed or grayscale");
  }
  if (depth < 8) png_set_packing(png);
  png_read_update_info(png, info);

  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> buf(rowbytes * height);
  std::vector<png_bytep> rows(height);
  for (int r = 0; r < height; ++r) rows[r] = buf.data() + r * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);

  Decoded out;
  out.grid = {height, width};
  out.sixteen_bit = depth == 16;
  out.values.resize(static_cast<std::size_t>(width) * height);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * width + c;
      out.values[i] = depth == 16 ? (rows[r][2 * c] << 8) | rows[r][2 * c + 1] : rows[r][c];
    }
  }
  return out;
}

}  // namespace lsc::png
