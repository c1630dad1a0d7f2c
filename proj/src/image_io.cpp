// PNG and JPEG codecs for Raster.

#include <png.h>
#include <cstdio>
// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "dfl/raster.hpp"

namespace dfl {

namespace {

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

unsigned char quantize(double v) {
  const double scaled = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<unsigned char>(std::clamp(scaled, 0.0, 255.0));
}

Raster from_rgb8(const unsigned char* px, int w, int h) {
  Raster out(w, h);
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = px[i] / 255.0;
  return out;
}

Raster decode_png(std::span<const unsigned char> bytes, const std::string& name) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DecodeError("cannot decode PNG '" + name + "': " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw DecodeError("cannot decode PNG '" + name + "': " + msg);
  }
  return from_rgb8(px.data(), static_cast<int>(image.width), static_cast<int>(image.height));
}

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// Runs the libjpeg decode; returns false if the library signalled an error.
// Outputs go through pointers so nothing the longjmp skips over lives in
// this frame.
bool run_jpeg_decode(std::span<const unsigned char> bytes, jpeg_decompress_struct* cinfo,
                     JpegErrorMgr* err, std::vector<unsigned char>* px, int* w, int* h) {
  if (setjmp(err->jump)) return false;
  jpeg_create_decompress(cinfo);
  jpeg_mem_src(cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(cinfo, TRUE);
  cinfo->out_color_space = JCS_RGB;
  jpeg_start_decompress(cinfo);
  *w = static_cast<int>(cinfo->output_width);
  *h = static_cast<int>(cinfo->output_height);
  px->resize(static_cast<std::size_t>(*w) * *h * 3);
  while (cinfo->output_scanline < cinfo->output_height) {
    JSAMPROW row = px->data() + static_cast<std::size_t>(cinfo->output_scanline) * *w * 3;
    jpeg_read_scanlines(cinfo, &row, 1);
  }
  jpeg_finish_decompress(cinfo);
  return true;
}

Raster decode_jpeg(std::span<const unsigned char> bytes, const std::string& name) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  err.message[0] = '\0';
  std::vector<unsigned char> px;
  int w = 0;
  int h = 0;
  const bool ok = run_jpeg_decode(bytes, &cinfo, &err, &px, &w, &h);
  jpeg_destroy_decompress(&cinfo);
  if (!ok) throw DecodeError("cannot decode JPEG '" + name + "': " + err.message);
  return from_rgb8(px.data(), w, h);
}

void write_png(const std::filesystem::path& path, const unsigned char* px, int w, int h, png_uint_32 format) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, px, 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

std::vector<unsigned char> to_rgb8(const Raster& raster) {
  std::vector<unsigned char> px(raster.data().size());
  const auto src = raster.data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = quantize(src[i]);
  return px;
}

}  // namespace

Raster decode_image(std::span<const unsigned char> bytes, const std::string& name) {
  static constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) {
    return decode_png(bytes, name);
  }
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) {
    return decode_jpeg(bytes, name);
  }
  throw DecodeError("unrecognized image stream '" + name + "'");
}

Raster load(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  if (ext != ".png" && ext != ".jpg" && ext != ".jpeg") {
    throw DecodeError("unsupported image format '" + path.string() + "'");
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (ext == ".png") return decode_png(bytes, path.string());
  return decode_jpeg(bytes, path.string());
}

void save(const Raster& raster, const std::filesystem::path& path) {
  if (lower_extension(path) != ".png") {
    throw ArgumentError("only PNG output is supported: '" + path.string() + "'");
  }
  if (raster.empty()) throw ArgumentError("cannot save an empty raster");
  const auto px = to_rgb8(raster);
  write_png(path, px.data(), raster.width(), raster.height(), PNG_FORMAT_RGB);
}

void save_gray(const GrayRaster& gray, const std::filesystem::path& path) {
  if (lower_extension(path) != ".png") {
    throw ArgumentError("only PNG output is supported: '" + path.string() + "'");
  }
  std::vector<unsigned char> px(gray.data().size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = quantize(gray.data()[i]);
  write_png(path, px.data(), gray.width(), gray.height(), PNG_FORMAT_GRAY);
}

std::vector<unsigned char> encode_png(const Raster& raster) {
  const auto px = to_rgb8(raster);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raster.width());
  image.height = static_cast<png_uint_32>(raster.height());
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, px.data(), 0, nullptr)) {
    throw IoError(std::string("cannot encode PNG: ") + image.message);
  }
  std::vector<unsigned char> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, px.data(), 0, nullptr)) {
    throw IoError(std::string("cannot encode PNG: ") + image.message);
  }
  out.resize(size);
  return out;
}

}  // namespace dfl
