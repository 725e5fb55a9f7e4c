#include "cqa/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace cqa {

Image::Image(int w, int h, Rgb fill)
    : width(w), height(h), data(static_cast<size_t>(w) * h * 3) {
  double rgb[3] = {fill.r / 255.0, fill.g / 255.0, fill.b / 255.0};
  for (size_t i = 0; i < data.size(); ++i) data[i] = rgb[i % 3];
}

void Image::set_pixel(int x, int y, Rgb color) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  at(x, y, 0) = color.r / 255.0;
  at(x, y, 1) = color.g / 255.0;
  at(x, y, 2) = color.b / 255.0;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(img.data.size());
  for (double v : img.data) {
    double c = std::clamp(v, 0.0, 1.0);
    bytes.push_back(static_cast<unsigned char>(std::lround(c * 255.0)));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write: " + path);
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error("not a P6 ppm: " + path);
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("unsupported ppm header: " + path);
  in.get();  // single whitespace after maxval
  Image img(w, h);
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error("truncated ppm: " + path);
  for (size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace cqa
