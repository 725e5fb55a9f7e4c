#pragma once
#include <string>
#include <vector>

#include "cqa/chart_model.hpp"

namespace cqa {

// Dense RGB raster, channels in [0, 1], row-major top-left origin.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;  // height * width * 3

  Image() = default;
  Image(int w, int h, Rgb fill = {255, 255, 255});

  double& at(int x, int y, int c) {
    return data[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  double at(int x, int y, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  void set_pixel(int x, int y, Rgb color);
  bool operator==(const Image&) const = default;
};

// Binary PPM (P6, maxval 255). Values are clamped to [0, 1] on write.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

}  // namespace cqa
