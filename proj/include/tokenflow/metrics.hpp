#pragma once

// Image quality metrics on [S x S x C] or [B x S x S x C] tensors.

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "tokenflow/tensor.hpp"

namespace tokenflow {

inline constexpr double kPsnrCap = 99.0;  // reported when the images are identical
inline constexpr std::size_t kSsimWindow = 8;

inline double mse(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "mse");
  if (x.size() == 0) throw DimensionError("mse of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

inline double psnr(const Tensor& x, const Tensor& y, double peak = 1.0) {
  if (!(peak > 0.0)) throw ParameterError("psnr: peak must be positive");
  const double m = mse(x, y);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

namespace detail {

struct ImageGeometry {
  std::size_t batch, height, width, channels;
};

inline ImageGeometry image_geometry(const Tensor& x, const char* what) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  throw DimensionError(std::string(what) + ": expected an image tensor, got " + shape_str(x.shape()));
}

}  // namespace detail

// Mean SSIM over non-overlapping 8x8 windows, per channel, then averaged over
// channels and images. Population (1/n) moments; trailing rows/columns that do
// not fill a window are ignored.
inline double ssim(const Tensor& x, const Tensor& y, double peak = 1.0) {
  require_same_shape(x, y, "ssim");
  const auto g = detail::image_geometry(x, "ssim");
  constexpr std::size_t w = kSsimWindow;
  if (g.height < w || g.width < w) {
    throw DimensionError("ssim: image " + shape_str(x.shape()) + " is smaller than the " +
                         std::to_string(w) + "x" + std::to_string(w) + " window");
  }
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const double n = static_cast<double>(w * w);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t wy = 0; wy + w <= g.height; wy += w)
        for (std::size_t wx = 0; wx + w <= g.width; wx += w) {
          double mx = 0, my = 0;
          for (std::size_t dy = 0; dy < w; ++dy)
            for (std::size_t dx = 0; dx < w; ++dx) {
              const std::size_t i = ((b * g.height + wy + dy) * g.width + wx + dx) * g.channels + c;
              mx += x[i];
              my += y[i];
            }
          mx /= n;
          my /= n;
          double vx = 0, vy = 0, cov = 0;
          for (std::size_t dy = 0; dy < w; ++dy)
            for (std::size_t dx = 0; dx < w; ++dx) {
              const std::size_t i = ((b * g.height + wy + dy) * g.width + wx + dx) * g.channels + c;
              vx += (x[i] - mx) * (x[i] - mx);
              vy += (y[i] - my) * (y[i] - my);
              cov += (x[i] - mx) * (y[i] - my);
            }
          vx /= n;
          vy /= n;
          cov /= n;
          total += ((2 * mx * my + c1) * (2 * cov + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
  return total / static_cast<double>(count);
}

}  // namespace tokenflow
