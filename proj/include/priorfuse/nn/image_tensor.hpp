#pragma once

#include <algorithm>
#include <vector>

#include "priorfuse/core/image.hpp"
#include "priorfuse/nn/tensor.hpp"

namespace priorfuse::nn {

// HWC image -> [C,H,W] constant tensor.
template <class T>
Var<T> to_tensor(const ImageBuffer& image) {
  const int h = image.height(), w = image.width(), c = image.channels();
  std::vector<T> v(static_cast<std::size_t>(c) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) v[(static_cast<std::size_t>(ch) * h + y) * w + x] = static_cast<T>(image.at(y, x, ch));
  return Var<T>::constant({c, h, w}, std::move(v));
}

// [C,H,W] tensor -> HWC image, clamped to [0,1] when requested.
template <class T>
ImageBuffer to_image(const Var<T>& t, bool clamp = true) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  ImageBuffer out(h, w, c);
  auto v = t.value();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        float f = static_cast<float>(v[(static_cast<std::size_t>(ch) * h + y) * w + x]);
        out.at(y, x, ch) = clamp ? std::clamp(f, 0.0f, 1.0f) : f;
      }
  return out;
}

}  // namespace priorfuse::nn
