#pragma once

#include <string>
#include <utility>

#include "mf/tensor.hpp"

namespace mf {

// Raster codec for 8-bit grayscale and RGB images. In-memory images are
// float tensors [C,H,W] with C in {1,3} and values in [0,1]. Readers sniff
// the magic bytes (PNG, binary PPM "P6", binary PGM "P5"); writers pick the
// container from the file extension (.png, .ppm, .pgm).
Tensor<float> read_image(const std::string& path);
void write_image(const std::string& path, const Tensor<float>& image);

// Header-only peek: (height, width). Used to validate annotations without
// decoding pixels.
std::pair<int, int> read_image_size(const std::string& path);

}  // namespace mf
