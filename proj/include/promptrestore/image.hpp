#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "promptrestore/common.hpp"

namespace promptrestore {

/// RGB image with real-valued samples, stored planar (channel, row, column).
/// Pixel values are expected in [0, 1] but the type does not enforce it.
class Image {
 public:
  static constexpr int kChannels = 3;

  Image() = default;
  Image(int height, int width, float fill = 0.0f);

  int height() const { return height_; }
  int width() const { return width_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::span<float> plane(int c) { return {data_.data() + plane_offset(c), plane_size()}; }
  std::span<const float> plane(int c) const { return {data_.data() + plane_offset(c), plane_size()}; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  Image crop(int top, int left, int height, int width) const;
  Image flipped(bool horizontal, bool vertical) const;
  void clamp(float lo = 0.0f, float hi = 1.0f);

  friend bool operator==(const Image&, const Image&) = default;

 private:
  size_t plane_size() const { return static_cast<size_t>(height_) * width_; }
  size_t plane_offset(int c) const { return static_cast<size_t>(c) * plane_size(); }
  size_t index(int c, int y, int x) const {
    return plane_offset(c) + static_cast<size_t>(y) * width_ + x;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

void require_same_shape(const Image& a, const Image& b, const char* what);

// 8-bit file boundary. Decoding accepts anything OpenCV reads; encoding is PNG.
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);
Image decode_image(std::span<const uint8_t> bytes);
std::vector<uint8_t> encode_png(const Image& image);

/// Quantizes to 8 bits and back, the round trip every CLI image goes through.
Image quantize_8bit(const Image& image);

/// Procedural clean scenes (smooth gradients, flat shapes, stripes) used as
/// self-contained training and evaluation content.
std::vector<Image> synthetic_clean_images(int count, int height, int width, Rng& rng);

}  // namespace promptrestore
