#include "promptrestore/image.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace promptrestore {

Image::Image(int height, int width, float fill) : height_(height), width_(width) {
  if (height <= 0 || width <= 0) throw InvalidArgument("image dimensions must be positive");
  data_.assign(static_cast<size_t>(kChannels) * height * width, fill);
}

Image Image::crop(int top, int left, int height, int width) const {
  if (top < 0 || left < 0 || top + height > height_ || left + width > width_) {
    throw InvalidArgument("crop window outside image");
  }
  Image out(height, width);
  for (int c = 0; c < kChannels; ++c) {
    for (int y = 0; y < height; ++y) {
      const float* src = &data_[index(c, top + y, left)];
      std::copy(src, src + width, &out.at(c, y, 0));
    }
  }
  return out;
}

Image Image::flipped(bool horizontal, bool vertical) const {
  Image out(height_, width_);
  for (int c = 0; c < kChannels; ++c) {
    for (int y = 0; y < height_; ++y) {
      const int sy = vertical ? height_ - 1 - y : y;
      for (int x = 0; x < width_; ++x) {
        const int sx = horizontal ? width_ - 1 - x : x;
        out.at(c, y, x) = at(c, sy, sx);
      }
    }
  }
  return out;
}

void Image::clamp(float lo, float hi) {
  for (float& v : data_) v = std::clamp(v, lo, hi);
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw InvalidArgument(std::string(what) + ": shape mismatch (" + std::to_string(a.height()) +
                          "x" + std::to_string(a.width()) + " vs " + std::to_string(b.height()) +
                          "x" + std::to_string(b.width()) + ")");
  }
}

namespace {

Image from_mat(const cv::Mat& bgr) {
  if (bgr.empty()) throw InvalidArgument("image could not be decoded");
  cv::Mat rgb8;
  if (bgr.channels() == 1) {
    cv::cvtColor(bgr, rgb8, cv::COLOR_GRAY2RGB);
  } else if (bgr.channels() == 4) {
    cv::cvtColor(bgr, rgb8, cv::COLOR_BGRA2RGB);
  } else {
    cv::cvtColor(bgr, rgb8, cv::COLOR_BGR2RGB);
  }
  if (rgb8.depth() != CV_8U) rgb8.convertTo(rgb8, CV_8U, rgb8.depth() == CV_16U ? 1.0 / 257.0 : 1.0);
  Image out(rgb8.rows, rgb8.cols);
  for (int y = 0; y < rgb8.rows; ++y) {
    const auto* row = rgb8.ptr<cv::Vec3b>(y);
    for (int x = 0; x < rgb8.cols; ++x) {
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = row[x][c] / 255.0f;
    }
  }
  return out;
}

cv::Mat to_mat(const Image& image) {
  cv::Mat bgr(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        row[x][2 - c] = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return bgr;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw InvalidArgument("cannot read image " + path.string());
  return from_mat(mat);
}

void write_image(const std::filesystem::path& path, const Image& image) {
  if (!cv::imwrite(path.string(), to_mat(image))) {
    throw std::runtime_error("cannot write image " + path.string());
  }
}

Image decode_image(std::span<const uint8_t> bytes) {
  if (bytes.empty()) throw InvalidArgument("empty image payload");
  cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<uint8_t*>(bytes.data()));
  return from_mat(cv::imdecode(raw, cv::IMREAD_UNCHANGED));
}

std::vector<uint8_t> encode_png(const Image& image) {
  std::vector<uint8_t> out;
  cv::imencode(".png", to_mat(image), out);
  return out;
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (float& v : out.values()) v = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  return out;
}

std::vector<Image> synthetic_clean_images(int count, int height, int width, Rng& rng) {
  auto unit = [&] { return static_cast<float>(uniform_unit(rng)); };
  std::vector<Image> images;
  images.reserve(count);
  for (int n = 0; n < count; ++n) {
    Image img(height, width);
    float top[3], bottom[3];
    for (int c = 0; c < 3; ++c) {
      top[c] = 0.15f + 0.7f * unit();
      bottom[c] = 0.15f + 0.7f * unit();
    }
    const float tilt = unit() - 0.5f;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const float t = std::clamp(static_cast<float>(y) / height + tilt * x / width, 0.0f, 1.0f);
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = (1 - t) * top[c] + t * bottom[c];
      }
    }

    const int shapes = 3 + static_cast<int>(uniform_index(rng, 4));
    for (int s = 0; s < shapes; ++s) {
      float color[3];
      for (float& v : color) v = 0.05f + 0.9f * unit();
      const float cy = unit() * height, cx = unit() * width;
      const float ry = (0.08f + 0.25f * unit()) * height, rx = (0.08f + 0.25f * unit()) * width;
      const bool disc = uniform_index(rng, 2) == 0;
      const bool striped = uniform_index(rng, 3) == 0;
      const float period = 3.0f + 6.0f * unit();
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const float dy = (y - cy) / ry, dx = (x - cx) / rx;
          const bool inside = disc ? dy * dy + dx * dx <= 1.0f : std::abs(dy) <= 1.0f && std::abs(dx) <= 1.0f;
          if (!inside) continue;
          float shade = 1.0f;
          if (striped) shade = 0.75f + 0.25f * std::sin(2.0f * std::numbers::pi_v<float> * (x + y) / period);
          for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c] * shade;
        }
      }
    }
    img.clamp();
    images.push_back(std::move(img));
  }
  return images;
}

}  // namespace promptrestore
