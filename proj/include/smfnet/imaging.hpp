#pragma once

#include <opencv2/imgcodecs.hpp>
#include <opencv2/core.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "smfnet/core/tensor.hpp"

namespace smfnet {

enum class Channels { GRAY1, RGB3, YCBCR3 };

inline int channel_count(Channels c) { return c == Channels::GRAY1 ? 1 : 3; }

/// Image batch in [0,1], shape (B,C,H,W).
template <class T>
struct Image {
  Tensor<T> data;  // (B,C,H,W)
  Channels channels = Channels::GRAY1;

  int batch() const { return data.dim(0); }
  int height() const { return data.dim(2); }
  int width() const { return data.dim(3); }
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ITU-R BT.601 luminance weights; Cb/Cr offset at 0.5.
inline constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

template <class T>
Image<T> load_image(const std::string& path, Channels mode) {
  cv::Mat raw = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw IoError("load_image: cannot read " + path);
  if (raw.rows == 0 || raw.cols == 0) throw std::invalid_argument("load_image: zero-sized image");
  double denom = raw.depth() == CV_16U ? 65535.0 : 255.0;
  cv::Mat img;
  if (raw.channels() == 4)
    cv::mixChannels({raw}, {img = cv::Mat(raw.rows, raw.cols, CV_MAKETYPE(raw.depth(), 3))},
                    {0, 0, 1, 1, 2, 2});
  else
    img = raw;
  int H = img.rows, W = img.cols;
  Image<T> out;
  out.channels = mode;
  out.data = Tensor<T>({1, channel_count(mode), H, W});
  auto px = [&](int h, int w, int c) -> double {
    if (img.depth() == CV_16U)
      return img.channels() == 1 ? img.at<std::uint16_t>(h, w) : img.at<cv::Vec3w>(h, w)[c];
    return img.channels() == 1 ? img.at<std::uint8_t>(h, w) : img.at<cv::Vec3b>(h, w)[c];
  };
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      double r, g, b;
      if (img.channels() == 1) {
        r = g = b = px(h, w, 0) / denom;
      } else {  // OpenCV stores BGR
        b = px(h, w, 0) / denom;
        g = px(h, w, 1) / denom;
        r = px(h, w, 2) / denom;
      }
      if (mode == Channels::GRAY1) {
        out.data.at(0, 0, h, w) = static_cast<T>(kLumaR * r + kLumaG * g + kLumaB * b);
      } else {
        out.data.at(0, 0, h, w) = static_cast<T>(r);
        out.data.at(0, 1, h, w) = static_cast<T>(g);
        out.data.at(0, 2, h, w) = static_cast<T>(b);
      }
    }
  if (mode == Channels::YCBCR3) {
    Image<T> rgb = out;
    rgb.channels = Channels::RGB3;
    out = rgb_to_ycbcr(rgb);
  }
  return out;
}

/// Writes the first batch item as an 8-bit PNG.
template <class T>
void save_image(const Image<T>& img, const std::string& path) {
  int H = img.height(), W = img.width();
  check(img.channels != Channels::YCBCR3, "save_image: convert to RGB or gray first");
  cv::Mat m(H, W, img.channels == Channels::GRAY1 ? CV_8UC1 : CV_8UC3);
  auto q = [](double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
  };
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      if (img.channels == Channels::GRAY1) {
        m.at<std::uint8_t>(h, w) = q(img.data.at(0, 0, h, w));
      } else {
        m.at<cv::Vec3b>(h, w) = cv::Vec3b(q(img.data.at(0, 2, h, w)), q(img.data.at(0, 1, h, w)),
                                          q(img.data.at(0, 0, h, w)));
      }
    }
  if (!cv::imwrite(path, m)) throw IoError("save_image: cannot write " + path);
}

template <class T>
Image<T> rgb_to_ycbcr(const Image<T>& img) {
  check(img.channels == Channels::RGB3, "rgb_to_ycbcr: expects RGB input");
  Image<T> out = img;
  out.channels = Channels::YCBCR3;
  int B = img.batch(), H = img.height(), W = img.width();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        double r = img.data.at(b, 0, h, w), g = img.data.at(b, 1, h, w), bl = img.data.at(b, 2, h, w);
        double y = kLumaR * r + kLumaG * g + kLumaB * bl;
        out.data.at(b, 0, h, w) = static_cast<T>(y);
        out.data.at(b, 1, h, w) = static_cast<T>((bl - y) / 1.772 + 0.5);
        out.data.at(b, 2, h, w) = static_cast<T>((r - y) / 1.402 + 0.5);
      }
  return out;
}

template <class T>
Image<T> ycbcr_to_rgb(const Image<T>& img) {
  check(img.channels == Channels::YCBCR3, "ycbcr_to_rgb: expects YCbCr input");
  Image<T> out = img;
  out.channels = Channels::RGB3;
  int B = img.batch(), H = img.height(), W = img.width();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        double y = img.data.at(b, 0, h, w);
        double cb = img.data.at(b, 1, h, w) - 0.5, cr = img.data.at(b, 2, h, w) - 0.5;
        double r = y + 1.402 * cr;
        double bl = y + 1.772 * cb;
        double g = (y - kLumaR * r - kLumaB * bl) / kLumaG;
        out.data.at(b, 0, h, w) = static_cast<T>(r);
        out.data.at(b, 1, h, w) = static_cast<T>(g);
        out.data.at(b, 2, h, w) = static_cast<T>(bl);
      }
  return out;
}

struct PatchSpec {
  int size = 128;
  int stride = 128;
};

template <class T>
std::vector<Image<T>> crop_patches(const Image<T>& img, const PatchSpec& spec) {
  check(spec.size > 0 && spec.stride > 0, "crop_patches: size and stride must be positive");
  int H = img.height(), W = img.width(), C = img.data.dim(1);
  check(spec.size <= H && spec.size <= W, "crop_patches: patch larger than image");
  std::vector<Image<T>> out;
  for (int y = 0; y + spec.size <= H; y += spec.stride)
    for (int x = 0; x + spec.size <= W; x += spec.stride) {
      Image<T> p;
      p.channels = img.channels;
      p.data = Tensor<T>({1, C, spec.size, spec.size});
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < spec.size; ++h)
          for (int w = 0; w < spec.size; ++w)
            p.data.at(0, c, h, w) = img.data.at(0, c, y + h, x + w);
      out.push_back(std::move(p));
    }
  return out;
}

inline long long patch_count(int H, int W, const PatchSpec& s) {
  return static_cast<long long>((H - s.size) / s.stride + 1) * ((W - s.size) / s.stride + 1);
}

inline int reflect_index_img(int i, int n) {
  if (i < n) return i;
  int over = i - n + 1;
  int r = n - 1 - over;
  return r >= 0 ? r : 0;
}

/// Reflect-pads to the smallest multiple of m; returns original dims.
template <class T>
Image<T> pad_to_multiple(const Image<T>& img, int m, int& orig_h, int& orig_w) {
  check(m >= 1, "pad_to_multiple: m must be >= 1");
  int H = img.height(), W = img.width(), C = img.data.dim(1), B = img.batch();
  orig_h = H;
  orig_w = W;
  int Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
  if (Hp == H && Wp == W) return img;
  Image<T> out;
  out.channels = img.channels;
  out.data = Tensor<T>({B, C, Hp, Wp});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < Hp; ++h) {
        int hs = reflect_index_img(h, H);
        for (int w = 0; w < Wp; ++w)
          out.data.at(b, c, h, w) = img.data.at(b, c, hs, reflect_index_img(w, W));
      }
  return out;
}

template <class T>
Image<T> crop_to(const Image<T>& img, int H, int W) {
  int B = img.batch(), C = img.data.dim(1);
  Image<T> out;
  out.channels = img.channels;
  out.data = Tensor<T>({B, C, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) out.data.at(b, c, h, w) = img.data.at(b, c, h, w);
  return out;
}

template <class T>
void validate_image(const Image<T>& img) {
  check(img.data.rank() == 4, "image must be 4-D");
  check(img.data.dim(1) == channel_count(img.channels), "channel layout mismatch");
  check(img.height() >= 8 && img.width() >= 8, "image must be at least 8x8");
  for (long long i = 0; i < img.data.numel(); ++i) {
    T v = img.data[i];
    check(std::isfinite(static_cast<double>(v)) && v >= T(0) && v <= T(1),
          "image values must be finite and in [0,1]");
  }
}

}  // namespace smfnet
