#pragma once

#include <filesystem>
#include <string>

#include <Eigen/Dense>

namespace learn {

/// H x W x 3 image, values in [0, 1]. Storage is one row-major plane per
/// channel so a channel maps straight onto a (H*W) vector with index
/// y*W + x, the same position order the attention masks use.
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : height_(height), width_(width), data_(Eigen::MatrixXd::Constant(3, Eigen::Index(height) * width, fill)) {}

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return height_ == 0 || width_ == 0; }

  double& operator()(int y, int x, int c) { return data_(c, Eigen::Index(y) * width_ + x); }
  double operator()(int y, int x, int c) const { return data_(c, Eigen::Index(y) * width_ + x); }

  /// 3 x (H*W) channel-major view.
  const Eigen::MatrixXd& planes() const { return data_; }
  Eigen::MatrixXd& planes() { return data_; }

  static Image from_planes(int height, int width, Eigen::MatrixXd planes);

  Image crop(int x0, int y0, int x1, int y1) const;
  Image flipped_horizontal() const;
  Image flipped_vertical() const;

  /// Rec. 601 luma, row-major H*W.
  Eigen::VectorXd luminance() const;

  friend bool operator==(const Image& a, const Image& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  Eigen::MatrixXd data_;
};

/// Throws BadShape unless the image is non-empty with values in [0, 1].
void check_image(const Image& image);

/// 8-bit RGB PNG. Values are rounded to the nearest 1/255 on write.
void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

double psnr(const Image& a, const Image& b);

}  // namespace learn
