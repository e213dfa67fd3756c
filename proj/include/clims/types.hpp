#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace clims {

using real = double;

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = MatX<real>;
using Vec = VecX<real>;
using MaskGrid = Eigen::VectorXi;  // one integer label per pixel, 0 = background

/// Thrown when an input violates a documented precondition.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

/// RGB image, pixels in [0,1]. Row p = y*width + x of `rgb` holds pixel (x,y).
template <typename Scalar>
struct ImageT {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3> rgb;
  int height = 0;
  int width = 0;

  int pixel_count() const { return height * width; }
  Scalar& at(int y, int x, int c) { return rgb(y * width + x, c); }
  Scalar at(int y, int x, int c) const { return rgb(y * width + x, c); }
};
using Image = ImageT<real>;

/// Stack of single-channel planes over a shared grid. Plane k lives in row k,
/// pixel order matches ImageT (p = y*width + x). Used both for backbone
/// feature maps (planes = channels) and activation maps (planes = classes).
template <typename Scalar>
struct PlaneStackT {
  MatX<Scalar> values;  // planes x (height*width)
  int height = 0;
  int width = 0;

  int planes() const { return static_cast<int>(values.rows()); }
  int pixel_count() const { return height * width; }
};
using PlaneStack = PlaneStackT<real>;
using FeatureMap = PlaneStack;      // C x (H_f*W_f)
using ActivationMaps = PlaneStack;  // K x (H*W)

/// Per-class 1x1-convolution weights, one column per class (C x K).
using ClassWeights = Mat;
using ClassLogits = Vec;

/// Binary image-level labels, entries in {0,1}.
using LabelVector = Eigen::VectorXi;

template <typename Scalar>
ImageT<Scalar> make_image(int height, int width, Scalar fill = Scalar(0)) {
  ImageT<Scalar> img;
  img.height = height;
  img.width = width;
  img.rgb.setConstant(height * width, 3, fill);
  return img;
}

template <typename Scalar>
PlaneStackT<Scalar> make_planes(int planes, int height, int width, Scalar fill = Scalar(0)) {
  PlaneStackT<Scalar> s;
  s.height = height;
  s.width = width;
  s.values.setConstant(planes, height * width, fill);
  return s;
}

template <typename Scalar>
void validate_image(const ImageT<Scalar>& img) {
  require(img.height >= 8 && img.width >= 8, "image: height and width must be >= 8");
  require(img.rgb.rows() == img.pixel_count(), "image: pixel buffer does not match height*width");
  require(img.rgb.allFinite(), "image: non-finite pixel value");
  require((img.rgb.array() >= Scalar(0)).all() && (img.rgb.array() <= Scalar(1)).all(),
          "image: pixel values must lie in [0,1]");
}

inline void validate_labels(const LabelVector& y) {
  for (int k = 0; k < y.size(); ++k)
    require(y[k] == 0 || y[k] == 1, "labels: entries must be 0 or 1");
}

/// Horizontal mirror (x -> width-1-x), used by augmentation and flip-averaged inference.
template <typename Scalar>
ImageT<Scalar> flip_horizontal(const ImageT<Scalar>& img) {
  ImageT<Scalar> out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.rgb.row(y * img.width + x) = img.rgb.row(y * img.width + (img.width - 1 - x));
  return out;
}

template <typename Scalar>
PlaneStackT<Scalar> flip_horizontal(const PlaneStackT<Scalar>& maps) {
  PlaneStackT<Scalar> out = maps;
  for (int y = 0; y < maps.height; ++y)
    for (int x = 0; x < maps.width; ++x)
      out.values.col(y * maps.width + x) = maps.values.col(y * maps.width + (maps.width - 1 - x));
  return out;
}

}  // namespace clims
