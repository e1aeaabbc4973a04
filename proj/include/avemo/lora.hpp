#pragma once

#include <random>
#include <string>

#include "avemo/autograd.hpp"
#include "avemo/error.hpp"
#include "avemo/tensor.hpp"

namespace avemo {

/// Rank-r delta for one frozen projection: W + (alpha / r) * B * A.
/// A is r x d_in (random), B is d_out x r (zero), so a fresh adapter is a
/// no-op on the base projection.
template <class T>
struct LoraAdapter {
  int rank = 16;
  T alpha = T(16);
  ag::Parameter<T> a;
  ag::Parameter<T> b;

  LoraAdapter() = default;
  LoraAdapter(const std::string& name, Eigen::Index d_in, Eigen::Index d_out, int r, T alpha_, std::mt19937_64& rng)
      : rank(r), alpha(alpha_) {
    if (r < 1) fail(ErrorCode::kShapeMismatch, "LoRA rank must be >= 1, got " + std::to_string(r));
    if (d_in < 1 || d_out < 1) fail(ErrorCode::kShapeMismatch, "LoRA target has an empty dimension");
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(d_in)));
    Mat<T> av(r, d_in);
    for (Eigen::Index i = 0; i < av.size(); ++i) av.data()[i] = static_cast<T>(nd(rng));
    a = ag::Parameter<T>(name + ".lora_a", std::move(av), ag::ParamKind::kLora);
    b = ag::Parameter<T>(name + ".lora_b", Mat<T>::Zero(d_out, r), ag::ParamKind::kLora);
  }

  T scaling() const { return alpha / static_cast<T>(rank); }
  Eigen::Index d_in() const { return a.value.cols(); }
  Eigen::Index d_out() const { return b.value.rows(); }
};

template <class T>
void check_lora_shapes(const Mat<T>& w, const LoraAdapter<T>& ad) {
  if (ad.a.value.rows() != ad.rank || ad.b.value.cols() != ad.rank)
    fail(ErrorCode::kShapeMismatch, "adapter factors disagree with rank");
  if (w.cols() != ad.d_in() || w.rows() != ad.d_out())
    fail(ErrorCode::kShapeMismatch, "adapter does not fit base matrix");
}

/// W x + (alpha / r) B (A x), leaving W untouched.
template <class T>
Eigen::Matrix<T, Eigen::Dynamic, 1> lora_apply(const Eigen::Matrix<T, Eigen::Dynamic, 1>& x, const Mat<T>& w,
                                               const LoraAdapter<T>& ad) {
  check_lora_shapes(w, ad);
  if (x.size() != w.cols()) fail(ErrorCode::kShapeMismatch, "input length does not match base matrix");
  Eigen::Matrix<T, Eigen::Dynamic, 1> ax = ad.a.value * x;
  return w * x + ad.scaling() * (ad.b.value * ax);
}

/// W + (alpha / r) B A as a fresh matrix.
template <class T>
Mat<T> lora_merge(const Mat<T>& w, const LoraAdapter<T>& ad) {
  check_lora_shapes(w, ad);
  Mat<T> delta = ad.b.value * ad.a.value;
  return w + ad.scaling() * delta;
}

}  // namespace avemo
