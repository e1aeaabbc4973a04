#pragma once

// Layers shared by the encoders and the decoder. Every layer names its
// parameters at construction and exposes them through for_each_param so
// checkpointing, freezing and optimizers can treat models uniformly.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "avemo/autograd.hpp"
#include "avemo/lora.hpp"

namespace avemo::nn {

using ag::Parameter;
using ag::ParamKind;
using ag::Tape;
using ag::Var;

template <class T>
Mat<T> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(nd(rng));
  return m;
}

/// Standard sin/cos table; row p is the encoding of position p + offset.
template <class T>
Mat<T> sinusoid(Eigen::Index n, Eigen::Index d, Eigen::Index offset = 0) {
  Mat<T> pe(n, d);
  for (Eigen::Index p = 0; p < n; ++p) {
    for (Eigen::Index i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double a = static_cast<double>(p + offset) * freq;
      pe(p, i) = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return pe;
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, Eigen::Index d_in, Eigen::Index d_out, std::mt19937_64& rng, bool bias = true)
      : weight_(name + ".weight", random_normal<T>(d_out, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng)) {
    if (bias) bias_ = Parameter<T>(name + ".bias", Mat<T>::Zero(1, d_out), ParamKind::kBias);
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    Var<T> y = ag::matmul_nt(x, tape(weight_));
    return bias_ ? ag::add_row(y, tape(*bias_)) : y;
  }

  Eigen::Index d_in() const { return weight_.value.cols(); }
  Eigen::Index d_out() const { return weight_.value.rows(); }
  Parameter<T>& weight() { return weight_; }
  const Parameter<T>& weight() const { return weight_; }
  std::optional<Parameter<T>>& bias() { return bias_; }
  const std::optional<Parameter<T>>& bias() const { return bias_; }

  template <class F>
  void for_each_param(F&& f) {
    f(weight_);
    if (bias_) f(*bias_);
  }

 private:
  Parameter<T> weight_;
  std::optional<Parameter<T>> bias_;
};

/// Linear projection that can carry a low-rank adapter. While unmerged the
/// adapter path runs beside the frozen weight; merge() folds it in place.
template <class T>
class LoraLinear {
 public:
  LoraLinear() = default;
  LoraLinear(const std::string& name, Eigen::Index d_in, Eigen::Index d_out, std::mt19937_64& rng)
      : name_(name), base_(name, d_in, d_out, rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    Var<T> y = base_(tape, x);
    if (!adapter_ || merged_) return y;
    Var<T> low = ag::matmul_nt(ag::matmul_nt(x, tape(adapter_->a)), tape(adapter_->b));
    return ag::add(y, ag::scale(low, adapter_->scaling()));
  }

  void attach(int rank, T alpha, std::mt19937_64& rng) {
    if (merged_) fail(ErrorCode::kDoubleMerge, name_ + ": cannot re-attach while merged");
    adapter_.emplace(name_, base_.d_in(), base_.d_out(), rank, alpha, rng);
  }
  void detach() {
    if (merged_) unmerge();
    adapter_.reset();
  }

  void merge() {
    if (!adapter_) fail(ErrorCode::kPrecondition, name_ + ": no adapter to merge");
    if (merged_) fail(ErrorCode::kDoubleMerge, name_ + ": adapter already merged");
    unmerged_weight_ = base_.weight().value;
    base_.weight().value = lora_merge(base_.weight().value, *adapter_);
    merged_ = true;
  }
  void unmerge() {
    if (!merged_) return;
    base_.weight().value = unmerged_weight_;
    merged_ = false;
  }

  bool merged() const { return merged_; }
  bool has_adapter() const { return adapter_.has_value(); }
  const std::string& name() const { return name_; }
  Linear<T>& base() { return base_; }
  const Linear<T>& base() const { return base_; }
  std::optional<LoraAdapter<T>>& adapter() { return adapter_; }
  const std::optional<LoraAdapter<T>>& adapter() const { return adapter_; }

  template <class F>
  void for_each_param(F&& f) {
    base_.for_each_param(f);
    if (adapter_) {
      f(adapter_->a);
      f(adapter_->b);
    }
  }

 private:
  std::string name_;
  Linear<T> base_;
  std::optional<LoraAdapter<T>> adapter_;
  bool merged_ = false;
  Mat<T> unmerged_weight_;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index d)
      : gain_(name + ".gain", Mat<T>::Ones(1, d), ParamKind::kNorm),
        shift_(name + ".shift", Mat<T>::Zero(1, d), ParamKind::kNorm) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return ag::layer_norm(x, tape(gain_), tape(shift_));
  }

  template <class F>
  void for_each_param(F&& f) {
    f(gain_);
    f(shift_);
  }

 private:
  Parameter<T> gain_;
  Parameter<T> shift_;
};

/// Multi-head attention. Queries come from `xq`, keys and values from `xkv`;
/// pass the same input for self-attention.
template <class T>
class Attention {
 public:
  Attention() = default;
  Attention(const std::string& name, Eigen::Index d_model, int n_heads, std::mt19937_64& rng,
            Eigen::Index d_kv_in = 0)
      : n_heads_(n_heads),
        q_(name + ".q", d_model, d_model, rng),
        k_(name + ".k", d_kv_in ? d_kv_in : d_model, d_model, rng),
        v_(name + ".v", d_kv_in ? d_kv_in : d_model, d_model, rng),
        o_(name + ".o", d_model, d_model, rng) {
    if (n_heads < 1 || d_model % n_heads != 0)
      fail(ErrorCode::kShapeMismatch, name + ": d_model must be divisible by n_heads");
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& xq, const Var<T>& xkv, bool causal) const {
    const Var<T> q = q_(tape, xq), k = k_(tape, xkv), v = v_(tape, xkv);
    const Eigen::Index dh = q.cols() / n_heads_;
    const T inv = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> heads;
    heads.reserve(static_cast<std::size_t>(n_heads_));
    for (int h = 0; h < n_heads_; ++h) {
      auto qh = ag::slice_cols(q, h * dh, dh);
      auto kh = ag::slice_cols(k, h * dh, dh);
      auto vh = ag::slice_cols(v, h * dh, dh);
      auto p = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv), causal);
      heads.push_back(ag::matmul(p, vh));
    }
    return o_(tape, n_heads_ == 1 ? heads[0] : ag::concat_cols(heads));
  }

  std::vector<LoraLinear<T>*> projections() { return {&q_, &k_, &v_, &o_}; }

  template <class F>
  void for_each_param(F&& f) {
    q_.for_each_param(f);
    k_.for_each_param(f);
    v_.for_each_param(f);
    o_.for_each_param(f);
  }

 private:
  int n_heads_ = 1;
  LoraLinear<T> q_, k_, v_, o_;
};

template <class T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const std::string& name, Eigen::Index d_model, Eigen::Index d_hidden, std::mt19937_64& rng)
      : up_(name + ".up", d_model, d_hidden, rng), down_(name + ".down", d_hidden, d_model, rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const { return down_(tape, ag::gelu(up_(tape, x))); }

  template <class F>
  void for_each_param(F&& f) {
    up_.for_each_param(f);
    down_.for_each_param(f);
  }

 private:
  Linear<T> up_, down_;
};

/// Pre-norm self-attention block; causal for the decoder.
template <class T>
class SelfBlock {
 public:
  SelfBlock() = default;
  SelfBlock(const std::string& name, Eigen::Index d_model, int n_heads, std::mt19937_64& rng)
      : ln1_(name + ".ln1", d_model),
        attn_(name + ".attn", d_model, n_heads, rng),
        ln2_(name + ".ln2", d_model),
        ffn_(name + ".ffn", d_model, 4 * d_model, rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x, bool causal) const {
    auto h = ln1_(tape, x);
    auto y = ag::add(x, attn_(tape, h, h, causal));
    return ag::add(y, ffn_(tape, ln2_(tape, y)));
  }

  Attention<T>& attention() { return attn_; }

  template <class F>
  void for_each_param(F&& f) {
    ln1_.for_each_param(f);
    attn_.for_each_param(f);
    ln2_.for_each_param(f);
    ffn_.for_each_param(f);
  }

 private:
  LayerNorm<T> ln1_;
  Attention<T> attn_;
  LayerNorm<T> ln2_;
  FeedForward<T> ffn_;
};

/// Pre-norm cross-attention block: the query rows attend to `memory`, then a
/// feed-forward layer refines them. Both sub-layers are residual.
template <class T>
class CrossBlock {
 public:
  CrossBlock() = default;
  CrossBlock(const std::string& name, Eigen::Index d_model, int n_heads, std::mt19937_64& rng)
      : ln_q_(name + ".ln_q", d_model),
        ln_kv_(name + ".ln_kv", d_model),
        attn_(name + ".attn", d_model, n_heads, rng),
        ln2_(name + ".ln2", d_model),
        ffn_(name + ".ffn", d_model, 4 * d_model, rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& queries, const Var<T>& memory) const {
    auto y = ag::add(queries, attn_(tape, ln_q_(tape, queries), ln_kv_(tape, memory), false));
    return ag::add(y, ffn_(tape, ln2_(tape, y)));
  }

  template <class F>
  void for_each_param(F&& f) {
    ln_q_.for_each_param(f);
    ln_kv_.for_each_param(f);
    attn_.for_each_param(f);
    ln2_.for_each_param(f);
    ffn_.for_each_param(f);
  }

 private:
  LayerNorm<T> ln_q_, ln_kv_;
  Attention<T> attn_;
  LayerNorm<T> ln2_;
  FeedForward<T> ffn_;
};

}  // namespace avemo::nn
