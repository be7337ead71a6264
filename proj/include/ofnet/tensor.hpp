#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ofnet/common.hpp"

namespace ofnet {

// Minimal dense-tensor engine with reverse-mode differentiation.
// Feature maps use NCHW order. Graphs are built per forward call and
// released with the result; parameters are leaves that outlive them.
//
// Ops are pure with respect to their inputs. Parallel execution inside an
// op assigns disjoint output elements to threads with a fixed per-element
// summation order, so results are bitwise identical for any thread count.

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;  // accumulates into parents

  size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(std::vector<int> shape);
  static TensorT full(std::vector<int> shape, T v);
  static TensorT from(std::vector<int> shape, std::vector<T> data);
  /// He-style fan-in normal init used for conv weights.
  static TensorT randn(std::vector<int> shape, Rng& rng, double stddev);

  bool valid() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int ndim() const { return int(node_->shape.size()); }
  size_t size() const { return node_->value.size(); }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  T scalar() const;

  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  explicit TensorT(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = TensorT<float>;

/// Wires a new graph node. `backprop` receives the finished node and must
/// accumulate (+=) into parents' grads. Parents without gradient paths are
/// dropped so inference builds no graph.
template <typename T>
TensorT<T> make_op(std::vector<int> shape, std::vector<T> value,
                   std::vector<TensorT<T>> parents,
                   std::function<void(TensorNode<T>&)> backprop);

size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

/// Throws NumericError when any element is non-finite.
template <typename T>
void require_finite(std::span<const T> v, const char* what);

// ---- convolution ----------------------------------------------------------

/// Geometry of a 2-D convolution. Dilation 1 means dense taps. Padding is
/// zero-fill, per side, and may differ per axis; same_conv() fixes the
/// "same" convention as floor((k-1)*dilation/2).
struct ConvSpec {
  int out_channels = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  int dilation = 1;
  int pad_h = 0;
  int pad_w = 0;

  static ConvSpec same_conv(int out_channels, int kernel_h, int kernel_w,
                            int dilation = 1);
  void validate() const;
  int out_h(int in_h) const;
  int out_w(int in_w) const;
};

/// input (N,Ci,H,W) * weights (Co,Ci,KH,KW) + bias (Co). Differentiable in
/// all three tensors.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const ConvSpec& spec,
                  const TensorT<T>& weights, const TensorT<T>& bias);

// ---- pointwise, resampling, structure -------------------------------------

enum class Pointwise { relu, sigmoid, tanh };

template <typename T>
TensorT<T> pointwise(const TensorT<T>& x, Pointwise fn);

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  return pointwise(x, Pointwise::relu);
}
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return pointwise(x, Pointwise::sigmoid);
}

/// Bilinear upsampling, pixel-center convention without corner alignment:
/// source coordinate of output index j is (j + 0.5) * in/out - 0.5, clamped
/// to the valid range. Upsampling only; shrinking is a configuration error.
template <typename T>
TensorT<T> bilinear_upsample(const TensorT<T>& x, int out_h, int out_w);

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b);

/// Channels [c0, c1) of x; the inverse of concat_channels.
template <typename T>
TensorT<T> slice_channels(const TensorT<T>& x, int c0, int c1);

/// Zero-pads on the bottom/right to (new_h, new_w).
template <typename T>
TensorT<T> pad_spatial(const TensorT<T>& x, int new_h, int new_w);

/// Keeps the top-left (h, w) region.
template <typename T>
TensorT<T> crop_spatial(const TensorT<T>& x, int h, int w);

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c);

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x);

// ---- backward & optimizer --------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Gradients of `params` are zeroed
/// first, so parameters the loss never reaches end up with zero gradient.
template <typename T>
void backward(const TensorT<T>& loss, std::span<TensorT<T>> params);

/// Adam moment accumulators plus hyperparameters.
template <typename T>
struct OptimState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int64_t step = 0;
  std::vector<std::vector<T>> m;  // first moments, per parameter
  std::vector<std::vector<T>> v;  // second moments, per parameter
};

/// One Adam update over params' accumulated gradients.
template <typename T>
void optimizer_step(std::span<TensorT<T>> params, OptimState<T>& state);

}  // namespace ofnet
