#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ofnet/tensor.hpp"

namespace ofnet {

// Network building blocks: the multi-rate context learner producing the
// bilateral map, the bilateral response fusion, the stripe-convolution
// reasoning head, and the edge path assembly. Every conv is followed by a
// relu except final logits; all convs use the "same" padding convention.

template <typename T>
using ParamVisitor = std::function<void(const std::string&, TensorT<T>&)>;

/// A conv weight/bias pair with fixed geometry.
template <typename T>
struct ConvLayer {
  ConvSpec spec;
  TensorT<T> w;
  TensorT<T> b;

  static ConvLayer make(int in_ch, int out_ch, int kh, int kw, Rng& rng,
                        int dilation = 1, int stride = 1);
  TensorT<T> forward(const TensorT<T>& x) const { return conv2d(x, spec, w, b); }
  void visit(const std::string& name, const ParamVisitor<T>& v);
};

// ---- Multi-rate Context Learner --------------------------------------------

struct MCLConfig {
  std::vector<int> dilation_rates{6, 12, 18};
  int branch_channels = 64;
  bool include_pointwise_branch = true;

  void validate() const;
};

template <typename T>
struct MCLParams {
  struct Branch {
    ConvLayer<T> conv;    // dilated 3x3 (or 1x1 for the pointwise branch)
    ConvLayer<T> refine;  // 3x3 block after each branch; removes gridding
  };
  std::vector<Branch> branches;  // dilated branches, then optional pointwise
  ConvLayer<T> fuse;             // final 1x1

  static MCLParams init(int in_channels, const MCLConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& v);
};

/// Bilateral map {B}: 1x1 conv over the sum of per-rate dilated branches
/// plus the pointwise branch. Output keeps x's spatial size.
template <typename T>
TensorT<T> mcl_forward(const TensorT<T>& x, const MCLConfig& cfg,
                       const MCLParams<T>& params);

// ---- Bilateral Response Fusion ---------------------------------------------

struct BRFConfig {
  int bilateral_channels = 64;
  int occlusion_channels = 16;
  int fused_channels = 32;

  void validate() const;
};

template <typename T>
struct BRFParams {
  ConvLayer<T> conv1;  // 3x3 on the concatenation
  ConvLayer<T> conv2;  // 3x3

  static BRFParams init(const BRFConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& v);
};

/// Fused map {F} = Conv3(Conv3(Concat(B, D))); spatial size preserved.
template <typename T>
TensorT<T> brf_forward(const TensorT<T>& bilateral, const TensorT<T>& occlusion,
                       const BRFConfig& cfg, const BRFParams<T>& params);

// ---- stripe-convolution reasoning head --------------------------------------

struct StripeConfig {
  int vertical_kernel_h = 11;
  int vertical_kernel_w = 3;
  int horizontal_kernel_h = 3;
  int horizontal_kernel_w = 11;
  int branch_channels = 24;
  int out_channels = 32;

  void validate() const;
};

template <typename T>
struct StripeParams {
  ConvLayer<T> vertical;
  ConvLayer<T> horizontal;
  ConvLayer<T> refine;  // 3x3 after the concatenation

  static StripeParams init(int in_channels, const StripeConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& v);
};

/// Orthogonal stripe convolutions concatenated, then refined by a 3x3 conv.
template <typename T>
TensorT<T> stripe_reason_forward(const TensorT<T>& fused,
                                 const StripeConfig& cfg,
                                 const StripeParams<T>& params);

// ---- edge path ---------------------------------------------------------------

struct EdgePathConfig {
  BRFConfig brf;       // bilateral slot = low-level stream
  int refine_convs = 2;  // depth of the contour refinement block

  void validate() const;
};

template <typename T>
struct EdgePathParams {
  BRFParams<T> brf;
  std::vector<ConvLayer<T>> refine;
  ConvLayer<T> logits;  // 3x3 -> 1 channel, no activation

  static EdgePathParams init(const EdgePathConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor<T>& v);
};

/// Fuses the concatenated low-level side streams with the decoder cue via a
/// BRF instance, refines, and emits one-channel edge logits at the input
/// resolution. All low_feats and `occlusion` must share spatial size.
template <typename T>
TensorT<T> edge_path_forward(const std::vector<TensorT<T>>& low_feats,
                             const TensorT<T>& occlusion,
                             const EdgePathConfig& cfg,
                             const EdgePathParams<T>& params);

}  // namespace ofnet
