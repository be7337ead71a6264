#pragma once

#include <optional>

#include "ofnet/tensor.hpp"

namespace ofnet {

// Training objective: attention loss on edge probabilities plus smooth-L1 on
// wrapped orientation residuals, averaged over the mini-batch.
//
// Adopted attention-loss form, with y clipped to [1e-6, 1-1e-6]:
//   AL(y, e) = -e * a * (1-y)^gamma * ln(y)
//              -(1-e) * (1-a) * y^gamma * ln(1-y)
// where a is attention.alpha when set, otherwise the per-batch non-edge
// frequency clamped to [0.01, 0.99].

struct LossConfig {
  double lambda = 0.5;  // weight on the orientation term
  struct Attention {
    std::optional<double> alpha;  // empty: class-balance from batch
    double gamma = 0.5;
  } attention;
  bool orientation_only_on_gt_edges = true;

  void validate() const;
};

/// Wrapped residual pred - gt in (-pi, pi].
double angular_residual(double pred, double gt);

/// 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
double smooth_l1(double d);

/// Mean over batch images of the per-pixel attention-loss sum.
/// pred in [0,1] (N,1,H,W); gt in {0,1}, same shape, no gradient needed.
template <typename T>
TensorT<T> attention_loss(const TensorT<T>& pred, const TensorT<T>& gt,
                          const LossConfig& cfg);

/// Mean over batch images of smooth_l1(angular_residual(pred, gt)), summed
/// over gt edge pixels only when the config flag is set.
template <typename T>
TensorT<T> orientation_loss(const TensorT<T>& ori_pred, const TensorT<T>& ori_gt,
                            const TensorT<T>& edge_gt, const LossConfig& cfg);

/// attention_loss + lambda * orientation_loss, a scalar graph node.
template <typename T>
TensorT<T> total_loss(const TensorT<T>& edge_pred, const TensorT<T>& edge_gt,
                      const TensorT<T>& ori_pred, const TensorT<T>& ori_gt,
                      const LossConfig& cfg);

}  // namespace ofnet
