#include "ofnet/loss.hpp"

#include <algorithm>
#include <cmath>

namespace ofnet {

namespace {
constexpr double kClip = 1e-6;
}

void LossConfig::validate() const {
  if (lambda < 0) throw ConfigError("loss lambda must be >= 0");
  if (attention.gamma < 0) throw ConfigError("attention gamma must be >= 0");
  if (attention.alpha && (*attention.alpha < 0 || *attention.alpha > 1))
    throw ConfigError("attention alpha must lie in [0, 1]");
}

double angular_residual(double pred, double gt) {
  return wrap_angle(wrap_angle(pred) - wrap_angle(gt));
}

double smooth_l1(double d) {
  double a = std::fabs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

template <typename T>
TensorT<T> attention_loss(const TensorT<T>& pred, const TensorT<T>& gt,
                          const LossConfig& cfg) {
  cfg.validate();
  if (pred.shape() != gt.shape())
    throw ConfigError("attention_loss shape mismatch: " +
                      shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  if (pred.ndim() < 1 || pred.dim(0) < 1)
    throw ConfigError("attention_loss needs a non-empty batch");
  const int batch = pred.dim(0);
  const size_t total = pred.size();

  double edge_count = 0;
  for (size_t i = 0; i < total; ++i) {
    double e = double(gt.values()[i]);
    if (e != 0.0 && e != 1.0)
      throw ConfigError("attention_loss ground truth must be binary");
    edge_count += e;
    double y = double(pred.values()[i]);
    if (!(y >= 0.0 && y <= 1.0))
      throw NumericError("attention_loss prediction outside [0,1]");
  }
  double alpha = cfg.attention.alpha
                     ? *cfg.attention.alpha
                     : std::clamp(1.0 - edge_count / double(total), 0.01, 0.99);
  const double gamma = cfg.attention.gamma;
  const double inv_m = 1.0 / double(batch);

  double acc = 0;
  for (size_t i = 0; i < total; ++i) {
    double e = double(gt.values()[i]);
    double y = double(pred.values()[i]);
    // log arguments clipped at 1e-6; the power factors keep the exact zeros
    // at y == e so perfect predictions cost exactly 0
    acc += -e * alpha * std::pow(1.0 - y, gamma) * std::log(std::max(y, kClip)) -
           (1.0 - e) * (1.0 - alpha) * std::pow(y, gamma) *
               std::log(std::max(1.0 - y, kClip));
  }

  auto pn = pred.node();
  auto gn = gt.node();
  return make_op<T>(
      {1}, {T(acc * inv_m)}, {pred},
      [pn, gn, alpha, gamma, inv_m, total](TensorNode<T>& o) {
        pn->ensure_grad();
        const double g0 = double(o.grad[0]) * inv_m;
        for (size_t i = 0; i < total; ++i) {
          double raw = double(pn->value[i]);
          if (raw < kClip || raw > 1.0 - kClip) continue;  // clipped: flat
          double e = double(gn->value[i]);
          double y = raw;
          double d = 0;
          if (e != 0.0) {
            // d/dy of -a (1-y)^g ln y
            d += -alpha * (-gamma * std::pow(1.0 - y, gamma - 1.0) * std::log(y) +
                           std::pow(1.0 - y, gamma) / y);
          }
          if (e != 1.0) {
            // d/dy of -(1-a) y^g ln(1-y)
            d += -(1.0 - alpha) * (gamma * std::pow(y, gamma - 1.0) *
                                       std::log(1.0 - y) -
                                   std::pow(y, gamma) / (1.0 - y));
          }
          pn->grad[i] += T(g0 * d);
        }
      });
}

template <typename T>
TensorT<T> orientation_loss(const TensorT<T>& ori_pred, const TensorT<T>& ori_gt,
                            const TensorT<T>& edge_gt, const LossConfig& cfg) {
  cfg.validate();
  if (ori_pred.shape() != ori_gt.shape() || ori_pred.shape() != edge_gt.shape())
    throw ConfigError("orientation_loss shape mismatch");
  if (ori_pred.ndim() < 1 || ori_pred.dim(0) < 1)
    throw ConfigError("orientation_loss needs a non-empty batch");
  require_finite(ori_pred.values(), "orientation prediction");
  const int batch = ori_pred.dim(0);
  const size_t total = ori_pred.size();
  const bool gated = cfg.orientation_only_on_gt_edges;
  const double inv_m = 1.0 / double(batch);

  double acc = 0;
  for (size_t i = 0; i < total; ++i) {
    if (gated && double(edge_gt.values()[i]) == 0.0) continue;
    acc += smooth_l1(
        angular_residual(double(ori_pred.values()[i]), double(ori_gt.values()[i])));
  }

  auto pn = ori_pred.node();
  auto gn = ori_gt.node();
  auto en = edge_gt.node();
  return make_op<T>(
      {1}, {T(acc * inv_m)}, {ori_pred},
      [pn, gn, en, gated, inv_m, total](TensorNode<T>& o) {
        pn->ensure_grad();
        const double g0 = double(o.grad[0]) * inv_m;
        for (size_t i = 0; i < total; ++i) {
          if (gated && double(en->value[i]) == 0.0) continue;
          double d =
              angular_residual(double(pn->value[i]), double(gn->value[i]));
          double slope = std::fabs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
          pn->grad[i] += T(g0 * slope);
        }
      });
}

template <typename T>
TensorT<T> total_loss(const TensorT<T>& edge_pred, const TensorT<T>& edge_gt,
                      const TensorT<T>& ori_pred, const TensorT<T>& ori_gt,
                      const LossConfig& cfg) {
  cfg.validate();
  auto al = attention_loss(edge_pred, edge_gt, cfg);
  if (cfg.lambda == 0.0) return al;
  auto sl = orientation_loss(ori_pred, ori_gt, edge_gt, cfg);
  return add(al, scale(sl, T(cfg.lambda)));
}

#define OFNET_INSTANTIATE_LOSS(T)                                              \
  template TensorT<T> attention_loss<T>(const TensorT<T>&, const TensorT<T>&,  \
                                        const LossConfig&);                    \
  template TensorT<T> orientation_loss<T>(const TensorT<T>&, const TensorT<T>&,\
                                          const TensorT<T>&, const LossConfig&);\
  template TensorT<T> total_loss<T>(const TensorT<T>&, const TensorT<T>&,      \
                                    const TensorT<T>&, const TensorT<T>&,      \
                                    const LossConfig&);

OFNET_INSTANTIATE_LOSS(float)
OFNET_INSTANTIATE_LOSS(double)
#undef OFNET_INSTANTIATE_LOSS

}  // namespace ofnet
