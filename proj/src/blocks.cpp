#include "ofnet/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ofnet {

template <typename T>
ConvLayer<T> ConvLayer<T>::make(int in_ch, int out_ch, int kh, int kw, Rng& rng,
                                int dilation, int stride) {
  ConvLayer<T> l;
  l.spec = ConvSpec::same_conv(out_ch, kh, kw, dilation);
  l.spec.stride = stride;
  double fan_in = double(in_ch) * kh * kw;
  l.w = TensorT<T>::randn({out_ch, in_ch, kh, kw}, rng, std::sqrt(2.0 / fan_in));
  l.b = TensorT<T>::zeros({out_ch});
  l.w.set_requires_grad(true);
  l.b.set_requires_grad(true);
  return l;
}

template <typename T>
void ConvLayer<T>::visit(const std::string& name, const ParamVisitor<T>& v) {
  v(name + ".w", w);
  v(name + ".b", b);
}

// ---- MCL --------------------------------------------------------------------

void MCLConfig::validate() const {
  if (dilation_rates.empty() && !include_pointwise_branch)
    throw ConfigError("MCL needs at least one branch");
  std::unordered_set<int> seen;
  for (int r : dilation_rates) {
    if (r < 1) throw ConfigError("MCL dilation rates must be positive");
    if (!seen.insert(r).second)
      throw ConfigError("MCL dilation rates must be distinct");
  }
  if (branch_channels < 1) throw ConfigError("MCL branch_channels must be >= 1");
}

template <typename T>
MCLParams<T> MCLParams<T>::init(int in_channels, const MCLConfig& cfg,
                                Rng& rng) {
  cfg.validate();
  MCLParams<T> p;
  for (int rate : cfg.dilation_rates) {
    typename MCLParams<T>::Branch br;
    br.conv = ConvLayer<T>::make(in_channels, cfg.branch_channels, 3, 3, rng,
                                 rate);
    br.refine =
        ConvLayer<T>::make(cfg.branch_channels, cfg.branch_channels, 3, 3, rng);
    p.branches.push_back(std::move(br));
  }
  if (cfg.include_pointwise_branch) {
    typename MCLParams<T>::Branch br;
    br.conv = ConvLayer<T>::make(in_channels, cfg.branch_channels, 1, 1, rng);
    br.refine =
        ConvLayer<T>::make(cfg.branch_channels, cfg.branch_channels, 3, 3, rng);
    p.branches.push_back(std::move(br));
  }
  p.fuse =
      ConvLayer<T>::make(cfg.branch_channels, cfg.branch_channels, 1, 1, rng);
  return p;
}

template <typename T>
void MCLParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& v) {
  for (size_t i = 0; i < branches.size(); ++i) {
    std::string base = prefix + ".branch" + std::to_string(i);
    branches[i].conv.visit(base + ".conv", v);
    branches[i].refine.visit(base + ".refine", v);
  }
  fuse.visit(prefix + ".fuse", v);
}

template <typename T>
TensorT<T> mcl_forward(const TensorT<T>& x, const MCLConfig& cfg,
                       const MCLParams<T>& params) {
  cfg.validate();
  size_t expected =
      cfg.dilation_rates.size() + (cfg.include_pointwise_branch ? 1 : 0);
  if (params.branches.size() != expected)
    throw ConfigError("MCL params do not match config branch count");
  for (size_t i = 0; i < cfg.dilation_rates.size(); ++i) {
    const ConvSpec& s = params.branches[i].conv.spec;
    int footprint = (s.kernel_h - 1) * s.dilation + 1;
    if (x.dim(2) + 2 * s.pad_h < footprint || x.dim(3) + 2 * s.pad_w < footprint)
      throw ConfigError("MCL input too small for dilation rate " +
                        std::to_string(s.dilation));
  }

  TensorT<T> acc;
  for (const auto& br : params.branches) {
    auto y = relu(br.conv.forward(x));
    y = relu(br.refine.forward(y));
    acc = acc.valid() ? add(acc, y) : y;
  }
  return relu(params.fuse.forward(acc));
}

// ---- BRF --------------------------------------------------------------------

void BRFConfig::validate() const {
  if (bilateral_channels < 1 || occlusion_channels < 1 || fused_channels < 1)
    throw ConfigError("BRF channel counts must be >= 1");
}

template <typename T>
BRFParams<T> BRFParams<T>::init(const BRFConfig& cfg, Rng& rng) {
  cfg.validate();
  BRFParams<T> p;
  p.conv1 = ConvLayer<T>::make(cfg.bilateral_channels + cfg.occlusion_channels,
                               cfg.fused_channels, 3, 3, rng);
  p.conv2 = ConvLayer<T>::make(cfg.fused_channels, cfg.fused_channels, 3, 3, rng);
  return p;
}

template <typename T>
void BRFParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& v) {
  conv1.visit(prefix + ".conv1", v);
  conv2.visit(prefix + ".conv2", v);
}

template <typename T>
TensorT<T> brf_forward(const TensorT<T>& bilateral, const TensorT<T>& occlusion,
                       const BRFConfig& cfg, const BRFParams<T>& params) {
  cfg.validate();
  if (bilateral.dim(1) != cfg.bilateral_channels)
    throw ConfigError("BRF bilateral stream has " +
                      std::to_string(bilateral.dim(1)) +
                      " channels, config says " +
                      std::to_string(cfg.bilateral_channels));
  if (occlusion.dim(1) != cfg.occlusion_channels)
    throw ConfigError("BRF occlusion stream has " +
                      std::to_string(occlusion.dim(1)) +
                      " channels, config says " +
                      std::to_string(cfg.occlusion_channels));
  if (bilateral.dim(2) != occlusion.dim(2) ||
      bilateral.dim(3) != occlusion.dim(3))
    throw ConfigError("BRF streams must share spatial size; upsample first");
  auto f = concat_channels(bilateral, occlusion);
  f = relu(params.conv1.forward(f));
  return relu(params.conv2.forward(f));
}

// ---- stripe head --------------------------------------------------------------

void StripeConfig::validate() const {
  if (vertical_kernel_h != horizontal_kernel_w ||
      vertical_kernel_w != horizontal_kernel_h)
    throw ConfigError("stripe kernels must be transposes of each other");
  if (vertical_kernel_h < 1 || vertical_kernel_w < 1)
    throw ConfigError("stripe kernel sizes must be >= 1");
  if (vertical_kernel_h % 2 == 0 || vertical_kernel_w % 2 == 0)
    throw ConfigError("stripe kernels must be odd for same-size output");
  if (branch_channels < 1 || out_channels < 1)
    throw ConfigError("stripe channel counts must be >= 1");
}

template <typename T>
StripeParams<T> StripeParams<T>::init(int in_channels, const StripeConfig& cfg,
                                      Rng& rng) {
  cfg.validate();
  StripeParams<T> p;
  p.vertical = ConvLayer<T>::make(in_channels, cfg.branch_channels,
                                  cfg.vertical_kernel_h, cfg.vertical_kernel_w,
                                  rng);
  p.horizontal = ConvLayer<T>::make(in_channels, cfg.branch_channels,
                                    cfg.horizontal_kernel_h,
                                    cfg.horizontal_kernel_w, rng);
  p.refine =
      ConvLayer<T>::make(2 * cfg.branch_channels, cfg.out_channels, 3, 3, rng);
  return p;
}

template <typename T>
void StripeParams<T>::visit(const std::string& prefix, const ParamVisitor<T>& v) {
  vertical.visit(prefix + ".vertical", v);
  horizontal.visit(prefix + ".horizontal", v);
  refine.visit(prefix + ".refine", v);
}

template <typename T>
TensorT<T> stripe_reason_forward(const TensorT<T>& fused,
                                 const StripeConfig& cfg,
                                 const StripeParams<T>& params) {
  cfg.validate();
  auto v = relu(params.vertical.forward(fused));
  auto h = relu(params.horizontal.forward(fused));
  return relu(params.refine.forward(concat_channels(v, h)));
}

// ---- edge path -----------------------------------------------------------------

void EdgePathConfig::validate() const {
  brf.validate();
  if (refine_convs < 0) throw ConfigError("edge path refine_convs must be >= 0");
}

template <typename T>
EdgePathParams<T> EdgePathParams<T>::init(const EdgePathConfig& cfg, Rng& rng) {
  cfg.validate();
  EdgePathParams<T> p;
  p.brf = BRFParams<T>::init(cfg.brf, rng);
  for (int i = 0; i < cfg.refine_convs; ++i)
    p.refine.push_back(ConvLayer<T>::make(cfg.brf.fused_channels,
                                          cfg.brf.fused_channels, 3, 3, rng));
  p.logits = ConvLayer<T>::make(cfg.brf.fused_channels, 1, 3, 3, rng);
  return p;
}

template <typename T>
void EdgePathParams<T>::visit(const std::string& prefix,
                              const ParamVisitor<T>& v) {
  brf.visit(prefix + ".brf", v);
  for (size_t i = 0; i < refine.size(); ++i)
    refine[i].visit(prefix + ".refine" + std::to_string(i), v);
  logits.visit(prefix + ".logits", v);
}

template <typename T>
TensorT<T> edge_path_forward(const std::vector<TensorT<T>>& low_feats,
                             const TensorT<T>& occlusion,
                             const EdgePathConfig& cfg,
                             const EdgePathParams<T>& params) {
  cfg.validate();
  if (low_feats.empty()) throw ConfigError("edge path needs low-level streams");
  TensorT<T> low = low_feats[0];
  for (size_t i = 1; i < low_feats.size(); ++i) {
    if (low_feats[i].dim(2) != low.dim(2) || low_feats[i].dim(3) != low.dim(3))
      throw ConfigError("edge path low-level streams disagree on resolution");
    low = concat_channels(low, low_feats[i]);
  }
  auto f = brf_forward(low, occlusion, cfg.brf, params.brf);
  for (const auto& layer : params.refine) f = relu(layer.forward(f));
  return params.logits.forward(f);
}

// ---- instantiation ---------------------------------------------------------

#define OFNET_INSTANTIATE_BLOCKS(T)                                            \
  template struct ConvLayer<T>;                                                \
  template struct MCLParams<T>;                                                \
  template struct BRFParams<T>;                                                \
  template struct StripeParams<T>;                                             \
  template struct EdgePathParams<T>;                                           \
  template TensorT<T> mcl_forward<T>(const TensorT<T>&, const MCLConfig&,      \
                                     const MCLParams<T>&);                     \
  template TensorT<T> brf_forward<T>(const TensorT<T>&, const TensorT<T>&,     \
                                     const BRFConfig&, const BRFParams<T>&);   \
  template TensorT<T> stripe_reason_forward<T>(                                \
      const TensorT<T>&, const StripeConfig&, const StripeParams<T>&);         \
  template TensorT<T> edge_path_forward<T>(const std::vector<TensorT<T>>&,     \
                                           const TensorT<T>&,                  \
                                           const EdgePathConfig&,              \
                                           const EdgePathParams<T>&);

OFNET_INSTANTIATE_BLOCKS(float)
OFNET_INSTANTIATE_BLOCKS(double)
#undef OFNET_INSTANTIATE_BLOCKS

}  // namespace ofnet
