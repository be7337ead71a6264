#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ofnet/blocks.hpp"
#include "ofnet/tensor.hpp"

namespace ofnet {

// Full two-path model: a shared residual backbone and decoder produce the
// occlusion cue; the edge path fuses it with low-level side streams, the
// orientation path fuses it with the multi-rate bilateral map and reasons
// with stripe convolutions. Trained single-writer; inference is pure.

struct BackboneConfig {
  struct Stage {
    int channels;
    int stride;
    int dilation;
    int blocks;
  };
  int stem_channels = 16;
  std::vector<Stage> stages;
};

/// Model configuration. Ablation flags correspond one-to-one to the variant
/// rows swept by the ablation runner:
///  - disable_mcl: bilateral map from a plain 3x3 conv pair instead of the
///    multi-rate context learner.
///  - disable_stripe: reasoning head reduced to a single 3x3 conv.
///  - share_decoder_only: orientation path consumes the decoder cue
///    directly; no separated high-level context (no MCL, no fusion).
///  - single_edge_stream: one stream shaped like the edge path; the
///    orientation head taps the edge path's refined features.
///  - single_ori_stream: one stream shaped like the orientation path; the
///    edge head taps the stripe features.
struct ModelVariant {
  std::string backbone = "tiny";  // {tiny, small}
  MCLConfig mcl;
  BRFConfig brf;  // orientation-path fusion; bilateral:occlusion ratio axis
  StripeConfig stripe;

  bool disable_mcl = false;
  bool disable_stripe = false;
  bool share_decoder_only = false;
  bool single_edge_stream = false;
  bool single_ori_stream = false;

  int decoder_mid_channels = 32;
  int decoder_channels = 16;  // occlusion cue width
  int low_tap_channels = 8;   // per-side-output projection width
  int edge_fused_channels = 16;
  int edge_refine_convs = 2;

  BackboneConfig backbone_config() const;
  void validate() const;
};

/// Named presets: tiny-full (default), small-full, tiny-no-mcl,
/// tiny-head3x3, tiny-no-stripe, tiny-share-decoder, tiny-single-edge,
/// tiny-single-ori, tiny-brf{16,32,48,80}.
ModelVariant make_variant(const std::string& preset);

class OFNet {
 public:
  struct Outputs {
    Tensor edge_prob;    // (N,1,H,W), sigmoid applied
    Tensor orientation;  // (N,1,H,W), raw regression
  };

  /// Deterministic He-style initialization from the seed.
  static OFNet build(const ModelVariant& variant, uint64_t seed);

  Outputs forward(const Tensor& image) const;

  const ModelVariant& variant() const { return variant_; }
  std::vector<std::pair<std::string, Tensor>>& named_params() { return named_; }
  const std::vector<std::pair<std::string, Tensor>>& named_params() const {
    return named_;
  }
  std::vector<Tensor> params() const;
  size_t parameter_count() const;

  int64_t train_step = 0;

 private:
  struct ResBlock {
    ConvLayer<float> conv1, conv2;
    std::optional<ConvLayer<float>> proj;
  };

  ModelVariant variant_;
  ConvLayer<float> stem_;
  std::vector<std::vector<ResBlock>> stages_;
  std::vector<ConvLayer<float>> decoder_;       // 1/8 -> 1/4 (occlusion cue)
  std::vector<ConvLayer<float>> decoder_tail_;  // 1/4 -> full, edge-path cue
  std::vector<ConvLayer<float>> low_taps_;
  EdgePathParams<float> edge_path_;
  MCLParams<float> mcl_;
  ConvLayer<float> plain_context_;  // disable_mcl replacement
  ConvLayer<float> plain_context_refine_;
  BRFParams<float> brf_;
  StripeParams<float> stripe_;
  ConvLayer<float> stripe_plain_;  // disable_stripe replacement
  ConvLayer<float> ori_head_;
  ConvLayer<float> edge_from_ori_head_;  // single_ori_stream only

  std::vector<std::pair<std::string, Tensor>> named_;

  void register_params();
  Tensor run_backbone(const Tensor& x, std::vector<Tensor>& taps) const;
};

// ---- checkpoints -------------------------------------------------------------

class CheckpointError : public DataError {
 public:
  enum class Code { bad_magic, version_mismatch, truncated, shape_mismatch, io };
  CheckpointError(Code code, const std::string& msg)
      : DataError(msg), code(code) {}
  Code code;
};

/// Binary format: magic "OFNT", text header (version, step, variant JSON,
/// tensor name/dtype/shape per line), then raw little-endian f32 payloads in
/// header order.
void save_checkpoint(const OFNet& model, const std::string& path);

/// Rebuilds the model from the stored variant and restores every tensor.
OFNet load_checkpoint(const std::string& path);

/// Restores into an existing model; the first tensor whose name or shape
/// disagrees is reported in the error.
void load_into(OFNet& model, const std::string& path);

}  // namespace ofnet
