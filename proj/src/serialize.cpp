#include "ofnet/serialize.hpp"

namespace ofnet {

json variant_to_json(const ModelVariant& v) {
  json j;
  j["backbone"] = v.backbone;
  j["mcl"] = {{"dilation_rates", v.mcl.dilation_rates},
              {"branch_channels", v.mcl.branch_channels},
              {"include_pointwise_branch", v.mcl.include_pointwise_branch}};
  j["brf"] = {{"bilateral_channels", v.brf.bilateral_channels},
              {"occlusion_channels", v.brf.occlusion_channels},
              {"fused_channels", v.brf.fused_channels}};
  j["stripe"] = {{"vertical_kernel", {v.stripe.vertical_kernel_h,
                                      v.stripe.vertical_kernel_w}},
                 {"horizontal_kernel", {v.stripe.horizontal_kernel_h,
                                        v.stripe.horizontal_kernel_w}},
                 {"branch_channels", v.stripe.branch_channels},
                 {"out_channels", v.stripe.out_channels}};
  j["flags"] = {{"disable_mcl", v.disable_mcl},
                {"disable_stripe", v.disable_stripe},
                {"share_decoder_only", v.share_decoder_only},
                {"single_edge_stream", v.single_edge_stream},
                {"single_ori_stream", v.single_ori_stream}};
  j["decoder_mid_channels"] = v.decoder_mid_channels;
  j["decoder_channels"] = v.decoder_channels;
  j["low_tap_channels"] = v.low_tap_channels;
  j["edge_fused_channels"] = v.edge_fused_channels;
  j["edge_refine_convs"] = v.edge_refine_convs;
  return j;
}

ModelVariant variant_from_json(const json& j) {
  ModelVariant v;
  v.backbone = j.value("backbone", v.backbone);
  if (j.contains("mcl")) {
    const json& m = j["mcl"];
    v.mcl.dilation_rates =
        m.value("dilation_rates", v.mcl.dilation_rates);
    v.mcl.branch_channels = m.value("branch_channels", v.mcl.branch_channels);
    v.mcl.include_pointwise_branch =
        m.value("include_pointwise_branch", v.mcl.include_pointwise_branch);
  }
  if (j.contains("brf")) {
    const json& b = j["brf"];
    v.brf.bilateral_channels =
        b.value("bilateral_channels", v.brf.bilateral_channels);
    v.brf.occlusion_channels =
        b.value("occlusion_channels", v.brf.occlusion_channels);
    v.brf.fused_channels = b.value("fused_channels", v.brf.fused_channels);
  }
  if (j.contains("stripe")) {
    const json& s = j["stripe"];
    if (s.contains("vertical_kernel")) {
      v.stripe.vertical_kernel_h = s["vertical_kernel"][0];
      v.stripe.vertical_kernel_w = s["vertical_kernel"][1];
    }
    if (s.contains("horizontal_kernel")) {
      v.stripe.horizontal_kernel_h = s["horizontal_kernel"][0];
      v.stripe.horizontal_kernel_w = s["horizontal_kernel"][1];
    }
    v.stripe.branch_channels =
        s.value("branch_channels", v.stripe.branch_channels);
    v.stripe.out_channels = s.value("out_channels", v.stripe.out_channels);
  }
  if (j.contains("flags")) {
    const json& f = j["flags"];
    v.disable_mcl = f.value("disable_mcl", false);
    v.disable_stripe = f.value("disable_stripe", false);
    v.share_decoder_only = f.value("share_decoder_only", false);
    v.single_edge_stream = f.value("single_edge_stream", false);
    v.single_ori_stream = f.value("single_ori_stream", false);
  }
  v.decoder_mid_channels =
      j.value("decoder_mid_channels", v.decoder_mid_channels);
  v.decoder_channels = j.value("decoder_channels", v.decoder_channels);
  v.low_tap_channels = j.value("low_tap_channels", v.low_tap_channels);
  v.edge_fused_channels =
      j.value("edge_fused_channels", v.edge_fused_channels);
  v.edge_refine_convs = j.value("edge_refine_convs", v.edge_refine_convs);
  v.validate();
  return v;
}

json loss_config_to_json(const LossConfig& c) {
  json j;
  j["lambda"] = c.lambda;
  j["gamma"] = c.attention.gamma;
  if (c.attention.alpha)
    j["alpha"] = *c.attention.alpha;
  else
    j["alpha"] = nullptr;
  j["orientation_only_on_gt_edges"] = c.orientation_only_on_gt_edges;
  return j;
}

LossConfig loss_config_from_json(const json& j) {
  LossConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.attention.gamma = j.value("gamma", c.attention.gamma);
  if (j.contains("alpha") && !j["alpha"].is_null())
    c.attention.alpha = double(j["alpha"]);
  c.orientation_only_on_gt_edges =
      j.value("orientation_only_on_gt_edges", c.orientation_only_on_gt_edges);
  c.validate();
  return c;
}

}  // namespace ofnet
