#include "ofnet/model.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ofnet/serialize.hpp"

namespace ofnet {

BackboneConfig ModelVariant::backbone_config() const {
  BackboneConfig c;
  if (backbone == "tiny") {
    c.stem_channels = 16;
    c.stages = {{24, 2, 1, 1}, {32, 2, 1, 1}, {48, 2, 2, 1}};
  } else if (backbone == "small") {
    c.stem_channels = 24;
    c.stages = {{32, 2, 1, 2}, {48, 2, 1, 2}, {64, 2, 2, 2}};
  } else {
    throw ConfigError("unknown backbone '" + backbone + "'");
  }
  return c;
}

void ModelVariant::validate() const {
  backbone_config();
  mcl.validate();
  brf.validate();
  stripe.validate();
  int exclusive = int(share_decoder_only) + int(single_edge_stream) +
                  int(single_ori_stream);
  if (exclusive > 1)
    throw ConfigError(
        "share_decoder_only / single_edge_stream / single_ori_stream are "
        "mutually exclusive");
  if (!disable_mcl && !share_decoder_only &&
      brf.bilateral_channels != mcl.branch_channels)
    throw ConfigError("brf.bilateral_channels must equal mcl.branch_channels");
  if (brf.occlusion_channels != decoder_channels)
    throw ConfigError("brf.occlusion_channels must equal decoder_channels");
  if (decoder_channels < 1 || decoder_mid_channels < 1 ||
      low_tap_channels < 1 || edge_fused_channels < 1 || edge_refine_convs < 0)
    throw ConfigError("model channel widths must be positive");
}

ModelVariant make_variant(const std::string& preset) {
  ModelVariant v;
  auto set_ratio = [&](int bilateral) {
    v.brf.bilateral_channels = bilateral;
    v.mcl.branch_channels = bilateral;
  };
  if (preset == "tiny-full") {
  } else if (preset == "small-full") {
    v.backbone = "small";
  } else if (preset == "tiny-no-mcl") {
    v.disable_mcl = true;
  } else if (preset == "tiny-head3x3") {
    v.stripe.vertical_kernel_h = v.stripe.vertical_kernel_w = 3;
    v.stripe.horizontal_kernel_h = v.stripe.horizontal_kernel_w = 3;
  } else if (preset == "tiny-no-stripe") {
    v.disable_stripe = true;
  } else if (preset == "tiny-share-decoder") {
    v.share_decoder_only = true;
  } else if (preset == "tiny-single-edge") {
    v.single_edge_stream = true;
  } else if (preset == "tiny-single-ori") {
    v.single_ori_stream = true;
  } else if (preset == "tiny-brf16") {
    set_ratio(16);
  } else if (preset == "tiny-brf32") {
    set_ratio(32);
  } else if (preset == "tiny-brf48") {
    set_ratio(48);
  } else if (preset == "tiny-brf80") {
    set_ratio(80);
  } else {
    throw ConfigError("unknown variant preset '" + preset + "'");
  }
  v.validate();
  return v;
}

// ---- build ------------------------------------------------------------------

OFNet OFNet::build(const ModelVariant& variant, uint64_t seed) {
  variant.validate();
  OFNet m;
  m.variant_ = variant;
  Rng rng(seed);
  const BackboneConfig bb = variant.backbone_config();

  m.stem_ = ConvLayer<float>::make(3, bb.stem_channels, 3, 3, rng);
  int ch = bb.stem_channels;
  for (const auto& st : bb.stages) {
    std::vector<ResBlock> blocks;
    for (int i = 0; i < st.blocks; ++i) {
      ResBlock blk;
      int stride = i == 0 ? st.stride : 1;
      blk.conv1 =
          ConvLayer<float>::make(ch, st.channels, 3, 3, rng, st.dilation, stride);
      blk.conv2 =
          ConvLayer<float>::make(st.channels, st.channels, 3, 3, rng, st.dilation);
      if (stride != 1 || ch != st.channels)
        blk.proj = ConvLayer<float>::make(ch, st.channels, 1, 1, rng, 1, stride);
      ch = st.channels;
      blocks.push_back(std::move(blk));
    }
    m.stages_.push_back(std::move(blocks));
  }
  const int high_ch = ch;

  m.decoder_.push_back(
      ConvLayer<float>::make(high_ch, variant.decoder_mid_channels, 3, 3, rng));
  m.decoder_.push_back(ConvLayer<float>::make(variant.decoder_mid_channels,
                                              variant.decoder_channels, 3, 3,
                                              rng));
  m.decoder_tail_.push_back(ConvLayer<float>::make(
      variant.decoder_channels, variant.decoder_channels, 3, 3, rng));
  m.decoder_tail_.push_back(ConvLayer<float>::make(
      variant.decoder_channels, variant.decoder_channels, 3, 3, rng));

  const bool has_edge_path = !variant.single_ori_stream;
  const bool has_ori_context =
      !variant.share_decoder_only && !variant.single_edge_stream;
  const bool has_stripe_module = !variant.single_edge_stream;

  if (has_edge_path) {
    std::vector<int> tap_ch{bb.stem_channels, bb.stages[0].channels,
                            bb.stages[1].channels};
    for (int c : tap_ch)
      m.low_taps_.push_back(
          ConvLayer<float>::make(c, variant.low_tap_channels, 1, 1, rng));
    EdgePathConfig ec;
    ec.brf.bilateral_channels = int(tap_ch.size()) * variant.low_tap_channels;
    ec.brf.occlusion_channels = variant.decoder_channels;
    ec.brf.fused_channels = variant.edge_fused_channels;
    ec.refine_convs = variant.edge_refine_convs;
    m.edge_path_ = EdgePathParams<float>::init(ec, rng);
  }

  if (has_ori_context) {
    if (variant.disable_mcl) {
      m.plain_context_ =
          ConvLayer<float>::make(high_ch, variant.brf.bilateral_channels, 3, 3,
                                 rng);
      m.plain_context_refine_ = ConvLayer<float>::make(
          variant.brf.bilateral_channels, variant.brf.bilateral_channels, 3, 3,
          rng);
    } else {
      m.mcl_ = MCLParams<float>::init(high_ch, variant.mcl, rng);
    }
    m.brf_ = BRFParams<float>::init(variant.brf, rng);
  }

  int stripe_in = variant.share_decoder_only ? variant.decoder_channels
                                             : variant.brf.fused_channels;
  if (has_stripe_module) {
    if (variant.disable_stripe)
      m.stripe_plain_ = ConvLayer<float>::make(
          stripe_in, variant.stripe.out_channels, 3, 3, rng);
    else
      m.stripe_ = StripeParams<float>::init(stripe_in, variant.stripe, rng);
  }

  int ori_in = variant.single_edge_stream ? variant.edge_fused_channels
                                          : variant.stripe.out_channels;
  m.ori_head_ = ConvLayer<float>::make(ori_in, 1, 3, 3, rng);

  if (variant.single_ori_stream)
    m.edge_from_ori_head_ =
        ConvLayer<float>::make(variant.stripe.out_channels, 1, 3, 3, rng);

  m.register_params();
  return m;
}

void OFNet::register_params() {
  named_.clear();
  ParamVisitor<float> v = [this](const std::string& name, Tensor& t) {
    named_.push_back({name, t});
  };
  stem_.visit("stem", v);
  for (size_t s = 0; s < stages_.size(); ++s)
    for (size_t b = 0; b < stages_[s].size(); ++b) {
      std::string base =
          "stage" + std::to_string(s) + ".block" + std::to_string(b);
      stages_[s][b].conv1.visit(base + ".conv1", v);
      stages_[s][b].conv2.visit(base + ".conv2", v);
      if (stages_[s][b].proj) stages_[s][b].proj->visit(base + ".proj", v);
    }
  for (size_t i = 0; i < decoder_.size(); ++i)
    decoder_[i].visit("decoder." + std::to_string(i), v);
  for (size_t i = 0; i < decoder_tail_.size(); ++i)
    decoder_tail_[i].visit("decoder.tail" + std::to_string(i), v);
  for (size_t i = 0; i < low_taps_.size(); ++i)
    low_taps_[i].visit("edge.tap" + std::to_string(i), v);
  if (!variant_.single_ori_stream) edge_path_.visit("edge.path", v);
  if (!variant_.share_decoder_only && !variant_.single_edge_stream) {
    if (variant_.disable_mcl) {
      plain_context_.visit("ori.context", v);
      plain_context_refine_.visit("ori.context_refine", v);
    } else {
      mcl_.visit("ori.mcl", v);
    }
    brf_.visit("ori.brf", v);
  }
  if (!variant_.single_edge_stream) {
    if (variant_.disable_stripe)
      stripe_plain_.visit("ori.stripe_plain", v);
    else
      stripe_.visit("ori.stripe", v);
  }
  ori_head_.visit("ori.head", v);
  if (variant_.single_ori_stream) edge_from_ori_head_.visit("edge.head", v);
}

std::vector<Tensor> OFNet::params() const {
  std::vector<Tensor> out;
  out.reserve(named_.size());
  for (const auto& [name, t] : named_) out.push_back(t);
  return out;
}

size_t OFNet::parameter_count() const {
  size_t n = 0;
  for (const auto& [name, t] : named_) n += t.size();
  return n;
}

// ---- forward ----------------------------------------------------------------

Tensor OFNet::run_backbone(const Tensor& x, std::vector<Tensor>& taps) const {
  Tensor cur = relu(stem_.forward(x));
  taps.push_back(cur);
  for (size_t s = 0; s < stages_.size(); ++s) {
    for (const ResBlock& blk : stages_[s]) {
      Tensor y = relu(blk.conv1.forward(cur));
      y = blk.conv2.forward(y);
      Tensor skip = blk.proj ? blk.proj->forward(cur) : cur;
      cur = relu(add(y, skip));
    }
    if (s + 1 < stages_.size()) taps.push_back(cur);
  }
  return cur;  // 1/8 resolution
}

OFNet::Outputs OFNet::forward(const Tensor& image) const {
  if (image.ndim() != 4 || image.dim(1) != 3)
    throw ConfigError("forward expects (N,3,H,W) images, got " +
                      shape_str(image.shape()));
  const int orig_h = image.dim(2), orig_w = image.dim(3);
  Tensor x = image;
  int h = orig_h, w = orig_w;
  if (h % 8 || w % 8) {  // pad to the backbone stride, crop afterwards
    h = (h + 7) / 8 * 8;
    w = (w + 7) / 8 * 8;
    x = pad_spatial(x, h, w);
  }

  std::vector<Tensor> taps;
  Tensor high = run_backbone(x, taps);

  // occlusion cue
  Tensor d = relu(decoder_[0].forward(high));
  d = bilinear_upsample(d, h / 4, w / 4);
  Tensor d_quarter = relu(decoder_[1].forward(d));
  Tensor d_half =
      relu(decoder_tail_[0].forward(bilinear_upsample(d_quarter, h / 2, w / 2)));
  Tensor d_full = relu(decoder_tail_[1].forward(bilinear_upsample(d_half, h, w)));

  Tensor edge_logits, ori;
  if (variant_.single_edge_stream) {
    // one edge-shaped trunk feeding both heads
    std::vector<Tensor> lows;
    for (size_t i = 0; i < low_taps_.size(); ++i)
      lows.push_back(bilinear_upsample(relu(low_taps_[i].forward(taps[i])), h, w));
    Tensor low = lows[0];
    for (size_t i = 1; i < lows.size(); ++i) low = concat_channels(low, lows[i]);
    EdgePathConfig ec;
    ec.brf.bilateral_channels = low.dim(1);
    ec.brf.occlusion_channels = variant_.decoder_channels;
    ec.brf.fused_channels = variant_.edge_fused_channels;
    Tensor f = brf_forward(low, d_full, ec.brf, edge_path_.brf);
    for (const auto& layer : edge_path_.refine) f = relu(layer.forward(f));
    edge_logits = edge_path_.logits.forward(f);
    ori = ori_head_.forward(f);
  } else {
    // orientation path
    Tensor feat;
    if (variant_.share_decoder_only) {
      feat = d_quarter;
    } else {
      Tensor b8;
      if (variant_.disable_mcl) {
        b8 = relu(plain_context_refine_.forward(
            relu(plain_context_.forward(high))));
      } else {
        b8 = mcl_forward(high, variant_.mcl, mcl_);
      }
      Tensor b_quarter = bilinear_upsample(b8, h / 4, w / 4);
      feat = brf_forward(b_quarter, d_quarter, variant_.brf, brf_);
    }
    Tensor s = variant_.disable_stripe
                   ? relu(stripe_plain_.forward(feat))
                   : stripe_reason_forward(feat, variant_.stripe, stripe_);
    Tensor ori_low = ori_head_.forward(s);
    ori = bilinear_upsample(ori_low, h, w);

    if (variant_.single_ori_stream) {
      edge_logits = bilinear_upsample(edge_from_ori_head_.forward(s), h, w);
    } else {
      std::vector<Tensor> lows;
      for (size_t i = 0; i < low_taps_.size(); ++i)
        lows.push_back(
            bilinear_upsample(relu(low_taps_[i].forward(taps[i])), h, w));
      EdgePathConfig ec;
      ec.brf.bilateral_channels =
          int(low_taps_.size()) * variant_.low_tap_channels;
      ec.brf.occlusion_channels = variant_.decoder_channels;
      ec.brf.fused_channels = variant_.edge_fused_channels;
      ec.refine_convs = variant_.edge_refine_convs;
      edge_logits = edge_path_forward(lows, d_full, ec, edge_path_);
    }
  }

  if (h != orig_h || w != orig_w) {
    edge_logits = crop_spatial(edge_logits, orig_h, orig_w);
    ori = crop_spatial(ori, orig_h, orig_w);
  }
  return {sigmoid(edge_logits), ori};
}

// ---- checkpoint io -------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'O', 'F', 'N', 'T'};
constexpr int kVersion = 1;
}  // namespace

void save_checkpoint(const OFNet& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw CheckpointError(CheckpointError::Code::io,
                          "cannot open checkpoint for writing: " + path);
  f.write(kMagic, 4);
  f << "\nversion " << kVersion << "\n";
  f << "step " << model.train_step << "\n";
  f << "variant " << variant_to_json(model.variant()).dump() << "\n";
  f << "tensors " << model.named_params().size() << "\n";
  for (const auto& [name, t] : model.named_params()) {
    f << name << " f32 " << t.ndim();
    for (int i = 0; i < t.ndim(); ++i) f << ' ' << t.dim(i);
    f << "\n";
  }
  f << "end\n";
  for (const auto& [name, t] : model.named_params())
    f.write(reinterpret_cast<const char*>(t.values().data()),
            std::streamsize(t.size() * sizeof(float)));
  if (!f)
    throw CheckpointError(CheckpointError::Code::io,
                          "failed writing checkpoint: " + path);
}

namespace {

struct CheckpointHeader {
  int64_t step = 0;
  ModelVariant variant;
  std::vector<std::pair<std::string, std::vector<int>>> tensors;
};

CheckpointHeader read_header(std::ifstream& f, const std::string& path) {
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError(CheckpointError::Code::bad_magic,
                          path + " is not a checkpoint (bad magic)");
  std::string line;
  std::getline(f, line);  // rest of magic line
  auto next = [&](const char* field) {
    if (!std::getline(f, line))
      throw CheckpointError(CheckpointError::Code::truncated,
                            "checkpoint truncated before " + std::string(field));
    return line;
  };
  CheckpointHeader h;
  {
    std::istringstream is(next("version"));
    std::string key;
    int ver = -1;
    is >> key >> ver;
    if (key != "version")
      throw CheckpointError(CheckpointError::Code::truncated,
                            "checkpoint missing version line");
    if (ver != kVersion)
      throw CheckpointError(
          CheckpointError::Code::version_mismatch,
          "checkpoint version " + std::to_string(ver) + ", expected " +
              std::to_string(kVersion));
  }
  {
    std::istringstream is(next("step"));
    std::string key;
    is >> key >> h.step;
  }
  {
    std::string l = next("variant");
    auto pos = l.find(' ');
    h.variant = variant_from_json(json::parse(l.substr(pos + 1)));
  }
  size_t count = 0;
  {
    std::istringstream is(next("tensors"));
    std::string key;
    is >> key >> count;
  }
  for (size_t i = 0; i < count; ++i) {
    std::istringstream is(next("tensor entry"));
    std::string name, dtype;
    int nd = 0;
    is >> name >> dtype >> nd;
    if (dtype != "f32")
      throw CheckpointError(CheckpointError::Code::version_mismatch,
                            "unsupported tensor dtype " + dtype);
    std::vector<int> shape(static_cast<size_t>(nd));
    for (int d = 0; d < nd; ++d) is >> shape[size_t(d)];
    if (!is)
      throw CheckpointError(CheckpointError::Code::truncated,
                            "malformed tensor header for " + name);
    h.tensors.push_back({name, shape});
  }
  if (next("end") != "end")
    throw CheckpointError(CheckpointError::Code::truncated,
                          "checkpoint header missing end marker");
  return h;
}

void read_payloads(std::ifstream& f, OFNet& model, const CheckpointHeader& h,
                   const std::string& path) {
  auto& named = model.named_params();
  const size_t common = std::min(named.size(), h.tensors.size());
  for (size_t i = 0; i < common; ++i) {
    const auto& [name, t] = named[i];
    const auto& [ck_name, ck_shape] = h.tensors[i];
    if (name != ck_name || t.shape() != ck_shape)
      throw CheckpointError(
          CheckpointError::Code::shape_mismatch,
          "tensor mismatch at '" + ck_name + "' " + shape_str(ck_shape) +
              ", model expects '" + name + "' " + shape_str(t.shape()));
  }
  if (named.size() != h.tensors.size())
    throw CheckpointError(
        CheckpointError::Code::shape_mismatch,
        "checkpoint holds " + std::to_string(h.tensors.size()) +
            " tensors, model expects " + std::to_string(named.size()));
  for (size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    if (!f.read(reinterpret_cast<char*>(t.values().data()),
                std::streamsize(t.size() * sizeof(float))))
      throw CheckpointError(CheckpointError::Code::truncated,
                            "checkpoint payload truncated at '" + name + "'");
  }
  model.train_step = h.step;
  (void)path;
}

}  // namespace

OFNet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw CheckpointError(CheckpointError::Code::io,
                          "cannot open checkpoint: " + path);
  CheckpointHeader h = read_header(f, path);
  OFNet model = OFNet::build(h.variant, 0);
  read_payloads(f, model, h, path);
  return model;
}

void load_into(OFNet& model, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw CheckpointError(CheckpointError::Code::io,
                          "cannot open checkpoint: " + path);
  CheckpointHeader h = read_header(f, path);
  read_payloads(f, model, h, path);
}

}  // namespace ofnet
