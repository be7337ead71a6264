#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ofnet/model.hpp"
#include "ofnet/serialize.hpp"

using namespace ofnet;

namespace {

Tensor random_image(int n, int h, int w, uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(size_t(n) * 3 * h * w);
  for (auto& x : v) x = float(rng.uniform());
  return Tensor::from({n, 3, h, w}, std::move(v));
}

// Narrow widths keep unit tests fast.
ModelVariant test_variant() {
  ModelVariant v;
  v.mcl.branch_channels = 16;
  v.brf.bilateral_channels = 16;
  v.brf.occlusion_channels = 8;
  v.brf.fused_channels = 12;
  v.decoder_channels = 8;
  v.decoder_mid_channels = 12;
  v.stripe.branch_channels = 6;
  v.stripe.out_channels = 10;
  v.low_tap_channels = 4;
  v.edge_fused_channels = 8;
  return v;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("build is deterministic: same seed, identical parameter bytes") {
  auto v = test_variant();
  auto m1 = OFNet::build(v, 42);
  auto m2 = OFNet::build(v, 42);
  auto m3 = OFNet::build(v, 43);
  REQUIRE(m1.named_params().size() == m2.named_params().size());
  bool all_equal = true, differs_from_m3 = false;
  for (size_t i = 0; i < m1.named_params().size(); ++i) {
    auto& a = m1.named_params()[i].second;
    auto& b = m2.named_params()[i].second;
    auto& c = m3.named_params()[i].second;
    all_equal = all_equal && std::equal(a.values().begin(), a.values().end(),
                                        b.values().begin());
    for (size_t j = 0; j < a.size(); ++j)
      differs_from_m3 = differs_from_m3 || a.values()[j] != c.values()[j];
  }
  CHECK(all_equal);
  CHECK(differs_from_m3);
}

TEST_CASE("disable_mcl variant has strictly fewer parameters") {
  auto full = OFNet::build(test_variant(), 1);
  auto v = test_variant();
  v.disable_mcl = true;
  auto ablated = OFNet::build(v, 1);
  CHECK(ablated.parameter_count() < full.parameter_count());
}

TEST_CASE("parameter count regression for the default tiny variant") {
  auto m = OFNet::build(make_variant("tiny-full"), 0);
  // frozen at first build; guards accidental architecture drift
  CHECK(m.parameter_count() == 434722);
}

TEST_CASE("forward shape contract at 96 and 128, zero image is finite") {
  auto m = OFNet::build(test_variant(), 7);
  for (int hw : {96, 128}) {
    auto img = Tensor::zeros({1, 3, hw, hw});
    auto out = m.forward(img);
    CHECK(out.edge_prob.shape() == std::vector<int>{1, 1, hw, hw});
    CHECK(out.orientation.shape() == std::vector<int>{1, 1, hw, hw});
    for (float p : out.edge_prob.values()) {
      CHECK(std::isfinite(p));
      CHECK(p > 0.0f);
      CHECK(p < 1.0f);
    }
    for (float o : out.orientation.values()) CHECK(std::isfinite(o));
  }
}

TEST_CASE("forward pads and crops non-multiple sizes") {
  auto m = OFNet::build(test_variant(), 7);
  auto img = random_image(1, 50, 70, 9);
  auto out = m.forward(img);
  CHECK(out.edge_prob.shape() == std::vector<int>{1, 1, 50, 70});
  CHECK(out.orientation.shape() == std::vector<int>{1, 1, 50, 70});
}

TEST_CASE("shared cue: decoder perturbation moves both outputs") {
  auto m = OFNet::build(test_variant(), 11);
  auto img = random_image(1, 48, 48, 5);
  auto base = m.forward(img);
  for (auto& [name, t] : m.named_params())
    if (name == "decoder.0.w") {
      for (auto& x : t.values()) x += 0.05f;
      break;
    }
  auto bumped = m.forward(img);
  double edge_diff = 0, ori_diff = 0;
  for (size_t i = 0; i < base.edge_prob.size(); ++i)
    edge_diff += std::fabs(double(base.edge_prob.values()[i]) -
                           double(bumped.edge_prob.values()[i]));
  for (size_t i = 0; i < base.orientation.size(); ++i)
    ori_diff += std::fabs(double(base.orientation.values()[i]) -
                          double(bumped.orientation.values()[i]));
  CHECK(edge_diff > 0.0);
  CHECK(ori_diff > 0.0);
}

TEST_CASE("single_edge_stream: orientation ignores the edge logit head") {
  auto v = test_variant();
  v.single_edge_stream = true;
  auto m = OFNet::build(v, 11);
  auto img = random_image(1, 48, 48, 6);
  auto base = m.forward(img);
  for (auto& [name, t] : m.named_params())
    if (name.starts_with("edge.path.logits")) {
      for (auto& x : t.values()) x += 0.1f;
    }
  auto bumped = m.forward(img);
  for (size_t i = 0; i < base.orientation.size(); ++i)
    CHECK(base.orientation.values()[i] == bumped.orientation.values()[i]);
  double edge_diff = 0;
  for (size_t i = 0; i < base.edge_prob.size(); ++i)
    edge_diff += std::fabs(double(base.edge_prob.values()[i]) -
                           double(bumped.edge_prob.values()[i]));
  CHECK(edge_diff > 0.0);
}

TEST_CASE("every ablation variant builds and runs forward") {
  for (const char* preset :
       {"tiny-full", "tiny-no-mcl", "tiny-head3x3", "tiny-no-stripe",
        "tiny-share-decoder", "tiny-single-edge", "tiny-single-ori",
        "tiny-brf16", "tiny-brf32", "tiny-brf48", "tiny-brf80"}) {
    auto m = OFNet::build(make_variant(preset), 3);
    auto out = m.forward(random_image(1, 32, 32, 4));
    CHECK(out.edge_prob.dim(2) == 32);
    CHECK(out.orientation.dim(3) == 32);
  }
}

TEST_CASE("variant json round trip") {
  auto v = make_variant("tiny-head3x3");
  v.disable_mcl = true;
  auto j = variant_to_json(v);
  auto v2 = variant_from_json(j);
  CHECK(v2.stripe.vertical_kernel_h == 3);
  CHECK(v2.disable_mcl);
  CHECK(variant_to_json(v2) == j);
}

TEST_CASE("checkpoint round trip reproduces outputs bitwise") {
  auto m = OFNet::build(test_variant(), 21);
  m.train_step = 137;
  auto path = temp_file("ofnet_test_ckpt.bin");
  save_checkpoint(m, path.string());
  auto restored = load_checkpoint(path.string());
  CHECK(restored.train_step == 137);

  auto img = random_image(1, 40, 40, 8);
  auto a = m.forward(img);
  auto b = restored.forward(img);
  CHECK(std::equal(a.edge_prob.values().begin(), a.edge_prob.values().end(),
                   b.edge_prob.values().begin()));
  CHECK(std::equal(a.orientation.values().begin(),
                   a.orientation.values().end(),
                   b.orientation.values().begin()));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint error taxonomy") {
  auto m = OFNet::build(test_variant(), 2);
  auto path = temp_file("ofnet_test_ckpt2.bin");
  save_checkpoint(m, path.string());

  SUBCASE("corrupted magic") {
    auto bad = temp_file("ofnet_bad_magic.bin");
    std::filesystem::copy_file(
        path, bad, std::filesystem::copy_options::overwrite_existing);
    {
      std::fstream f(bad, std::ios::in | std::ios::out | std::ios::binary);
      f.write("JUNK", 4);
    }
    try {
      load_checkpoint(bad.string());
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(e.code == CheckpointError::Code::bad_magic);
    }
    std::filesystem::remove(bad);
  }

  SUBCASE("truncated payload") {
    auto cut = temp_file("ofnet_truncated.bin");
    auto size = std::filesystem::file_size(path);
    {
      std::ifstream in(path, std::ios::binary);
      std::vector<char> buf(size - 64);
      in.read(buf.data(), std::streamsize(buf.size()));
      std::ofstream out(cut, std::ios::binary);
      out.write(buf.data(), std::streamsize(buf.size()));
    }
    try {
      load_checkpoint(cut.string());
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(e.code == CheckpointError::Code::truncated);
    }
    std::filesystem::remove(cut);
  }

  SUBCASE("loading an ablated checkpoint into the full variant") {
    auto v = test_variant();
    v.disable_mcl = true;
    auto ablated = OFNet::build(v, 3);
    auto apath = temp_file("ofnet_ablated.bin");
    save_checkpoint(ablated, apath.string());
    auto full = OFNet::build(test_variant(), 3);
    try {
      load_into(full, apath.string());
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(e.code == CheckpointError::Code::shape_mismatch);
      // names the first offending tensor
      CHECK(std::string(e.what()).find("ori.") != std::string::npos);
    }
    std::filesystem::remove(apath);
  }

  std::filesystem::remove(path);
}
