// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include "gkd/losses.hpp"
#include "gkd/nets.hpp"

using namespace gkd;
using namespace gkd::nets;
namespace fs = std::filesystem;

namespace {

Tensor random_images(int b, int s, std::uint64_t seed) {
  Tensor t({b, 1, s, s});
  Rng rng(seed);
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = rng.uniform();
  return t;
}

Tensor random_masks(int b, int s, std::uint64_t seed) {
  Tensor t({b, 1, s, s});
  Rng rng(seed);
  for (Eigen::Index i = 0; i < t.size(); ++i)
    t[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  return t;
}

bool params_equal(std::vector<Param*> a, std::vector<Param*> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value.shape() != b[i]->value.shape()) return false;
    if (!(a[i]->value.array() == b[i]->value.array()).all()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("segnet forward produces full-resolution predictions in (0,1)") {
  SegNet net(Source::teacher, {4, 8, 12}, 32);
  net.init(7);
  CHECK(net.stages() == 3);
  CHECK(net.bottleneck_channels() == 12);
  CHECK(net.bottleneck_size() == 4);

  ad::Tape t;
  auto f = net.forward(t, t.constant(random_images(2, 32, 1)));
  CHECK(f.bottleneck.value().shape() == Shape{2, 12, 4, 4});
  REQUIRE(f.skips.size() == 2);
  CHECK(f.skips[0].value().shape() == Shape{2, 4, 16, 16});
  CHECK(f.skips[1].value().shape() == Shape{2, 8, 8, 8});
  const Tensor& p = f.prediction.value();
  CHECK(p.shape() == Shape{2, 1, 32, 32});
  CHECK(p.all_finite());
  CHECK((p.array() > 0.0).all());
  CHECK((p.array() < 1.0).all());
}

TEST_CASE("default teacher and student geometries line up") {
  NetConfig cfg;
  cfg.validate();
  SegNet teacher(Source::teacher, cfg.teacher_widths, cfg.input_size);
  SegNet student(Source::student, cfg.student_widths, cfg.input_size);
  CHECK(teacher.bottleneck_size() == 8);
  CHECK(teacher.bottleneck_channels() == 32);
  CHECK(student.bottleneck_size() == 16);
  CHECK(student.bottleneck_channels() == 12);
  CHECK(teacher.parameter_count() > 3 * student.parameter_count());
}

TEST_CASE("infer matches the taped forward pass") {
  SegNet net(Source::student, {3, 6}, 32);
  net.init(11);
  Tensor images = random_images(2, 32, 5);

  ad::Tape t;
  auto f = net.forward(t, t.constant(images));
  auto inf = net.infer(images);

  CHECK(inf.feature.source == Source::student);
  CHECK((inf.prediction.array() == f.prediction.value().array()).all());
  CHECK((inf.feature.data.array() == f.bottleneck.value().array()).all());
  REQUIRE(inf.skips.size() == f.skips.size());
  for (std::size_t i = 0; i < inf.skips.size(); ++i)
    CHECK((inf.skips[i].array() == f.skips[i].value().array()).all());
}

TEST_CASE("init is deterministic in the seed") {
  SegNet a(Source::teacher, {3, 6}, 32);
  SegNet b(Source::teacher, {3, 6}, 32);
  a.init(42);
  b.init(42);
  CHECK(params_equal(a.parameters(), b.parameters()));
  b.init(43);
  CHECK_FALSE(params_equal(a.parameters(), b.parameters()));
}

TEST_CASE("segnet rejects inputs that do not match its geometry") {
  SegNet net(Source::teacher, {3, 6}, 32);
  net.init(1);
  ad::Tape t;
  CHECK_THROWS_AS(net.encode(t, t.constant(random_images(1, 16, 0)), nullptr),
                  ParamError);
  auto bn = net.encode(t, t.constant(random_images(1, 32, 0)), nullptr);
  CHECK_THROWS_AS(net.decode(t, bn, {}), ParamError);
  CHECK_THROWS_AS(SegNet(Source::teacher, {3}, 32), ParamError);
  CHECK_THROWS_AS(SegNet(Source::teacher, {3, 6}, 33), ParamError);
}

TEST_CASE("set_trainable freezes every parameter against accumulation") {
  SegNet net(Source::student, {3, 6}, 32);
  net.init(3);
  Tensor images = random_images(2, 32, 9);
  Tensor masks = random_masks(2, 32, 10);

  net.set_trainable(false);
  {
    ad::Tape t;
    ad::Var in = t.leaf(images);  // keeps the graph tracked while frozen
    auto f = net.forward(t, in);
    t.backward(ad::bce(f.prediction, masks));
    CHECK(t.grad(in).array().abs().sum() > 0.0);
  }
  for (Param* p : net.parameters()) CHECK((p->grad.array() == 0.0).all());

  net.set_trainable(true);
  double total_abs = 0.0;
  {
    ad::Tape t;
    auto f = net.forward(t, t.constant(images));
    t.backward(ad::bce(f.prediction, masks));
  }
  for (Param* p : net.parameters()) total_abs += p->grad.array().abs().sum();
  CHECK(total_abs > 0.0);
}

TEST_CASE("mask autoencoder round trip shapes and binary input contract") {
  Psae psae(16, 32);
  psae.init(5);
  Tensor masks = random_masks(3, 32, 4);

  Tensor z = psae.encode_eval(masks);
  CHECK(z.shape() == Shape{3, 16});
  Tensor rec = psae.decode_eval(z);
  CHECK(rec.shape() == Shape{3, 1, 32, 32});
  CHECK((rec.array() > 0.0).all());
  CHECK((rec.array() < 1.0).all());

  Tensor soft = masks;
  soft[0] = 0.5;
  CHECK_THROWS_AS(psae.encode_eval(soft), ParamError);
  CHECK_THROWS_AS(Psae(16, 40), ParamError);
}

TEST_CASE("mask autoencoder trains down its reconstruction loss") {
  Psae psae(8, 32);
  psae.init(21);
  Tensor masks = random_masks(4, 32, 30);

  auto loss_once = [&](bool step) {
    ad::Tape t;
    ad::Var z = psae.encode(t, t.constant(masks));
    ad::Var rec = psae.decode(t, z);
    ad::Var loss = ad::bce(rec, masks);
    if (step) {
      t.backward(loss);
      for (Param* p : psae.parameters()) {
        p->value.array() -= 0.5 * p->grad.array();
        p->zero_grad();
      }
    }
    return loss.value()[0];
  };

  const double before = loss_once(false);
  for (int i = 0; i < 10; ++i) loss_once(true);
  const double after = loss_once(false);
  CHECK(after < before);
}

TEST_CASE("alignment headers are bound to their source network") {
  MsanHeader tan(Source::teacher, 6, 8, 16);
  tan.init(2);
  BottleneckFeature from_teacher{Tensor({2, 6, 8, 8}, 0.5), Source::teacher};
  BottleneckFeature from_student{Tensor({2, 6, 8, 8}, 0.5), Source::student};

  Tensor z = tan.encode_eval(from_teacher);
  CHECK(z.shape() == Shape{2, 16});
  CHECK_THROWS_WITH_AS(tan.encode_eval(from_student),
                       doctest::Contains("refuses student"), ParamError);

  Tensor rec = tan.decode_eval(z);
  CHECK(rec.shape() == Shape{2, 6, 8, 8});
  CHECK((rec.array() >= 0.0).all());

  CHECK_THROWS_AS(tan.encode_eval({Tensor({2, 6, 4, 4}, 0.5), Source::teacher}),
                  ParamError);
  CHECK_THROWS_AS(MsanHeader(Source::teacher, 6, 6, 16), ParamError);
}

TEST_CASE("model bundle wires all five networks and checks capacity") {
  NetConfig cfg;
  cfg.input_size = 64;
  cfg.latent_dim = 8;
  cfg.teacher_widths = {2, 4, 6, 8};
  cfg.student_widths = {1, 2, 3};
  ModelBundle bundle(cfg, 99);

  CHECK(bundle.tan.feat_channels() == 8);
  CHECK(bundle.tan.feat_size() == 4);
  CHECK(bundle.san.feat_channels() == 3);
  CHECK(bundle.san.feat_size() == 8);
  CHECK(bundle.all_params().size() ==
        bundle.teacher.parameters().size() +
            bundle.student.parameters().size() +
            bundle.psae.parameters().size() + bundle.tan.parameters().size() +
            bundle.san.parameters().size());

  ModelBundle again(cfg, 99);
  CHECK(params_equal(bundle.all_params(), again.all_params()));
  CHECK_FALSE(
      params_equal(bundle.teacher.parameters(), bundle.student.parameters()));

  NetConfig inverted = cfg;
  inverted.teacher_widths = {1, 1, 1, 1};
  inverted.student_widths = {8, 16, 24};
  CHECK_THROWS_AS(ModelBundle(inverted, 1), ParamError);
}

TEST_CASE("header exchange reconstructs into the opposite feature space") {
  NetConfig cfg;
  cfg.input_size = 64;
  cfg.latent_dim = 8;
  cfg.teacher_widths = {2, 4, 6, 8};
  cfg.student_widths = {1, 2, 3};
  ModelBundle bundle(cfg, 17);

  Tensor images = random_images(2, 64, 44);
  auto ti = bundle.teacher.infer(images);
  auto si = bundle.student.infer(images);

  Tensor zt = bundle.tan.encode_eval(ti.feature);
  Tensor zs = bundle.san.encode_eval(si.feature);
  // Swapped latents decode into the decoding header's own feature space.
  CHECK(bundle.tan.decode_eval(zs).shape() == ti.feature.data.shape());
  CHECK(bundle.san.decode_eval(zt).shape() == si.feature.data.shape());
}

TEST_CASE("checkpoint round trip restores parameters at f32 precision") {
  const std::string dir = "ckpt_roundtrip";
  fs::remove_all(dir);

  SegNet a(Source::teacher, {3, 6}, 32);
  a.init(1);
  std::vector<Tensor> orig;
  for (Param* p : a.parameters()) orig.push_back(p->value);
  save_checkpoint(dir, "p2", "deadbeef", a.parameters());
  CHECK(checkpoint_exists(dir));

  SegNet b(Source::teacher, {3, 6}, 32);
  b.init(2);
  CHECK_FALSE(params_equal(a.parameters(), b.parameters()));
  load_checkpoint(dir, "p2", "deadbeef", b.parameters());

  auto bp = b.parameters();
  for (std::size_t i = 0; i < bp.size(); ++i) {
    for (Eigen::Index j = 0; j < bp[i]->value.size(); ++j)
      CHECK(bp[i]->value[j] ==
            static_cast<double>(static_cast<float>(orig[i][j])));
  }
  fs::remove_all(dir);
}

TEST_CASE("checkpoint validation names the offending tensor") {
  const std::string dir = "ckpt_validate";
  fs::remove_all(dir);

  SegNet a(Source::teacher, {3, 6}, 32);
  a.init(1);
  save_checkpoint(dir, "p2", "cafe", a.parameters());

  SUBCASE("phase and config hash mismatches are configuration errors") {
    CHECK_THROWS_WITH_AS(load_checkpoint(dir, "p3", "cafe", a.parameters()),
                         doctest::Contains("phase p2"), ConfigError);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir, "p2", "beef", a.parameters()),
                         doctest::Contains("config hash"), ConfigError);
  }
  SUBCASE("shape mismatch") {
    SegNet wide(Source::teacher, {5, 6}, 32);
    wide.init(1);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir, "p2", "cafe", wide.parameters()),
                         doctest::Contains("teacher.enc0.w"), IoError);
  }
  SUBCASE("missing tensor") {
    auto params = a.parameters();
    save_checkpoint(dir, "p2", "cafe",
                    {params.begin(), params.end() - 1});
    CHECK_THROWS_WITH_AS(load_checkpoint(dir, "p2", "cafe", params),
                         doctest::Contains("missing"), IoError);
  }
  SUBCASE("unexpected tensor") {
    auto params = a.parameters();
    CHECK_THROWS_WITH_AS(
        load_checkpoint(dir, "p2", "cafe", {params.begin(), params.end() - 1}),
        doctest::Contains("unexpected tensor"), IoError);
  }
  SUBCASE("missing directory") {
    CHECK_THROWS_AS(load_checkpoint("no_such_ckpt", "p2", "cafe",
                                    a.parameters()),
                    IoError);
  }
  fs::remove_all(dir);
}

TEST_CASE("network configuration validation") {
  NetConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  NetConfig bad = cfg;
  bad.latent_dim = 1;
  CHECK_THROWS_AS(bad.validate(), ParamError);
  bad = cfg;
  bad.input_size = 48;  // teacher bottleneck would land at 3
  CHECK_THROWS_AS(bad.validate(), ParamError);
  bad = cfg;
  bad.input_size = 32;  // teacher bottleneck would land at 2
  CHECK_THROWS_AS(bad.validate(), ParamError);
  bad = cfg;
  bad.teacher_widths = {8, 16, 24};  // teacher must reduce to 1/16
  CHECK_THROWS_AS(bad.validate(), ParamError);
  bad = cfg;
  bad.student_widths = {4, 8};  // student must reduce to 1/8
  CHECK_THROWS_AS(bad.validate(), ParamError);
  bad = cfg;
  bad.student_widths = {4, 8, 0};
  CHECK_THROWS_AS(bad.validate(), ParamError);
}
