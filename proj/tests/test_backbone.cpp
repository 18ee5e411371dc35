#include <doctest.h>

#include <sacc/backbone.hpp>
#include <sacc/gradcheck.hpp>
#include <sacc/model.hpp>

#include <algorithm>
#include <random>

using namespace sacc;

namespace {

using ImageD = Image<double>;

ImageD random_image(int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageD img(3, side, side);
  for (auto& ch : img.channels)
    for (Eigen::Index i = 0; i < ch.size(); ++i) ch.data()[i] = u(rng);
  return img;
}

BackboneConfig small_config() {
  BackboneConfig c;
  c.input_side = 16;
  c.patch = 2;
  c.channels = {4, 6, 8};
  return c;
}

}  // namespace

TEST_CASE("reference stage geometry halves per stage") {
  BackboneConfig c;
  REQUIRE(c.stages() == 4);
  const auto g = c.stage_grids();
  REQUIRE(g.size() == 4);
  CHECK(g[0] == GridShape{56, 56});
  CHECK(g[1] == GridShape{28, 28});
  CHECK(g[2] == GridShape{14, 14});
  CHECK(g[3] == GridShape{7, 7});
}

TEST_CASE("encode returns one feature map per stage with the configured widths") {
  BackboneWeights<double> w = reference_backbone<double>(BackboneConfig{}, 0);
  Tape<double> tape;
  const auto f = w.net->encode(tape, random_image(224, 1));
  REQUIRE(f.size() == 4);
  const int widths[] = {32, 64, 128, 256};
  const int sides[] = {56, 28, 14, 7};
  for (int s = 0; s < 4; ++s) {
    CHECK(f[s].stage == s);
    CHECK(f[s].tokens.rows() == sides[s] * sides[s]);
    CHECK(f[s].tokens.cols() == widths[s]);
    CHECK(f[s].grid.size() == f[s].tokens.rows());
  }
  CHECK(w.parameter_count() <= 2'000'000);
}

TEST_CASE("same seed gives bit-identical weights") {
  BackboneWeights<float> a = reference_backbone<float>(small_config(), 0);
  BackboneWeights<float> b = reference_backbone<float>(small_config(), 0);
  BackboneWeights<float> c = reference_backbone<float>(small_config(), 1);
  REQUIRE(a.params.size() == b.params.size());
  bool any_differs = false;
  for (std::size_t p = 0; p < a.params.size(); ++p) {
    CHECK(a.params[p].name == b.params[p].name);
    CHECK(a.params[p].value == b.params[p].value);
    any_differs |= a.params[p].value != c.params[p].value;
  }
  CHECK(any_differs);
}

TEST_CASE("zero image with a zeroed final projection gives zero final tokens") {
  BackboneWeights<double> w = reference_backbone<double>(small_config(), 3);
  w.net->final_weight().value.setZero();
  w.net->final_bias().value.setZero();
  Tape<double> tape;
  const auto f = w.net->encode(tape, ImageD(3, 16, 16, 0.0));
  CHECK(f.back().tokens.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("encode is deterministic") {
  BackboneWeights<float> w = reference_backbone<float>(small_config(), 4);
  const ImageF img = random_image(16, 5).cast<float>();
  Tape<float> t1, t2;
  const auto a = w.net->encode(t1, img);
  const auto b = w.net->encode(t2, img);
  for (std::size_t s = 0; s < a.size(); ++s) CHECK(a[s].tokens.value() == b[s].tokens.value());
}

TEST_CASE("encode rejects the wrong geometry") {
  BackboneWeights<float> w = reference_backbone<float>(small_config(), 0);
  Tape<float> tape;
  CHECK_THROWS_AS(w.net->encode(tape, ImageF(3, 17, 17)), ShapeError);
  CHECK_THROWS_AS(w.net->encode(tape, ImageF(1, 16, 16)), ShapeError);
  BackboneConfig bad = small_config();
  bad.channels = {4, 0};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.channels = {4, 4, 4, 4, 4};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("backbone gradients match central differences") {
  BackboneConfig c;
  c.input_side = 8;
  c.patch = 2;
  c.channels = {3, 4};
  BackboneWeights<double> w = reference_backbone<double>(c, 7);
  const ImageD img = random_image(8, 8);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d;
  MatD probe(4, 4);  // final stage is 2x2 tokens x 4 channels
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = d(rng);
  const double err = parameter_gradient_check(
      w.params,
      [&](Tape<double>& t) {
        const auto f = w.net->encode(t, img);
        return sum(hadamard(f.back().tokens, t.constant(probe)));
      },
      1e-6);
  CHECK(err < 1e-3);
}

TEST_CASE("peripheral and fixation passes bind the same parameter objects") {
  ModelConfig mc;
  mc.backbone = small_config();
  mc.mpsa.parts = 3;
  mc.mpsa.num_classes = 3;
  mc.source_side = 32;
  SaccadicModel<float> model(mc);
  Tape<float> tape;
  std::mt19937_64 rng(0);
  ForwardOptions fo;
  fo.sampler.count = 2;
  const ForwardPass<float> fp = model.forward(tape, random_image(32, 2).cast<float>(), fo, rng);
  REQUIRE(fp.fixations.points.size() == 2);
  REQUIRE_FALSE(fp.fixation_params.empty());

  auto backbone_only = [](const std::vector<const Parameter<float>*>& uses) {
    std::vector<const Parameter<float>*> out;
    for (const auto* p : uses)
      if (p->name.rfind("backbone/", 0) == 0 && std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    return out;
  };
  const auto per = backbone_only(fp.peripheral_params);
  const auto fix = backbone_only(fp.fixation_params);
  CHECK(per.size() == fix.size());
  CHECK(per == fix);  // pointer identity
  for (const auto* p : per) CHECK(model.parameters().find(p->name) == p);
}
