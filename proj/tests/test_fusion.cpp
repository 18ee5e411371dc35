#include <doctest.h>

#include <sacc/fusion.hpp>
#include <sacc/gradcheck.hpp>
#include <sacc/model.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

using namespace sacc;

namespace {

MatD random_mat(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

MatD row(std::initializer_list<double> v) {
  MatD m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index j = 0;
  for (double x : v) m(0, j++) = x;
  return m;
}

struct Head {
  ParameterSet<double> params;
  ImpactHead<double> head;
  explicit Head(int channels, std::uint64_t seed = 0) {
    std::mt19937_64 rng(seed);
    head = ImpactHead<double>::create(channels, params, rng);
  }
};

double log_sum_exp(const MatD& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

}  // namespace

TEST_CASE("global impact of a fresh head is one half") {
  Head h(8);
  std::mt19937_64 rng(1);
  Tape<double> tape;
  CHECK(global_impact(tape.constant(random_mat(6, 8, rng)), h.head).scalar() == doctest::Approx(0.5));
}

TEST_CASE("a large output bias saturates the global impact") {
  Head h(8);
  h.head.b2->value(0, 0) = 10;
  std::mt19937_64 rng(2);
  Tape<double> tape;
  const double a = global_impact(tape.constant(random_mat(6, 8, rng)), h.head).scalar();
  CHECK(a == doctest::Approx(1 / (1 + std::exp(-10.0))));
  CHECK(a > 0.9999);
}

TEST_CASE("global impact ignores token order") {
  Head h(8, 3);
  h.head.w2->value.setConstant(0.7);
  std::mt19937_64 rng(3);
  const MatD tokens = random_mat(9, 8, rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(9);
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + 9, rng);
  Tape<double> tape;
  const double a = global_impact(tape.constant(tokens), h.head).scalar();
  const double b = global_impact(tape.constant(MatD(perm * tokens)), h.head).scalar();
  CHECK(a == doctest::Approx(b).epsilon(1e-14));
}

TEST_CASE("fixation weights examples") {
  const GridShape grid{4, 4}, source{64, 64};
  std::mt19937_64 rng(4);
  const MatD tokens = random_mat(16, 8, rng);
  Head h(8, 5);
  h.head.w2->value = random_mat(2, 1, rng);

  Tape<double> tape;
  const MatD same = fixation_weights(tape.constant(tokens), grid, {{24, 24}, {24, 24}, {24, 24}}, source, h.head).value();
  CHECK((same.array() - 1.0 / 3).abs().maxCoeff() < 1e-12);

  const MatD one = fixation_weights(tape.constant(tokens), grid, {{40, 8}}, source, h.head).value();
  CHECK(one(0, 0) == doctest::Approx(1.0));

  CHECK_THROWS_AS(fixation_weights(tape.constant(tokens), grid, {}, source, h.head), std::invalid_argument);
  CHECK_THROWS_AS(fixation_weights(tape.constant(tokens), {3, 4}, {{8, 8}}, source, h.head), ShapeError);
}

TEST_CASE("a fixation on the only active block takes almost all the weight") {
  const GridShape grid{4, 4}, source{64, 64};
  MatD tokens = MatD::Zero(16, 4);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) tokens.row(r * 4 + c).setOnes();
  Head h(4);
  h.head.w1->value.setOnes();
  h.head.w2->value.setConstant(50);
  h.head.b2->value(0, 0) = -10;
  h.head.mask_sigma = 1.0;
  Tape<double> tape;
  // (24, 24) maps to cell (1, 1), inside the block; (56, 56) to cell (3, 3).
  const MatD beta = fixation_weights(tape.constant(tokens), grid, {{56, 56}, {24, 24}}, source, h.head).value();
  CHECK(beta(0, 1) > 0.99);
  CHECK(beta.sum() == doctest::Approx(1.0));
}

TEST_CASE("fixation weights sum to one") {
  const GridShape grid{3, 5}, source{30, 50};
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> ur(0, 30), uc(0, 50);
  Head h(8, 7);
  h.head.w2->value = random_mat(2, 1, rng);
  h.head.b2->value(0, 0) = 0.3;
  for (int trial = 0; trial < 1000; ++trial) {
    Tape<double> tape;
    std::vector<Point> pts;
    for (int n = 0; n < 1 + trial % 6; ++n) pts.push_back({ur(rng), uc(rng)});
    const MatD beta = fixation_weights(tape.constant(random_mat(15, 8, rng)), grid, pts, source, h.head).value();
    CHECK(std::abs(beta.sum() - 1) < 1e-6);
    CHECK(beta.minCoeff() >= 0);
  }
}

TEST_CASE("fuse examples") {
  Tape<double> tape;
  const Var<double> w = tape.constant(MatD::Identity(2, 2)), b = tape.constant(MatD::Zero(1, 2));
  const FusedLogits<double> single = fuse(tape.constant(row({1, 0})), {tape.constant(row({0, 2}))},
                                          tape.constant(row({0.5})), tape.constant(row({1})), w, b);
  CHECK(single.fused.value() == row({1, 1}));

  // (1/N) sum beta_n z_n with N = 2, beta = (0.25, 0.75).
  const FusedLogits<double> two =
      fuse(tape.constant(row({1, -1})), {tape.constant(row({4, 0})), tape.constant(row({0, 4}))},
           tape.constant(row({0.2})), tape.constant(row({0.25, 0.75})), w, b);
  CHECK(two.fixation.value().isApprox(row({0.5, 1.5})));
  CHECK(two.fused.value().isApprox(row({1.1, -0.7})));

  const FusedLogits<double> halved =
      fuse(tape.constant(row({0, 0})), {tape.constant(row({3, -2})), tape.constant(row({7, 7}))},
           tape.constant(row({1})), tape.constant(row({1, 0})), w, b);
  CHECK(halved.fixation.value() == row({1.5, -1}));

  const FusedLogits<double> passthrough = fuse(tape.constant(row({0, 0})), {tape.constant(row({0.3, -4}))},
                                               tape.constant(row({1})), tape.constant(row({1})), w, b);
  CHECK(passthrough.fused.value() == row({0.3, -4}));

  // Zero impact leaves the peripheral logits, up to the projection.
  MatD proj(2, 2);
  proj << 2, 1, 0, 3;
  const FusedLogits<double> zero = fuse(tape.constant(row({1, 2})), {tape.constant(row({9, 9}))},
                                        tape.constant(row({0})), tape.constant(row({1})), tape.constant(proj),
                                        tape.constant(row({0.5, 0})));
  CHECK(zero.fused.value().isApprox(row({2.5, 7})));

  CHECK_THROWS_AS(fuse(tape.constant(row({1, 0})), {}, tape.constant(row({1})), tape.constant(row({1})), w, b),
                  std::invalid_argument);
  CHECK_THROWS_AS(fuse(tape.constant(row({1, 0})), {tape.constant(row({0, 2}))}, tape.constant(row({1})),
                       tape.constant(row({0.5, 0.5})), w, b),
                  ShapeError);
}

TEST_CASE("nll examples") {
  Tape<double> tape;
  CHECK(nll(tape.constant(MatD::Zero(1, 10)), 3).scalar() == doctest::Approx(std::log(10.0)));
  CHECK(nll(tape.constant(MatD::Zero(1, 2)), 0, 0.1).scalar() == doctest::Approx(std::log(2.0)));
  CHECK(nll(tape.constant(row({30, 0, 0})), 0).scalar() < 1e-12);
  CHECK(nll(tape.constant(MatD::Zero(1, 4)), 1).scalar() == doctest::Approx(1.3863).epsilon(1e-4));
  CHECK(nll(tape.constant(row({1e4, 0, 0})), 0).scalar() == 0.0);
  CHECK(nll(tape.constant(MatD::Zero(1, 2)), 1).scalar() == doctest::Approx(std::log(2.0)));

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const MatD z = random_mat(1, 5, rng);
    const int y = trial % 5;
    const MatD logp = (z.array() - log_sum_exp(z)).matrix();
    CHECK(nll(tape.constant(z), y).scalar() == doctest::Approx(-logp(0, y)).epsilon(1e-12));
    CHECK(nll(tape.constant(z), y, 0.1).scalar() ==
          doctest::Approx(-0.9 * logp(0, y) - 0.1 * logp.mean()).epsilon(1e-12));
  }
  CHECK_THROWS_AS(nll(tape.constant(MatD::Zero(1, 3)), 3), std::out_of_range);
  CHECK_THROWS_AS(nll(tape.constant(MatD::Zero(2, 3)), 0), ShapeError);
}

TEST_CASE("confidence-weighted nll examples") {
  Tape<double> tape;
  LossConfig plain;
  plain.confidence_penalty = 0;
  std::mt19937_64 rng(9);
  const MatD z = random_mat(1, 4, rng);
  CHECK(conf_nll(tape.constant(z), 2, tape.constant(row({1})), plain).scalar() ==
        doctest::Approx(nll(tape.constant(z), 2).scalar()).epsilon(1e-12));

  // Vanishing confidence: the mixture tends to the uniform distribution.
  CHECK(conf_nll(tape.constant(z), 2, tape.constant(row({1e-9})), plain).scalar() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-6));

  LossConfig cfg;
  CHECK(conf_nll(tape.constant(MatD::Zero(1, 2)), 0, tape.constant(row({0.5})), cfg).scalar() ==
        doctest::Approx(std::log(2.0) + 0.1 * std::log(2.0)));
  cfg.penalty_sign = PenaltySign::AsPrinted;
  CHECK(conf_nll(tape.constant(MatD::Zero(1, 2)), 0, tape.constant(row({0.5})), cfg).scalar() ==
        doctest::Approx(std::log(2.0) - 0.1 * std::log(2.0)));

  CHECK_THROWS_AS(conf_nll(tape.constant(z), 0, tape.constant(row({0})), plain), NumericError);
}

TEST_CASE("confidence-weighted nll falls as confidence grows on a correct prediction") {
  LossConfig cfg;
  const MatD z = row({3, 0, -1});
  double prev = std::numeric_limits<double>::infinity();
  for (double a = 0.05; a <= 1.0; a += 0.05) {
    Tape<double> tape;
    const double l = conf_nll(tape.constant(z), 0, tape.constant(row({a})), cfg).scalar();
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("total loss examples") {
  Tape<double> tape;
  std::mt19937_64 rng(10);
  const Var<double> zp = tape.constant(random_mat(1, 3, rng)), zf = tape.constant(random_mat(1, 3, rng));
  const Var<double> a = tape.constant(row({0.7}));
  LossConfig cfg;
  cfg.lambda_per = 0.3;
  cfg.lambda_fix = 0.8;
  const double expected = 0.3 * nll(zp, 1).scalar() + 0.8 * conf_nll(zf, 1, a, cfg).scalar();
  CHECK(total_loss(zp, &zf, 1, &a, cfg).scalar() == doctest::Approx(expected).epsilon(1e-12));

  const Var<double>* none = nullptr;
  CHECK(total_loss(zp, none, 1, none, cfg).scalar() ==
        doctest::Approx(0.3 * nll(zp, 1).scalar()));
  cfg.lambda_fix = 0;
  const LossTerms<double> t = loss_terms(zp, &zf, 1, &a, cfg);
  CHECK_FALSE(t.fixation.has_value());
  CHECK(t.total.scalar() == doctest::Approx(0.3 * nll(zp, 1).scalar()));

  cfg.lambda_per = -1;
  CHECK_THROWS_AS(total_loss(zp, &zf, 1, &a, cfg), std::invalid_argument);
}

TEST_CASE("impact head, fusion and losses pass the central-difference check") {
  const GridShape grid{2, 2}, source{16, 16};
  std::mt19937_64 rng(11);
  Head h(4, 12);
  h.head.w2->value = random_mat(1, 1, rng);
  const MatD tokens = random_mat(4, 4, rng);
  const MatD zp = random_mat(1, 3, rng);
  const std::vector<MatD> zf{random_mat(1, 3, rng), random_mat(1, 3, rng)};
  LossConfig cfg;
  cfg.label_smoothing = 0.1;
  const std::vector<Point> pts{{4, 4}, {10, 13}};

  // Gradients with respect to the head parameters.
  const double head_err = parameter_gradient_check(
      h.params,
      [&](Tape<double>& t) {
        const Var<double> tok = t.constant(tokens);
        const Var<double> alpha = global_impact(tok, h.head);
        const Var<double> beta = fixation_weights(tok, grid, pts, source, h.head);
        const FusedLogits<double> f = fuse(t.constant(zp), {t.constant(zf[0]), t.constant(zf[1])}, alpha, beta,
                                           t.constant(MatD::Identity(3, 3)), t.constant(MatD::Zero(1, 3)));
        return add(total_loss(t.constant(zp), &f.fixation, 1, &alpha, cfg), nll(f.fused, 2));
      },
      1e-6);
  CHECK(head_err < 1e-3);

  // Gradients with respect to the tokens and the logits.
  const double token_err = finite_difference_check(
      [&](Tape<double>& t, Var<double> tok) {
        const Var<double> alpha = global_impact(tok, h.head);
        const Var<double> beta = fixation_weights(tok, grid, pts, source, h.head);
        const FusedLogits<double> f = fuse(t.constant(zp), {t.constant(zf[0]), t.constant(zf[1])}, alpha, beta,
                                           t.constant(MatD::Identity(3, 3)), t.constant(MatD::Zero(1, 3)));
        return add(total_loss(t.constant(zp), &f.fixation, 0, &alpha, cfg), nll(f.fused, 0));
      },
      tokens, 1e-6);
  CHECK(token_err < 1e-3);

  const double logit_err = finite_difference_check(
      [&](Tape<double>& t, Var<double> z) {
        const Var<double> alpha = t.constant(row({0.6}));
        const FusedLogits<double> f = fuse(z, {t.constant(zf[0]), z}, alpha, t.constant(row({0.3, 0.7})),
                                           t.constant(MatD::Identity(3, 3)), t.constant(MatD::Zero(1, 3)));
        return add(total_loss(z, &f.fixation, 2, &alpha, cfg), nll(f.fused, 1, 0.1));
      },
      zp, 1e-6);
  CHECK(logit_err < 1e-3);
}

TEST_CASE("the whole two-pass model passes the central-difference check") {
  ModelConfig mc;
  mc.backbone.input_side = 8;
  mc.backbone.patch = 2;
  mc.backbone.channels = {3, 4};
  mc.mpsa.parts = 2;
  mc.mpsa.num_classes = 2;
  mc.source_side = 16;
  mc.seed = 13;
  SaccadicModel<double> model(mc);
  std::mt19937_64 rng(14);
  // A fresh impact head has a zero output layer; perturb it so every
  // parameter sees a nonzero gradient path.
  for (auto name : {"impact/w2", "impact/b2"}) model.parameters().find(name)->value = random_mat(
      static_cast<int>(model.parameters().find(name)->value.rows()), 1, rng);
  model.parameters().find("fuse/proj_w")->value += 0.3 * random_mat(2, 2, rng);

  Image<double> source(3, 16, 16);
  for (auto& ch : source.channels) ch = random_mat(16, 16, rng);
  const std::vector<Point> pts{{4, 4}, {11, 9}};
  LossConfig cfg;
  cfg.label_smoothing = 0.1;

  const double err = parameter_gradient_check(
      model.parameters(),
      [&](Tape<double>& t) {
        ForwardOptions fo;
        fo.sampler.count = 2;
        fo.forced_points = &pts;
        std::mt19937_64 r(0);
        const ForwardPass<double> fp = model.forward(t, source, fo, r);
        return add(total_loss(fp.logits_per, &*fp.z_fix, 1, &*fp.alpha, cfg), nll(fp.prediction, 1));
      },
      1e-6);
  CHECK(err < 1e-3);
}
