#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "fedhf/error.hpp"
#include "fedhf/nn.hpp"
#include "oracles.hpp"

using namespace fedhf;
using namespace fedhf::nn;

namespace {

ModelSpec small_spec(std::size_t in, std::vector<std::size_t> hidden, std::size_t emb,
                     std::size_t classes) {
  ModelSpec s;
  s.input_dim = in;
  s.hidden_layers = std::move(hidden);
  s.embedding_dim = emb;
  s.num_classes = classes;
  return s;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = normal(rng);
  }
  return m;
}

ErrorCategory category_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.category();
  }
  return ErrorCategory::internal;
}

}  // namespace

TEST_CASE("forward_embedding: zero weights give zero embeddings") {
  const auto spec = small_spec(4, {3}, 2, 2);
  const ParameterVector params(std::vector<double>(spec.parameter_count(), 0.0), spec.backbone_size());
  Rng rng(1);
  const auto out = forward_embedding(spec, params, random_matrix(5, 4, rng));
  CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward_embedding: identity linear layer returns its input") {
  const auto spec = small_spec(3, {}, 3, 1);
  std::vector<double> values(spec.parameter_count(), 0.0);
  for (std::size_t i = 0; i < 3; ++i) values[i * 3 + i] = 1.0;
  const ParameterVector params(values, spec.backbone_size());
  Rng rng(2);
  const Matrix x = random_matrix(4, 3, rng);
  CHECK(forward_embedding(spec, params, x) == x);
}

TEST_CASE("forward_embedding: deterministic and matches the loop oracle") {
  const auto spec = small_spec(5, {4, 3}, 2, 3);
  Rng a(7);
  Rng b(7);
  const auto pa = init_parameters(spec, a);
  const auto pb = init_parameters(spec, b);
  CHECK(pa == pb);
  Rng rng(3);
  const Matrix x = random_matrix(6, 5, rng);
  const Matrix e1 = forward_embedding(spec, pa, x);
  const Matrix e2 = forward_embedding(spec, pa, x);
  CHECK(e1 == e2);
  const auto ref = oracle::forward(spec, pa.values(), x);
  for (Eigen::Index i = 0; i < e1.rows(); ++i) {
    for (Eigen::Index j = 0; j < e1.cols(); ++j) {
      CHECK(e1(i, j) == doctest::Approx(ref.embeddings[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("forward_embedding: input width mismatch is a config error") {
  const auto spec = small_spec(3, {}, 2, 1);
  Rng rng(1);
  const auto params = init_parameters(spec, rng);
  CHECK(category_of([&] { forward_embedding(spec, params, Matrix::Zero(2, 4)); }) ==
        ErrorCategory::config);
}

TEST_CASE("ParameterVector: backbone and head slices partition the values") {
  const ParameterVector p({1, 2, 3, 4, 5}, 2);
  CHECK(p.backbone().size() + p.head().size() == p.size());
  CHECK(p.backbone()[1] == 2);
  CHECK(p.head()[0] == 3);
  CHECK(category_of([] { ParameterVector({1.0}, 2); }) == ErrorCategory::config);
}

TEST_CASE("arcface_logits: margin-free unit scale returns raw cosines") {
  Rng rng(11);
  const Matrix head = random_matrix(4, 3, rng);
  const std::vector<double> e = {0.3, -1.2, 0.5};
  const auto logits = arcface_logits(e, head, 1.0, 0.0, 2);
  for (Eigen::Index j = 0; j < head.rows(); ++j) {
    const std::vector<double> row(head.row(j).data(), head.row(j).data() + 3);
    CHECK(logits[static_cast<std::size_t>(j)] == doctest::Approx(oracle::cosine(e, row)).epsilon(1e-12));
  }
}

TEST_CASE("arcface_logits: parallel target row with s=8, m=0.5 gives 8 cos(0.5)") {
  Matrix head(2, 2);
  head << 2.0, 0.0, 0.0, 1.0;
  const auto logits = arcface_logits(std::vector<double>{5.0, 0.0}, head, 8.0, 0.5, 0);
  CHECK(logits[0] == doctest::Approx(8.0 * std::cos(0.5)).epsilon(1e-12));
  CHECK(logits[0] == doctest::Approx(7.0205).epsilon(1e-4));
  // Orthogonal non-target row: zero for any margin.
  CHECK(std::abs(logits[1]) < 1e-15);
  CHECK(std::abs(arcface_logits(std::vector<double>{5.0, 0.0}, head, 8.0, 2.0, 0)[1]) < 1e-15);
}

TEST_CASE("arcface_logits: inference mode applies no margin") {
  Matrix head(1, 2);
  head << 1.0, 1.0;
  const auto logits = arcface_logits(std::vector<double>{1.0, 0.0}, head, 8.0, 0.5);
  CHECK(logits[0] == doctest::Approx(8.0 / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("arcface_logits: zero-norm inputs are degenerate") {
  Matrix head(1, 2);
  head << 1.0, 0.0;
  CHECK(category_of([&] { arcface_logits(std::vector<double>{0.0, 0.0}, head, 8.0, 0.5, 0); }) ==
        ErrorCategory::degenerate_input);
  Matrix zero_head = Matrix::Zero(1, 2);
  CHECK(category_of([&] { arcface_logits(std::vector<double>{1.0, 0.0}, zero_head, 8.0, 0.5, 0); }) ==
        ErrorCategory::degenerate_input);
}

TEST_CASE("margin_cosine: target logit strictly decreases with the margin") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const double m1 = 3.0 * unif(rng);
    const double m2 = m1 + 1e-3 + (3.0 - m1) * unif(rng) * 0.5;
    if (m2 >= std::numbers::pi) continue;
    // theta in (0, pi - m2) so both margins stay on the cos(theta + m) branch
    const double theta = (std::numbers::pi - m2) * (0.01 + 0.98 * unif(rng));
    CHECK(margin_cosine(std::cos(theta), m2) < margin_cosine(std::cos(theta), m1));
  }
}

TEST_CASE("margin_cosine: fallback past pi") {
  const double theta = 2.9;
  const double m = 0.5;
  CHECK(margin_cosine(std::cos(theta), m) ==
        doctest::Approx(std::cos(theta) - m * std::sin(m)).epsilon(1e-14));
  CHECK(margin_cosine(0.25, 0.0) == 0.25);
}

TEST_CASE("masked_cross_entropy examples") {
  const std::vector<double> logits = {2.0, 1.0, 0.0};
  SUBCASE("single present class gives exactly zero") {
    CHECK(masked_cross_entropy(logits, 1, std::vector<int>{1}) == 0.0);
  }
  SUBCASE("no mask equals standard cross-entropy") {
    const double expected = -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(1.0) + 1.0));
    CHECK(masked_cross_entropy(logits, 0, std::vector<int>{0, 1, 2}) ==
          doctest::Approx(expected).epsilon(1e-14));
  }
  SUBCASE("two-class mask") {
    const double expected = -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(1.0)));
    const double loss = masked_cross_entropy(logits, 0, std::vector<int>{0, 1});
    CHECK(loss == doctest::Approx(expected).epsilon(1e-14));
    CHECK(loss == doctest::Approx(0.3133).epsilon(1e-4));
  }
  SUBCASE("masked target is rejected") {
    CHECK(category_of([&] { masked_cross_entropy(logits, 2, std::vector<int>{0, 1}); }) ==
          ErrorCategory::invalid_target);
  }
}

TEST_CASE("cosine_similarity examples and bounds") {
  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{1, 0}) == 1.0);
  CHECK(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
  CHECK(cosine_similarity(std::vector<double>{0.3, -2}, std::vector<double>{-0.3, 2}) == -1.0);
  CHECK(category_of([] { cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 0}); }) ==
        ErrorCategory::degenerate_input);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> a(5);
    std::vector<double> b(5);
    for (auto& x : a) x = normal(rng);
    const double k = std::exp(normal(rng));
    for (std::size_t i = 0; i < 5; ++i) b[i] = (t % 2 == 0) ? k * a[i] : normal(rng);
    const double c = cosine_similarity(a, b);
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
}

namespace {

struct Instance {
  ModelSpec spec;
  ParameterVector params;
  Batch batch;
};

Instance random_instance(Rng& rng, bool global_mask) {
  std::uniform_int_distribution<std::size_t> dim(2, 5);
  Instance in;
  in.spec = small_spec(dim(rng), {}, dim(rng), 3 + dim(rng) % 3);
  if (rng() % 2 == 0) in.spec.hidden_layers = {dim(rng)};
  in.spec.scale = 8.0;
  in.spec.margin = 0.5;
  in.params = init_parameters(in.spec, rng);
  std::normal_distribution<double> jitter(0.0, 0.3);
  for (double& v : in.params.values()) v += jitter(rng);
  const std::size_t n = 1 + rng() % 4;
  in.batch.inputs = random_matrix(n, in.spec.input_dim, rng);
  if (global_mask) {
    in.batch.present_classes = {0, static_cast<int>(in.spec.num_classes) - 1};
  } else {
    for (std::size_t c = 0; c < in.spec.num_classes; ++c) in.batch.present_classes.push_back(static_cast<int>(c));
  }
  for (std::size_t i = 0; i < n; ++i) {
    in.batch.labels.push_back(in.batch.present_classes[rng() % in.batch.present_classes.size()]);
  }
  return in;
}

// Away from ReLU kinks and the ArcFace branch switch / theta = 0.
bool well_conditioned(const Instance& in) {
  const auto ref = oracle::forward(in.spec, in.params.values(), in.batch.inputs);
  if (ref.min_abs_hidden_preactivation < 1e-3) return false;
  const std::size_t d = in.spec.embedding_dim;
  for (std::size_t i = 0; i < in.batch.size(); ++i) {
    const auto& e = ref.embeddings[i];
    if (std::sqrt(oracle::dot(e, e)) < 1e-3) return false;
    const auto label = static_cast<std::size_t>(in.batch.labels[i]);
    std::span<const double> row(in.params.head().data() + label * d, d);
    const double theta = std::acos(std::clamp(oracle::cosine(e, row), -1.0, 1.0));
    if (std::abs(theta + in.spec.margin - std::numbers::pi) < 1e-3) return false;
    if (std::sin(theta) < 1e-2) return false;
  }
  return true;
}

void check_gradient(const Objective& objective, const Instance& in) {
  const auto analytic = objective.gradient(in.params, in.batch);
  const auto numeric = finite_diff_gradient(objective, in.params, in.batch, 1e-5);
  REQUIRE(analytic.size() == numeric.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, oracle::relative_error(analytic[i], numeric[i]));
  }
  CHECK(worst < 1e-4);
}

}  // namespace

TEST_CASE("loss_gradient matches central finite differences") {
  Rng rng(2024);
  int checked = 0;
  for (int trial = 0; trial < 400 && checked < 60; ++trial) {
    const int kind = trial % 4;  // plain, arcface, masked, regularized
    auto in = random_instance(rng, kind == 2);
    if (!well_conditioned(in)) continue;
    LossConfig cfg;
    cfg.apply_margin = kind != 0;
    if (kind == 3) {
      auto ref = in.params;
      std::normal_distribution<double> shift(0.0, 0.5);
      for (double& v : ref.values()) v += shift(rng);
      cfg.reg_weight = 0.7;
      cfg.reference = std::make_shared<const ParameterVector>(ref);
      cfg.reduction = trial % 8 == 3 ? PenaltyReduction::sum : PenaltyReduction::mean;
    }
    CHECK(in.params.size() <= 200);
    check_gradient(ModelObjective(in.spec, cfg), in);
    ++checked;
  }
  CHECK(checked >= 50);
}

TEST_CASE("regularized loss with C = 0 has exactly the plain gradient") {
  Rng rng(31);
  auto in = random_instance(rng, false);
  LossConfig reg;
  reg.reg_weight = 0.0;
  reg.reference = std::make_shared<const ParameterVector>(init_parameters(in.spec, rng));
  CHECK(ModelObjective(in.spec, reg).gradient(in.params, in.batch) ==
        ModelObjective(in.spec, LossConfig{}).gradient(in.params, in.batch));
  CHECK(regularized_loss(in.spec, in.params, *reg.reference, in.batch, 0.0) ==
        base_loss(in.spec, in.params, in.batch));
}

TEST_CASE("regularized loss: identical models add nothing, orthogonal embeddings add C") {
  const auto spec = small_spec(2, {}, 2, 2);
  // local: identity map; global: 90 degree rotation, so embeddings are orthogonal.
  const ParameterVector local({1, 0, 0, 1, 0, 0, 1, 0.2, -0.3, 1}, 6);
  const ParameterVector global({0, -1, 1, 0, 0, 0, 1, 0.2, -0.3, 1}, 6);
  Batch batch;
  batch.inputs.resize(3, 2);
  batch.inputs << 1, 2, -0.5, 1, 3, -1;
  batch.labels = {0, 1, 0};
  batch.present_classes = {0, 1};
  const double base = base_loss(spec, local, batch);
  CHECK(regularized_loss(spec, local, local, batch, 5.0) == doctest::Approx(base).epsilon(1e-14));
  CHECK(regularized_loss(spec, local, global, batch, 1.0) == doctest::Approx(base + 1.0).epsilon(1e-12));
  CHECK(regularized_loss(spec, local, global, batch, 1.0, PenaltyReduction::sum) ==
        doctest::Approx(base + 3.0).epsilon(1e-12));
}

TEST_CASE("regularization penalty equals C (1 - mean cosine) and is non-negative") {
  Rng rng(77);
  for (int t = 0; t < 50; ++t) {
    auto in = random_instance(rng, false);
    const auto global = init_parameters(in.spec, rng);
    const double c = 0.1 + static_cast<double>(t) * 0.05;
    const auto el = oracle::forward(in.spec, in.params.values(), in.batch.inputs).embeddings;
    const auto eg = oracle::forward(in.spec, global.values(), in.batch.inputs).embeddings;
    // Dead ReLU layers can zero an embedding; that input is rejected, not scored.
    const auto degenerate = [](const auto& rows) {
      return std::any_of(rows.begin(), rows.end(), [](const auto& e) { return oracle::dot(e, e) == 0.0; });
    };
    if (degenerate(el) || degenerate(eg)) {
      CHECK_THROWS_AS(regularized_loss(in.spec, in.params, global, in.batch, c), Error);
      continue;
    }
    const double diff = regularized_loss(in.spec, in.params, global, in.batch, c) -
                        base_loss(in.spec, in.params, in.batch);
    double mean_cos = 0.0;
    for (std::size_t i = 0; i < el.size(); ++i) mean_cos += oracle::cosine(el[i], eg[i]) / static_cast<double>(el.size());
    CHECK(diff >= -1e-12);
    CHECK(diff == doctest::Approx(c * (1.0 - mean_cos)).epsilon(1e-9));
  }
}

TEST_CASE("mask soundness: absent head rows affect neither loss nor gradient") {
  Rng rng(41);
  for (int t = 0; t < 20; ++t) {
    auto in = random_instance(rng, true);
    const ModelObjective obj(in.spec, LossConfig{});
    const double loss = obj.loss(in.params, in.batch);
    const auto grad = obj.gradient(in.params, in.batch);
    auto perturbed = in.params;
    const std::size_t d = in.spec.embedding_dim;
    for (std::size_t c = 1; c + 1 < in.spec.num_classes; ++c) {
      for (std::size_t k = 0; k < d; ++k) perturbed.head()[c * d + k] += 0.37 * static_cast<double>(k + 1);
    }
    CHECK(obj.loss(perturbed, in.batch) == loss);
    const auto grad2 = obj.gradient(perturbed, in.batch);
    CHECK(grad2 == grad);
    for (std::size_t c = 1; c + 1 < in.spec.num_classes; ++c) {
      for (std::size_t k = 0; k < d; ++k) CHECK(grad[in.params.backbone_len() + c * d + k] == 0.0);
    }
  }
}

TEST_CASE("finite_diff_gradient on toy losses") {
  const oracle::Quadratic half_norm(Matrix::Identity(2, 2));
  const ParameterVector w({1.0, 2.0}, 2);
  const auto fd = finite_diff_gradient(half_norm, w, oracle::dummy_batch(), 1e-5);
  CHECK(fd[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fd[1] == doctest::Approx(2.0).epsilon(1e-9));

  // Central-difference error on a smooth non-quadratic loss shrinks ~4x per halving.
  const oracle::Quartic quartic;
  const ParameterVector q({0.7, -1.3, 2.1}, 3);
  const auto exact = quartic.gradient(q, oracle::dummy_batch());
  for (std::size_t i = 0; i < 3; ++i) {
    const double e1 = std::abs(finite_diff_gradient(quartic, q, oracle::dummy_batch(), 1e-2)[i] - exact[i]);
    const double e2 = std::abs(finite_diff_gradient(quartic, q, oracle::dummy_batch(), 5e-3)[i] - exact[i]);
    CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.05));
  }
  CHECK(category_of([&] { finite_diff_gradient(half_norm, w, oracle::dummy_batch(), 0.0); }) ==
        ErrorCategory::config);
}

TEST_CASE("gradient vanishes at the minimum of a separable toy loss") {
  const oracle::Quadratic q(Matrix::Identity(3, 3) * 2.0);
  const ParameterVector zero({0.0, 0.0, 0.0}, 3);
  for (double g : q.gradient(zero, oracle::dummy_batch())) CHECK(std::abs(g) <= 1e-10);
}

TEST_CASE("Batch validation rejects labels outside the present set") {
  const auto spec = small_spec(2, {}, 2, 3);
  Batch b;
  b.inputs = Matrix::Ones(1, 2);
  b.labels = {2};
  b.present_classes = {0, 1};
  CHECK(category_of([&] { b.validate(spec); }) == ErrorCategory::invalid_target);
}
