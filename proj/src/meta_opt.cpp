#include "fedhf/meta_opt.hpp"

#include <algorithm>
#include <numeric>

#include "fedhf/error.hpp"

namespace fedhf::metaopt {

void OptimizerConfig::validate() const {
  require(lr > 0.0, ErrorCategory::config, "optimizer.lr must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, ErrorCategory::config,
          "optimizer.momentum must lie in [0, 1)");
  require(alpha > 0.0 || (allow_zero_alpha && alpha == 0.0), ErrorCategory::config,
          "optimizer.alpha must be > 0");
  require(beta > 0.0, ErrorCategory::config, "optimizer.beta must be > 0");
  require(delta > 0.0, ErrorCategory::config, "optimizer.delta must be > 0");
}

void sgd_step(nn::ParameterVector& params, std::span<const double> grad, MomentumState& state,
              double lr, double momentum) {
  require(grad.size() == params.size() && state.velocity.size() == params.size(),
          ErrorCategory::config, "sgd_step: parameter, gradient and velocity shapes differ");
  auto w = params.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    state.velocity[i] = momentum * state.velocity[i] + grad[i];
    w[i] -= lr * state.velocity[i];
  }
}

nn::ParameterVector inner_adapt(const nn::Objective& objective, const nn::ParameterVector& params,
                                const nn::Batch& batch, double alpha) {
  require(alpha >= 0.0, ErrorCategory::config, "inner step alpha must be >= 0");
  const auto grad = objective.gradient(params, batch);
  nn::ParameterVector adapted = params;
  auto w = adapted.values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= alpha * grad[i];
  return adapted;
}

std::vector<double> hvp_approx(const nn::Objective& objective, const nn::ParameterVector& params,
                               std::span<const double> direction, const nn::Batch& batch,
                               double delta) {
  require(delta > 0.0, ErrorCategory::config, "hvp delta must be > 0");
  require(direction.size() == params.size(), ErrorCategory::config,
          "hvp direction shape differs from parameters");
  nn::ParameterVector plus = params;
  nn::ParameterVector minus = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    plus.values()[i] += delta * direction[i];
    minus.values()[i] -= delta * direction[i];
  }
  const auto g_plus = objective.gradient(plus, batch);
  const auto g_minus = objective.gradient(minus, batch);
  std::vector<double> out(params.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (g_plus[i] - g_minus[i]) / (2.0 * delta);
  return out;
}

std::vector<double> hf_maml_direction(const nn::Objective& objective,
                                      const nn::ParameterVector& params, const nn::Batch& support,
                                      const nn::Batch& query, const nn::Batch& curvature,
                                      const OptimizerConfig& config) {
  const auto adapted = inner_adapt(objective, params, support, config.alpha);
  auto direction = objective.gradient(adapted, query);
  const auto curvature_term = hvp_approx(objective, params, direction, curvature, config.delta);
  for (std::size_t i = 0; i < direction.size(); ++i) {
    direction[i] -= config.alpha * curvature_term[i];
  }
  return direction;
}

nn::ParameterVector hf_maml_step(const nn::Objective& objective, const nn::ParameterVector& params,
                                 const nn::Batch& support, const nn::Batch& query,
                                 const nn::Batch& curvature, const OptimizerConfig& config) {
  const auto direction = hf_maml_direction(objective, params, support, query, curvature, config);
  nn::ParameterVector next = params;
  auto w = next.values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= config.beta * direction[i];
  return next;
}

std::vector<std::size_t> draw_batch(std::size_t population, std::size_t batch_size, Rng& rng) {
  require(population > 0, ErrorCategory::empty_client, "cannot sample from an empty client");
  require(batch_size > 0, ErrorCategory::config, "batch_size must be >= 1");
  std::vector<std::size_t> picks;
  picks.reserve(batch_size);
  if (population >= batch_size) {
    // Partial Fisher-Yates over the index range.
    std::vector<std::size_t> pool(population);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < batch_size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, population - 1);
      std::swap(pool[i], pool[pick(rng)]);
      picks.push_back(pool[i]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, population - 1);
    for (std::size_t i = 0; i < batch_size; ++i) picks.push_back(pick(rng));
  }
  return picks;
}

std::array<std::vector<std::size_t>, 3> draw_triple(std::size_t population,
                                                    std::size_t batch_size, Rng& rng) {
  std::array<std::vector<std::size_t>, 3> triple;
  if (population >= 3 * batch_size) {
    auto joint = draw_batch(population, 3 * batch_size, rng);
    for (std::size_t k = 0; k < 3; ++k) {
      triple[k].assign(joint.begin() + static_cast<std::ptrdiff_t>(k * batch_size),
                       joint.begin() + static_cast<std::ptrdiff_t>((k + 1) * batch_size));
    }
  } else {
    require(population > 0, ErrorCategory::empty_client, "cannot sample from an empty client");
    std::uniform_int_distribution<std::size_t> pick(0, population - 1);
    for (auto& batch : triple) {
      batch.resize(batch_size);
      for (auto& p : batch) p = pick(rng);
    }
  }
  return triple;
}

nn::ParameterVector local_train_fedavg(const nn::Objective& objective, nn::ParameterVector params,
                                       const BatchSource& data, Rng& rng, std::size_t epochs,
                                       std::size_t batches_per_epoch, std::size_t batch_size,
                                       const OptimizerConfig& config) {
  require(data.size() > 0, ErrorCategory::empty_client, "client has no training samples");
  MomentumState state(params.size());
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const auto batch = data.make_batch(draw_batch(data.size(), batch_size, rng));
      const auto grad = objective.gradient(params, batch);
      sgd_step(params, grad, state, config.lr, config.momentum);
    }
  }
  return params;
}

nn::ParameterVector local_train_hfmaml(const nn::Objective& objective, nn::ParameterVector params,
                                       const BatchSource& data, Rng& rng, std::size_t epochs,
                                       std::size_t batch_size, const OptimizerConfig& config,
                                       const TripleUpdate& update) {
  require(data.size() > 0, ErrorCategory::empty_client, "client has no training samples");
  MomentumState state(params.size());
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto picks = draw_triple(data.size(), batch_size, rng);
    const auto support = data.make_batch(picks[0]);
    const auto query = data.make_batch(picks[1]);
    const auto curvature = data.make_batch(picks[2]);
    if (update) {
      params = update(objective, params, support, query, curvature, config);
    } else if (config.maml_momentum) {
      const auto direction =
          hf_maml_direction(objective, params, support, query, curvature, config);
      sgd_step(params, direction, state, config.beta, config.momentum);
    } else {
      params = hf_maml_step(objective, params, support, query, curvature, config);
    }
  }
  return params;
}

}  // namespace fedhf::metaopt
