#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fedhf/nn.hpp"
#include "fedhf/rng.hpp"

namespace fedhf::metaopt {

struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double alpha = 0.01;  // inner adaptation step
  double beta = 0.1;    // outer (meta) step
  double delta = 0.001; // finite-difference radius of the Hessian-vector product
  // Route the HF-MAML meta-gradient through momentum SGD instead of the bare update.
  bool maml_momentum = false;
  // Accept alpha == 0, the degenerate plain-SGD case; for reduction checks
  // only, never read from experiment configs.
  bool allow_zero_alpha = false;

  void validate() const;
};

struct MomentumState {
  std::vector<double> velocity;

  MomentumState() = default;
  explicit MomentumState(std::size_t size) : velocity(size, 0.0) {}
};

// velocity <- momentum * velocity + grad; params <- params - lr * velocity.
void sgd_step(nn::ParameterVector& params, std::span<const double> grad, MomentumState& state,
              double lr, double momentum);

// w - alpha * grad f(w, batch).
nn::ParameterVector inner_adapt(const nn::Objective& objective, const nn::ParameterVector& params,
                                const nn::Batch& batch, double alpha);

// [grad f(w + delta*v) - grad f(w - delta*v)] / (2 delta) ~ H(w) v.
std::vector<double> hvp_approx(const nn::Objective& objective, const nn::ParameterVector& params,
                               std::span<const double> direction, const nn::Batch& batch,
                               double delta);

// g' - alpha * H(w, D'') g' with g' = grad f(w - alpha grad f(w, D), D').
std::vector<double> hf_maml_direction(const nn::Objective& objective,
                                      const nn::ParameterVector& params, const nn::Batch& support,
                                      const nn::Batch& query, const nn::Batch& curvature,
                                      const OptimizerConfig& config);

nn::ParameterVector hf_maml_step(const nn::Objective& objective, const nn::ParameterVector& params,
                                 const nn::Batch& support, const nn::Batch& query,
                                 const nn::Batch& curvature, const OptimizerConfig& config);

// A client's training set, addressed by position.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::size_t size() const = 0;
  virtual nn::Batch make_batch(std::span<const std::size_t> positions) const = 0;
};

// Uniform without replacement when the set holds at least batch_size samples,
// otherwise with replacement.
std::vector<std::size_t> draw_batch(std::size_t population, std::size_t batch_size, Rng& rng);

// Three batches for one HF-MAML step; mutually disjoint when the population
// holds at least 3 * batch_size samples, otherwise drawn with replacement.
std::array<std::vector<std::size_t>, 3> draw_triple(std::size_t population,
                                                    std::size_t batch_size, Rng& rng);

nn::ParameterVector local_train_fedavg(const nn::Objective& objective, nn::ParameterVector params,
                                       const BatchSource& data, Rng& rng, std::size_t epochs,
                                       std::size_t batches_per_epoch, std::size_t batch_size,
                                       const OptimizerConfig& config);

// Update applied to each epoch's (D, D', D'') triple; hf_maml_step by default.
using TripleUpdate = std::function<nn::ParameterVector(
    const nn::Objective&, const nn::ParameterVector&, const nn::Batch&, const nn::Batch&,
    const nn::Batch&, const OptimizerConfig&)>;

nn::ParameterVector local_train_hfmaml(const nn::Objective& objective, nn::ParameterVector params,
                                       const BatchSource& data, Rng& rng, std::size_t epochs,
                                       std::size_t batch_size, const OptimizerConfig& config,
                                       const TripleUpdate& update = {});

}  // namespace fedhf::metaopt
