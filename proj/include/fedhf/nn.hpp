#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fedhf/rng.hpp"

namespace fedhf::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// MLP backbone (ReLU hidden layers, linear embedding layer) followed by an
// ArcFace head without bias.
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_layers;
  std::size_t embedding_dim = 512;
  std::size_t num_classes = 0;
  double scale = 8.0;
  double margin = 0.5;

  void validate() const;
  std::size_t backbone_size() const;
  std::size_t head_size() const { return num_classes * embedding_dim; }
  std::size_t parameter_count() const { return backbone_size() + head_size(); }
};

// Flat parameter storage. values()[0, backbone_len) is the backbone,
// the rest is the classification head.
class ParameterVector {
 public:
  ParameterVector() = default;
  ParameterVector(std::vector<double> values, std::size_t backbone_len);

  static ParameterVector concat(std::span<const double> backbone, std::span<const double> head);

  std::size_t size() const { return values_.size(); }
  std::size_t backbone_len() const { return backbone_len_; }
  std::size_t head_len() const { return values_.size() - backbone_len_; }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::span<const double> backbone() const { return values().first(backbone_len_); }
  std::span<double> backbone() { return values().first(backbone_len_); }
  std::span<const double> head() const { return values().subspan(backbone_len_); }
  std::span<double> head() { return values().subspan(backbone_len_); }

  const std::vector<double>& raw() const { return values_; }

  bool same_layout(const ParameterVector& other) const {
    return size() == other.size() && backbone_len_ == other.backbone_len_;
  }

  friend bool operator==(const ParameterVector&, const ParameterVector&) = default;

 private:
  std::vector<double> values_;
  std::size_t backbone_len_ = 0;
};

// He-normal hidden layers, Xavier embedding layer, zero biases, unit-norm head rows.
ParameterVector init_parameters(const ModelSpec& spec, Rng& rng);
std::vector<double> init_head(const ModelSpec& spec, Rng& rng);

struct Batch {
  Matrix inputs;
  std::vector<int> labels;
  std::vector<int> present_classes;  // sorted, unique

  std::size_t size() const { return labels.size(); }
  void validate(const ModelSpec& spec) const;
};

Matrix forward_embedding(const ModelSpec& spec, const ParameterVector& params,
                         const Matrix& inputs);

// Margin-adjusted target cosine cos(theta + m), with the cos(theta) - m*sin(m)
// fallback once theta + m passes pi.
double margin_cosine(double cos_theta, double margin);

// Inference mode when target is empty: s*cos(theta_j) for every class.
std::vector<double> arcface_logits(std::span<const double> embedding, const Matrix& head_weights,
                                   double scale, double margin,
                                   std::optional<int> target = std::nullopt);

// Softmax cross-entropy restricted to present classes; absent classes are
// dropped from the normaliser instead of being set to -inf.
double masked_cross_entropy(std::span<const double> logits, int target,
                            std::span<const int> present_classes);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

enum class PenaltyReduction { mean, sum };

struct LossConfig {
  bool apply_margin = true;
  // Weight C of the embedding-drift penalty C * (1 - cos(global, local)).
  double reg_weight = 0.0;
  // Frozen round-start model; no gradient flows into it.
  std::shared_ptr<const ParameterVector> reference;
  PenaltyReduction reduction = PenaltyReduction::mean;
};

// Differentiable scalar objective over a parameter vector and a batch.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual double loss(const ParameterVector& params, const Batch& batch) const = 0;
  virtual std::vector<double> gradient(const ParameterVector& params,
                                       const Batch& batch) const = 0;
};

class ModelObjective final : public Objective {
 public:
  ModelObjective(ModelSpec spec, LossConfig config);

  double loss(const ParameterVector& params, const Batch& batch) const override;
  std::vector<double> gradient(const ParameterVector& params, const Batch& batch) const override;

  const ModelSpec& spec() const { return spec_; }
  const LossConfig& config() const { return config_; }

 private:
  double evaluate(const ParameterVector& params, const Batch& batch,
                  std::vector<double>* grad) const;

  ModelSpec spec_;
  LossConfig config_;
};

// Batch-mean ArcFace + masked cross-entropy.
double base_loss(const ModelSpec& spec, const ParameterVector& params, const Batch& batch,
                 bool apply_margin = true);

double regularized_loss(const ModelSpec& spec, const ParameterVector& params,
                        const ParameterVector& global_params, const Batch& batch, double reg_weight,
                        PenaltyReduction reduction = PenaltyReduction::mean);

inline std::vector<double> loss_gradient(const Objective& objective,
                                         const ParameterVector& params, const Batch& batch) {
  return objective.gradient(params, batch);
}

// Central differences, one coordinate at a time. Test oracle.
std::vector<double> finite_diff_gradient(const Objective& objective, const ParameterVector& params,
                                         const Batch& batch, double step);

}  // namespace fedhf::nn
