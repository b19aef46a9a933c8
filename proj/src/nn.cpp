#include "fedhf/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fedhf/error.hpp"

namespace fedhf::nn {

namespace {

using ConstMatrixMap = Eigen::Map<const Matrix>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;

struct LayerShape {
  std::size_t in;
  std::size_t out;
  std::size_t weight_offset;
  std::size_t bias_offset;
};

std::vector<LayerShape> layer_shapes(const ModelSpec& spec) {
  std::vector<LayerShape> shapes;
  std::size_t in = spec.input_dim;
  std::size_t offset = 0;
  auto add = [&](std::size_t out) {
    shapes.push_back({in, out, offset, offset + in * out});
    offset += in * out + out;
    in = out;
  };
  for (std::size_t width : spec.hidden_layers) add(width);
  add(spec.embedding_dim);
  return shapes;
}

double norm(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) sum += x * x;
  return std::sqrt(sum);
}

// d/dc of margin_cosine.
double margin_cosine_derivative(double cos_theta, double margin) {
  if (margin == 0.0) return 1.0;
  const double c = std::clamp(cos_theta, -1.0, 1.0);
  const double theta = std::acos(c);
  if (theta + margin > std::numbers::pi) return 1.0;
  const double sin_theta = std::max(std::sqrt(std::max(0.0, 1.0 - c * c)), 1e-12);
  return std::cos(margin) + std::sin(margin) * c / sin_theta;
}

struct ForwardCache {
  std::vector<Matrix> activations;  // input to each layer
  std::vector<Matrix> pre;          // pre-activation of each layer
};

Matrix forward_cached(const ModelSpec& spec, const ParameterVector& params, const Matrix& inputs,
                      ForwardCache* cache) {
  require(static_cast<std::size_t>(inputs.cols()) == spec.input_dim, ErrorCategory::config,
          "input width " + std::to_string(inputs.cols()) + " does not match model input_dim " +
              std::to_string(spec.input_dim));
  require(params.backbone_len() == spec.backbone_size() && params.size() >= spec.backbone_size(),
          ErrorCategory::config, "parameter vector layout does not match model spec");
  const auto shapes = layer_shapes(spec);
  const double* data = params.values().data();
  Matrix current = inputs;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& s = shapes[l];
    ConstMatrixMap weights(data + s.weight_offset, static_cast<Eigen::Index>(s.out),
                           static_cast<Eigen::Index>(s.in));
    ConstVectorMap bias(data + s.bias_offset, static_cast<Eigen::Index>(s.out));
    Matrix z = current * weights.transpose();
    z.rowwise() += bias.transpose();
    if (cache) {
      cache->activations.push_back(current);
      cache->pre.push_back(z);
    }
    if (l + 1 < shapes.size()) {
      current = z.cwiseMax(0.0);
    } else {
      current = std::move(z);
    }
  }
  return current;
}

void backward(const ModelSpec& spec, const ParameterVector& params, const ForwardCache& cache,
              Matrix grad_embedding, std::span<double> grad) {
  const auto shapes = layer_shapes(spec);
  const double* data = params.values().data();
  Matrix delta = std::move(grad_embedding);
  for (std::size_t l = shapes.size(); l-- > 0;) {
    const auto& s = shapes[l];
    MatrixMap grad_w(grad.data() + s.weight_offset, static_cast<Eigen::Index>(s.out),
                     static_cast<Eigen::Index>(s.in));
    VectorMap grad_b(grad.data() + s.bias_offset, static_cast<Eigen::Index>(s.out));
    grad_w.noalias() += delta.transpose() * cache.activations[l];
    grad_b += delta.colwise().sum().transpose();
    if (l == 0) break;
    ConstMatrixMap weights(data + s.weight_offset, static_cast<Eigen::Index>(s.out),
                           static_cast<Eigen::Index>(s.in));
    Matrix upstream = delta * weights;
    const Matrix& z = cache.pre[l - 1];
    delta = upstream.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
  }
}

}  // namespace

void ModelSpec::validate() const {
  require(input_dim >= 1, ErrorCategory::config, "input_dim must be >= 1");
  require(embedding_dim >= 1, ErrorCategory::config, "embedding_dim must be >= 1");
  require(num_classes >= 1, ErrorCategory::config, "num_classes must be >= 1");
  for (std::size_t w : hidden_layers) {
    require(w >= 1, ErrorCategory::config, "hidden layer widths must be >= 1");
  }
  require(scale > 0.0, ErrorCategory::config, "arcface scale must be > 0");
  require(margin >= 0.0 && margin < std::numbers::pi, ErrorCategory::config,
          "arcface margin must lie in [0, pi)");
}

std::size_t ModelSpec::backbone_size() const {
  std::size_t total = 0;
  std::size_t in = input_dim;
  for (std::size_t w : hidden_layers) {
    total += in * w + w;
    in = w;
  }
  return total + in * embedding_dim + embedding_dim;
}

ParameterVector::ParameterVector(std::vector<double> values, std::size_t backbone_len)
    : values_(std::move(values)), backbone_len_(backbone_len) {
  require(backbone_len_ <= values_.size(), ErrorCategory::config,
          "backbone_len exceeds parameter count");
}

ParameterVector ParameterVector::concat(std::span<const double> backbone,
                                        std::span<const double> head) {
  std::vector<double> values;
  values.reserve(backbone.size() + head.size());
  values.insert(values.end(), backbone.begin(), backbone.end());
  values.insert(values.end(), head.begin(), head.end());
  return ParameterVector(std::move(values), backbone.size());
}

std::vector<double> init_head(const ModelSpec& spec, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> head(spec.head_size());
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    std::span<double> row(head.data() + c * spec.embedding_dim, spec.embedding_dim);
    double n = 0.0;
    while (n == 0.0) {
      for (double& x : row) x = normal(rng);
      n = norm(row);
    }
    for (double& x : row) x /= n;
  }
  return head;
}

ParameterVector init_parameters(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<double> values(spec.backbone_size(), 0.0);
  const auto shapes = layer_shapes(spec);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& s = shapes[l];
    const bool last = l + 1 == shapes.size();
    const double stddev = last ? std::sqrt(2.0 / static_cast<double>(s.in + s.out))
                               : std::sqrt(2.0 / static_cast<double>(s.in));
    std::normal_distribution<double> normal(0.0, stddev);
    for (std::size_t i = 0; i < s.in * s.out; ++i) values[s.weight_offset + i] = normal(rng);
  }
  const auto head = init_head(spec, rng);
  values.insert(values.end(), head.begin(), head.end());
  return ParameterVector(std::move(values), spec.backbone_size());
}

void Batch::validate(const ModelSpec& spec) const {
  require(!labels.empty(), ErrorCategory::config, "batch must contain at least one sample");
  require(static_cast<std::size_t>(inputs.rows()) == labels.size(), ErrorCategory::config,
          "batch inputs and labels disagree in length");
  require(std::is_sorted(present_classes.begin(), present_classes.end()), ErrorCategory::config,
          "present_classes must be sorted");
  for (int c : present_classes) {
    require(c >= 0 && static_cast<std::size_t>(c) < spec.num_classes, ErrorCategory::config,
            "present class " + std::to_string(c) + " outside head range");
  }
  for (int label : labels) {
    require(std::binary_search(present_classes.begin(), present_classes.end(), label),
            ErrorCategory::invalid_target,
            "label " + std::to_string(label) + " is not among the present classes");
  }
}

Matrix forward_embedding(const ModelSpec& spec, const ParameterVector& params,
                         const Matrix& inputs) {
  return forward_cached(spec, params, inputs, nullptr);
}

double margin_cosine(double cos_theta, double margin) {
  if (margin == 0.0) return cos_theta;
  const double c = std::clamp(cos_theta, -1.0, 1.0);
  const double theta = std::acos(c);
  if (theta + margin > std::numbers::pi) return c - margin * std::sin(margin);
  return std::cos(theta + margin);
}

std::vector<double> arcface_logits(std::span<const double> embedding, const Matrix& head_weights,
                                   double scale, double margin, std::optional<int> target) {
  require(static_cast<std::size_t>(head_weights.cols()) == embedding.size(), ErrorCategory::config,
          "head width does not match embedding dimension");
  const double ne = norm(embedding);
  require(ne > 0.0, ErrorCategory::degenerate_input, "zero-norm embedding");
  ConstVectorMap e(embedding.data(), static_cast<Eigen::Index>(embedding.size()));
  std::vector<double> logits(static_cast<std::size_t>(head_weights.rows()));
  for (Eigen::Index j = 0; j < head_weights.rows(); ++j) {
    const double nw = head_weights.row(j).norm();
    require(nw > 0.0, ErrorCategory::degenerate_input,
            "zero-norm head row " + std::to_string(j));
    double c = std::clamp(head_weights.row(j).dot(e) / (ne * nw), -1.0, 1.0);
    if (target && *target == j) c = margin_cosine(c, margin);
    logits[static_cast<std::size_t>(j)] = scale * c;
  }
  if (target) {
    require(*target >= 0 && *target < head_weights.rows(), ErrorCategory::invalid_target,
            "target class outside head range");
  }
  return logits;
}

double masked_cross_entropy(std::span<const double> logits, int target,
                            std::span<const int> present_classes) {
  require(std::find(present_classes.begin(), present_classes.end(), target) !=
              present_classes.end(),
          ErrorCategory::invalid_target, "target class is masked out");
  double peak = -std::numeric_limits<double>::infinity();
  for (int c : present_classes) {
    require(c >= 0 && static_cast<std::size_t>(c) < logits.size(), ErrorCategory::config,
            "present class outside logit range");
    peak = std::max(peak, logits[static_cast<std::size_t>(c)]);
  }
  double sum = 0.0;
  for (int c : present_classes) sum += std::exp(logits[static_cast<std::size_t>(c)] - peak);
  return peak + std::log(sum) - logits[static_cast<std::size_t>(target)];
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCategory::config, "cosine of vectors with unequal length");
  const double na = norm(a);
  const double nb = norm(b);
  require(na > 0.0 && nb > 0.0, ErrorCategory::degenerate_input, "cosine of a zero vector");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

ModelObjective::ModelObjective(ModelSpec spec, LossConfig config)
    : spec_(std::move(spec)), config_(std::move(config)) {
  spec_.validate();
  require(config_.reg_weight >= 0.0, ErrorCategory::config, "regularization weight must be >= 0");
  if (config_.reg_weight > 0.0) {
    require(config_.reference != nullptr, ErrorCategory::config,
            "regularized loss needs a reference model");
  }
}

double ModelObjective::loss(const ParameterVector& params, const Batch& batch) const {
  return evaluate(params, batch, nullptr);
}

std::vector<double> ModelObjective::gradient(const ParameterVector& params,
                                             const Batch& batch) const {
  std::vector<double> grad(params.size(), 0.0);
  evaluate(params, batch, &grad);
  return grad;
}

double ModelObjective::evaluate(const ParameterVector& params, const Batch& batch,
                                std::vector<double>* grad) const {
  require(params.size() == spec_.parameter_count() &&
              params.backbone_len() == spec_.backbone_size(),
          ErrorCategory::config, "parameter vector layout does not match model spec");
  batch.validate(spec_);

  ForwardCache cache;
  const Matrix embeddings = forward_cached(spec_, params, batch.inputs, grad ? &cache : nullptr);
  const std::size_t batch_size = batch.size();
  const std::size_t dim = spec_.embedding_dim;
  const double inv_batch = 1.0 / static_cast<double>(batch_size);
  const double* head = params.values().data() + params.backbone_len();
  const double margin = config_.apply_margin ? spec_.margin : 0.0;

  // Present-class head rows, normalised once per call.
  const auto& present = batch.present_classes;
  Matrix unit_rows(static_cast<Eigen::Index>(present.size()), static_cast<Eigen::Index>(dim));
  std::vector<double> row_norms(present.size());
  for (std::size_t k = 0; k < present.size(); ++k) {
    ConstVectorMap row(head + static_cast<std::size_t>(present[k]) * dim,
                       static_cast<Eigen::Index>(dim));
    row_norms[k] = row.norm();
    require(row_norms[k] > 0.0, ErrorCategory::degenerate_input,
            "zero-norm head row " + std::to_string(present[k]));
    unit_rows.row(static_cast<Eigen::Index>(k)) = row.transpose() / row_norms[k];
  }

  Matrix grad_embedding;
  if (grad) {
    grad_embedding = Matrix::Zero(embeddings.rows(), embeddings.cols());
  }
  std::vector<double> grad_head_rows(grad ? present.size() * dim : 0, 0.0);

  double total = 0.0;
  std::vector<double> logits(present.size());
  std::vector<double> cosines(present.size());
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto e = embeddings.row(static_cast<Eigen::Index>(i));
    const double ne = e.norm();
    require(ne > 0.0, ErrorCategory::degenerate_input, "zero-norm embedding");
    const Eigen::RowVectorXd unit_e = e / ne;
    const int label = batch.labels[i];
    std::size_t target_slot = 0;
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < present.size(); ++k) {
      cosines[k] = std::clamp(unit_rows.row(static_cast<Eigen::Index>(k)).dot(unit_e), -1.0, 1.0);
      double c = cosines[k];
      if (present[k] == label) {
        target_slot = k;
        c = margin_cosine(c, margin);
      }
      logits[k] = spec_.scale * c;
      peak = std::max(peak, logits[k]);
    }
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - peak);
    const double lse = peak + std::log(sum);
    total += (lse - logits[target_slot]) * inv_batch;

    if (grad) {
      Eigen::RowVectorXd ge = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(dim));
      for (std::size_t k = 0; k < present.size(); ++k) {
        double dlogit = std::exp(logits[k] - lse);
        if (k == target_slot) dlogit -= 1.0;
        double dcos = spec_.scale * dlogit * inv_batch;
        if (k == target_slot) dcos *= margin_cosine_derivative(cosines[k], margin);
        if (dcos == 0.0) continue;
        const auto u = unit_rows.row(static_cast<Eigen::Index>(k));
        ge += dcos * (u - cosines[k] * unit_e) / ne;
        std::span<double> gh(grad_head_rows.data() + k * dim, dim);
        const double scale_w = dcos / row_norms[k];
        for (std::size_t d = 0; d < dim; ++d) {
          gh[d] += scale_w * (unit_e[static_cast<Eigen::Index>(d)] -
                              cosines[k] * u[static_cast<Eigen::Index>(d)]);
        }
      }
      grad_embedding.row(static_cast<Eigen::Index>(i)) += ge;
    }
  }

  if (config_.reg_weight > 0.0) {
    const auto& reference = *config_.reference;
    require(reference.same_layout(params), ErrorCategory::config,
            "reference model layout differs from the trained model");
    const Matrix anchors = forward_embedding(spec_, reference, batch.inputs);
    const double weight =
        config_.reduction == PenaltyReduction::mean ? inv_batch : 1.0;
    double penalty = 0.0;
    for (std::size_t i = 0; i < batch_size; ++i) {
      const auto idx = static_cast<Eigen::Index>(i);
      const auto e = embeddings.row(idx);
      const auto g = anchors.row(idx);
      const double ne = e.norm();
      const double ng = g.norm();
      require(ne > 0.0 && ng > 0.0, ErrorCategory::degenerate_input,
              "zero-norm embedding in regularization term");
      const double cs = std::clamp(e.dot(g) / (ne * ng), -1.0, 1.0);
      penalty += weight * (1.0 - cs);
      if (grad) {
        const Eigen::RowVectorXd unit_e = e / ne;
        grad_embedding.row(idx) -=
            config_.reg_weight * weight * (g / ng - cs * unit_e) / ne;
      }
    }
    total += config_.reg_weight * penalty;
  }

  if (grad) {
    std::span<double> g(*grad);
    backward(spec_, params, cache, std::move(grad_embedding), g);
    for (std::size_t k = 0; k < present.size(); ++k) {
      double* dst = g.data() + params.backbone_len() + static_cast<std::size_t>(present[k]) * dim;
      for (std::size_t d = 0; d < dim; ++d) dst[d] += grad_head_rows[k * dim + d];
    }
  }
  return total;
}

double base_loss(const ModelSpec& spec, const ParameterVector& params, const Batch& batch,
                 bool apply_margin) {
  LossConfig config;
  config.apply_margin = apply_margin;
  return ModelObjective(spec, std::move(config)).loss(params, batch);
}

double regularized_loss(const ModelSpec& spec, const ParameterVector& params,
                        const ParameterVector& global_params, const Batch& batch,
                        double reg_weight, PenaltyReduction reduction) {
  require(global_params.same_layout(params), ErrorCategory::config,
          "global model layout differs from the local model");
  require(reg_weight >= 0.0, ErrorCategory::config, "regularization weight must be >= 0");
  LossConfig config;
  config.reg_weight = reg_weight;
  config.reference = std::make_shared<const ParameterVector>(global_params);
  config.reduction = reduction;
  return ModelObjective(spec, std::move(config)).loss(params, batch);
}

std::vector<double> finite_diff_gradient(const Objective& objective, const ParameterVector& params,
                                         const Batch& batch, double step) {
  require(step > 0.0, ErrorCategory::config, "finite-difference step must be > 0");
  std::vector<double> grad(params.size());
  ParameterVector probe = params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double original = probe.values()[i];
    probe.values()[i] = original + step;
    const double up = objective.loss(probe, batch);
    probe.values()[i] = original - step;
    const double down = objective.loss(probe, batch);
    probe.values()[i] = original;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace fedhf::nn
