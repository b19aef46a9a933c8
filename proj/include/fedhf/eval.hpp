#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedhf/nn.hpp"
#include "fedhf/partitions.hpp"
#include "fedhf/rng.hpp"

namespace fedhf::eval {

struct LabeledSample {
  std::size_t row = 0;  // index into the caller's embedding matrix
  int identity = 0;
};

// Rows refer to the embedding matrix the samples were taken from.
struct VerificationPair {
  std::size_t a = 0;
  std::size_t b = 0;
  bool genuine = false;

  friend bool operator==(const VerificationPair&, const VerificationPair&) = default;
};

// ceil(n/2) genuine pairs from the client's own samples, floor(n/2) impostor
// pairs whose partner comes from own + other clients' samples.
std::vector<VerificationPair> sample_verification_pairs(std::span<const LabeledSample> own,
                                                        std::span<const LabeledSample> others,
                                                        std::size_t n_pairs, Rng& rng);

struct TarResult {
  double tar = 0.0;
  double threshold = 0.0;     // +inf when no finite score satisfies the budget
  double achieved_far = 0.0;
};

// Threshold = the smallest score (over both lists) whose impostor acceptance
// fraction is within far_target; returns the genuine acceptance at it.
TarResult tar_at_far_detailed(std::span<const double> genuine, std::span<const double> impostor,
                              double far_target);

inline double tar_at_far(std::span<const double> genuine, std::span<const double> impostor,
                         double far_target) {
  return tar_at_far_detailed(genuine, impostor, far_target).tar;
}

double mean(std::span<const double> values);
double stddev(std::span<const double> values, bool population = true);

struct EvalConfig {
  double far_target = 0.1;
  std::size_t pairs = 512;
  std::size_t repeats = 5;
  std::size_t tune_batches = 5;
  std::optional<double> tune_lr;        // training lr when unset
  std::optional<double> tune_momentum;  // training momentum when unset
  bool population_std = true;

  void validate() const;
};

enum class Cohort { train, holdout };
std::string_view to_string(Cohort cohort);
Cohort parse_cohort(std::string_view text);

enum class Split { val, test };

struct ClientScore {
  int client_id = 0;
  std::vector<double> repeats;
  double tar = 0.0;  // mean over repeats
};

struct EvaluationReport {
  Cohort cohort = Cohort::train;
  bool tuned = false;
  double far_target = 0.1;
  std::size_t pairs = 0;
  std::size_t num_repeats = 0;
  std::uint64_t seed = 0;
  bool population_std = true;
  std::vector<ClientScore> clients;  // ordered by client id
  double mean = 0.0;
  double std = 0.0;

  // Recomputes per-client means and the cohort aggregates.
  void recompute();
};

// Embeddings of the given table rows under the model a client evaluates with.
using Embedder =
    std::function<nn::Matrix(int client_id, std::span<const std::size_t> table_rows)>;

// TAR@FAR for one client averaged over `repeats` independent pair draws.
ClientScore evaluate_client(const Embedder& embed, int client_id,
                            const partitions::PartitionManifest& manifest,
                            const partitions::SampleTable& table, Split split,
                            const EvalConfig& config, std::size_t repeats, Rng& rng);

EvaluationReport evaluate_cohort(const Embedder& embed, std::span<const int> cohort_clients,
                                 const partitions::PartitionManifest& manifest,
                                 const partitions::SampleTable& table, Cohort cohort, bool tuned,
                                 const EvalConfig& config, std::uint64_t seed);

struct ClientDelta {
  int client_id = 0;
  double before = 0.0;
  double after = 0.0;
  std::optional<double> percent;  // empty when before == 0
};

struct DeltaReport {
  std::vector<ClientDelta> clients;
  int weakest_client = -1;  // lowest baseline score
  std::optional<double> weakest_improvement;
  int largest_improvement_client = -1;
};

DeltaReport per_client_delta_report(const EvaluationReport& before, const EvaluationReport& after);

}  // namespace fedhf::eval
