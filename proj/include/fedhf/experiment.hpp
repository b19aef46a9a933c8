#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedhf/eval.hpp"
#include "fedhf/federation.hpp"
#include "fedhf/partitions.hpp"

namespace fedhf::experiment {

inline constexpr std::string_view kConfigSchema = "fedhf.experiment/1";
inline constexpr std::string_view kHistorySchema = "fedhf.history/1";
inline constexpr std::string_view kClientStateSchema = "fedhf.client_state/1";
inline constexpr std::string_view kRunRecordSchema = "fedhf.run/1";
inline constexpr std::string_view kReportSchema = "fedhf.report/1";
inline constexpr const char* kOutputDirEnv = "FEDHF_OUTPUT_DIR";

struct DatasetConfig {
  std::string table_path;  // pre-generated sample table; synthetic when empty
  partitions::SyntheticDatasetSpec synthetic;
};

struct PartitionConfig {
  partitions::Scheme scheme = partitions::Scheme::equal;
  std::size_t num_clients = 20;
  std::size_t num_holdout = 5;  // the last num_holdout client ids
  double mu = 3.0;
  double sigma = 3.0;
  std::size_t target_size = 0;
  partitions::SplitRatios ratios;
  std::vector<partitions::AttributeRule> rules;
};

struct ModelConfig {
  std::vector<std::size_t> hidden_layers;
  std::size_t embedding_dim = 512;
  double scale = 8.0;
  double margin = 0.5;
};

struct TrainingConfig {
  federation::Algorithm algorithm = federation::Algorithm::fedavg;
  federation::HeadMode head_mode = federation::HeadMode::local;
  std::size_t rounds = 30;
  std::size_t epochs = 50;
  std::size_t batches_per_epoch = 50;
  std::size_t batch_size = 64;
  double reg_weight = 0.0;
  nn::PenaltyReduction penalty_reduction = nn::PenaltyReduction::mean;
  federation::FailureMode failure_mode = federation::FailureMode::strict;
  std::size_t threads = 1;
  bool track_validation = true;
  std::size_t validation_pairs = 256;
  std::size_t validation_repeats = 1;
  metaopt::OptimizerConfig optimizer;
};

struct ExperimentConfig {
  std::string profile = "desk";
  std::uint64_t seed = 1;
  std::size_t num_seeds = 10;
  std::size_t jobs = 1;  // seeds trained concurrently
  std::string output_dir = "fedhf-out";
  DatasetConfig dataset;
  PartitionConfig partition;
  ModelConfig model;
  TrainingConfig training;
  eval::EvalConfig evaluation;

  void validate() const;
};

// "desk": 20 clients / 150 identities / 64-d features / 32-d embeddings, 10
// rounds of 5 epochs. "paper": 1,500 identities, 1000 -> 512 embedding
// layer, 30 rounds of 50 epochs.
ExperimentConfig profile_defaults(std::string_view profile);
std::vector<partitions::AttributeRule> default_attribute_rules();
std::vector<std::string> default_attribute_names();

// Profile defaults overlaid with the document's fields (JSON merge patch);
// unknown fields and out-of-range values are rejected.
ExperimentConfig parse_config(std::string_view text,
                              std::optional<std::string> profile_override = std::nullopt);
ExperimentConfig load_config(const std::filesystem::path& path,
                             std::optional<std::string> profile_override = std::nullopt);
std::string serialize_config(const ExperimentConfig& config);
// Hash over the result-relevant fields (output_dir, jobs and threads excluded).
std::string config_hash(const ExperimentConfig& config);

struct PartitionArtifacts {
  partitions::SampleTable table;
  partitions::PartitionManifest manifest;
};

PartitionArtifacts build_partition(const ExperimentConfig& config);

// Reads a manifest and the table it references, checking the recorded hash.
PartitionArtifacts load_partition(const std::filesystem::path& manifest_path);

federation::FederationConfig resolve_federation(const ExperimentConfig& config,
                                                const partitions::PartitionManifest& manifest,
                                                const partitions::SampleTable& table,
                                                std::uint64_t seed);

struct CohortReports {
  eval::EvaluationReport untuned_train;
  eval::EvaluationReport untuned_holdout;
  eval::EvaluationReport tuned_train;
  eval::EvaluationReport tuned_holdout;
};

CohortReports evaluate_run(const ExperimentConfig& config,
                           const partitions::PartitionManifest& manifest,
                           const partitions::SampleTable& table,
                           const federation::FederationConfig& fed,
                           const nn::ParameterVector& server,
                           const std::map<int, std::vector<double>>& local_heads,
                           std::uint64_t seed);

std::vector<std::uint64_t> sweep_seeds(const ExperimentConfig& config);

// File-level pipeline behind the CLI subcommands.
struct PartitionFiles {
  std::filesystem::path table;
  std::filesystem::path manifest;
  std::filesystem::path summary;
};

PartitionFiles cmd_partition(const ExperimentConfig& config, const std::filesystem::path& out_dir);

// Returns one run_record.json path per seed.
std::vector<std::filesystem::path> cmd_train(const ExperimentConfig& config,
                                             const std::filesystem::path& manifest_path,
                                             const std::filesystem::path& out_dir, bool force);

// Writes report.json and report_plot.tsv next to the run record.
std::filesystem::path cmd_evaluate(const std::filesystem::path& run_record_path);

struct ReportFiles {
  std::filesystem::path markdown;
  std::filesystem::path table;
  std::filesystem::path per_client;
};

ReportFiles cmd_report(std::span<const std::filesystem::path> reports,
                       const std::filesystem::path& out_dir);

std::string variant_label(federation::Algorithm algorithm, federation::HeadMode mode,
                          double reg_weight);

// Loaded form of one report.json, as used by cmd_report.
struct StoredReport {
  std::string variant;
  std::string config_hash;
  std::uint64_t seed = 0;
  double far_target = 0.0;
  std::vector<eval::EvaluationReport> cohorts;
};

StoredReport read_report(const std::filesystem::path& path);
std::string serialize_report(const CohortReports& reports, const std::string& variant,
                             const std::string& config_hash, std::uint64_t seed);

}  // namespace fedhf::experiment
