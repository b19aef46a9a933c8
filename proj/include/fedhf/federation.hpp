#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fedhf/eval.hpp"
#include "fedhf/meta_opt.hpp"
#include "fedhf/nn.hpp"
#include "fedhf/partitions.hpp"

namespace fedhf::federation {

enum class Algorithm { fedavg, hf_maml };
enum class HeadMode { global, local };
enum class FailureMode { strict, lenient };

std::string_view to_string(Algorithm algorithm);
std::string_view to_string(HeadMode mode);
std::string_view to_string(FailureMode mode);
Algorithm parse_algorithm(std::string_view text);
HeadMode parse_head_mode(std::string_view text);
FailureMode parse_failure_mode(std::string_view text);

struct FederationConfig {
  std::vector<int> train_clients;
  std::vector<int> holdout_clients;
  std::size_t rounds = 30;
  Algorithm algorithm = Algorithm::fedavg;
  HeadMode head_mode = HeadMode::local;
  double reg_weight = 0.0;  // C
  nn::PenaltyReduction penalty_reduction = nn::PenaltyReduction::mean;
  metaopt::OptimizerConfig optimizer;
  std::size_t epochs = 50;
  std::size_t batches_per_epoch = 50;  // FedAvg only
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  FailureMode failure_mode = FailureMode::strict;
  std::size_t threads = 1;
  // Backbone and ArcFace settings; num_classes is resolved per client.
  nn::ModelSpec model;
  // Per-round validation on the val split (untuned server backbone).
  bool track_validation = true;
  eval::EvalConfig validation;

  void validate(std::size_t num_clients) const;
};

// Everything one simulated client holds locally.
class Client {
 public:
  Client(const partitions::ClientPartition& partition, const partitions::SampleTable& table,
         const nn::ModelSpec& model, HeadMode mode, std::size_t identity_universe);

  int id() const { return partition_->client_id; }
  const partitions::ClientPartition& partition() const { return *partition_; }
  const nn::ModelSpec& spec() const { return spec_; }
  std::size_t train_size() const { return partition_->train.size(); }
  // Head classes this client owns (global ids in global mode, 0..n-1 in local mode).
  const std::vector<int>& present_classes() const { return present_; }
  int class_of(int identity) const;

  nn::Batch make_batch(std::span<const std::size_t> table_rows) const;
  // Raw feature rows; unlike make_batch, rows may belong to any client.
  nn::Matrix features(std::span<const std::size_t> table_rows) const;

  std::optional<std::vector<double>> local_head;

 private:
  const partitions::ClientPartition* partition_;
  const partitions::SampleTable* table_;
  nn::ModelSpec spec_;
  std::vector<int> present_;
  std::map<int, int> class_index_;
};

struct RoundUpdate {
  int client_id = 0;
  std::vector<double> backbone;
  std::optional<std::vector<double>> head;  // global head mode only
  std::size_t sample_count = 0;
};

struct ServerState {
  nn::ParameterVector params;  // head part empty in local mode
};

struct RoundRecord {
  std::size_t round = 0;
  nn::ParameterVector server;
  std::map<int, std::optional<double>> validation;
  // 1 - mean probe cosine between received and returned backbone, per client.
  std::map<int, double> drift;
};

struct TrainingHistory {
  FederationConfig config;
  std::vector<RoundRecord> rounds;  // rounds.size() == config.rounds + 1
};

struct FederationRun {
  TrainingHistory history;
  // Final client-private heads (local mode: every client; global mode: empty).
  std::map<int, std::vector<double>> local_heads;
};

struct RunOptions {
  // Replaces the per-epoch HF-MAML update (ablations and reduction checks).
  metaopt::TripleUpdate triple_update;
  // Sees each round's communicated updates just before aggregation.
  std::function<void(std::size_t round, std::span<const RoundUpdate>)> on_updates;
};

std::vector<Client> make_clients(const FederationConfig& config,
                                 const partitions::PartitionManifest& manifest,
                                 const partitions::SampleTable& table);

// Server backbone (plus global head in global mode) and one local head per
// client in local mode.
ServerState initialize(const FederationConfig& config, std::vector<Client>& clients,
                       std::size_t identity_universe);

nn::ParameterVector broadcast(const ServerState& server, HeadMode mode, const Client& client);

// Local training on one client; stores the new local head on the client in
// local mode and returns only what is sent back to the server.
RoundUpdate client_round(Client& client, const nn::ParameterVector& received,
                         const FederationConfig& config, Rng& rng,
                         const RunOptions& options = {});

std::vector<double> aggregation_weights(std::span<const RoundUpdate> updates);

// Sample-size weighted mean, reduced in ascending client-id order.
nn::ParameterVector aggregate(std::span<const RoundUpdate> updates);

// 1 - mean cosine between embeddings of `probe` rows under two backbones.
double embedding_drift(const Client& client, std::span<const double> before,
                       std::span<const double> after, std::span<const std::size_t> probe);

FederationRun run_federation(const FederationConfig& config,
                             const partitions::PartitionManifest& manifest,
                             const partitions::SampleTable& table, const RunOptions& options = {});

// Server backbone combined with the client's head, then num_batches SGD steps.
nn::ParameterVector tune_client(const Client& client, const nn::ParameterVector& server_params,
                                std::span<const double> head, std::size_t num_batches,
                                double lr, double momentum, std::size_t batch_size, Rng& rng);

}  // namespace fedhf::federation
