#include "fedhf/federation.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <iostream>
#include <set>
#include <thread>

#include "fedhf/error.hpp"

namespace fedhf::federation {

namespace {

class TrainSource final : public metaopt::BatchSource {
 public:
  explicit TrainSource(const Client& client) : client_(&client) {}

  std::size_t size() const override { return client_->train_size(); }

  nn::Batch make_batch(std::span<const std::size_t> positions) const override {
    const auto& train = client_->partition().train;
    std::vector<std::size_t> rows;
    rows.reserve(positions.size());
    for (std::size_t p : positions) rows.push_back(train.at(p));
    return client_->make_batch(rows);
  }

 private:
  const Client* client_;
};

void warn(const std::string& message) { std::clog << "fedhf: warning: " << message << '\n'; }

nn::ParameterVector backbone_only(std::span<const double> backbone) {
  return nn::ParameterVector(std::vector<double>(backbone.begin(), backbone.end()),
                             backbone.size());
}

template <typename Fn>
void for_each_parallel(std::size_t count, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  for (std::size_t t = 0; t < std::min(threads, count); ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) fn(i);
    });
  }
}

}  // namespace

std::string_view to_string(Algorithm algorithm) {
  return algorithm == Algorithm::fedavg ? "fedavg" : "hf_maml";
}

std::string_view to_string(HeadMode mode) { return mode == HeadMode::global ? "global" : "local"; }

std::string_view to_string(FailureMode mode) {
  return mode == FailureMode::strict ? "strict" : "lenient";
}

Algorithm parse_algorithm(std::string_view text) {
  if (text == "fedavg") return Algorithm::fedavg;
  if (text == "hf_maml") return Algorithm::hf_maml;
  fail(ErrorCategory::config,
       "federation.algorithm must be fedavg or hf_maml, got '" + std::string(text) + "'");
}

HeadMode parse_head_mode(std::string_view text) {
  if (text == "global") return HeadMode::global;
  if (text == "local") return HeadMode::local;
  fail(ErrorCategory::config,
       "federation.head_mode must be global or local, got '" + std::string(text) + "'");
}

FailureMode parse_failure_mode(std::string_view text) {
  if (text == "strict") return FailureMode::strict;
  if (text == "lenient") return FailureMode::lenient;
  fail(ErrorCategory::config,
       "failure mode must be strict or lenient, got '" + std::string(text) + "'");
}

void FederationConfig::validate(std::size_t num_clients) const {
  optimizer.validate();
  require(reg_weight >= 0.0, ErrorCategory::config, "federation.reg_weight must be >= 0");
  require(batch_size >= 1, ErrorCategory::config, "federation.batch_size must be >= 1");
  require(threads >= 1, ErrorCategory::config, "federation.threads must be >= 1");
  require(!train_clients.empty(), ErrorCategory::config, "federation needs training clients");
  std::set<int> seen;
  for (int id : train_clients) {
    require(seen.insert(id).second, ErrorCategory::config,
            "client " + std::to_string(id) + " listed twice");
  }
  for (int id : holdout_clients) {
    require(seen.insert(id).second, ErrorCategory::config,
            "client " + std::to_string(id) + " is both a training and a holdout client");
  }
  require(seen.size() == num_clients && *seen.begin() == 0 &&
              *seen.rbegin() == static_cast<int>(num_clients) - 1,
          ErrorCategory::config, "training and holdout clients must cover clients 0..K-1");
  if (track_validation) validation.validate();
}

Client::Client(const partitions::ClientPartition& partition, const partitions::SampleTable& table,
               const nn::ModelSpec& model, HeadMode mode, std::size_t identity_universe)
    : partition_(&partition), table_(&table), spec_(model) {
  require(static_cast<std::size_t>(table.features.cols()) == model.input_dim,
          ErrorCategory::config, "dataset feature width does not match model input_dim");
  if (mode == HeadMode::global) {
    require(identity_universe > 0, ErrorCategory::config,
            "global head mode needs the total identity count");
    spec_.num_classes = identity_universe;
    present_ = partition.identities;
    for (int id : partition.identities) {
      require(id >= 0 && static_cast<std::size_t>(id) < identity_universe, ErrorCategory::config,
              "identity " + std::to_string(id) + " outside the global head");
      class_index_[id] = id;
    }
  } else {
    spec_.num_classes = std::max<std::size_t>(partition.identities.size(), 1);
    for (std::size_t i = 0; i < partition.identities.size(); ++i) {
      class_index_[partition.identities[i]] = static_cast<int>(i);
      present_.push_back(static_cast<int>(i));
    }
  }
  spec_.validate();
}

int Client::class_of(int identity) const {
  const auto it = class_index_.find(identity);
  require(it != class_index_.end(), ErrorCategory::invalid_target,
          "identity " + std::to_string(identity) + " does not belong to client " +
              std::to_string(id()));
  return it->second;
}

nn::Matrix Client::features(std::span<const std::size_t> table_rows) const {
  nn::Matrix out(static_cast<Eigen::Index>(table_rows.size()), table_->features.cols());
  for (std::size_t i = 0; i < table_rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) =
        table_->features.row(static_cast<Eigen::Index>(table_rows[i]));
  }
  return out;
}

nn::Batch Client::make_batch(std::span<const std::size_t> table_rows) const {
  nn::Batch batch;
  batch.inputs = features(table_rows);
  for (std::size_t row : table_rows) batch.labels.push_back(class_of(table_->identity[row]));
  batch.present_classes = present_;
  return batch;
}

std::vector<Client> make_clients(const FederationConfig& config,
                                 const partitions::PartitionManifest& manifest,
                                 const partitions::SampleTable& table) {
  std::vector<Client> clients;
  clients.reserve(manifest.clients.size());
  for (const auto& p : manifest.clients) {
    clients.emplace_back(p, table, config.model, config.head_mode, manifest.identity_universe);
  }
  return clients;
}

ServerState initialize(const FederationConfig& config, std::vector<Client>& clients,
                       std::size_t identity_universe) {
  Rng rng = make_stream(config.seed, "init");
  nn::ModelSpec spec = config.model;
  ServerState server;
  if (config.head_mode == HeadMode::global) {
    spec.num_classes = identity_universe;
    server.params = nn::init_parameters(spec, rng);
  } else {
    spec.num_classes = 1;
    const auto full = nn::init_parameters(spec, rng);
    server.params = backbone_only(full.backbone());
    for (auto& client : clients) {
      Rng head_rng = make_stream(config.seed, "head-" + std::to_string(client.id()));
      client.local_head = nn::init_head(client.spec(), head_rng);
    }
  }
  return server;
}

nn::ParameterVector broadcast(const ServerState& server, HeadMode mode, const Client& client) {
  if (mode == HeadMode::global) return server.params;
  require(client.local_head.has_value(), ErrorCategory::initialization,
          "client " + std::to_string(client.id()) + " has no local head");
  return nn::ParameterVector::concat(server.params.backbone(), *client.local_head);
}

RoundUpdate client_round(Client& client, const nn::ParameterVector& received,
                         const FederationConfig& config, Rng& rng, const RunOptions& options) {
  require(client.train_size() > 0, ErrorCategory::empty_client,
          "client " + std::to_string(client.id()) + " has no training samples");
  nn::LossConfig loss;
  loss.reg_weight = config.reg_weight;
  loss.reduction = config.penalty_reduction;
  if (config.reg_weight > 0.0) loss.reference = std::make_shared<const nn::ParameterVector>(received);
  const nn::ModelObjective objective(client.spec(), std::move(loss));
  const TrainSource source(client);

  nn::ParameterVector trained =
      config.algorithm == Algorithm::fedavg
          ? metaopt::local_train_fedavg(objective, received, source, rng, config.epochs,
                                        config.batches_per_epoch, config.batch_size,
                                        config.optimizer)
          : metaopt::local_train_hfmaml(objective, received, source, rng, config.epochs,
                                        config.batch_size, config.optimizer,
                                        options.triple_update);

  RoundUpdate update;
  update.client_id = client.id();
  update.backbone.assign(trained.backbone().begin(), trained.backbone().end());
  update.sample_count = client.train_size();
  if (config.head_mode == HeadMode::global) {
    update.head = std::vector<double>(trained.head().begin(), trained.head().end());
  } else {
    client.local_head = std::vector<double>(trained.head().begin(), trained.head().end());
  }
  return update;
}

std::vector<double> aggregation_weights(std::span<const RoundUpdate> updates) {
  require(!updates.empty(), ErrorCategory::protocol, "aggregation needs at least one update");
  double total = 0.0;
  for (const auto& u : updates) {
    require(u.sample_count > 0, ErrorCategory::protocol, "update with zero samples");
    total += static_cast<double>(u.sample_count);
  }
  std::vector<double> weights;
  for (const auto& u : updates) weights.push_back(static_cast<double>(u.sample_count) / total);
  return weights;
}

nn::ParameterVector aggregate(std::span<const RoundUpdate> updates) {
  require(!updates.empty(), ErrorCategory::protocol, "aggregation needs at least one update");
  std::vector<const RoundUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->client_id < b->client_id; });
  std::vector<RoundUpdate> sorted;
  for (const auto* u : ordered) sorted.push_back(*u);
  const auto weights = aggregation_weights(sorted);

  const bool with_head = sorted.front().head.has_value();
  const std::size_t backbone_len = sorted.front().backbone.size();
  const std::size_t head_len = with_head ? sorted.front().head->size() : 0;
  for (const auto& u : sorted) {
    require(u.backbone.size() == backbone_len && u.head.has_value() == with_head &&
                (!with_head || u.head->size() == head_len),
            ErrorCategory::protocol, "updates disagree in shape");
  }

  std::vector<double> values(backbone_len + head_len, 0.0);
  auto reduce = [&](std::size_t offset, auto&& get) {
    for (std::size_t i = 0; i < (offset == 0 ? backbone_len : head_len); ++i) {
      double sum = 0.0;
      double lo = get(sorted.front())[i];
      double hi = lo;
      for (std::size_t k = 0; k < sorted.size(); ++k) {
        const double x = get(sorted[k])[i];
        sum += weights[k] * x;
        lo = std::min(lo, x);
        hi = std::max(hi, x);
      }
      // Rounding can push a weighted mean a few ulps outside the hull.
      values[offset + i] = std::clamp(sum, lo, hi);
    }
  };
  reduce(0, [](const RoundUpdate& u) -> const std::vector<double>& { return u.backbone; });
  if (with_head) {
    reduce(backbone_len, [](const RoundUpdate& u) -> const std::vector<double>& { return *u.head; });
  }
  return nn::ParameterVector(std::move(values), backbone_len);
}

double embedding_drift(const Client& client, std::span<const double> before,
                       std::span<const double> after, std::span<const std::size_t> probe) {
  if (probe.empty()) return 0.0;
  const auto inputs = client.features(probe);
  const auto a = nn::forward_embedding(client.spec(), backbone_only(before), inputs);
  const auto b = nn::forward_embedding(client.spec(), backbone_only(after), inputs);
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const auto ra = a.row(i);
    const auto rb = b.row(i);
    total += nn::cosine_similarity(std::span<const double>(ra.data(), ra.size()),
                                   std::span<const double>(rb.data(), rb.size()));
  }
  return 1.0 - total / static_cast<double>(a.rows());
}

FederationRun run_federation(const FederationConfig& config,
                             const partitions::PartitionManifest& manifest,
                             const partitions::SampleTable& table, const RunOptions& options) {
  config.validate(manifest.clients.size());
  auto clients = make_clients(config, manifest, table);
  ServerState server = initialize(config, clients, manifest.identity_universe);

  auto record_round = [&](std::size_t round) {
    RoundRecord record;
    record.round = round;
    record.server = server.params;
    if (config.track_validation) {
      const eval::Embedder embed = [&](int id, std::span<const std::size_t> rows) {
        const auto& client = clients[static_cast<std::size_t>(id)];
        return nn::forward_embedding(client.spec(), backbone_only(server.params.backbone()),
                                     client.features(rows));
      };
      for (const auto& client : clients) {
        Rng rng = make_stream(config.seed, "validation-client-" + std::to_string(client.id()));
        try {
          record.validation[client.id()] =
              eval::evaluate_client(embed, client.id(), manifest, table, eval::Split::val,
                                    config.validation, config.validation.repeats, rng)
                  .tar;
        } catch (const Error& e) {
          if (e.category() != ErrorCategory::evaluation) throw;
          record.validation[client.id()] = std::nullopt;
        }
      }
    }
    return record;
  };

  FederationRun run;
  run.history.config = config;
  run.history.rounds.push_back(record_round(0));

  std::vector<int> participants = config.train_clients;
  std::sort(participants.begin(), participants.end());

  for (std::size_t round = 1; round <= config.rounds; ++round) {
    std::vector<std::optional<RoundUpdate>> slots(participants.size());
    std::vector<double> drifts(participants.size(), 0.0);
    std::vector<std::exception_ptr> failures(participants.size());
    for_each_parallel(participants.size(), config.threads, [&](std::size_t i) {
      auto& client = clients[static_cast<std::size_t>(participants[i])];
      try {
        const auto received = broadcast(server, config.head_mode, client);
        Rng rng = make_stream(config.seed, "client-" + std::to_string(client.id()) + "-round-" +
                                               std::to_string(round));
        slots[i] = client_round(client, received, config, rng, options);
        const auto& probe = client.partition().val.empty() ? client.partition().train
                                                           : client.partition().val;
        drifts[i] = embedding_drift(client, received.backbone(), slots[i]->backbone, probe);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    });

    std::vector<RoundUpdate> updates;
    std::map<int, double> drift;
    for (std::size_t i = 0; i < participants.size(); ++i) {
      if (failures[i]) {
        try {
          std::rethrow_exception(failures[i]);
        } catch (const Error& e) {
          if (e.category() == ErrorCategory::empty_client) {
            warn(e.what());
            continue;
          }
          if (config.failure_mode == FailureMode::strict) throw;
          warn("dropping client " + std::to_string(participants[i]) + " from round " +
               std::to_string(round) + ": " + e.what());
          continue;
        }
      }
      drift[participants[i]] = drifts[i];
      updates.push_back(std::move(*slots[i]));
    }
    require(!updates.empty(), ErrorCategory::protocol,
            "round " + std::to_string(round) + " produced no client updates");
    if (options.on_updates) options.on_updates(round, updates);
    server.params = aggregate(updates);
    auto record = record_round(round);
    record.drift = std::move(drift);
    run.history.rounds.push_back(std::move(record));
  }

  if (config.head_mode == HeadMode::local) {
    for (const auto& client : clients) run.local_heads[client.id()] = *client.local_head;
  }
  return run;
}

nn::ParameterVector tune_client(const Client& client, const nn::ParameterVector& server_params,
                                std::span<const double> head, std::size_t num_batches,
                                double lr, double momentum, std::size_t batch_size, Rng& rng) {
  require(client.train_size() > 0, ErrorCategory::empty_client,
          "client " + std::to_string(client.id()) + " has no training samples to tune on");
  auto params = nn::ParameterVector::concat(server_params.backbone(), head);
  const nn::ModelObjective objective(client.spec(), nn::LossConfig{});
  const TrainSource source(client);
  metaopt::MomentumState state(params.size());
  for (std::size_t b = 0; b < num_batches; ++b) {
    const auto batch = source.make_batch(metaopt::draw_batch(source.size(), batch_size, rng));
    metaopt::sgd_step(params, objective.gradient(params, batch), state, lr, momentum);
  }
  return params;
}

}  // namespace fedhf::federation
