#include "fedhf/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "fedhf/error.hpp"
#include "fedhf/io.hpp"

namespace fedhf::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Strict reader: every key must be consumed, type errors name the field.
class Reader {
 public:
  Reader(const json& node, std::string path) : node_(&node), path_(std::move(path)) {
    require(node.is_object(), ErrorCategory::config, where() + " must be an object");
  }

  bool has(const std::string& key) const {
    return node_->contains(key) && !node_->at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key) {
    used_.insert(key);
    require(has(key), ErrorCategory::config, "missing field " + field(key));
    try {
      return node_->at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrorCategory::config, "field " + field(key) + " has the wrong type");
    }
  }

  double number(const std::string& key) {
    used_.insert(key);
    require(has(key) && node_->at(key).is_number(), ErrorCategory::config,
            "field " + field(key) + " must be a number");
    return node_->at(key).get<double>();
  }

  std::size_t count(const std::string& key) {
    used_.insert(key);
    require(has(key) && node_->at(key).is_number_integer() && node_->at(key).get<long long>() >= 0,
            ErrorCategory::config, "field " + field(key) + " must be a non-negative integer");
    return node_->at(key).get<std::size_t>();
  }

  std::optional<double> optional_number(const std::string& key) {
    used_.insert(key);
    if (!has(key)) return std::nullopt;
    return number(key);
  }

  Reader child(const std::string& key) {
    used_.insert(key);
    require(has(key), ErrorCategory::config, "missing field " + field(key));
    return Reader(node_->at(key), field(key));
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    require(has(key), ErrorCategory::config, "missing field " + field(key));
    return node_->at(key);
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : node_->items()) {
      require(used_.contains(key), ErrorCategory::config, "unknown field " + field(key));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json* node_;
  std::string path_;
  std::set<std::string> used_;
};

json rules_to_json(const std::vector<partitions::AttributeRule>& rules) {
  json out = json::array();
  for (const auto& rule : rules) {
    json predicates = json::array();
    for (const auto& p : rule.predicates) predicates.push_back({p.attribute, to_string(p.value)});
    out.push_back({{"client", rule.client_id}, {"predicates", predicates}});
  }
  return out;
}

std::vector<partitions::AttributeRule> rules_from_json(const json& node, const std::string& field) {
  require(node.is_array(), ErrorCategory::config, "field " + field + " must be a list");
  std::vector<partitions::AttributeRule> rules;
  for (const auto& r : node) {
    Reader reader(r, field + "[]");
    partitions::AttributeRule rule;
    rule.client_id = reader.get<int>("client");
    const auto& preds = reader.raw("predicates");
    require(preds.is_array(), ErrorCategory::config, "field " + field + "[].predicates must be a list");
    for (const auto& p : preds) {
      require(p.is_array() && p.size() == 2 && p[0].is_string() && p[1].is_string(),
              ErrorCategory::config,
              "field " + field + "[].predicates entries must be [attribute, yes|no|agnostic]");
      rule.predicates.push_back(
          {p[0].get<std::string>(), partitions::parse_rule_value(p[1].get<std::string>())});
    }
    reader.finish();
    rules.push_back(std::move(rule));
  }
  return rules;
}

json to_json(const ExperimentConfig& c) {
  const auto& s = c.dataset.synthetic;
  const auto& t = c.training;
  const auto& o = t.optimizer;
  const auto& e = c.evaluation;
  json tune_lr = e.tune_lr ? json(*e.tune_lr) : json(nullptr);
  json tune_momentum = e.tune_momentum ? json(*e.tune_momentum) : json(nullptr);
  return {
      {"schema", kConfigSchema},
      {"profile", c.profile},
      {"seed", c.seed},
      {"num_seeds", c.num_seeds},
      {"jobs", c.jobs},
      {"output_dir", c.output_dir},
      {"dataset",
       {{"table", c.dataset.table_path},
        {"synthetic",
         {{"num_identities", s.num_identities},
          {"min_samples_per_identity", s.min_samples_per_identity},
          {"max_samples_per_identity", s.max_samples_per_identity},
          {"feature_dim", s.feature_dim},
          {"attributes", s.attribute_names},
          {"center_spread", s.center_spread},
          {"attribute_shift", s.attribute_shift},
          {"noise", s.noise},
          {"attribute_prior", s.attribute_prior},
          {"attribute_flip", s.attribute_flip}}}}},
      {"partition",
       {{"scheme", to_string(c.partition.scheme)},
        {"num_clients", c.partition.num_clients},
        {"num_holdout", c.partition.num_holdout},
        {"mu", c.partition.mu},
        {"sigma", c.partition.sigma},
        {"target_size", c.partition.target_size},
        {"ratios", {c.partition.ratios.train, c.partition.ratios.val, c.partition.ratios.test}},
        {"rules", rules_to_json(c.partition.rules)}}},
      {"model",
       {{"hidden_layers", c.model.hidden_layers},
        {"embedding_dim", c.model.embedding_dim},
        {"scale", c.model.scale},
        {"margin", c.model.margin}}},
      {"training",
       {{"algorithm", to_string(t.algorithm)},
        {"head_mode", to_string(t.head_mode)},
        {"rounds", t.rounds},
        {"epochs", t.epochs},
        {"batches_per_epoch", t.batches_per_epoch},
        {"batch_size", t.batch_size},
        {"reg_weight", t.reg_weight},
        {"penalty_reduction", t.penalty_reduction == nn::PenaltyReduction::mean ? "mean" : "sum"},
        {"failure_mode", to_string(t.failure_mode)},
        {"threads", t.threads},
        {"track_validation", t.track_validation},
        {"validation_pairs", t.validation_pairs},
        {"validation_repeats", t.validation_repeats},
        {"optimizer",
         {{"lr", o.lr},
          {"momentum", o.momentum},
          {"alpha", o.alpha},
          {"beta", o.beta},
          {"delta", o.delta},
          {"maml_momentum", o.maml_momentum}}}}},
      {"evaluation",
       {{"far_target", e.far_target},
        {"pairs", e.pairs},
        {"repeats", e.repeats},
        {"tune_batches", e.tune_batches},
        {"tune_lr", tune_lr},
        {"tune_momentum", tune_momentum},
        {"population_std", e.population_std}}},
  };
}

ExperimentConfig from_json(const json& doc) {
  Reader root(doc, "");
  ExperimentConfig c;
  const auto schema = root.get<std::string>("schema");
  require(schema == kConfigSchema, ErrorCategory::config,
          "unsupported config schema '" + schema + "'");
  c.profile = root.get<std::string>("profile");
  c.seed = root.get<std::uint64_t>("seed");
  c.num_seeds = root.count("num_seeds");
  c.jobs = root.count("jobs");
  c.output_dir = root.get<std::string>("output_dir");

  auto dataset = root.child("dataset");
  c.dataset.table_path = dataset.get<std::string>("table");
  auto syn = dataset.child("synthetic");
  auto& s = c.dataset.synthetic;
  s.num_identities = syn.count("num_identities");
  s.min_samples_per_identity = syn.count("min_samples_per_identity");
  s.max_samples_per_identity = syn.count("max_samples_per_identity");
  s.feature_dim = syn.count("feature_dim");
  s.attribute_names = syn.get<std::vector<std::string>>("attributes");
  s.center_spread = syn.number("center_spread");
  s.attribute_shift = syn.number("attribute_shift");
  s.noise = syn.number("noise");
  s.attribute_prior = syn.number("attribute_prior");
  s.attribute_flip = syn.number("attribute_flip");
  syn.finish();
  dataset.finish();

  auto part = root.child("partition");
  c.partition.scheme = partitions::parse_scheme(part.get<std::string>("scheme"));
  c.partition.num_clients = part.count("num_clients");
  c.partition.num_holdout = part.count("num_holdout");
  c.partition.mu = part.number("mu");
  c.partition.sigma = part.number("sigma");
  c.partition.target_size = part.count("target_size");
  const auto ratios = part.get<std::vector<double>>("ratios");
  require(ratios.size() == 3, ErrorCategory::config,
          "field partition.ratios must hold [train, val, test]");
  c.partition.ratios = {ratios[0], ratios[1], ratios[2]};
  c.partition.rules = rules_from_json(part.raw("rules"), "partition.rules");
  part.finish();

  auto model = root.child("model");
  c.model.hidden_layers = model.get<std::vector<std::size_t>>("hidden_layers");
  c.model.embedding_dim = model.count("embedding_dim");
  c.model.scale = model.number("scale");
  c.model.margin = model.number("margin");
  model.finish();

  auto tr = root.child("training");
  auto& t = c.training;
  t.algorithm = federation::parse_algorithm(tr.get<std::string>("algorithm"));
  t.head_mode = federation::parse_head_mode(tr.get<std::string>("head_mode"));
  t.rounds = tr.count("rounds");
  t.epochs = tr.count("epochs");
  t.batches_per_epoch = tr.count("batches_per_epoch");
  t.batch_size = tr.count("batch_size");
  t.reg_weight = tr.number("reg_weight");
  const auto reduction = tr.get<std::string>("penalty_reduction");
  require(reduction == "mean" || reduction == "sum", ErrorCategory::config,
          "field training.penalty_reduction must be mean or sum");
  t.penalty_reduction = reduction == "mean" ? nn::PenaltyReduction::mean : nn::PenaltyReduction::sum;
  t.failure_mode = federation::parse_failure_mode(tr.get<std::string>("failure_mode"));
  t.threads = tr.count("threads");
  t.track_validation = tr.get<bool>("track_validation");
  t.validation_pairs = tr.count("validation_pairs");
  t.validation_repeats = tr.count("validation_repeats");
  auto opt = tr.child("optimizer");
  t.optimizer.lr = opt.number("lr");
  t.optimizer.momentum = opt.number("momentum");
  t.optimizer.alpha = opt.number("alpha");
  t.optimizer.beta = opt.number("beta");
  t.optimizer.delta = opt.number("delta");
  t.optimizer.maml_momentum = opt.get<bool>("maml_momentum");
  opt.finish();
  tr.finish();

  auto ev = root.child("evaluation");
  auto& e = c.evaluation;
  e.far_target = ev.number("far_target");
  e.pairs = ev.count("pairs");
  e.repeats = ev.count("repeats");
  e.tune_batches = ev.count("tune_batches");
  e.tune_lr = ev.optional_number("tune_lr");
  e.tune_momentum = ev.optional_number("tune_momentum");
  e.population_std = ev.get<bool>("population_std");
  ev.finish();

  root.finish();
  return c;
}

json hashed_view(const ExperimentConfig& config) {
  json j = to_json(config);
  j.erase("output_dir");
  j.erase("jobs");
  j["training"].erase("threads");
  return j;
}

std::string read_required(const fs::path& path, const std::string& what) {
  require(fs::exists(path), ErrorCategory::io, "missing " + what + ": " + path.string());
  return io::read_file(path);
}

json parse_json(const std::string& text, const fs::path& path) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCategory::io, path.string() + " is not valid JSON: " + e.what());
  }
}

std::string dataset_hash(const std::string& table_text) { return io::hex64(fnv1a(table_text)); }

std::uint64_t derived_seed(std::uint64_t seed, std::string_view name) {
  Rng rng = make_stream(seed, name);
  return rng();
}

std::string hash_values(std::span<const double> values) {
  std::string bytes(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
  return io::hex64(fnv1a(bytes));
}

template <typename Fn>
void run_jobs(std::size_t count, std::size_t jobs, Fn&& fn) {
  std::vector<std::exception_ptr> failures(count);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < std::min(jobs, count); ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) guarded(i);
      });
    }
  }
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }
}

json report_to_json(const eval::EvaluationReport& r) {
  json clients = json::array();
  for (const auto& c : r.clients) {
    clients.push_back({{"client", c.client_id}, {"tar", c.tar}, {"repeats", c.repeats}});
  }
  return {{"cohort", eval::to_string(r.cohort)},
          {"tuned", r.tuned},
          {"far_target", r.far_target},
          {"pairs", r.pairs},
          {"repeats", r.num_repeats},
          {"seed", r.seed},
          {"population_std", r.population_std},
          {"mean", r.mean},
          {"std", r.std},
          {"clients", clients}};
}

eval::EvaluationReport report_from_json(const json& j) {
  eval::EvaluationReport r;
  r.cohort = eval::parse_cohort(j.at("cohort").get<std::string>());
  r.tuned = j.at("tuned").get<bool>();
  r.far_target = j.at("far_target").get<double>();
  r.pairs = j.at("pairs").get<std::size_t>();
  r.num_repeats = j.at("repeats").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.population_std = j.at("population_std").get<bool>();
  r.mean = j.at("mean").get<double>();
  r.std = j.at("std").get<double>();
  for (const auto& c : j.at("clients")) {
    eval::ClientScore score;
    score.client_id = c.at("client").get<int>();
    score.tar = c.at("tar").get<double>();
    score.repeats = c.at("repeats").get<std::vector<double>>();
    r.clients.push_back(std::move(score));
  }
  return r;
}

std::string cohort_key(const eval::EvaluationReport& r) {
  return std::string(r.tuned ? "tuned" : "untuned") + "/" + std::string(eval::to_string(r.cohort));
}

const std::vector<std::string> kCohortOrder = {"untuned/train", "untuned/holdout", "tuned/train",
                                               "tuned/holdout"};

int variant_rank(const std::string& label) {
  static const std::vector<std::string> order = {
      "FedAvg - Global",  "FedAvg - Local",  "FedAvg - Regularization",  "FedAvg - Global Regularization",
      "HF-MAML - Global", "HF-MAML - Local", "HF-MAML - Regularization", "HF-MAML - Global Regularization"};
  const auto it = std::find(order.begin(), order.end(), label);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

std::string fixed(double v, int digits = 3) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(digits);
  out << v;
  return out.str();
}

}  // namespace

void ExperimentConfig::validate() const {
  require(profile == "desk" || profile == "paper", ErrorCategory::config,
          "field profile must be desk or paper");
  require(num_seeds >= 1, ErrorCategory::config, "field num_seeds must be >= 1");
  require(jobs >= 1, ErrorCategory::config, "field jobs must be >= 1");
  require(!output_dir.empty(), ErrorCategory::config, "field output_dir must not be empty");
  if (!dataset.table_path.empty()) {
    require(fs::exists(dataset.table_path), ErrorCategory::io,
            "field dataset.table: file not found: " + dataset.table_path);
  } else {
    dataset.synthetic.validate();
  }
  require(partition.num_clients >= 1, ErrorCategory::config,
          "field partition.num_clients must be >= 1");
  require(partition.num_holdout < partition.num_clients, ErrorCategory::config,
          "field partition.num_holdout must be smaller than partition.num_clients");
  require(std::isfinite(partition.mu), ErrorCategory::config, "field partition.mu must be finite");
  require(partition.sigma >= 0.0 && std::isfinite(partition.sigma), ErrorCategory::config,
          "field partition.sigma must be >= 0");
  partition.ratios.validate();
  if (partition.scheme == partitions::Scheme::attribute) {
    require(partition.rules.size() == partition.num_clients, ErrorCategory::config,
            "field partition.rules must hold one rule per client");
    for (const auto& rule : partition.rules) rule.validate();
  }
  require(model.embedding_dim >= 1, ErrorCategory::config,
          "field model.embedding_dim must be >= 1");
  for (std::size_t h : model.hidden_layers) {
    require(h >= 1, ErrorCategory::config, "field model.hidden_layers entries must be >= 1");
  }
  require(model.scale > 0.0, ErrorCategory::config, "field model.scale must be > 0");
  require(model.margin >= 0.0 && model.margin < 3.14159, ErrorCategory::config,
          "field model.margin must lie in [0, pi)");
  require(training.epochs >= 1, ErrorCategory::config, "field training.epochs must be >= 1");
  require(training.batches_per_epoch >= 1, ErrorCategory::config,
          "field training.batches_per_epoch must be >= 1");
  require(training.batch_size >= 1, ErrorCategory::config, "field training.batch_size must be >= 1");
  require(training.reg_weight >= 0.0, ErrorCategory::config,
          "field training.reg_weight must be >= 0");
  require(training.threads >= 1, ErrorCategory::config, "field training.threads must be >= 1");
  if (training.track_validation) {
    require(training.validation_pairs >= 2, ErrorCategory::config,
            "field training.validation_pairs must be >= 2");
    require(training.validation_repeats >= 1, ErrorCategory::config,
            "field training.validation_repeats must be >= 1");
  }
  const auto& o = training.optimizer;
  require(o.lr > 0.0, ErrorCategory::config, "field training.optimizer.lr must be > 0");
  require(o.momentum >= 0.0 && o.momentum < 1.0, ErrorCategory::config,
          "field training.optimizer.momentum must lie in [0, 1)");
  require(o.alpha >= 0.0, ErrorCategory::config, "field training.optimizer.alpha must be >= 0");
  require(o.beta > 0.0, ErrorCategory::config, "field training.optimizer.beta must be > 0");
  require(o.delta > 0.0, ErrorCategory::config, "field training.optimizer.delta must be > 0");
  o.validate();
  require(evaluation.far_target > 0.0 && evaluation.far_target < 1.0, ErrorCategory::config,
          "field evaluation.far_target must lie in (0, 1)");
  evaluation.validate();
}

std::vector<std::string> default_attribute_names() {
  return {"male", "eyeglasses", "hat", "young", "gray_hair", "goatee", "bald", "smiling"};
}

std::vector<partitions::AttributeRule> default_attribute_rules() {
  using partitions::RuleValue;
  constexpr RuleValue Y = RuleValue::yes;
  constexpr RuleValue N = RuleValue::no;
  // Twenty attribute combinations over the eight synthetic attributes. The
  // first sixteen cover every (male, eyeglasses, hat, young) cell; the last four
  // carve narrower male / no-glasses / no-hat groups out of those cells.
  const std::vector<std::vector<std::pair<std::string, RuleValue>>> table = {
      {{"male", Y}, {"eyeglasses", Y}, {"hat", N}, {"young", Y}},
      {{"male", Y}, {"eyeglasses", Y}, {"hat", N}, {"young", N}},
      {{"male", N}, {"eyeglasses", Y}, {"hat", N}, {"young", Y}},
      {{"male", N}, {"eyeglasses", Y}, {"hat", N}, {"young", N}},
      {{"male", Y}, {"eyeglasses", N}, {"hat", Y}, {"young", Y}},
      {{"male", Y}, {"eyeglasses", N}, {"hat", Y}, {"young", N}},
      {{"male", N}, {"eyeglasses", N}, {"hat", Y}, {"young", Y}},
      {{"male", N}, {"eyeglasses", N}, {"hat", Y}, {"young", N}},
      {{"male", Y}, {"eyeglasses", Y}, {"hat", Y}, {"young", Y}},
      {{"male", Y}, {"eyeglasses", Y}, {"hat", Y}, {"young", N}},
      {{"male", N}, {"eyeglasses", Y}, {"hat", Y}, {"young", Y}},
      {{"male", N}, {"eyeglasses", Y}, {"hat", Y}, {"young", N}},
      {{"male", Y}, {"eyeglasses", N}, {"hat", N}, {"young", Y}},
      {{"male", Y}, {"eyeglasses", N}, {"hat", N}, {"young", N}},
      {{"male", N}, {"eyeglasses", N}, {"hat", N}, {"young", Y}},
      {{"male", N}, {"eyeglasses", N}, {"hat", N}, {"young", N}},
      {{"male", Y}, {"eyeglasses", N}, {"hat", N}, {"goatee", Y}, {"bald", N}},
      {{"male", Y}, {"eyeglasses", N}, {"hat", N}, {"bald", Y}},
      {{"male", N}, {"eyeglasses", N}, {"hat", N}, {"smiling", Y}, {"gray_hair", N}},
      {{"male", Y}, {"eyeglasses", N}, {"hat", N}, {"gray_hair", Y}, {"goatee", N}},
  };
  std::vector<partitions::AttributeRule> rules;
  for (std::size_t k = 0; k < table.size(); ++k) {
    partitions::AttributeRule rule;
    rule.client_id = static_cast<int>(k);
    for (const auto& [name, value] : table[k]) rule.predicates.push_back({name, value});
    rules.push_back(std::move(rule));
  }
  return rules;
}

ExperimentConfig profile_defaults(std::string_view profile) {
  ExperimentConfig c;
  c.dataset.synthetic.attribute_names = default_attribute_names();
  c.partition.rules = default_attribute_rules();
  // Untuned TAR@FAR0.1 lands around 0.7 instead of saturating near 1.
  c.dataset.synthetic.noise = 1.5;
  if (profile == "desk") {
    c.profile = "desk";
    c.dataset.synthetic.num_identities = 150;
    c.dataset.synthetic.min_samples_per_identity = 20;
    c.dataset.synthetic.max_samples_per_identity = 20;
    c.dataset.synthetic.feature_dim = 64;
    c.model.hidden_layers = {64};
    c.model.embedding_dim = 32;
    c.training.rounds = 10;
    c.training.epochs = 5;
    c.training.batches_per_epoch = 50;
    c.training.batch_size = 64;
  } else if (profile == "paper") {
    c.profile = "paper";
    c.dataset.synthetic.num_identities = 1500;
    c.dataset.synthetic.min_samples_per_identity = 20;
    c.dataset.synthetic.max_samples_per_identity = 20;
    c.dataset.synthetic.feature_dim = 1000;
    c.model.hidden_layers = {};
    c.model.embedding_dim = 512;
    c.training.rounds = 30;
    c.training.epochs = 50;
    c.training.batches_per_epoch = 50;
    c.training.batch_size = 64;
  } else {
    fail(ErrorCategory::config, "field profile must be desk or paper, got '" + std::string(profile) + "'");
  }
  return c;
}

ExperimentConfig parse_config(std::string_view text, std::optional<std::string> profile_override) {
  json user;
  try {
    user = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCategory::config, std::string("config is not valid JSON: ") + e.what());
  }
  require(user.is_object(), ErrorCategory::config, "config must be a JSON object");
  if (user.contains("schema")) {
    require(user["schema"].is_string() && user["schema"].get<std::string>() == kConfigSchema,
            ErrorCategory::config, "field schema must be '" + std::string(kConfigSchema) + "'");
  }
  std::string profile = "desk";
  if (user.contains("profile")) {
    require(user["profile"].is_string(), ErrorCategory::config, "field profile must be a string");
    profile = user["profile"].get<std::string>();
  }
  if (profile_override) profile = *profile_override;
  user["profile"] = profile;

  json merged = to_json(profile_defaults(profile));
  merged.merge_patch(user);
  ExperimentConfig config = from_json(merged);
  if (const char* dir = std::getenv(kOutputDirEnv); dir != nullptr && *dir != '\0') {
    config.output_dir = dir;
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const fs::path& path, std::optional<std::string> profile_override) {
  return parse_config(read_required(path, "config file"), std::move(profile_override));
}

std::string serialize_config(const ExperimentConfig& config) {
  return to_json(config).dump(1) + "\n";
}

std::string config_hash(const ExperimentConfig& config) {
  return io::hex64(fnv1a(hashed_view(config).dump()));
}

std::vector<std::uint64_t> sweep_seeds(const ExperimentConfig& config) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < config.num_seeds; ++i) seeds.push_back(config.seed + i);
  return seeds;
}

PartitionArtifacts build_partition(const ExperimentConfig& config) {
  config.validate();
  PartitionArtifacts out;
  if (!config.dataset.table_path.empty()) {
    out.table = partitions::parse_table(read_required(config.dataset.table_path, "sample table"));
  } else {
    auto spec = config.dataset.synthetic;
    spec.seed = derived_seed(config.seed, "data");
    out.table = partitions::generate_synthetic(spec);
  }
  const auto& p = config.partition;
  const std::uint64_t seed = derived_seed(config.seed, "partition");
  const auto ids = out.table.identities();
  switch (p.scheme) {
    case partitions::Scheme::equal:
      out.manifest = partitions::equal_partition(ids, p.num_clients, seed);
      break;
    case partitions::Scheme::lognormal:
      out.manifest = partitions::lognormal_partition(ids, p.num_clients, p.mu, p.sigma, seed);
      break;
    case partitions::Scheme::attribute: {
      // Without an explicit target, fill toward the mean client size.
      const std::size_t target = p.target_size > 0
                                     ? p.target_size
                                     : (out.table.size() + p.rules.size() - 1) / p.rules.size();
      out.manifest = partitions::attribute_partition(out.table, p.rules, target, seed, p.ratios);
      break;
    }
  }
  if (p.scheme != partitions::Scheme::attribute) partitions::assign_splits(out.manifest, out.table, p.ratios);
  out.manifest.ratios = p.ratios;
  out.manifest.identity_universe = out.table.identity_universe();
  out.manifest.dataset_file = "dataset.tsv";
  out.manifest.dataset_hash = dataset_hash(partitions::serialize_table(out.table));
  out.manifest.validate();
  return out;
}

PartitionArtifacts load_partition(const fs::path& manifest_path) {
  PartitionArtifacts out;
  out.manifest = partitions::parse_manifest(read_required(manifest_path, "partition manifest"));
  const fs::path table_path = manifest_path.parent_path() / out.manifest.dataset_file;
  const std::string text = read_required(table_path, "sample table");
  require(dataset_hash(text) == out.manifest.dataset_hash, ErrorCategory::config,
          "manifest " + manifest_path.string() + " does not match dataset " + table_path.string());
  out.table = partitions::parse_table(text);
  out.manifest.validate();
  for (const auto& c : out.manifest.clients) {
    for (const auto* list : {&c.train, &c.val, &c.test}) {
      for (std::size_t s : *list) {
        require(s < out.table.size(), ErrorCategory::config,
                "manifest references sample " + std::to_string(s) + " outside the dataset");
      }
    }
  }
  return out;
}

federation::FederationConfig resolve_federation(const ExperimentConfig& config,
                                                const partitions::PartitionManifest& manifest,
                                                const partitions::SampleTable& table,
                                                std::uint64_t seed) {
  const std::size_t k = manifest.clients.size();
  require(config.partition.num_holdout < k, ErrorCategory::config,
          "field partition.num_holdout must be smaller than the manifest's client count");
  federation::FederationConfig fed;
  for (std::size_t i = 0; i < k; ++i) {
    (i + config.partition.num_holdout < k ? fed.train_clients : fed.holdout_clients)
        .push_back(static_cast<int>(i));
  }
  const auto& t = config.training;
  fed.rounds = t.rounds;
  fed.algorithm = t.algorithm;
  fed.head_mode = t.head_mode;
  fed.reg_weight = t.reg_weight;
  fed.penalty_reduction = t.penalty_reduction;
  fed.optimizer = t.optimizer;
  fed.epochs = t.epochs;
  fed.batches_per_epoch = t.batches_per_epoch;
  fed.batch_size = t.batch_size;
  fed.seed = seed;
  fed.failure_mode = t.failure_mode;
  fed.threads = t.threads;
  fed.model.input_dim = table.feature_dim();
  fed.model.hidden_layers = config.model.hidden_layers;
  fed.model.embedding_dim = config.model.embedding_dim;
  fed.model.scale = config.model.scale;
  fed.model.margin = config.model.margin;
  fed.model.num_classes = 1;
  fed.track_validation = t.track_validation;
  fed.validation = config.evaluation;
  fed.validation.pairs = t.validation_pairs;
  fed.validation.repeats = t.validation_repeats;
  fed.validate(k);
  return fed;
}

CohortReports evaluate_run(const ExperimentConfig& config,
                           const partitions::PartitionManifest& manifest,
                           const partitions::SampleTable& table,
                           const federation::FederationConfig& fed,
                           const nn::ParameterVector& server,
                           const std::map<int, std::vector<double>>& local_heads,
                           std::uint64_t seed) {
  const auto clients = federation::make_clients(fed, manifest, table);
  const auto& ev = config.evaluation;
  const double tune_lr = ev.tune_lr.value_or(fed.optimizer.lr);
  const double tune_momentum = ev.tune_momentum.value_or(fed.optimizer.momentum);
  const nn::ParameterVector backbone(
      std::vector<double>(server.backbone().begin(), server.backbone().end()), server.backbone_len());

  const eval::Embedder untuned = [&](int id, std::span<const std::size_t> rows) {
    const auto& client = clients.at(static_cast<std::size_t>(id));
    return nn::forward_embedding(client.spec(), backbone, client.features(rows));
  };
  const eval::Embedder tuned = [&](int id, std::span<const std::size_t> rows) {
    const auto& client = clients.at(static_cast<std::size_t>(id));
    std::span<const double> head;
    if (fed.head_mode == federation::HeadMode::global) {
      head = server.head();
    } else {
      const auto it = local_heads.find(id);
      require(it != local_heads.end(), ErrorCategory::initialization,
              "client " + std::to_string(id) + " has no stored local head");
      head = it->second;
    }
    Rng rng = make_stream(seed, "tune-client-" + std::to_string(id));
    nn::ParameterVector params = backbone;
    try {
      params = federation::tune_client(client, server, head, ev.tune_batches, tune_lr, tune_momentum,
                                       fed.batch_size, rng);
    } catch (const Error& e) {
      if (e.category() != ErrorCategory::empty_client) throw;
      std::clog << "fedhf: warning: " << e.what() << "; evaluating untuned\n";
    }
    return nn::forward_embedding(client.spec(), params, client.features(rows));
  };

  CohortReports out;
  out.untuned_train = eval::evaluate_cohort(untuned, fed.train_clients, manifest, table,
                                            eval::Cohort::train, false, ev, seed);
  out.untuned_holdout = eval::evaluate_cohort(untuned, fed.holdout_clients, manifest, table,
                                              eval::Cohort::holdout, false, ev, seed);
  out.tuned_train = eval::evaluate_cohort(tuned, fed.train_clients, manifest, table,
                                          eval::Cohort::train, true, ev, seed);
  out.tuned_holdout = eval::evaluate_cohort(tuned, fed.holdout_clients, manifest, table,
                                            eval::Cohort::holdout, true, ev, seed);
  return out;
}

std::string variant_label(federation::Algorithm algorithm, federation::HeadMode mode,
                          double reg_weight) {
  std::string label = algorithm == federation::Algorithm::fedavg ? "FedAvg - " : "HF-MAML - ";
  if (reg_weight > 0.0) {
    return label + (mode == federation::HeadMode::global ? "Global Regularization" : "Regularization");
  }
  return label + (mode == federation::HeadMode::global ? "Global" : "Local");
}

PartitionFiles cmd_partition(const ExperimentConfig& config, const fs::path& out_dir) {
  const auto artifacts = build_partition(config);
  PartitionFiles files{out_dir / "dataset.tsv", out_dir / "manifest.json",
                       out_dir / "partition_summary.json"};
  io::write_file_atomic(files.table, partitions::serialize_table(artifacts.table));
  io::write_file_atomic(files.manifest, partitions::serialize_manifest(artifacts.manifest));
  io::write_file_atomic(files.summary,
                        partitions::serialize_summary(partitions::summarize(artifacts.manifest)));
  return files;
}

namespace {

json history_to_json(const federation::TrainingHistory& history, const ExperimentConfig& config,
                     std::uint64_t seed) {
  json rounds = json::array();
  for (const auto& r : history.rounds) {
    json validation = json::object();
    for (const auto& [id, v] : r.validation) {
      validation[std::to_string(id)] = v ? json(*v) : json(nullptr);
    }
    json drift = json::object();
    for (const auto& [id, d] : r.drift) drift[std::to_string(id)] = d;
    rounds.push_back({{"round", r.round},
                      {"server_hash", hash_values(r.server.values())},
                      {"validation", validation},
                      {"drift", drift}});
  }
  const auto& final_server = history.rounds.back().server;
  return {{"schema", kHistorySchema},
          {"seed", seed},
          {"config_hash", config_hash(config)},
          {"variant", variant_label(history.config.algorithm, history.config.head_mode,
                                    history.config.reg_weight)},
          {"train_clients", history.config.train_clients},
          {"holdout_clients", history.config.holdout_clients},
          {"rounds", rounds},
          {"final_server",
           {{"backbone_len", final_server.backbone_len()}, {"values", final_server.raw()}}}};
}

json client_state_to_json(const std::map<int, std::vector<double>>& heads) {
  json list = json::array();
  for (const auto& [id, values] : heads) list.push_back({{"client", id}, {"head", values}});
  return {{"schema", kClientStateSchema}, {"local_heads", list}};
}

}  // namespace

std::vector<fs::path> cmd_train(const ExperimentConfig& config, const fs::path& manifest_path,
                                const fs::path& out_dir, bool force) {
  config.validate();
  const auto artifacts = load_partition(manifest_path);
  const auto seeds = sweep_seeds(config);
  std::vector<fs::path> records;
  for (auto seed : seeds) {
    const fs::path dir = out_dir / ("seed-" + std::to_string(seed));
    const fs::path record = dir / "run_record.json";
    require(force || !fs::exists(record), ErrorCategory::overwrite_refused,
            record.string() + " already exists; pass --force to overwrite");
    records.push_back(record);
  }
  const fs::path manifest_abs = fs::absolute(manifest_path).lexically_normal();
  const json config_json = hashed_view(config);
  const std::string hash = config_hash(config);

  run_jobs(seeds.size(), config.jobs, [&](std::size_t i) {
    const auto seed = seeds[i];
    const auto start = std::chrono::steady_clock::now();
    const auto fed = resolve_federation(config, artifacts.manifest, artifacts.table, seed);
    const auto run = federation::run_federation(fed, artifacts.manifest, artifacts.table);
    const auto elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const fs::path dir = records[i].parent_path();
    io::write_file_atomic(dir / "history.json",
                          history_to_json(run.history, config, seed).dump(1) + "\n");
    io::write_file_atomic(dir / "client_state.json",
                          client_state_to_json(run.local_heads).dump(1) + "\n");
    const json record = {{"schema", kRunRecordSchema},
                         {"config_hash", hash},
                         {"seed", seed},
                         {"config", config_json},
                         {"manifest", manifest_abs.string()},
                         {"dataset_hash", artifacts.manifest.dataset_hash},
                         {"history", "history.json"},
                         {"client_state", "client_state.json"},
                         {"reports", {"report.json"}},
                         {"wall_clock_seconds", elapsed}};
    io::write_file_atomic(records[i], record.dump(1) + "\n");
  });
  return records;
}

namespace {

struct LoadedRun {
  ExperimentConfig config;
  std::string hash;
  std::uint64_t seed = 0;
  fs::path manifest;
  json history;
  json client_state;
};

LoadedRun load_run(const fs::path& record_path) {
  const json record = parse_json(read_required(record_path, "run record"), record_path);
  LoadedRun run;
  try {
    require(record.at("schema").get<std::string>() == kRunRecordSchema, ErrorCategory::config,
            "unsupported run record schema in " + record_path.string());
    run.hash = record.at("config_hash").get<std::string>();
    run.seed = record.at("seed").get<std::uint64_t>();
    json cfg = record.at("config");
    cfg["output_dir"] = record_path.parent_path().string();
    cfg["jobs"] = 1;
    cfg["training"]["threads"] = 1;
    run.config = from_json(cfg);
    run.manifest = record.at("manifest").get<std::string>();
    const fs::path dir = record_path.parent_path();
    const fs::path history = dir / record.at("history").get<std::string>();
    const fs::path state = dir / record.at("client_state").get<std::string>();
    run.history = parse_json(read_required(history, "training history"), history);
    run.client_state = parse_json(read_required(state, "client state"), state);
  } catch (const json::exception& e) {
    fail(ErrorCategory::config, "malformed run record " + record_path.string() + ": " + e.what());
  }
  require(config_hash(run.config) == run.hash, ErrorCategory::report,
          "config hash mismatch in " + record_path.string());
  require(run.history.value("config_hash", std::string()) == run.hash, ErrorCategory::report,
          "history does not belong to run record " + record_path.string());
  return run;
}

}  // namespace

std::string serialize_report(const CohortReports& reports, const std::string& variant,
                             const std::string& hash, std::uint64_t seed) {
  json cohorts = json::array();
  for (const auto* r : {&reports.untuned_train, &reports.untuned_holdout, &reports.tuned_train,
                        &reports.tuned_holdout}) {
    cohorts.push_back(report_to_json(*r));
  }
  const json doc = {{"schema", kReportSchema},
                    {"run_record", "run_record.json"},
                    {"config_hash", hash},
                    {"seed", seed},
                    {"variant", variant},
                    {"far_target", reports.untuned_train.far_target},
                    {"cohorts", cohorts}};
  return doc.dump(1) + "\n";
}

fs::path cmd_evaluate(const fs::path& run_record_path) {
  const LoadedRun run = load_run(run_record_path);
  const auto artifacts = load_partition(run.manifest);
  const auto fed = resolve_federation(run.config, artifacts.manifest, artifacts.table, run.seed);

  nn::ParameterVector server;
  std::map<int, std::vector<double>> heads;
  try {
    const auto& fs_json = run.history.at("final_server");
    server = nn::ParameterVector(fs_json.at("values").get<std::vector<double>>(),
                                 fs_json.at("backbone_len").get<std::size_t>());
    for (const auto& h : run.client_state.at("local_heads")) {
      heads[h.at("client").get<int>()] = h.at("head").get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    fail(ErrorCategory::config, std::string("malformed training artifacts: ") + e.what());
  }

  const auto reports =
      evaluate_run(run.config, artifacts.manifest, artifacts.table, fed, server, heads, run.seed);
  const fs::path dir = run_record_path.parent_path();
  const std::string variant = variant_label(fed.algorithm, fed.head_mode, fed.reg_weight);
  const fs::path report_path = dir / "report.json";
  io::write_file_atomic(report_path, serialize_report(reports, variant, run.hash, run.seed));

  std::ostringstream plot;
  plot << "round\tclient\tmetric\tvalue\n";
  for (const auto& r : run.history.at("rounds")) {
    const auto round = r.at("round").get<std::size_t>();
    for (const auto& [id, v] : r.at("validation").items()) {
      plot << round << '\t' << id << "\tval_tar\t"
           << (v.is_null() ? std::string("NA") : io::format_double(v.get<double>())) << '\n';
    }
    for (const auto& [id, v] : r.at("drift").items()) {
      plot << round << '\t' << id << "\tdrift\t" << io::format_double(v.get<double>()) << '\n';
    }
  }
  for (const auto* rep : {&reports.untuned_train, &reports.untuned_holdout, &reports.tuned_train,
                          &reports.tuned_holdout}) {
    for (const auto& c : rep->clients) {
      plot << fed.rounds << '\t' << c.client_id << '\t'
           << (rep->tuned ? "test_tar_tuned" : "test_tar_untuned") << '\t'
           << io::format_double(c.tar) << '\n';
    }
  }
  io::write_file_atomic(dir / "report_plot.tsv", plot.str());
  return report_path;
}

StoredReport read_report(const fs::path& path) {
  const json doc = parse_json(read_required(path, "report"), path);
  StoredReport out;
  try {
    require(doc.at("schema").get<std::string>() == kReportSchema, ErrorCategory::report,
            "unsupported report schema in " + path.string());
    out.variant = doc.at("variant").get<std::string>();
    out.config_hash = doc.at("config_hash").get<std::string>();
    out.seed = doc.at("seed").get<std::uint64_t>();
    out.far_target = doc.at("far_target").get<double>();
    for (const auto& c : doc.at("cohorts")) out.cohorts.push_back(report_from_json(c));

    // Provenance: the referenced run record must exist and carry a valid hash.
    const fs::path record_path = path.parent_path() / doc.at("run_record").get<std::string>();
    require(fs::exists(record_path), ErrorCategory::report,
            "report " + path.string() + " references missing run record " + record_path.string());
    const json record = parse_json(io::read_file(record_path), record_path);
    require(record.at("config_hash").get<std::string>() == out.config_hash, ErrorCategory::report,
            "report " + path.string() + " does not match its run record's config hash");
    json cfg = record.at("config");
    cfg["output_dir"] = ".";
    cfg["jobs"] = 1;
    cfg["training"]["threads"] = 1;
    require(config_hash(from_json(cfg)) == out.config_hash, ErrorCategory::report,
            "run record " + record_path.string() + " fails config hash validation");
  } catch (const json::exception& e) {
    fail(ErrorCategory::report, "malformed report " + path.string() + ": " + e.what());
  }
  for (const auto& c : out.cohorts) {
    require(c.far_target == out.far_target, ErrorCategory::report,
            "report " + path.string() + " mixes far targets");
  }
  return out;
}

ReportFiles cmd_report(std::span<const fs::path> report_paths, const fs::path& out_dir) {
  require(!report_paths.empty(), ErrorCategory::report, "report needs at least one input");
  std::vector<StoredReport> reports;
  for (const auto& p : report_paths) reports.push_back(read_report(p));
  for (const auto& r : reports) {
    require(r.far_target == reports.front().far_target, ErrorCategory::report,
            "refusing to aggregate reports with different far_target values");
  }
  const double far = reports.front().far_target;

  // variant -> cohort key -> one report per seed
  std::map<std::string, std::map<std::string, std::vector<const eval::EvaluationReport*>>> grouped;
  for (const auto& r : reports) {
    for (const auto& c : r.cohorts) grouped[r.variant][cohort_key(c)].push_back(&c);
  }
  std::vector<std::string> variants;
  for (const auto& [v, _] : grouped) variants.push_back(v);
  std::stable_sort(variants.begin(), variants.end(), [](const auto& a, const auto& b) {
    return variant_rank(a) < variant_rank(b);
  });
  const bool compare = variants.size() > 1;

  struct Cell {
    double mean_of_means = 0, std_of_means = 0, mean_of_stds = 0, std_of_stds = 0;
    std::size_t seeds = 0;
  };
  auto cell = [&](const std::string& variant, const std::string& key) -> std::optional<Cell> {
    const auto vit = grouped.find(variant);
    if (vit == grouped.end()) return std::nullopt;
    const auto it = vit->second.find(key);
    if (it == vit->second.end() || it->second.empty()) return std::nullopt;
    std::vector<double> means;
    std::vector<double> stds;
    for (const auto* r : it->second) {
      means.push_back(r->mean);
      stds.push_back(r->std);
    }
    return Cell{eval::mean(means), eval::stddev(means), eval::mean(stds), eval::stddev(stds),
                means.size()};
  };

  std::ostringstream md;
  std::ostringstream tsv;
  tsv << "variant\tcohort\ttuned\tmetric\tseeds\tmean\tstd\n";
  auto emit_table = [&](const std::string& title, bool fairness) {
    md << "## " << title << "\n\n";
    md << "| Variant | Untuned train | Untuned holdout | Tuned train | Tuned holdout |\n";
    md << "|---|---|---|---|---|\n";
    for (const auto& v : variants) {
      md << "| " << v;
      for (const auto& key : kCohortOrder) {
        const auto c = cell(v, key);
        md << " | ";
        if (!c) {
          md << "-";
          continue;
        }
        const double m = fairness ? c->mean_of_stds : c->mean_of_means;
        const double s = fairness ? c->std_of_stds : c->std_of_means;
        md << fixed(m) << (c->seeds > 1 ? " ± " + fixed(s) : "");
        const auto slash = key.find('/');
        tsv << v << '\t' << key.substr(slash + 1) << '\t'
            << (key.substr(0, slash) == "tuned" ? "true" : "false") << '\t'
            << (fairness ? "client_std" : "client_mean") << '\t' << c->seeds << '\t'
            << io::format_double(m) << '\t' << io::format_double(s) << '\n';
      }
      md << " |\n";
    }
    md << '\n';
  };
  md << "# TAR@FAR=" << io::format_double(far) << " comparison\n\n";
  md << "Values are means over seeds (± standard deviation over seeds).\n\n";
  emit_table("Mean TAR over clients", false);
  emit_table("Standard deviation of TAR across clients", true);

  // Per-client means over seeds, plus deltas against the FedAvg counterpart.
  auto client_means = [&](const std::string& variant, const std::string& key) {
    eval::EvaluationReport avg;
    const auto& list = grouped.at(variant).at(key);
    avg.cohort = list.front()->cohort;
    avg.tuned = list.front()->tuned;
    avg.far_target = far;
    std::map<int, std::vector<double>> per_client;
    for (const auto* r : list) {
      for (const auto& c : r->clients) per_client[c.client_id].push_back(c.tar);
    }
    for (const auto& [id, values] : per_client) avg.clients.push_back({id, values, 0.0});
    avg.recompute();
    return avg;
  };
  std::ostringstream pc;
  pc << "variant\tcohort\ttuned\tclient\ttar";
  if (compare) pc << "\tbaseline\tbaseline_tar\tpercent";
  pc << '\n';
  for (const auto& v : variants) {
    std::string baseline = v;
    if (baseline.rfind("HF-MAML", 0) == 0) baseline.replace(0, 7, "FedAvg");
    const bool has_baseline = compare && baseline != v && grouped.contains(baseline);
    for (const auto& key : kCohortOrder) {
      if (!grouped.at(v).contains(key)) continue;
      const auto after = client_means(v, key);
      std::optional<eval::DeltaReport> delta;
      if (has_baseline && grouped.at(baseline).contains(key)) {
        const auto before = client_means(baseline, key);
        if (before.clients.size() == after.clients.size()) {
          delta = eval::per_client_delta_report(before, after);
        }
      }
      const auto slash = key.find('/');
      for (std::size_t i = 0; i < after.clients.size(); ++i) {
        const auto& c = after.clients[i];
        pc << v << '\t' << key.substr(slash + 1) << '\t'
           << (key.substr(0, slash) == "tuned" ? "true" : "false") << '\t' << c.client_id << '\t'
           << io::format_double(c.tar);
        if (compare) {
          if (delta) {
            const auto& d = delta->clients[i];
            pc << '\t' << baseline << '\t' << io::format_double(d.before) << '\t'
               << (d.percent ? io::format_double(*d.percent) : std::string("NA"));
          } else {
            pc << "\tNA\tNA\tNA";
          }
        }
        pc << '\n';
      }
      if (delta && delta->weakest_client >= 0) {
        md << "- " << v << " vs " << baseline << " (" << key << "): weakest baseline client "
           << delta->weakest_client << " changes by "
           << (delta->weakest_improvement ? fixed(*delta->weakest_improvement, 1) + "%"
                                          : std::string("n/a"))
           << "; largest gain at client " << delta->largest_improvement_client << "\n";
      }
    }
  }

  ReportFiles files{out_dir / "comparison.md", out_dir / "comparison.tsv",
                    out_dir / "per_client.tsv"};
  io::write_file_atomic(files.markdown, md.str());
  io::write_file_atomic(files.table, tsv.str());
  io::write_file_atomic(files.per_client, pc.str());
  return files;
}

}  // namespace fedhf::experiment
