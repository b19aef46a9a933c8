#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedhf/nn.hpp"
#include "fedhf/rng.hpp"

namespace fedhf::partitions {

inline constexpr std::string_view kManifestSchema = "fedhf.partition/1";
inline constexpr std::string_view kSampleTableSchema = "fedhf.samples/1";

// Labelled feature samples. Row i is sample id i.
struct SampleTable {
  std::vector<std::string> attribute_names;
  std::vector<int> identity;
  std::vector<std::uint64_t> attributes;  // bit a set <=> attribute_names[a] present
  nn::Matrix features;

  std::size_t size() const { return identity.size(); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(features.cols()); }
  bool has_attribute(std::size_t sample, std::size_t attribute) const {
    return (attributes[sample] >> attribute) & 1U;
  }
  std::size_t attribute_index(std::string_view name) const;
  // Sorted distinct identity ids.
  std::vector<int> identities() const;
  // One past the largest identity id.
  std::size_t identity_universe() const;
};

struct SyntheticDatasetSpec {
  std::size_t num_identities = 150;
  std::size_t min_samples_per_identity = 20;
  std::size_t max_samples_per_identity = 20;
  std::size_t feature_dim = 64;
  std::vector<std::string> attribute_names;
  double center_spread = 1.0;    // expected norm of an identity centre
  double attribute_shift = 1.0;  // norm of each attribute offset vector
  double noise = 0.5;            // expected norm of per-sample noise
  double attribute_prior = 0.5;  // P(identity carries an attribute)
  double attribute_flip = 0.1;   // P(a sample deviates from its identity's attribute)
  std::uint64_t seed = 0;

  void validate() const;
};

// Identity centres are Gaussian; every set attribute adds a shared offset
// vector, so attribute skew between clients becomes feature skew.
SampleTable generate_synthetic(const SyntheticDatasetSpec& spec);

enum class Scheme { equal, lognormal, attribute };
std::string_view to_string(Scheme scheme);
Scheme parse_scheme(std::string_view text);

enum class RuleValue { yes, no, agnostic };
std::string_view to_string(RuleValue value);
RuleValue parse_rule_value(std::string_view text);

struct AttributePredicate {
  std::string attribute;
  RuleValue value = RuleValue::agnostic;

  friend bool operator==(const AttributePredicate&, const AttributePredicate&) = default;
};

struct AttributeRule {
  int client_id = 0;
  std::vector<AttributePredicate> predicates;

  void validate() const;
  friend bool operator==(const AttributeRule&, const AttributeRule&) = default;
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;

  void validate() const;
  friend bool operator==(const SplitRatios&, const SplitRatios&) = default;
};

struct ClientPartition {
  int client_id = 0;
  std::vector<int> identities;  // sorted
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  std::size_t sample_count() const { return train.size() + val.size() + test.size(); }
  friend bool operator==(const ClientPartition&, const ClientPartition&) = default;
};

struct PartitionManifest {
  Scheme scheme = Scheme::equal;
  std::uint64_t seed = 0;
  double mu = 0.0;
  double sigma = 0.0;
  std::vector<AttributeRule> rules;
  std::size_t target_size = 0;
  SplitRatios ratios;
  std::size_t identity_universe = 0;
  std::string dataset_file;  // relative to the manifest's directory
  std::string dataset_hash;
  std::vector<ClientPartition> clients;  // indexed by client id

  // Disjoint identities, each sample in at most one client and one split.
  void validate() const;
  friend bool operator==(const PartitionManifest&, const PartitionManifest&) = default;
};

// Identity-level partitions; sample lists are filled in by assign_splits.
PartitionManifest equal_partition(std::span<const int> identity_ids, std::size_t num_clients,
                                  std::uint64_t seed);

// Per-client identity counts: N * S_i / sum(S), S_i ~ lognormal(mu, sigma),
// largest-remainder rounded and topped up to at least one identity each.
std::vector<std::size_t> lognormal_counts(std::size_t num_identities, std::size_t num_clients,
                                          double mu, double sigma, Rng& rng);

PartitionManifest lognormal_partition(std::span<const int> identity_ids, std::size_t num_clients,
                                      double mu, double sigma, std::uint64_t seed);

// Each identity goes whole to one matching client; only its samples satisfying
// that client's rule are kept. Every rule is first seeded with one identity,
// then identities go where they keep the most samples (capped by the room left
// under target_size), ties to the client furthest below target. With
// target_size == 0 there is no cap.
PartitionManifest attribute_partition(const SampleTable& table,
                                      std::span<const AttributeRule> rules,
                                      std::size_t target_size, std::uint64_t seed,
                                      const SplitRatios& ratios = {});

bool rule_matches(const AttributeRule& rule, const SampleTable& table, std::size_t sample);

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;

  friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

// Largest-remainder split of n samples; identities with >= 2 samples always
// get at least one train and one test sample, smaller ones go to train.
SplitSizes split_sizes(std::size_t n, const SplitRatios& ratios);

struct SplitLists {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

SplitLists stratified_split(std::span<const std::vector<std::size_t>> samples_by_identity,
                            const SplitRatios& ratios, Rng& rng);

// Fills train/val/test of every client from all samples of its identities.
void assign_splits(PartitionManifest& manifest, const SampleTable& table,
                   const SplitRatios& ratios);

double gini(std::span<const double> values);

struct SkewSummary {
  std::vector<std::size_t> identity_counts;
  std::vector<std::size_t> train_counts;
  std::vector<std::size_t> test_counts;
  double identity_gini = 0.0;
  double sample_gini = 0.0;
  double max_min_sample_ratio = 0.0;
};

SkewSummary summarize(const PartitionManifest& manifest);

std::string serialize_manifest(const PartitionManifest& manifest);
PartitionManifest parse_manifest(std::string_view text);
std::string serialize_summary(const SkewSummary& summary);

std::string serialize_table(const SampleTable& table);
SampleTable parse_table(std::string_view text);

}  // namespace fedhf::partitions
