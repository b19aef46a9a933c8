#include "fedhf/partitions.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "fedhf/error.hpp"
#include "fedhf/io.hpp"
#include "json.hpp"

namespace fedhf::partitions {

using nlohmann::json;

namespace {

// Largest-remainder apportionment of `total` according to `quotas`; ties go to
// the lower index.
std::vector<std::size_t> apportion(std::span<const double> quotas, std::size_t total) {
  std::vector<std::size_t> counts(quotas.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < quotas.size(); ++i) {
    const double whole = std::floor(quotas[i]);
    counts[i] = static_cast<std::size_t>(whole);
    assigned += counts[i];
    remainders.emplace_back(quotas[i] - whole, i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total && k < remainders.size(); ++k, ++assigned) {
    ++counts[remainders[k].second];
  }
  return counts;
}

PartitionManifest deal_identities(std::span<const int> identity_ids,
                                  std::span<const std::size_t> counts, Rng& rng) {
  std::vector<int> shuffled(identity_ids.begin(), identity_ids.end());
  std::sort(shuffled.begin(), shuffled.end());
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  PartitionManifest manifest;
  std::size_t cursor = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    ClientPartition client;
    client.client_id = static_cast<int>(k);
    client.identities.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(cursor),
                             shuffled.begin() + static_cast<std::ptrdiff_t>(cursor + counts[k]));
    std::sort(client.identities.begin(), client.identities.end());
    cursor += counts[k];
    manifest.clients.push_back(std::move(client));
  }
  manifest.identity_universe =
      shuffled.empty() ? 0 : static_cast<std::size_t>(*std::max_element(shuffled.begin(), shuffled.end())) + 1;
  return manifest;
}

void check_identity_ids(std::span<const int> identity_ids, std::size_t num_clients) {
  require(num_clients >= 1, ErrorCategory::config, "number of clients must be >= 1");
  require(num_clients <= identity_ids.size(), ErrorCategory::infeasible_partition,
          "cannot split " + std::to_string(identity_ids.size()) + " identities over " +
              std::to_string(num_clients) + " clients");
  std::set<int> distinct(identity_ids.begin(), identity_ids.end());
  require(distinct.size() == identity_ids.size(), ErrorCategory::config,
          "identity ids must be distinct");
  require(identity_ids.empty() || *distinct.begin() >= 0, ErrorCategory::config,
          "identity ids must be non-negative");
}

std::string describe_rule(const AttributeRule& rule) {
  std::string text = "client " + std::to_string(rule.client_id) + " {";
  bool first = true;
  for (const auto& p : rule.predicates) {
    if (p.value == RuleValue::agnostic) continue;
    text += (first ? "" : ", ") + p.attribute + "=" + (p.value == RuleValue::yes ? "yes" : "no");
    first = false;
  }
  return text + "}";
}

}  // namespace

std::string_view to_string(RuleValue v) {
  switch (v) {
    case RuleValue::yes: return "yes";
    case RuleValue::no: return "no";
    case RuleValue::agnostic: return "agnostic";
  }
  return "agnostic";
}

RuleValue parse_rule_value(std::string_view text) {
  if (text == "yes") return RuleValue::yes;
  if (text == "no") return RuleValue::no;
  if (text == "agnostic") return RuleValue::agnostic;
  fail(ErrorCategory::config, "attribute rule value must be yes/no/agnostic, got '" + std::string(text) + "'");
}

std::size_t SampleTable::attribute_index(std::string_view name) const {
  for (std::size_t a = 0; a < attribute_names.size(); ++a) {
    if (attribute_names[a] == name) return a;
  }
  fail(ErrorCategory::config, "unknown attribute '" + std::string(name) + "'");
}

std::vector<int> SampleTable::identities() const {
  std::vector<int> ids = identity;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::size_t SampleTable::identity_universe() const {
  if (identity.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(identity.begin(), identity.end())) + 1;
}

void SyntheticDatasetSpec::validate() const {
  require(num_identities >= 1, ErrorCategory::config, "dataset.num_identities must be >= 1");
  require(min_samples_per_identity >= 1 && max_samples_per_identity >= min_samples_per_identity,
          ErrorCategory::config, "dataset samples_per_identity range is invalid");
  require(feature_dim >= 1, ErrorCategory::config, "dataset.feature_dim must be >= 1");
  require(attribute_names.size() <= 64, ErrorCategory::config, "at most 64 attributes supported");
  require(center_spread > 0.0, ErrorCategory::config, "dataset.center_spread must be > 0");
  require(attribute_shift >= 0.0 && noise >= 0.0, ErrorCategory::config,
          "dataset attribute_shift and noise must be >= 0");
  require(attribute_prior >= 0.0 && attribute_prior <= 1.0 && attribute_flip >= 0.0 &&
              attribute_flip <= 1.0,
          ErrorCategory::config, "dataset attribute probabilities must lie in [0, 1]");
}

SampleTable generate_synthetic(const SyntheticDatasetSpec& spec) {
  spec.validate();
  Rng rng = make_stream(spec.seed, "synthetic");
  const auto dim = static_cast<Eigen::Index>(spec.feature_dim);
  const double coord_scale = 1.0 / std::sqrt(static_cast<double>(spec.feature_dim));
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<Eigen::RowVectorXd> offsets;
  for (std::size_t a = 0; a < spec.attribute_names.size(); ++a) {
    Eigen::RowVectorXd v(dim);
    for (auto& x : v) x = normal(rng);
    offsets.push_back(v.normalized() * spec.attribute_shift);
  }

  std::bernoulli_distribution carries(spec.attribute_prior);
  std::bernoulli_distribution flips(spec.attribute_flip);
  std::uniform_int_distribution<std::size_t> count(spec.min_samples_per_identity,
                                                   spec.max_samples_per_identity);

  SampleTable table;
  table.attribute_names = spec.attribute_names;
  std::vector<Eigen::RowVectorXd> rows;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    Eigen::RowVectorXd center(dim);
    for (auto& x : center) x = normal(rng) * spec.center_spread * coord_scale;
    std::uint64_t base = 0;
    for (std::size_t a = 0; a < offsets.size(); ++a) {
      if (carries(rng)) base |= std::uint64_t{1} << a;
    }
    const std::size_t n = count(rng);
    for (std::size_t s = 0; s < n; ++s) {
      std::uint64_t bits = base;
      Eigen::RowVectorXd x = center;
      for (std::size_t a = 0; a < offsets.size(); ++a) {
        if (flips(rng)) bits ^= std::uint64_t{1} << a;
        if ((bits >> a) & 1U) x += offsets[a];
      }
      for (auto& v : x) v += normal(rng) * spec.noise * coord_scale;
      table.identity.push_back(static_cast<int>(id));
      table.attributes.push_back(bits);
      rows.push_back(std::move(x));
    }
  }
  table.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) table.features.row(static_cast<Eigen::Index>(i)) = rows[i];
  return table;
}

std::string_view to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::equal: return "equal";
    case Scheme::lognormal: return "lognormal";
    case Scheme::attribute: return "attribute";
  }
  return "equal";
}

Scheme parse_scheme(std::string_view text) {
  if (text == "equal") return Scheme::equal;
  if (text == "lognormal") return Scheme::lognormal;
  if (text == "attribute") return Scheme::attribute;
  fail(ErrorCategory::config, "partition.scheme must be equal/lognormal/attribute, got '" +
                                  std::string(text) + "'");
}

void AttributeRule::validate() const {
  const bool constrained = std::any_of(predicates.begin(), predicates.end(), [](const auto& p) {
    return p.value != RuleValue::agnostic;
  });
  require(constrained, ErrorCategory::config,
          "attribute rule for client " + std::to_string(client_id) +
              " needs at least one non-agnostic predicate");
}

void SplitRatios::validate() const {
  require(train >= 0.0 && val >= 0.0 && test >= 0.0, ErrorCategory::config,
          "split ratios must be non-negative");
  require(std::abs(train + val + test - 1.0) < 1e-9, ErrorCategory::config,
          "split ratios must sum to 1");
}

void PartitionManifest::validate() const {
  std::set<int> seen_identities;
  std::set<std::size_t> seen_samples;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const auto& c = clients[k];
    require(c.client_id == static_cast<int>(k), ErrorCategory::config,
            "manifest clients must be listed in id order");
    for (int id : c.identities) {
      require(seen_identities.insert(id).second, ErrorCategory::config,
              "identity " + std::to_string(id) + " assigned to more than one client");
    }
    for (const auto* split : {&c.train, &c.val, &c.test}) {
      for (std::size_t s : *split) {
        require(seen_samples.insert(s).second, ErrorCategory::config,
                "sample " + std::to_string(s) + " listed more than once");
      }
    }
  }
}

PartitionManifest equal_partition(std::span<const int> identity_ids, std::size_t num_clients,
                                  std::uint64_t seed) {
  check_identity_ids(identity_ids, num_clients);
  const std::size_t n = identity_ids.size();
  std::vector<std::size_t> counts(num_clients, n / num_clients);
  for (std::size_t k = 0; k < n % num_clients; ++k) ++counts[k];
  Rng rng = make_stream(seed, "identity-assignment");
  auto manifest = deal_identities(identity_ids, counts, rng);
  manifest.scheme = Scheme::equal;
  manifest.seed = seed;
  return manifest;
}

std::vector<std::size_t> lognormal_counts(std::size_t num_identities, std::size_t num_clients,
                                          double mu, double sigma, Rng& rng) {
  require(num_clients >= 1 && num_identities >= num_clients, ErrorCategory::infeasible_partition,
          "lognormal partition needs at least one identity per client");
  require(sigma >= 0.0 && std::isfinite(mu), ErrorCategory::config,
          "lognormal parameters must satisfy sigma >= 0");
  std::vector<double> draws(num_clients);
  if (sigma == 0.0) {
    std::fill(draws.begin(), draws.end(), std::exp(mu));
  } else {
    std::lognormal_distribution<double> lognormal(mu, sigma);
    for (double& d : draws) d = lognormal(rng);
  }
  const double total = std::accumulate(draws.begin(), draws.end(), 0.0);
  std::vector<double> quotas(num_clients);
  for (std::size_t k = 0; k < num_clients; ++k) {
    quotas[k] = static_cast<double>(num_identities) * draws[k] / total;
  }
  auto counts = apportion(quotas, num_identities);
  for (std::size_t k = 0; k < num_clients; ++k) {
    if (counts[k] > 0) continue;
    const auto donor = std::max_element(counts.begin(), counts.end());
    --*donor;
    counts[k] = 1;
  }
  return counts;
}

PartitionManifest lognormal_partition(std::span<const int> identity_ids, std::size_t num_clients,
                                      double mu, double sigma, std::uint64_t seed) {
  check_identity_ids(identity_ids, num_clients);
  Rng count_rng = make_stream(seed, "lognormal-draws");
  const auto counts = lognormal_counts(identity_ids.size(), num_clients, mu, sigma, count_rng);
  Rng rng = make_stream(seed, "identity-assignment");
  auto manifest = deal_identities(identity_ids, counts, rng);
  manifest.scheme = Scheme::lognormal;
  manifest.seed = seed;
  manifest.mu = mu;
  manifest.sigma = sigma;
  return manifest;
}

bool rule_matches(const AttributeRule& rule, const SampleTable& table, std::size_t sample) {
  for (const auto& p : rule.predicates) {
    if (p.value == RuleValue::agnostic) continue;
    const bool has = table.has_attribute(sample, table.attribute_index(p.attribute));
    if (has != (p.value == RuleValue::yes)) return false;
  }
  return true;
}

PartitionManifest attribute_partition(const SampleTable& table,
                                      std::span<const AttributeRule> rules,
                                      std::size_t target_size, std::uint64_t seed,
                                      const SplitRatios& ratios) {
  ratios.validate();
  require(!rules.empty(), ErrorCategory::config, "attribute partition needs at least one rule");
  for (std::size_t k = 0; k < rules.size(); ++k) {
    rules[k].validate();
    require(rules[k].client_id == static_cast<int>(k), ErrorCategory::config,
            "attribute rules must be listed for clients 0..K-1 in order");
    for (const auto& p : rules[k].predicates) table.attribute_index(p.attribute);
  }

  std::map<int, std::vector<std::size_t>> rows_by_identity;
  for (std::size_t s = 0; s < table.size(); ++s) rows_by_identity[table.identity[s]].push_back(s);

  // Rule-level feasibility before any assignment.
  for (const auto& rule : rules) {
    bool any = false;
    for (std::size_t s = 0; s < table.size() && !any; ++s) any = rule_matches(rule, table, s);
    require(any, ErrorCategory::empty_client_rule,
            "attribute rule " + describe_rule(rule) + " matches no samples");
  }

  std::vector<int> order = table.identities();
  Rng rng = make_stream(seed, "attribute-assignment");
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t num_clients = rules.size();
  std::vector<std::size_t> sizes(num_clients, 0);
  std::vector<std::vector<std::vector<std::size_t>>> groups(num_clients);
  PartitionManifest manifest;
  manifest.clients.resize(num_clients);
  for (std::size_t k = 0; k < num_clients; ++k) manifest.clients[k].client_id = static_cast<int>(k);

  // matched[k][i]: rows of identity order[i] that satisfy rule k.
  std::vector<std::vector<std::vector<std::size_t>>> matched(
      num_clients, std::vector<std::vector<std::size_t>>(order.size()));
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (std::size_t s : rows_by_identity[order[i]]) {
      for (std::size_t k = 0; k < num_clients; ++k) {
        if (rule_matches(rules[k], table, s)) matched[k][i].push_back(s);
      }
    }
  }
  std::vector<bool> placed(order.size(), false);
  auto place = [&](std::size_t k, std::size_t i) {
    sizes[k] += matched[k][i].size();
    manifest.clients[k].identities.push_back(order[i]);
    groups[k].push_back(matched[k][i]);
    placed[i] = true;
  };

  // Seed every client with its best-matching identity, scarcest rule first, so
  // narrow rules are not starved by broad ones.
  std::vector<std::size_t> candidates(num_clients, 0);
  for (std::size_t k = 0; k < num_clients; ++k) {
    for (const auto& rows : matched[k]) candidates[k] += rows.empty() ? 0 : 1;
  }
  std::vector<std::size_t> rule_order(num_clients);
  std::iota(rule_order.begin(), rule_order.end(), std::size_t{0});
  std::stable_sort(rule_order.begin(), rule_order.end(),
                   [&](std::size_t a, std::size_t b) { return candidates[a] < candidates[b]; });
  for (std::size_t k : rule_order) {
    std::optional<std::size_t> pick;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (placed[i] || matched[k][i].empty()) continue;
      if (!pick || matched[k][i].size() > matched[k][*pick].size()) pick = i;
    }
    if (pick) place(k, *pick);
  }

  for (std::size_t i = 0; i < order.size(); ++i) {
    if (placed[i]) continue;
    // Prefer the client that keeps the most of this identity's samples (capped
    // by the room left under the target), then the one furthest below target.
    std::optional<std::size_t> best;
    double best_deficit = 0.0;
    double best_kept = 0.0;
    for (std::size_t k = 0; k < num_clients; ++k) {
      if (matched[k][i].empty()) continue;
      const double deficit = static_cast<double>(target_size) - static_cast<double>(sizes[k]);
      double kept = static_cast<double>(matched[k][i].size());
      if (target_size > 0) kept = std::clamp(deficit, 0.0, kept);
      if (!best || kept > best_kept || (kept == best_kept && deficit > best_deficit)) {
        best = k;
        best_deficit = deficit;
        best_kept = kept;
      }
    }
    if (!best) continue;
    if (target_size > 0 && best_deficit <= 0.0) continue;
    place(*best, i);
  }

  for (std::size_t k = 0; k < num_clients; ++k) {
    require(!manifest.clients[k].identities.empty(), ErrorCategory::empty_client_rule,
            "attribute rule " + describe_rule(rules[k]) + " received no identities");
    // Keep groups aligned with sorted identities.
    std::vector<std::size_t> idx(groups[k].size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto& ids = manifest.clients[k].identities;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
    std::vector<int> sorted_ids;
    std::vector<std::vector<std::size_t>> sorted_groups;
    for (std::size_t i : idx) {
      sorted_ids.push_back(ids[i]);
      sorted_groups.push_back(std::move(groups[k][i]));
    }
    ids = std::move(sorted_ids);
    Rng split_rng = make_stream(seed, "split-" + std::to_string(k));
    auto lists = stratified_split(sorted_groups, ratios, split_rng);
    manifest.clients[k].train = std::move(lists.train);
    manifest.clients[k].val = std::move(lists.val);
    manifest.clients[k].test = std::move(lists.test);
  }

  manifest.scheme = Scheme::attribute;
  manifest.seed = seed;
  manifest.rules.assign(rules.begin(), rules.end());
  manifest.target_size = target_size;
  manifest.ratios = ratios;
  manifest.identity_universe = table.identity_universe();
  return manifest;
}

SplitSizes split_sizes(std::size_t n, const SplitRatios& ratios) {
  ratios.validate();
  if (n < 2) return {n, 0, 0};
  const double quotas[3] = {static_cast<double>(n) * ratios.train,
                            static_cast<double>(n) * ratios.val,
                            static_cast<double>(n) * ratios.test};
  const auto counts = apportion(quotas, n);
  SplitSizes sizes{counts[0], counts[1], counts[2]};
  if (sizes.test == 0) {
    auto& donor = sizes.val > 0 ? sizes.val : sizes.train;
    --donor;
    ++sizes.test;
  }
  if (sizes.train == 0) {
    auto& donor = sizes.val > 0 ? sizes.val : sizes.test;
    --donor;
    ++sizes.train;
  }
  return sizes;
}

SplitLists stratified_split(std::span<const std::vector<std::size_t>> samples_by_identity,
                            const SplitRatios& ratios, Rng& rng) {
  SplitLists lists;
  for (const auto& group : samples_by_identity) {
    std::vector<std::size_t> shuffled = group;
    std::sort(shuffled.begin(), shuffled.end());
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto sizes = split_sizes(shuffled.size(), ratios);
    auto it = shuffled.begin();
    lists.train.insert(lists.train.end(), it, it + static_cast<std::ptrdiff_t>(sizes.train));
    it += static_cast<std::ptrdiff_t>(sizes.train);
    lists.val.insert(lists.val.end(), it, it + static_cast<std::ptrdiff_t>(sizes.val));
    it += static_cast<std::ptrdiff_t>(sizes.val);
    lists.test.insert(lists.test.end(), it, it + static_cast<std::ptrdiff_t>(sizes.test));
  }
  std::sort(lists.train.begin(), lists.train.end());
  std::sort(lists.val.begin(), lists.val.end());
  std::sort(lists.test.begin(), lists.test.end());
  return lists;
}

void assign_splits(PartitionManifest& manifest, const SampleTable& table,
                   const SplitRatios& ratios) {
  ratios.validate();
  std::map<int, std::vector<std::size_t>> rows_by_identity;
  for (std::size_t s = 0; s < table.size(); ++s) rows_by_identity[table.identity[s]].push_back(s);
  for (auto& client : manifest.clients) {
    std::vector<std::vector<std::size_t>> groups;
    for (int id : client.identities) {
      const auto it = rows_by_identity.find(id);
      require(it != rows_by_identity.end(), ErrorCategory::config,
              "identity " + std::to_string(id) + " has no samples in the dataset");
      groups.push_back(it->second);
    }
    Rng rng = make_stream(manifest.seed, "split-" + std::to_string(client.client_id));
    auto lists = stratified_split(groups, ratios, rng);
    client.train = std::move(lists.train);
    client.val = std::move(lists.val);
    client.test = std::move(lists.test);
  }
  manifest.ratios = ratios;
  manifest.identity_universe = std::max(manifest.identity_universe, table.identity_universe());
}

double gini(std::span<const double> values) {
  if (values.empty()) return 0.0;
  const double total = std::accumulate(values.begin(), values.end(), 0.0);
  if (total <= 0.0) return 0.0;
  double diff = 0.0;
  for (double a : values) {
    for (double b : values) diff += std::abs(a - b);
  }
  const double n = static_cast<double>(values.size());
  return diff / (2.0 * n * total);
}

SkewSummary summarize(const PartitionManifest& manifest) {
  SkewSummary summary;
  std::vector<double> ids;
  std::vector<double> samples;
  for (const auto& c : manifest.clients) {
    summary.identity_counts.push_back(c.identities.size());
    summary.train_counts.push_back(c.train.size());
    summary.test_counts.push_back(c.test.size());
    ids.push_back(static_cast<double>(c.identities.size()));
    samples.push_back(static_cast<double>(c.sample_count()));
  }
  summary.identity_gini = gini(ids);
  summary.sample_gini = gini(samples);
  if (!samples.empty()) {
    const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
    summary.max_min_sample_ratio = *lo > 0.0 ? *hi / *lo : std::numeric_limits<double>::infinity();
  }
  return summary;
}

std::string serialize_manifest(const PartitionManifest& manifest) {
  json rules = json::array();
  for (const auto& rule : manifest.rules) {
    json predicates = json::array();
    for (const auto& p : rule.predicates) {
      predicates.push_back({p.attribute, to_string(p.value)});
    }
    rules.push_back({{"client", rule.client_id}, {"predicates", predicates}});
  }
  json clients = json::array();
  for (const auto& c : manifest.clients) {
    clients.push_back({{"id", c.client_id},
                       {"identities", c.identities},
                       {"train", c.train},
                       {"val", c.val},
                       {"test", c.test}});
  }
  json doc = {
      {"schema", kManifestSchema},
      {"scheme", to_string(manifest.scheme)},
      {"seed", manifest.seed},
      {"parameters",
       {{"mu", manifest.mu},
        {"sigma", manifest.sigma},
        {"target_size", manifest.target_size},
        {"ratios", {manifest.ratios.train, manifest.ratios.val, manifest.ratios.test}},
        {"rules", rules}}},
      {"identity_universe", manifest.identity_universe},
      {"dataset", {{"file", manifest.dataset_file}, {"hash", manifest.dataset_hash}}},
      {"clients", clients},
  };
  return doc.dump(1) + "\n";
}

PartitionManifest parse_manifest(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCategory::io, std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    require(doc.at("schema").get<std::string>() == kManifestSchema, ErrorCategory::config,
            "unsupported manifest schema '" + doc.at("schema").get<std::string>() + "'");
    PartitionManifest m;
    m.scheme = parse_scheme(doc.at("scheme").get<std::string>());
    m.seed = doc.at("seed").get<std::uint64_t>();
    const auto& params = doc.at("parameters");
    m.mu = params.at("mu").get<double>();
    m.sigma = params.at("sigma").get<double>();
    m.target_size = params.at("target_size").get<std::size_t>();
    const auto ratios = params.at("ratios").get<std::vector<double>>();
    require(ratios.size() == 3, ErrorCategory::config, "manifest ratios need three entries");
    m.ratios = {ratios[0], ratios[1], ratios[2]};
    for (const auto& r : params.at("rules")) {
      AttributeRule rule;
      rule.client_id = r.at("client").get<int>();
      for (const auto& p : r.at("predicates")) {
        rule.predicates.push_back({p.at(0).get<std::string>(),
                                   parse_rule_value(p.at(1).get<std::string>())});
      }
      m.rules.push_back(std::move(rule));
    }
    m.identity_universe = doc.at("identity_universe").get<std::size_t>();
    m.dataset_file = doc.at("dataset").at("file").get<std::string>();
    m.dataset_hash = doc.at("dataset").at("hash").get<std::string>();
    for (const auto& c : doc.at("clients")) {
      ClientPartition client;
      client.client_id = c.at("id").get<int>();
      client.identities = c.at("identities").get<std::vector<int>>();
      client.train = c.at("train").get<std::vector<std::size_t>>();
      client.val = c.at("val").get<std::vector<std::size_t>>();
      client.test = c.at("test").get<std::vector<std::size_t>>();
      m.clients.push_back(std::move(client));
    }
    m.validate();
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCategory::config, std::string("malformed manifest: ") + e.what());
  }
}

std::string serialize_summary(const SkewSummary& summary) {
  json doc = {{"identity_counts", summary.identity_counts},
              {"train_counts", summary.train_counts},
              {"test_counts", summary.test_counts},
              {"identity_gini", summary.identity_gini},
              {"sample_gini", summary.sample_gini},
              {"max_min_sample_ratio", summary.max_min_sample_ratio},
              {"heavy_skew", summary.identity_gini > 0.5}};
  return doc.dump(1) + "\n";
}

std::string serialize_table(const SampleTable& table) {
  std::string out;
  out += "# ";
  out += kSampleTableSchema;
  out += "\n# attributes:";
  for (std::size_t a = 0; a < table.attribute_names.size(); ++a) {
    out += (a == 0 ? " " : ",") + table.attribute_names[a];
  }
  out += "\nsample_id\tidentity_id\tattributes";
  for (std::size_t d = 0; d < table.feature_dim(); ++d) out += "\tf" + std::to_string(d);
  out += "\n";
  for (std::size_t s = 0; s < table.size(); ++s) {
    out += std::to_string(s) + "\t" + std::to_string(table.identity[s]) + "\t";
    if (table.attribute_names.empty()) out += "-";
    for (std::size_t a = 0; a < table.attribute_names.size(); ++a) {
      out += table.has_attribute(s, a) ? '1' : '0';
    }
    for (std::size_t d = 0; d < table.feature_dim(); ++d) {
      out += "\t" + io::format_double(table.features(static_cast<Eigen::Index>(s),
                                                     static_cast<Eigen::Index>(d)));
    }
    out += "\n";
  }
  return out;
}

SampleTable parse_table(std::string_view text) {
  std::vector<std::string_view> lines;
  while (!text.empty()) {
    const auto end = text.find('\n');
    lines.push_back(text.substr(0, end));
    if (end == std::string_view::npos) break;
    text.remove_prefix(end + 1);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  require(lines.size() >= 3, ErrorCategory::io, "sample table is truncated");
  require(lines[0] == "# " + std::string(kSampleTableSchema), ErrorCategory::config,
          "unsupported sample table schema");
  constexpr std::string_view attr_prefix = "# attributes:";
  require(lines[1].starts_with(attr_prefix), ErrorCategory::io,
          "sample table is missing its attribute line");

  auto split = [](std::string_view line, char sep) {
    std::vector<std::string_view> fields;
    while (true) {
      const auto pos = line.find(sep);
      fields.push_back(line.substr(0, pos));
      if (pos == std::string_view::npos) break;
      line.remove_prefix(pos + 1);
    }
    return fields;
  };

  SampleTable table;
  auto names = lines[1].substr(attr_prefix.size());
  if (!names.empty() && names.front() == ' ') names.remove_prefix(1);
  if (!names.empty()) {
    for (auto n : split(names, ',')) table.attribute_names.emplace_back(n);
  }
  const auto header = split(lines[2], '\t');
  require(header.size() >= 3, ErrorCategory::io, "sample table header is malformed");
  const std::size_t dim = header.size() - 3;
  const std::size_t rows = lines.size() - 3;
  table.features.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < rows; ++r) {
    const auto fields = split(lines[r + 3], '\t');
    require(fields.size() == dim + 3, ErrorCategory::io,
            "sample table row " + std::to_string(r) + " has the wrong number of columns");
    require(static_cast<std::size_t>(io::parse_double(fields[0])) == r, ErrorCategory::io,
            "sample ids must be consecutive from 0");
    table.identity.push_back(static_cast<int>(io::parse_double(fields[1])));
    std::uint64_t bits = 0;
    if (!table.attribute_names.empty()) {
      require(fields[2].size() == table.attribute_names.size(), ErrorCategory::io,
              "attribute bit string has the wrong length");
      for (std::size_t a = 0; a < fields[2].size(); ++a) {
        if (fields[2][a] == '1') bits |= std::uint64_t{1} << a;
      }
    }
    table.attributes.push_back(bits);
    for (std::size_t d = 0; d < dim; ++d) {
      table.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) =
          io::parse_double(fields[d + 3]);
    }
  }
  return table;
}

}  // namespace fedhf::partitions
