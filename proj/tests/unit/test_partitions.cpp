#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "doctest.h"
#include "fedhf/error.hpp"
#include "fedhf/partitions.hpp"

using namespace fedhf;
using namespace fedhf::partitions;

namespace {

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

ErrorCategory category_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.category();
  }
  return ErrorCategory::internal;
}

void check_disjoint_cover(const PartitionManifest& m, const std::set<int>& universe) {
  std::set<int> seen;
  for (const auto& c : m.clients) {
    for (int id : c.identities) CHECK(seen.insert(id).second);
  }
  CHECK(seen == universe);
}

SyntheticDatasetSpec attribute_spec(std::uint64_t seed) {
  SyntheticDatasetSpec spec;
  spec.num_identities = 120;
  spec.min_samples_per_identity = 6;
  spec.max_samples_per_identity = 12;
  spec.feature_dim = 8;
  spec.attribute_names = {"male", "eyeglasses", "hat", "young"};
  spec.seed = seed;
  return spec;
}

AttributeRule rule(int client, std::vector<AttributePredicate> preds) {
  return AttributeRule{client, std::move(preds)};
}

}  // namespace

TEST_CASE("equal_partition") {
  SUBCASE("1500 identities over 20 clients gives 75 each") {
    const auto ids = iota_ids(1500);
    const auto m = equal_partition(ids, 20, 7);
    REQUIRE(m.clients.size() == 20);
    for (const auto& c : m.clients) CHECK(c.identities.size() == 75);
    check_disjoint_cover(m, {ids.begin(), ids.end()});
  }
  SUBCASE("one client owns everything") {
    const auto ids = iota_ids(37);
    const auto m = equal_partition(ids, 1, 3);
    REQUIRE(m.clients.size() == 1);
    CHECK(m.clients[0].identities == ids);
  }
  SUBCASE("uneven sizes differ by at most one") {
    for (std::size_t k = 1; k <= 30; ++k) {
      const auto m = equal_partition(iota_ids(101), k, k);
      std::size_t lo = 1000;
      std::size_t hi = 0;
      for (const auto& c : m.clients) {
        lo = std::min(lo, c.identities.size());
        hi = std::max(hi, c.identities.size());
      }
      CHECK(hi - lo <= 1);
    }
  }
  SUBCASE("deterministic for a seed, different across seeds") {
    const auto ids = iota_ids(200);
    CHECK(equal_partition(ids, 10, 5) == equal_partition(ids, 10, 5));
    CHECK_FALSE(equal_partition(ids, 10, 5) == equal_partition(ids, 10, 6));
  }
  SUBCASE("more clients than identities is infeasible") {
    const auto ids = iota_ids(4);
    CHECK(category_of([&] { equal_partition(ids, 5, 1); }) == ErrorCategory::infeasible_partition);
  }
}

TEST_CASE("lognormal_counts: conservation and non-empty clients over 100 seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const auto counts = lognormal_counts(1500, 20, 3.0, 3.0, rng);
    CHECK(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == 1500);
    for (auto c : counts) CHECK(c >= 1);
  }
  Rng tight(1);
  const auto counts = lognormal_counts(20, 20, 3.0, 3.0, tight);
  for (auto c : counts) CHECK(c == 1);
}

TEST_CASE("lognormal_counts: sigma -> 0 degenerates to the equal partition") {
  for (double sigma : {0.0, 1e-9, 1e-6}) {
    for (std::size_t n : {1500UL, 101UL, 20UL}) {
      Rng rng(42);
      const auto counts = lognormal_counts(n, 20, 3.0, sigma, rng);
      const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
      CHECK(*hi - *lo <= 1);
    }
  }
}

TEST_CASE("lognormal skew: heavy tail at mu=3, sigma=3 and Gini grows with sigma") {
  double max_ratio = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto counts = lognormal_counts(1500, 20, 3.0, 3.0, rng);
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    max_ratio = std::max(max_ratio, static_cast<double>(*hi) / static_cast<double>(*lo));
  }
  CHECK(max_ratio > 10.0);

  auto mean_gini = [](double sigma) {
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      Rng rng(1000 + seed);
      const auto counts = lognormal_counts(1500, 20, 3.0, sigma, rng);
      std::vector<double> v(counts.begin(), counts.end());
      total += gini(v);
    }
    return total / 200.0;
  };
  const double g_low = mean_gini(0.5);
  const double g_mid = mean_gini(1.5);
  const double g_high = mean_gini(3.0);
  CHECK(g_low < g_mid);
  CHECK(g_mid < g_high);
}

TEST_CASE("lognormal_partition: disjoint cover and stored parameters") {
  const auto ids = iota_ids(300);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = lognormal_partition(ids, 12, 3.0, 3.0, seed);
    CHECK(m.scheme == Scheme::lognormal);
    CHECK(m.mu == 3.0);
    CHECK(m.sigma == 3.0);
    for (const auto& c : m.clients) CHECK_FALSE(c.identities.empty());
    check_disjoint_cover(m, {ids.begin(), ids.end()});
  }
}

TEST_CASE("gini examples") {
  CHECK(gini(std::vector<double>{5, 5, 5, 5}) == 0.0);
  CHECK(gini(std::vector<double>{0, 0, 0, 4}) == doctest::Approx(0.75));
  CHECK(gini(std::vector<double>{1, 3}) == doctest::Approx(0.25));
}

TEST_CASE("split_sizes examples") {
  CHECK(split_sizes(10, {}) == SplitSizes{7, 1, 2});
  CHECK(split_sizes(3, {}) == SplitSizes{2, 0, 1});
  CHECK(split_sizes(1, {}) == SplitSizes{1, 0, 0});
  CHECK(split_sizes(0, {}) == SplitSizes{0, 0, 0});
}

TEST_CASE("split_sizes: conservation, +-1 of the ratios, train and test for n >= 2") {
  const SplitRatios r;
  for (std::size_t n = 2; n <= 500; ++n) {
    const auto s = split_sizes(n, r);
    CHECK(s.train + s.val + s.test == n);
    CHECK(s.train >= 1);
    CHECK(s.test >= 1);
    const double dn = static_cast<double>(n);
    CHECK(std::abs(static_cast<double>(s.train) - 0.7 * dn) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.val) - 0.1 * dn) <= 1.0);
    CHECK(std::abs(static_cast<double>(s.test) - 0.2 * dn) <= 1.0);
  }
  const SplitRatios odd{0.5, 0.25, 0.25};
  for (std::size_t n = 0; n <= 100; ++n) {
    const auto s = split_sizes(n, odd);
    CHECK(s.train + s.val + s.test == n);
  }
  CHECK(category_of([] { split_sizes(10, SplitRatios{0.5, 0.5, 0.5}); }) == ErrorCategory::config);
}

TEST_CASE("stratified_split keeps every identity in train and test") {
  std::vector<std::vector<std::size_t>> groups;
  std::size_t next = 0;
  for (std::size_t n : {10UL, 3UL, 1UL, 2UL, 17UL}) {
    std::vector<std::size_t> g(n);
    std::iota(g.begin(), g.end(), next);
    next += n;
    groups.push_back(g);
  }
  Rng rng(5);
  const auto lists = stratified_split(groups, {}, rng);
  CHECK(lists.train.size() + lists.val.size() + lists.test.size() == next);
  auto owner = [&](std::size_t s) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (std::find(groups[g].begin(), groups[g].end(), s) != groups[g].end()) return g;
    }
    return groups.size();
  };
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto count = [&](const std::vector<std::size_t>& split) {
      return static_cast<std::size_t>(std::count_if(split.begin(), split.end(), [&](auto s) { return owner(s) == g; }));
    };
    const auto expected = split_sizes(groups[g].size(), {});
    CHECK(count(lists.train) == expected.train);
    CHECK(count(lists.val) == expected.val);
    CHECK(count(lists.test) == expected.test);
  }
  Rng replay(5);
  const auto again = stratified_split(groups, {}, replay);
  CHECK(again.train == lists.train);
  CHECK(again.test == lists.test);
}

TEST_CASE("generate_synthetic") {
  SUBCASE("zero noise and zero attribute shift collapse an identity to one point") {
    auto spec = attribute_spec(1);
    spec.noise = 0.0;
    spec.attribute_shift = 0.0;
    const auto t = generate_synthetic(spec);
    for (std::size_t s = 1; s < t.size(); ++s) {
      if (t.identity[s] == t.identity[s - 1]) {
        CHECK(t.features.row(static_cast<Eigen::Index>(s)) == t.features.row(static_cast<Eigen::Index>(s - 1)));
      }
    }
  }
  SUBCASE("inter-identity distance exceeds intra-identity distance") {
    SyntheticDatasetSpec spec;
    spec.seed = 3;
    const auto t = generate_synthetic(spec);
    double intra = 0.0;
    double inter = 0.0;
    std::size_t n_intra = 0;
    std::size_t n_inter = 0;
    for (std::size_t a = 0; a < t.size(); a += 7) {
      for (std::size_t b = a + 1; b < t.size(); b += 5) {
        const double d = (t.features.row(static_cast<Eigen::Index>(a)) - t.features.row(static_cast<Eigen::Index>(b))).norm();
        if (t.identity[a] == t.identity[b]) {
          intra += d;
          ++n_intra;
        } else {
          inter += d;
          ++n_inter;
        }
      }
    }
    REQUIRE(n_intra > 0);
    CHECK(inter / static_cast<double>(n_inter) > intra / static_cast<double>(n_intra));
  }
  SUBCASE("deterministic per seed") {
    const auto a = generate_synthetic(attribute_spec(9));
    const auto b = generate_synthetic(attribute_spec(9));
    CHECK(a.features == b.features);
    CHECK(a.identity == b.identity);
    CHECK(a.attributes == b.attributes);
  }
  SUBCASE("sample counts lie in the configured range") {
    const auto t = generate_synthetic(attribute_spec(2));
    std::vector<std::size_t> per(120, 0);
    for (int id : t.identity) ++per[static_cast<std::size_t>(id)];
    for (auto n : per) {
      CHECK(n >= 6);
      CHECK(n <= 12);
    }
  }
  SUBCASE("invalid spec") {
    auto spec = attribute_spec(1);
    spec.center_spread = 0.0;
    CHECK(category_of([&] { generate_synthetic(spec); }) == ErrorCategory::config);
  }
}

TEST_CASE("attribute_partition") {
  const auto table = generate_synthetic(attribute_spec(4));
  using P = AttributePredicate;
  const std::vector<AttributeRule> rules = {
      rule(0, {P{"male", RuleValue::yes}, P{"eyeglasses", RuleValue::yes}, P{"hat", RuleValue::no},
               P{"young", RuleValue::yes}}),
      rule(1, {P{"male", RuleValue::no}, P{"hat", RuleValue::agnostic}}),
      rule(2, {P{"male", RuleValue::yes}, P{"young", RuleValue::no}}),
  };

  SUBCASE("samples satisfy their client's rule; identities are disjoint") {
    const auto m = attribute_partition(table, rules, 0, 11);
    REQUIRE(m.clients.size() == 3);
    CHECK_NOTHROW(m.validate());
    std::set<int> ids;
    for (const auto& c : m.clients) {
      for (int id : c.identities) CHECK(ids.insert(id).second);
      for (const auto* split : {&c.train, &c.val, &c.test}) {
        for (auto s : *split) {
          CHECK(rule_matches(rules[static_cast<std::size_t>(c.client_id)], table, s));
          CHECK(std::binary_search(c.identities.begin(), c.identities.end(), table.identity[s]));
        }
      }
    }
    // Every identity with at least one matching sample is placed when uncapped.
    for (int id : table.identities()) {
      bool matches = false;
      for (std::size_t s = 0; s < table.size() && !matches; ++s) {
        if (table.identity[s] != id) continue;
        for (const auto& r : rules) matches = matches || rule_matches(r, table, s);
      }
      CHECK(ids.count(id) == (matches ? 1U : 0U));
    }
  }
  SUBCASE("Table II client 1 rule selects male, glasses, no hat, young samples") {
    const auto m = attribute_partition(table, rules, 0, 11);
    const auto male = table.attribute_index("male");
    const auto glasses = table.attribute_index("eyeglasses");
    const auto hat = table.attribute_index("hat");
    const auto young = table.attribute_index("young");
    for (auto s : m.clients[0].train) {
      CHECK(table.has_attribute(s, male));
      CHECK(table.has_attribute(s, glasses));
      CHECK_FALSE(table.has_attribute(s, hat));
      CHECK(table.has_attribute(s, young));
    }
  }
  SUBCASE("an agnostic attribute shows up with both values") {
    const auto m = attribute_partition(table, rules, 0, 11);
    const auto hat = table.attribute_index("hat");
    std::set<bool> values;
    for (const auto* split : {&m.clients[1].train, &m.clients[1].val, &m.clients[1].test}) {
      for (auto s : *split) values.insert(table.has_attribute(s, hat));
    }
    CHECK(values.size() == 2);
  }
  SUBCASE("contradictory rule is an empty-client-rule error") {
    auto bad = rules;
    bad[2].predicates = {P{"male", RuleValue::yes}, P{"male", RuleValue::no}};
    CHECK(category_of([&] { attribute_partition(table, bad, 0, 11); }) == ErrorCategory::empty_client_rule);
  }
  SUBCASE("rules need a constrained predicate and known attributes") {
    auto bad = rules;
    bad[1].predicates = {P{"hat", RuleValue::agnostic}};
    CHECK(category_of([&] { attribute_partition(table, bad, 0, 11); }) == ErrorCategory::config);
    bad = rules;
    bad[1].predicates = {P{"beard", RuleValue::yes}};
    CHECK(category_of([&] { attribute_partition(table, bad, 0, 11); }) == ErrorCategory::config);
  }
  SUBCASE("fill-toward-target balances overlapping rules") {
    // Rules 1 and 2 below overlap completely; assignment must balance them.
    const std::vector<AttributeRule> overlap = {
        rule(0, {P{"male", RuleValue::yes}}),
        rule(1, {P{"male", RuleValue::yes}}),
    };
    const auto m = attribute_partition(table, overlap, 0, 2);
    const auto a = m.clients[0].sample_count();
    const auto b = m.clients[1].sample_count();
    CHECK(static_cast<double>(std::max(a, b)) <= 1.2 * static_cast<double>(std::min(a, b)));
  }
  SUBCASE("a target size caps client growth") {
    const auto m = attribute_partition(table, rules, 40, 11);
    for (const auto& c : m.clients) {
      // Admission stops once the target is reached; one identity can overshoot.
      CHECK(c.sample_count() < 40 + 12);
    }
  }
  SUBCASE("deterministic per seed") {
    CHECK(attribute_partition(table, rules, 0, 5) == attribute_partition(table, rules, 0, 5));
  }
  SUBCASE("a narrow rule beside a broad overlapping one still receives identities") {
    const std::vector<AttributeRule> nested = {
        rule(0, {P{"male", RuleValue::yes}}),
        rule(1, {P{"male", RuleValue::yes}, P{"eyeglasses", RuleValue::yes}, P{"hat", RuleValue::no},
                 P{"young", RuleValue::yes}}),
    };
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      CHECK_FALSE(attribute_partition(table, nested, 0, seed).clients[1].identities.empty());
    }
  }
  SUBCASE("identities go where they keep the most samples") {
    // Every sample matches rule 0, so no identity should be split off to rule 1
    // unless that rule keeps as many of its samples.
    const std::vector<AttributeRule> two = {
        rule(0, {P{"hat", RuleValue::agnostic}, P{"male", RuleValue::yes}}),
        rule(1, {P{"male", RuleValue::yes}, P{"young", RuleValue::yes}}),
    };
    const auto m = attribute_partition(table, two, 0, 3);
    std::map<int, std::size_t> rows_of;
    for (auto s = std::size_t{0}; s < table.size(); ++s) {
      if (table.has_attribute(s, table.attribute_index("male"))) ++rows_of[table.identity[s]];
    }
    const auto& c1 = m.clients[1];
    std::map<int, std::size_t> kept;
    for (const auto* split : {&c1.train, &c1.val, &c1.test}) {
      for (auto s : *split) ++kept[table.identity[s]];
    }
    std::size_t seeded_short = 0;
    for (const auto& [id, n] : kept) seeded_short += n < rows_of[id] ? 1 : 0;
    CHECK(seeded_short <= 1);  // only the seeding pick may lose samples
  }
}

TEST_CASE("assign_splits fills each client from its identities") {
  auto spec = attribute_spec(6);
  const auto table = generate_synthetic(spec);
  auto m = equal_partition(table.identities(), 6, 3);
  assign_splits(m, table, {});
  CHECK_NOTHROW(m.validate());
  std::size_t total = 0;
  for (const auto& c : m.clients) {
    total += c.sample_count();
    for (const auto* split : {&c.train, &c.val, &c.test}) {
      for (auto s : *split) CHECK(std::binary_search(c.identities.begin(), c.identities.end(), table.identity[s]));
    }
  }
  CHECK(total == table.size());
}

TEST_CASE("manifest validate rejects overlapping identities") {
  PartitionManifest m;
  m.clients = {ClientPartition{0, {1, 2}, {}, {}, {}}, ClientPartition{1, {2}, {}, {}, {}}};
  CHECK(category_of([&] { m.validate(); }) == ErrorCategory::config);
}

TEST_CASE("manifest and sample table survive serialization") {
  const auto table = generate_synthetic(attribute_spec(8));
  using P = AttributePredicate;
  const std::vector<AttributeRule> rules = {rule(0, {P{"male", RuleValue::yes}}),
                                            rule(1, {P{"male", RuleValue::no}, P{"young", RuleValue::agnostic}})};
  auto m = attribute_partition(table, rules, 0, 4);
  m.dataset_file = "dataset.tsv";
  m.dataset_hash = "0123456789abcdef";
  CHECK(parse_manifest(serialize_manifest(m)) == m);

  const auto back = parse_table(serialize_table(table));
  CHECK(back.identity == table.identity);
  CHECK(back.attributes == table.attributes);
  CHECK(back.attribute_names == table.attribute_names);
  CHECK(back.features == table.features);

  CHECK(category_of([] { parse_manifest("{not json"); }) == ErrorCategory::io);
  CHECK(category_of([] { parse_table("# fedhf.samples/1\n"); }) == ErrorCategory::io);
}
