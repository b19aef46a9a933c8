#include "fedhf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "fedhf/error.hpp"

namespace fedhf::eval {

std::vector<VerificationPair> sample_verification_pairs(std::span<const LabeledSample> own,
                                                        std::span<const LabeledSample> others,
                                                        std::size_t n_pairs, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < own.size(); ++i) by_identity[own[i].identity].push_back(i);
  std::vector<std::size_t> anchors;  // own samples whose identity has a second sample
  for (const auto& [id, members] : by_identity) {
    if (members.size() >= 2) anchors.insert(anchors.end(), members.begin(), members.end());
  }
  std::sort(anchors.begin(), anchors.end());
  require(!anchors.empty(), ErrorCategory::evaluation,
          "no identity with at least two samples to form genuine pairs");

  std::vector<LabeledSample> pool(own.begin(), own.end());
  pool.insert(pool.end(), others.begin(), others.end());
  const bool mixed =
      std::any_of(pool.begin(), pool.end(), [&](const auto& s) { return s.identity != pool[0].identity; });
  require(mixed, ErrorCategory::evaluation, "impostor pool contains a single identity");

  std::vector<VerificationPair> pairs;
  pairs.reserve(n_pairs);
  const std::size_t genuine = (n_pairs + 1) / 2;
  std::uniform_int_distribution<std::size_t> pick_anchor(0, anchors.size() - 1);
  for (std::size_t p = 0; p < genuine; ++p) {
    const auto& a = own[anchors[pick_anchor(rng)]];
    const auto& members = by_identity[a.identity];
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 2);
    std::size_t j = pick(rng);
    if (own[members[j]].row == a.row) j = members.size() - 1;  // skip the anchor itself
    pairs.push_back({a.row, own[members[j]].row, true});
  }
  std::uniform_int_distribution<std::size_t> pick_own(0, own.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_pool(0, pool.size() - 1);
  for (std::size_t p = genuine; p < n_pairs; ++p) {
    const auto& a = own[pick_own(rng)];
    const LabeledSample* b = &pool[pick_pool(rng)];
    while (b->identity == a.identity) b = &pool[pick_pool(rng)];
    pairs.push_back({a.row, b->row, false});
  }
  return pairs;
}

TarResult tar_at_far_detailed(std::span<const double> genuine, std::span<const double> impostor,
                              double far_target) {
  require(!genuine.empty() && !impostor.empty(), ErrorCategory::evaluation,
          "TAR@FAR needs non-empty genuine and impostor score lists");
  require(far_target > 0.0 && far_target < 1.0, ErrorCategory::config,
          "far_target must lie in (0, 1)");
  std::vector<double> imp(impostor.begin(), impostor.end());
  std::sort(imp.begin(), imp.end(), std::greater<>());
  const auto n = static_cast<double>(imp.size());
  // Largest number of accepted impostors the budget allows.
  std::size_t allowed = 0;
  while (allowed + 1 <= imp.size() && static_cast<double>(allowed + 1) / n <= far_target) {
    ++allowed;
  }
  if (allowed >= imp.size()) {
    const double lowest = std::min(*std::min_element(genuine.begin(), genuine.end()), imp.back());
    return {1.0, lowest, 1.0};
  }
  // Every threshold above the (allowed+1)-th largest impostor score is within
  // budget; the smallest such pooled score accepts exactly the scores above it.
  const double boundary = imp[allowed];
  const auto accepted = static_cast<std::size_t>(std::count_if(
      genuine.begin(), genuine.end(), [&](double s) { return s > boundary; }));
  double threshold = std::numeric_limits<double>::infinity();
  for (double s : genuine) {
    if (s > boundary) threshold = std::min(threshold, s);
  }
  for (double s : imp) {
    if (s > boundary) threshold = std::min(threshold, s);
  }
  const auto false_accepts = static_cast<std::size_t>(
      std::count_if(imp.begin(), imp.end(), [&](double s) { return s > boundary; }));
  return {static_cast<double>(accepted) / static_cast<double>(genuine.size()), threshold,
          static_cast<double>(false_accepts) / n};
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double stddev(std::span<const double> values, bool population) {
  if (values.size() < 2) return 0.0;
  // Shifted by the first value so identical inputs give exactly zero.
  const double shift = values.front();
  double m = 0.0;
  for (double v : values) m += v - shift;
  m /= static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += (v - shift - m) * (v - shift - m);
  const auto denom = static_cast<double>(population ? values.size() : values.size() - 1);
  return std::sqrt(sum / denom);
}

void EvalConfig::validate() const {
  require(far_target > 0.0 && far_target < 1.0, ErrorCategory::config,
          "evaluation.far_target must lie in (0, 1)");
  require(pairs >= 2, ErrorCategory::config, "evaluation.pairs must be >= 2");
  require(repeats >= 1, ErrorCategory::config, "evaluation.repeats must be >= 1");
  if (tune_lr) require(*tune_lr > 0.0, ErrorCategory::config, "evaluation.tune_lr must be > 0");
  if (tune_momentum) {
    require(*tune_momentum >= 0.0 && *tune_momentum < 1.0, ErrorCategory::config,
            "evaluation.tune_momentum must lie in [0, 1)");
  }
}

std::string_view to_string(Cohort cohort) {
  return cohort == Cohort::train ? "train" : "holdout";
}

Cohort parse_cohort(std::string_view text) {
  if (text == "train") return Cohort::train;
  if (text == "holdout") return Cohort::holdout;
  fail(ErrorCategory::config, "cohort must be train or holdout, got '" + std::string(text) + "'");
}

void EvaluationReport::recompute() {
  std::vector<double> scores;
  for (auto& c : clients) {
    c.tar = eval::mean(c.repeats);
    scores.push_back(c.tar);
  }
  mean = eval::mean(scores);
  std = stddev(scores, population_std);
}

namespace {

const std::vector<std::size_t>& split_of(const partitions::ClientPartition& c, Split split) {
  return split == Split::val ? c.val : c.test;
}

}  // namespace

ClientScore evaluate_client(const Embedder& embed, int client_id,
                            const partitions::PartitionManifest& manifest,
                            const partitions::SampleTable& table, Split split,
                            const EvalConfig& config, std::size_t repeats, Rng& rng) {
  require(client_id >= 0 && static_cast<std::size_t>(client_id) < manifest.clients.size(),
          ErrorCategory::config, "unknown client " + std::to_string(client_id));
  // Pool layout: the client's own samples first, then every other client's.
  std::vector<std::size_t> rows;
  std::vector<LabeledSample> own;
  std::vector<LabeledSample> others;
  for (std::size_t s : split_of(manifest.clients[static_cast<std::size_t>(client_id)], split)) {
    own.push_back({rows.size(), table.identity[s]});
    rows.push_back(s);
  }
  for (const auto& c : manifest.clients) {
    if (c.client_id == client_id) continue;
    for (std::size_t s : split_of(c, split)) {
      others.push_back({rows.size(), table.identity[s]});
      rows.push_back(s);
    }
  }
  require(!own.empty(), ErrorCategory::evaluation,
          "client " + std::to_string(client_id) + " has no evaluation samples");

  const nn::Matrix embeddings = embed(client_id, rows);
  ClientScore score;
  score.client_id = client_id;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto pairs = sample_verification_pairs(own, others, config.pairs, rng);
    std::vector<double> genuine;
    std::vector<double> impostor;
    for (const auto& p : pairs) {
      const auto a = embeddings.row(static_cast<Eigen::Index>(p.a));
      const auto b = embeddings.row(static_cast<Eigen::Index>(p.b));
      const double s = nn::cosine_similarity(std::span<const double>(a.data(), a.size()),
                                             std::span<const double>(b.data(), b.size()));
      (p.genuine ? genuine : impostor).push_back(s);
    }
    score.repeats.push_back(tar_at_far(genuine, impostor, config.far_target));
  }
  score.tar = mean(score.repeats);
  return score;
}

EvaluationReport evaluate_cohort(const Embedder& embed, std::span<const int> cohort_clients,
                                 const partitions::PartitionManifest& manifest,
                                 const partitions::SampleTable& table, Cohort cohort, bool tuned,
                                 const EvalConfig& config, std::uint64_t seed) {
  config.validate();
  EvaluationReport report;
  report.cohort = cohort;
  report.tuned = tuned;
  report.far_target = config.far_target;
  report.pairs = config.pairs;
  report.num_repeats = config.repeats;
  report.seed = seed;
  report.population_std = config.population_std;
  std::vector<int> ids(cohort_clients.begin(), cohort_clients.end());
  std::sort(ids.begin(), ids.end());
  for (int id : ids) {
    // Same pair draws for tuned and untuned models of a client.
    Rng rng = make_stream(seed, "eval-client-" + std::to_string(id));
    report.clients.push_back(
        evaluate_client(embed, id, manifest, table, Split::test, config, config.repeats, rng));
  }
  report.recompute();
  return report;
}

DeltaReport per_client_delta_report(const EvaluationReport& before,
                                    const EvaluationReport& after) {
  require(before.cohort == after.cohort, ErrorCategory::report,
          "delta report across different cohorts");
  require(before.far_target == after.far_target, ErrorCategory::report,
          "delta report across different far targets");
  require(before.clients.size() == after.clients.size(), ErrorCategory::report,
          "delta report across different client sets");
  DeltaReport report;
  double weakest = std::numeric_limits<double>::infinity();
  double best_gain = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < before.clients.size(); ++i) {
    const auto& a = before.clients[i];
    const auto& b = after.clients[i];
    require(a.client_id == b.client_id, ErrorCategory::report,
            "delta report across different client sets");
    ClientDelta d{a.client_id, a.tar, b.tar, std::nullopt};
    if (a.tar > 0.0) d.percent = 100.0 * (b.tar - a.tar) / a.tar;
    if (a.tar < weakest) {
      weakest = a.tar;
      report.weakest_client = a.client_id;
      report.weakest_improvement = d.percent;
    }
    if (d.percent && *d.percent > best_gain) {
      best_gain = *d.percent;
      report.largest_improvement_client = a.client_id;
    }
    report.clients.push_back(d);
  }
  return report;
}

}  // namespace fedhf::eval
