// Command-line front end; talks to the library only through the C API.
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedhf/fedhf.h"

namespace {

struct Common {
  std::string config;
  std::string profile;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> seeds;
  bool lenient = false;
};

int report_failure(fedhf_status status) {
  std::cerr << "error[" << fedhf_status_string(status) << "]: " << fedhf_last_error() << '\n';
  return static_cast<int>(status);
}

std::string take(char* text) {
  std::string out = text ? text : "";
  fedhf_string_free(text);
  return out;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)");
  cmd->add_option("-p,--profile", c.profile, "desk or paper; overrides the config's profile");
  cmd->add_option("-o,--out", c.out, "output directory (overrides config and FEDHF_OUTPUT_DIR)");
  cmd->add_option("-s,--seed", c.seed, "master seed override");
}

// Loads the experiment and applies command-line overrides.
fedhf_status open(const Common& c, fedhf_experiment** exp) {
  const char* profile = c.profile.empty() ? nullptr : c.profile.c_str();
  fedhf_status st = c.config.empty()
                        ? fedhf_experiment_from_profile(profile ? profile : "desk", exp)
                        : fedhf_experiment_load(c.config.c_str(), profile, exp);
  if (st != FEDHF_OK) return st;
  if (c.seed) st = fedhf_experiment_set_seed(*exp, *c.seed);
  if (st == FEDHF_OK && c.seeds) st = fedhf_experiment_set_num_seeds(*exp, *c.seeds);
  if (st == FEDHF_OK && !c.out.empty()) st = fedhf_experiment_set_output_dir(*exp, c.out.c_str());
  if (st == FEDHF_OK && c.lenient) st = fedhf_experiment_set_lenient(*exp, 1);
  return st;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated face-verification training simulator (FedAvg / HF-MAML)"};
  app.set_version_flag("--version", std::string(fedhf_version()));
  app.require_subcommand(1);

  Common part_opts;
  auto* partition = app.add_subcommand("partition", "generate dataset and client partition");
  add_common(partition, part_opts);

  Common train_opts;
  std::string manifest;
  bool force = false;
  auto* train = app.add_subcommand("train", "run federated training for every seed");
  add_common(train, train_opts);
  train->add_option("-m,--manifest", manifest, "partition manifest")->required();
  train->add_option("--seeds", train_opts.seeds, "number of seeds in the sweep");
  train->add_flag("-f,--force", force, "overwrite existing runs");
  train->add_flag("--lenient", train_opts.lenient, "drop failing clients instead of aborting");

  std::vector<std::string> records;
  auto* evaluate = app.add_subcommand("evaluate", "untuned and tuned TAR@FAR reports");
  evaluate->add_option("run_records", records, "run_record.json files")->required();

  std::vector<std::string> reports;
  std::string report_out;
  auto* report = app.add_subcommand("report", "aggregate reports into comparison tables");
  report->add_option("reports", reports, "report.json files")->required();
  report->add_option("-o,--out", report_out, "output directory")->required();

  Common config_opts;
  auto* config = app.add_subcommand("config", "print the resolved config and its hash");
  add_common(config, config_opts);

  CLI11_PARSE(app, argc, argv);

  fedhf_experiment* exp = nullptr;
  fedhf_status st = FEDHF_OK;
  if (*partition) {
    st = open(part_opts, &exp);
    char* path = nullptr;
    if (st == FEDHF_OK) st = fedhf_partition(exp, nullptr, &path);
    if (st == FEDHF_OK) std::cout << take(path) << '\n';
  } else if (*train) {
    st = open(train_opts, &exp);
    char* list = nullptr;
    if (st == FEDHF_OK) st = fedhf_train(exp, manifest.c_str(), nullptr, force ? 1 : 0, &list);
    if (st == FEDHF_OK) std::cout << take(list);
  } else if (*evaluate) {
    for (const auto& r : records) {
      char* path = nullptr;
      st = fedhf_evaluate(r.c_str(), &path);
      if (st != FEDHF_OK) break;
      std::cout << take(path) << '\n';
    }
  } else if (*report) {
    std::vector<const char*> ptrs;
    for (const auto& r : reports) ptrs.push_back(r.c_str());
    st = fedhf_report(ptrs.data(), ptrs.size(), report_out.c_str());
    if (st == FEDHF_OK) std::cout << report_out << "/comparison.md\n";
  } else if (*config) {
    st = open(config_opts, &exp);
    char* text = nullptr;
    char* hash = nullptr;
    if (st == FEDHF_OK) st = fedhf_experiment_config_json(exp, &text);
    if (st == FEDHF_OK) st = fedhf_experiment_config_hash(exp, &hash);
    if (st == FEDHF_OK) std::cout << take(text) << "config_hash: " << take(hash) << '\n';
  }
  fedhf_experiment_free(exp);
  return st == FEDHF_OK ? 0 : report_failure(st);
}
