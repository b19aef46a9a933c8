#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>
#include <sstream>

#include "doctest.h"
#include "fedhf/error.hpp"
#include "fedhf/experiment.hpp"
#include "json.hpp"

using namespace fedhf;
using namespace fedhf::experiment;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ErrorCategory category_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.category();
  }
  return ErrorCategory::internal;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fedhf-test-experiment-" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json tiny() {
  return json::parse(R"({
    "seed": 3,
    "num_seeds": 1,
    "dataset": {"synthetic": {"num_identities": 40, "min_samples_per_identity": 10,
                              "max_samples_per_identity": 10, "feature_dim": 8}},
    "partition": {"scheme": "equal", "num_clients": 4, "num_holdout": 1},
    "model": {"hidden_layers": [], "embedding_dim": 4},
    "training": {"rounds": 1, "epochs": 1, "batches_per_epoch": 1, "batch_size": 8,
                 "validation_pairs": 16},
    "evaluation": {"pairs": 16, "repeats": 1, "tune_batches": 1}
  })");
}

ExperimentConfig tiny_config(const json& patch = json::object()) {
  auto doc = tiny();
  doc.merge_patch(patch);
  return parse_config(doc.dump());
}

}  // namespace

TEST_CASE("parse_config: profiles and overrides") {
  const auto desk = parse_config("{}");
  CHECK(desk.profile == "desk");
  CHECK(desk.partition.num_clients == 20);
  CHECK(desk.dataset.synthetic.num_identities == 150);
  CHECK(desk.model.embedding_dim == 32);
  CHECK(desk.training.rounds == 10);
  CHECK(desk.training.epochs == 5);
  CHECK(desk.evaluation.tune_batches == 5);
  CHECK(desk.num_seeds == 10);

  const auto paper = parse_config("{}", "paper");
  CHECK(paper.profile == "paper");
  CHECK(paper.dataset.synthetic.num_identities == 1500);
  CHECK(paper.model.embedding_dim == 512);
  CHECK(paper.training.rounds == 30);
  CHECK(paper.training.epochs == 50);
  CHECK(paper.training.batches_per_epoch == 50);
  CHECK(paper.training.batch_size == 64);
  CHECK(paper.training.optimizer.alpha == 0.01);
  CHECK(paper.training.optimizer.beta == 0.1);
  CHECK(paper.training.optimizer.delta == 0.001);

  const auto patched = parse_config(R"({"training": {"algorithm": "hf_maml", "reg_weight": 0.5}})");
  CHECK(patched.training.algorithm == federation::Algorithm::hf_maml);
  CHECK(patched.training.reg_weight == 0.5);
  CHECK(patched.training.rounds == 10);
}

TEST_CASE("parse_config rejects bad input before any computation, naming the field") {
  auto message_of = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const Error& e) {
      CHECK(e.category() != ErrorCategory::internal);
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message_of(R"({"training": {"optimizer": {"lr": -0.1}}})").find("lr") != std::string::npos);
  CHECK(message_of(R"({"training": {"reg_weight": -1}})").find("reg_weight") != std::string::npos);
  CHECK(message_of(R"({"evaluation": {"far_target": 1.0}})").find("far_target") != std::string::npos);
  CHECK(message_of(R"({"evaluation": {"far_target": 0}})").find("far_target") != std::string::npos);
  CHECK(message_of(R"({"training": {"epochz": 3}})").find("epochz") != std::string::npos);
  CHECK(message_of(R"({"partition": {"scheme": "random"}})").find("scheme") != std::string::npos);
  CHECK(message_of(R"({"training": {"rounds": "ten"}})").find("rounds") != std::string::npos);
  CHECK(category_of([] { parse_config("not json"); }) == ErrorCategory::config);
  CHECK(category_of([] { parse_config(R"({"profile": "huge"})"); }) == ErrorCategory::config);
  CHECK(category_of([] { parse_config(R"({"dataset": {"table": "/nonexistent/table.tsv"}})"); }) ==
        ErrorCategory::io);
}

TEST_CASE("output directory environment override") {
  ::setenv(kOutputDirEnv, "/tmp/fedhf-env-out", 1);
  const auto cfg = parse_config(R"({"output_dir": "elsewhere"})");
  ::unsetenv(kOutputDirEnv);
  CHECK(cfg.output_dir == "/tmp/fedhf-env-out");
  CHECK(parse_config(R"({"output_dir": "elsewhere"})").output_dir == "elsewhere");
}

TEST_CASE("config serialization and hash") {
  const auto cfg = tiny_config();
  CHECK(parse_config(serialize_config(cfg)).training.rounds == cfg.training.rounds);
  CHECK(config_hash(parse_config(serialize_config(cfg))) == config_hash(cfg));
  CHECK(config_hash(cfg).size() == 16);

  auto moved = cfg;
  moved.output_dir = "somewhere/else";
  moved.jobs = 4;
  moved.training.threads = 3;
  CHECK(config_hash(moved) == config_hash(cfg));

  auto reseeded = cfg;
  reseeded.seed = 4;
  CHECK(config_hash(reseeded) != config_hash(cfg));
  auto algo = cfg;
  algo.training.algorithm = federation::Algorithm::hf_maml;
  CHECK(config_hash(algo) != config_hash(cfg));
}

TEST_CASE("sweep seeds are distinct") {
  auto cfg = tiny_config();
  cfg.num_seeds = 10;
  const auto seeds = sweep_seeds(cfg);
  CHECK(seeds.size() == 10);
  CHECK(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == 10);
}

TEST_CASE("cmd_partition") {
  SUBCASE("equal scheme on 1500 identities over 20 clients gives 75 each") {
    const auto cfg = tiny_config(json::parse(R"({
      "dataset": {"synthetic": {"num_identities": 1500, "min_samples_per_identity": 2,
                                "max_samples_per_identity": 2, "feature_dim": 2}},
      "partition": {"num_clients": 20, "num_holdout": 5}})"));
    const auto files = cmd_partition(cfg, scratch("equal1500"));
    const auto manifest = partitions::parse_manifest(slurp(files.manifest));
    REQUIRE(manifest.clients.size() == 20);
    for (const auto& c : manifest.clients) CHECK(c.identities.size() == 75);
  }
  SUBCASE("lognormal summary flags heavy skew; rerun is byte-identical") {
    const auto cfg = tiny_config(json::parse(R"({
      "dataset": {"synthetic": {"num_identities": 300, "min_samples_per_identity": 2,
                                "max_samples_per_identity": 2, "feature_dim": 2}},
      "partition": {"scheme": "lognormal", "num_clients": 20, "num_holdout": 5}})"));
    const auto a = cmd_partition(cfg, scratch("lognormal-a"));
    const auto b = cmd_partition(cfg, scratch("lognormal-b"));
    CHECK(slurp(a.manifest) == slurp(b.manifest));
    CHECK(slurp(a.table) == slurp(b.table));
    const auto summary = json::parse(slurp(a.summary));
    CHECK(summary.at("heavy_skew").get<bool>());
    CHECK(summary.at("identity_gini").get<double>() > 0.5);
  }
  SUBCASE("manifest and table load back with hash verification") {
    const auto cfg = tiny_config();
    const auto dir = scratch("reload");
    const auto files = cmd_partition(cfg, dir);
    const auto loaded = load_partition(files.manifest);
    CHECK(loaded.manifest.clients.size() == 4);
    std::ofstream(files.table, std::ios::app) << "\n";
    CHECK(category_of([&] { load_partition(files.manifest); }) != ErrorCategory::internal);
    CHECK(category_of([&] { load_partition(dir / "missing.json"); }) == ErrorCategory::io);
  }
}

TEST_CASE("cmd_train and cmd_evaluate") {
  const auto cfg = tiny_config();
  const auto dir = scratch("train");
  const auto part = cmd_partition(cfg, dir);

  SUBCASE("zero rounds writes an initialization-only history") {
    auto zero = tiny_config(json::parse(R"({"training": {"rounds": 0}})"));
    const auto records = cmd_train(zero, part.manifest, dir / "zero", false);
    REQUIRE(records.size() == 1);
    const auto history = json::parse(slurp(records[0].parent_path() / "history.json"));
    CHECK(history.at("rounds").size() == 1);
  }
  SUBCASE("sweep writes one record per distinct seed; overwrite needs force") {
    auto three = cfg;
    three.num_seeds = 3;
    const auto records = cmd_train(three, part.manifest, dir / "sweep", false);
    REQUIRE(records.size() == 3);
    std::set<std::uint64_t> seeds;
    for (const auto& r : records) {
      const auto rec = json::parse(slurp(r));
      seeds.insert(rec.at("seed").get<std::uint64_t>());
      CHECK(rec.at("config_hash").get<std::string>() == config_hash(three));
    }
    CHECK(seeds.size() == 3);
    CHECK(category_of([&] { cmd_train(three, part.manifest, dir / "sweep", false); }) ==
          ErrorCategory::overwrite_refused);
    CHECK(cmd_train(three, part.manifest, dir / "sweep", true).size() == 3);
  }
  SUBCASE("both algorithms run from the same manifest; evaluation is complete and repeatable") {
    for (const char* algorithm : {"fedavg", "hf_maml"}) {
      const auto variant = tiny_config(json{{"training", {{"algorithm", algorithm}}}});
      const auto records = cmd_train(variant, part.manifest, dir / algorithm, false);
      REQUIRE(records.size() == 1);
      const auto report_path = cmd_evaluate(records[0]);
      const auto first = slurp(report_path);
      const auto doc = json::parse(first);
      CHECK(doc.at("cohorts").size() == 4);
      std::set<std::pair<std::string, bool>> kinds;
      for (const auto& c : doc.at("cohorts")) {
        kinds.insert({c.at("cohort").get<std::string>(), c.at("tuned").get<bool>()});
      }
      CHECK(kinds.size() == 4);
      CHECK(slurp(cmd_evaluate(records[0])) == first);
      CHECK(fs::exists(report_path.parent_path() / "report_plot.tsv"));
      const auto stored = read_report(report_path);
      CHECK(stored.cohorts.size() == 4);
      CHECK(stored.far_target == 0.1);
    }
  }
  SUBCASE("missing artifacts name the path") {
    const auto records = cmd_train(cfg, part.manifest, dir / "broken", false);
    fs::remove(records[0].parent_path() / "history.json");
    try {
      cmd_evaluate(records[0]);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.category() == ErrorCategory::io);
      CHECK(std::string(e.what()).find("history.json") != std::string::npos);
    }
    CHECK(category_of([&] { cmd_evaluate(dir / "nope" / "run_record.json"); }) == ErrorCategory::io);
  }
  SUBCASE("a tampered run record fails provenance checks") {
    const auto records = cmd_train(cfg, part.manifest, dir / "tamper", false);
    const auto report = cmd_evaluate(records[0]);
    auto rec = json::parse(slurp(records[0]));
    rec["config_hash"] = "0000000000000000";
    std::ofstream(records[0], std::ios::trunc) << rec.dump(1);
    CHECK(category_of([&] { read_report(report); }) != ErrorCategory::internal);
  }
}

TEST_CASE("cmd_report") {
  const auto dir = scratch("report");
  const auto cfg = tiny_config();
  const auto part = cmd_partition(cfg, dir);
  auto run = [&](const json& patch, const std::string& name) {
    const auto variant = tiny_config(patch);
    return cmd_evaluate(cmd_train(variant, part.manifest, dir / name, false).at(0));
  };
  const auto fedavg = run(json{{"training", {{"algorithm", "fedavg"}}}}, "fedavg");
  const auto maml = run(json{{"training", {{"algorithm", "hf_maml"}}}}, "hf_maml");

  SUBCASE("single run: no comparison columns") {
    const std::vector<fs::path> one = {fedavg};
    const auto files = cmd_report(one, dir / "single");
    const auto header = slurp(files.per_client).substr(0, slurp(files.per_client).find('\n'));
    CHECK(header.find("percent") == std::string::npos);
    CHECK(slurp(files.markdown).find("FedAvg - Local") != std::string::npos);
  }
  SUBCASE("two variants: side-by-side rows and per-client percentage deltas") {
    const std::vector<fs::path> both = {maml, fedavg};
    const auto files = cmd_report(both, dir / "pair");
    const auto md = slurp(files.markdown);
    const auto fa = md.find("| FedAvg - Local");
    const auto hf = md.find("| HF-MAML - Local");
    REQUIRE(fa != std::string::npos);
    REQUIRE(hf != std::string::npos);
    CHECK(fa < hf);
    const auto pc = slurp(files.per_client);
    CHECK(pc.find("percent") != std::string::npos);
    CHECK(pc.find("HF-MAML - Local\ttrain\tfalse\t0\t") != std::string::npos);
    CHECK(pc.find("\tFedAvg - Local\t") != std::string::npos);
    CHECK(slurp(cmd_report(both, dir / "pair-again").markdown) == md);
  }
  SUBCASE("mixed far targets are refused") {
    const auto other = run(json{{"evaluation", {{"far_target", 0.2}}}}, "far02");
    const std::vector<fs::path> mixed = {fedavg, other};
    CHECK(category_of([&] { cmd_report(mixed, dir / "mixed"); }) == ErrorCategory::report);
  }
  SUBCASE("no inputs") {
    CHECK(category_of([&] { cmd_report(std::vector<fs::path>{}, dir / "none"); }) == ErrorCategory::report);
  }
}
