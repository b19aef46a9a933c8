#include "fedhf/fedhf.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <string>
#include <vector>

#include "fedhf/error.hpp"
#include "fedhf/eval.hpp"
#include "fedhf/experiment.hpp"

struct fedhf_experiment {
  fedhf::experiment::ExperimentConfig config;
};

namespace {

thread_local std::string last_error;

static_assert(FEDHF_ERR_CONFIG == static_cast<int>(fedhf::ErrorCategory::config));
static_assert(FEDHF_ERR_INITIALIZATION == static_cast<int>(fedhf::ErrorCategory::initialization));
static_assert(FEDHF_ERR_INTERNAL == static_cast<int>(fedhf::ErrorCategory::internal));

fedhf_status set_error(fedhf_status status, std::string message) {
  last_error = std::move(message);
  return status;
}

template <typename Fn>
fedhf_status guarded(Fn&& fn) {
  try {
    last_error.clear();
    fn();
    return FEDHF_OK;
  } catch (const fedhf::Error& e) {
    return set_error(static_cast<fedhf_status>(e.category()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(FEDHF_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(FEDHF_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(FEDHF_ERR_INTERNAL, "unknown error");
  }
}

char* duplicate(const std::string& text) {
  char* out = static_cast<char*>(std::malloc(text.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, text.c_str(), text.size() + 1);
  return out;
}

void need(const void* p, const char* what) {
  if (p == nullptr) throw fedhf::Error(fedhf::ErrorCategory::config, std::string(what) + " is NULL");
}

#define FEDHF_CHECK_ARG(p)                                                   \
  do {                                                                       \
    if ((p) == nullptr) return set_error(FEDHF_ERR_INVALID_ARGUMENT, #p " is NULL"); \
  } while (0)

}  // namespace

extern "C" {

const char* fedhf_version(void) { return "0.1.0"; }

const char* fedhf_status_string(fedhf_status status) {
  if (status == FEDHF_OK) return "ok";
  if (status == FEDHF_ERR_INVALID_ARGUMENT) return "invalid_argument";
  return fedhf::category_name(static_cast<fedhf::ErrorCategory>(status)).data();
}

const char* fedhf_last_error(void) { return last_error.c_str(); }

void fedhf_string_free(char* text) { std::free(text); }

fedhf_status fedhf_experiment_load(const char* config_path, const char* profile,
                                   fedhf_experiment** out) {
  FEDHF_CHECK_ARG(config_path);
  FEDHF_CHECK_ARG(out);
  *out = nullptr;
  return guarded([&] {
    auto config = fedhf::experiment::load_config(
        config_path, profile ? std::optional<std::string>(profile) : std::nullopt);
    *out = new fedhf_experiment{std::move(config)};
  });
}

fedhf_status fedhf_experiment_from_json(const char* json_text, const char* profile,
                                        fedhf_experiment** out) {
  FEDHF_CHECK_ARG(json_text);
  FEDHF_CHECK_ARG(out);
  *out = nullptr;
  return guarded([&] {
    auto config = fedhf::experiment::parse_config(
        json_text, profile ? std::optional<std::string>(profile) : std::nullopt);
    *out = new fedhf_experiment{std::move(config)};
  });
}

fedhf_status fedhf_experiment_from_profile(const char* profile, fedhf_experiment** out) {
  FEDHF_CHECK_ARG(profile);
  return fedhf_experiment_from_json("{}", profile, out);
}

void fedhf_experiment_free(fedhf_experiment* experiment) { delete experiment; }

fedhf_status fedhf_experiment_set_seed(fedhf_experiment* experiment, uint64_t seed) {
  FEDHF_CHECK_ARG(experiment);
  experiment->config.seed = seed;
  return FEDHF_OK;
}

fedhf_status fedhf_experiment_set_num_seeds(fedhf_experiment* experiment, size_t num_seeds) {
  FEDHF_CHECK_ARG(experiment);
  if (num_seeds == 0) return set_error(FEDHF_ERR_CONFIG, "field num_seeds must be >= 1");
  experiment->config.num_seeds = num_seeds;
  return FEDHF_OK;
}

fedhf_status fedhf_experiment_set_output_dir(fedhf_experiment* experiment, const char* dir) {
  FEDHF_CHECK_ARG(experiment);
  FEDHF_CHECK_ARG(dir);
  if (*dir == '\0') return set_error(FEDHF_ERR_CONFIG, "field output_dir must not be empty");
  experiment->config.output_dir = dir;
  return FEDHF_OK;
}

fedhf_status fedhf_experiment_set_lenient(fedhf_experiment* experiment, int lenient) {
  FEDHF_CHECK_ARG(experiment);
  experiment->config.training.failure_mode =
      lenient ? fedhf::federation::FailureMode::lenient : fedhf::federation::FailureMode::strict;
  return FEDHF_OK;
}

fedhf_status fedhf_experiment_output_dir(const fedhf_experiment* experiment, char** out) {
  FEDHF_CHECK_ARG(experiment);
  FEDHF_CHECK_ARG(out);
  return guarded([&] { *out = duplicate(experiment->config.output_dir); });
}

fedhf_status fedhf_experiment_config_json(const fedhf_experiment* experiment, char** out) {
  FEDHF_CHECK_ARG(experiment);
  FEDHF_CHECK_ARG(out);
  return guarded([&] { *out = duplicate(fedhf::experiment::serialize_config(experiment->config)); });
}

fedhf_status fedhf_experiment_config_hash(const fedhf_experiment* experiment, char** out) {
  FEDHF_CHECK_ARG(experiment);
  FEDHF_CHECK_ARG(out);
  return guarded([&] { *out = duplicate(fedhf::experiment::config_hash(experiment->config)); });
}

fedhf_status fedhf_partition(const fedhf_experiment* experiment, const char* out_dir,
                             char** manifest_path) {
  FEDHF_CHECK_ARG(experiment);
  return guarded([&] {
    const auto files = fedhf::experiment::cmd_partition(
        experiment->config, out_dir ? out_dir : experiment->config.output_dir);
    if (manifest_path) *manifest_path = duplicate(files.manifest.string());
  });
}

fedhf_status fedhf_train(const fedhf_experiment* experiment, const char* manifest_path,
                         const char* out_dir, int force, char** run_records) {
  FEDHF_CHECK_ARG(experiment);
  FEDHF_CHECK_ARG(manifest_path);
  return guarded([&] {
    const auto records = fedhf::experiment::cmd_train(
        experiment->config, manifest_path, out_dir ? out_dir : experiment->config.output_dir,
        force != 0);
    if (run_records) {
      std::string joined;
      for (const auto& r : records) joined += r.string() + "\n";
      *run_records = duplicate(joined);
    }
  });
}

fedhf_status fedhf_evaluate(const char* run_record_path, char** report_path) {
  FEDHF_CHECK_ARG(run_record_path);
  return guarded([&] {
    const auto path = fedhf::experiment::cmd_evaluate(run_record_path);
    if (report_path) *report_path = duplicate(path.string());
  });
}

fedhf_status fedhf_report(const char* const* report_paths, size_t count, const char* out_dir) {
  FEDHF_CHECK_ARG(report_paths);
  FEDHF_CHECK_ARG(out_dir);
  return guarded([&] {
    std::vector<std::filesystem::path> paths;
    for (size_t i = 0; i < count; ++i) {
      need(report_paths[i], "report path");
      paths.emplace_back(report_paths[i]);
    }
    fedhf::experiment::cmd_report(paths, out_dir);
  });
}

fedhf_status fedhf_tar_at_far(const double* genuine, size_t genuine_count, const double* impostor,
                              size_t impostor_count, double far_target, double* tar) {
  FEDHF_CHECK_ARG(genuine);
  FEDHF_CHECK_ARG(impostor);
  FEDHF_CHECK_ARG(tar);
  return guarded([&] {
    *tar = fedhf::eval::tar_at_far({genuine, genuine_count}, {impostor, impostor_count},
                                   far_target);
  });
}

}  // extern "C"
