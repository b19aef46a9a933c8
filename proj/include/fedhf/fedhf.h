#ifndef FEDHF_FEDHF_H
#define FEDHF_FEDHF_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(FEDHF_BUILDING_LIBRARY)
#    define FEDHF_API __declspec(dllexport)
#  else
#    define FEDHF_API __declspec(dllimport)
#  endif
#else
#  define FEDHF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values match the library's internal error categories. */
typedef enum fedhf_status {
  FEDHF_OK = 0,
  FEDHF_ERR_CONFIG = 1,
  FEDHF_ERR_IO = 2,
  FEDHF_ERR_DEGENERATE_INPUT = 3,
  FEDHF_ERR_INVALID_TARGET = 4,
  FEDHF_ERR_EMPTY_CLIENT = 5,
  FEDHF_ERR_INFEASIBLE_PARTITION = 6,
  FEDHF_ERR_EMPTY_CLIENT_RULE = 7,
  FEDHF_ERR_EVALUATION = 8,
  FEDHF_ERR_PROTOCOL = 9,
  FEDHF_ERR_REPORT = 10,
  FEDHF_ERR_OVERWRITE_REFUSED = 11,
  FEDHF_ERR_INITIALIZATION = 12,
  FEDHF_ERR_INVALID_ARGUMENT = 13,
  FEDHF_ERR_INTERNAL = 99
} fedhf_status;

typedef struct fedhf_experiment fedhf_experiment;

FEDHF_API const char* fedhf_version(void);

/* Short machine-readable name ("config", "io", ...). */
FEDHF_API const char* fedhf_status_string(fedhf_status status);

/* Message of the last failed call on this thread; "" if none. */
FEDHF_API const char* fedhf_last_error(void);

/* Strings returned through char** out-parameters are owned by the caller. */
FEDHF_API void fedhf_string_free(char* text);

/* profile may be NULL to use the one named in the config (default "desk"). */
FEDHF_API fedhf_status fedhf_experiment_load(const char* config_path, const char* profile,
                                             fedhf_experiment** out);
FEDHF_API fedhf_status fedhf_experiment_from_json(const char* json_text, const char* profile,
                                                  fedhf_experiment** out);
FEDHF_API fedhf_status fedhf_experiment_from_profile(const char* profile, fedhf_experiment** out);
FEDHF_API void fedhf_experiment_free(fedhf_experiment* experiment);

FEDHF_API fedhf_status fedhf_experiment_set_seed(fedhf_experiment* experiment, uint64_t seed);
FEDHF_API fedhf_status fedhf_experiment_set_num_seeds(fedhf_experiment* experiment,
                                                      size_t num_seeds);
FEDHF_API fedhf_status fedhf_experiment_set_output_dir(fedhf_experiment* experiment,
                                                       const char* dir);
FEDHF_API fedhf_status fedhf_experiment_set_lenient(fedhf_experiment* experiment, int lenient);

FEDHF_API fedhf_status fedhf_experiment_output_dir(const fedhf_experiment* experiment, char** out);
FEDHF_API fedhf_status fedhf_experiment_config_json(const fedhf_experiment* experiment, char** out);
FEDHF_API fedhf_status fedhf_experiment_config_hash(const fedhf_experiment* experiment, char** out);

/* Writes dataset.tsv, manifest.json and partition_summary.json into out_dir
   (the configured output directory when NULL); returns the manifest path. */
FEDHF_API fedhf_status fedhf_partition(const fedhf_experiment* experiment, const char* out_dir,
                                       char** manifest_path);

/* One run per seed under out_dir/seed-<s>/; run_records receives the
   run_record.json paths separated by newlines (may be NULL). */
FEDHF_API fedhf_status fedhf_train(const fedhf_experiment* experiment, const char* manifest_path,
                                   const char* out_dir, int force, char** run_records);

FEDHF_API fedhf_status fedhf_evaluate(const char* run_record_path, char** report_path);

FEDHF_API fedhf_status fedhf_report(const char* const* report_paths, size_t count,
                                    const char* out_dir);

FEDHF_API fedhf_status fedhf_tar_at_far(const double* genuine, size_t genuine_count,
                                        const double* impostor, size_t impostor_count,
                                        double far_target, double* tar);

#ifdef __cplusplus
}
#endif

#endif
