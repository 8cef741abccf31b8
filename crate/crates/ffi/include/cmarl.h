#ifndef CMARL_H
#define CMARL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum CmarlStatus {
  CMARL_STATUS_OK = 0,
  // A required pointer was null.
  CMARL_STATUS_NULL_POINTER = 1,
  // Bad argument, shape or unsatisfied assumption.
  CMARL_STATUS_INVALID_ARGUMENT = 2,
  // Config or JSON could not be parsed or validated.
  CMARL_STATUS_CONFIG = 3,
  // Non-finite values, singular systems or degenerate input.
  CMARL_STATUS_NUMERIC = 4,
  CMARL_STATUS_IO = 5,
  // A panic was caught at the boundary.
  CMARL_STATUS_PANIC = 6,
} CmarlStatus;

// A configured instance: MDP, memberships, features and initial policies.
typedef struct CmarlInstance CmarlInstance;

// Membership matrix Γ (N×K, rows on the simplex).
typedef struct CmarlMembership CmarlMembership;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null. Valid until the next failing
// call on the same thread.
const char *cmarl_last_error_message(void);

void cmarl_clear_error(void);

// Library version as a static NUL-terminated string.
const char *cmarl_version(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void cmarl_string_free(char *s);

// Builds Γ from `n*k` row-major weights.
//
// # Safety
// `data` must point to `n*k` doubles; `out` must be writable.
enum CmarlStatus cmarl_membership_from_rows(const double *data,
                                            size_t n,
                                            size_t k,
                                            struct CmarlMembership **out);

// Samples `n` rows from Dirichlet(`alpha[0..k]`).
//
// # Safety
// `alpha` must point to `k` doubles; `out` must be writable.
enum CmarlStatus cmarl_membership_dirichlet(size_t n,
                                            const double *alpha,
                                            size_t k,
                                            uint64_t seed,
                                            struct CmarlMembership **out);

// # Safety
// `m` must be a live handle.
size_t cmarl_membership_agents(const struct CmarlMembership *m);

// # Safety
// `m` must be a live handle.
size_t cmarl_membership_communities(const struct CmarlMembership *m);

// Copies row `i` into `out[0..len]`; `len` must equal the community count.
//
// # Safety
// `m` must be a live handle and `out` must hold `len` doubles.
enum CmarlStatus cmarl_membership_row(const struct CmarlMembership *m,
                                      size_t i,
                                      double *out,
                                      size_t len);

// Γ as JSON (`{"N":…,"K":…,"rows":[…]}`).
//
// # Safety
// `m` must be a live handle; `out` must be writable.
enum CmarlStatus cmarl_membership_to_json(const struct CmarlMembership *m, char **out);

// # Safety
// `m` must be null or a live handle; it is invalid afterwards.
void cmarl_membership_free(struct CmarlMembership *m);

// Estimates memberships from a dense symmetric 0/1 adjacency matrix
// (`n*n`, row-major) with `k` communities. `threshold <= 0` selects the
// default ratio threshold.
//
// # Safety
// `adjacency` must point to `n*n` doubles; `out` must be writable.
enum CmarlStatus cmarl_estimate_membership(const double *adjacency,
                                           size_t n,
                                           size_t k,
                                           double threshold,
                                           uint64_t seed,
                                           struct CmarlMembership **out);

// Builds the instance described by a JSON config (merged over the preset of
// its `kind`) for one seed.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum CmarlStatus cmarl_instance_new(const char *config_json,
                                    uint64_t seed,
                                    struct CmarlInstance **out);

// # Safety
// `inst` must be a live handle.
size_t cmarl_instance_agents(const struct CmarlInstance *inst);

// # Safety
// `inst` must be a live handle.
size_t cmarl_instance_states(const struct CmarlInstance *inst);

// Copy of the instance's membership matrix.
//
// # Safety
// `inst` must be a live handle; `out` must be writable.
enum CmarlStatus cmarl_instance_membership(const struct CmarlInstance *inst,
                                           struct CmarlMembership **out);

// Exact long-run average reward of the initial policies (small instances
// only).
//
// # Safety
// `inst` must be a live handle; `out` must be writable.
enum CmarlStatus cmarl_instance_average_return(const struct CmarlInstance *inst, double *out);

// Trains the community Q-critic actor-critic on the instance and returns
// the trace as CSV. The instance itself is not modified.
//
// # Safety
// `inst` must be a live handle; `trace_csv` must be writable.
enum CmarlStatus cmarl_instance_train_q(const struct CmarlInstance *inst, char **trace_csv);

// # Safety
// `inst` must be null or a live handle; it is invalid afterwards.
void cmarl_instance_free(struct CmarlInstance *inst);

// Runs a whole experiment as the CLI does. `task` is a subcommand name
// (`train-q`, `train-v`, `train-active`, `compare-baseline`, `oracle`,
// `transfer`, `estimate-membership`). When `out_dir` is non-null it
// overrides the config's output directory. On success `artifacts_json`
// receives the per-seed artifacts and the cross-seed report.
//
// # Safety
// String arguments must be NUL-terminated (`out_dir` may be null);
// `artifacts_json` must be writable.
enum CmarlStatus cmarl_run_experiment(const char *config_json,
                                      const char *task,
                                      const char *out_dir,
                                      char **artifacts_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMARL_H */
