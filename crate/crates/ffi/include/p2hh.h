#ifndef P2HH_H
#define P2HH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes; the nonzero values up to 6 match the `p2hh` exit codes.
 */
typedef enum P2hhStatus {
  P2HH_STATUS_OK = 0,
  P2HH_STATUS_INTERNAL = 1,
  P2HH_STATUS_CONFIG = 2,
  P2HH_STATUS_INFEASIBLE = 3,
  P2HH_STATUS_LIMIT = 4,
  P2HH_STATUS_LOAD = 5,
  P2HH_STATUS_DIMENSION = 6,
  /**
   * A required pointer argument was null or a string was not UTF-8.
   */
  P2HH_STATUS_INVALID_ARGUMENT = 7,
} P2hhStatus;

typedef enum P2hhMode {
  P2HH_MODE_DRCC = 0,
  P2HH_MODE_GAUSSIAN = 1,
} P2hhMode;

/**
 * Capacities reported by [`p2hh_plan_capacity`].
 */
typedef enum P2hhCapacity {
  /**
   * Electrolysis cell count.
   */
  P2HH_CAPACITY_CELLS = 0,
  /**
   * Converter, MW.
   */
  P2HH_CAPACITY_CONVERTER = 1,
  /**
   * Compressor, kg/h.
   */
  P2HH_CAPACITY_COMPRESSOR = 2,
  /**
   * Hydrogen tank, kg.
   */
  P2HH_CAPACITY_TANK = 3,
  /**
   * Electric boiler, MW.
   */
  P2HH_CAPACITY_BOILER = 4,
} P2hhCapacity;

/**
 * Loaded and validated run configuration.
 */
typedef struct P2hhConfig P2hhConfig;

/**
 * Result of a planning run.
 */
typedef struct P2hhPlan P2hhPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library on the same thread.
 */
const char *p2hh_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *p2hh_version(void);

/**
 * Safety factor of the chance-constraint reformulation.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
enum P2hhStatus p2hh_safety_factor(enum P2hhMode mode, double epsilon, double *out);

/**
 * Loads a TOML run configuration. Relative input paths resolve against
 * the file's directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * memory for one pointer.
 */
enum P2hhStatus p2hh_config_load(const char *path, struct P2hhConfig **out);

/**
 * Releases a configuration; null is ignored.
 *
 * # Safety
 * `config` must be null or a handle from [`p2hh_config_load`] not yet freed.
 */
void p2hh_config_free(struct P2hhConfig *config);

/**
 * Redirects artifacts to `dir`.
 *
 * # Safety
 * `config` must be a live handle and `dir` a NUL-terminated string.
 */
enum P2hhStatus p2hh_config_set_output(struct P2hhConfig *config, const char *dir);

/**
 * Sets the chance-constraint mode and violation probability. The
 * configuration is revalidated; on failure it is left unchanged.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum P2hhStatus p2hh_config_set_mode(struct P2hhConfig *config, enum P2hhMode mode, double epsilon);

/**
 * Enables or disables the two flexibility options.
 *
 * # Safety
 * `config` must be a live handle.
 */
enum P2hhStatus p2hh_config_set_flexibility(struct P2hhConfig *config, bool p2hh, bool boiler);

/**
 * Compiles and solves, writing the `plan` artifacts to the output
 * directory. A plan handle is returned whenever the solver ran, so
 * `Infeasible` and `Limit` results can still be inspected.
 *
 * # Safety
 * `config` must be a live handle; `out` must point to writable memory
 * for one pointer.
 */
enum P2hhStatus p2hh_plan(const struct P2hhConfig *config, struct P2hhPlan **out);

/**
 * Releases a plan; null is ignored.
 *
 * # Safety
 * `plan` must be null or a handle from [`p2hh_plan`] not yet freed.
 */
void p2hh_plan_free(struct P2hhPlan *plan);

/**
 * Whether the plan was solved to optimality.
 *
 * # Safety
 * `plan` must be null or a live handle.
 */
bool p2hh_plan_is_optimal(const struct P2hhPlan *plan);

/**
 * Annualized cost, relative gap and explored nodes of the plan. Any
 * output pointer may be null.
 *
 * # Safety
 * `plan` must be a live handle; non-null outputs must be writable.
 */
enum P2hhStatus p2hh_plan_objective(const struct P2hhPlan *plan,
                                    double *objective,
                                    double *gap,
                                    size_t *nodes);

/**
 * Built capacity of an optimal plan.
 *
 * # Safety
 * `plan` must be a live handle and `out` writable.
 */
enum P2hhStatus p2hh_plan_capacity(const struct P2hhPlan *plan,
                                   enum P2hhCapacity which,
                                   double *out);

/**
 * Path of the written solution CSV, or null when none was written. The
 * string lives as long as the plan.
 *
 * # Safety
 * `plan` must be null or a live handle.
 */
const char *p2hh_plan_solution_path(const struct P2hhPlan *plan);

/**
 * Replays the solution at `solution` on bootstrapped scenarios, writes
 * the `evaluate` artifacts and returns the violation fraction.
 *
 * # Safety
 * `config` must be a live handle, `solution` a NUL-terminated string and
 * `fraction` writable.
 */
enum P2hhStatus p2hh_evaluate(const struct P2hhConfig *config,
                              const char *solution,
                              double *fraction);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* P2HH_H */
