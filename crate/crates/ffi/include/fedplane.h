#ifndef FEDPLANE_H
#define FEDPLANE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FpStatus {
  FP_STATUS_OK = 0,
  FP_STATUS_NULL_ARGUMENT = 1,
  FP_STATUS_INVALID_UTF8 = 2,
  /**
   * An argument was well-formed but not acceptable (unknown method or
   * role, duplicate user, malformed spec, ...).
   */
  FP_STATUS_INVALID_ARGUMENT = 3,
  FP_STATUS_STORAGE = 4,
  /**
   * The harness ran but at least one check failed. The report is
   * still written.
   */
  FP_STATUS_SCENARIO_FAILED = 5,
  FP_STATUS_INTERNAL = 6,
  FP_STATUS_PANIC = 7,
} FpStatus;

/**
 * An open control plane with its request gateway.
 */
typedef struct FpPlane FpPlane;

/**
 * A response returned by [`fp_plane_request`].
 */
typedef struct FpResponse FpResponse;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string. Never free it.
 */
const char *fp_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next `fp_*` call on the same thread.
 */
const char *fp_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void fp_string_free(char *s);

/**
 * Opens a control plane. `config_toml` may be null for defaults; an empty
 * `db_path` keeps all state in memory.
 *
 * # Safety
 * `config_toml` must be null or a valid string; `out` must be writable.
 */
enum FpStatus fp_plane_open(const char *config_toml, struct FpPlane **out);

/**
 * Closes a plane opened by [`fp_plane_open`]. Null is ignored.
 *
 * # Safety
 * `plane` must not be used afterwards.
 */
void fp_plane_close(struct FpPlane *plane);

/**
 * Creates an account. `role` is `ADMIN`, `OWNER` or `EXPERIMENTER`.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum FpStatus fp_plane_add_user(const struct FpPlane *plane,
                                const char *username,
                                const char *credential,
                                const char *role);

/**
 * Runs one maintenance pass (liveness, command timeouts, sessions,
 * reservations).
 *
 * # Safety
 * `plane` must be valid.
 */
enum FpStatus fp_plane_sweep(const struct FpPlane *plane);

/**
 * Sends one API request through the gateway. `bearer` and `body` may be
 * null. A request the API rejects still returns [`FpStatus::Ok`] with an
 * error response; inspect [`fp_response_status`].
 *
 * # Safety
 * `body` must be valid for `body_len` bytes when non-null; `out` writable.
 */
enum FpStatus fp_plane_request(const struct FpPlane *plane,
                               const char *method,
                               const char *path,
                               const char *bearer,
                               const uint8_t *body,
                               size_t body_len,
                               struct FpResponse **out);

/**
 * HTTP-style status code of a response.
 *
 * # Safety
 * `resp` must be valid.
 */
uint16_t fp_response_status(const struct FpResponse *resp);

/**
 * Borrowed pointer to the response body; `len` receives its length.
 * Valid until the response is freed.
 *
 * # Safety
 * `resp` must be valid; `len` writable or null.
 */
const uint8_t *fp_response_body(const struct FpResponse *resp, size_t *len);

/**
 * Value of a response header as an owned string, or null when absent.
 *
 * # Safety
 * `resp` and `name` must be valid.
 */
char *fp_response_header(const struct FpResponse *resp, const char *name);

/**
 * Releases a response. Null is ignored.
 *
 * # Safety
 * `resp` must not be used afterwards.
 */
void fp_response_free(struct FpResponse *resp);

/**
 * Runs a harness scenario given as TOML and renders the report in
 * `format` (`table`, `csv` or `json`). On [`FpStatus::Ok`] and
 * [`FpStatus::ScenarioFailed`] `out_report` receives the rendered report.
 *
 * # Safety
 * String arguments must be valid; `out_report` writable.
 */
enum FpStatus fp_harness_run(const char *spec_toml, const char *format, char **out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDPLANE_H */
