#ifndef SEMCERT_H
#define SEMCERT_H

/* Generated with cbindgen:0.26.0 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SemcertStatus {
  SEMCERT_STATUS_OK = 0,
  SEMCERT_STATUS_NULL_ARGUMENT = 1,
  SEMCERT_STATUS_INVALID_UTF8 = 2,
  SEMCERT_STATUS_INVALID_ARGUMENT = 3,
  SEMCERT_STATUS_IO = 4,
  SEMCERT_STATUS_LEDGER_INVALID = 5,
  SEMCERT_STATUS_REPLAY = 6,
  SEMCERT_STATUS_PANIC = 7,
} SemcertStatus;

typedef enum SemcertVerdict {
  SEMCERT_VERDICT_ASSENT = 0,
  SEMCERT_VERDICT_NEUTRAL = 1,
  SEMCERT_VERDICT_DISSENT = 2,
} SemcertVerdict;

/**
 * Opaque ledger handle.
 */
typedef struct SemcertLedger SemcertLedger;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (nul
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator, or 0 if there is none.
 */
size_t semcert_last_error(char *buf, size_t len);

/**
 * One-sided Wilson upper bound for `c` contradictions in `k` comparisons.
 */
enum SemcertStatus semcert_wilson_upper(uint64_t c, uint64_t k, double delta, double *out);

/**
 * Inverse standard normal CDF.
 */
enum SemcertStatus semcert_normal_quantile(double p, double *out);

/**
 * Empty in-memory ledger. Never null.
 */
struct SemcertLedger *semcert_ledger_new(void);

/**
 * Opens (creating if absent) a file-backed ledger. Appends are written
 * through to the file.
 */
enum SemcertStatus semcert_ledger_open(const char *path, struct SemcertLedger **out);

/**
 * Releases a handle. Null is ignored.
 */
void semcert_ledger_free(struct SemcertLedger *ledger);

uint64_t semcert_ledger_len(const struct SemcertLedger *ledger);

/**
 * Appends one witnessed test; its sequence number goes to `out_seq` when
 * that is not null.
 */
enum SemcertStatus semcert_ledger_append(struct SemcertLedger *ledger,
                                         const char *agent,
                                         const char *pei,
                                         const char *term,
                                         enum SemcertVerdict verdict,
                                         uint64_t epoch,
                                         uint64_t *out_seq);

/**
 * `SEMCERT_STATUS_OK` for an intact chain; otherwise
 * `SEMCERT_STATUS_LEDGER_INVALID` with the first bad seq in `invalid_at`.
 */
enum SemcertStatus semcert_ledger_verify(const struct SemcertLedger *ledger, uint64_t *invalid_at);

/**
 * Verifies a ledger file without loading it into a handle.
 */
enum SemcertStatus semcert_verify_file(const char *path, uint64_t *invalid_at);

/**
 * Writes the ledger as JSON lines to `path`.
 */
enum SemcertStatus semcert_ledger_write(const struct SemcertLedger *ledger, const char *path);

/**
 * Replays the certification of `epoch` and returns the certified core as
 * a JSON string in `out_json`, to be freed with [`semcert_string_free`].
 */
enum SemcertStatus semcert_ledger_replay_json(const struct SemcertLedger *ledger,
                                              double tau,
                                              double delta,
                                              double rho_min,
                                              uint64_t epoch,
                                              char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 */
void semcert_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SEMCERT_H */
