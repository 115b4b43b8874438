#ifndef REACHGEN_H
#define REACHGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every entry point.
typedef enum RgStatus {
  RG_STATUS_OK = 0,
  RG_STATUS_NULL_POINTER = 1,
  RG_STATUS_INVALID_ARGUMENT = 2,
  RG_STATUS_UNREACHABLE = 3,
  RG_STATUS_SINGULAR = 4,
  RG_STATUS_INFEASIBLE = 5,
  RG_STATUS_NUMERICAL_BLOWUP = 6,
  RG_STATUS_IO = 7,
  RG_STATUS_FORMAT = 8,
  RG_STATUS_PANIC = 9,
} RgStatus;

// Arm parameters.
typedef struct RgArm RgArm;

// Trained 4-50-150-300 decoder with its input normalization.
typedef struct RgDecoder RgDecoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread. The pointer stays
// valid until the next failing call on the same thread.
const char *rg_last_error(void);

// Library version as a static NUL-terminated string.
const char *rg_version(void);

// Creates an arm with the default parameters.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum RgStatus rg_arm_new_default(struct RgArm **out);

// Creates an arm from the `[arm]` section of a TOML config file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum RgStatus rg_arm_from_config(const char *path, struct RgArm **out);

// Releases an arm handle. Null is ignored.
//
// # Safety
// `arm` must come from an `rg_arm_*` constructor and not be used afterwards.
void rg_arm_free(struct RgArm *arm);

// Hand position (m) for joint angles `q` (rad). Both arrays hold 2 values.
//
// # Safety
// `arm` must be a live handle; `q` and `p_out` must point to 2 doubles.
enum RgStatus rg_forward_kinematics(const struct RgArm *arm, const double *q, double *p_out);

// Joint angles reaching hand position `p`; `elbow_sign` is +1 or -1.
//
// # Safety
// `arm` must be a live handle; `p` and `q_out` must point to 2 doubles.
enum RgStatus rg_inverse_kinematics(const struct RgArm *arm,
                                    const double *p,
                                    double elbow_sign,
                                    double *q_out);

// Minimum-norm muscle activations (6 values in [0, 1]) producing joint
// torque `tau` (2 values, N m).
//
// # Safety
// `arm` must be a live handle, `tau` must point to 2 doubles and
// `activations_out` to 6.
enum RgStatus rg_solve_activations(const struct RgArm *arm,
                                   const double *tau,
                                   double *activations_out);

// Minimum-jerk hand positions from `p0` to `pf` over `duration` seconds at
// `t_k = (k + 1) duration / n`. Writes `2 n` doubles (x, y interleaved).
//
// # Safety
// `p0` and `pf` must point to 2 doubles and `positions_out` to `2 n`.
enum RgStatus rg_minjerk_positions(const double *p0,
                                   const double *pf,
                                   double duration,
                                   size_t n,
                                   double *positions_out);

// Final hand position after driving the arm from rest at hand position
// `start` with 300 activations (50 steps x 6 muscles, time-major).
//
// # Safety
// `arm` must be a live handle; `start` and `hand_out` must point to 2
// doubles and `activations` to 300.
enum RgStatus rg_simulate_reach(const struct RgArm *arm,
                                const double *start,
                                const double *activations,
                                double *hand_out);

// Loads a decoder weights file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum RgStatus rg_decoder_load(const char *path, struct RgDecoder **out);

// Releases a decoder handle. Null is ignored.
//
// # Safety
// `decoder` must come from `rg_decoder_load` and not be used afterwards.
void rg_decoder_free(struct RgDecoder *decoder);

// Predicts 300 activations (time-major) for the reach
// `pair = {x0, y0, xf, yf}` (m).
//
// # Safety
// `decoder` must be a live handle, `pair` must point to 4 doubles and
// `activations_out` to 300.
enum RgStatus rg_decoder_predict(const struct RgDecoder *decoder,
                                 const double *pair,
                                 double *activations_out);

// Number of doubles in one activation trajectory.
size_t rg_trajectory_len(void);

// Number of muscles.
size_t rg_muscle_count(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REACHGEN_H */
