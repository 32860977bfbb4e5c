#ifndef SRLAB_H
#define SRLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum SrlabStatus {
  SRLAB_STATUS_OK = 0,
  SRLAB_STATUS_NULL_POINTER = 1,
  SRLAB_STATUS_INVALID_ARGUMENT = 2,
  SRLAB_STATUS_BUFFER_TOO_SMALL = 3,
  SRLAB_STATUS_SIMULATION = 4,
  SRLAB_STATUS_SYNTHESIS = 5,
  SRLAB_STATUS_IO = 6,
  SRLAB_STATUS_FORMAT = 7,
  SRLAB_STATUS_INTERNAL = 8,
  SRLAB_STATUS_PANIC = 9,
} SrlabStatus;

// LQR corrective controller designed on the nominal plant.
typedef struct SrlabController SrlabController;

// Safe-region model written by `srlab build-region` (`model.json`).
typedef struct SrlabModel SrlabModel;

// Safety labeling by corrective-recovery rollout on a plant with mass factor
// `delta`, using the default controller, 10 s horizon and tolerance 0.01.
typedef struct SrlabOracle SrlabOracle;

// Three-link pendulum with unit links and masses `delta` times nominal,
// integrated with RK4 at 1 ms over 10 ms control periods.
typedef struct SrlabPlant SrlabPlant;

// Library version, a static NUL-terminated string.
const char *srlab_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the length the full message
// needs including the terminator, 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t srlab_last_error(char *buf, size_t len);

// # Safety
// `out` must be a valid pointer to write the handle to.
enum SrlabStatus srlab_plant_new(double delta, struct SrlabPlant **out);

// # Safety
// `plant` must be null or a handle from [`srlab_plant_new`] not yet freed.
void srlab_plant_free(struct SrlabPlant *plant);

// Advances one control period holding `input` (saturated to the actuator
// limits) constant. `next` receives 6 doubles and may alias `state`.
//
// # Safety
// `state` must point to 6 doubles, `input` to 3 and `next` to 6 writable ones.
enum SrlabStatus srlab_plant_step(const struct SrlabPlant *plant,
                                  const double *state,
                                  const double *input,
                                  double *next);

// Kinetic plus potential energy, potential measured from the hanging configuration.
//
// # Safety
// `state` must point to 6 doubles and `energy` to a writable double.
enum SrlabStatus srlab_plant_energy(const struct SrlabPlant *plant,
                                    const double *state,
                                    double *energy);

// Cartesian position of the tip of link 3.
//
// # Safety
// `state` must point to 6 doubles, `x` and `y` to writable doubles.
enum SrlabStatus srlab_plant_tip(const struct SrlabPlant *plant,
                                 const double *state,
                                 double *x,
                                 double *y);

// `q_diag` (6 doubles) and `r_diag` (3 doubles) may each be null for the
// defaults diag(10, 10, 10, 1, 1, 1) and 0.1 I.
//
// # Safety
// Non-null weight pointers must point to 6 and 3 doubles; `out` must be valid.
enum SrlabStatus srlab_controller_new(const double *q_diag,
                                      const double *r_diag,
                                      struct SrlabController **out);

// # Safety
// `controller` must be null or a handle from [`srlab_controller_new`] not yet freed.
void srlab_controller_free(struct SrlabController *controller);

// Saturated torques `-K x`.
//
// # Safety
// `state` must point to 6 doubles and `input` to 3 writable ones.
enum SrlabStatus srlab_controller_feedback(const struct SrlabController *controller,
                                           const double *state,
                                           double *input);

// The 3 x 6 gain, row major.
//
// # Safety
// `gain` must point to 18 writable doubles.
enum SrlabStatus srlab_controller_gain(const struct SrlabController *controller, double *gain);

// # Safety
// `out` must be a valid pointer to write the handle to.
enum SrlabStatus srlab_oracle_new(double delta, struct SrlabOracle **out);

// # Safety
// `oracle` must be null or a handle from [`srlab_oracle_new`] not yet freed.
void srlab_oracle_free(struct SrlabOracle *oracle);

// Writes 1 (safe) or 0 to `label`.
//
// # Safety
// `state` must point to 6 doubles and `label` to a writable byte.
enum SrlabStatus srlab_oracle_label(const struct SrlabOracle *oracle,
                                    const double *state,
                                    uint8_t *label);

// # Safety
// `path` must be a NUL-terminated string; `out` must be valid.
enum SrlabStatus srlab_model_load(const char *path, struct SrlabModel **out);

// # Safety
// `model` must be null or a handle from [`srlab_model_load`] not yet freed.
void srlab_model_free(struct SrlabModel *model);

// Dimension of the simplified state space; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t srlab_model_output_dim(const struct SrlabModel *model);

// Simplified state of `state`, `len` must equal the output dimension.
//
// # Safety
// `state` must point to 6 doubles and `y` to `len` writable ones.
enum SrlabStatus srlab_model_map_state(const struct SrlabModel *model,
                                       const double *state,
                                       double *y,
                                       size_t len);

// Safety assessment at a simplified state of `len` coordinates.
//
// # Safety
// `y` must point to `len` doubles and `gamma` to a writable double.
enum SrlabStatus srlab_model_gamma(const struct SrlabModel *model,
                                   const double *y,
                                   size_t len,
                                   double *gamma);

// Writes 1 if the state is predicted safe, 0 otherwise.
//
// # Safety
// `state` must point to 6 doubles and `label` to a writable byte.
enum SrlabStatus srlab_model_predict(const struct SrlabModel *model,
                                     const double *state,
                                     uint8_t *label);

#endif  /* SRLAB_H */
