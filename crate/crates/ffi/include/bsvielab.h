#ifndef BSVIELAB_H
#define BSVIELAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of a library call.
 */
typedef enum BsvieStatus {
  BsvieStatus_Ok = 0,
  BsvieStatus_Domain = 1,
  BsvieStatus_Convergence = 2,
  BsvieStatus_NeverAdmissible = 3,
  BsvieStatus_Invalid = 4,
  BsvieStatus_Config = 5,
  BsvieStatus_Io = 6,
  BsvieStatus_Serde = 7,
  BsvieStatus_NullPointer = 8,
  BsvieStatus_Utf8 = 9,
} BsvieStatus;

/**
 * Opaque solved Type-I equation: diagonal means per grid time and, on
 * trees, the defining-equation residual.
 */
typedef struct BsvieSolution BsvieSolution;

/**
 * Opaque discrete noise model (scenario tree or path ensemble).
 */
typedef struct BsvieWorld BsvieWorld;

/**
 * Well-posedness constants at one weight exponent. Fields that are
 * undefined when `M >= 1/2` carry NaN and a cleared flag.
 */
typedef struct BsvieConstants {
  double beta;
  double frak_f;
  double delta_star;
  double kappa;
  double big_m;
  double sigma;
  double sigma_tilde;
  double type2_value;
  bool sigma_defined;
  bool type1_ok;
  bool type1_noy_ok;
  bool type2_ok;
} BsvieConstants;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *bsvie_last_error(void);

/**
 * Evaluates the admissibility constants at `beta` for a clock jump bound.
 *
 * # Safety
 * `out` must point to writable memory for one `BsvieConstants`.
 */
enum BsvieStatus bsvie_constants(double beta, double frak_f, struct BsvieConstants *out);

/**
 * Smallest admissible weight exponent for a condition
 * (`"type1"`, `"type1_noY"` or `"type2"`).
 *
 * # Safety
 * `condition` must be a valid C string and `out` a writable double.
 */
enum BsvieStatus bsvie_min_beta(const char *condition, double frak_f, double *out);

/**
 * Builds an exact scenario tree on a uniform grid.
 * `brownian` is one of `"none"`, `"two-point"`, `"three-point"`.
 *
 * # Safety
 * `marks` and `intensities` must hold `n_marks` doubles each; `out`
 * receives an owned handle to release with [`bsvie_world_free`].
 */
enum BsvieStatus bsvie_world_new_tree(double horizon,
                                      uintptr_t steps,
                                      const char *brownian,
                                      bool extra_noise,
                                      const double *marks,
                                      const double *intensities,
                                      uintptr_t n_marks,
                                      struct BsvieWorld **out);

/**
 * Draws a Monte-Carlo path ensemble on a uniform grid.
 *
 * # Safety
 * Same pointer contract as [`bsvie_world_new_tree`].
 */
enum BsvieStatus bsvie_world_new_ensemble(double horizon,
                                          uintptr_t steps,
                                          bool extra_noise,
                                          const double *marks,
                                          const double *intensities,
                                          uintptr_t n_marks,
                                          uintptr_t n_paths,
                                          uint64_t seed,
                                          struct BsvieWorld **out);

/**
 * Number of grid steps of a world.
 *
 * # Safety
 * `world` must be a live handle.
 */
uintptr_t bsvie_world_n_steps(const struct BsvieWorld *world);

/**
 * Releases a world handle. Null is ignored.
 *
 * # Safety
 * The handle must come from this library and not be used afterwards.
 */
void bsvie_world_free(struct BsvieWorld *world);

/**
 * Solves the Type-I equation of a named data preset on a world.
 * Presets are the same catalog as in the command-line tool.
 *
 * # Safety
 * `world` must be live, `preset` a valid C string; `out` receives an
 * owned handle to release with [`bsvie_solution_free`].
 */
enum BsvieStatus bsvie_solve_type1(const struct BsvieWorld *world,
                                   const char *preset,
                                   double tol,
                                   uintptr_t max_iter,
                                   struct BsvieSolution **out);

/**
 * Value of the diagonal at time zero.
 *
 * # Safety
 * `sol` must be a live handle and `out` writable.
 */
enum BsvieStatus bsvie_solution_y0(const struct BsvieSolution *sol, double *out);

/**
 * Number of grid times covered by the diagonal (steps + 1).
 *
 * # Safety
 * `sol` must be a live handle.
 */
uintptr_t bsvie_solution_len(const struct BsvieSolution *sol);

/**
 * Mean of the diagonal at one grid time.
 *
 * # Safety
 * `sol` must be a live handle and `out` writable.
 */
enum BsvieStatus bsvie_solution_diag_mean(const struct BsvieSolution *sol,
                                          uintptr_t level,
                                          double *out);

/**
 * Defining-equation residual on trees; NaN on ensembles.
 *
 * # Safety
 * `sol` must be a live handle and `out` writable.
 */
enum BsvieStatus bsvie_solution_residual(const struct BsvieSolution *sol, double *out);

/**
 * Releases a solution handle. Null is ignored.
 *
 * # Safety
 * The handle must come from this library and not be used afterwards.
 */
void bsvie_solution_free(struct BsvieSolution *sol);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BSVIELAB_H */
