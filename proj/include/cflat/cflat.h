/* C interface to the cflat library. Every call returns a cflat_status; on
 * failure the message and a JSON error object can be read back with
 * cflat_last_error() / cflat_last_error_json() on the same thread. */
#ifndef CFLAT_CFLAT_H
#define CFLAT_CFLAT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CFLAT_API __declspec(dllexport)
#else
#define CFLAT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cflat_status {
    CFLAT_OK = 0,
    CFLAT_E_INVALID = 1,
    CFLAT_E_DIMENSION = 2,
    CFLAT_E_DIVERGENCE = 3,
    CFLAT_E_CONFIG = 4,
    CFLAT_E_IO = 5,
    CFLAT_E_INTERNAL = 6
} cflat_status;

typedef struct cflat_objective cflat_objective;
typedef struct cflat_batch cflat_batch;

typedef struct cflat_optim_config {
    double eta;
    double rho;
    double lambda;
    double eps_guard;
} cflat_optim_config;

typedef struct cflat_step_stats {
    double loss;
    double sq_grad_norm;
    int used_cflat;
    int grad_evals;
    int hvp_evals;
} cflat_step_stats;

CFLAT_API const char* cflat_version(void);
CFLAT_API const char* cflat_last_error(void);
CFLAT_API const char* cflat_last_error_json(void);
CFLAT_API const char* cflat_status_name(cflat_status status);

CFLAT_API cflat_optim_config cflat_optim_config_default(void);

/* Objectives. The hessian is row-major n x n and must be symmetric. */
CFLAT_API cflat_status cflat_quadratic_new(size_t n, const double* hessian, const double* center,
                                           cflat_objective** out);
CFLAT_API cflat_status cflat_logreg_new(size_t d_in, size_t classes, double l2, cflat_objective** out);
/* widths includes input and output; activation is "tanh" or "relu". */
CFLAT_API cflat_status cflat_mlp_new(const size_t* widths, size_t n_widths, const char* activation, double l2,
                                     cflat_objective** out);
CFLAT_API void cflat_objective_free(cflat_objective* objective);
CFLAT_API size_t cflat_objective_dim(const cflat_objective* objective);
/* Glorot-style initialization for MLPs, zeros otherwise. */
CFLAT_API cflat_status cflat_objective_init(const cflat_objective* objective, uint64_t seed, double* theta_out);

/* Features are row-major n x d_in. */
CFLAT_API cflat_status cflat_batch_new(size_t n, size_t d_in, const double* features, const int* labels,
                                       cflat_batch** out);
CFLAT_API void cflat_batch_free(cflat_batch* batch);

/* batch may be NULL for the quadratic. */
CFLAT_API cflat_status cflat_loss(const cflat_objective* objective, const double* theta, const cflat_batch* batch,
                                  double* loss_out);
CFLAT_API cflat_status cflat_grad(const cflat_objective* objective, const double* theta, const cflat_batch* batch,
                                  double* grad_out, double* loss_out);
CFLAT_API cflat_status cflat_hvp(const cflat_objective* objective, const double* theta, const double* v,
                                 const cflat_batch* batch, double* hv_out);

/* One step of "sgd", "sam" or "cflat". stats may be NULL. */
CFLAT_API cflat_status cflat_step(const cflat_objective* objective, const char* optimizer,
                                  const cflat_optim_config* config, const double* theta,
                                  const cflat_batch* batch, double* theta_out, cflat_step_stats* stats);

/* Commands. NULL or empty optional arguments keep the config's values;
 * seeds is a list like "0,1,2" or "0-4"; jobs <= 0 keeps the config value. */
CFLAT_API cflat_status cflat_cmd_run(const char* config_path, const char* out_dir, const char* seeds, int jobs);
CFLAT_API cflat_status cflat_cmd_sweep(const char* config_path, const char* const* axes, size_t n_axes,
                                       const char* out_dir, const char* seeds, int jobs);
CFLAT_API cflat_status cflat_cmd_landscape(const char* checkpoint_path, const char* config_path,
                                           const char* out_dir);
CFLAT_API cflat_status cflat_cmd_report(const char* results_dir);

#ifdef __cplusplus
}
#endif

#endif
