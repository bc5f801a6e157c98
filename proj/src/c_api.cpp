#include "cflat/cflat.h"

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "cflat/error.hpp"
#include "cflat/objective.hpp"
#include "cflat/optim.hpp"
#include "cflat/runner.hpp"

struct cflat_objective {
    std::unique_ptr<cflat::Objective> impl;
    bool is_mlp = false;
};

struct cflat_batch {
    cflat::Batch impl;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_error_json = "{}";

void set_error(cflat_status status, const std::string& type, const std::string& message,
               const nlohmann::json& extra = nlohmann::json::object()) {
    g_error = message;
    nlohmann::json err = {{"status", cflat_status_name(status)}, {"type", type}, {"message", message}};
    for (const auto& [k, v] : extra.items()) err[k] = v;
    g_error_json = nlohmann::json{{"error", err}}.dump();
}

template <class F>
cflat_status guarded(F&& f) {
    g_error.clear();
    g_error_json = "{}";
    try {
        f();
        return CFLAT_OK;
    } catch (const cflat::ConfigError& e) {
        set_error(CFLAT_E_CONFIG, "ConfigError", e.what(), {{"field", e.field()}});
        return CFLAT_E_CONFIG;
    } catch (const cflat::DimensionError& e) {
        set_error(CFLAT_E_DIMENSION, "DimensionError", e.what(), {{"expected", e.expected()}, {"actual", e.actual()}});
        return CFLAT_E_DIMENSION;
    } catch (const cflat::DivergenceError& e) {
        set_error(CFLAT_E_DIVERGENCE, "DivergenceError", e.what(),
                  {{"step", e.step() < 0 ? nlohmann::json(nullptr) : nlohmann::json(e.step())}});
        return CFLAT_E_DIVERGENCE;
    } catch (const cflat::IoError& e) {
        set_error(CFLAT_E_IO, "IoError", e.what());
        return CFLAT_E_IO;
    } catch (const cflat::InvalidArgument& e) {
        set_error(CFLAT_E_INVALID, "InvalidArgument", e.what());
        return CFLAT_E_INVALID;
    } catch (const std::exception& e) {
        set_error(CFLAT_E_INTERNAL, "InternalError", e.what());
        return CFLAT_E_INTERNAL;
    } catch (...) {
        set_error(CFLAT_E_INTERNAL, "InternalError", "unknown exception");
        return CFLAT_E_INTERNAL;
    }
}

void need(const void* p, const char* what) {
    if (p == nullptr) throw cflat::InvalidArgument(std::string(what) + " must not be NULL");
}

cflat::ParamVector vec(const double* data, std::size_t n) { return cflat::ParamVector(std::vector<double>(data, data + n)); }

const cflat::Batch& batch_or_empty(const cflat_batch* b) {
    static const cflat::Batch empty;
    return b ? b->impl : empty;
}

cflat::RunOverrides overrides(const char* out_dir, const char* seeds, int jobs) {
    cflat::RunOverrides o;
    if (out_dir && *out_dir) o.out = out_dir;
    if (seeds && *seeds) o.seeds = cflat::parse_seed_list(seeds);
    if (jobs > 0) o.jobs = jobs;
    return o;
}

}  // namespace

extern "C" {

const char* cflat_version(void) { return "1.0.0"; }
const char* cflat_last_error(void) { return g_error.c_str(); }
const char* cflat_last_error_json(void) { return g_error_json.c_str(); }

const char* cflat_status_name(cflat_status status) {
    switch (status) {
        case CFLAT_OK: return "ok";
        case CFLAT_E_INVALID: return "invalid_argument";
        case CFLAT_E_DIMENSION: return "dimension_mismatch";
        case CFLAT_E_DIVERGENCE: return "divergence";
        case CFLAT_E_CONFIG: return "config_error";
        case CFLAT_E_IO: return "io_error";
        case CFLAT_E_INTERNAL: return "internal_error";
    }
    return "unknown";
}

cflat_optim_config cflat_optim_config_default(void) {
    const cflat::OptimConfig c;
    return {c.eta, c.rho, c.lambda, c.eps_guard};
}

cflat_status cflat_quadratic_new(size_t n, const double* hessian, const double* center, cflat_objective** out) {
    return guarded([&] {
        need(hessian, "hessian");
        need(center, "center");
        need(out, "out");
        auto q = cflat::make_quadratic(cflat::SymmetricMatrix(n, std::vector<double>(hessian, hessian + n * n)),
                                       vec(center, n));
        *out = new cflat_objective{std::make_unique<cflat::QuadraticObjective>(std::move(q)), false};
    });
}

cflat_status cflat_logreg_new(size_t d_in, size_t classes, double l2, cflat_objective** out) {
    return guarded([&] {
        need(out, "out");
        *out = new cflat_objective{std::make_unique<cflat::LogisticObjective>(cflat::make_logreg(d_in, classes, l2)),
                                   false};
    });
}

cflat_status cflat_mlp_new(const size_t* widths, size_t n_widths, const char* activation, double l2,
                           cflat_objective** out) {
    return guarded([&] {
        need(widths, "widths");
        need(out, "out");
        cflat::MlpSpec spec;
        spec.widths.assign(widths, widths + n_widths);
        spec.activation = cflat::parse_activation(activation ? activation : "tanh");
        spec.l2 = l2;
        spec.validate();
        *out = new cflat_objective{std::make_unique<cflat::Mlp>(spec), true};
    });
}

void cflat_objective_free(cflat_objective* objective) { delete objective; }

size_t cflat_objective_dim(const cflat_objective* objective) { return objective ? objective->impl->dim() : 0; }

cflat_status cflat_objective_init(const cflat_objective* objective, uint64_t seed, double* theta_out) {
    return guarded([&] {
        need(objective, "objective");
        need(theta_out, "theta_out");
        const std::size_t d = objective->impl->dim();
        if (objective->is_mlp) {
            cflat::SeededRng rng(seed);
            const auto theta = static_cast<const cflat::Mlp&>(*objective->impl).init_params(rng);
            std::copy(theta.raw().begin(), theta.raw().end(), theta_out);
        } else {
            std::fill(theta_out, theta_out + d, 0.0);
        }
    });
}

cflat_status cflat_batch_new(size_t n, size_t d_in, const double* features, const int* labels, cflat_batch** out) {
    return guarded([&] {
        need(out, "out");
        if (n > 0) {
            need(features, "features");
            need(labels, "labels");
        }
        *out = new cflat_batch{cflat::Batch(d_in, std::vector<double>(features, features + n * d_in),
                                            std::vector<int>(labels, labels + n))};
    });
}

void cflat_batch_free(cflat_batch* batch) { delete batch; }

cflat_status cflat_loss(const cflat_objective* objective, const double* theta, const cflat_batch* batch,
                        double* loss_out) {
    return guarded([&] {
        need(objective, "objective");
        need(theta, "theta");
        need(loss_out, "loss_out");
        *loss_out = objective->impl->loss(vec(theta, objective->impl->dim()), batch_or_empty(batch));
    });
}

cflat_status cflat_grad(const cflat_objective* objective, const double* theta, const cflat_batch* batch,
                        double* grad_out, double* loss_out) {
    return guarded([&] {
        need(objective, "objective");
        need(theta, "theta");
        need(grad_out, "grad_out");
        const auto lg = objective->impl->loss_grad(vec(theta, objective->impl->dim()), batch_or_empty(batch));
        std::copy(lg.grad.raw().begin(), lg.grad.raw().end(), grad_out);
        if (loss_out) *loss_out = lg.loss;
    });
}

cflat_status cflat_hvp(const cflat_objective* objective, const double* theta, const double* v,
                       const cflat_batch* batch, double* hv_out) {
    return guarded([&] {
        need(objective, "objective");
        need(theta, "theta");
        need(v, "v");
        need(hv_out, "hv_out");
        const std::size_t d = objective->impl->dim();
        const auto hv = objective->impl->hvp(vec(theta, d), vec(v, d), batch_or_empty(batch));
        std::copy(hv.raw().begin(), hv.raw().end(), hv_out);
    });
}

cflat_status cflat_step(const cflat_objective* objective, const char* optimizer, const cflat_optim_config* config,
                        const double* theta, const cflat_batch* batch, double* theta_out, cflat_step_stats* stats) {
    return guarded([&] {
        need(objective, "objective");
        need(optimizer, "optimizer");
        need(theta, "theta");
        need(theta_out, "theta_out");
        cflat::OptimConfig cfg;
        if (config) {
            cfg.eta = config->eta;
            cfg.rho = config->rho;
            cfg.lambda = config->lambda;
            cfg.eps_guard = config->eps_guard;
            cfg.rho_min = cfg.rho_max = cfg.rho;
            cfg.eta_min = cfg.eta_max = cfg.eta;
        }
        cfg.validate();
        const auto kind = cflat::parse_optimizer(optimizer);
        const auto x = vec(theta, objective->impl->dim());
        const auto& b = batch_or_empty(batch);
        cflat::StepResult r;
        switch (kind) {
            case cflat::OptimizerKind::sgd: r = cflat::sgd_step(*objective->impl, x, b, cfg); break;
            case cflat::OptimizerKind::sam: r = cflat::sam_step(*objective->impl, x, b, cfg); break;
            case cflat::OptimizerKind::cflat: r = cflat::cflat_step(*objective->impl, x, b, cfg); break;
            default: throw cflat::InvalidArgument("cflat_step supports sgd, sam and cflat; stateful optimizers run via cflat_cmd_run");
        }
        std::copy(r.first.raw().begin(), r.first.raw().end(), theta_out);
        if (stats) *stats = {r.second.loss, r.second.sq_grad_norm, r.second.used_cflat ? 1 : 0, r.second.grad_evals,
                             r.second.hvp_evals};
    });
}

cflat_status cflat_cmd_run(const char* config_path, const char* out_dir, const char* seeds, int jobs) {
    return guarded([&] {
        need(config_path, "config_path");
        cflat::cmd_run(config_path, overrides(out_dir, seeds, jobs));
    });
}

cflat_status cflat_cmd_sweep(const char* config_path, const char* const* axes, size_t n_axes, const char* out_dir,
                             const char* seeds, int jobs) {
    return guarded([&] {
        need(config_path, "config_path");
        if (n_axes > 0) need(axes, "axes");
        std::vector<std::string> list;
        for (size_t i = 0; i < n_axes; ++i) {
            need(axes[i], "axis");
            list.emplace_back(axes[i]);
        }
        cflat::cmd_sweep(config_path, list, overrides(out_dir, seeds, jobs));
    });
}

cflat_status cflat_cmd_landscape(const char* checkpoint_path, const char* config_path, const char* out_dir) {
    return guarded([&] {
        need(checkpoint_path, "checkpoint_path");
        cflat::cmd_landscape(checkpoint_path, config_path ? config_path : "", out_dir ? out_dir : "");
    });
}

cflat_status cflat_cmd_report(const char* results_dir) {
    return guarded([&] {
        need(results_dir, "results_dir");
        cflat::cmd_report(results_dir);
    });
}

}  // extern "C"
