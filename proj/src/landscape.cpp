#include "cflat/landscape.hpp"

#include <algorithm>
#include <cmath>

#include "cflat/error.hpp"

namespace cflat {

namespace {

enum ProbeStream : std::uint64_t {
    kTopEigenStream = 1,
    kSecondEigenStream = 2,
    kTraceStream = 3,
    kBallStream = 4,
};

ParamVector apply_deflated(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                           const ParamVector& v, std::span<const EigenEstimate> deflate) {
    ParamVector w = oracle.hvp(theta, v, batch);
    for (const auto& e : deflate) {
        if (e.vector.empty()) continue;
        w = axpy(-e.value * dot(e.vector, v), e.vector, w);
    }
    return w;
}

}  // namespace

EigenEstimate power_iteration(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                              int iters, double tol, SeededRng& rng,
                              std::span<const EigenEstimate> deflate) {
    if (iters < 1) throw InvalidArgument("power iteration needs iters >= 1");
    const std::size_t d = oracle.dim();
    ParamVector v = gaussian_fill(rng, d, 0.0, 1.0);
    for (const auto& e : deflate)
        if (!e.vector.empty()) v = axpy(-dot(e.vector, v), e.vector, v);
    const double v0 = norm2(v);
    if (v0 == 0.0) return {0.0, ParamVector(d), 0, true};
    v = scaled(1.0 / v0, v);

    EigenEstimate out;
    double previous = 0.0;
    for (int it = 1; it <= iters; ++it) {
        const ParamVector w = apply_deflated(oracle, theta, batch, v, deflate);
        const double q = dot(v, w);
        const double wn = norm2(w);
        out.iterations = it;
        if (wn == 0.0) {
            out.value = 0.0;
            out.vector = ParamVector(d);
            out.converged = true;
            return out;
        }
        out.value = q;
        out.vector = v;
        if (it > 1 && std::abs(q - previous) < tol * std::max(1.0, std::abs(q))) {
            out.converged = true;
            break;
        }
        previous = q;
        v = scaled(1.0 / wn, w);
    }
    return out;
}

double power_iter_lambda_max(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                             int iters, double tol, SeededRng& rng) {
    return power_iteration(oracle, theta, batch, iters, tol, rng).value;
}

double hutchinson_trace(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                        int probes, SeededRng& rng) {
    if (probes < 1) throw InvalidArgument("hutchinson_trace needs probes >= 1");
    double acc = 0.0;
    for (int p = 0; p < probes; ++p) {
        const ParamVector z = rademacher_fill(rng, oracle.dim());
        acc += dot(z, oracle.hvp(theta, z, batch));
    }
    return acc / static_cast<double>(probes);
}

std::vector<ParamVector> sample_ball(std::size_t dim, double rho, std::size_t n, SeededRng& rng) {
    std::vector<ParamVector> out;
    out.reserve(n);
    const double inv_d = 1.0 / static_cast<double>(dim);
    while (out.size() < n) {
        ParamVector dir = gaussian_fill(rng, dim, 0.0, 1.0);
        const double len = norm2(dir);
        const double u = rng.uniform();
        if (len == 0.0) continue;
        out.push_back(scaled(rho * std::pow(u, inv_d) / len, dir));
    }
    return out;
}

double r0_bruteforce(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                     double rho, std::size_t n_samples, SeededRng& rng) {
    if (!(rho > 0.0)) throw InvalidArgument("r0_bruteforce needs rho > 0");
    const double base = oracle.loss(theta, batch);
    double best = 0.0;
    for (const auto& eps : sample_ball(theta.size(), rho, n_samples, rng))
        best = std::max(best, oracle.loss(theta + eps, batch) - base);
    return best;
}

double r1_bruteforce(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                     double rho, std::size_t n_samples, SeededRng& rng) {
    if (!(rho > 0.0)) throw InvalidArgument("r1_bruteforce needs rho > 0");
    double best = 0.0;
    for (const auto& eps : sample_ball(theta.size(), rho, n_samples, rng))
        best = std::max(best, norm2(oracle.grad(theta + eps, batch)));
    return rho * best;
}

LossGrid landscape_slice_2d(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                            const ParamVector& dir1, const ParamVector& dir2, double extent,
                            std::size_t grid_n) {
    require_same_dim(theta, dir1, "slice direction 1");
    require_same_dim(theta, dir2, "slice direction 2");
    if (grid_n == 0) throw InvalidArgument("grid_n must be >= 1");
    LossGrid grid;
    grid.coords.resize(grid_n);
    for (std::size_t i = 0; i < grid_n; ++i)
        grid.coords[i] = grid_n == 1 ? 0.0
                                     : -extent + 2.0 * extent * static_cast<double>(i) /
                                                     static_cast<double>(grid_n - 1);
    // Exact zero at the center of odd grids.
    if (grid_n % 2 == 1) grid.coords[grid_n / 2] = 0.0;
    grid.losses.resize(grid_n * grid_n);
    for (std::size_t i = 0; i < grid_n; ++i)
        for (std::size_t j = 0; j < grid_n; ++j) {
            ParamVector point = axpy(grid.coords[i], dir1, theta);
            point = axpy(grid.coords[j], dir2, point);
            grid.losses[i * grid_n + j] = oracle.loss(point, batch);
        }
    return grid;
}

std::vector<double> track_sq_grad_norm(std::span<const TraceEntry> trace) {
    if (trace.empty()) throw InvalidArgument("track_sq_grad_norm of an empty trace");
    std::vector<double> series;
    std::size_t begin = 0;
    while (begin < trace.size()) {
        std::size_t end = begin;
        double acc = 0.0;
        while (end < trace.size() && trace[end].task == trace[begin].task &&
               trace[end].epoch == trace[begin].epoch) {
            acc += trace[end].stats.sq_grad_norm;
            ++end;
        }
        series.push_back(acc / static_cast<double>(end - begin));
        begin = end;
    }
    return series;
}

FlatnessReport flatness_report(const Objective& oracle, const ParamVector& theta,
                               const Batch& batch, const FlatnessOptions& options,
                               EigenEstimate* top, EigenEstimate* second) {
    FlatnessReport r;
    const LossGrad lg = oracle.loss_grad(theta, batch);
    r.loss = lg.loss;
    r.sq_grad_norm = sq_norm(lg.grad);

    SeededRng top_rng(options.probe_seed, kTopEigenStream);
    EigenEstimate e1 = power_iteration(oracle, theta, batch, options.power_iters, options.power_tol, top_rng);
    SeededRng second_rng(options.probe_seed, kSecondEigenStream);
    EigenEstimate e2 = power_iteration(oracle, theta, batch, options.power_iters, options.power_tol,
                                       second_rng, std::span<const EigenEstimate>(&e1, 1));
    r.lambda_max = e1.value;
    r.lambda_second = e2.value;

    SeededRng trace_rng(options.probe_seed, kTraceStream);
    r.trace = hutchinson_trace(oracle, theta, batch, options.trace_probes, trace_rng);

    // r0 and r1 share their ball samples.
    SeededRng ball_r0(options.probe_seed, kBallStream);
    SeededRng ball_r1(options.probe_seed, kBallStream);
    r.r0_sample = r0_bruteforce(oracle, theta, batch, options.rho, options.ball_samples, ball_r0);
    r.r1_sample = r1_bruteforce(oracle, theta, batch, options.rho, options.ball_samples, ball_r1);
    r.rho_used = options.rho;
    r.r0_le_r1 = r.r0_sample <= r.r1_sample * (1.0 + options.ordering_slack);
    r.power_iters = options.power_iters;
    r.trace_probes = options.trace_probes;
    r.ball_samples = options.ball_samples;
    r.probe_seed = options.probe_seed;
    if (top) *top = std::move(e1);
    if (second) *second = std::move(e2);
    return r;
}

}  // namespace cflat
