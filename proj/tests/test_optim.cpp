#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "cflat/error.hpp"
#include "cflat/metrics.hpp"
#include "cflat/optim.hpp"
#include "test_support.hpp"

using namespace cflat;
using namespace cflat::testing;

namespace {

const Batch kNoBatch{};

// Dummy examples for training loops on objectives that ignore the batch.
Batch dummy_batch(std::size_t n) {
    Batch b;
    b.d_in = 1;
    for (std::size_t i = 0; i < n; ++i) {
        b.features.push_back(static_cast<double>(i));
        b.labels.push_back(0);
    }
    return b;
}

OptimConfig config(double eta, double rho, double lambda) {
    OptimConfig c;
    c.eta = c.eta_min = c.eta_max = eta;
    c.rho = c.rho_min = c.rho_max = rho;
    c.lambda = lambda;
    return c;
}

// L(x) = min(2 (x - 1)^2, 0.05 (x + 1)^2 + 0.01): a sharp valley at 1 and a
// flat one at -1.
class TwoValley final : public Objective {
public:
    std::size_t dim() const override { return 1; }
    bool exact_hvp() const override { return true; }

protected:
    static bool sharp(double x) { return 2 * (x - 1) * (x - 1) < 0.05 * (x + 1) * (x + 1) + 0.01; }
    double do_loss(const ParamVector& t, const Batch&) const override {
        const double x = t[0];
        return std::min(2 * (x - 1) * (x - 1), 0.05 * (x + 1) * (x + 1) + 0.01);
    }
    LossGrad do_loss_grad(const ParamVector& t, const Batch& b) const override {
        const double x = t[0];
        return {do_loss(t, b), ParamVector{sharp(x) ? 4 * (x - 1) : 0.1 * (x + 1)}};
    }
    ParamVector do_hvp(const ParamVector& t, const ParamVector& v, const Batch&, const ParamVector*) const override {
        return ParamVector{(sharp(t[0]) ? 4.0 : 0.1) * v[0]};
    }
};

}  // namespace

// ------------------------------------------------------------------ sgd

TEST(SgdStep, ClosedForm) {
    const auto q = make_quadratic(SymmetricMatrix::identity(2), ParamVector(2));
    const auto [theta, stats] = sgd_step(q, ParamVector{1, 0}, kNoBatch, config(0.1, 0.2, 0.2));
    EXPECT_NEAR(theta[0], 0.9, 1e-15);
    EXPECT_EQ(theta[1], 0.0);
    EXPECT_FALSE(stats.used_cflat);
    EXPECT_EQ(stats.grad_evals, 1);
    EXPECT_DOUBLE_EQ(stats.loss, 0.5);
    EXPECT_DOUBLE_EQ(stats.sq_grad_norm, 1.0);
}

TEST(SgdStep, ZeroLearningRateKeepsTheta) {
    SeededRng rng(1);
    const auto q = make_quadratic(random_spd(rng, 4), ParamVector(4));
    OptimConfig c = config(0.1, 0.2, 0.2);
    c.eta = c.eta_min = 0.0;
    const ParamVector theta{1, 2, 3, 4};
    EXPECT_EQ(sgd_step(q, theta, kNoBatch, c).first, theta);
}

TEST(SgdStep, GeometricContraction) {
    const double d[] = {0.5, 2.0};
    const auto q = make_quadratic(SymmetricMatrix::diagonal(d), ParamVector(2));
    ParamVector theta{1, 1};
    const auto c = config(0.4, 0.0, 0.0);   // < 2 / lambda_max = 1
    for (int i = 0; i < 60; ++i) theta = sgd_step(q, theta, kNoBatch, c).first;
    // Slowest mode contracts by |1 - 0.4 * 0.5| = 0.8 per step.
    EXPECT_LE(norm2(theta), 1.01 * std::pow(0.8, 60) * std::sqrt(2.0));
}

// ------------------------------------------------------------------ sam

TEST(SamPerturb, Examples) {
    const auto e = sam_perturb(ParamVector{3, 4}, 0.5, 0.0);
    EXPECT_NEAR(e[0], 0.3, 1e-15);
    EXPECT_NEAR(e[1], 0.4, 1e-15);
    EXPECT_EQ(sam_perturb(ParamVector(3), 0.5, 1e-12), ParamVector(3));
}

TEST(SamPerturb, NormAtMostRho) {
    SeededRng rng(2);
    for (int i = 0; i < 100; ++i) {
        const double rho = rng.uniform() * 2;
        const auto g = gaussian_fill(rng, 8, 0, 1);
        const double n = norm2(sam_perturb(g, rho, 1e-12));
        EXPECT_LE(n, rho);
        EXPECT_GE(n, rho * (1 - 1e-6));
    }
}

TEST(SamStep, ZeroRhoIsSgd) {
    SeededRng rng(3);
    const auto f = make_logreg(3, 3, 0.0);
    const Batch b = random_batch(rng, 10, 3, 3);
    const auto theta = gaussian_fill(rng, f.dim(), 0, 1);
    const auto c = config(0.05, 0.0, 0.2);
    EXPECT_EQ(sam_step(f, theta, b, c).first, sgd_step(f, theta, b, c).first);
}

TEST(SamStep, ClosedFormOnQuadratic) {
    const double d[] = {1, 2};
    const auto q = make_quadratic(SymmetricMatrix::diagonal(d), ParamVector(2));
    const auto c = config(0.1, 0.1, 0.2);
    const auto [theta, stats] = sam_step(q, ParamVector{1, 1}, kNoBatch, c);
    // theta - eta H (theta + rho H theta / |H theta|) with H theta = (1, 2).
    const double n = std::sqrt(5.0);
    const double p0 = 1 + 0.1 * 1 / n, p1 = 1 + 0.1 * 2 / n;
    EXPECT_NEAR(theta[0], 1 - 0.1 * 1 * p0, 1e-12);
    EXPECT_NEAR(theta[1], 1 - 0.1 * 2 * p1, 1e-12);
    EXPECT_EQ(stats.grad_evals, 2);
    EXPECT_EQ(stats.hvp_evals, 0);
}

// ------------------------------------------------------------------ cflat

TEST(CflatGradient, ClosedFormOnQuadratic) {
    // H = [[2, 0.5], [0.5, 1]], c = (0.3, -0.2); every line of the update by hand.
    const double H[2][2] = {{2, 0.5}, {0.5, 1}};
    const auto q = make_quadratic(SymmetricMatrix(2, {2, 0.5, 0.5, 1}), ParamVector{0.3, -0.2});
    const double rho = 0.15, lambda = 0.4;
    const ParamVector theta{1.1, 0.7};
    auto Hx = [&](double a, double b) { return std::array<double, 2>{H[0][0] * a + H[0][1] * b, H[1][0] * a + H[1][1] * b}; };
    const double x0 = 1.1 - 0.3, x1 = 0.7 + 0.2;
    const auto g = Hx(x0, x1);
    const double gn = std::hypot(g[0], g[1]);
    const auto g0 = Hx(x0 + rho * g[0] / gn, x1 + rho * g[1] / gn);
    const auto h = Hx(g[0] / gn, g[1] / gn);
    const double hn = std::hypot(h[0], h[1]);
    const double y0 = x0 + rho * h[0] / hn, y1 = x1 + rho * h[1] / hn;
    const auto ga = Hx(y0, y1);
    const double gan = std::hypot(ga[0], ga[1]);
    const auto g1 = Hx(ga[0] / gan, ga[1] / gan);

    const auto d = cflat_gradient(q, theta, kNoBatch, config(0.1, rho, lambda));
    EXPECT_NEAR(d.g[0], g0[0] + lambda * g1[0], 1e-12);
    EXPECT_NEAR(d.g[1], g0[1] + lambda * g1[1], 1e-12);
    EXPECT_TRUE(d.stats.used_cflat);
    EXPECT_EQ(d.stats.grad_evals, 4);
    EXPECT_EQ(d.stats.hvp_evals, 2);
    EXPECT_NEAR(d.stats.eps0_norm, rho, 1e-12);
    EXPECT_NEAR(d.stats.eps1_norm, rho, 1e-12);
}

TEST(CflatGradient, LambdaZeroIsSamDirection) {
    SeededRng rng(4);
    const Mlp m(MlpSpec{{3, 5, 3}, Activation::tanh, 0.0});
    const Batch b = random_batch(rng, 8, 3, 3);
    const auto theta = m.init_params(rng);
    const auto c = config(0.05, 0.2, 0.0);
    EXPECT_EQ(cflat_gradient(m, theta, b, c).g, sam_direction(m, theta, b, c).g);
}

TEST(CflatGradient, GuardPathAtMinimum) {
    SeededRng rng(5);
    const auto q = make_quadratic(random_spd(rng, 3), ParamVector{0.1, 0.2, 0.3});
    const auto d = cflat_gradient(q, ParamVector{0.1, 0.2, 0.3}, kNoBatch, config(0.1, 0.2, 0.5));
    EXPECT_TRUE(d.g.all_finite());
    EXPECT_LE(norm2(d.g), 1e-9);
}

TEST(CflatStep, ReductionLatticeBitwise) {
    SeededRng rng(6);
    const Mlp m(MlpSpec{{4, 6, 3}, Activation::tanh, 0.001});
    for (int trial = 0; trial < 20; ++trial) {
        const Batch b = random_batch(rng, 8, 4, 3);
        const auto theta = gaussian_fill(rng, m.dim(), 0, 0.5);
        const auto sam_cfg = config(0.05, 0.1 + rng.uniform(), 0.0);
        EXPECT_EQ(cflat_step(m, theta, b, sam_cfg).first, sam_step(m, theta, b, sam_cfg).first);
        const auto sgd_cfg = config(0.05, 0.0, 0.0);
        EXPECT_EQ(cflat_step(m, theta, b, sgd_cfg).first, sgd_step(m, theta, b, sgd_cfg).first);
    }
}

TEST(CflatStep, SelectsFlatValley) {
    const TwoValley f;
    const auto c = config(0.05, 0.3, 3.0);
    const auto sgd = config(0.05, 0.0, 0.0);
    for (double x0 = 0.75; x0 <= 1.35 + 1e-9; x0 += 0.05) {
        if (std::abs(x0 - 1.0) < 1e-9) continue;   // g = 0: every optimizer stays put
        ParamVector xc{x0}, xs{x0};
        for (int i = 0; i < 2000; ++i) {
            xc = cflat_step(f, xc, kNoBatch, c).first;
            xs = sgd_step(f, xs, kNoBatch, sgd).first;
        }
        EXPECT_NEAR(xc[0], -1.0, 0.2) << "C-Flat from " << x0;
        EXPECT_NEAR(xs[0], 1.0, 1e-6) << "SGD from " << x0;
    }
}

TEST(CflatStep, PerturbationsStayInBall) {
    SeededRng rng(7);
    const Mlp m(MlpSpec{{3, 8, 4}, Activation::tanh, 0.0});
    const auto c = config(0.05, 0.2, 0.2);
    for (int i = 0; i < 30; ++i) {
        const Batch b = random_batch(rng, 6, 3, 4);
        const auto [theta, s] = cflat_step(m, gaussian_fill(rng, m.dim(), 0, 0.5), b, c);
        EXPECT_LE(s.eps0_norm, c.rho);
        EXPECT_LE(s.eps1_norm, c.rho);
        EXPECT_GE(s.hvp_evals, 2);
    }
}

// ------------------------------------------------------------------ schedules and proxy

TEST(RhoSchedule, EndpointsAndMidpoint) {
    OptimConfig c;
    c.eta_min = 0.01;
    c.eta_max = 0.1;
    c.eta = 0.1;
    c.rho_min = 0.05;
    c.rho_max = 0.2;
    c.rho = 0.2;
    EXPECT_DOUBLE_EQ(rho_schedule(c, 0.1), 0.2);
    EXPECT_DOUBLE_EQ(rho_schedule(c, 0.01), 0.05);
    EXPECT_NEAR(rho_schedule(c, 0.055), 0.125, 1e-15);
    c.eta_min = c.eta_max = 0.1;
    EXPECT_EQ(rho_schedule(c, 0.1), 0.2);
}

TEST(OptimConfigTest, ValidateBounds) {
    OptimConfig c;
    EXPECT_NO_THROW(c.validate());
    c.rho = 0.5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = OptimConfig{};
    c.eta = -1;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ProxyValue, Examples) {
    ProxyState s;
    s.i = 80;
    EXPECT_EQ(proxy_value(s), 2.5);
    s.i = 80 + 1000000;
    EXPECT_NEAR(proxy_value(s), 5.0, 1e-9);
    s.k = 0.0;
    for (long i : {0L, 80L, 5000L}) {
        s.i = i;
        EXPECT_EQ(proxy_value(s), 2.5);
    }
}

TEST(CflatPlusPlus, SharpBatchTakesCflatBranchAndGrowsA) {
    const auto q = make_quadratic(SymmetricMatrix::identity(3), ParamVector(3));
    ProxyState s;
    s.i = 80;
    const auto r = cflatpp_step(q, ParamVector{1, 1, 1}, kNoBatch, config(0.05, 0.2, 0.2), s);
    ASSERT_TRUE(r.stats.proxy.has_value());
    EXPECT_EQ(r.stats.proxy->value, 2.5);
    EXPECT_EQ(r.stats.sq_grad_norm, 3.0);
    EXPECT_EQ(r.stats.proxy->error, -0.5);
    EXPECT_NEAR(r.state.A, 5.0025, 1e-15);
    EXPECT_TRUE(r.stats.used_cflat);
    EXPECT_EQ(r.state.i, 81);
    EXPECT_EQ(r.theta, cflat_step(q, ParamVector{1, 1, 1}, kNoBatch, config(0.05, 0.2, 0.2)).first);
}

TEST(CflatPlusPlus, FlatBatchTakesSgdBranchAndShrinksA) {
    const auto q = make_quadratic(SymmetricMatrix::identity(2), ParamVector(2));
    const auto c = config(0.05, 0.2, 0.2);
    const auto r = cflatpp_step(q, ParamVector{0.1, 0.1}, kNoBatch, c, ProxyState{});
    EXPECT_FALSE(r.stats.used_cflat);
    EXPECT_LT(r.state.A, 5.0);
    EXPECT_EQ(r.stats.grad_evals, 1);
    EXPECT_EQ(r.theta, sgd_step(q, ParamVector{0.1, 0.1}, kNoBatch, c).first);
}

TEST(CflatPlusPlus, StationaryPointNeverUsesCflat) {
    const auto q = make_quadratic(SymmetricMatrix::identity(2), ParamVector{0.5, 0.5});
    ParamVector theta{0.5, 0.5};
    ProxyState s;
    for (int i = 0; i < 500; ++i) {
        auto r = cflatpp_step(q, theta, kNoBatch, config(0.05, 0.2, 0.2), s);
        ASSERT_FALSE(r.stats.used_cflat);
        theta = r.theta;
        s = r.state;
    }
}

TEST(CflatPlusPlus, GatingInvariantOverTraining) {
    SeededRng rng(8);
    const Mlp m(MlpSpec{{4, 8, 3}, Activation::tanh, 0.0});
    Batch data = random_batch(rng, 64, 4, 3);
    StepperOptions opts;
    opts.kind = OptimizerKind::cflatpp;
    auto stepper = make_stepper(opts);
    TrainOptions to;
    to.epochs = 20;
    to.batch_size = 4;
    stepper->begin_task(to.epochs * steps_per_epoch(data.size(), to.batch_size));
    const auto r = train_epochs(m, m.init_params(rng), data, config(0.1, 0.2, 0.2), *stepper, to, rng);
    for (const auto& e : r.trace) {
        ASSERT_TRUE(e.stats.proxy.has_value());
        EXPECT_EQ(e.stats.used_cflat, e.stats.proxy->error <= 0.0);
        EXPECT_EQ(e.stats.proxy->A_after, e.stats.proxy->A_before - 5e-3 * e.stats.proxy->error);
    }
}

TEST(Stepper, ProxyResetsPerTaskUnlessDisabled) {
    const auto q = make_quadratic(SymmetricMatrix::identity(2), ParamVector(2));
    const Batch b = dummy_batch(4);
    for (bool reset : {true, false}) {
        StepperOptions opts;
        opts.kind = OptimizerKind::cflatpp;
        opts.reset_proxy_per_task = reset;
        auto stepper = make_stepper(opts);
        stepper->begin_task(3);
        for (int i = 0; i < 3; ++i) stepper->direction(q, ParamVector{0.1, 0.1}, b, OptimConfig{});
        stepper->begin_task(3);
        const auto d = stepper->direction(q, ParamVector{0.1, 0.1}, b, OptimConfig{});
        EXPECT_EQ(d.stats.proxy->iteration, reset ? 0 : 3);
    }
}

// ------------------------------------------------------------------ hybrid

TEST(HybridPlan, Examples) {
    const auto all = hybrid_step_plan(10, 1.0, HybridOrdering::cflat_first);
    EXPECT_EQ(std::count(all.begin(), all.end(), true), 10);
    const auto none = hybrid_step_plan(10, 0.0, HybridOrdering::cflat_last);
    EXPECT_EQ(std::count(none.begin(), none.end(), true), 0);
    EXPECT_EQ(hybrid_step_plan(8, 0.25, HybridOrdering::cflat_last),
              (std::vector<bool>{false, false, false, false, false, false, true, true}));
    EXPECT_EQ(hybrid_step_plan(8, 0.25, HybridOrdering::cflat_first),
              (std::vector<bool>{true, true, false, false, false, false, false, false}));
    EXPECT_TRUE(hybrid_step_plan(0, 0.5, HybridOrdering::cflat_first).empty());
}

TEST(HybridPlan, RoundHalfToEven) {
    auto count = [](std::size_t n, double p) {
        const auto plan = hybrid_step_plan(n, p, HybridOrdering::cflat_first);
        return std::count(plan.begin(), plan.end(), true);
    };
    EXPECT_EQ(count(10, 0.25), 2);    // 2.5 -> 2
    EXPECT_EQ(count(14, 0.25), 4);    // 3.5 -> 4
    EXPECT_EQ(count(2, 0.25), 0);     // 0.5 -> 0
    EXPECT_THROW(hybrid_step_plan(4, 1.5, HybridOrdering::cflat_first), InvalidArgument);
}

TEST(HybridPlan, TrainedProportionMatchesPlan) {
    SeededRng rng(9);
    const auto f = make_logreg(3, 2, 0.0);
    const Batch data = random_batch(rng, 32, 3, 2);
    for (double p : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        StepperOptions opts;
        opts.kind = OptimizerKind::hybrid;
        opts.hybrid_p = p;
        auto stepper = make_stepper(opts);
        TrainOptions to;
        to.epochs = 2;
        to.batch_size = 4;   // 16 steps
        stepper->begin_task(16);
        const auto r = train_epochs(f, ParamVector(f.dim()), data, OptimConfig{}, *stepper, to, rng);
        EXPECT_EQ(cflat_proportion(std::span<const TraceEntry>(r.trace)), p);
    }
}

// ------------------------------------------------------------------ training loop

TEST(TrainEpochs, ZeroEpochs) {
    SeededRng rng(10);
    auto stepper = make_stepper({});
    const auto q = make_quadratic(SymmetricMatrix::identity(2), ParamVector(2));
    TrainOptions to;
    to.epochs = 0;
    to.batch_size = 1;
    const auto r = train_epochs(q, ParamVector{1, 2}, dummy_batch(3), OptimConfig{}, *stepper, to, rng);
    EXPECT_EQ(r.theta, (ParamVector{1, 2}));
    EXPECT_TRUE(r.trace.empty());
}

TEST(TrainEpochs, FullBatchEqualsStepSequence) {
    SeededRng rng(11);
    const auto q = make_quadratic(random_spd(rng, 3), ParamVector{1, 0, -1});
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::sam, OptimizerKind::cflat}) {
        StepperOptions opts;
        opts.kind = kind;
        auto stepper = make_stepper(opts);
        TrainOptions to;
        to.epochs = 5;
        to.batch_size = 4;
        const Batch data = dummy_batch(4);
        const auto cfg = config(0.1, 0.1, 0.3);
        const auto r = train_epochs(q, ParamVector{2, 2, 2}, data, cfg, *stepper, to, rng);
        ParamVector theta{2, 2, 2};
        for (int i = 0; i < 5; ++i)
            theta = kind == OptimizerKind::sgd   ? sgd_step(q, theta, data, cfg).first
                    : kind == OptimizerKind::sam ? sam_step(q, theta, data, cfg).first
                                                 : cflat_step(q, theta, data, cfg).first;
        EXPECT_EQ(r.theta, theta);
        EXPECT_EQ(r.trace.size(), 5u);
    }
}

TEST(TrainEpochs, DivergenceCarriesStepIndex) {
    SeededRng rng(12);
    auto stepper = make_stepper({});
    const auto q = make_quadratic(SymmetricMatrix::identity(1), ParamVector(1));
    TrainOptions to;
    to.epochs = 3;
    to.batch_size = 1;
    to.step_offset = 100;
    OptimConfig cfg = config(1e200, 0.2, 0.2);
    try {
        train_epochs(q, ParamVector{1}, dummy_batch(1), cfg, *stepper, to, rng);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.step(), 101);
    }
}

TEST(TrainEpochs, MilestonesAndCoupledRho) {
    SeededRng rng(13);
    auto stepper = make_stepper({});
    const auto q = make_quadratic(SymmetricMatrix::identity(1), ParamVector(1));
    OptimConfig cfg;
    cfg.eta = cfg.eta_max = 0.1;
    cfg.eta_min = 0.001;
    cfg.rho = cfg.rho_max = 0.2;
    cfg.rho_min = 0.02;
    TrainOptions to;
    to.epochs = 4;
    to.batch_size = 1;
    to.schedule.milestones = {2, 3};
    const auto r = train_epochs(q, ParamVector{1}, dummy_batch(1), cfg, *stepper, to, rng);
    ASSERT_EQ(r.trace.size(), 4u);
    EXPECT_EQ(r.trace[1].eta, 0.1);
    EXPECT_NEAR(r.trace[2].eta, 0.01, 1e-17);
    EXPECT_NEAR(r.trace[3].eta, 0.001, 1e-17);
    EXPECT_EQ(r.trace[0].rho, 0.2);
    EXPECT_NEAR(r.trace[3].rho, 0.02, 1e-15);
}

TEST(TrainEpochs, BatchLargerThanDataRejected) {
    SeededRng rng(14);
    auto stepper = make_stepper({});
    const auto q = make_quadratic(SymmetricMatrix::identity(1), ParamVector(1));
    TrainOptions to;
    to.batch_size = 5;
    EXPECT_THROW(train_epochs(q, ParamVector{1}, dummy_batch(2), OptimConfig{}, *stepper, to, rng), InvalidArgument);
}

TEST(Properties, MonotoneDecreaseOnQuadratic) {
    SeededRng rng(15);
    const auto H = random_spd(rng, 4, 0.5);
    const auto q = make_quadratic(H, ParamVector(4));
    double lmax = 0.0;   // Gershgorin bound
    for (std::size_t i = 0; i < 4; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 4; ++j) row += std::abs(H(i, j));
        lmax = std::max(lmax, row);
    }
    const auto cfg = config(0.1 / lmax, 0.01, 0.2);
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::sam, OptimizerKind::cflat, OptimizerKind::cflatpp,
                      OptimizerKind::hybrid}) {
        StepperOptions opts;
        opts.kind = kind;
        auto stepper = make_stepper(opts);
        stepper->begin_task(100);
        ParamVector theta{3, -4, 2, 1};
        double prev = q.loss(theta, kNoBatch);
        for (int i = 0; i < 100; ++i) {
            const auto d = stepper->direction(q, theta, kNoBatch, cfg);
            theta = axpy(-cfg.eta, d.g, theta);
            const double now = q.loss(theta, kNoBatch);
            ASSERT_LT(now, prev) << to_string(kind) << " step " << i;
            prev = now;
        }
    }
}

TEST(Properties, SquaredGradNormTrendsDown) {
    SeededRng rng(16);
    const Mlp m(MlpSpec{{4, 8, 3}, Activation::tanh, 0.0});
    const auto f = make_logreg(4, 3, 0.01);
    const Batch data = random_batch(rng, 48, 4, 3);
    const std::vector<const Objective*> objectives = {&m, &f};
    for (const Objective* o : objectives)
        for (auto kind : {OptimizerKind::sgd, OptimizerKind::cflat}) {
            StepperOptions opts;
            opts.kind = kind;
            auto stepper = make_stepper(opts);
            TrainOptions to;
            to.epochs = 40;
            to.batch_size = 48;
            ParamVector theta = o == &m ? m.init_params(rng) : ParamVector(f.dim());
            const auto r = train_epochs(*o, theta, data, config(0.2, 0.05, 0.2), *stepper, to, rng);
            double head = 0.0, tail = 0.0;
            for (int i = 0; i < 10; ++i) {
                head += r.trace[i].stats.sq_grad_norm;
                tail += r.trace[r.trace.size() - 1 - i].stats.sq_grad_norm;
            }
            EXPECT_LT(tail, head);
        }
}

TEST(ParseNames, RoundTrip) {
    for (auto k : {OptimizerKind::sgd, OptimizerKind::sam, OptimizerKind::cflat, OptimizerKind::cflatpp,
                   OptimizerKind::hybrid})
        EXPECT_EQ(parse_optimizer(to_string(k)), k);
    EXPECT_THROW(parse_optimizer("adam"), InvalidArgument);
    EXPECT_EQ(parse_hybrid_ordering("cflat_first"), HybridOrdering::cflat_first);
    EXPECT_THROW(parse_hybrid_ordering("forward"), InvalidArgument);
}
