#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "cflat/continual.hpp"
#include "cflat/error.hpp"
#include "test_support.hpp"

using namespace cflat;
using namespace cflat::testing;

namespace {

Dataset small_dataset(std::size_t classes, std::size_t per_class = 20, double std = 0.3, std::uint64_t seed = 0) {
    SyntheticSpec s;
    s.classes = classes;
    s.dims = 4;
    s.per_class = per_class;
    s.cluster_std = std;
    s.seed = seed;
    return synth_dataset(s);
}

ExperimentConfig small_experiment(Method method, OptimizerKind kind) {
    ExperimentConfig c;
    c.method = method;
    c.optimizer.kind = kind;
    c.hidden = {8};
    c.epochs = 3;
    c.batch_size = 8;
    c.memory_per_class = 5;
    c.gpm_samples = 20;
    c.optim.eta = c.optim.eta_min = c.optim.eta_max = 0.1;
    return c;
}

double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

std::vector<double> softmax(std::vector<double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (auto& v : z) s += v = std::exp(v - m);
    for (auto& v : z) v /= s;
    return z;
}

}  // namespace

// ------------------------------------------------------------------ streams

TEST(MakeStream, B0Inc5) {
    const auto s = make_stream(small_dataset(10), Protocol::B0, 5);
    ASSERT_EQ(s.tasks.size(), 2u);
    for (const auto& t : s.tasks) EXPECT_EQ(t.classes.size(), 5u);
}

TEST(MakeStream, B50Inc1) {
    const auto s = make_stream(small_dataset(10), Protocol::B50, 1);
    ASSERT_EQ(s.tasks.size(), 6u);
    EXPECT_EQ(s.tasks[0].classes.size(), 5u);
    for (std::size_t t = 1; t < 6; ++t) EXPECT_EQ(s.tasks[t].classes.size(), 1u);
}

TEST(MakeStream, B50OddClassCountTakesCeiling) {
    const auto s = make_stream(small_dataset(7), Protocol::B50, 1);
    EXPECT_EQ(s.tasks[0].classes.size(), 4u);
    EXPECT_EQ(s.tasks.size(), 4u);
}

TEST(MakeStream, IndivisibleReportsRemainder) {
    const auto d = small_dataset(10);
    try {
        make_stream(d, Protocol::B0, 3);
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("remainder 1"), std::string::npos) << e.what();
    }
    try {
        make_stream(d, Protocol::B50, 2);   // 5 incremental classes
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("remainder 1"), std::string::npos) << e.what();
    }
    EXPECT_THROW(make_stream(d, Protocol::B0, 0), InvalidArgument);
}

TEST(MakeStream, DeterministicAndSeedSensitive) {
    const auto d = small_dataset(10);
    const auto a = make_stream(d, Protocol::B0, 2, 1993);
    const auto b = make_stream(d, Protocol::B0, 2, 1993);
    EXPECT_EQ(a.class_order, b.class_order);
    for (std::size_t t = 0; t < a.tasks.size(); ++t) {
        EXPECT_EQ(a.tasks[t].train.features, b.tasks[t].train.features);
        EXPECT_EQ(a.tasks[t].train.labels, b.tasks[t].train.labels);
    }
    EXPECT_NE(make_stream(d, Protocol::B0, 2, 7).class_order, a.class_order);
}

TEST(MakeStream, DisjointCoveringRelabelledClasses) {
    const auto d = small_dataset(10);
    const auto s = make_stream(d, Protocol::B0, 2);
    std::set<int> seen;
    std::size_t train = 0, test = 0;
    for (const auto& t : s.tasks) {
        for (int c : t.classes) EXPECT_TRUE(seen.insert(c).second);
        for (int l : t.train.labels) EXPECT_TRUE(std::find(t.classes.begin(), t.classes.end(), l) != t.classes.end());
        train += t.train.size();
        test += t.test.size();
    }
    EXPECT_EQ(seen.size(), 10u);
    EXPECT_EQ(train, d.train.size());
    EXPECT_EQ(test, d.test.size());

    // Relabelling keeps geometry: rows of new id k are the rows of original class_order[k].
    for (const auto& t : s.tasks)
        for (std::size_t i = 0; i < t.train.size(); ++i) {
            const auto row = t.train.row(i);
            const int original = s.class_order[static_cast<std::size_t>(t.train.labels[i])];
            bool found = false;
            for (std::size_t j = 0; j < d.train.size() && !found; ++j)
                found = d.train.labels[j] == original && std::equal(row.begin(), row.end(), d.train.row(j).begin());
            ASSERT_TRUE(found);
        }
}

// ------------------------------------------------------------------ data

TEST(SynthDataset, StratifiedSplitAndDeterminism) {
    const auto d = small_dataset(5, 50);
    EXPECT_EQ(d.num_classes, 5u);
    EXPECT_EQ(d.train.size(), 200u);
    EXPECT_EQ(d.test.size(), 50u);
    std::map<int, int> per;
    for (int l : d.test.labels) ++per[l];
    for (auto [c, n] : per) EXPECT_EQ(n, 10) << c;
    const auto e = small_dataset(5, 50);
    EXPECT_EQ(d.train.features, e.train.features);
}

TEST(SynthDataset, ZeroStdIsSeparableByLogisticModel) {
    SyntheticSpec s;
    s.classes = 10;
    s.dims = 16;
    s.per_class = 5;
    s.cluster_std = 0.0;
    const auto d = synth_dataset(s);
    const Mlp m(MlpSpec{{16, 10}, Activation::tanh, 0.0});
    SeededRng rng(1);
    auto stepper = make_stepper({});
    TrainOptions to;
    to.epochs = 500;
    to.batch_size = d.train.size();
    OptimConfig cfg;
    cfg.eta = cfg.eta_min = cfg.eta_max = 0.5;
    const auto r = train_epochs(m, ParamVector(m.dim()), d.train, cfg, *stepper, to, rng);
    EXPECT_EQ(accuracy(m, r.theta, d.train), 1.0);
}

TEST(SynthDataset, BayesAccuracyOracle) {
    SyntheticSpec s;
    s.classes = 2;
    s.dims = 2;
    s.per_class = 10000;
    s.seed = 3;
    const auto means = synth_class_means(s);
    const double delta = norm2(means[0] - means[1]);
    s.cluster_std = delta / 2.0;   // Bayes accuracy Phi(1) ~ 0.841
    const auto d = synth_dataset(s);
    // Nearest empirical mean, estimated on the training split.
    std::vector<std::vector<double>> mu(2, std::vector<double>(2, 0.0));
    std::vector<double> n(2, 0.0);
    for (std::size_t i = 0; i < d.train.size(); ++i) {
        const auto l = static_cast<std::size_t>(d.train.labels[i]);
        for (std::size_t j = 0; j < 2; ++j) mu[l][j] += d.train.row(i)[j];
        n[l] += 1;
    }
    for (std::size_t l = 0; l < 2; ++l)
        for (auto& v : mu[l]) v /= n[l];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < d.test.size(); ++i) {
        double dist[2];
        for (std::size_t l = 0; l < 2; ++l)
            dist[l] = std::hypot(d.test.row(i)[0] - mu[l][0], d.test.row(i)[1] - mu[l][1]);
        hits += (dist[1] < dist[0] ? 1 : 0) == d.test.labels[i] ? 1 : 0;
    }
    const double acc = static_cast<double>(hits) / static_cast<double>(d.test.size());
    EXPECT_NEAR(acc, Phi(delta / (2 * s.cluster_std)), 0.03);
}

TEST(CsvDataset, HeaderOptionalAndErrorsCarryLine) {
    const std::string path = ::testing::TempDir() + "cflat_data.csv";
    {
        std::ofstream f(path);
        f << "label,x0,x1\n";
        for (int i = 0; i < 10; ++i) f << (i % 2) << "," << i << "," << -i << "\n";
    }
    const auto d = load_csv_dataset(path, 0);
    EXPECT_EQ(d.num_classes, 2u);
    EXPECT_EQ(d.train.size() + d.test.size(), 10u);
    EXPECT_EQ(d.train.d_in, 2u);
    {
        std::ofstream f(path);
        f << "0,1,2\n1,3\n";
    }
    try {
        load_csv_dataset(path, 0);
        FAIL();
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("cflat_data.csv:2:"), std::string::npos) << e.what();
    }
    EXPECT_THROW(load_csv_dataset(path + ".missing", 0), IoError);
}

// ------------------------------------------------------------------ replay

TEST(Buffer, CapacityCases) {
    const auto d = small_dataset(4, 10);   // 8 train per class
    SeededRng rng(2);
    MemoryBuffer big{100, {}};
    EXPECT_EQ(buffer_update(big, d.train, rng).exemplars.size(), d.train.size());
    MemoryBuffer none{0, {}};
    EXPECT_TRUE(buffer_update(none, d.train, rng).exemplars.empty());
}

TEST(Buffer, CountsAndLegalityOverTasks) {
    const auto s = make_stream(small_dataset(6, 30), Protocol::B0, 2);
    SeededRng rng(3);
    MemoryBuffer buf{10, {}};
    std::set<int> seen;
    for (const auto& t : s.tasks) {
        const Batch before = buf.exemplars;
        buf = buffer_update(buf, t.train, rng);
        seen.insert(t.classes.begin(), t.classes.end());
        for (auto [c, n] : buf.class_counts()) {
            EXPECT_TRUE(seen.count(c));
            EXPECT_LE(n, 10u);
        }
        // Existing exemplars retained as a prefix.
        ASSERT_GE(buf.exemplars.size(), before.size());
        EXPECT_TRUE(std::equal(before.features.begin(), before.features.end(), buf.exemplars.features.begin()));
    }
    EXPECT_EQ(buf.class_counts().size(), 6u);
    EXPECT_EQ(buf.exemplars.size(), 60u);
}

TEST(ReplayLoss, Identities) {
    SeededRng rng(4);
    const Mlp m(MlpSpec{{3, 5, 4}, Activation::tanh, 0.0});
    const auto theta = m.init_params(rng);
    const Batch a = random_batch(rng, 6, 3, 4);
    const Batch b = random_batch(rng, 10, 3, 4);
    Batch empty;
    empty.d_in = 3;
    EXPECT_EQ(replay_loss(m, theta, a, empty), m.loss(theta, a));
    EXPECT_NEAR(replay_loss(m, theta, a, a), m.loss(theta, a), 1e-14);
    EXPECT_NEAR(replay_loss(m, theta, a, b), (6 * m.loss(theta, a) + 10 * m.loss(theta, b)) / 16, 1e-14);
    Batch bad = b;
    bad.labels[0] = 4;
    EXPECT_THROW(replay_loss(m, theta, a, bad), InvalidArgument);
}

// ------------------------------------------------------------------ distillation

TEST(Distillation, SelfDistillationIsCrossEntropy) {
    SeededRng rng(5);
    const MlpSpec spec{{3, 6, 2}, Activation::tanh, 0.0};
    const Mlp old_model(spec);
    const auto old_theta = old_model.init_params(rng);
    const Batch b = random_batch(rng, 8, 3, 2);
    const std::optional<std::pair<Mlp, ParamVector>> old{{old_model, old_theta}};
    EXPECT_NEAR(icarl_loss(old_model, old_theta, old, b, 1.0), old_model.loss(old_theta, b), 1e-14);

    // Same with a grown head: the old-class logits are unchanged.
    const auto grown = grow_head(old_theta, spec, 2, rng);
    const Mlp current(grown.spec);
    const Batch b4 = random_batch(rng, 8, 3, 4);
    EXPECT_NEAR(icarl_loss(current, grown.theta, old, b4, 1.0), current.loss(grown.theta, b4), 1e-14);
    EXPECT_EQ(icarl_loss(current, grown.theta, std::nullopt, b4, 2.0), current.loss(grown.theta, b4));
}

TEST(Distillation, HandComputedKl) {
    // Linear 2-class models: logits = W x + b.
    const MlpSpec spec{{2, 2}, Activation::tanh, 0.0};
    const Mlp model(spec);
    const ParamVector old_theta(std::vector<double>{1.0, -0.5, 0.2, 0.3, 0.1, -0.1}, spec.manifest());
    const ParamVector theta(std::vector<double>{0.4, 0.6, -0.7, 0.2, 0.0, 0.3}, spec.manifest());
    const Batch b(2, {1.0, 2.0, -1.0, 0.5}, {0, 1});
    const double tau = 2.0;
    auto logits = [](const ParamVector& t, double x0, double x1) {
        return std::vector<double>{t[0] * x0 + t[1] * x1 + t[4], t[2] * x0 + t[3] * x1 + t[5]};
    };
    double expected = 0.0;
    for (std::size_t e = 0; e < 2; ++e) {
        const double x0 = b.row(e)[0], x1 = b.row(e)[1];
        const auto z = logits(theta, x0, x1);
        const auto zo = logits(old_theta, x0, x1);
        expected += -std::log(softmax(z)[static_cast<std::size_t>(b.labels[e])]);
        const auto p = softmax({z[0] / tau, z[1] / tau});
        const auto q = softmax({zo[0] / tau, zo[1] / tau});
        for (int j = 0; j < 2; ++j) expected += q[j] * std::log(q[j] / p[j]);
    }
    expected /= 2;
    const DistillationObjective obj(model, model, old_theta, tau);
    EXPECT_NEAR(obj.loss(theta, b), expected, 1e-10);
}

TEST(Distillation, GradientMatchesFiniteDifference) {
    SeededRng rng(6);
    const MlpSpec spec{{3, 5, 2}, Activation::tanh, 0.0};
    const Mlp old_model(spec);
    const auto old_theta = old_model.init_params(rng);
    const auto grown = grow_head(old_theta, spec, 2, rng);
    for (double tau : {1.0, 2.0, 4.0}) {
        const DistillationObjective obj(Mlp(grown.spec), old_model, old_theta, tau);
        const Batch b = random_batch(rng, 6, 3, 4);
        const auto theta = axpy(0.3, gaussian_fill(rng, obj.dim(), 0, 1), grown.theta);
        EXPECT_LE(max_rel_error(obj.grad(theta, b), fd_gradient(obj, theta, b, 1e-4)), 1e-6) << tau;
    }
}

TEST(Distillation, Preconditions) {
    const Mlp small(MlpSpec{{2, 2}, Activation::tanh, 0.0});
    const Mlp large(MlpSpec{{2, 3}, Activation::tanh, 0.0});
    EXPECT_THROW(DistillationObjective(small, large, ParamVector(large.dim()), 2.0), InvalidArgument);
    EXPECT_THROW(DistillationObjective(large, small, ParamVector(small.dim()), 0.0), InvalidArgument);
    EXPECT_THROW(DistillationObjective(large, small, ParamVector(3), 2.0), DimensionError);
}

// ------------------------------------------------------------------ head growth and WA

TEST(GrowHead, PreservesOldLogitsBitExactly) {
    SeededRng rng(7);
    for (auto widths : {std::vector<std::size_t>{4, 3}, std::vector<std::size_t>{4, 6, 5, 3}}) {
        const MlpSpec spec{widths, Activation::relu, 0.0};
        const Mlp m(spec);
        const auto theta = m.init_params(rng);
        const Batch x = random_batch(rng, 7, 4, 3);
        const auto grown = grow_head(theta, spec, 2, rng);
        EXPECT_EQ(grown.spec.output_width(), 5u);
        EXPECT_EQ(grown.theta.size(), grown.spec.param_count());
        const auto before = m.logits(theta, x);
        const auto after = Mlp(grown.spec).logits(grown.theta, x);
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(after[i * 5 + c], before[i * 3 + c]);
    }
}

TEST(GrowHead, ZeroRejectedAndCompositionMatches) {
    SeededRng rng(8);
    const MlpSpec spec{{3, 4, 2}, Activation::tanh, 0.0};
    const auto theta = Mlp(spec).init_params(rng);
    EXPECT_THROW(grow_head(theta, spec, 0, rng), InvalidArgument);
    const auto one = grow_head(theta, spec, 1, rng);
    const auto two_steps = grow_head(one.theta, one.spec, 1, rng);
    const auto two = grow_head(theta, spec, 2, rng);
    ASSERT_EQ(two_steps.spec, two.spec);
    const auto man = two.spec.manifest();
    // Hidden layer and the first two head rows / biases agree exactly.
    for (std::size_t i = 0; i < man[2].offset; ++i) EXPECT_EQ(two_steps.theta[i], two.theta[i]);
    for (std::size_t i = 0; i < 2 * 4; ++i) EXPECT_EQ(two_steps.theta[man[2].offset + i], two.theta[man[2].offset + i]);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(two_steps.theta[man[3].offset + c], two.theta[man[3].offset + c]);
}

TEST(WeightAlignment, Ratios) {
    const std::vector<double> old_w{3, 4, 0, 5};          // norms 5, 5
    EXPECT_EQ(wa_align(old_w, std::vector<double>{0, 5, 4, 3}, 2), 1.0);
    EXPECT_EQ(wa_align(old_w, std::vector<double>{6, 8, 0, 10}, 2), 0.5);
    EXPECT_THROW(wa_align(old_w, std::vector<double>{0, 0}, 2), InvalidArgument);
    EXPECT_THROW(wa_align({}, std::vector<double>{1, 0}, 2), InvalidArgument);
}

TEST(WeightAlignment, ArgmaxInvariantToGlobalHeadScale) {
    SeededRng rng(9);
    const MlpSpec spec{{3, 6, 5}, Activation::tanh, 0.0};
    const Mlp m(spec);
    const auto man = spec.manifest();
    for (int trial = 0; trial < 10; ++trial) {
        auto theta = m.init_params(rng);
        for (std::size_t i = 0; i < man[3].size(); ++i) theta[man[3].offset + i] = rng.normal();
        const double c = 0.1 + 5 * rng.uniform();
        auto scaled_theta = theta;
        for (std::size_t i = man[2].offset; i < theta.size(); ++i) scaled_theta[i] *= c;
        const double g1 = apply_weight_alignment(theta, spec, 3);
        const double g2 = apply_weight_alignment(scaled_theta, spec, 3);
        EXPECT_NEAR(g1, g2, 1e-12);
        const Batch x = random_batch(rng, 20, 3, 5);
        EXPECT_EQ(m.predict(theta, x), m.predict(scaled_theta, x));
    }
}

TEST(WeightAlignment, ScalesNewRowsAndBiases) {
    const MlpSpec spec{{2, 3}, Activation::tanh, 0.0};
    // Rows: (3,4) (0,5) old; (0,10) new; biases 1, 2, 3.
    ParamVector theta(std::vector<double>{3, 4, 0, 5, 0, 10, 1, 2, 3}, spec.manifest());
    EXPECT_EQ(apply_weight_alignment(theta, spec, 2), 0.5);
    EXPECT_EQ(theta[5], 5.0);
    EXPECT_EQ(theta[8], 1.5);
    EXPECT_EQ(theta[0], 3.0);
    EXPECT_EQ(theta[7], 2.0);
    EXPECT_THROW(apply_weight_alignment(theta, spec, 3), InvalidArgument);
}

// ------------------------------------------------------------------ GPM

namespace {

Batch line_batch(SeededRng& rng, std::size_t n, const std::vector<double>& u) {
    Batch b;
    b.d_in = u.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double t = rng.normal();
        for (double x : u) b.features.push_back(t * x);
        b.labels.push_back(0);
    }
    return b;
}

}  // namespace

TEST(Gpm, LineHasRankOne) {
    SeededRng rng(10);
    const Mlp m(MlpSpec{{3, 4, 2}, Activation::tanh, 0.0});
    const auto theta = m.init_params(rng);
    const Batch b = line_batch(rng, 30, {1, 2, -2});
    for (double thr : {0.5, 0.97, 1.0}) {
        const auto s = gpm_extract_basis(m, theta, b, thr, 0);
        EXPECT_EQ(s.rank(), 1u) << thr;
        EXPECT_NEAR(std::abs(s.basis(0, 0)), 1.0 / 3.0, 1e-12);
    }
}

TEST(Gpm, FullThresholdKeepsFullRankAndProjectorIsIdempotent) {
    SeededRng rng(11);
    const Mlp m(MlpSpec{{5, 6, 3}, Activation::tanh, 0.0});
    const auto theta = m.init_params(rng);
    const Batch b = random_batch(rng, 40, 5, 3);
    const auto full = gpm_extract_basis(m, theta, b, 1.0, 0);
    EXPECT_EQ(full.rank(), 5u);
    EXPECT_EQ(gpm_extract_basis(m, theta, b, 1.0, 1).rank(), 6u);
    const auto s = gpm_extract_basis(m, theta, b, 0.8, 0);
    EXPECT_LT(s.rank(), 5u);
    const Eigen::MatrixXd P = s.basis * s.basis.transpose();
    EXPECT_LE((P * P - P).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((s.basis.transpose() * s.basis - Eigen::MatrixXd::Identity(s.rank(), s.rank())).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_TRUE((s.significance.array() == 1.0).all());
}

TEST(Gpm, RankZeroAndBadThresholdRejected) {
    const Mlp m(MlpSpec{{3, 2}, Activation::tanh, 0.0});
    const Batch zeros(3, std::vector<double>(12, 0.0), {0, 1, 0, 1});
    EXPECT_THROW(gpm_extract_basis(m, ParamVector(m.dim()), zeros, 0.9), InvalidArgument);
    SeededRng rng(12);
    EXPECT_THROW(gpm_extract_basis(m, ParamVector(m.dim()), random_batch(rng, 4, 3, 2), 0.0), InvalidArgument);
}

TEST(Gpm, ExtendKeepsOldColumnsAndStaysOrthonormal) {
    SeededRng rng(13);
    const Mlp m(MlpSpec{{6, 4, 2}, Activation::tanh, 0.0});
    const auto theta = m.init_params(rng);
    auto s = gpm_extract_basis(m, theta, line_batch(rng, 20, {1, 0, 0, 1, 0, 0}), 0.97, 0);
    s.significance(0) = 0.4;
    const Eigen::MatrixXd old = s.basis;
    gpm_extend_basis(s, m, theta, line_batch(rng, 20, {0, 1, 1, 0, 0, 0}));
    ASSERT_EQ(s.rank(), 2u);
    EXPECT_EQ(s.basis.col(0), old.col(0));
    EXPECT_EQ(s.significance(0), 0.4);
    EXPECT_EQ(s.significance(1), 1.0);
    EXPECT_LE((s.basis.transpose() * s.basis - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-8);
    // Nothing new: rank unchanged.
    gpm_extend_basis(s, m, theta, line_batch(rng, 20, {1, 0, 0, 1, 0, 0}));
    EXPECT_EQ(s.rank(), 2u);
}

TEST(Gpm, ProjectionCases) {
    SeededRng rng(14);
    const MlpSpec spec{{5, 4, 3}, Activation::tanh, 0.0};
    const Mlp m(spec);
    const auto theta = m.init_params(rng);
    const Batch b = random_batch(rng, 30, 5, 3);
    auto s = gpm_extract_basis(m, theta, b, 0.7, 0);
    const auto g = gaussian_fill(rng, m.dim(), 0, 1);
    const auto man = spec.manifest();
    auto block = [&](const ParamVector& v) {
        return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            v.values().data() + man[0].offset, 4, 5);
    };
    const auto p = gpm_project(s, spec, g);
    EXPECT_LE((block(p) * s.basis).norm(), 1e-8 * norm2(g));
    for (std::size_t i = man[1].offset; i < g.size(); ++i) EXPECT_EQ(p[i], g[i]);
    // Lambda = 0 leaves the gradient alone.
    s.significance.setZero();
    EXPECT_EQ(gpm_project(s, spec, g).raw(), g.raw());
    // Full basis: the block is annihilated.
    auto f = gpm_extract_basis(m, theta, b, 1.0, 0);
    EXPECT_LE(block(gpm_project(f, spec, g)).norm(), 1e-12 * norm2(g));
}

TEST(Gpm, CflatStepCases) {
    SeededRng rng(15);
    const MlpSpec spec{{5, 6, 3}, Activation::tanh, 0.0};
    const Mlp m(spec);
    const auto theta = m.init_params(rng);
    const Batch b = random_batch(rng, 20, 5, 3);
    OptimConfig cfg;
    auto s = gpm_extract_basis(m, theta, b, 0.9, 0);

    // eta1 = 0 keeps Lambda = I and the step leaks nothing into span(M).
    const auto r = gpm_cflat_step(m, spec, theta, b, cfg, s, 0.0, 0.1);
    const auto man = spec.manifest();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> G(
        r.projected.values().data() + man[0].offset, 6, 5);
    EXPECT_LE((G * s.basis).norm(), 1e-8 * norm2(cflat_gradient(m, theta, b, cfg).g));

    // Lambda = 0 is an unprojected C-Flat step with step size eta2.
    s.significance.setZero();
    OptimConfig c2 = cfg;
    c2.eta = c2.eta_min = c2.eta_max = 0.1;
    EXPECT_EQ(gpm_cflat_step(m, spec, theta, b, cfg, s, 0.0, 0.1).theta.raw(), cflat_step(m, theta, b, c2).first.raw());

    // Lambda stays clamped under aggressive updates.
    auto state = gpm_extract_basis(m, theta, b, 0.9, 0);
    auto x = theta;
    for (int i = 0; i < 20; ++i) {
        auto step = gpm_cflat_step(m, spec, x, b, cfg, state, 50.0, 0.1);
        x = step.theta;
        state = step.state;
        EXPECT_TRUE((state.significance.array() >= 0.0).all() && (state.significance.array() <= 1.0).all());
    }
    EXPECT_THROW(gpm_cflat_step(m, spec, theta, b, cfg, GpmState{}, 0.0, 0.1), InvalidArgument);
}

// ------------------------------------------------------------------ experiments

TEST(RunCl, SingleTaskMatrixIsPlainAccuracy) {
    const auto s = make_stream(small_dataset(4), Protocol::B0, 4);
    const auto r = run_cl_seed(s, small_experiment(Method::finetune, OptimizerKind::sgd), 0);
    ASSERT_EQ(r.accuracy.tasks(), 1u);
    EXPECT_EQ(r.accuracy.at(0, 0), accuracy(Mlp(r.spec), r.theta, s.tasks[0].test));
}

TEST(RunCl, DeterministicAcrossCallsAndJobs) {
    const auto s = make_stream(small_dataset(4), Protocol::B0, 2);
    const auto cfg = small_experiment(Method::replay, OptimizerKind::cflatpp);
    const auto a = run_cl_seed(s, cfg, 5);
    const auto b = run_cl_seed(s, cfg, 5);
    EXPECT_EQ(a.theta.raw(), b.theta.raw());
    EXPECT_EQ(a.accuracy.rows(), b.accuracy.rows());
    EXPECT_NE(run_cl_seed(s, cfg, 6).theta.raw(), a.theta.raw());
    const auto serial = run_cl_experiment(s, cfg, {0, 1, 2}, 1);
    const auto parallel = run_cl_experiment(s, cfg, {0, 1, 2}, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(serial.seeds[i].seed, parallel.seeds[i].seed);
        EXPECT_EQ(serial.seeds[i].theta.raw(), parallel.seeds[i].theta.raw());
    }
    EXPECT_EQ(serial.mean_accuracy.rows(), parallel.mean_accuracy.rows());
}

TEST(RunCl, FinetuneForgetsAndReplayMatchesJoint) {
    SyntheticSpec spec;
    spec.classes = 4;
    spec.dims = 8;
    spec.per_class = 60;
    spec.cluster_std = 0.3;
    const auto d = synth_dataset(spec);
    const auto two = make_stream(d, Protocol::B0, 2);
    auto cfg = small_experiment(Method::finetune, OptimizerKind::sgd);
    cfg.hidden = {16};
    cfg.epochs = 10;
    const auto ft = run_cl_seed(two, cfg, 0);
    EXPECT_LT(ft.accuracy.at(1, 0), ft.accuracy.at(0, 0));

    cfg.method = Method::replay;
    cfg.memory_per_class = kUnlimitedMemory;
    const auto rp = run_cl_seed(two, cfg, 0);
    cfg.method = Method::finetune;
    const auto joint = run_cl_seed(make_stream(d, Protocol::B0, 4), cfg, 0);
    EXPECT_NEAR(last_accuracy(rp.accuracy), joint.accuracy.at(0, 0), 0.03);
}

TEST(RunCl, EveryMethodWithEveryOptimizer) {
    const auto s = make_stream(small_dataset(6, 15), Protocol::B50, 1);
    for (auto method : {Method::finetune, Method::replay, Method::icarl, Method::wa, Method::gpm})
        for (auto kind : {OptimizerKind::sgd, OptimizerKind::sam, OptimizerKind::cflat, OptimizerKind::cflatpp,
                          OptimizerKind::hybrid}) {
            const auto r = run_cl_seed(s, small_experiment(method, kind), 1);
            ASSERT_EQ(r.accuracy.tasks(), s.tasks.size()) << to_string(method) << "/" << to_string(kind);
            for (std::size_t t = 0; t < r.accuracy.tasks(); ++t)
                for (std::size_t i = 0; i <= t; ++i) {
                    EXPECT_GE(r.accuracy.at(t, i), 0.0);
                    EXPECT_LE(r.accuracy.at(t, i), 1.0);
                }
            EXPECT_GT(r.examples, 0u);
            EXPECT_EQ(r.spec.output_width(), 6u);
            if (method == Method::gpm) EXPECT_LE(r.gpm_worst_leak, 1e-8);
        }
}

TEST(Names, RoundTrip) {
    for (auto m : {Method::finetune, Method::replay, Method::icarl, Method::wa, Method::gpm})
        EXPECT_EQ(parse_method(to_string(m)), m);
    EXPECT_THROW(parse_method("der"), InvalidArgument);
    EXPECT_EQ(parse_protocol("B50"), Protocol::B50);
    EXPECT_THROW(parse_protocol("B10"), InvalidArgument);
}
