#include "cflat/continual.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "cflat/error.hpp"

namespace cflat {

namespace {

enum DataStream : std::uint64_t {
    kMeansStream = 1,
    kSamplesStream = 2,
    kSplitStream = 3,
};

enum RunStream : std::uint64_t {
    kInitStream = 11,
    kShuffleStream = 12,
    kMemoryStream = 13,
    kHeadStream = 14,
    kGpmSampleStream = 16,
    kBaselineStream = 100,   // + task index
};

}  // namespace

// ------------------------------------------------------------------ data

std::vector<ParamVector> synth_class_means(const SyntheticSpec& spec) {
    SeededRng rng(spec.seed, kMeansStream);
    std::vector<ParamVector> means;
    for (std::size_t c = 0; c < spec.classes; ++c) means.push_back(gaussian_fill(rng, spec.dims, 0.0, 1.0));
    return means;
}

Dataset synth_dataset(const SyntheticSpec& spec) {
    if (spec.classes < 2) throw InvalidArgument("synthetic dataset needs at least 2 classes");
    if (spec.per_class < 1) throw InvalidArgument("synthetic dataset needs per_class >= 1");
    if (spec.dims < 1) throw InvalidArgument("synthetic dataset needs dims >= 1");
    if (!(spec.cluster_std >= 0.0)) throw InvalidArgument("cluster_std must be >= 0");
    const auto means = synth_class_means(spec);
    SeededRng rng(spec.seed, kSamplesStream);
    Batch all;
    all.d_in = spec.dims;
    all.features.reserve(spec.classes * spec.per_class * spec.dims);
    for (std::size_t c = 0; c < spec.classes; ++c)
        for (std::size_t s = 0; s < spec.per_class; ++s) {
            for (std::size_t j = 0; j < spec.dims; ++j)
                all.features.push_back(means[c][j] + spec.cluster_std * rng.normal());
            all.labels.push_back(static_cast<int>(c));
        }
    return stratified_split(all, spec.classes, 0.8, spec.seed);
}

Dataset stratified_split(const Batch& all, std::size_t num_classes, double train_fraction,
                         std::uint64_t seed) {
    all.check_labels(num_classes);
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < all.size(); ++i) by_class[static_cast<std::size_t>(all.labels[i])].push_back(i);
    SeededRng rng(seed, kSplitStream);
    std::vector<std::size_t> train_idx, test_idx;
    for (auto& idx : by_class) {
        rng.shuffle(idx);
        auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
        if (n_train == 0 && !idx.empty()) n_train = 1;
        n_train = std::min(n_train, idx.size());
        train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
        test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    }
    Dataset out;
    out.train = all.subset(train_idx);
    out.test = all.subset(test_idx);
    out.train.d_in = out.test.d_in = all.d_in;
    out.num_classes = num_classes;
    return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) {
        const auto b = field.find_first_not_of(" \t\r");
        const auto e = field.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? std::string{} : field.substr(b, e - b + 1));
    }
    return out;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    std::size_t used = 0;
    try {
        out = std::stod(s, &used);
    } catch (const std::exception&) {
        return false;
    }
    return used == s.size();
}

}  // namespace

Dataset load_csv_dataset(const std::string& path, std::uint64_t split_seed) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset '" + path + "'");
    Batch all;
    std::string line;
    std::size_t line_no = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++line_no;
        if (first && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
            static_cast<unsigned char>(line[1]) == 0xBB && static_cast<unsigned char>(line[2]) == 0xBF)
            line.erase(0, 3);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto fields = split_csv_line(line);
        double label = 0.0;
        if (first) {
            first = false;
            if (!parse_double(fields[0], label)) continue;   // header row
        }
        if (fields.size() < 2) throw IoError(path + ":" + std::to_string(line_no) + ": need a label and features");
        if (!parse_double(fields[0], label) || label < 0 || label != std::floor(label))
            throw IoError(path + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
        if (all.d_in == 0) all.d_in = fields.size() - 1;
        if (fields.size() - 1 != all.d_in)
            throw IoError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(all.d_in) +
                          " features, got " + std::to_string(fields.size() - 1));
        for (std::size_t j = 1; j < fields.size(); ++j) {
            double v = 0.0;
            if (!parse_double(fields[j], v))
                throw IoError(path + ":" + std::to_string(line_no) + ": bad feature '" + fields[j] + "'");
            all.features.push_back(v);
        }
        all.labels.push_back(static_cast<int>(label));
    }
    if (all.empty()) throw IoError("dataset '" + path + "' has no rows");
    const auto classes = static_cast<std::size_t>(all.max_label()) + 1;
    return stratified_split(all, classes, 0.8, split_seed);
}

std::string to_string(Protocol p) { return p == Protocol::B0 ? "B0" : "B50"; }

Protocol parse_protocol(const std::string& name) {
    if (name == "B0") return Protocol::B0;
    if (name == "B50") return Protocol::B50;
    throw InvalidArgument("unknown protocol '" + name + "' (expected B0 or B50)");
}

std::size_t TaskStream::classes_through(std::size_t task) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t <= task && t < tasks.size(); ++t) n += tasks[t].classes.size();
    return n;
}

TaskStream make_stream(const Dataset& dataset, Protocol protocol, std::size_t increment,
                       std::uint64_t perm_seed) {
    const std::size_t C = dataset.num_classes;
    if (C < 1) throw InvalidArgument("dataset has no classes");
    if (increment < 1) throw InvalidArgument("class increment must be >= 1");
    std::vector<std::size_t> sizes;
    if (protocol == Protocol::B0) {
        if (C % increment != 0)
            throw InvalidArgument("B0_Inc" + std::to_string(increment) + ": " + std::to_string(C) +
                                  " classes leave remainder " + std::to_string(C % increment));
        sizes.assign(C / increment, increment);
    } else {
        const std::size_t base = (C + 1) / 2;
        const std::size_t rest = C - base;
        if (rest % increment != 0)
            throw InvalidArgument("B50_Inc" + std::to_string(increment) + ": " + std::to_string(rest) +
                                  " incremental classes leave remainder " + std::to_string(rest % increment));
        sizes.push_back(base);
        for (std::size_t i = 0; i < rest / increment; ++i) sizes.push_back(increment);
    }

    TaskStream stream;
    stream.protocol = protocol;
    stream.increment = increment;
    stream.perm_seed = perm_seed;
    stream.num_classes = C;
    stream.class_order.resize(C);
    std::iota(stream.class_order.begin(), stream.class_order.end(), 0);
    SeededRng rng(perm_seed, 0);
    rng.shuffle(stream.class_order);
    std::vector<int> new_id(C);
    for (std::size_t k = 0; k < C; ++k) new_id[static_cast<std::size_t>(stream.class_order[k])] = static_cast<int>(k);

    auto relabel = [&](const Batch& b, int lo, int hi) {
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < b.size(); ++i) {
            const int id = new_id[static_cast<std::size_t>(b.labels[i])];
            if (id >= lo && id < hi) keep.push_back(i);
        }
        Batch out = b.subset(keep);
        out.d_in = b.d_in;
        for (auto& l : out.labels) l = new_id[static_cast<std::size_t>(l)];
        return out;
    };

    int lo = 0;
    for (auto size : sizes) {
        const int hi = lo + static_cast<int>(size);
        Task task;
        task.train = relabel(dataset.train, lo, hi);
        task.test = relabel(dataset.test, lo, hi);
        for (int c = lo; c < hi; ++c) task.classes.push_back(c);
        stream.tasks.push_back(std::move(task));
        lo = hi;
    }
    return stream;
}

double accuracy(const Mlp& model, const ParamVector& theta, const Batch& batch) {
    if (batch.empty()) throw InvalidArgument("accuracy on an empty batch");
    const auto pred = model.predict(theta, batch);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == batch.labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ------------------------------------------------------------------ replay

std::map<int, std::size_t> MemoryBuffer::class_counts() const {
    std::map<int, std::size_t> counts;
    for (int l : exemplars.labels) ++counts[l];
    return counts;
}

MemoryBuffer buffer_update(MemoryBuffer buffer, const Batch& task_data, SeededRng& rng) {
    if (buffer.exemplars.empty()) buffer.exemplars.d_in = task_data.d_in;
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < task_data.size(); ++i) by_class[task_data.labels[i]].push_back(i);
    const auto counts = buffer.class_counts();
    for (auto& [label, idx] : by_class) {
        const auto it = counts.find(label);
        const std::size_t have = it == counts.end() ? 0 : it->second;
        const std::size_t target = std::min(buffer.capacity_per_class, idx.size());
        if (target <= have) continue;
        rng.shuffle(idx);
        std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(target - have));
        std::sort(chosen.begin(), chosen.end());
        buffer.exemplars.append(task_data.subset(chosen));
    }
    return buffer;
}

Batch replay_batch(const Batch& new_batch, const Batch& memory_batch) {
    return concat(new_batch, memory_batch);
}

double replay_loss(const Objective& oracle, const ParamVector& theta, const Batch& new_batch,
                   const Batch& memory_batch) {
    return oracle.loss(theta, replay_batch(new_batch, memory_batch));
}

// ------------------------------------------------------------------ distillation

DistillationObjective::DistillationObjective(Mlp current, Mlp old_model, ParamVector old_theta,
                                             double temperature)
    : current_(std::move(current)), old_model_(std::move(old_model)),
      old_theta_(std::move(old_theta)), temperature_(temperature) {
    if (!(temperature > 0.0)) throw InvalidArgument("distillation temperature must be > 0");
    if (old_model_.spec().output_width() > current_.spec().output_width())
        throw InvalidArgument("old model has more classes than the current one");
    if (old_theta_.size() != old_model_.dim())
        throw DimensionError("old model parameters", old_model_.dim(), old_theta_.size());
}

LogitLoss DistillationObjective::per_example(const Batch& batch,
                                             const std::vector<double>& old_logits) const {
    batch.check_labels(current_.spec().output_width());
    const std::size_t old_classes = old_model_.spec().output_width();
    const double tau = temperature_;
    return [&batch, &old_logits, old_classes, tau](std::size_t e, std::span<const double> z,
                                                   std::span<double> dz) {
        double loss = softmax_cross_entropy(z, batch.labels[e], dz);
        const double* zo = &old_logits[e * old_classes];
        double mo = zo[0], mc = z[0];
        for (std::size_t j = 1; j < old_classes; ++j) {
            mo = std::max(mo, zo[j]);
            mc = std::max(mc, z[j]);
        }
        double so = 0.0, sc = 0.0;
        for (std::size_t j = 0; j < old_classes; ++j) {
            so += std::exp((zo[j] - mo) / tau);
            sc += std::exp((z[j] - mc) / tau);
        }
        const double lse_o = mo / tau + std::log(so);
        const double lse_c = mc / tau + std::log(sc);
        for (std::size_t j = 0; j < old_classes; ++j) {
            const double log_q = zo[j] / tau - lse_o;
            const double log_p = z[j] / tau - lse_c;
            const double q = std::exp(log_q);
            loss += q * (log_q - log_p);
            dz[j] += (std::exp(log_p) - q) / tau;
        }
        return loss;
    };
}

double DistillationObjective::do_loss(const ParamVector& theta, const Batch& batch) const {
    const auto old_logits = old_model_.logits(old_theta_, batch);
    return current_.loss_with(theta, batch, per_example(batch, old_logits));
}

LossGrad DistillationObjective::do_loss_grad(const ParamVector& theta, const Batch& batch) const {
    const auto old_logits = old_model_.logits(old_theta_, batch);
    return current_.loss_grad_with(theta, batch, per_example(batch, old_logits));
}

ParamVector DistillationObjective::do_hvp(const ParamVector& theta, const ParamVector& v,
                                          const Batch& batch, const ParamVector* base_grad) const {
    return finite_difference_hvp(*this, theta, v, batch, base_grad, current_.hvp_step());
}

double icarl_loss(const Mlp& model, const ParamVector& theta,
                  const std::optional<std::pair<Mlp, ParamVector>>& old, const Batch& batch,
                  double temperature) {
    if (!old) return model.loss(theta, batch);
    const DistillationObjective objective(model, old->first, old->second, temperature);
    return objective.loss(theta, batch);
}

// ------------------------------------------------------------------ head growth and WA

GrownHead grow_head(const ParamVector& theta, const MlpSpec& spec, std::size_t new_classes,
                    SeededRng& rng) {
    if (new_classes < 1) throw InvalidArgument("grow_head needs new_classes >= 1");
    if (theta.size() != spec.param_count())
        throw DimensionError("grow_head parameters", spec.param_count(), theta.size());
    MlpSpec grown = spec;
    grown.widths.back() += new_classes;
    const std::size_t last = spec.num_layers() - 1;
    const std::size_t in = spec.widths[last];
    const std::size_t old_out = spec.output_width();
    const std::size_t new_out = grown.output_width();

    std::vector<double> data;
    data.reserve(grown.param_count());
    const auto& src = theta.raw();
    // Everything before the head weights is unchanged.
    const std::size_t head_w = spec.param_count() - old_out * (in + 1);
    data.insert(data.end(), src.begin(), src.begin() + static_cast<std::ptrdiff_t>(head_w + old_out * in));
    const double stddev = std::sqrt(2.0 / static_cast<double>(in + new_out));
    for (std::size_t i = 0; i < new_classes * in; ++i) data.push_back(stddev * rng.normal());
    const std::size_t head_b = head_w + old_out * in;
    data.insert(data.end(), src.begin() + static_cast<std::ptrdiff_t>(head_b), src.end());
    data.insert(data.end(), new_classes, 0.0);
    return {ParamVector(std::move(data), grown.manifest()), std::move(grown)};
}

namespace {

double mean_row_norm(std::span<const double> w, std::size_t row_width) {
    if (row_width == 0 || w.empty() || w.size() % row_width != 0)
        throw InvalidArgument("head weight block is empty or ragged");
    const std::size_t rows = w.size() / row_width;
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < row_width; ++j) sq += w[r * row_width + j] * w[r * row_width + j];
        acc += std::sqrt(sq);
    }
    return acc / static_cast<double>(rows);
}

}  // namespace

double wa_align(std::span<const double> old_weights, std::span<const double> new_weights,
                std::size_t row_width) {
    const double old_mean = mean_row_norm(old_weights, row_width);
    const double new_mean = mean_row_norm(new_weights, row_width);
    if (new_mean == 0.0) throw InvalidArgument("weight alignment with zero new-class norm");
    return old_mean / new_mean;
}

double apply_weight_alignment(ParamVector& theta, const MlpSpec& spec, std::size_t old_classes) {
    const std::size_t last = spec.num_layers() - 1;
    const std::size_t in = spec.widths[last];
    const std::size_t classes = spec.output_width();
    if (old_classes == 0 || old_classes >= classes)
        throw InvalidArgument("weight alignment needs both old and new classes");
    const auto man = spec.manifest();
    const auto& w_seg = man[2 * last];
    const auto& b_seg = man[2 * last + 1];
    auto values = theta.values();
    const auto w = values.subspan(w_seg.offset, w_seg.size());
    const double gamma = wa_align(w.first(old_classes * in), w.subspan(old_classes * in), in);
    for (std::size_t i = old_classes * in; i < w.size(); ++i) w[i] *= gamma;
    auto b = values.subspan(b_seg.offset, b_seg.size());
    for (std::size_t c = old_classes; c < classes; ++c) b[c] *= gamma;
    return gamma;
}

// ------------------------------------------------------------------ GPM

Eigen::MatrixXd representation_matrix(const Mlp& model, const ParamVector& theta,
                                      const Batch& batch, std::size_t layer) {
    const auto reps = model.layer_inputs(theta, batch, layer);
    const std::size_t width = model.spec().widths[layer];
    const auto n = static_cast<Eigen::Index>(batch.size());
    // reps is row-major (n x width), i.e. column-major (width x n).
    return Eigen::Map<const Eigen::MatrixXd>(reps.data(), static_cast<Eigen::Index>(width), n);
}

namespace {

struct Spectrum {
    Eigen::MatrixXd U;
    Eigen::VectorXd sigma;
    Eigen::Index numeric_rank = 0;
};

Spectrum thin_svd(const Eigen::MatrixXd& R) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(R, Eigen::ComputeThinU);
    Spectrum s{svd.matrixU(), svd.singularValues(), 0};
    if (s.sigma.size() > 0) {
        const double tol = s.sigma(0) * static_cast<double>(std::max(R.rows(), R.cols())) *
                           std::numeric_limits<double>::epsilon() * 10.0;
        for (Eigen::Index i = 0; i < s.sigma.size(); ++i)
            if (s.sigma(i) > tol) s.numeric_rank = i + 1;
    }
    return s;
}

// Smallest k whose leading squared singular values lift `have` to threshold * total.
Eigen::Index directions_needed(const Spectrum& s, double have, double total, double threshold) {
    if (threshold >= 1.0) return s.numeric_rank;
    Eigen::Index k = 0;
    double acc = have;
    while (k < s.numeric_rank && acc < threshold * total) {
        acc += s.sigma(k) * s.sigma(k);
        ++k;
    }
    return k;
}

}  // namespace

GpmState gpm_extract_basis(const Mlp& model, const ParamVector& theta, const Batch& sample_batch,
                           double energy_threshold, std::size_t layer) {
    if (!(energy_threshold > 0.0 && energy_threshold <= 1.0))
        throw InvalidArgument("energy threshold must lie in (0, 1]");
    const Eigen::MatrixXd R = representation_matrix(model, theta, sample_batch, layer);
    const Spectrum s = thin_svd(R);
    if (s.numeric_rank == 0) throw InvalidArgument("representation matrix has rank 0");
    const double total = s.sigma.squaredNorm();
    const Eigen::Index r = std::max<Eigen::Index>(1, directions_needed(s, 0.0, total, energy_threshold));
    GpmState state;
    state.layer = layer;
    state.energy_threshold = energy_threshold;
    state.basis = s.U.leftCols(r);
    state.significance = Eigen::VectorXd::Ones(r);
    return state;
}

void gpm_extend_basis(GpmState& state, const Mlp& model, const ParamVector& theta,
                      const Batch& sample_batch) {
    if (state.empty()) {
        state = gpm_extract_basis(model, theta, sample_batch, state.energy_threshold, state.layer);
        return;
    }
    const Eigen::MatrixXd R = representation_matrix(model, theta, sample_batch, state.layer);
    if (R.rows() != state.basis.rows())
        throw DimensionError("GPM representation width", static_cast<std::size_t>(state.basis.rows()),
                             static_cast<std::size_t>(R.rows()));
    const double total = R.squaredNorm();
    if (total == 0.0) return;
    const Eigen::MatrixXd& M = state.basis;
    const double have = (M.transpose() * R).squaredNorm();
    if (have >= state.energy_threshold * total) return;
    const Eigen::MatrixXd residual = R - M * (M.transpose() * R);
    const Spectrum s = thin_svd(residual);
    const Eigen::Index room = M.rows() - M.cols();
    const Eigen::Index k = std::min(room, directions_needed(s, have, total, state.energy_threshold));
    if (k <= 0) return;

    Eigen::MatrixXd grown(M.rows(), M.cols() + k);
    grown.leftCols(M.cols()) = M;
    Eigen::Index cols = M.cols();
    for (Eigen::Index j = 0; j < k; ++j) {
        Eigen::VectorXd u = s.U.col(j);
        // Two Gram-Schmidt passes keep M^T M = I to rounding.
        for (int pass = 0; pass < 2; ++pass) u -= grown.leftCols(cols) * (grown.leftCols(cols).transpose() * u);
        const double len = u.norm();
        if (len < 1e-10) continue;
        grown.col(cols++) = u / len;
    }
    Eigen::VectorXd sig(cols);
    sig.head(state.significance.size()) = state.significance;
    sig.tail(cols - state.significance.size()).setOnes();
    state.basis = grown.leftCols(cols);
    state.significance = sig;
}

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::pair<std::size_t, std::size_t> weight_block(const MlpSpec& spec, std::size_t layer) {
    const auto man = spec.manifest();
    return {man.at(2 * layer).offset, man.at(2 * layer).size()};
}

}  // namespace

ParamVector gpm_project(const GpmState& state, const MlpSpec& spec, const ParamVector& g) {
    if (g.size() != spec.param_count()) throw DimensionError("gpm_project gradient", spec.param_count(), g.size());
    ParamVector out = g;
    if (state.empty()) return out;
    const std::size_t in = spec.widths[state.layer];
    const std::size_t rows = spec.widths[state.layer + 1];
    if (static_cast<std::size_t>(state.basis.rows()) != in)
        throw DimensionError("GPM basis rows", in, static_cast<std::size_t>(state.basis.rows()));
    const auto [offset, size] = weight_block(spec, state.layer);
    (void)size;
    Eigen::Map<RowMajor> G(out.values().data() + offset, static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(in));
    const Eigen::MatrixXd& M = state.basis;
    const RowMajor GM = G * M;
    G -= GM * state.significance.asDiagonal() * M.transpose();
    return out;
}

void gpm_update_significance(GpmState& state, const Objective& oracle, const MlpSpec& spec,
                             const ParamVector& theta, const Batch& batch,
                             const Direction& direction, double eta1, double eta2) {
    if (state.empty() || eta1 == 0.0) return;
    const ParamVector base = direction.perturbation.empty() ? theta : theta + direction.perturbation;
    auto loss_after = [&](const GpmState& s) {
        return oracle.loss(axpy(-eta2, gpm_project(s, spec, direction.g), base), batch);
    };
    const double h = 1e-3;
    const double f0 = loss_after(state);
    Eigen::VectorXd sensitivity(state.significance.size());
    GpmState probe = state;
    for (Eigen::Index j = 0; j < state.significance.size(); ++j) {
        probe.significance = state.significance;
        probe.significance(j) += h;
        sensitivity(j) = (loss_after(probe) - f0) / h;
    }
    state.significance = (state.significance - eta1 * sensitivity).cwiseMax(0.0).cwiseMin(1.0);
}

GpmStepResult gpm_cflat_step(const Objective& oracle, const MlpSpec& spec, const ParamVector& theta,
                             const Batch& batch, const OptimConfig& cfg, GpmState state,
                             double eta1, double eta2) {
    if (state.empty()) throw InvalidArgument("gpm_cflat_step needs a non-empty basis");
    const Direction d = cflat_gradient(oracle, theta, batch, cfg);
    gpm_update_significance(state, oracle, spec, theta, batch, d, eta1, eta2);
    ParamVector projected = gpm_project(state, spec, d.g);
    ParamVector next = axpy(-eta2, projected, theta);
    next.set_manifest(theta.manifest());
    return {std::move(next), std::move(state), d.stats, std::move(projected)};
}

ParamVector GpmFilter::filter(const Objective& oracle, const ParamVector& theta, const Batch& batch,
                              const Direction& direction, const OptimConfig& cfg) {
    gpm_update_significance(state_, oracle, spec_, theta, batch, direction, eta1_, cfg.eta);
    ParamVector projected = gpm_project(state_, spec_, direction.g);
    if (!state_.empty() && (state_.significance.array() == 1.0).all()) {
        const auto [offset, size] = weight_block(spec_, state_.layer);
        (void)size;
        const std::size_t in = spec_.widths[state_.layer];
        const std::size_t rows = spec_.widths[state_.layer + 1];
        Eigen::Map<const RowMajor> G(projected.values().data() + offset, static_cast<Eigen::Index>(rows),
                                     static_cast<Eigen::Index>(in));
        const double g_norm = norm2(direction.g);
        const double leak = (G * state_.basis).norm();
        if (g_norm > 0.0) worst_leak_ = std::max(worst_leak_, leak / g_norm);
        ++full_steps_;
    }
    return projected;
}

// ------------------------------------------------------------------ experiments

std::string to_string(Method m) {
    switch (m) {
        case Method::finetune: return "finetune";
        case Method::replay: return "replay";
        case Method::icarl: return "icarl";
        case Method::wa: return "wa";
        case Method::gpm: return "gpm";
    }
    return "unknown";
}

Method parse_method(const std::string& name) {
    if (name == "finetune") return Method::finetune;
    if (name == "replay") return Method::replay;
    if (name == "icarl") return Method::icarl;
    if (name == "wa") return Method::wa;
    if (name == "gpm") return Method::gpm;
    throw InvalidArgument("unknown method '" + name + "'");
}

namespace {

bool uses_memory(Method m) { return m == Method::replay || m == Method::icarl || m == Method::wa; }
bool uses_distillation(Method m) { return m == Method::icarl || m == Method::wa; }

}  // namespace

SeedResult run_cl_seed(const TaskStream& stream, const ExperimentConfig& cfg, std::uint64_t seed) {
    if (stream.tasks.empty()) throw InvalidArgument("task stream is empty");
    const std::size_t T = stream.tasks.size();
    SeedResult result;
    result.seed = seed;
    result.accuracy = AccuracyMatrix(T);
    result.pre_task_accuracy.assign(T, 0.0);
    result.random_init_accuracy.assign(T, 0.0);

    MlpSpec spec;
    spec.widths.push_back(stream.tasks.front().train.d_in);
    spec.widths.insert(spec.widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    spec.widths.push_back(stream.tasks.front().classes.size());
    spec.activation = cfg.activation;
    spec.l2 = cfg.l2;

    SeededRng init_rng(seed, kInitStream);
    SeededRng shuffle_rng(seed, kShuffleStream);
    SeededRng memory_rng(seed, kMemoryStream);
    SeededRng head_rng(seed, kHeadStream);
    SeededRng gpm_rng(seed, kGpmSampleStream);

    ParamVector theta = Mlp(spec).init_params(init_rng);
    MemoryBuffer memory{cfg.memory_per_class, {}};
    GpmState gpm;
    gpm.layer = cfg.gpm_layer;
    gpm.energy_threshold = cfg.gpm_threshold;
    std::optional<std::pair<Mlp, ParamVector>> old;
    auto stepper = make_stepper(cfg.optimizer);
    long step = 0;

    for (std::size_t t = 0; t < T; ++t) {
        const Task& task = stream.tasks[t];
        if (t > 0) {
            GrownHead grown = grow_head(theta, spec, task.classes.size(), head_rng);
            theta = std::move(grown.theta);
            spec = std::move(grown.spec);
        }
        const Mlp model(spec);
        result.pre_task_accuracy[t] = accuracy(model, theta, task.test);
        {
            SeededRng baseline_rng(seed, kBaselineStream + t);
            result.random_init_accuracy[t] = accuracy(model, model.init_params(baseline_rng), task.test);
        }

        Batch train = task.train;
        if (uses_memory(cfg.method)) train.append(memory.exemplars);

        std::unique_ptr<DistillationObjective> distill;
        if (uses_distillation(cfg.method) && old)
            distill = std::make_unique<DistillationObjective>(model, old->first, old->second, cfg.temperature);
        const Objective& objective = distill ? static_cast<const Objective&>(*distill) : model;

        TrainOptions options;
        options.epochs = cfg.epochs;
        options.batch_size = std::min(cfg.batch_size, train.size());
        options.schedule = cfg.schedule;
        options.task = static_cast<int>(t);
        options.step_offset = step;
        std::unique_ptr<GpmFilter> filter;
        if (cfg.method == Method::gpm && !gpm.empty()) {
            filter = std::make_unique<GpmFilter>(gpm, spec, cfg.gpm_eta_lambda);
            options.filter = filter.get();
        }
        stepper->begin_task(static_cast<std::size_t>(cfg.epochs) *
                            steps_per_epoch(train.size(), options.batch_size));

        const auto start = std::chrono::steady_clock::now();
        TrainResult trained = train_epochs(objective, std::move(theta), train, cfg.optim, *stepper,
                                           options, shuffle_rng);
        result.train_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        theta = std::move(trained.theta);
        step += static_cast<long>(trained.trace.size());
        for (const auto& e : trained.trace) result.examples += e.examples;
        result.trace.insert(result.trace.end(), trained.trace.begin(), trained.trace.end());
        if (filter) {
            result.gpm_worst_leak = std::max(result.gpm_worst_leak, filter->worst_leak());
            result.gpm_checked_steps += filter->full_significance_steps();
        }

        if (cfg.method == Method::wa && t > 0) apply_weight_alignment(theta, spec, stream.classes_through(t - 1));
        if (cfg.method == Method::gpm) {
            std::vector<std::size_t> idx(task.train.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            gpm_rng.shuffle(idx);
            idx.resize(std::min(idx.size(), cfg.gpm_samples));
            Batch sample = task.train.subset(idx);
            sample.d_in = task.train.d_in;
            gpm_extend_basis(gpm, model, theta, sample);
        }
        if (uses_memory(cfg.method)) memory = buffer_update(std::move(memory), task.train, memory_rng);
        old.emplace(model, theta);

        for (std::size_t i = 0; i <= t; ++i)
            result.accuracy.set(t, i, accuracy(model, theta, stream.tasks[i].test));
        if (t + 1 == T) result.final_train = std::move(train);
    }
    result.spec = spec;
    result.theta = std::move(theta);
    return result;
}

ExperimentResult run_cl_experiment(const TaskStream& stream, const ExperimentConfig& cfg,
                                   const std::vector<std::uint64_t>& seeds, int jobs) {
    if (seeds.empty()) throw InvalidArgument("run_cl_experiment needs at least one seed");
    ExperimentResult out;
    out.seeds.resize(seeds.size());
    std::vector<std::exception_ptr> errors(seeds.size());
    const auto workers = static_cast<std::size_t>(std::clamp<int>(jobs, 1, static_cast<int>(seeds.size())));
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < seeds.size(); i = next++) {
            try {
                out.seeds[i] = run_cl_seed(stream, cfg, seeds[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<AccuracyMatrix> mats;
    for (const auto& s : out.seeds) mats.push_back(s.accuracy);
    out.mean_accuracy = AccuracyMatrix::mean(mats);
    return out;
}

}  // namespace cflat
