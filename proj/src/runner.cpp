#include "cflat/runner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "cflat/error.hpp"
#include "cflat/metrics.hpp"

namespace cflat {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double sample_std(const std::vector<double>& values) {
    if (values.size() < 2) return 0.0;
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double acc = 0.0;
    for (double v : values) acc += (v - mean) * (v - mean);
    return std::sqrt(acc / static_cast<double>(values.size() - 1));
}

// ------------------------------------------------------------------ config parsing

namespace {

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be an object");
    }

    std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    const json* find(const char* key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void get(const char* key, double& out) {
        if (const json* v = find(key)) {
            if (!v->is_number()) throw ConfigError(field(key), "expected a number");
            out = v->get<double>();
            if (!std::isfinite(out)) throw ConfigError(field(key), "must be finite");
        }
    }
    void get(const char* key, bool& out) {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
            out = v->get<bool>();
        }
    }
    void get(const char* key, std::string& out) {
        if (const json* v = find(key)) {
            if (!v->is_string()) throw ConfigError(field(key), "expected a string");
            out = v->get<std::string>();
        }
    }
    void get(const char* key, std::size_t& out) { out = static_cast<std::size_t>(unsigned_at(key, out)); }
    void get(const char* key, std::uint64_t& out, int) { out = unsigned_at(key, out); }
    void get(const char* key, int& out) {
        if (const json* v = find(key)) {
            if (!v->is_number_integer()) throw ConfigError(field(key), "expected an integer");
            out = v->get<int>();
        }
    }
    void get(const char* key, long& out) {
        if (const json* v = find(key)) {
            if (!v->is_number_integer()) throw ConfigError(field(key), "expected an integer");
            out = v->get<long>();
        }
    }
    template <class T>
    void get_list(const char* key, std::vector<T>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) throw ConfigError(field(key), "expected a list");
            out.clear();
            for (const auto& item : *v) {
                if (!item.is_number_integer() || (std::is_unsigned_v<T> && !non_negative(item)))
                    throw ConfigError(field(key), std::is_unsigned_v<T> ? "expected non-negative integers"
                                                                        : "expected integers");
                out.push_back(item.get<T>());
            }
        }
    }
    template <class Enum, class Parse>
    void get_enum(const char* key, Enum& out, Parse parse) {
        std::string name;
        if (find(key) == nullptr) return;
        get(key, name);
        try {
            out = parse(name);
        } catch (const InvalidArgument& e) {
            throw ConfigError(field(key), e.what());
        }
    }

    Reader child(const char* key) {
        static const json empty = json::object();
        const json* v = find(key);
        return Reader(v ? *v : empty, field(key));
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            (void)value;
            if (!seen_.count(key)) throw ConfigError(field(key.c_str()), "unknown key");
        }
    }

private:
    // Parsed text yields unsigned numbers, but JSON built in code stores 4 as signed.
    static bool non_negative(const json& v) { return v.is_number_unsigned() || v.get<std::int64_t>() >= 0; }

    std::uint64_t unsigned_at(const char* key, std::uint64_t current) {
        const json* v = find(key);
        if (!v) return current;
        if (!v->is_number_integer() || !non_negative(*v))
            throw ConfigError(field(key), "expected a non-negative integer");
        return v->get<std::uint64_t>();
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(field, what);
}

void validate(const RunConfig& c) {
    const auto& e = c.experiment;
    require(c.dataset.kind == "synthetic" || c.dataset.kind == "csv", "dataset.kind",
            "expected \"synthetic\" or \"csv\"");
    if (c.dataset.kind == "csv") require(!c.dataset.path.empty(), "dataset.path", "required for csv datasets");
    require(c.dataset.synthetic.classes >= 2, "dataset.classes", "must be >= 2");
    require(c.dataset.synthetic.dims >= 1, "dataset.dims", "must be >= 1");
    require(c.dataset.synthetic.per_class >= 2, "dataset.per_class", "must be >= 2");
    require(c.dataset.synthetic.cluster_std >= 0.0, "dataset.cluster_std", "must be >= 0");
    require(c.increment >= 1, "increment", "must be >= 1");
    require(e.epochs >= 1, "epochs", "must be >= 1");
    require(e.batch_size >= 1, "batch_size", "must be >= 1");
    require(e.temperature > 0.0, "temperature", "must be > 0");
    require(e.memory_per_class >= 1, "memory_per_class", "must be >= 1");
    require(e.optimizer.hybrid_p >= 0.0 && e.optimizer.hybrid_p <= 1.0, "hybrid.p", "must lie in [0, 1]");
    require(e.optimizer.proxy.eta0 >= 0.0, "proxy.eta0", "must be >= 0");
    require(e.l2 >= 0.0, "model.l2", "must be >= 0");
    for (auto h : e.hidden) require(h >= 1, "model.hidden", "widths must be >= 1");
    require(e.gpm_threshold > 0.0 && e.gpm_threshold <= 1.0, "gpm.threshold", "must lie in (0, 1]");
    require(e.gpm_layer <= e.hidden.size(), "gpm.layer", "must index a layer of the model");
    require(e.gpm_eta_lambda >= 0.0, "gpm.eta_lambda", "must be >= 0");
    require(e.gpm_samples >= 1, "gpm.samples", "must be >= 1");
    require(e.schedule.decay > 0.0, "milestone_decay", "must be > 0");
    for (std::size_t i = 0; i < e.schedule.milestones.size(); ++i) {
        require(e.schedule.milestones[i] >= 1, "milestones", "epochs must be >= 1");
        if (i > 0) require(e.schedule.milestones[i] > e.schedule.milestones[i - 1], "milestones",
                           "must be strictly increasing");
    }
    const auto& l = c.landscape;
    require(l.flatness.power_iters >= 1, "landscape.power_iters", "must be >= 1");
    require(l.flatness.power_tol > 0.0, "landscape.power_tol", "must be > 0");
    require(l.flatness.trace_probes >= 1, "landscape.trace_probes", "must be >= 1");
    require(l.flatness.rho > 0.0, "landscape.rho", "must be > 0");
    require(l.flatness.ball_samples >= 1, "landscape.ball_samples", "must be >= 1");
    require(l.flatness.ordering_slack >= 0.0, "landscape.ordering_slack", "must be >= 0");
    require(l.grid_n >= 1, "landscape.grid_n", "must be >= 1");
    require(l.extent > 0.0, "landscape.extent", "must be > 0");
    require(!c.seeds.empty(), "seeds", "needs at least one seed");
    require(c.jobs >= 1, "jobs", "must be >= 1");
    require(!c.out.empty(), "out", "must not be empty");
    e.optim.validate();
}

}  // namespace

RunConfig parse_run_config(const json& root) {
    const json& j = (root.is_object() && root.contains("schema") && root.contains("config")) ? root.at("config") : root;
    RunConfig c;
    auto& e = c.experiment;
    Reader r(j, "");

    {
        Reader d = r.child("dataset");
        d.get("kind", c.dataset.kind);
        d.get("classes", c.dataset.synthetic.classes);
        d.get("dims", c.dataset.synthetic.dims);
        d.get("per_class", c.dataset.synthetic.per_class);
        d.get("cluster_std", c.dataset.synthetic.cluster_std);
        d.get("seed", c.dataset.synthetic.seed, 0);
        d.get("path", c.dataset.path);
        d.get("split_seed", c.dataset.split_seed, 0);
        d.finish();
    }
    r.get_enum("protocol", c.protocol, parse_protocol);
    r.get("increment", c.increment);
    r.get("class_order_seed", c.class_order_seed, 0);
    r.get_enum("method", e.method, parse_method);
    r.get("memory_per_class", e.memory_per_class);
    r.get("temperature", e.temperature);
    r.get_enum("optimizer", e.optimizer.kind, parse_optimizer);
    {
        Reader h = r.child("hybrid");
        h.get("p", e.optimizer.hybrid_p);
        h.get_enum("ordering", e.optimizer.hybrid_ordering, parse_hybrid_ordering);
        h.finish();
    }
    {
        Reader o = r.child("optim");
        o.get("eta", e.optim.eta);
        o.get("rho", e.optim.rho);
        o.get("lambda", e.optim.lambda);
        o.get("eps_guard", e.optim.eps_guard);
        // rho_min/max and eta_min/max default to rho and eta unless given.
        e.optim.rho_min = e.optim.rho_max = e.optim.rho;
        e.optim.eta_min = e.optim.eta_max = e.optim.eta;
        o.get("rho_min", e.optim.rho_min);
        o.get("rho_max", e.optim.rho_max);
        o.get("eta_min", e.optim.eta_min);
        o.get("eta_max", e.optim.eta_max);
        o.finish();
    }
    {
        Reader p = r.child("proxy");
        p.get("A", e.optimizer.proxy.A);
        p.get("k", e.optimizer.proxy.k);
        p.get("i0", e.optimizer.proxy.i0);
        p.get("eta0", e.optimizer.proxy.eta0);
        p.get("reset_per_task", e.optimizer.reset_proxy_per_task);
        p.finish();
    }
    {
        Reader m = r.child("model");
        m.get_list("hidden", e.hidden);
        m.get_enum("activation", e.activation, parse_activation);
        m.get("l2", e.l2);
        m.finish();
    }
    r.get("epochs", e.epochs);
    r.get("batch_size", e.batch_size);
    r.get_list("milestones", e.schedule.milestones);
    r.get("milestone_decay", e.schedule.decay);
    {
        Reader g = r.child("gpm");
        g.get("threshold", e.gpm_threshold);
        g.get("layer", e.gpm_layer);
        g.get("eta_lambda", e.gpm_eta_lambda);
        g.get("samples", e.gpm_samples);
        g.finish();
    }
    {
        Reader l = r.child("landscape");
        auto& f = c.landscape.flatness;
        l.get("power_iters", f.power_iters);
        l.get("power_tol", f.power_tol);
        l.get("trace_probes", f.trace_probes);
        l.get("rho", f.rho);
        l.get("ball_samples", f.ball_samples);
        l.get("probe_seed", f.probe_seed, 0);
        l.get("ordering_slack", f.ordering_slack);
        l.get("grid_n", c.landscape.grid_n);
        l.get("extent", c.landscape.extent);
        l.get("eval_examples", c.landscape.eval_examples);
        l.finish();
    }
    r.get_list("seeds", c.seeds);
    r.get("jobs", c.jobs);
    r.get("out", c.out);
    r.finish();
    validate(c);
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("", "config '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

json to_json(const RunConfig& c) {
    const auto& e = c.experiment;
    json j;
    j["dataset"] = {{"kind", c.dataset.kind},
                    {"classes", c.dataset.synthetic.classes},
                    {"dims", c.dataset.synthetic.dims},
                    {"per_class", c.dataset.synthetic.per_class},
                    {"cluster_std", c.dataset.synthetic.cluster_std},
                    {"seed", c.dataset.synthetic.seed},
                    {"path", c.dataset.path},
                    {"split_seed", c.dataset.split_seed}};
    j["protocol"] = to_string(c.protocol);
    j["increment"] = c.increment;
    j["class_order_seed"] = c.class_order_seed;
    j["method"] = to_string(e.method);
    j["memory_per_class"] = e.memory_per_class;
    j["temperature"] = e.temperature;
    j["optimizer"] = to_string(e.optimizer.kind);
    j["hybrid"] = {{"p", e.optimizer.hybrid_p}, {"ordering", to_string(e.optimizer.hybrid_ordering)}};
    j["optim"] = {{"eta", e.optim.eta},         {"rho", e.optim.rho},         {"lambda", e.optim.lambda},
                  {"eps_guard", e.optim.eps_guard}, {"rho_min", e.optim.rho_min}, {"rho_max", e.optim.rho_max},
                  {"eta_min", e.optim.eta_min}, {"eta_max", e.optim.eta_max}};
    j["proxy"] = {{"A", e.optimizer.proxy.A},
                  {"k", e.optimizer.proxy.k},
                  {"i0", e.optimizer.proxy.i0},
                  {"eta0", e.optimizer.proxy.eta0},
                  {"reset_per_task", e.optimizer.reset_proxy_per_task}};
    j["model"] = {{"hidden", e.hidden}, {"activation", to_string(e.activation)}, {"l2", e.l2}};
    j["epochs"] = e.epochs;
    j["batch_size"] = e.batch_size;
    j["milestones"] = e.schedule.milestones;
    j["milestone_decay"] = e.schedule.decay;
    j["gpm"] = {{"threshold", e.gpm_threshold},
                {"layer", e.gpm_layer},
                {"eta_lambda", e.gpm_eta_lambda},
                {"samples", e.gpm_samples}};
    const auto& f = c.landscape.flatness;
    j["landscape"] = {{"power_iters", f.power_iters},   {"power_tol", f.power_tol},
                      {"trace_probes", f.trace_probes}, {"rho", f.rho},
                      {"ball_samples", f.ball_samples}, {"probe_seed", f.probe_seed},
                      {"ordering_slack", f.ordering_slack}, {"grid_n", c.landscape.grid_n},
                      {"extent", c.landscape.extent},   {"eval_examples", c.landscape.eval_examples}};
    j["seeds"] = c.seeds;
    j["jobs"] = c.jobs;
    j["out"] = c.out;
    return j;
}

TaskStream build_stream(const RunConfig& cfg) {
    const Dataset data = cfg.dataset.kind == "csv" ? load_csv_dataset(cfg.dataset.path, cfg.dataset.split_seed)
                                                   : synth_dataset(cfg.dataset.synthetic);
    try {
        return make_stream(data, cfg.protocol, cfg.increment, cfg.class_order_seed);
    } catch (const InvalidArgument& e) {
        throw ConfigError("increment", e.what());
    }
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream in(text);
    std::string item;
    auto number = [&](const std::string& s) -> std::uint64_t {
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
            throw ConfigError("seeds", "bad seed '" + s + "'");
        return std::stoull(s);
    };
    while (std::getline(in, item, ',')) {
        const auto dash = item.find('-');
        if (dash == std::string::npos) {
            seeds.push_back(number(item));
            continue;
        }
        const auto lo = number(item.substr(0, dash)), hi = number(item.substr(dash + 1));
        if (hi < lo) throw ConfigError("seeds", "empty range '" + item + "'");
        for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
    }
    if (seeds.empty()) throw ConfigError("seeds", "needs at least one seed");
    return seeds;
}

void apply_overrides(RunConfig& cfg, const RunOverrides& o) {
    if (o.out) cfg.out = *o.out;
    if (o.seeds) cfg.seeds = *o.seeds;
    if (o.jobs) cfg.jobs = *o.jobs;
    validate(cfg);
}

// ------------------------------------------------------------------ run

namespace {

struct SeedMetrics {
    double avg = 0.0, last = 0.0, proportion = 0.0;
    std::optional<double> bwt, fwt;
    long grad_evals = 0, hvp_evals = 0;
};

SeedMetrics seed_metrics(const SeedResult& s) {
    SeedMetrics m;
    m.avg = average_accuracy(s.accuracy);
    m.last = last_accuracy(s.accuracy);
    m.proportion = cflat_proportion(std::span<const TraceEntry>(s.trace));
    if (s.accuracy.tasks() >= 2) {
        m.bwt = bwt(s.accuracy);
        m.fwt = fwt(s.accuracy, s.pre_task_accuracy, s.random_init_accuracy);
    }
    for (const auto& e : s.trace) {
        m.grad_evals += e.stats.grad_evals;
        m.hvp_evals += e.stats.hvp_evals;
    }
    return m;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    return out;
}

std::string opt_field(const std::optional<double>& v) { return v ? format_double(*v) : std::string{}; }

json spec_json(const MlpSpec& spec) {
    return {{"widths", spec.widths}, {"activation", to_string(spec.activation)}, {"l2", spec.l2}};
}

}  // namespace

ExperimentResult execute_run(const RunConfig& cfg) {
    validate(cfg);
    const TaskStream stream = build_stream(cfg);
    ExperimentResult result = run_cl_experiment(stream, cfg.experiment, cfg.seeds, cfg.jobs);

    const fs::path dir(cfg.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + cfg.out + "': " + ec.message());

    const std::string method = to_string(cfg.experiment.method);
    const std::string optimizer = to_string(cfg.experiment.optimizer.kind);

    json seeds = json::array();
    std::vector<double> avgs, lasts, props;
    {
        auto metrics = open_out(dir / "metrics.csv");
        metrics << "seed,method,optimizer,avg_acc,last_acc,bwt,fwt,cflat_proportion,steps,examples,grad_evals,"
                   "hvp_evals\n";
        for (const auto& s : result.seeds) {
            const SeedMetrics m = seed_metrics(s);
            metrics << s.seed << ',' << method << ',' << optimizer << ',' << format_double(m.avg) << ','
                    << format_double(m.last) << ',' << opt_field(m.bwt) << ',' << opt_field(m.fwt) << ','
                    << format_double(m.proportion) << ',' << s.trace.size() << ',' << s.examples << ','
                    << m.grad_evals << ',' << m.hvp_evals << '\n';
            avgs.push_back(m.avg);
            lasts.push_back(m.last);
            props.push_back(m.proportion);
            seeds.push_back({{"seed", s.seed},
                             {"avg_acc", m.avg},
                             {"last_acc", m.last},
                             {"bwt", m.bwt ? json(*m.bwt) : json(nullptr)},
                             {"fwt", m.fwt ? json(*m.fwt) : json(nullptr)},
                             {"cflat_proportion", m.proportion},
                             {"steps", s.trace.size()},
                             {"examples", s.examples},
                             {"accuracy", s.accuracy.rows()},
                             {"pre_task_accuracy", s.pre_task_accuracy},
                             {"random_init_accuracy", s.random_init_accuracy},
                             {"gpm_worst_leak", s.gpm_worst_leak},
                             {"gpm_checked_steps", s.gpm_checked_steps}});
        }
    }
    {
        auto trace = open_out(dir / "trace.csv");
        trace << "seed,task,epoch,step,eta,rho,examples,loss,sq_grad_norm,used_cflat,grad_evals,hvp_evals,"
                 "eps0_norm,eps1_norm,proxy_iteration,proxy_value,proxy_A_before,proxy_A_after,proxy_error\n";
        for (const auto& s : result.seeds)
            for (const auto& e : s.trace) {
                const auto& st = e.stats;
                trace << s.seed << ',' << e.task << ',' << e.epoch << ',' << e.step << ',' << format_double(e.eta)
                      << ',' << format_double(e.rho) << ',' << e.examples << ',' << format_double(st.loss) << ','
                      << format_double(st.sq_grad_norm) << ',' << (st.used_cflat ? 1 : 0) << ','
                      << st.grad_evals << ',' << st.hvp_evals << ',' << format_double(st.eps0_norm) << ','
                      << format_double(st.eps1_norm) << ',';
                if (st.proxy) {
                    trace << st.proxy->iteration << ',' << format_double(st.proxy->value) << ','
                          << format_double(st.proxy->A_before) << ',' << format_double(st.proxy->A_after) << ','
                          << format_double(st.proxy->error) << '\n';
                } else {
                    trace << ",,,,\n";
                }
            }
    }
    {
        auto timing = open_out(dir / "timing.csv");
        timing << "seed,train_seconds,examples,throughput\n";
        for (const auto& s : result.seeds) {
            const double tp = s.train_seconds > 0.0 ? static_cast<double>(s.examples) / s.train_seconds : 0.0;
            timing << s.seed << ',' << format_double(s.train_seconds) << ',' << s.examples << ','
                   << format_double(tp) << '\n';
        }
    }
    for (const auto& s : result.seeds) {
        json ck = {{"kind", "mlp"},
                   {"seed", s.seed},
                   {"spec", spec_json(s.spec)},
                   {"theta", s.theta.raw()},
                   {"config", to_json(cfg)}};
        open_out(dir / ("checkpoint_seed" + std::to_string(s.seed) + ".json")) << ck.dump() << '\n';
    }

    json manifest;
    manifest["schema"] = kRunSchema;
    manifest["config"] = to_json(cfg);
    manifest["conventions"] = {
        {"bwt", "mean over i < T of a[T][i] - a[i][i]"},
        {"fwt", "mean over i > 1 of (accuracy on task i before training it) - (random-init accuracy on task i)"},
        {"relative_return", "(x - x_sgd) / x_sgd"},
        {"timing", "wall-clock fields live in timing.csv only"}};
    manifest["seeds"] = seeds;
    double avg_mean = 0.0, last_mean = 0.0, prop_mean = 0.0;
    for (std::size_t i = 0; i < avgs.size(); ++i) {
        avg_mean += avgs[i];
        last_mean += lasts[i];
        prop_mean += props[i];
    }
    const double n = static_cast<double>(avgs.size());
    manifest["summary"] = {{"method", method},
                           {"optimizer", optimizer},
                           {"avg_acc_mean", avg_mean / n},
                           {"avg_acc_std", sample_std(avgs)},
                           {"last_acc_mean", last_mean / n},
                           {"last_acc_std", sample_std(lasts)},
                           {"cflat_proportion_mean", prop_mean / n}};
    open_out(dir / "manifest.json") << manifest.dump(2) << '\n';
    return result;
}

void cmd_run(const std::string& config_path, const RunOverrides& overrides) {
    RunConfig cfg = load_run_config(config_path);
    apply_overrides(cfg, overrides);
    execute_run(cfg);
}

// ------------------------------------------------------------------ sweep

namespace {

struct Axis {
    std::string key;
    std::vector<json> values;
    std::vector<std::string> labels;
};

Axis parse_axis(const std::string& spec, const json& base) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
        throw ConfigError(spec, "sweep axis must look like key=v1,v2");
    Axis axis;
    axis.key = spec.substr(0, eq);
    json::json_pointer ptr;
    {
        std::string pointer;
        std::stringstream parts(axis.key);
        std::string part;
        while (std::getline(parts, part, '.')) pointer += "/" + part;
        ptr = json::json_pointer(pointer);
    }
    if (!base.contains(ptr) || base.at(ptr).is_object())
        throw ConfigError(axis.key, "not a sweepable config key");
    std::stringstream values(spec.substr(eq + 1));
    std::string token;
    while (std::getline(values, token, ',')) {
        json v;
        try {
            v = json::parse(token);
        } catch (const json::parse_error&) {
            v = token;
        }
        axis.values.push_back(std::move(v));
        axis.labels.push_back(token);
    }
    if (axis.values.empty()) throw ConfigError(axis.key, "sweep axis has no values");
    return axis;
}

json::json_pointer pointer_of(const std::string& key) {
    std::string pointer;
    std::stringstream parts(key);
    std::string part;
    while (std::getline(parts, part, '.')) pointer += "/" + part;
    return json::json_pointer(pointer);
}

}  // namespace

std::size_t cmd_sweep(const std::string& config_path, const std::vector<std::string>& axes_spec,
                      const RunOverrides& overrides) {
    RunConfig base_cfg = load_run_config(config_path);
    apply_overrides(base_cfg, overrides);
    const json base = to_json(base_cfg);
    std::vector<Axis> axes;
    for (const auto& a : axes_spec) axes.push_back(parse_axis(a, base));

    std::size_t cells = 1;
    for (const auto& a : axes) cells *= a.values.size();
    const fs::path root(base_cfg.out);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create output directory '" + base_cfg.out + "': " + ec.message());

    std::ostringstream table;
    // method and optimizer always get a column; an axis over one of them just uses that one.
    auto is_fixed = [](const std::string& key) { return key == "method" || key == "optimizer"; };
    table << "cell,dir";
    for (const auto& a : axes)
        if (!is_fixed(a.key)) table << ',' << a.key;
    table << ",method,optimizer,avg_acc_mean,avg_acc_std,last_acc_mean,last_acc_std,cflat_proportion_mean\n";

    // Validate every cell before running any of them.
    std::vector<RunConfig> configs;
    std::vector<std::vector<std::size_t>> picks;
    for (std::size_t cell = 0; cell < cells; ++cell) {
        std::vector<std::size_t> pick(axes.size());
        std::size_t rest = cell;
        for (std::size_t k = axes.size(); k-- > 0;) {
            pick[k] = rest % axes[k].values.size();
            rest /= axes[k].values.size();
        }
        json j = base;
        for (std::size_t k = 0; k < axes.size(); ++k) {
            j[pointer_of(axes[k].key)] = axes[k].values[pick[k]];
            // A fixed (unscheduled) rho or eta drags its range along.
            for (const char* name : {"rho", "eta"}) {
                if (axes[k].key != std::string("optim.") + name) continue;
                const json& o = base.at("optim");
                const std::string lo = std::string(name) + "_min", hi = std::string(name) + "_max";
                if (o.at(lo) == o.at(name) && o.at(hi) == o.at(name))
                    j["optim"][lo] = j["optim"][hi] = axes[k].values[pick[k]];
            }
        }
        char name[32];
        std::snprintf(name, sizeof name, "cell_%03zu", cell);
        j["out"] = (root / name).string();
        configs.push_back(parse_run_config(j));
        picks.push_back(std::move(pick));
    }

    for (std::size_t cell = 0; cell < cells; ++cell) {
        const ExperimentResult r = execute_run(configs[cell]);
        std::vector<double> avgs, lasts;
        double prop = 0.0;
        for (const auto& s : r.seeds) {
            avgs.push_back(average_accuracy(s.accuracy));
            lasts.push_back(last_accuracy(s.accuracy));
            prop += cflat_proportion(std::span<const TraceEntry>(s.trace));
        }
        const double n = static_cast<double>(r.seeds.size());
        double avg_mean = 0.0, last_mean = 0.0;
        for (std::size_t i = 0; i < avgs.size(); ++i) {
            avg_mean += avgs[i];
            last_mean += lasts[i];
        }
        table << cell << ',' << fs::path(configs[cell].out).filename().string();
        for (std::size_t k = 0; k < axes.size(); ++k)
            if (!is_fixed(axes[k].key)) table << ',' << axes[k].labels[picks[cell][k]];
        table << ',' << to_string(configs[cell].experiment.method) << ','
              << to_string(configs[cell].experiment.optimizer.kind) << ',' << format_double(avg_mean / n) << ','
              << format_double(sample_std(avgs)) << ',' << format_double(last_mean / n) << ','
              << format_double(sample_std(lasts)) << ',' << format_double(prop / n) << '\n';
    }
    open_out(root / "sweep.csv") << table.str();
    return cells;
}

// ------------------------------------------------------------------ landscape

namespace {

json read_json_file(const fs::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw IoError(std::string("cannot open ") + what + " '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw IoError(std::string(what) + " '" + path.string() + "' is not valid JSON: " + e.what());
    }
}

std::vector<double> doubles(const json& j, const char* field) {
    if (!j.is_array()) throw IoError(std::string("checkpoint field '") + field + "' must be a list");
    std::vector<double> out;
    for (const auto& v : j) {
        if (!v.is_number()) throw IoError(std::string("checkpoint field '") + field + "' must hold numbers");
        out.push_back(v.get<double>());
    }
    return out;
}

bool is_zero(const ParamVector& v) {
    return v.empty() || std::all_of(v.raw().begin(), v.raw().end(), [](double x) { return x == 0.0; });
}

}  // namespace

FlatnessReport cmd_landscape(const std::string& checkpoint_path, const std::string& config_path,
                             const std::string& out_dir) {
    const json ck = read_json_file(checkpoint_path, "checkpoint");
    if (!ck.is_object() || !ck.contains("kind") || !ck.contains("theta"))
        throw IoError("checkpoint '" + checkpoint_path + "' lacks kind/theta");
    RunConfig cfg;
    if (!config_path.empty()) {
        cfg = load_run_config(config_path);
    } else if (ck.contains("config")) {
        cfg = parse_run_config(ck.at("config"));
    }
    const LandscapeConfig& lc = cfg.landscape;
    ParamVector theta(doubles(ck.at("theta"), "theta"));

    std::unique_ptr<Objective> oracle;
    Batch batch;
    const std::string kind = ck.at("kind").get<std::string>();
    if (kind == "quadratic") {
        if (!ck.contains("hessian") || !ck.contains("center")) throw IoError("quadratic checkpoint needs hessian and center");
        const auto center = doubles(ck.at("center"), "center");
        std::vector<double> h;
        for (const auto& row : ck.at("hessian")) {
            const auto r = doubles(row, "hessian");
            if (r.size() != center.size()) throw DimensionError("hessian row", center.size(), r.size());
            h.insert(h.end(), r.begin(), r.end());
        }
        if (h.size() != center.size() * center.size())
            throw DimensionError("hessian rows", center.size(), h.size() / std::max<std::size_t>(1, center.size()));
        oracle = std::make_unique<QuadraticObjective>(
            make_quadratic(SymmetricMatrix(center.size(), std::move(h)), ParamVector(center)));
    } else if (kind == "mlp") {
        const json& s = ck.at("spec");
        MlpSpec spec;
        spec.widths = s.at("widths").get<std::vector<std::size_t>>();
        spec.activation = parse_activation(s.at("activation").get<std::string>());
        spec.l2 = s.at("l2").get<double>();
        spec.validate();
        auto model = std::make_unique<Mlp>(spec);
        const TaskStream stream = build_stream(cfg);
        batch.d_in = stream.tasks.front().train.d_in;
        for (const auto& t : stream.tasks) batch.append(t.train);
        batch.check_labels(spec.output_width());
        if (lc.eval_examples > 0 && lc.eval_examples < batch.size()) {
            std::vector<std::size_t> idx(batch.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            SeededRng pick(lc.flatness.probe_seed, 6);
            pick.shuffle(idx);
            idx.resize(lc.eval_examples);
            std::sort(idx.begin(), idx.end());
            Batch sub = batch.subset(idx);
            sub.d_in = batch.d_in;
            batch = std::move(sub);
        }
        theta.set_manifest(spec.manifest());
        oracle = std::move(model);
    } else {
        throw IoError("unknown checkpoint kind '" + kind + "'");
    }
    if (theta.size() != oracle->dim()) throw DimensionError("checkpoint theta", oracle->dim(), theta.size());

    EigenEstimate top, second;
    const FlatnessReport report = flatness_report(*oracle, theta, batch, lc.flatness, &top, &second);

    SeededRng dir_rng(lc.flatness.probe_seed, 5);
    auto direction = [&](const ParamVector& v) {
        if (!is_zero(v)) return v;
        ParamVector r = gaussian_fill(dir_rng, theta.size(), 0.0, 1.0);
        return scaled(1.0 / norm2(r), r);
    };
    const ParamVector d1 = direction(top.vector);
    const ParamVector d2 = direction(second.vector);
    const LossGrid grid = landscape_slice_2d(*oracle, theta, batch, d1, d2, lc.extent, lc.grid_n);

    const fs::path dir = out_dir.empty() ? fs::path(checkpoint_path).parent_path() : fs::path(out_dir);
    std::error_code ec;
    if (!dir.empty()) fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());

    const json out = {{"checkpoint", fs::path(checkpoint_path).filename().string()},
                      {"kind", kind},
                      {"loss", report.loss},
                      {"sq_grad_norm", report.sq_grad_norm},
                      {"lambda_max", report.lambda_max},
                      {"lambda_second", report.lambda_second},
                      {"trace", report.trace},
                      {"r0_sample", report.r0_sample},
                      {"r1_sample", report.r1_sample},
                      {"rho", report.rho_used},
                      {"r0_le_r1", report.r0_le_r1},
                      {"power_iters", report.power_iters},
                      {"trace_probes", report.trace_probes},
                      {"ball_samples", report.ball_samples},
                      {"probe_seed", report.probe_seed},
                      {"eval_examples", batch.size()}};
    open_out(dir / "flatness.json") << out.dump(2) << '\n';
    auto slice = open_out(dir / "slice.csv");
    slice << "i,j,alpha,beta,loss\n";
    for (std::size_t i = 0; i < grid.n(); ++i)
        for (std::size_t j = 0; j < grid.n(); ++j)
            slice << i << ',' << j << ',' << format_double(grid.coords[i]) << ',' << format_double(grid.coords[j])
                  << ',' << format_double(grid.at(i, j)) << '\n';
    return report;
}

// ------------------------------------------------------------------ report

namespace {

struct ReportRow {
    std::string run, method, optimizer;
    std::vector<double> avg, last, prop;
    std::optional<double> throughput;
};

double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::optional<double> read_throughput(const fs::path& timing_csv) {
    std::ifstream in(timing_csv);
    if (!in) return std::nullopt;
    std::string line;
    std::getline(in, line);
    double seconds = 0.0, examples = 0.0;
    while (std::getline(in, line)) {
        std::stringstream row(line);
        std::string seed, secs, ex;
        std::getline(row, seed, ',');
        std::getline(row, secs, ',');
        std::getline(row, ex, ',');
        if (secs.empty() || ex.empty()) continue;
        seconds += std::stod(secs);
        examples += std::stod(ex);
    }
    if (!(seconds > 0.0)) return std::nullopt;
    return examples / seconds;
}

}  // namespace

std::string cmd_report(const std::string& results_dir) {
    const fs::path root(results_dir);
    if (!fs::is_directory(root)) throw IoError("results directory '" + results_dir + "' does not exist");
    std::vector<fs::path> manifests;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file() && entry.path().filename() == "manifest.json") manifests.push_back(entry.path());
    std::sort(manifests.begin(), manifests.end());
    if (manifests.empty()) throw IoError("no manifest.json under '" + results_dir + "'");

    std::vector<ReportRow> rows;
    for (const auto& path : manifests) {
        const json m = read_json_file(path, "manifest");
        const auto schema = m.is_object() && m.contains("schema") && m["schema"].is_string()
                                ? m["schema"].get<std::string>()
                                : std::string("<none>");
        if (schema != kRunSchema)
            throw InvalidArgument("mixed-schema manifests: '" + path.string() + "' has schema " + schema +
                                  ", expected " + kRunSchema);
        ReportRow row;
        const auto rel = fs::relative(path.parent_path(), root).generic_string();
        row.run = rel.empty() ? "." : rel;
        row.method = m.at("config").at("method").get<std::string>();
        row.optimizer = m.at("config").at("optimizer").get<std::string>();
        for (const auto& s : m.at("seeds")) {
            row.avg.push_back(s.at("avg_acc").get<double>());
            row.last.push_back(s.at("last_acc").get<double>());
            row.prop.push_back(s.at("cflat_proportion").get<double>());
        }
        if (row.avg.empty()) throw InvalidArgument("manifest '" + path.string() + "' has no seeds");
        row.throughput = read_throughput(path.parent_path() / "timing.csv");
        rows.push_back(std::move(row));
    }

    std::ostringstream md;
    md << "# Results\n\n";
    md << "| run | method | optimizer | seeds | avg acc | last acc | C-Flat proportion | throughput (ex/s) | "
          "relative return |\n";
    md << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        const ReportRow* baseline = nullptr;
        for (const auto& b : rows)
            if (b.method == r.method && b.optimizer == "sgd") {
                baseline = &b;
                break;
            }
        std::string rel = "n/a";
        if (baseline && mean_of(baseline->avg) != 0.0)
            rel = fixed(relative_return(mean_of(r.avg), mean_of(baseline->avg)));
        md << "| " << r.run << " | " << r.method << " | " << r.optimizer << " | " << r.avg.size() << " | "
           << fixed(mean_of(r.avg)) << " ± " << fixed(sample_std(r.avg)) << " | " << fixed(mean_of(r.last))
           << " ± " << fixed(sample_std(r.last)) << " | " << fixed(mean_of(r.prop)) << " | "
           << (r.throughput ? fixed(*r.throughput, 1) : std::string("n/a")) << " | " << rel << " |\n";
    }
    md << "\nStd is the sample standard deviation over seeds. Relative return is (x - x_sgd) / x_sgd on average "
          "accuracy against the SGD run of the same method. BWT and FWT in metrics.csv follow the GEM "
          "convention.\n";
    const std::string text = md.str();
    open_out(root / "report.md") << text;
    return text;
}

}  // namespace cflat
