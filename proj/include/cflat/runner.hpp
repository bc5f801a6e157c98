#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cflat/continual.hpp"
#include "cflat/landscape.hpp"

namespace cflat {

inline constexpr const char* kRunSchema = "cflat-run/1";

struct DatasetConfig {
    std::string kind = "synthetic";   // "synthetic" or "csv"
    SyntheticSpec synthetic{};
    std::string path;                  // csv only
    std::uint64_t split_seed = 0;      // csv only
};

struct LandscapeConfig {
    FlatnessOptions flatness{};
    std::size_t grid_n = 21;
    double extent = 1.0;
    std::size_t eval_examples = 0;     // 0 = every training example of the stream
};

struct RunConfig {
    DatasetConfig dataset{};
    Protocol protocol = Protocol::B0;
    std::size_t increment = 2;
    std::uint64_t class_order_seed = 1993;
    ExperimentConfig experiment{};
    LandscapeConfig landscape{};
    std::vector<std::uint64_t> seeds{0};
    int jobs = 1;
    std::string out = "runs/default";
};

// Strict parse: unknown keys and ill-typed values raise ConfigError naming the
// dotted field. A run manifest is accepted too; its embedded config is used.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& cfg);

TaskStream build_stream(const RunConfig& cfg);

// "0,1,2" or ranges like "0-4".
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

struct RunOverrides {
    std::optional<std::string> out;
    std::optional<std::vector<std::uint64_t>> seeds;
    std::optional<int> jobs;
};

void apply_overrides(RunConfig& cfg, const RunOverrides& overrides);

// Runs every seed and writes manifest.json, metrics.csv, trace.csv, timing.csv
// and checkpoint_seed<k>.json into cfg.out.
ExperimentResult execute_run(const RunConfig& cfg);

void cmd_run(const std::string& config_path, const RunOverrides& overrides = {});

// Each axis is "dotted.key=v1,v2,...". Cells run in cfg.out/cell_<k>; an
// aggregate sweep.csv is written next to them. Returns the cell count.
std::size_t cmd_sweep(const std::string& config_path, const std::vector<std::string>& axes,
                      const RunOverrides& overrides = {});

// Writes flatness.json and slice.csv. `config_path` may be empty, in which case
// the config embedded in the checkpoint is used.
FlatnessReport cmd_landscape(const std::string& checkpoint_path, const std::string& config_path = {},
                             const std::string& out_dir = {});

// Reads every manifest.json below `results_dir` and writes report.md there.
std::string cmd_report(const std::string& results_dir);

// Sample (n - 1) standard deviation; 0 for fewer than two values.
double sample_std(const std::vector<double>& values);

std::string format_double(double v);   // %.17g

}  // namespace cflat
