// Command-line front end; talks to the library only through the C API.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cflat/cflat.h"

namespace {

int finish(cflat_status status) {
    if (status != CFLAT_OK) {
        std::fprintf(stderr, "%s\n", cflat_last_error_json());
        return static_cast<int>(status);
    }
    return 0;
}

const char* opt(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"C-Flat continual-learning experiments"};
    app.require_subcommand(1);
    app.set_version_flag("--version", cflat_version());

    std::string config, out, seeds, checkpoint;
    std::vector<std::string> axes;
    int jobs = 0;

    auto* run = app.add_subcommand("run", "train every seed of a config");
    run->add_option("--config", config, "JSON config or run manifest")->required()->check(CLI::ExistingFile);
    run->add_option("--out", out, "output directory (overrides the config)");
    run->add_option("--seeds", seeds, "seed list, e.g. 0,1,2 or 0-4");
    run->add_option("--jobs", jobs, "parallel seeds")->check(CLI::PositiveNumber);

    auto* sweep = app.add_subcommand("sweep", "Cartesian sweep over config keys");
    sweep->add_option("--config", config, "JSON config")->required()->check(CLI::ExistingFile);
    sweep->add_option("--axis", axes, "axis as dotted.key=v1,v2 (repeatable)")->required();
    sweep->add_option("--out", out, "output directory (overrides the config)");
    sweep->add_option("--seeds", seeds, "seed list");
    sweep->add_option("--jobs", jobs, "parallel seeds per cell")->check(CLI::PositiveNumber);

    auto* landscape = app.add_subcommand("landscape", "flatness report and 2D loss slice of a checkpoint");
    landscape->add_option("--checkpoint", checkpoint, "checkpoint JSON")->required();
    landscape->add_option("--config", config, "config supplying landscape options");
    landscape->add_option("--out", out, "output directory (default: next to the checkpoint)");

    std::string results;
    auto* report = app.add_subcommand("report", "markdown summary of every run below a directory");
    report->add_option("dir", results, "results directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (*run) return finish(cflat_cmd_run(config.c_str(), opt(out), opt(seeds), jobs));
    if (*sweep) {
        std::vector<const char*> ptrs;
        for (const auto& a : axes) ptrs.push_back(a.c_str());
        return finish(cflat_cmd_sweep(config.c_str(), ptrs.data(), ptrs.size(), opt(out), opt(seeds), jobs));
    }
    if (*landscape) return finish(cflat_cmd_landscape(checkpoint.c_str(), opt(config), opt(out)));
    if (*report) return finish(cflat_cmd_report(results.c_str()));
    return 1;
}
