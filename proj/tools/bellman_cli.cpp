#include "bellman/experiments.hpp"
#include "bellman/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kFailedInvariant = 2;

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Options& opt) {
    cmd->add_option("--config", opt.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--out", opt.out, "Output directory");
    cmd->add_option("--seed", opt.seed, "Base seed; replaces the seed list by seed, seed+1, ... of the same length");
    cmd->add_flag("--quiet", opt.quiet, "Suppress progress output");
}

bellman::ExperimentConfig resolve_config(bellman::Study study, const Options& opt) {
    using namespace bellman;
    ExperimentConfig config = default_config(study);
    if (!opt.config.empty()) {
        std::ifstream in(opt.config);
        nlohmann::json doc;
        try {
            in >> doc;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config " + opt.config + ": " + e.what());
        }
        if (!doc.is_object()) throw ConfigError("config: top level must be an object");
        if (!doc.contains("study")) doc["study"] = to_string(study);
        config = config_from_json(doc);
        if (config.study != study)
            throw ConfigError("config study '" + to_string(config.study) + "' does not match the subcommand");
    }
    if (!opt.out.empty()) config.output_dir = opt.out;
    if (opt.seed) {
        const std::size_t n = config.seeds.size();
        config.seeds.clear();
        for (std::size_t i = 0; i < n; ++i) config.seeds.push_back(*opt.seed + i);
    }
    return config;
}

void print_summary(const bellman::StudyReport& report, const std::vector<std::string>& files) {
    using namespace bellman;
    std::cout << to_string(report.config.study) << " on " << report.config.mdp_spec << ": " << report.row_count()
              << " rows\n";
    if (report.config.study == Study::kOffPolicySweep) write_sweep_table(std::cout, report);
    if (report.config.study == Study::kCorrelation) write_correlations(std::cout, report);
    if (report.config.study == Study::kSingleTrajectory || report.config.study == Study::kConstructions) {
        int passed = 0;
        for (const auto& c : report.certificates) passed += c.passed ? 1 : 0;
        std::cout << passed << " of " << report.certificates.size() << " certificates passed\n";
    }
    for (const auto& o : report.observations) {
        std::cout << "observation: " << o.claim << (o.holds ? " (holds)" : " (does not hold)");
        for (const auto& [k, v] : o.measured) std::cout << ' ' << k << '=' << v;
        std::cout << '\n';
    }
    std::cout << "wrote";
    for (const auto& f : files) std::cout << ' ' << f;
    std::cout << " to " << report.config.output_dir << '\n';
}

int run_study_command(bellman::Study study, const Options& opt) {
    const auto config = resolve_config(study, opt);
    bellman::require_valid(config);
    const auto report = bellman::run_study(config);
    const auto files = bellman::write_report(report, config.output_dir);
    if (!opt.quiet) print_summary(report, files);
    return kOk;
}

int run_verify(const Options& opt) {
    bellman::VerifyOptions vopt;
    if (opt.seed) vopt.seed = *opt.seed;
    nlohmann::ordered_json results = nlohmann::ordered_json::array();
    const bool ok = bellman::run_acceptance(vopt, [&](const bellman::CheckResult& r) {
        if (!opt.quiet || !r.passed) std::cout << bellman::format_result(r) << std::endl;
        results.push_back({{"id", r.id}, {"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
    });
    if (!opt.out.empty()) {
        std::filesystem::create_directories(opt.out);
        std::ofstream out(std::filesystem::path(opt.out) / "verify.json", std::ios::binary);
        out << results.dump(2) << '\n';
    }
    return ok ? kOk : kFailedInvariant;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bellman error versus value error experiments on finite MDPs"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(bellman::kVersion));

    Options opt;
    struct Entry {
        const char* name;
        const char* help;
        std::optional<bellman::Study> study;
    };
    const Entry entries[] = {
        {"onpolicy", "Train BRM / FQE / MC on on-policy data", bellman::Study::kOnPolicy},
        {"single-traj", "Per-transition errors over one complete trajectory", bellman::Study::kSingleTrajectory},
        {"sweep", "Learners across behavior-noise levels", bellman::Study::kOffPolicySweep},
        {"correlate", "Pearson correlation of Bellman and value error across seeds", bellman::Study::kCorrelation},
        {"construct", "Build and certify every counterexample construction", bellman::Study::kConstructions},
        {"verify", "Run the full acceptance suite", std::nullopt},
    };
    std::vector<std::pair<CLI::App*, std::optional<bellman::Study>>> commands;
    for (const auto& e : entries) {
        auto* cmd = app.add_subcommand(e.name, e.help);
        add_common(cmd, opt);
        commands.emplace_back(cmd, e.study);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kInvalid;
    }

    try {
        for (const auto& [cmd, study] : commands) {
            if (!cmd->parsed()) continue;
            return study ? run_study_command(*study, opt) : run_verify(opt);
        }
    } catch (const std::exception& e) {
        // config, file-format and argument errors all land here
        std::cerr << "error: " << e.what() << '\n';
        return kInvalid;
    }
    return kInvalid;
}
