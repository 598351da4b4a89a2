#pragma once

#include "bellman/builtins.hpp"
#include "bellman/constructions.hpp"
#include "bellman/data.hpp"
#include "bellman/diagnostics.hpp"
#include "bellman/learners.hpp"
#include "bellman/mdp.hpp"
#include "bellman/mdp_io.hpp"
#include "bellman/rng.hpp"

#include <json.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace bellman {

inline constexpr const char* kVersion = "0.1.0";

/// Raised for malformed or inconsistent experiment configurations.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class Study { kOnPolicy, kSingleTrajectory, kOffPolicySweep, kCorrelation, kConstructions };
enum class Learner { kBrm, kFqe, kMc };

inline std::string to_string(Study s) {
    switch (s) {
        case Study::kOnPolicy: return "onpolicy";
        case Study::kSingleTrajectory: return "single_trajectory";
        case Study::kOffPolicySweep: return "offpolicy_sweep";
        case Study::kCorrelation: return "correlation";
        case Study::kConstructions: return "constructions";
    }
    return "?";
}

inline std::string to_string(Learner l) {
    switch (l) {
        case Learner::kBrm: return "brm";
        case Learner::kFqe: return "fqe";
        case Learner::kMc: return "mc";
    }
    return "?";
}

struct ExperimentConfig {
    Study study = Study::kOnPolicy;
    std::string mdp_spec = "chain-10";  // builtin name or path to an MDP JSON file
    double gamma = 0.99;
    std::vector<double> noise_levels = {0.0};
    std::vector<std::uint64_t> seeds = {0};
    std::vector<Learner> learners = {Learner::kBrm, Learner::kFqe, Learner::kMc};
    TrainConfig train;
    int dataset_size = 1000;    // minimum transition count; whole episodes are kept
    int test_size = 0;          // 0 uses dataset_size
    int horizon = 0;            // 0 uses 4 |S|
    ModelKind model = ModelKind::kTabular;
    int feature_dim = 0;        // linear models; 0 uses half the pairs (half the trajectory length)
    int start_state = -1;       // single trajectory start; -1 draws from d0
    std::vector<StateAction> remove_pairs;
    bool fqe_exact_missing = false;  // seed FQE with exact values on missing relevant pairs
    double construction_c_low = 0.5;
    double construction_c_high = 5.0;
    int threads = 1;
    std::string output_dir = "out";
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix(a ^ splitmix(b)); }
inline std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix(mix(a, b), c); }

// stream tags for derived seeds
inline constexpr std::uint64_t kTrainStream = 1;
inline constexpr std::uint64_t kTestStream = 2;
inline constexpr std::uint64_t kFeatureStream = 3;
inline constexpr std::uint64_t kLearnerStream = 4;
inline constexpr std::uint64_t kConstructionStream = 5;

template <typename T>
T get_as(const nlohmann::json& value, const std::string& key) {
    try {
        return value.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config: field '" + key + "' has the wrong type");
    }
}

inline Study parse_study(const std::string& s) {
    for (auto k : {Study::kOnPolicy, Study::kSingleTrajectory, Study::kOffPolicySweep, Study::kCorrelation,
                   Study::kConstructions})
        if (to_string(k) == s) return k;
    throw ConfigError("config: unknown study '" + s + "'");
}

inline Learner parse_learner(const std::string& s) {
    for (auto k : {Learner::kBrm, Learner::kFqe, Learner::kMc})
        if (to_string(k) == s) return k;
    throw ConfigError("config: unknown learner '" + s + "'");
}

inline std::string optimizer_name(Optimizer o) {
    switch (o) {
        case Optimizer::kAdam: return "adam";
        case Optimizer::kPlainGradient: return "sgd";
        case Optimizer::kExact: return "exact";
    }
    return "?";
}

inline TrainConfig train_from_json(const nlohmann::json& doc, TrainConfig c) {
    if (!doc.is_object()) throw ConfigError("config: 'train' must be an object");
    for (const auto& [key, value] : doc.items()) {
        if (key == "steps") c.steps = get_as<int>(value, key);
        else if (key == "batch_size") c.batch_size = get_as<int>(value, key);
        else if (key == "learning_rate") c.learning_rate = get_as<double>(value, key);
        else if (key == "optimizer") {
            const auto name = get_as<std::string>(value, key);
            if (name == "adam") c.optimizer = Optimizer::kAdam;
            else if (name == "sgd") c.optimizer = Optimizer::kPlainGradient;
            else if (name == "exact") c.optimizer = Optimizer::kExact;
            else throw ConfigError("config: unknown optimizer '" + name + "'");
        } else if (key == "polyak_rate") c.polyak_rate = get_as<double>(value, key);
        else if (key == "target_update") {
            const auto name = get_as<std::string>(value, key);
            if (name == "polyak") c.target_update = TargetUpdate::kPolyak;
            else if (name == "hard") c.target_update = TargetUpdate::kHard;
            else throw ConfigError("config: unknown target_update '" + name + "'");
        } else if (key == "hard_update_period") c.hard_update_period = get_as<int>(value, key);
        else if (key == "next_action") {
            const auto name = get_as<std::string>(value, key);
            if (name == "expected") c.next_action = NextAction::kExpected;
            else if (name == "sampled") c.next_action = NextAction::kSampled;
            else throw ConfigError("config: unknown next_action '" + name + "'");
        } else if (key == "checkpoint_every") c.checkpoint_every = get_as<int>(value, key);
        else if (key == "divergence_threshold") c.divergence_threshold = get_as<double>(value, key);
        else throw ConfigError("config: unknown train field '" + key + "'");
    }
    return c;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
    nlohmann::ordered_json doc;
    doc["steps"] = c.steps;
    doc["batch_size"] = c.batch_size;
    doc["learning_rate"] = c.learning_rate;
    doc["optimizer"] = detail::optimizer_name(c.optimizer);
    doc["polyak_rate"] = c.polyak_rate;
    doc["target_update"] = c.target_update == TargetUpdate::kPolyak ? "polyak" : "hard";
    doc["hard_update_period"] = c.hard_update_period;
    doc["next_action"] = c.next_action == NextAction::kExpected ? "expected" : "sampled";
    doc["checkpoint_every"] = c.checkpoint_every;
    doc["divergence_threshold"] = c.divergence_threshold;
    return doc;
}

/// Canonical form. `output_dir` and `threads` do not affect results and are
/// left out unless requested.
inline nlohmann::ordered_json to_json(const ExperimentConfig& c, bool with_runtime_fields = false) {
    nlohmann::ordered_json doc;
    doc["study"] = to_string(c.study);
    doc["mdp_spec"] = c.mdp_spec;
    doc["gamma"] = c.gamma;
    doc["noise_levels"] = c.noise_levels;
    doc["seeds"] = c.seeds;
    auto& learners = doc["learners"] = nlohmann::ordered_json::array();
    for (auto l : c.learners) learners.push_back(to_string(l));
    doc["train"] = to_json(c.train);
    doc["dataset_size"] = c.dataset_size;
    doc["test_size"] = c.test_size;
    doc["horizon"] = c.horizon;
    doc["model"] = c.model == ModelKind::kTabular ? "tabular" : "linear";
    doc["feature_dim"] = c.feature_dim;
    doc["start_state"] = c.start_state;
    auto& removed = doc["remove_pairs"] = nlohmann::ordered_json::array();
    for (const auto& p : c.remove_pairs) removed.push_back({p.state, p.action});
    doc["fqe_exact_missing"] = c.fqe_exact_missing;
    doc["construction_c_low"] = c.construction_c_low;
    doc["construction_c_high"] = c.construction_c_high;
    if (with_runtime_fields) {
        doc["threads"] = c.threads;
        doc["output_dir"] = c.output_dir;
    }
    return doc;
}

/// Parses a config object; absent fields keep their defaults, unknown fields are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
    using detail::get_as;
    if (!doc.is_object()) throw ConfigError("config: top level must be an object");
    ExperimentConfig c;
    for (const auto& [key, value] : doc.items()) {
        if (key == "study") c.study = detail::parse_study(get_as<std::string>(value, key));
        else if (key == "mdp_spec") c.mdp_spec = get_as<std::string>(value, key);
        else if (key == "gamma") c.gamma = get_as<double>(value, key);
        else if (key == "noise_levels") c.noise_levels = get_as<std::vector<double>>(value, key);
        else if (key == "seeds") c.seeds = get_as<std::vector<std::uint64_t>>(value, key);
        else if (key == "learners") {
            c.learners.clear();
            for (const auto& name : get_as<std::vector<std::string>>(value, key))
                c.learners.push_back(detail::parse_learner(name));
        } else if (key == "train") c.train = detail::train_from_json(value, c.train);
        else if (key == "dataset_size") c.dataset_size = get_as<int>(value, key);
        else if (key == "test_size") c.test_size = get_as<int>(value, key);
        else if (key == "horizon") c.horizon = get_as<int>(value, key);
        else if (key == "model") {
            const auto name = get_as<std::string>(value, key);
            if (name == "tabular") c.model = ModelKind::kTabular;
            else if (name == "linear") c.model = ModelKind::kLinear;
            else throw ConfigError("config: unknown model '" + name + "'");
        } else if (key == "feature_dim") c.feature_dim = get_as<int>(value, key);
        else if (key == "start_state") c.start_state = get_as<int>(value, key);
        else if (key == "remove_pairs") {
            c.remove_pairs.clear();
            for (const auto& p : get_as<std::vector<std::vector<int>>>(value, key)) {
                if (p.size() != 2) throw ConfigError("config: remove_pairs entries must be [state, action]");
                c.remove_pairs.push_back({p[0], p[1]});
            }
        } else if (key == "fqe_exact_missing") c.fqe_exact_missing = get_as<bool>(value, key);
        else if (key == "construction_c_low") c.construction_c_low = get_as<double>(value, key);
        else if (key == "construction_c_high") c.construction_c_high = get_as<double>(value, key);
        else if (key == "threads") c.threads = get_as<int>(value, key);
        else if (key == "output_dir") c.output_dir = get_as<std::string>(value, key);
        else throw ConfigError("config: unknown field '" + key + "'");
    }
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    return config_from_json(doc);
}

/// Desk-scale settings used when no config file is given.
inline ExperimentConfig default_config(Study study) {
    ExperimentConfig c;
    c.study = study;
    c.train.batch_size = 64;
    c.train.learning_rate = 1e-3;
    c.train.steps = 20000;
    switch (study) {
        case Study::kOnPolicy:
            c.mdp_spec = "gridworld-5x5";
            c.seeds = {0, 1, 2};
            c.dataset_size = 2000;
            break;
        case Study::kSingleTrajectory:
            c.mdp_spec = "chain-30";
            c.seeds = {0, 1, 2, 3, 4};
            c.model = ModelKind::kLinear;
            c.start_state = 0;
            c.train.steps = 50000;
            c.train.batch_size = 32;
            break;
        case Study::kOffPolicySweep:
            c.mdp_spec = "gridworld-4x4";
            c.noise_levels = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
            c.seeds = {0, 1, 2};
            c.learners = {Learner::kBrm, Learner::kFqe};
            break;
        case Study::kCorrelation:
            c.mdp_spec = "chain-10";
            c.gamma = 0.9;
            c.noise_levels = {0.0, 0.5};
            c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
            c.dataset_size = 200;
            c.train.steps = 2000;
            c.train.batch_size = 32;
            c.train.learning_rate = 1e-2;
            break;
        case Study::kConstructions:
            c.mdp_spec = "chain-6";
            c.gamma = 0.9;
            c.seeds = {0, 1, 2, 3, 4};
            c.dataset_size = 50;
            break;
    }
    return c;
}

/// Problems that make a config unusable; empty when valid.
inline std::vector<std::string> validate(const ExperimentConfig& c) {
    std::vector<std::string> report;
    if (c.seeds.empty()) report.push_back("seeds must be non-empty");
    if (c.learners.empty()) report.push_back("learners must be non-empty");
    if (c.noise_levels.empty()) report.push_back("noise_levels must be non-empty");
    for (double n : c.noise_levels)
        if (!(n >= 0.0 && n <= 1.0)) report.push_back("noise level " + std::to_string(n) + " outside [0,1]");
    if (!(c.gamma >= 0.0 && c.gamma < 1.0)) report.push_back("gamma must lie in [0,1)");
    if (c.dataset_size <= 0) report.push_back("dataset_size must be positive");
    if (c.test_size < 0) report.push_back("test_size must be non-negative");
    if (c.horizon < 0) report.push_back("horizon must be non-negative");
    if (c.feature_dim < 0) report.push_back("feature_dim must be non-negative");
    if (c.threads < 1) report.push_back("threads must be at least 1");
    for (const auto& p : c.remove_pairs)
        if (p.state < 0 || p.action < 0) report.push_back("remove_pairs entries must be non-negative");
    if (c.fqe_exact_missing && c.model != ModelKind::kTabular)
        report.push_back("fqe_exact_missing requires a tabular model");
    if (!(c.construction_c_low > 0.0 && c.construction_c_low <= c.construction_c_high))
        report.push_back("construction constants need 0 < construction_c_low <= construction_c_high");
    {
        TrainConfig t = c.train;
        t.discount = c.gamma;
        for (auto& e : validate(t)) report.push_back("train: " + e);
    }
    for (std::size_t i = 0; i < c.seeds.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (c.seeds[i] == c.seeds[j]) report.push_back("seeds must be distinct");
    const bool only_zero_noise = c.noise_levels.size() == 1 && c.noise_levels[0] == 0.0;
    switch (c.study) {
        case Study::kOnPolicy:
        case Study::kSingleTrajectory:
            if (!only_zero_noise) report.push_back(to_string(c.study) + " requires noise_levels = [0]");
            break;
        case Study::kOffPolicySweep: {
            const bool has_zero = std::find(c.noise_levels.begin(), c.noise_levels.end(), 0.0) != c.noise_levels.end();
            const bool has_positive =
                std::any_of(c.noise_levels.begin(), c.noise_levels.end(), [](double n) { return n > 0.0; });
            if (!has_zero || !has_positive)
                report.push_back("offpolicy_sweep requires noise level 0 and at least one positive level");
            break;
        }
        case Study::kCorrelation:
            if (c.seeds.size() < 5) report.push_back("correlation requires at least 5 seeds");
            break;
        case Study::kConstructions:
            if (!(c.gamma > 0.0)) report.push_back("constructions require gamma in (0,1)");
            break;
    }
    return report;
}

inline void require_valid(const ExperimentConfig& c) {
    const auto problems = validate(c);
    if (problems.empty()) return;
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
}

/// Builtin name or MDP file, re-discounted to `gamma`. File MDPs are evaluated
/// under their greedy optimal policy.
inline Environment resolve_environment(const std::string& spec, double gamma) {
    if (std::filesystem::is_regular_file(spec)) {
        FiniteMdp mdp = load_mdp(spec).with_discount(gamma);
        PolicyTable target = optimal_policy(mdp);
        return {spec, std::move(mdp), std::move(target)};
    }
    try {
        return builtin_environment(spec, gamma);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

// Results

struct Observation {
    std::string claim;
    bool holds = false;
    std::vector<std::pair<std::string, double>> measured;
};

/// One trained (learner, noise, seed) cell.
struct CellResult {
    Learner learner = Learner::kBrm;
    double noise = 0.0;
    std::uint64_t seed = 0;
    std::size_t train_size = 0;
    std::size_t missing_pairs = 0;
    MetricRecord train;
    MetricRecord test;
    bool diverged = false;
    TrainReport curves{ValueModel::tabular(1, 1)};
    // correlation study: (mean |BE|, mean |VE|) on the test set of each noise level
    std::vector<std::pair<double, double>> mean_abs_by_test_noise;

    std::string run_id() const {
        std::ostringstream id;
        id.precision(17);
        id << to_string(learner) << '/' << noise << '/' << seed;
        return id.str();
    }
};

struct TrajectoryResult {
    Learner learner = Learner::kBrm;
    std::uint64_t seed = 0;
    Dataset trajectory;
    std::vector<double> bellman;  // per transition
    std::vector<double> value;    // per transition
    double mean_abs_be = 0.0;
    double mean_abs_ve = 0.0;
    double ratio = std::numeric_limits<double>::quiet_NaN();  // sum|VE| / sum|BE|; NaN when both vanish
    double lower = 0.0;
    double upper = 0.0;
    bool within_bounds = false;
};

struct CorrelationCell {
    Learner learner = Learner::kBrm;
    double train_noise = 0.0;
    double test_noise = 0.0;
    std::vector<double> mean_abs_be;  // one per seed
    std::vector<double> mean_abs_ve;
    std::optional<double> coefficient;  // empty when a sample has zero variance
};

struct StudyReport {
    ExperimentConfig config;
    std::string mdp_hash;
    std::vector<CellResult> cells;
    std::vector<TrajectoryResult> trajectories;
    std::vector<CorrelationCell> correlations;
    std::vector<ConstructionCertificate> certificates;
    std::vector<Observation> observations;

    std::size_t row_count() const {
        switch (config.study) {
            case Study::kSingleTrajectory: return trajectories.size();
            case Study::kConstructions: return certificates.size();
            default: return cells.size();
        }
    }
};

// Helpers shared by the studies

/// Runs task(i) for i in [0, n) on up to `threads` workers. Every result is
/// written to its own slot, so the outcome does not depend on scheduling. The
/// exception of the lowest failing index is rethrown.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& task) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
    std::vector<std::exception_ptr> errors(n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    task(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/// Mean |eps| and mean |Delta| over the dataset transitions, from the exact tables.
inline std::pair<double, double> mean_abs_errors(const FiniteMdp& mdp, const PolicyTable& policy, const QTable& q,
                                                 const QTable& q_true, const Dataset& data) {
    if (data.empty()) throw std::invalid_argument("mean_abs_errors: empty dataset");
    const Matrix eps = bellman_error_table(mdp, policy, q);
    double be = 0.0, ve = 0.0;
    for (const auto& tr : data.transitions) {
        be += std::abs(eps(tr.s, tr.a));
        ve += std::abs(q(tr.s, tr.a) - q_true(tr.s, tr.a));
    }
    const auto n = static_cast<double>(data.size());
    return {be / n, ve / n};
}

/// Pearson coefficient, or empty when either sample has zero variance.
inline std::optional<double> correlation_coefficient(const std::vector<double>& xs, const std::vector<double>& ys) {
    try {
        return pearson(xs, ys);
    } catch (const DegenerateVariance&) {
        return std::nullopt;
    }
}

/// Per-transition Bellman and value errors of `q` along one complete
/// trajectory. The successor of transition t is transition t+1 and the last
/// transition does not bootstrap; the value baseline is the discounted return.
inline TrajectoryResult trajectory_errors(const QTable& q, const Dataset& trajectory, double gamma) {
    if (trajectory.empty()) throw std::invalid_argument("trajectory_errors: empty trajectory");
    TrajectoryResult out;
    out.trajectory = trajectory;
    const auto returns = discounted_returns(trajectory, gamma);
    const std::size_t n = trajectory.size();
    double sum_be = 0.0, sum_ve = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        const auto& tr = trajectory.transitions[t];
        const double next = t + 1 < n ? q(trajectory.transitions[t + 1].s, trajectory.transitions[t + 1].a) : 0.0;
        out.bellman.push_back(q(tr.s, tr.a) - tr.r - gamma * next);
        out.value.push_back(q(tr.s, tr.a) - returns[t]);
        sum_be += std::abs(out.bellman.back());
        sum_ve += std::abs(out.value.back());
    }
    out.mean_abs_be = sum_be / static_cast<double>(n);
    out.mean_abs_ve = sum_ve / static_cast<double>(n);
    out.lower = 1.0 / (1.0 + gamma);
    out.upper = 1.0 / (1.0 - gamma);
    if (sum_be > 0.0) {
        out.ratio = sum_ve / sum_be;
        constexpr double rel = 1e-9;
        out.within_bounds = out.ratio >= out.lower * (1.0 - rel) && out.ratio <= out.upper * (1.0 + rel);
    } else {
        // zero Bellman error along a complete trajectory forces zero value error
        out.within_bounds = sum_ve == 0.0;
    }
    return out;
}

/// Removes the first dataset pair that is a policy successor of another
/// dataset pair, creating a missing relevant pair. Returns the data unchanged
/// when no such pair exists.
inline Dataset inject_gap(const Dataset& data, const FiniteMdp& mdp, const PolicyTable& policy) {
    const auto pairs = unique_pairs(data);
    const std::set<StateAction> present(pairs.begin(), pairs.end());
    for (const auto& tr : data.transitions) {
        if (tr.terminal) continue;
        for (int a = 0; a < mdp.num_actions(); ++a) {
            const StateAction succ{tr.s_next, a};
            if (policy.prob(tr.s_next, a) <= 0.0 || succ == tr.pair() || !present.contains(succ)) continue;
            Dataset out = remove_pairs(data, {succ});
            if (!out.empty()) return out;
        }
    }
    return data;
}

namespace detail {

struct StudyContext {
    const ExperimentConfig& config;
    Environment env;
    QTable q_true;

    explicit StudyContext(const ExperimentConfig& c)
        : config(c), env(resolve_environment(c.mdp_spec, c.gamma)), q_true(exact_q(env.mdp, env.target)) {
        const int ns = env.mdp.num_states();
        const int na = env.mdp.num_actions();
        for (const auto& p : c.remove_pairs)
            if (p.state >= ns || p.action >= na)
                throw ConfigError("config: remove_pairs entry (" + std::to_string(p.state) + "," +
                                  std::to_string(p.action) + ") is outside the MDP");
        if (c.start_state >= ns) throw ConfigError("config: start_state is outside the MDP");
    }

    int horizon() const { return config.horizon > 0 ? config.horizon : 4 * env.mdp.num_states(); }
    std::size_t test_size() const {
        return static_cast<std::size_t>(config.test_size > 0 ? config.test_size : config.dataset_size);
    }

    Dataset train_data(double noise, std::size_t noise_index, std::uint64_t seed) const {
        Dataset d = collect_transitions(env.mdp, noisy_policy(env.target, noise),
                                        static_cast<std::size_t>(config.dataset_size), horizon(),
                                        mix(seed, kTrainStream, noise_index), noise, false);
        if (!config.remove_pairs.empty()) d = remove_pairs(d, config.remove_pairs);
        if (d.empty()) throw ConfigError("removing pairs left an empty dataset");
        return d;
    }

    Dataset test_data(double noise, std::uint64_t stream_seed) const {
        return collect_transitions(env.mdp, noisy_policy(env.target, noise), test_size(), horizon(),
                                   mix(stream_seed, kTestStream), noise, false);
    }

    ValueModel make_model(std::uint64_t seed, int auto_dim) const {
        const int ns = env.mdp.num_states();
        const int na = env.mdp.num_actions();
        if (config.model == ModelKind::kTabular) return ValueModel::tabular(ns, na);
        const int dim = config.feature_dim > 0 ? config.feature_dim : std::max(1, auto_dim);
        return ValueModel::linear(ns, na, random_features(ns, na, dim, mix(seed, kFeatureStream)));
    }

    TrainConfig train_config(std::uint64_t seed, Learner learner) const {
        TrainConfig t = config.train;
        t.discount = config.gamma;
        t.seed = mix(seed, kLearnerStream, static_cast<std::uint64_t>(learner));
        return t;
    }

    TrainReport fit(Learner learner, const Dataset& data, ValueModel model, const TrainConfig& train,
                    const EvalSet* eval) const {
        switch (learner) {
            case Learner::kBrm: return brm_fit(data, env.target, std::move(model), train, eval);
            case Learner::kFqe: {
                if (!config.fqe_exact_missing) return fqe_fit(data, env.target, std::move(model), train, eval);
                Vector params = model.params();
                for (const auto& p : missing_relevant_pairs(data, env.mdp, env.target))
                    params(p.state * env.mdp.num_actions() + p.action) = q_true(p.state, p.action);
                model.set_params(params);
                return fqe_fit(data, env.target, std::move(model), train, eval, &params);
            }
            case Learner::kMc: return mc_fit(data, std::move(model), train, &env.target, eval);
        }
        throw std::logic_error("unknown learner");
    }

    /// Trains one cell and evaluates it on the on-policy test set.
    CellResult run_cell(Learner learner, double noise, std::size_t noise_index, std::uint64_t seed,
                        const Dataset& test, double k_const) const {
        CellResult cell;
        cell.learner = learner;
        cell.noise = noise;
        cell.seed = seed;
        const Dataset data = train_data(noise, noise_index, seed);
        cell.train_size = data.size();
        cell.missing_pairs = missing_relevant_pairs(data, env.mdp, env.target).size();
        const EvalSet eval{test, q_true, k_const};
        const int pairs = env.mdp.num_states() * env.mdp.num_actions();
        cell.curves = fit(learner, data, make_model(seed, pairs / 2), train_config(seed, learner), &eval);
        cell.diverged = cell.curves.diverged;
        const QTable q = cell.curves.final_model.to_qtable();
        cell.train = empirical_metrics(q, data, env.target, q_true, k_const, config.gamma);
        cell.test = empirical_metrics(q, test, env.target, q_true, k_const, config.gamma);
        return cell;
    }
};

/// Cells in (learner, noise, seed) order.
inline std::vector<CellResult> run_grid(const StudyContext& ctx, const Dataset& test, double k_const) {
    const auto& c = ctx.config;
    struct Key {
        Learner learner;
        std::size_t noise_index;
        std::uint64_t seed;
    };
    std::vector<Key> keys;
    for (auto l : c.learners)
        for (std::size_t i = 0; i < c.noise_levels.size(); ++i)
            for (auto s : c.seeds) keys.push_back({l, i, s});
    std::vector<CellResult> cells(keys.size());
    parallel_for(keys.size(), c.threads, [&](std::size_t i) {
        const auto& k = keys[i];
        cells[i] = ctx.run_cell(k.learner, c.noise_levels[k.noise_index], k.noise_index, k.seed, test, k_const);
    });
    return cells;
}

inline StudyReport start_report(const ExperimentConfig& config, const StudyContext& ctx) {
    StudyReport report;
    report.config = config;
    report.mdp_hash = mdp_hash(ctx.env.mdp);
    return report;
}

/// Shared on-policy evaluation set, drawn independently of the seed list.
inline Dataset shared_test_set(const StudyContext& ctx) {
    return ctx.test_data(0.0, mix(ctx.config.seeds.front(), 0x7e57));
}

}  // namespace detail

// Studies

/// BRM / FQE / MC on on-policy data, evaluated on a held-out on-policy set.
inline StudyReport run_onpolicy_study(const ExperimentConfig& config) {
    require_valid(config);
    if (config.study != Study::kOnPolicy) throw ConfigError("run_onpolicy_study: study must be onpolicy");
    const detail::StudyContext ctx(config);
    auto report = detail::start_report(config, ctx);
    const Dataset test = detail::shared_test_set(ctx);
    const double k = normalizer_constant(test, ctx.q_true);
    report.cells = detail::run_grid(ctx, test, k);

    std::map<Learner, double> mean_msbe;
    for (auto l : config.learners) {
        double sum = 0.0;
        for (const auto& cell : report.cells)
            if (cell.learner == l) sum += cell.train.msbe;
        mean_msbe[l] = sum / static_cast<double>(config.seeds.size());
    }
    Observation order;
    order.claim = "mean final train MSBE: brm <= fqe <= mc";
    order.holds = true;
    for (auto l : config.learners) order.measured.push_back({"msbe_" + to_string(l), mean_msbe[l]});
    const std::vector<Learner> chain = {Learner::kBrm, Learner::kFqe, Learner::kMc};
    for (std::size_t i = 0; i + 1 < chain.size(); ++i)
        if (mean_msbe.contains(chain[i]) && mean_msbe.contains(chain[i + 1]))
            order.holds = order.holds && mean_msbe[chain[i]] <= mean_msbe[chain[i + 1]];
    report.observations.push_back(std::move(order));
    return report;
}

/// One on-policy trajectory per seed, reward-augmented and treated as
/// complete; per-transition Bellman and value errors of each learner.
inline StudyReport run_single_trajectory_study(const ExperimentConfig& config) {
    require_valid(config);
    if (config.study != Study::kSingleTrajectory)
        throw ConfigError("run_single_trajectory_study: study must be single_trajectory");
    const detail::StudyContext ctx(config);
    auto report = detail::start_report(config, ctx);
    const auto& mdp = ctx.env.mdp;

    std::vector<Dataset> prepared;
    for (auto seed : config.seeds) {
        Rng rng(detail::mix(seed, detail::kTrainStream));
        int s = config.start_state >= 0 ? config.start_state : detail::sample_state(rng, mdp.initial_dist());
        Dataset traj;
        traj.seed = seed;
        traj.episode_offsets = {0};
        for (int t = 0; t < config.dataset_size; ++t) {
            const int a = detail::sample_action(rng, ctx.env.target, s);
            const int next = static_cast<int>(rng.categorical(mdp.next_state_dist(s, a)));
            traj.transitions.push_back({s, a, mdp.reward(s, a), next, mdp.is_terminal(next), t});
            if (mdp.is_terminal(next)) break;
            s = next;
        }
        traj.transitions.back().terminal = true;
        prepared.push_back(single_trajectory_prepare(traj, config.gamma));
    }

    struct Key {
        Learner learner;
        std::size_t seed_index;
    };
    std::vector<Key> keys;
    for (auto l : config.learners)
        for (std::size_t i = 0; i < config.seeds.size(); ++i) keys.push_back({l, i});
    report.trajectories.resize(keys.size());
    report.cells.resize(keys.size());
    parallel_for(keys.size(), config.threads, [&](std::size_t i) {
        const auto [learner, si] = keys[i];
        const auto seed = config.seeds[si];
        const Dataset& data = prepared[si];
        const int length = static_cast<int>(data.size());
        CellResult cell;
        cell.learner = learner;
        cell.seed = seed;
        cell.train_size = data.size();
        cell.curves = ctx.fit(learner, data, ctx.make_model(seed, length / 2), ctx.train_config(seed, learner), nullptr);
        cell.diverged = cell.curves.diverged;
        auto result = trajectory_errors(cell.curves.final_model.to_qtable(), data, config.gamma);
        result.learner = learner;
        result.seed = seed;
        cell.train.msbe = 0.0;
        for (double e : result.bellman) cell.train.msbe += e * e;
        cell.train.msbe /= static_cast<double>(length);
        cell.train.nave = result.mean_abs_ve;
        cell.test = cell.train;
        report.trajectories[i] = std::move(result);
        report.cells[i] = std::move(cell);
    });

    for (const auto& t : report.trajectories) {
        ConstructionCertificate cert("sum|VE| / sum|BE| within [1/(1+gamma), 1/(1-gamma)]",
                                     {{"gamma", config.gamma},
                                      {"length", static_cast<double>(t.trajectory.size())},
                                      {"mean_abs_bellman_error", t.mean_abs_be},
                                      {"mean_abs_value_error", t.mean_abs_ve},
                                      {"ratio", t.ratio},
                                      {"lower", t.lower},
                                      {"upper", t.upper}});
        cert.claim = to_string(t.learner) + ": " + cert.claim;
        cert.passed = t.within_bounds;
        cert.seed = t.seed;
        report.certificates.push_back(std::move(cert));
    }
    for (auto l : config.learners) {
        double sum = 0.0;
        int defined = 0;
        for (const auto& t : report.trajectories)
            if (t.learner == l && std::isfinite(t.ratio)) {
                sum += t.ratio;
                ++defined;
            }
        Observation obs;
        obs.claim = to_string(l) + ": mean ratio sum|VE| / sum|BE| over seeds";
        obs.holds = defined > 0;
        obs.measured = {{"mean_ratio", defined > 0 ? sum / defined : std::numeric_limits<double>::quiet_NaN()},
                        {"defined_seeds", static_cast<double>(defined)}};
        report.observations.push_back(std::move(obs));
    }
    return report;
}

/// Learners across behavior noise levels, evaluated on on-policy test data.
inline StudyReport run_offpolicy_sweep(const ExperimentConfig& config) {
    require_valid(config);
    if (config.study != Study::kOffPolicySweep) throw ConfigError("run_offpolicy_sweep: study must be offpolicy_sweep");
    const detail::StudyContext ctx(config);
    auto report = detail::start_report(config, ctx);
    const Dataset test = detail::shared_test_set(ctx);
    report.cells = detail::run_grid(ctx, test, normalizer_constant(test, ctx.q_true));
    return report;
}

/// Per-seed ensembles trained at each noise level and evaluated on test sets
/// of every noise level; Pearson coefficient of mean|BE| against mean|VE| per
/// (learner, train noise, test noise).
inline StudyReport run_correlation_study(const ExperimentConfig& config) {
    require_valid(config);
    if (config.study != Study::kCorrelation) throw ConfigError("run_correlation_study: study must be correlation");
    const detail::StudyContext ctx(config);
    auto report = detail::start_report(config, ctx);
    const Dataset onpolicy = detail::shared_test_set(ctx);
    const double k = normalizer_constant(onpolicy, ctx.q_true);
    std::vector<Dataset> tests;
    for (std::size_t i = 0; i < config.noise_levels.size(); ++i)
        tests.push_back(ctx.test_data(config.noise_levels[i], detail::mix(config.seeds.front(), 0xc0, i)));

    report.cells = detail::run_grid(ctx, onpolicy, k);
    for (auto& cell : report.cells) {
        const QTable q = cell.curves.final_model.to_qtable();
        for (const auto& t : tests) cell.mean_abs_by_test_noise.push_back(mean_abs_errors(ctx.env.mdp, ctx.env.target, q, ctx.q_true, t));
    }
    for (auto l : config.learners)
        for (double train_noise : config.noise_levels)
            for (std::size_t ti = 0; ti < config.noise_levels.size(); ++ti) {
                CorrelationCell cc;
                cc.learner = l;
                cc.train_noise = train_noise;
                cc.test_noise = config.noise_levels[ti];
                for (const auto& cell : report.cells)
                    if (cell.learner == l && cell.noise == train_noise) {
                        cc.mean_abs_be.push_back(cell.mean_abs_by_test_noise[ti].first);
                        cc.mean_abs_ve.push_back(cell.mean_abs_by_test_noise[ti].second);
                    }
                cc.coefficient = correlation_coefficient(cc.mean_abs_be, cc.mean_abs_ve);
                report.correlations.push_back(std::move(cc));
            }
    return report;
}

/// Every construction per seed, with C drawn from the configured range.
inline StudyReport run_constructions_study(const ExperimentConfig& config) {
    require_valid(config);
    if (config.study != Study::kConstructions) throw ConfigError("run_constructions_study: study must be constructions");
    const detail::StudyContext ctx(config);
    auto report = detail::start_report(config, ctx);
    const double gamma = config.gamma;
    for (auto seed : config.seeds) {
        Rng rng(detail::mix(seed, detail::kConstructionStream));
        const double c = rng.uniform(config.construction_c_low, config.construction_c_high);
        std::vector<ConstructionCertificate> certs;
        certs.push_back(hidden_bias_instance(c, gamma).certificate);
        certs.push_back(visible_error_instance(c, gamma).certificate);
        const FiniteMdp ring = ring_mdp(4, gamma);
        certs.push_back(
            inverse_relation_pair(ring, PolicyTable::deterministic(1, {0, 0, 0, 0}), c, gamma, rng).certificate);
        auto [upper, lower] = bound_equality_instances(c, gamma);
        certs.push_back(std::move(upper.certificate));
        certs.push_back(std::move(lower.certificate));

        Dataset data = ctx.train_data(0.0, 0, seed);
        if (missing_relevant_pairs(data, ctx.env.mdp, ctx.env.target).empty())
            data = inject_gap(data, ctx.env.mdp, ctx.env.target);
        try {
            certs.push_back(corollary1_value_any_anchor(ctx.env.mdp, ctx.env.target, data, c).second);
        } catch (const std::exception& e) {
            ConstructionCertificate failed("zero Bellman error on the data with value error C at an anchor",
                                           {{"C", c}, {"missing_relevant_pairs",
                                                       static_cast<double>(missing_relevant_pairs(data, ctx.env.mdp,
                                                                                                  ctx.env.target)
                                                                               .size())}});
            failed.claim += std::string(" (") + e.what() + ")";
            certs.push_back(std::move(failed));
        }
        for (auto& cert : certs) {
            cert.seed = seed;
            report.certificates.push_back(std::move(cert));
        }
    }
    return report;
}

inline StudyReport run_study(const ExperimentConfig& config) {
    switch (config.study) {
        case Study::kOnPolicy: return run_onpolicy_study(config);
        case Study::kSingleTrajectory: return run_single_trajectory_study(config);
        case Study::kOffPolicySweep: return run_offpolicy_sweep(config);
        case Study::kCorrelation: return run_correlation_study(config);
        case Study::kConstructions: return run_constructions_study(config);
    }
    throw std::logic_error("unknown study");
}

// Output

namespace detail {

class Csv {
public:
    explicit Csv(std::ostream& out) : out_(out), old_(out.precision(17)) {}
    ~Csv() { out_.precision(old_); }
    Csv(const Csv&) = delete;
    Csv& operator=(const Csv&) = delete;

private:
    std::ostream& out_;
    std::streamsize old_;
};

}  // namespace detail

inline void write_report_csv(std::ostream& out, const StudyReport& r) {
    const detail::Csv guard(out);
    switch (r.config.study) {
        case Study::kSingleTrajectory:
            out << "learner,seed,length,mean_abs_be,mean_abs_ve,ratio,lower,upper,within_bounds,diverged\n";
            for (std::size_t i = 0; i < r.trajectories.size(); ++i) {
                const auto& t = r.trajectories[i];
                out << to_string(t.learner) << ',' << t.seed << ',' << t.trajectory.size() << ',' << t.mean_abs_be
                    << ',' << t.mean_abs_ve << ',' << t.ratio << ',' << t.lower << ',' << t.upper << ','
                    << (t.within_bounds ? 1 : 0) << ',' << (r.cells[i].diverged ? 1 : 0) << '\n';
            }
            return;
        case Study::kConstructions:
            out << "seed,claim,passed\n";
            for (const auto& c : r.certificates)
                out << (c.seed ? std::to_string(*c.seed) : "") << ",\"" << c.claim << "\"," << (c.passed ? 1 : 0)
                    << '\n';
            return;
        default:
            out << "learner,noise,seed,train_size,missing_pairs,msbe_train,nave_train,msbe_test,nave_test,k,diverged\n";
            for (const auto& c : r.cells)
                out << to_string(c.learner) << ',' << c.noise << ',' << c.seed << ',' << c.train_size << ','
                    << c.missing_pairs << ',' << c.train.msbe << ',' << c.train.nave << ',' << c.test.msbe << ','
                    << c.test.nave << ',' << c.test.k_const << ',' << (c.diverged ? 1 : 0) << '\n';
    }
}

inline void write_curves(std::ostream& out, const StudyReport& r) {
    const detail::Csv guard(out);
    out << "run,step,loss,msbe_train,msbe_test,nave_test\n";
    for (const auto& c : r.cells) write_curves_csv(out, c.curves, false, c.run_id());
}

/// Algorithm x noise table of seed-averaged final test MSBE and NAVE.
inline void write_sweep_table(std::ostream& out, const StudyReport& r) {
    const detail::Csv guard(out);
    out << "learner,noise,mean_msbe,mean_nave,mean_missing_pairs,diverged_runs\n";
    for (auto l : r.config.learners)
        for (double noise : r.config.noise_levels) {
            double msbe = 0.0, nave = 0.0, missing = 0.0;
            int n = 0, diverged = 0;
            for (const auto& c : r.cells) {
                if (c.learner != l || c.noise != noise) continue;
                msbe += c.train.msbe;
                nave += c.test.nave;
                missing += static_cast<double>(c.missing_pairs);
                diverged += c.diverged ? 1 : 0;
                ++n;
            }
            out << to_string(l) << ',' << noise << ',' << msbe / n << ',' << nave / n << ',' << missing / n << ','
                << diverged << '\n';
        }
}

inline void write_correlations(std::ostream& out, const StudyReport& r) {
    const detail::Csv guard(out);
    out << "learner,train_noise,test_noise,seeds,pearson,defined\n";
    for (const auto& c : r.correlations)
        out << to_string(c.learner) << ',' << c.train_noise << ',' << c.test_noise << ',' << c.mean_abs_be.size() << ','
            << (c.coefficient ? *c.coefficient : std::numeric_limits<double>::quiet_NaN()) << ','
            << (c.coefficient ? 1 : 0) << '\n';
}

inline void write_trajectory_errors(std::ostream& out, const StudyReport& r) {
    const detail::Csv guard(out);
    out << "learner,seed,t,state,action,bellman_error,value_error\n";
    for (const auto& t : r.trajectories)
        for (std::size_t i = 0; i < t.bellman.size(); ++i) {
            const auto& tr = t.trajectory.transitions[i];
            out << to_string(t.learner) << ',' << t.seed << ',' << tr.t << ',' << tr.s << ',' << tr.a << ','
                << t.bellman[i] << ',' << t.value[i] << '\n';
        }
}

inline nlohmann::ordered_json certificates_json(const StudyReport& r) {
    nlohmann::ordered_json doc;
    auto& certs = doc["certificates"] = nlohmann::ordered_json::array();
    for (const auto& c : r.certificates) certs.push_back(to_json(c));
    auto& obs = doc["observations"] = nlohmann::ordered_json::array();
    for (const auto& o : r.observations) {
        nlohmann::ordered_json entry;
        entry["claim"] = o.claim;
        entry["holds"] = o.holds;
        auto& measured = entry["measured"] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : o.measured) measured[k] = v;
        obs.push_back(std::move(entry));
    }
    return doc;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

inline nlohmann::ordered_json manifest_json(const StudyReport& r, const std::vector<std::string>& files) {
    nlohmann::ordered_json doc;
    doc["tool"] = "bellman";
    doc["version"] = kVersion;
    doc["study"] = to_string(r.config.study);
    doc["config_hash"] = config_hash(r.config);
    doc["mdp_hash"] = r.mdp_hash;
    doc["seeds"] = r.config.seeds;
    doc["rows"] = r.row_count();
    doc["files"] = files;
    doc["libraries"] = {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                      "." + std::to_string(EIGEN_MINOR_VERSION)},
                        {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                              std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                              std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
    doc["config"] = to_json(r.config);
    return doc;
}

/// Writes the report files into `dir` (created if needed) and returns their names.
inline std::vector<std::string> write_report(const StudyReport& r, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<std::string> files;
    auto emit = [&](const std::string& name, const std::function<void(std::ostream&)>& body) {
        std::ofstream out(fs::path(dir) / name, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + (fs::path(dir) / name).string());
        body(out);
        files.push_back(name);
    };
    emit("report.csv", [&](std::ostream& o) { write_report_csv(o, r); });
    emit("curves.csv", [&](std::ostream& o) { write_curves(o, r); });
    if (r.config.study == Study::kOffPolicySweep) emit("table.csv", [&](std::ostream& o) { write_sweep_table(o, r); });
    if (r.config.study == Study::kCorrelation)
        emit("correlation.csv", [&](std::ostream& o) { write_correlations(o, r); });
    if (r.config.study == Study::kSingleTrajectory)
        emit("transitions.csv", [&](std::ostream& o) { write_trajectory_errors(o, r); });
    emit("certificates.json", [&](std::ostream& o) { o << certificates_json(r).dump(2) << '\n'; });
    files.push_back("manifest.json");
    std::ofstream manifest(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!manifest) throw std::runtime_error("cannot write manifest.json");
    manifest << manifest_json(r, files).dump(2) << '\n';
    return files;
}

}  // namespace bellman
