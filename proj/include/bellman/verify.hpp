#pragma once

#include "bellman/builtins.hpp"
#include "bellman/constructions.hpp"
#include "bellman/data.hpp"
#include "bellman/diagnostics.hpp"
#include "bellman/experiments.hpp"
#include "bellman/learners.hpp"
#include "bellman/mdp.hpp"
#include "bellman/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

namespace bellman {

struct CheckResult {
    int id = 0;
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

/// Ground-truth Q^pi used by the checks; exact_q unless replaced.
using TruthFn = std::function<Matrix(const FiniteMdp&, const PolicyTable&)>;

struct VerifyOptions {
    TruthFn truth = [](const FiniteMdp& mdp, const PolicyTable& pi) { return exact_q(mdp, pi).values(); };
    std::uint64_t seed = 20240;
    std::filesystem::path scratch_dir = std::filesystem::temp_directory_path() / "bellman_verify";
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

inline std::string fmt(double x) {
    std::ostringstream s;
    s.precision(4);
    s << x;
    return s.str();
}

struct RandomInstance {
    FiniteMdp mdp;
    PolicyTable policy;
    QTable q;
};

inline RandomInstance random_instance(Rng& rng, int max_states, int max_actions, double gamma_low, double gamma_high) {
    const int ns = 2 + static_cast<int>(rng.index(static_cast<std::size_t>(max_states - 1)));
    const int na = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(max_actions)));
    auto mdp = random_mdp(ns, na, rng.uniform(gamma_low, gamma_high), rng);
    auto policy = random_policy(ns, na, rng);
    auto q = random_q(ns, na, rng);
    return {std::move(mdp), std::move(policy), std::move(q)};
}

inline std::vector<std::string> read_files(const std::filesystem::path& dir) {
    std::vector<std::string> out;
    std::vector<std::filesystem::path> names;
    for (const auto& e : std::filesystem::directory_iterator(dir)) names.push_back(e.path());
    std::sort(names.begin(), names.end());
    for (const auto& p : names) {
        std::ifstream in(p, std::ios::binary);
        out.push_back(p.filename().string() + "\n" +
                      std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
    }
    return out;
}

}  // namespace detail

/// 1. Toy instances: (eps, Delta) at the data pair is (0, C) and (C, 0).
inline CheckResult check_toy_examples(const VerifyOptions& opt) {
    const auto start = detail::Clock::now();
    Rng rng(detail::mix(opt.seed, 1));
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const double c = rng.uniform(0.1, 10.0);
        const double gamma = rng.uniform(0.01, 0.99);
        const auto env = two_state_mdp(gamma);
        const Matrix truth = opt.truth(env.mdp, env.target);
        const auto hidden = hidden_bias_instance(c, gamma);
        const auto visible = visible_error_instance(c, gamma);
        const Matrix eps_h = bellman_error_table(env.mdp, env.target, hidden.q);
        const Matrix eps_v = bellman_error_table(env.mdp, env.target, visible.q);
        worst = std::max({worst, std::abs(eps_h(0, 0)), std::abs(hidden.q(0, 0) - truth(0, 0) - c),
                          std::abs(eps_v(0, 0) - c), std::abs(visible.q(0, 0) - truth(0, 0))});
    }
    const double t = detail::seconds_since(start);
    return {1, "toy examples give (eps, Delta) = (0, C) and (C, 0)", worst < 1e-12 && t < 1.0,
            "max deviation " + detail::fmt(worst) + ", " + detail::fmt(t) + " s", t};
}

/// 2. value_from_bellman(bellman_error_table(Q)) = Q - Q^pi.
inline CheckResult check_identity(const VerifyOptions& opt) {
    Rng rng(detail::mix(opt.seed, 2));
    double worst = 0.0;
    double library_seconds = 0.0;
    const auto start = detail::Clock::now();
    for (int i = 0; i < 100; ++i) {
        const auto inst = detail::random_instance(rng, 20, 5, 0.5, 0.99);
        const auto lib_start = detail::Clock::now();
        const Matrix delta = value_from_bellman(inst.mdp, inst.policy, bellman_error_table(inst.mdp, inst.policy, inst.q));
        library_seconds += detail::seconds_since(lib_start);
        const Matrix expected = inst.q.values() - opt.truth(inst.mdp, inst.policy);
        worst = std::max(worst, (delta - expected).cwiseAbs().maxCoeff());
    }
    return {2, "value error recovered from Bellman error on 100 random MDPs",
            worst < 1e-8 && library_seconds < 10.0,
            "max discrepancy " + detail::fmt(worst) + ", identity " + detail::fmt(library_seconds) + " s",
            detail::seconds_since(start)};
}

/// 3. Ratio endpoints 1/(1-gamma) and 1/(1+gamma), and containment for random Q.
inline CheckResult check_ratio_bounds(const VerifyOptions& opt) {
    const auto start = detail::Clock::now();
    const double gamma = 0.99;
    const auto [upper, lower] = bound_equality_instances(1.0, gamma);
    const double r_up = upper.certificate.value("ratio");
    const double r_low = lower.certificate.value("ratio");
    const bool endpoints = std::abs(r_up - 100.0) < 1e-9 && std::abs(r_low - 1.0 / 1.99) < 1e-9;
    Rng rng(detail::mix(opt.seed, 3));
    int outside = 0;
    for (int i = 0; i < 500; ++i) {
        const auto inst = detail::random_instance(rng, 12, 4, 0.1, 0.99);
        const double g = inst.mdp.discount();
        const double max_eps = bellman_error_table(inst.mdp, inst.policy, inst.q).cwiseAbs().maxCoeff();
        const double max_delta = (inst.q.values() - opt.truth(inst.mdp, inst.policy)).cwiseAbs().maxCoeff();
        const double ratio = max_delta / max_eps;
        if (!(ratio >= (1.0 - 1e-9) / (1.0 + g) && ratio <= (1.0 + 1e-9) / (1.0 - g))) ++outside;
    }
    return {3, "ratio endpoints 100 and 1/1.99 at gamma 0.99; 500 random Q inside", endpoints && outside == 0,
            "ratios " + detail::fmt(r_up) + " and " + detail::fmt(r_low) + ", " + std::to_string(outside) +
                " of 500 outside",
            detail::seconds_since(start)};
}

/// 4. max|Delta_TQ| <= gamma max|Delta_Q|.
inline CheckResult check_contraction(const VerifyOptions& opt) {
    const auto start = detail::Clock::now();
    Rng rng(detail::mix(opt.seed, 4));
    int violations = 0;
    double worst_slack = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < 100; ++i) {
        const auto inst = detail::random_instance(rng, 15, 4, 0.1, 0.99);
        const Matrix truth = opt.truth(inst.mdp, inst.policy);
        const double before = (inst.q.values() - truth).cwiseAbs().maxCoeff();
        const double after =
            (apply_bellman_operator(inst.mdp, inst.policy, inst.q).values() - truth).cwiseAbs().maxCoeff();
        const double excess = after - inst.mdp.discount() * before;
        worst_slack = std::max(worst_slack, excess);
        if (excess > 1e-10) ++violations;
    }
    return {4, "Bellman operator contracts value error by gamma", violations == 0,
            std::to_string(violations) + " violations, max(after - gamma before) " + detail::fmt(worst_slack),
            detail::seconds_since(start)};
}

/// 5. Inverse relation certificates on single-successor cycles, and the hand values.
inline CheckResult check_inverse_relation(const VerifyOptions& opt) {
    const auto start = detail::Clock::now();
    Rng rng(detail::mix(opt.seed, 5));
    int failed = 0;
    double min_margin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 50; ++i) {
        const double c = rng.uniform(0.1, 10.0);
        const double gamma = rng.uniform(0.05, 0.99);
        const int n = 2 + static_cast<int>(rng.index(6));
        const auto pair = inverse_relation_pair(ring_mdp(n, gamma),
                                                PolicyTable::deterministic(1, std::vector<int>(static_cast<std::size_t>(n), 0)),
                                                c, gamma, rng);
        if (!pair.certificate.passed) ++failed;
        min_margin = std::min({min_margin, pair.certificate.value("value_margin"),
                               pair.certificate.value("bellman_margin")});
    }
    // the construction without slack, where the hand values are exact
    const auto mdp = ring_mdp(4, 0.5);
    const auto pi = PolicyTable::deterministic(1, {0, 0, 0, 0});
    const auto hand = inverse_relation_pair(mdp, pi, 1.0, 0.5, rng, 0.0);
    const auto e1 = error_table(mdp, pi, hand.q1);
    const auto e2 = error_table(mdp, pi, hand.q2.realized());
    const double dev = std::max({(e1.value.array().abs() - 4.0).abs().maxCoeff(),
                                 (e2.value.array().abs() - 3.0).abs().maxCoeff(),
                                 (e1.bellman.array().abs() - 2.0).abs().maxCoeff(),
                                 (hand.expected_abs_bellman_q2.array() - 3.0).abs().maxCoeff()});
    return {5, "inverse relation certificates pass; gamma 0.5, C 1 gives 4, 3, 2, 3", failed == 0 && dev < 1e-12,
            std::to_string(failed) + " of 50 failed, min margin " + detail::fmt(min_margin) +
                ", hand-value deviation " + detail::fmt(dev),
            detail::seconds_since(start)};
}

/// 6. FQE improvement premise implies its conclusion.
inline CheckResult check_improvement(const VerifyOptions& opt) {
    const auto start = detail::Clock::now();
    Rng rng(detail::mix(opt.seed, 6));
    int premises = 0, counterexamples = 0;
    for (int i = 0; i < 200; ++i) {
        const int ns = 2 + static_cast<int>(rng.index(8));
        const int na = 1 + static_cast<int>(rng.index(3));
        const auto mdp = random_mdp(ns, na, rng.uniform(0.1, 0.99), rng,
                                    {.max_successors = static_cast<int>(rng.index(3))});
        const auto pi = random_policy(ns, na, rng, i % 2 == 0);
        const QTable q = random_q(ns, na, rng);
        const auto data =
            collect(mdp, PolicyTable::uniform(ns, na), 1, 1 + static_cast<int>(rng.index(6)), rng.next_seed());
        const auto check = fqe_improvement_check(mdp, pi, q, data);
        premises += check.premise ? 1 : 0;
        counterexamples += (check.premise && !check.conclusion) ? 1 : 0;
    }
    return {6, "improvement premise implies conclusion on 200 instances", counterexamples == 0,
            std::to_string(counterexamples) + " counterexamples, premise held " + std::to_string(premises) + " times",
            detail::seconds_since(start)};
}

/// 7. Analytic BRM and FQE gradients against central differences.
inline CheckResult check_gradients(const VerifyOptions& opt) {
    const auto start = detail::Clock::now();
    Rng rng(detail::mix(opt.seed, 7));
    double worst = 0.0;
    for (auto kind : {LossKind::kBrm, LossKind::kFqe}) {
        for (int i = 0; i < 50; ++i) {
            const int ns = 2 + static_cast<int>(rng.index(6));
            const int na = 1 + static_cast<int>(rng.index(3));
            const double gamma = rng.uniform(0.1, 0.99);
            const auto mdp = random_mdp(ns, na, gamma, rng);
            const auto pi = random_policy(ns, na, rng);
            const int dim = 1 + static_cast<int>(rng.index(6));
            Vector theta(dim), target(dim);
            for (int k = 0; k < dim; ++k) {
                theta(k) = rng.normal();
                target(k) = rng.normal();
            }
            const auto model = ValueModel::linear(ns, na, random_features(ns, na, dim, rng.next_seed()), theta);
            const auto data =
                collect(mdp, PolicyTable::uniform(ns, na), 1, 1 + static_cast<int>(rng.index(20)), rng.next_seed());
            const Vector* tgt = kind == LossKind::kFqe ? &target : nullptr;
            const Vector analytic = loss_gradient(kind, model, data.transitions, pi, gamma, tgt);
            Vector numeric(dim);
            const double h = 1e-6;
            for (int k = 0; k < dim; ++k) {
                ValueModel plus = model, minus = model;
                Vector p = theta;
                p(k) += h;
                plus.set_params(p);
                p(k) -= 2.0 * h;
                minus.set_params(p);
                numeric(k) = (loss_value(kind, plus, data.transitions, pi, gamma, tgt) -
                              loss_value(kind, minus, data.transitions, pi, gamma, tgt)) /
                             (2.0 * h);
            }
            const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
            worst = std::max(worst, (analytic - numeric).norm() / scale);
        }
    }
    return {7, "BRM and FQE gradients match central differences", worst < 1e-5,
            "max relative error " + detail::fmt(worst), detail::seconds_since(start)};
}

/// 8. With a missing relevant pair, BRM drives the Bellman error to zero away
/// from Q^pi while FQE seeded on the missing pair does not.
inline CheckResult check_missing_pair_phenomenon(const VerifyOptions& opt) {
    const auto start = detail::Clock::now();
    ExperimentConfig c;
    c.study = Study::kOffPolicySweep;
    c.mdp_spec = "gridworld-3x3";
    c.gamma = 0.9;
    c.noise_levels = {0.0, 0.3};
    c.seeds = {1, 2};
    c.learners = {Learner::kBrm, Learner::kFqe};
    c.dataset_size = 300;
    c.remove_pairs = {{4, 1}};  // centre cell, moving down: on the greedy path
    c.fqe_exact_missing = true;
    c.train.steps = 20000;
    c.train.batch_size = 64;
    c.train.learning_rate = 1e-2;
    c.train.target_update = TargetUpdate::kHard;
    const auto report = run_offpolicy_sweep(c);

    bool ok = true;
    double max_brm_msbe = 0.0, min_ratio = std::numeric_limits<double>::infinity();
    std::size_t min_missing = std::numeric_limits<std::size_t>::max();
    for (const auto& brm : report.cells) {
        if (brm.learner != Learner::kBrm) continue;
        for (const auto& fqe : report.cells) {
            if (fqe.learner != Learner::kFqe || fqe.noise != brm.noise || fqe.seed != brm.seed) continue;
            min_ratio = std::min(min_ratio, brm.test.nave / std::max(fqe.test.nave, 1e-300));
            ok = ok && brm.test.nave >= 2.0 * fqe.test.nave;
        }
        max_brm_msbe = std::max(max_brm_msbe, brm.train.msbe);
        min_missing = std::min(min_missing, brm.missing_pairs);
        ok = ok && brm.train.msbe < 1e-3 && brm.missing_pairs >= 1 && !brm.diverged;
    }

    // the constructed zero-Bellman-error value on the same kind of dataset
    const auto env = builtin_environment(c.mdp_spec, c.gamma);
    const Dataset data = remove_pairs(collect_transitions(env.mdp, env.target, 300, 36, opt.seed), c.remove_pairs);
    const double big_c = 3.0;
    const auto [q, cert] = corollary1_value_any_anchor(env.mdp, env.target, data, big_c);
    const double grad = loss_gradient(LossKind::kBrm, ValueModel::tabular(q), data.transitions, env.target, c.gamma)
                            .cwiseAbs()
                            .maxCoeff();
    const double anchor_dev = std::abs(cert.value("anchor_value_error") - big_c);
    ok = ok && cert.passed && grad < 1e-9 && anchor_dev < 1e-9;
    const double t = detail::seconds_since(start);
    ok = ok && t < 30.0;
    return {8, "missing relevant pair: low BRM Bellman error, high value error", ok,
            "BRM train MSBE <= " + detail::fmt(max_brm_msbe) + ", NAVE(BRM)/NAVE(FQE) >= " + detail::fmt(min_ratio) +
                ", missing pairs >= " + std::to_string(min_missing) + ", constructed value gradient " +
                detail::fmt(grad) + ", anchor deviation " + detail::fmt(anchor_dev) + ", " + detail::fmt(t) + " s",
            t};
}

/// Small configurations of every study, used by the determinism check.
inline std::vector<ExperimentConfig> determinism_configs() {
    std::vector<ExperimentConfig> out;
    ExperimentConfig base;
    base.gamma = 0.9;
    base.seeds = {3, 4};
    base.dataset_size = 200;
    base.train.steps = 400;
    base.train.batch_size = 32;
    base.train.learning_rate = 1e-2;

    auto on = base;
    on.study = Study::kOnPolicy;
    on.mdp_spec = "gridworld-5x5";
    out.push_back(on);

    auto traj = base;
    traj.study = Study::kSingleTrajectory;
    traj.mdp_spec = "chain-12";
    traj.model = ModelKind::kLinear;
    traj.start_state = 0;
    out.push_back(traj);

    auto sweep = base;
    sweep.study = Study::kOffPolicySweep;
    sweep.mdp_spec = "gridworld-3x3";
    sweep.noise_levels = {0.0, 0.5};
    sweep.learners = {Learner::kBrm, Learner::kFqe};
    out.push_back(sweep);

    auto corr = base;
    corr.study = Study::kCorrelation;
    corr.mdp_spec = "chain-8";
    corr.seeds = {1, 2, 3, 4, 5};
    corr.noise_levels = {0.0, 0.5};
    out.push_back(corr);

    auto cons = base;
    cons.study = Study::kConstructions;
    cons.mdp_spec = "chain-6";
    out.push_back(cons);
    return out;
}

/// 9. Identical config and seed give byte-identical report files, also across thread counts.
inline CheckResult check_determinism(const VerifyOptions& opt) {
    namespace fs = std::filesystem;
    const auto start = detail::Clock::now();
    bool ok = true;
    std::string detail_text;
    for (auto config : determinism_configs()) {
        const fs::path a = opt.scratch_dir / (to_string(config.study) + "_a");
        const fs::path b = opt.scratch_dir / (to_string(config.study) + "_b");
        fs::remove_all(a);
        fs::remove_all(b);
        config.threads = 1;
        write_report(run_study(config), a.string());
        config.threads = 3;
        write_report(run_study(config), b.string());
        const bool same = detail::read_files(a) == detail::read_files(b);
        ok = ok && same;
        if (!same) detail_text += to_string(config.study) + " differs; ";
        fs::remove_all(a);
        fs::remove_all(b);
    }
    if (ok) detail_text = "5 studies byte-identical across repeated runs";
    return {9, "repeated studies produce byte-identical reports", ok, detail_text, detail::seconds_since(start)};
}

/// 10. Single-trajectory ratios inside [1/(1+gamma), 1/(1-gamma)]; MC mean ratio in [0.5, 2].
inline CheckResult check_single_trajectory(const VerifyOptions&) {
    const auto start = detail::Clock::now();
    bool ok = true;
    std::string detail_text;
    for (const std::string mdp : {"chain-30", "gridworld-8x8"}) {
        ExperimentConfig c;
        c.study = Study::kSingleTrajectory;
        c.mdp_spec = mdp;
        c.gamma = 0.99;
        c.seeds = {0, 1, 2, 3, 4};
        c.model = ModelKind::kLinear;
        c.start_state = 0;
        c.train.steps = 50000;
        c.train.batch_size = 32;
        c.train.learning_rate = 1e-3;
        const auto report = run_single_trajectory_study(c);
        int outside = 0;
        for (const auto& t : report.trajectories) outside += t.within_bounds ? 0 : 1;
        double mc_sum = 0.0;
        int mc_n = 0;
        for (const auto& t : report.trajectories)
            if (t.learner == Learner::kMc && std::isfinite(t.ratio)) {
                mc_sum += t.ratio;
                ++mc_n;
            }
        const double mc_mean = mc_n > 0 ? mc_sum / mc_n : std::numeric_limits<double>::quiet_NaN();
        ok = ok && outside == 0 && mc_n > 0 && mc_mean >= 0.5 && mc_mean <= 2.0;
        detail_text += mdp + ": " + std::to_string(outside) + " outside, MC mean ratio " + detail::fmt(mc_mean) + "; ";
    }
    return {10, "single-trajectory ratios within bounds, MC ratio near 1", ok, detail_text,
            detail::seconds_since(start)};
}

using Check = std::function<CheckResult(const VerifyOptions&)>;

inline std::vector<Check> acceptance_checks() {
    return {check_toy_examples, check_identity,   check_ratio_bounds,
            check_contraction,  check_inverse_relation, check_improvement,
            check_gradients,    check_missing_pair_phenomenon, check_determinism,
            check_single_trajectory};
}

inline std::string format_result(const CheckResult& r) {
    return std::string(r.passed ? "PASS" : "FAIL") + " [" + std::to_string(r.id) + "] " + r.name + ": " + r.detail;
}

/// Runs every check, calling `report` after each; true when all pass.
inline bool run_acceptance(const VerifyOptions& opt, const std::function<void(const CheckResult&)>& report) {
    bool all = true;
    const auto checks = acceptance_checks();
    for (std::size_t i = 0; i < checks.size(); ++i) {
        CheckResult r;
        try {
            r = checks[i](opt);
        } catch (const std::exception& e) {
            r.id = static_cast<int>(i + 1);
            r.name = "criterion " + std::to_string(i + 1);
            r.passed = false;
            r.detail = std::string("threw: ") + e.what();
        }
        all = all && r.passed;
        report(r);
    }
    return all;
}

}  // namespace bellman
