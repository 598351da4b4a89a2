#pragma once

#include "bellman/data.hpp"
#include "bellman/mdp.hpp"
#include "bellman/rng.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bellman {

/// How the successor action a' ~ pi enters a sample-based residual.
enum class NextAction {
    kExpected,  // sum_a' pi(a'|s') Q(s',a')
    kSampled,   // Q(s',a') for one draw a' ~ pi(.|s')
};

/// Per-pair Bellman error and value error of one approximate Q.
struct ErrorTable {
    Matrix bellman;
    Matrix value;
};

struct BoundsReport {
    double c_max = 0.0;
    double c_avg = 0.0;
    double max_lower = 0.0;
    double max_upper = 0.0;
    double avg_lower = 0.0;
    double avg_upper = 0.0;
};

struct MetricRecord {
    double msbe = 0.0;
    double nave = 0.0;
    double k_const = 1.0;
};

/// Raised by pearson() when either sample has zero variance.
class DegenerateVariance : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// epsilon(s,a) = Q(s,a) - E[r + gamma Q(s',a')].
inline Matrix bellman_error_table(const FiniteMdp& mdp, const PolicyTable& policy, const QTable& q) {
    return q.values() - apply_bellman_operator(mdp, policy, q).values();
}

/// Bellman error and value error (against exact_q) for every pair.
inline ErrorTable error_table(const FiniteMdp& mdp, const PolicyTable& policy, const QTable& q) {
    return {bellman_error_table(mdp, policy, q), q.values() - exact_q(mdp, policy).values()};
}

/// epsilon = Delta - gamma E[Delta(s',a')].
inline Matrix bellman_from_value(const FiniteMdp& mdp, const PolicyTable& policy, const Matrix& delta) {
    detail::require_shape(mdp, delta, "bellman_from_value");
    return delta - mdp.discount() * expected_next(mdp, policy, delta);
}

/// Delta(s,a) = E_{d(.|s,a)}[epsilon] / (1 - gamma) for a precomputed occupancy.
inline Matrix value_from_bellman(const OccupancyTensor& occupancy, const Matrix& eps, double gamma) {
    const Vector flat = occupancy.conditional_matrix() * detail::flatten(eps) / (1.0 - gamma);
    return detail::unflatten(flat, static_cast<int>(eps.cols()));
}

inline Matrix value_from_bellman(const FiniteMdp& mdp, const PolicyTable& policy, const Matrix& eps) {
    detail::require_shape(mdp, eps, "value_from_bellman");
    return value_from_bellman(conditional_occupancy(mdp, policy), eps, mdp.discount());
}

/// Max-norm and occupancy-averaged bounds on |Delta| implied by |epsilon|:
/// C / (1 + gamma) <= |Delta| <= C / (1 - gamma).
///
/// The max-norm pair holds for every Q. The averaged pair holds when the
/// averaging distribution is stationary under P_pi; for a transient d0 it can
/// fail (see the diagnostics tests for a two-state counterexample).
inline BoundsReport value_error_bounds(const Matrix& eps, double gamma, const Matrix& marginal) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("value_error_bounds: gamma must lie in [0,1)");
    if (marginal.rows() != eps.rows() || marginal.cols() != eps.cols())
        throw std::invalid_argument("value_error_bounds: occupancy shape does not match the error table");
    BoundsReport b;
    b.c_max = eps.cwiseAbs().maxCoeff();
    b.c_avg = (marginal.array() * eps.array().abs()).sum();
    b.max_lower = b.c_max / (1.0 + gamma);
    b.max_upper = b.c_max / (1.0 - gamma);
    b.avg_lower = b.c_avg / (1.0 + gamma);
    b.avg_upper = b.c_avg / (1.0 - gamma);
    return b;
}

/// gamma * V(s') for one transition, zero after a terminal transition.
inline double bootstrap_value(const Matrix& q, const PolicyTable& policy, const Transition& tr, double gamma,
                              NextAction mode, Rng* rng) {
    if (tr.terminal) return 0.0;
    if (mode == NextAction::kSampled) {
        if (rng == nullptr) throw std::invalid_argument("sampled next action requires a generator");
        std::vector<double> w(static_cast<std::size_t>(policy.num_actions()));
        for (int a = 0; a < policy.num_actions(); ++a) w[static_cast<std::size_t>(a)] = policy.prob(tr.s_next, a);
        return gamma * q(tr.s_next, static_cast<int>(rng->categorical(w)));
    }
    double v = 0.0;
    for (int a = 0; a < policy.num_actions(); ++a) {
        const double p = policy.prob(tr.s_next, a);
        if (p != 0.0) v += p * q(tr.s_next, a);
    }
    return gamma * v;
}

/// TD error delta = Q(s,a) - (r + gamma Q(s',a')) with a' ~ pi.
inline double td_error(const Transition& tr, const QTable& q, const PolicyTable& policy, double gamma, Rng& rng) {
    return q(tr.s, tr.a) - (tr.r + bootstrap_value(q.values(), policy, tr, gamma, NextAction::kSampled, &rng));
}

/// TD residual with the successor action integrated out exactly.
inline double expected_td_error(const Transition& tr, const QTable& q, const PolicyTable& policy, double gamma) {
    return q(tr.s, tr.a) - (tr.r + bootstrap_value(q.values(), policy, tr, gamma, NextAction::kExpected, nullptr));
}

/// Mean true value over the dataset pairs, the normalizer of absolute value
/// error. Falls back to 1 when that mean is not positive (e.g. all-zero rewards).
inline double normalizer_constant(const Dataset& data, const QTable& q_true) {
    if (data.empty()) throw std::invalid_argument("normalizer_constant: empty dataset");
    double sum = 0.0;
    for (const auto& tr : data.transitions) sum += q_true(tr.s, tr.a);
    const double k = sum / static_cast<double>(data.size());
    return k > 1e-12 ? k : 1.0;
}

/// Mean-squared Bellman error and normalized absolute value error over a dataset.
inline MetricRecord empirical_metrics(const QTable& q, const Dataset& data, const PolicyTable& policy,
                                      const QTable& q_true, double k_const, double gamma,
                                      NextAction mode = NextAction::kExpected, Rng* rng = nullptr) {
    if (data.empty()) throw std::invalid_argument("empirical_metrics: empty dataset");
    if (!(k_const > 0.0)) throw std::invalid_argument("empirical_metrics: normalizer must be positive");
    double squared = 0.0;
    double absolute = 0.0;
    for (const auto& tr : data.transitions) {
        const double delta = q(tr.s, tr.a) - (tr.r + bootstrap_value(q.values(), policy, tr, gamma, mode, rng));
        squared += delta * delta;
        absolute += std::abs(q(tr.s, tr.a) - q_true(tr.s, tr.a));
    }
    const auto n = static_cast<double>(data.size());
    return {squared / n, absolute / (n * k_const), k_const};
}

/// Sample Pearson correlation coefficient.
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("pearson: sequences differ in length");
    if (xs.size() < 2) throw std::invalid_argument("pearson: need at least two points");
    const auto n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx;
        const double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // relative threshold: constant inputs leave only round-off in the centered sums
    const double scale_x = std::max(1.0, mx * mx) * n;
    const double scale_y = std::max(1.0, my * my) * n;
    if (sxx <= 1e-24 * scale_x || syy <= 1e-24 * scale_y) throw DegenerateVariance("pearson: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct ImprovementCheck {
    bool premise = false;
    bool conclusion = false;
    double max_value_error = 0.0;         // max_D |Delta_Q|
    double max_next_value_error = 0.0;    // max_D |E[Delta_Q(s',a')]|
    double max_improved_value_error = 0.0;  // max_D |Delta_TQ|
};

/// One global Bellman backup, restricted to the dataset pairs:
/// premise gamma max_D |E Delta(s',a')| < max_D |Delta|, conclusion max_D |Delta_TQ| < max_D |Delta|.
inline ImprovementCheck fqe_improvement_check(const FiniteMdp& mdp, const PolicyTable& policy, const QTable& q,
                                              const Dataset& data) {
    if (data.empty()) throw std::invalid_argument("fqe_improvement_check: empty dataset");
    const QTable q_true = exact_q(mdp, policy);
    const Matrix delta = q.values() - q_true.values();
    const Matrix next = expected_next(mdp, policy, delta);
    const Matrix improved = apply_bellman_operator(mdp, policy, q).values() - q_true.values();
    ImprovementCheck check;
    for (const auto& p : unique_pairs(data)) {
        check.max_value_error = std::max(check.max_value_error, std::abs(delta(p.state, p.action)));
        check.max_next_value_error = std::max(check.max_next_value_error, std::abs(next(p.state, p.action)));
        check.max_improved_value_error =
            std::max(check.max_improved_value_error, std::abs(improved(p.state, p.action)));
    }
    check.premise = mdp.discount() * check.max_next_value_error < check.max_value_error;
    check.conclusion = check.max_improved_value_error < check.max_value_error;
    return check;
}

inline void write_error_table_csv(std::ostream& out, const ErrorTable& table) {
    out << "state,action,bellman_error,value_error\n";
    const auto old = out.precision(17);
    for (Eigen::Index s = 0; s < table.bellman.rows(); ++s)
        for (Eigen::Index a = 0; a < table.bellman.cols(); ++a)
            out << s << ',' << a << ',' << table.bellman(s, a) << ',' << table.value(s, a) << '\n';
    out.precision(old);
}

inline void write_metric_csv_header(std::ostream& out) { out << "study_id,msbe,nave,k\n"; }

inline void write_metric_csv_row(std::ostream& out, const std::string& study_id, const MetricRecord& m) {
    const auto old = out.precision(17);
    out << study_id << ',' << m.msbe << ',' << m.nave << ',' << m.k_const << '\n';
    out.precision(old);
}

}  // namespace bellman
