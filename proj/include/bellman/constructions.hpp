#pragma once

#include "bellman/builtins.hpp"
#include "bellman/data.hpp"
#include "bellman/diagnostics.hpp"
#include "bellman/mdp.hpp"
#include "bellman/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bellman {

/// A named property with the numbers measured to check it.
struct ConstructionCertificate {
    std::string claim;
    std::vector<std::pair<std::string, double>> measured;
    bool passed = false;
    double tolerance = 1e-9;
    std::optional<std::uint64_t> seed;

    ConstructionCertificate() = default;
    ConstructionCertificate(std::string c, std::vector<std::pair<std::string, double>> m)
        : claim(std::move(c)), measured(std::move(m)) {}

    double value(const std::string& key) const {
        for (const auto& [k, v] : measured)
            if (k == key) return v;
        throw std::out_of_range("certificate has no measurement " + key);
    }
};

inline nlohmann::ordered_json to_json(const ConstructionCertificate& cert) {
    nlohmann::ordered_json doc;
    doc["claim"] = cert.claim;
    auto& measured = doc["measured"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : cert.measured) measured[k] = v;
    doc["passed"] = cert.passed;
    doc["tolerance"] = cert.tolerance;
    if (cert.seed)
        doc["seed"] = *cert.seed;
    else
        doc["seed"] = nullptr;
    return doc;
}

struct ConstructedValue {
    QTable q;
    Dataset data;
    ConstructionCertificate certificate;
};

namespace detail {

inline void require_positive(double c, const char* where) {
    if (!(c > 0.0) || !std::isfinite(c)) throw std::invalid_argument(std::string(where) + ": C must be positive");
}

inline void require_open_discount(double gamma, const char* where) {
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument(std::string(where) + ": gamma must lie in (0,1)");
}

inline Dataset single_transition(int s, int a, double r, int s_next) {
    Dataset d;
    d.transitions.push_back({s, a, r, s_next, false, 0});
    d.episode_offsets = {0, 1};
    return d;
}

}  // namespace detail

/// s0 -> s1 -> s1 with zero reward; Q^pi is identically zero.
inline Environment two_state_mdp(double gamma) {
    detail::require_open_discount(gamma, "two_state_mdp");
    return two_state_environment(gamma);
}

/// Q(s0)=C, Q(s1)=C/gamma with data {(s0,a,0,s1)}: no Bellman error on the
/// data, value error C.
inline ConstructedValue hidden_bias_instance(double c, double gamma) {
    detail::require_positive(c, "hidden_bias_instance");
    const auto env = two_state_mdp(gamma);
    QTable q(2, 1);
    q(0, 0) = c;
    q(1, 0) = c / gamma;
    const auto errors = error_table(env.mdp, env.target, q);
    const double eps = errors.bellman(0, 0);
    const double delta = errors.value(0, 0);
    ConstructionCertificate cert{"bellman error 0 and value error C at (s0,a)",
                                 {{"C", c}, {"gamma", gamma}, {"bellman_error", eps}, {"value_error", delta}}};
    cert.passed = std::abs(eps) <= cert.tolerance && std::abs(delta - c) <= cert.tolerance * std::max(1.0, c);
    return {std::move(q), detail::single_transition(0, 0, 0.0, 1), std::move(cert)};
}

/// Q(s0)=0, Q(s1)=-C/gamma: Bellman error C at (s0,a), value error 0.
inline ConstructedValue visible_error_instance(double c, double gamma) {
    detail::require_positive(c, "visible_error_instance");
    const auto env = two_state_mdp(gamma);
    QTable q(2, 1);
    q(1, 0) = -c / gamma;
    const auto errors = error_table(env.mdp, env.target, q);
    const double eps = errors.bellman(0, 0);
    const double delta = errors.value(0, 0);
    ConstructionCertificate cert{"bellman error C and value error 0 at (s0,a)",
                                 {{"C", c}, {"gamma", gamma}, {"bellman_error", eps}, {"value_error", delta}}};
    cert.passed = std::abs(eps - c) <= cert.tolerance * std::max(1.0, c) && std::abs(delta) <= cert.tolerance;
    return {std::move(q), detail::single_transition(0, 0, 0.0, 1), std::move(cert)};
}

/// Q^pi + sign(s,a) * magnitude with independent fair signs.
struct RandomSignQ {
    QTable base;
    double magnitude = 0.0;
    Matrix signs;  // one seeded draw, entries +-1

    QTable realized() const { return QTable(Matrix(base.values() + magnitude * signs)); }
};

struct InverseRelationPair {
    QTable q1;
    RandomSignQ q2;
    Matrix expected_abs_bellman_q2;  // E|eps_Q2(s,a)| over the signs
    double k = 0.0;
    double monte_carlo_stderr = 0.0;  // 0 when every pair was enumerated
    ConstructionCertificate certificate;
};

/// E|sum_j w_j sigma_j| over independent fair signs: enumerated when the
/// pattern count is at most 2^20, Monte-Carlo otherwise. Returns (mean, stderr).
inline std::pair<double, double> expected_abs_signed_sum(const std::vector<double>& w, Rng& rng,
                                                        int samples = 1 << 16) {
    const std::size_t n = w.size();
    if (n <= 20) {
        const std::uint64_t patterns = std::uint64_t{1} << n;
        double sum = 0.0;
        for (std::uint64_t mask = 0; mask < patterns; ++mask) {
            double x = 0.0;
            for (std::size_t j = 0; j < n; ++j) x += ((mask >> j) & 1U) ? w[j] : -w[j];
            sum += std::abs(x);
        }
        return {sum / static_cast<double>(patterns), 0.0};
    }
    double mean = 0.0, m2 = 0.0;
    for (int i = 1; i <= samples; ++i) {
        double x = 0.0;
        for (double wj : w) x += rng.coin() ? wj : -wj;
        const double v = std::abs(x);
        const double d = v - mean;
        mean += d / i;
        m2 += d * (v - mean);
    }
    return {mean, std::sqrt(m2 / (samples - 1) / samples)};
}

/// Q1 = Q^pi + k/(1-gamma) and Q2 = Q^pi +- k(1+gamma) with
/// k = (1 + slack) max(C(1-gamma)/gamma^2, C/gamma).
///
/// Claims, at every pair: |Delta_Q1| - |Delta_Q2| > C and E|eps_Q2| - |eps_Q1| > C.
/// At slack = 0 one of the two margins is exactly zero, so the strict claims
/// need slack > 0. The expectation bound E|eps_Q2| >= k(1+gamma) requires that
/// no pair is its own successor.
inline InverseRelationPair inverse_relation_pair(const FiniteMdp& mdp, const PolicyTable& policy, double c, double gamma,
                                                 Rng& rng, double slack = 0.01) {
    detail::require_positive(c, "inverse_relation_pair");
    detail::require_open_discount(gamma, "inverse_relation_pair");
    if (!(slack >= 0.0)) throw std::invalid_argument("inverse_relation_pair: slack must be non-negative");
    const FiniteMdp m = mdp.discount() == gamma ? mdp : mdp.with_discount(gamma);
    detail::require_valid(m, policy, "inverse_relation_pair");

    const double k = (1.0 + slack) * std::max(c * (1.0 - gamma) / (gamma * gamma), c / gamma);
    const QTable q_true = exact_q(m, policy);
    const int ns = m.num_states(), na = m.num_actions();

    InverseRelationPair out;
    out.q1 = q_true + k / (1.0 - gamma);
    out.q2 = RandomSignQ{q_true, k * (1.0 + gamma), Matrix(ns, na)};
    out.expected_abs_bellman_q2 = Matrix(ns, na);
    out.k = k;
    for (int s = 0; s < ns; ++s)
        for (int a = 0; a < na; ++a) out.q2.signs(s, a) = rng.coin() ? 1.0 : -1.0;

    // eps_Q2(i) = magnitude * sum_j (1[j=i] - gamma P_pi[i,j]) sigma_j
    const Matrix pp = pair_transition_matrix(m, policy);
    for (int i = 0; i < m.num_pairs(); ++i) {
        std::vector<double> w{1.0};
        std::vector<int> members{i};
        for (int j = 0; j < m.num_pairs(); ++j) {
            if (pp(i, j) <= 0.0) continue;
            if (j == i)
                w[0] -= gamma * pp(i, j);
            else {
                w.push_back(-gamma * pp(i, j));
                members.push_back(j);
            }
        }
        const auto [mean, se] = expected_abs_signed_sum(w, rng);
        const auto p = m.pair_at(i);
        out.expected_abs_bellman_q2(p.state, p.action) = out.q2.magnitude * mean;
        out.monte_carlo_stderr = std::max(out.monte_carlo_stderr, out.q2.magnitude * se);
    }

    const ErrorTable e1 = error_table(m, policy, out.q1);
    const Matrix abs_delta2 = Matrix::Constant(ns, na, out.q2.magnitude);
    const double delta_margin = (e1.value.cwiseAbs() - abs_delta2).minCoeff() - c;
    const double eps_margin = (out.expected_abs_bellman_q2 - e1.bellman.cwiseAbs()).minCoeff() - c;

    auto& cert = out.certificate;
    cert.claim = "|Delta_Q1| - |Delta_Q2| > C and E|eps_Q2| - |eps_Q1| > C at every pair";
    cert.measured = {{"C", c},
                     {"gamma", gamma},
                     {"k", k},
                     {"min_abs_value_error_q1", e1.value.cwiseAbs().minCoeff()},
                     {"max_abs_value_error_q2", out.q2.magnitude},
                     {"max_abs_bellman_error_q1", e1.bellman.cwiseAbs().maxCoeff()},
                     {"min_expected_abs_bellman_error_q2", out.expected_abs_bellman_q2.minCoeff()},
                     {"value_margin", delta_margin},
                     {"bellman_margin", eps_margin},
                     {"monte_carlo_stderr", out.monte_carlo_stderr}};
    cert.passed = delta_margin > cert.tolerance && eps_margin > cert.tolerance + 3.0 * out.monte_carlo_stderr;
    return out;
}

struct EqualityInstance {
    FiniteMdp mdp;
    PolicyTable policy;
    QTable q;
    ConstructionCertificate certificate;
};

namespace detail {

inline ConstructionCertificate ratio_certificate(const std::string& claim, const FiniteMdp& mdp,
                                                 const PolicyTable& policy, const QTable& q, double expected_ratio) {
    const auto e = error_table(mdp, policy, q);
    const double max_eps = e.bellman.cwiseAbs().maxCoeff();
    const double max_delta = e.value.cwiseAbs().maxCoeff();
    const double ratio = max_delta / max_eps;
    ConstructionCertificate cert{claim,
                                 {{"gamma", mdp.discount()},
                                  {"max_abs_bellman_error", max_eps},
                                  {"max_abs_value_error", max_delta},
                                  {"ratio", ratio},
                                  {"expected_ratio", expected_ratio}}};
    cert.passed = std::abs(ratio - expected_ratio) <= cert.tolerance * std::max(1.0, expected_ratio);
    return cert;
}

}  // namespace detail

/// Instances attaining max|Delta| / max|eps| = 1/(1-gamma) (uniform shift on
/// the two-state MDP) and 1/(1+gamma) (alternating shift on a two-state cycle).
inline std::pair<EqualityInstance, EqualityInstance> bound_equality_instances(double c, double gamma) {
    detail::require_positive(c, "bound_equality_instances");
    detail::require_open_discount(gamma, "bound_equality_instances");

    auto upper_env = two_state_mdp(gamma);
    QTable upper_q = exact_q(upper_env.mdp, upper_env.target) + c / (1.0 - gamma);
    auto upper_cert = detail::ratio_certificate("max|Delta| / max|eps| = 1/(1-gamma)", upper_env.mdp, upper_env.target,
                                                upper_q, 1.0 / (1.0 - gamma));

    FiniteMdp cycle = ring_mdp(2, gamma);
    PolicyTable cycle_policy = PolicyTable::deterministic(1, {0, 0});
    QTable lower_q = exact_q(cycle, cycle_policy);
    lower_q(0, 0) += c / (1.0 + gamma);
    lower_q(1, 0) -= c / (1.0 + gamma);
    auto lower_cert = detail::ratio_certificate("max|Delta| / max|eps| = 1/(1+gamma)", cycle, cycle_policy, lower_q,
                                                1.0 / (1.0 + gamma));
    upper_cert.measured.insert(upper_cert.measured.begin(), {"C", c});
    lower_cert.measured.insert(lower_cert.measured.begin(), {"C", c});

    return {EqualityInstance{std::move(upper_env.mdp), std::move(upper_env.target), std::move(upper_q),
                             std::move(upper_cert)},
            EqualityInstance{std::move(cycle), std::move(cycle_policy), std::move(lower_q), std::move(lower_cert)}};
}

/// Raised when the anchored zero-Bellman-error system has no solution.
class Infeasible : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Q with zero Bellman error on every dataset pair and value error C at
/// `anchor`, obtained by solving for Delta on the dataset pairs and the
/// missing relevant pairs (all other pairs keep Delta = 0):
///
///   Delta(s,a) - gamma E[Delta(s',a')] = 0   for (s,a) in the data
///   Delta(anchor) = C
///
/// Rank deficiency is resolved by the minimum-norm solution.
inline std::pair<QTable, ConstructionCertificate> corollary1_value(const FiniteMdp& mdp, const PolicyTable& policy,
                                                                   const Dataset& data, double c, StateAction anchor) {
    detail::require_positive(c, "corollary1_value");
    detail::require_valid(mdp, policy, "corollary1_value");
    const auto present = unique_pairs(data);
    if (present.empty()) throw std::invalid_argument("corollary1_value: empty dataset");
    if (std::find(present.begin(), present.end(), anchor) == present.end())
        throw std::invalid_argument("corollary1_value: anchor " + detail::pair_name(anchor.state, anchor.action) +
                                    " is not a dataset pair");
    const auto missing = missing_relevant_pairs(data, mdp, policy);
    if (missing.empty())
        throw std::invalid_argument("corollary1_value: the dataset has no missing relevant pair");

    std::vector<int> column(static_cast<std::size_t>(mdp.num_pairs()), -1);
    std::vector<StateAction> free;
    for (const auto& group : {present, missing})
        for (const auto& p : group) {
            column[static_cast<std::size_t>(mdp.pair_index(p.state, p.action))] = static_cast<int>(free.size());
            free.push_back(p);
        }

    const Matrix pp = pair_transition_matrix(mdp, policy);
    const double gamma = mdp.discount();
    const auto rows = static_cast<Eigen::Index>(present.size() + 1);
    Matrix system = Matrix::Zero(rows, static_cast<Eigen::Index>(free.size()));
    Vector rhs = Vector::Zero(rows);
    for (std::size_t r = 0; r < present.size(); ++r) {
        const int i = mdp.pair_index(present[r].state, present[r].action);
        const auto row = static_cast<Eigen::Index>(r);
        system(row, column[static_cast<std::size_t>(i)]) += 1.0;
        for (int j = 0; j < mdp.num_pairs(); ++j) {
            const int col = column[static_cast<std::size_t>(j)];
            if (pp(i, j) != 0.0 && col >= 0) system(row, col) -= gamma * pp(i, j);
        }
    }
    system(rows - 1, column[static_cast<std::size_t>(mdp.pair_index(anchor.state, anchor.action))]) = 1.0;
    rhs(rows - 1) = c;

    const Vector solution = system.completeOrthogonalDecomposition().solve(rhs);
    const double residual = (system * solution - rhs).cwiseAbs().maxCoeff();
    if (!solution.allFinite() || residual > 1e-9 * std::max(1.0, c))
        throw Infeasible("corollary1_value: no zero-error solution with value error C at anchor " +
                         detail::pair_name(anchor.state, anchor.action));

    const QTable q_true = exact_q(mdp, policy);
    QTable q = q_true;
    for (std::size_t k = 0; k < free.size(); ++k) q(free[k].state, free[k].action) += solution(static_cast<Eigen::Index>(k));

    const auto errors = error_table(mdp, policy, q);
    double max_eps = 0.0;
    for (const auto& p : present) max_eps = std::max(max_eps, std::abs(errors.bellman(p.state, p.action)));
    const double anchor_delta = errors.value(anchor.state, anchor.action);
    ConstructionCertificate cert{"zero bellman error on the data and value error C at the anchor",
                                 {{"C", c},
                                  {"anchor_state", anchor.state},
                                  {"anchor_action", anchor.action},
                                  {"max_abs_bellman_error_on_data", max_eps},
                                  {"anchor_value_error", anchor_delta},
                                  {"missing_relevant_pairs", static_cast<double>(missing.size())}}};
    cert.passed = max_eps <= cert.tolerance * std::max(1.0, c) && std::abs(anchor_delta - c) <= cert.tolerance * std::max(1.0, c);
    return {std::move(q), std::move(cert)};
}

/// First dataset pair (in unique_pairs order) for which corollary1_value succeeds.
inline std::pair<QTable, ConstructionCertificate> corollary1_value_any_anchor(const FiniteMdp& mdp,
                                                                              const PolicyTable& policy,
                                                                              const Dataset& data, double c) {
    for (const auto& anchor : unique_pairs(data)) {
        try {
            return corollary1_value(mdp, policy, data, c, anchor);
        } catch (const Infeasible&) {
        }
    }
    throw Infeasible("corollary1_value: no feasible anchor");
}

}  // namespace bellman
