#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <compare>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bellman {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Numerical tolerances used by validation and the exact solvers.
struct Tolerances {
    double probability = 1e-12;  // row sums of P, pi and d0
    double fixed_point = 1e-10;  // |Q - TQ| after an exact solve
    double occupancy = 1e-10;    // normalization of occupancy slices
};

struct StateAction {
    int state = 0;
    int action = 0;

    friend auto operator<=>(const StateAction&, const StateAction&) = default;
};

/// Tabular MDP: P[s][a][s'], r[s][a], discount, d0 and a terminal mask.
///
/// Construction only checks that the shapes agree; probability invariants are
/// reported by validate() so that malformed models can still be inspected.
/// Terminal states are absorbing self-loops with zero reward.
class FiniteMdp {
public:
    FiniteMdp(int num_states, int num_actions, std::vector<double> transition, Matrix reward,
              double discount, Vector initial_dist, std::vector<bool> terminal_mask)
        : num_states_(num_states),
          num_actions_(num_actions),
          transition_(std::move(transition)),
          reward_(std::move(reward)),
          discount_(discount),
          initial_(std::move(initial_dist)),
          terminal_(std::move(terminal_mask)) {
        if (num_states <= 0 || num_actions <= 0)
            throw std::invalid_argument("FiniteMdp: state and action counts must be positive");
        const auto s = static_cast<std::size_t>(num_states);
        const auto a = static_cast<std::size_t>(num_actions);
        if (transition_.size() != s * a * s)
            throw std::invalid_argument("FiniteMdp: transition tensor has wrong size");
        if (reward_.rows() != num_states || reward_.cols() != num_actions)
            throw std::invalid_argument("FiniteMdp: reward matrix has wrong shape");
        if (initial_.size() != num_states)
            throw std::invalid_argument("FiniteMdp: initial distribution has wrong size");
        if (terminal_.size() != s)
            throw std::invalid_argument("FiniteMdp: terminal mask has wrong size");
    }

    int num_states() const { return num_states_; }
    int num_actions() const { return num_actions_; }
    int num_pairs() const { return num_states_ * num_actions_; }

    int pair_index(int s, int a) const { return s * num_actions_ + a; }
    StateAction pair_at(int index) const { return {index / num_actions_, index % num_actions_}; }

    double prob(int s, int a, int next) const {
        return transition_[static_cast<std::size_t>(pair_index(s, a)) * num_states_ + next];
    }
    std::span<const double> next_state_dist(int s, int a) const {
        return {transition_.data() + static_cast<std::size_t>(pair_index(s, a)) * num_states_,
                static_cast<std::size_t>(num_states_)};
    }
    const std::vector<double>& transition() const { return transition_; }

    double reward(int s, int a) const { return reward_(s, a); }
    const Matrix& rewards() const { return reward_; }
    double discount() const { return discount_; }
    const Vector& initial_dist() const { return initial_; }
    bool is_terminal(int s) const { return terminal_[static_cast<std::size_t>(s)]; }
    const std::vector<bool>& terminal_mask() const { return terminal_; }

    bool contains(StateAction p) const {
        return p.state >= 0 && p.state < num_states_ && p.action >= 0 && p.action < num_actions_;
    }

    FiniteMdp with_discount(double gamma) const {
        FiniteMdp copy = *this;
        copy.discount_ = gamma;
        return copy;
    }

private:
    int num_states_;
    int num_actions_;
    std::vector<double> transition_;
    Matrix reward_;
    double discount_;
    Vector initial_;
    std::vector<bool> terminal_;
};

/// pi[s][a]; deterministic policies are one-hot rows.
class PolicyTable {
public:
    explicit PolicyTable(Matrix probs) : probs_(std::move(probs)) {}

    static PolicyTable deterministic(int num_actions, const std::vector<int>& actions) {
        Matrix p = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), num_actions);
        for (std::size_t s = 0; s < actions.size(); ++s) {
            if (actions[s] < 0 || actions[s] >= num_actions)
                throw std::invalid_argument("PolicyTable: action out of range");
            p(static_cast<Eigen::Index>(s), actions[s]) = 1.0;
        }
        return PolicyTable(std::move(p));
    }

    static PolicyTable uniform(int num_states, int num_actions) {
        return PolicyTable(Matrix::Constant(num_states, num_actions, 1.0 / num_actions));
    }

    int num_states() const { return static_cast<int>(probs_.rows()); }
    int num_actions() const { return static_cast<int>(probs_.cols()); }
    double prob(int s, int a) const { return probs_(s, a); }
    const Matrix& probs() const { return probs_; }

    bool is_deterministic() const {
        for (Eigen::Index s = 0; s < probs_.rows(); ++s) {
            for (Eigen::Index a = 0; a < probs_.cols(); ++a) {
                const double p = probs_(s, a);
                if (p != 0.0 && p != 1.0) return false;
            }
        }
        return true;
    }

    /// Most probable action (lowest index on ties).
    int action(int s) const {
        Eigen::Index best = 0;
        probs_.row(s).maxCoeff(&best);
        return static_cast<int>(best);
    }

private:
    Matrix probs_;
};

/// Q[s][a].
class QTable {
public:
    QTable() = default;
    QTable(int num_states, int num_actions, double fill = 0.0)
        : values_(Matrix::Constant(num_states, num_actions, fill)) {}
    explicit QTable(Matrix values) : values_(std::move(values)) {}

    int num_states() const { return static_cast<int>(values_.rows()); }
    int num_actions() const { return static_cast<int>(values_.cols()); }

    double operator()(int s, int a) const { return values_(s, a); }
    double& operator()(int s, int a) { return values_(s, a); }
    double at(StateAction p) const { return values_(p.state, p.action); }

    const Matrix& values() const { return values_; }
    Matrix& values() { return values_; }

    bool all_finite() const { return values_.allFinite(); }

    friend QTable operator+(const QTable& q, double c) {
        return QTable(Matrix(q.values_.array() + c));
    }
    friend QTable operator+(const QTable& q, const Matrix& delta) { return QTable(q.values_ + delta); }

private:
    Matrix values_;
};

/// d(s',a' | s,a) stored in pair space (row = origin pair, column = visited pair)
/// together with the marginal under d0 and pi.
class OccupancyTensor {
public:
    OccupancyTensor(int num_actions, Matrix conditional, Vector marginal)
        : num_actions_(num_actions), conditional_(std::move(conditional)), marginal_(std::move(marginal)) {}

    double conditional(int s, int a, int s_next, int a_next) const {
        return conditional_(s * num_actions_ + a, s_next * num_actions_ + a_next);
    }
    double marginal(int s, int a) const { return marginal_(s * num_actions_ + a); }

    const Matrix& conditional_matrix() const { return conditional_; }
    const Vector& marginal_vector() const { return marginal_; }

    /// Marginal reshaped to [s][a].
    Matrix marginal_table() const {
        const auto rows = marginal_.size() / num_actions_;
        Matrix m(rows, num_actions_);
        for (Eigen::Index i = 0; i < marginal_.size(); ++i) m(i / num_actions_, i % num_actions_) = marginal_(i);
        return m;
    }

private:
    int num_actions_;
    Matrix conditional_;
    Vector marginal_;
};

namespace detail {

inline std::string pair_name(int s, int a) {
    std::ostringstream os;
    os << "(s=" << s << ",a=" << a << ")";
    return os.str();
}

inline Vector flatten(const Matrix& table) {
    Vector v(table.size());
    for (Eigen::Index s = 0; s < table.rows(); ++s)
        for (Eigen::Index a = 0; a < table.cols(); ++a) v(s * table.cols() + a) = table(s, a);
    return v;
}

inline Matrix unflatten(const Vector& v, int num_actions) {
    Matrix m(v.size() / num_actions, num_actions);
    for (Eigen::Index i = 0; i < v.size(); ++i) m(i / num_actions, i % num_actions) = v(i);
    return m;
}

}  // namespace detail

/// Lists every violated model invariant; empty when the MDP is well formed.
inline std::vector<std::string> validate(const FiniteMdp& mdp, const Tolerances& tol = {}) {
    std::vector<std::string> report;
    const int ns = mdp.num_states();
    const int na = mdp.num_actions();
    if (!(mdp.discount() >= 0.0 && mdp.discount() < 1.0)) {
        std::ostringstream os;
        os << "discount " << mdp.discount() << " outside [0,1)";
        report.push_back(os.str());
    }
    for (int s = 0; s < ns; ++s) {
        for (int a = 0; a < na; ++a) {
            double sum = 0.0;
            for (int n = 0; n < ns; ++n) {
                const double p = mdp.prob(s, a, n);
                if (!std::isfinite(p) || p < 0.0) {
                    std::ostringstream os;
                    os << "transition entry " << detail::pair_name(s, a) << "->" << n << " is negative or not finite: " << p;
                    report.push_back(os.str());
                }
                sum += p;
            }
            if (!(std::abs(sum - 1.0) <= tol.probability)) {
                std::ostringstream os;
                os.precision(17);
                os << "transition row " << detail::pair_name(s, a) << " sums to " << sum;
                report.push_back(os.str());
            }
            if (!std::isfinite(mdp.reward(s, a)))
                report.push_back("reward " + detail::pair_name(s, a) + " is not finite");
            if (mdp.is_terminal(s)) {
                if (mdp.prob(s, a, s) != 1.0)
                    report.push_back("terminal state " + std::to_string(s) + " does not self-loop under action " +
                                     std::to_string(a));
                if (mdp.reward(s, a) != 0.0)
                    report.push_back("terminal state " + std::to_string(s) + " has nonzero reward under action " +
                                     std::to_string(a));
            }
        }
    }
    double d0 = 0.0;
    for (int s = 0; s < ns; ++s) {
        const double p = mdp.initial_dist()(s);
        if (!std::isfinite(p) || p < 0.0)
            report.push_back("initial_dist entry " + std::to_string(s) + " is negative or not finite");
        d0 += p;
    }
    if (!(std::abs(d0 - 1.0) <= tol.probability)) {
        std::ostringstream os;
        os.precision(17);
        os << "initial_dist sums to " << d0;
        report.push_back(os.str());
    }
    return report;
}

/// Lists violations of the policy invariants, including a shape mismatch with the MDP.
inline std::vector<std::string> validate(const PolicyTable& policy, const FiniteMdp& mdp,
                                         const Tolerances& tol = {}) {
    std::vector<std::string> report;
    if (policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions()) {
        report.push_back("policy shape does not match the MDP");
        return report;
    }
    for (int s = 0; s < policy.num_states(); ++s) {
        double sum = 0.0;
        for (int a = 0; a < policy.num_actions(); ++a) {
            const double p = policy.prob(s, a);
            if (!std::isfinite(p) || p < 0.0)
                report.push_back("policy entry " + detail::pair_name(s, a) + " is negative or not finite");
            sum += p;
        }
        if (!(std::abs(sum - 1.0) <= tol.probability)) {
            std::ostringstream os;
            os.precision(17);
            os << "policy row " << s << " sums to " << sum;
            report.push_back(os.str());
        }
    }
    return report;
}

namespace detail {

inline void require_valid(const FiniteMdp& mdp, const PolicyTable& policy, const char* where) {
    auto report = validate(mdp);
    auto policy_report = validate(policy, mdp);
    report.insert(report.end(), policy_report.begin(), policy_report.end());
    if (!report.empty()) throw std::invalid_argument(std::string(where) + ": " + report.front());
}

inline void require_shape(const FiniteMdp& mdp, const Matrix& table, const char* where) {
    if (table.rows() != mdp.num_states() || table.cols() != mdp.num_actions())
        throw std::invalid_argument(std::string(where) + ": table shape does not match the MDP");
}

}  // namespace detail

/// V(s) = sum_a pi(a|s) Q(s,a).
inline Vector state_values(const PolicyTable& policy, const Matrix& q) {
    return (policy.probs().array() * q.array()).rowwise().sum();
}

/// Pair-to-pair kernel P_pi[(s,a),(s',a')] = P(s'|s,a) pi(a'|s').
inline Matrix pair_transition_matrix(const FiniteMdp& mdp, const PolicyTable& policy) {
    const int ns = mdp.num_states();
    const int na = mdp.num_actions();
    Matrix kernel = Matrix::Zero(mdp.num_pairs(), mdp.num_pairs());
    for (int s = 0; s < ns; ++s) {
        for (int a = 0; a < na; ++a) {
            const int row = mdp.pair_index(s, a);
            for (int n = 0; n < ns; ++n) {
                const double p = mdp.prob(s, a, n);
                if (p == 0.0) continue;
                for (int b = 0; b < na; ++b) kernel(row, mdp.pair_index(n, b)) += p * policy.prob(n, b);
            }
        }
    }
    return kernel;
}

/// Expected next-pair value E_{s'~P, a'~pi}[f(s',a')] for every (s,a).
inline Matrix expected_next(const FiniteMdp& mdp, const PolicyTable& policy, const Matrix& f) {
    const Vector v = state_values(policy, f);
    Matrix out(mdp.num_states(), mdp.num_actions());
    for (int s = 0; s < mdp.num_states(); ++s) {
        for (int a = 0; a < mdp.num_actions(); ++a) {
            double acc = 0.0;
            const auto row = mdp.next_state_dist(s, a);
            for (int n = 0; n < mdp.num_states(); ++n) acc += row[static_cast<std::size_t>(n)] * v(n);
            out(s, a) = acc;
        }
    }
    return out;
}

/// TQ(s,a) = r(s,a) + gamma E[Q(s',a')], exact expectation over P and pi.
inline QTable apply_bellman_operator(const FiniteMdp& mdp, const PolicyTable& policy, const QTable& q) {
    detail::require_shape(mdp, q.values(), "apply_bellman_operator");
    return QTable(Matrix(mdp.rewards() + mdp.discount() * expected_next(mdp, policy, q.values())));
}

/// Q^pi from a direct solve of (I - gamma P_pi) q = r over all pairs.
inline QTable exact_q(const FiniteMdp& mdp, const PolicyTable& policy) {
    detail::require_valid(mdp, policy, "exact_q");
    const int n = mdp.num_pairs();
    const Matrix system = Matrix::Identity(n, n) - mdp.discount() * pair_transition_matrix(mdp, policy);
    const Vector rhs = detail::flatten(mdp.rewards());
    const Vector solution = system.partialPivLu().solve(rhs);
    if (!solution.allFinite()) throw std::domain_error("exact_q: Bellman system is singular or inputs are not finite");
    return QTable(detail::unflatten(solution, mdp.num_actions()));
}

/// Discounted occupancy d(.|s,a) = (1-gamma) sum_t gamma^t P_pi^t for every origin
/// pair, and its marginal under s0 ~ d0, a0 ~ pi.
inline OccupancyTensor conditional_occupancy(const FiniteMdp& mdp, const PolicyTable& policy) {
    detail::require_valid(mdp, policy, "conditional_occupancy");
    const int n = mdp.num_pairs();
    const double gamma = mdp.discount();
    const Matrix system = Matrix::Identity(n, n) - gamma * pair_transition_matrix(mdp, policy);
    Matrix conditional = (1.0 - gamma) * system.partialPivLu().inverse();
    if (!conditional.allFinite()) throw std::domain_error("conditional_occupancy: singular occupancy system");

    Vector start(n);
    for (int s = 0; s < mdp.num_states(); ++s)
        for (int a = 0; a < mdp.num_actions(); ++a)
            start(mdp.pair_index(s, a)) = mdp.initial_dist()(s) * policy.prob(s, a);
    Vector marginal = conditional.transpose() * start;
    return OccupancyTensor(mdp.num_actions(), std::move(conditional), std::move(marginal));
}

/// Greedy policy from optimal value iteration; ties go to the lowest action index.
inline PolicyTable optimal_policy(const FiniteMdp& mdp, double residual = 1e-12, int max_iterations = 1'000'000) {
    const int ns = mdp.num_states();
    const int na = mdp.num_actions();
    Vector v = Vector::Zero(ns);
    Matrix q(ns, na);
    for (int it = 0; it < max_iterations; ++it) {
        for (int s = 0; s < ns; ++s) {
            for (int a = 0; a < na; ++a) {
                double acc = 0.0;
                const auto row = mdp.next_state_dist(s, a);
                for (int n = 0; n < ns; ++n) acc += row[static_cast<std::size_t>(n)] * v(n);
                q(s, a) = mdp.reward(s, a) + mdp.discount() * acc;
            }
        }
        const Vector next = q.rowwise().maxCoeff();
        const double change = (next - v).cwiseAbs().maxCoeff();
        v = next;
        if (change < residual) break;
    }
    std::vector<int> actions(static_cast<std::size_t>(ns));
    for (int s = 0; s < ns; ++s) {
        int best = 0;
        for (int a = 1; a < na; ++a)
            if (q(s, a) > q(s, best) + 1e-12) best = a;
        actions[static_cast<std::size_t>(s)] = best;
    }
    return PolicyTable::deterministic(na, actions);
}

}  // namespace bellman
