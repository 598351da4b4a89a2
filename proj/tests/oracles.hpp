#pragma once

// Reference computations used only by the tests. Each one avoids the code
// path it checks: value iteration instead of a linear solve, explicit
// loops over the transition tensor instead of the pair kernel, rollouts
// instead of matrix inverses.

#include "bellman/builtins.hpp"
#include "bellman/data.hpp"
#include "bellman/mdp.hpp"
#include "bellman/rng.hpp"

#include <cmath>
#include <deque>
#include <set>
#include <vector>

namespace oracle {

using bellman::Matrix;

/// Q^pi by repeated Bellman backups until the sup-norm change drops below `tol`.
inline Matrix value_iteration(const bellman::FiniteMdp& mdp, const bellman::PolicyTable& pi, double tol = 1e-12) {
    const int ns = mdp.num_states(), na = mdp.num_actions();
    Matrix q = Matrix::Zero(ns, na);
    for (int it = 0; it < 2'000'000; ++it) {
        Matrix next(ns, na);
        for (int s = 0; s < ns; ++s)
            for (int a = 0; a < na; ++a) {
                double acc = 0.0;
                for (int n = 0; n < ns; ++n) {
                    const double p = mdp.prob(s, a, n);
                    if (p == 0.0) continue;
                    double v = 0.0;
                    for (int b = 0; b < na; ++b) v += pi.prob(n, b) * q(n, b);
                    acc += p * v;
                }
                next(s, a) = mdp.reward(s, a) + mdp.discount() * acc;
            }
        const double change = (next - q).cwiseAbs().maxCoeff();
        q = next;
        if (change < tol) break;
    }
    return q;
}

/// TQ written directly from its definition.
inline Matrix backup(const bellman::FiniteMdp& mdp, const bellman::PolicyTable& pi, const Matrix& q) {
    Matrix out(mdp.num_states(), mdp.num_actions());
    for (int s = 0; s < mdp.num_states(); ++s)
        for (int a = 0; a < mdp.num_actions(); ++a) {
            double acc = 0.0;
            for (int n = 0; n < mdp.num_states(); ++n)
                for (int b = 0; b < mdp.num_actions(); ++b) acc += mdp.prob(s, a, n) * pi.prob(n, b) * q(n, b);
            out(s, a) = mdp.reward(s, a) + mdp.discount() * acc;
        }
    return out;
}

/// Pairs reachable from `from` with positive probability, found by brute-force
/// powers of the reachability relation (not BFS).
inline std::set<bellman::StateAction> reachable(const bellman::FiniteMdp& mdp, const bellman::PolicyTable& pi,
                                                const std::set<bellman::StateAction>& from) {
    std::set<bellman::StateAction> out = from;
    bool grew = true;
    while (grew) {
        grew = false;
        const auto snapshot = out;
        for (const auto& p : snapshot) {
            if (mdp.is_terminal(p.state)) continue;
            for (int n = 0; n < mdp.num_states(); ++n)
                for (int b = 0; b < mdp.num_actions(); ++b)
                    if (mdp.prob(p.state, p.action, n) > 0.0 && pi.prob(n, b) > 0.0)
                        grew |= out.insert({n, b}).second;
        }
    }
    return out;
}

/// Mean and standard error of a sample.
struct Estimate {
    double mean = 0.0;
    double stderr_ = 0.0;
};

inline Estimate estimate(const std::vector<double>& xs) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= static_cast<double>(xs.size() - 1);
    return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

}  // namespace oracle
