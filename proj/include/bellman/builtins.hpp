#pragma once

#include "bellman/mdp.hpp"
#include "bellman/rng.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace bellman {

/// An MDP paired with the target policy evaluated on it.
struct Environment {
    std::string name;
    FiniteMdp mdp;
    PolicyTable target;
};

namespace detail {

inline Vector uniform_over_nonterminal(const std::vector<bool>& terminal) {
    Vector d0 = Vector::Zero(static_cast<Eigen::Index>(terminal.size()));
    const auto live = std::count(terminal.begin(), terminal.end(), false);
    for (std::size_t s = 0; s < terminal.size(); ++s)
        if (!terminal[s]) d0(static_cast<Eigen::Index>(s)) = 1.0 / static_cast<double>(live);
    return d0;
}

inline std::optional<int> parse_positive(std::string_view text) {
    int value = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc{} || ptr != end || value <= 0) return std::nullopt;
    return value;
}

}  // namespace detail

/// s0 -a-> s1, s1 -a-> s1, zero reward everywhere; d0 concentrated on s0.
inline Environment two_state_environment(double gamma) {
    std::vector<double> p = {0.0, 1.0,   // (s0,a) -> s1
                             0.0, 1.0};  // (s1,a) -> s1
    Vector d0(2);
    d0 << 1.0, 0.0;
    FiniteMdp mdp(2, 1, std::move(p), Matrix::Zero(2, 1), gamma, std::move(d0), {false, false});
    return {"two_state", std::move(mdp), PolicyTable::deterministic(1, {0, 0})};
}

/// Deterministic line of `n` states with actions {left, right}. Entering the
/// last state pays 1 and ends the episode. Starts are uniform over live states.
inline FiniteMdp chain_mdp(int n, double gamma) {
    if (n < 2) throw std::invalid_argument("chain_mdp: need at least two states");
    const auto ns = static_cast<std::size_t>(n);
    std::vector<double> p(ns * 2 * ns, 0.0);
    Matrix r = Matrix::Zero(n, 2);
    std::vector<bool> terminal(ns, false);
    terminal[ns - 1] = true;
    for (int s = 0; s < n; ++s) {
        const int left = (s == n - 1) ? s : std::max(0, s - 1);
        const int right = (s == n - 1) ? s : s + 1;
        p[(static_cast<std::size_t>(s) * 2 + 0) * ns + static_cast<std::size_t>(left)] = 1.0;
        p[(static_cast<std::size_t>(s) * 2 + 1) * ns + static_cast<std::size_t>(right)] = 1.0;
        if (s == n - 2) r(s, 1) = 1.0;
    }
    Vector d0 = detail::uniform_over_nonterminal(terminal);
    return FiniteMdp(n, 2, std::move(p), std::move(r), gamma, std::move(d0), std::move(terminal));
}

/// Deterministic `width` x `height` grid with actions {up, down, left, right};
/// bumping a wall stays put. Entering the bottom-right goal pays 1 and ends the episode.
inline FiniteMdp gridworld_mdp(int width, int height, double gamma) {
    if (width < 1 || height < 1 || width * height < 2)
        throw std::invalid_argument("gridworld_mdp: need at least two cells");
    const int n = width * height;
    const auto ns = static_cast<std::size_t>(n);
    const int goal = n - 1;
    std::vector<double> p(ns * 4 * ns, 0.0);
    Matrix r = Matrix::Zero(n, 4);
    std::vector<bool> terminal(ns, false);
    terminal[static_cast<std::size_t>(goal)] = true;
    constexpr int dx[4] = {0, 0, -1, 1};
    constexpr int dy[4] = {-1, 1, 0, 0};
    for (int s = 0; s < n; ++s) {
        const int x = s % width;
        const int y = s / width;
        for (int a = 0; a < 4; ++a) {
            int next = s;
            if (s != goal) {
                const int nx = x + dx[a];
                const int ny = y + dy[a];
                if (nx >= 0 && nx < width && ny >= 0 && ny < height) next = ny * width + nx;
                if (next == goal) r(s, a) = 1.0;
            }
            p[(static_cast<std::size_t>(s) * 4 + static_cast<std::size_t>(a)) * ns + static_cast<std::size_t>(next)] = 1.0;
        }
    }
    Vector d0 = detail::uniform_over_nonterminal(terminal);
    return FiniteMdp(n, 4, std::move(p), std::move(r), gamma, std::move(d0), std::move(terminal));
}

/// Single-action cycle s -> s+1 (mod n). Every pair has exactly one successor
/// pair, distinct from itself when n >= 2.
inline FiniteMdp ring_mdp(int n, double gamma, const std::vector<double>& rewards = {}) {
    if (n < 2) throw std::invalid_argument("ring_mdp: need at least two states");
    const auto ns = static_cast<std::size_t>(n);
    std::vector<double> p(ns * ns, 0.0);
    Matrix r = Matrix::Zero(n, 1);
    for (int s = 0; s < n; ++s) {
        p[static_cast<std::size_t>(s) * ns + static_cast<std::size_t>((s + 1) % n)] = 1.0;
        if (!rewards.empty()) r(s, 0) = rewards.at(static_cast<std::size_t>(s));
    }
    return FiniteMdp(n, 1, std::move(p), std::move(r), gamma, Vector::Constant(n, 1.0 / n),
                     std::vector<bool>(ns, false));
}

/// Resolves `two_state`, `chain-N`, `gridworld-WxH` or `ring-N`. Chain and grid
/// targets are greedy optimal policies.
inline Environment builtin_environment(const std::string& name, double gamma) {
    if (name == "two_state") return two_state_environment(gamma);
    if (name.starts_with("chain-")) {
        const auto n = detail::parse_positive(std::string_view(name).substr(6));
        if (!n) throw std::invalid_argument("unknown builtin MDP: " + name);
        FiniteMdp mdp = chain_mdp(*n, gamma);
        PolicyTable target = optimal_policy(mdp);
        return {name, std::move(mdp), std::move(target)};
    }
    if (name.starts_with("gridworld-")) {
        const auto dims = std::string_view(name).substr(10);
        const auto x = dims.find('x');
        if (x == std::string_view::npos) throw std::invalid_argument("unknown builtin MDP: " + name);
        const auto w = detail::parse_positive(dims.substr(0, x));
        const auto h = detail::parse_positive(dims.substr(x + 1));
        if (!w || !h) throw std::invalid_argument("unknown builtin MDP: " + name);
        FiniteMdp mdp = gridworld_mdp(*w, *h, gamma);
        PolicyTable target = optimal_policy(mdp);
        return {name, std::move(mdp), std::move(target)};
    }
    if (name.starts_with("ring-")) {
        const auto n = detail::parse_positive(std::string_view(name).substr(5));
        if (!n) throw std::invalid_argument("unknown builtin MDP: " + name);
        FiniteMdp mdp = ring_mdp(*n, gamma);
        return {name, std::move(mdp), PolicyTable::deterministic(1, std::vector<int>(static_cast<std::size_t>(*n), 0))};
    }
    throw std::invalid_argument("unknown builtin MDP: " + name);
}

struct RandomMdpOptions {
    int max_successors = 0;  // 0 means every next state has positive probability
    double reward_low = -1.0;
    double reward_high = 1.0;
};

/// Random stochastic MDP without terminal states.
inline FiniteMdp random_mdp(int num_states, int num_actions, double gamma, Rng& rng,
                            const RandomMdpOptions& options = {}) {
    const auto ns = static_cast<std::size_t>(num_states);
    std::vector<double> p(ns * static_cast<std::size_t>(num_actions) * ns, 0.0);
    Matrix r(num_states, num_actions);
    std::vector<int> order(ns);
    for (int s = 0; s < num_states; ++s) {
        for (int a = 0; a < num_actions; ++a) {
            const auto row = (static_cast<std::size_t>(s) * static_cast<std::size_t>(num_actions) +
                              static_cast<std::size_t>(a)) * ns;
            std::iota(order.begin(), order.end(), 0);
            int support = num_states;
            if (options.max_successors > 0)
                support = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(std::min(options.max_successors, num_states))));
            // partial Fisher-Yates picks the support
            for (int i = 0; i < support; ++i) {
                const auto j = static_cast<std::size_t>(i) + rng.index(ns - static_cast<std::size_t>(i));
                std::swap(order[static_cast<std::size_t>(i)], order[j]);
            }
            double total = 0.0;
            for (int i = 0; i < support; ++i) {
                const double w = 0.05 + rng.uniform();
                p[row + static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = w;
                total += w;
            }
            for (std::size_t n = 0; n < ns; ++n) p[row + n] /= total;
            r(s, a) = rng.uniform(options.reward_low, options.reward_high);
        }
    }
    Vector d0(num_states);
    for (int s = 0; s < num_states; ++s) d0(s) = 0.05 + rng.uniform();
    d0 /= d0.sum();
    return FiniteMdp(num_states, num_actions, std::move(p), std::move(r), gamma, std::move(d0),
                     std::vector<bool>(ns, false));
}

inline PolicyTable random_policy(int num_states, int num_actions, Rng& rng, bool deterministic = false) {
    if (deterministic) {
        std::vector<int> actions(static_cast<std::size_t>(num_states));
        for (auto& a : actions) a = static_cast<int>(rng.index(static_cast<std::size_t>(num_actions)));
        return PolicyTable::deterministic(num_actions, actions);
    }
    Matrix probs(num_states, num_actions);
    for (int s = 0; s < num_states; ++s) {
        for (int a = 0; a < num_actions; ++a) probs(s, a) = 0.05 + rng.uniform();
        probs.row(s) /= probs.row(s).sum();
    }
    return PolicyTable(std::move(probs));
}

inline QTable random_q(int num_states, int num_actions, Rng& rng, double scale = 10.0) {
    QTable q(num_states, num_actions);
    for (int s = 0; s < num_states; ++s)
        for (int a = 0; a < num_actions; ++a) q(s, a) = rng.uniform(-scale, scale);
    return q;
}

}  // namespace bellman
