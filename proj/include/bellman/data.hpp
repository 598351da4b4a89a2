#pragma once

#include "bellman/mdp.hpp"
#include "bellman/mdp_io.hpp"
#include "bellman/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bellman {

/// One step (s, a, r, s'). `terminal` marks a transition into a terminal state,
/// after which the episode ends and the successor value is not bootstrapped.
struct Transition {
    int s = 0;
    int a = 0;
    double r = 0.0;
    int s_next = 0;
    bool terminal = false;
    int t = 0;

    StateAction pair() const { return {s, a}; }
    friend bool operator==(const Transition&, const Transition&) = default;
};

/// Ordered transitions; episode k spans [episode_offsets[k], episode_offsets[k+1]).
struct Dataset {
    std::vector<Transition> transitions;
    std::vector<std::size_t> episode_offsets;
    double noise_level = 0.0;
    std::uint64_t seed = 0;

    std::size_t size() const { return transitions.size(); }
    bool empty() const { return transitions.empty(); }
    std::size_t num_episodes() const { return episode_offsets.size(); }

    std::size_t episode_begin(std::size_t k) const { return episode_offsets[k]; }
    std::size_t episode_end(std::size_t k) const {
        return k + 1 < episode_offsets.size() ? episode_offsets[k + 1] : transitions.size();
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Checks that the offsets partition the sequence and indices are within the MDP.
inline std::vector<std::string> validate(const Dataset& data, const FiniteMdp& mdp) {
    std::vector<std::string> report;
    if (!data.empty()) {
        if (data.episode_offsets.empty() || data.episode_offsets.front() != 0)
            report.push_back("episode offsets must start at 0");
        for (std::size_t k = 1; k < data.episode_offsets.size(); ++k)
            if (data.episode_offsets[k] <= data.episode_offsets[k - 1] || data.episode_offsets[k] >= data.size())
                report.push_back("episode offsets must be strictly increasing and in range");
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& tr = data.transitions[i];
        if (!mdp.contains(tr.pair()) || tr.s_next < 0 || tr.s_next >= mdp.num_states())
            report.push_back("transition " + std::to_string(i) + " indexes outside the MDP");
    }
    if (!(data.noise_level >= 0.0 && data.noise_level <= 1.0)) report.push_back("noise level outside [0,1]");
    return report;
}

/// Distinct (s,a) pairs in first-seen order.
inline std::vector<StateAction> unique_pairs(const Dataset& data) {
    std::set<StateAction> seen;
    std::vector<StateAction> pairs;
    for (const auto& tr : data.transitions)
        if (seen.insert(tr.pair()).second) pairs.push_back(tr.pair());
    return pairs;
}

/// Behavior policy pi_b(a|s) = (1 - n) pi_t(a|s) + n / |A|.
inline PolicyTable noisy_policy(const PolicyTable& target, double noise) {
    if (!(noise >= 0.0 && noise <= 1.0)) throw std::invalid_argument("noisy_policy: noise level must lie in [0,1]");
    const double uniform = 1.0 / target.num_actions();
    return PolicyTable(Matrix((1.0 - noise) * target.probs().array() + noise * uniform));
}

namespace detail {

inline int sample_state(Rng& rng, const Vector& dist) {
    return static_cast<int>(rng.categorical(std::span<const double>(dist.data(), static_cast<std::size_t>(dist.size()))));
}

inline int sample_action(Rng& rng, const PolicyTable& policy, int s) {
    std::vector<double> w(static_cast<std::size_t>(policy.num_actions()));
    for (int a = 0; a < policy.num_actions(); ++a) w[static_cast<std::size_t>(a)] = policy.prob(s, a);
    return static_cast<int>(rng.categorical(w));
}

}  // namespace detail

/// Seeded rollouts from d0 under `behavior`; each episode stops at a terminal
/// state or after `horizon` steps.
inline Dataset collect(const FiniteMdp& mdp, const PolicyTable& behavior, int episodes, int horizon,
                       std::uint64_t seed, double noise_level = 0.0) {
    if (episodes <= 0 || horizon <= 0) throw std::invalid_argument("collect: episodes and horizon must be positive");
    Rng rng(seed);
    Dataset data;
    data.seed = seed;
    data.noise_level = noise_level;
    for (int e = 0; e < episodes; ++e) {
        data.episode_offsets.push_back(data.transitions.size());
        int s = detail::sample_state(rng, mdp.initial_dist());
        for (int t = 0; t < horizon; ++t) {
            const int a = detail::sample_action(rng, behavior, s);
            const auto row = mdp.next_state_dist(s, a);
            const int next = static_cast<int>(rng.categorical(row));
            const bool done = mdp.is_terminal(next);
            data.transitions.push_back({s, a, mdp.reward(s, a), next, done, t});
            if (done) break;
            s = next;
        }
    }
    return data;
}

/// Collects whole episodes until at least `count` transitions exist. With
/// `truncate` the last episode is cut so exactly `count` remain.
inline Dataset collect_transitions(const FiniteMdp& mdp, const PolicyTable& behavior, std::size_t count, int horizon,
                                   std::uint64_t seed, double noise_level = 0.0, bool truncate = true) {
    if (count == 0) throw std::invalid_argument("collect_transitions: count must be positive");
    Rng rng(seed);
    Dataset data;
    data.seed = seed;
    data.noise_level = noise_level;
    while (data.size() < count) {
        Dataset episode = collect(mdp, behavior, 1, horizon, rng.next_seed(), noise_level);
        data.episode_offsets.push_back(data.size());
        for (const auto& tr : episode.transitions) {
            if (truncate && data.size() == count) break;
            data.transitions.push_back(tr);
        }
    }
    return data;
}

/// Uniform subsample of `count` transitions without replacement, original order kept.
/// Episode structure is not preserved; the result is one segment.
inline Dataset subsample(const Dataset& data, std::size_t count, std::uint64_t seed) {
    if (count > data.size()) throw std::invalid_argument("subsample: count exceeds dataset size");
    Rng rng(seed);
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    Dataset out;
    out.seed = seed;
    out.noise_level = data.noise_level;
    for (auto i : idx) out.transitions.push_back(data.transitions[i]);
    if (!out.empty()) out.episode_offsets = {0};
    return out;
}

/// Drops every transition whose (s,a) is in `pairs`; episodes that become empty disappear.
inline Dataset remove_pairs(const Dataset& data, const std::vector<StateAction>& pairs) {
    const std::set<StateAction> drop(pairs.begin(), pairs.end());
    Dataset out;
    out.seed = data.seed;
    out.noise_level = data.noise_level;
    for (std::size_t k = 0; k < data.num_episodes(); ++k) {
        bool started = false;
        for (std::size_t i = data.episode_begin(k); i < data.episode_end(k); ++i) {
            if (drop.contains(data.transitions[i].pair())) continue;
            if (!started) {
                out.episode_offsets.push_back(out.size());
                started = true;
            }
            out.transitions.push_back(data.transitions[i]);
        }
    }
    return out;
}

/// Pairs outside the dataset with positive conditional occupancy from some
/// dataset pair under `policy`.
///
/// The support of d(.|s,a) is the set of pairs reachable from (s,a) through
/// edges P(s'|s,a) > 0, pi(a'|s') > 0, so it is computed by graph search rather
/// than by thresholding a numeric occupancy. Terminal-state pairs are excluded:
/// their value is pinned at zero by the termination rule.
inline std::vector<StateAction> missing_relevant_pairs(const Dataset& data, const FiniteMdp& mdp,
                                                       const PolicyTable& policy) {
    const int na = mdp.num_actions();
    std::vector<char> in_data(static_cast<std::size_t>(mdp.num_pairs()), 0);
    std::vector<char> reached(static_cast<std::size_t>(mdp.num_pairs()), 0);
    std::deque<int> frontier;
    for (const auto& p : unique_pairs(data)) {
        const int idx = mdp.pair_index(p.state, p.action);
        in_data[static_cast<std::size_t>(idx)] = 1;
        reached[static_cast<std::size_t>(idx)] = 1;
        frontier.push_back(idx);
    }
    while (!frontier.empty()) {
        const auto [s, a] = mdp.pair_at(frontier.front());
        frontier.pop_front();
        if (mdp.is_terminal(s)) continue;
        const auto row = mdp.next_state_dist(s, a);
        for (int n = 0; n < mdp.num_states(); ++n) {
            if (row[static_cast<std::size_t>(n)] <= 0.0) continue;
            for (int b = 0; b < na; ++b) {
                if (policy.prob(n, b) <= 0.0) continue;
                const auto idx = static_cast<std::size_t>(mdp.pair_index(n, b));
                if (!reached[idx]) {
                    reached[idx] = 1;
                    frontier.push_back(static_cast<int>(idx));
                }
            }
        }
    }
    std::vector<StateAction> missing;
    for (int idx = 0; idx < mdp.num_pairs(); ++idx) {
        const auto p = mdp.pair_at(idx);
        if (reached[static_cast<std::size_t>(idx)] && !in_data[static_cast<std::size_t>(idx)] &&
            !mdp.is_terminal(p.state))
            missing.push_back(p);
    }
    return missing;
}

/// Adds gamma / ((1 - gamma) T) * sum_i r_i to the final reward of a single
/// complete episode of length T.
inline Dataset single_trajectory_prepare(const Dataset& trajectory, double gamma) {
    if (trajectory.empty()) throw std::invalid_argument("single_trajectory_prepare: empty trajectory");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("single_trajectory_prepare: gamma must lie in [0,1)");
    Dataset out = trajectory;
    const auto length = static_cast<double>(out.size());
    double total = 0.0;
    for (const auto& tr : out.transitions) total += tr.r;
    out.transitions.back().r += gamma / ((1.0 - gamma) * length) * total;
    return out;
}

/// Discounted return-to-go sum_{k>=t} gamma^(k-t) r_k within each episode.
inline std::vector<double> discounted_returns(const Dataset& data, double gamma) {
    std::vector<double> returns(data.size(), 0.0);
    for (std::size_t k = 0; k < data.num_episodes(); ++k) {
        double g = 0.0;
        for (std::size_t i = data.episode_end(k); i-- > data.episode_begin(k);) {
            g = data.transitions[i].r + gamma * g;
            returns[i] = g;
        }
    }
    return returns;
}

// Persistence: columnar CSV plus a JSON sidecar.

inline void write_dataset_csv(std::ostream& out, const Dataset& data) {
    out << "episode,t,s,a,r,s_next,terminal\n";
    out << std::setprecision(17);
    for (std::size_t k = 0; k < data.num_episodes(); ++k) {
        for (std::size_t i = data.episode_begin(k); i < data.episode_end(k); ++i) {
            const auto& tr = data.transitions[i];
            out << k << ',' << tr.t << ',' << tr.s << ',' << tr.a << ',' << tr.r << ',' << tr.s_next << ','
                << (tr.terminal ? 1 : 0) << '\n';
        }
    }
}

inline nlohmann::json dataset_sidecar(const Dataset& data, const FiniteMdp& mdp) {
    return {{"seed", data.seed},
            {"noise_level", data.noise_level},
            {"mdp_hash", mdp_hash(mdp)},
            {"transitions", data.size()},
            {"episodes", data.num_episodes()}};
}

/// Writes `<stem>.csv` and `<stem>.json`.
inline void save_dataset(const Dataset& data, const FiniteMdp& mdp, const std::string& stem) {
    std::ofstream csv(stem + ".csv");
    std::ofstream side(stem + ".json");
    if (!csv || !side) throw FormatError("cannot write dataset " + stem);
    write_dataset_csv(csv, data);
    side << dataset_sidecar(data, mdp).dump(2) << '\n';
}

inline Dataset read_dataset_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "episode,t,s,a,r,s_next,terminal")
        throw FormatError("dataset CSV: missing or unexpected header");
    Dataset data;
    long last_episode = -1;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string field;
        std::vector<std::string> cols;
        while (std::getline(row, field, ',')) cols.push_back(field);
        if (cols.size() != 7) throw FormatError("dataset CSV line " + std::to_string(line_no) + ": expected 7 columns");
        try {
            const long episode = std::stol(cols[0]);
            Transition tr{std::stoi(cols[2]), std::stoi(cols[3]), std::stod(cols[4]), std::stoi(cols[5]),
                          cols[6] == "1", std::stoi(cols[1])};
            if (episode != last_episode) {
                if (episode < last_episode) throw FormatError("dataset CSV: episodes out of order");
                data.episode_offsets.push_back(data.size());
                last_episode = episode;
            }
            data.transitions.push_back(tr);
        } catch (const std::logic_error&) {
            throw FormatError("dataset CSV line " + std::to_string(line_no) + ": malformed number");
        }
    }
    return data;
}

/// Reads `<stem>.csv` and `<stem>.json`; the sidecar hash must match `mdp`.
inline Dataset load_dataset(const std::string& stem, const FiniteMdp& mdp) {
    std::ifstream csv(stem + ".csv");
    std::ifstream side(stem + ".json");
    if (!csv || !side) throw FormatError("cannot read dataset " + stem);
    Dataset data = read_dataset_csv(csv);
    nlohmann::json meta;
    try {
        side >> meta;
        data.seed = meta.at("seed").get<std::uint64_t>();
        data.noise_level = meta.at("noise_level").get<double>();
        if (meta.at("mdp_hash").get<std::string>() != mdp_hash(mdp))
            throw FormatError("dataset " + stem + " was collected on a different MDP");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("dataset sidecar " + stem + ".json: " + e.what());
    }
    const auto report = validate(data, mdp);
    if (!report.empty()) throw FormatError("dataset " + stem + ": " + report.front());
    return data;
}

}  // namespace bellman
