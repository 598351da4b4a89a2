#pragma once

#include "bellman/mdp.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

namespace bellman {

/// Raised when a serialized model cannot be read or fails validation.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// MDP as a self-describing JSON document:
///
///   {"format": "finite-mdp", "version": 1, "num_states": S, "num_actions": A,
///    "discount": g, "transition": [[[P(s'|s,a) ...] per a] per s],
///    "reward": [[r(s,a) ...] per s], "initial_dist": [...], "terminal": [bool ...]}
inline nlohmann::json to_json(const FiniteMdp& mdp) {
    nlohmann::json doc;
    doc["format"] = "finite-mdp";
    doc["version"] = 1;
    doc["num_states"] = mdp.num_states();
    doc["num_actions"] = mdp.num_actions();
    doc["discount"] = mdp.discount();
    auto& transition = doc["transition"] = nlohmann::json::array();
    auto& reward = doc["reward"] = nlohmann::json::array();
    for (int s = 0; s < mdp.num_states(); ++s) {
        nlohmann::json per_action = nlohmann::json::array();
        nlohmann::json rewards = nlohmann::json::array();
        for (int a = 0; a < mdp.num_actions(); ++a) {
            const auto row = mdp.next_state_dist(s, a);
            per_action.push_back(std::vector<double>(row.begin(), row.end()));
            rewards.push_back(mdp.reward(s, a));
        }
        transition.push_back(std::move(per_action));
        reward.push_back(std::move(rewards));
    }
    const auto& d0 = mdp.initial_dist();
    doc["initial_dist"] = std::vector<double>(d0.data(), d0.data() + d0.size());
    doc["terminal"] = mdp.terminal_mask();
    return doc;
}

/// Parses a document produced by to_json and re-runs validate(); any violation
/// raises FormatError.
inline FiniteMdp mdp_from_json(const nlohmann::json& doc) {
    try {
        if (doc.value("format", std::string{}) != "finite-mdp") throw FormatError("not a finite-mdp document");
        const int ns = doc.at("num_states").get<int>();
        const int na = doc.at("num_actions").get<int>();
        if (ns <= 0 || na <= 0) throw FormatError("state and action counts must be positive");
        const auto& transition = doc.at("transition");
        const auto& reward = doc.at("reward");
        if (transition.size() != static_cast<std::size_t>(ns) || reward.size() != static_cast<std::size_t>(ns))
            throw FormatError("transition/reward outer dimension must equal num_states");
        std::vector<double> p;
        p.reserve(static_cast<std::size_t>(ns) * static_cast<std::size_t>(na) * static_cast<std::size_t>(ns));
        Matrix r(ns, na);
        for (int s = 0; s < ns; ++s) {
            const auto& rows = transition[static_cast<std::size_t>(s)];
            const auto& rs = reward[static_cast<std::size_t>(s)];
            if (rows.size() != static_cast<std::size_t>(na) || rs.size() != static_cast<std::size_t>(na))
                throw FormatError("transition/reward action dimension must equal num_actions");
            for (int a = 0; a < na; ++a) {
                const auto row = rows[static_cast<std::size_t>(a)].get<std::vector<double>>();
                if (row.size() != static_cast<std::size_t>(ns))
                    throw FormatError("transition row length must equal num_states");
                p.insert(p.end(), row.begin(), row.end());
                r(s, a) = rs[static_cast<std::size_t>(a)].get<double>();
            }
        }
        const auto d0v = doc.at("initial_dist").get<std::vector<double>>();
        if (d0v.size() != static_cast<std::size_t>(ns)) throw FormatError("initial_dist length must equal num_states");
        Vector d0 = Eigen::Map<const Vector>(d0v.data(), ns);
        std::vector<bool> terminal(static_cast<std::size_t>(ns), false);
        if (doc.contains("terminal")) {
            terminal = doc.at("terminal").get<std::vector<bool>>();
            if (terminal.size() != static_cast<std::size_t>(ns)) throw FormatError("terminal length must equal num_states");
        }
        FiniteMdp mdp(ns, na, std::move(p), std::move(r), doc.at("discount").get<double>(), std::move(d0),
                      std::move(terminal));
        const auto report = validate(mdp);
        if (!report.empty()) throw FormatError("invalid MDP: " + report.front());
        return mdp;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed MDP document: ") + e.what());
    }
}

inline void save_mdp(const FiniteMdp& mdp, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out << to_json(mdp).dump(2) << '\n';
}

inline FiniteMdp load_mdp(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    return mdp_from_json(doc);
}

/// 64-bit FNV-1a of a byte string.
inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t value) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << value;
    return os.str();
}

/// Stable content hash of the model (FNV-1a over the compact JSON form).
inline std::string mdp_hash(const FiniteMdp& mdp) { return hex64(fnv1a(to_json(mdp).dump())); }

}  // namespace bellman
