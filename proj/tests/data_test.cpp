#include "bellman/builtins.hpp"
#include "bellman/data.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

using namespace bellman;

TEST(NoisyPolicy, Endpoints) {
    const auto env = builtin_environment("gridworld-3x3", 0.9);
    EXPECT_EQ(noisy_policy(env.target, 0.0).probs(), env.target.probs());
    const auto uniform = noisy_policy(env.target, 1.0);
    EXPECT_LT((uniform.probs().array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(NoisyPolicy, MixtureArithmetic) {
    const auto target = PolicyTable::deterministic(4, {2});
    const auto mixed = noisy_policy(target, 0.5);
    EXPECT_DOUBLE_EQ(mixed.prob(0, 2), 0.625);
    for (int a : {0, 1, 3}) EXPECT_DOUBLE_EQ(mixed.prob(0, a), 0.125);
}

TEST(NoisyPolicy, RowsNormalizedAndRangeChecked) {
    Rng rng(1);
    const auto target = random_policy(6, 5, rng);
    for (int i = 0; i <= 20; ++i) {
        const auto p = noisy_policy(target, i / 20.0);
        EXPECT_LT((p.probs().rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    }
    EXPECT_THROW(noisy_policy(target, -0.1), std::invalid_argument);
    EXPECT_THROW(noisy_policy(target, 1.5), std::invalid_argument);
}

TEST(Collect, SeededAndReproducible) {
    const auto env = builtin_environment("gridworld-4x4", 0.9);
    const auto behavior = noisy_policy(env.target, 0.3);
    const auto a = collect(env.mdp, behavior, 20, 30, 7);
    const auto b = collect(env.mdp, behavior, 20, 30, 7);
    EXPECT_EQ(a, b);
    std::ostringstream sa, sb;
    write_dataset_csv(sa, a);
    write_dataset_csv(sb, b);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_NE(a, collect(env.mdp, behavior, 20, 30, 8));
    EXPECT_TRUE(validate(a, env.mdp).empty());
}

TEST(Collect, HorizonOneGivesSingleSteps) {
    const auto env = builtin_environment("chain-5", 0.9);
    const auto data = collect(env.mdp, PolicyTable::uniform(5, 2), 50, 1, 3);
    EXPECT_EQ(data.size(), 50U);
    EXPECT_EQ(data.num_episodes(), 50U);
    for (const auto& tr : data.transitions) EXPECT_EQ(tr.t, 0);
}

TEST(Collect, EpisodesEndAtTerminal) {
    const auto env = builtin_environment("chain-5", 0.9);
    const auto data = collect(env.mdp, env.target, 10, 100, 4);
    for (std::size_t k = 0; k < data.num_episodes(); ++k) {
        const auto last = data.episode_end(k) - 1;
        EXPECT_TRUE(data.transitions[last].terminal);
        for (std::size_t i = data.episode_begin(k); i < last; ++i) EXPECT_FALSE(data.transitions[i].terminal);
    }
}

TEST(Collect, VisitFrequenciesMatchStationaryDistribution) {
    // two-state chain with P(0->1) = p, P(1->0) = q; stationary mass on 0 is q / (p + q)
    const double p = 0.3, q = 0.6;
    FiniteMdp mdp(2, 1, {1.0 - p, p, q, 1.0 - q}, Matrix::Zero(2, 1), 0.9, Vector::Constant(2, 0.5), {false, false});
    const int steps = 100000;
    const auto data = collect(mdp, PolicyTable::uniform(2, 1), 1, steps, 5);
    double visits = 0.0;
    for (const auto& tr : data.transitions) visits += tr.s == 0;
    const double freq = visits / steps;
    const double pi0 = q / (p + q);
    // asymptotic variance of the occupation fraction for a two-state chain
    const double lambda = 1.0 - p - q;
    const double se = std::sqrt(pi0 * (1.0 - pi0) * (1.0 + lambda) / (1.0 - lambda) / steps);
    EXPECT_NEAR(freq, pi0, 3.0 * se);
}

TEST(CollectTransitions, ExactCountAndValidOffsets) {
    const auto env = builtin_environment("gridworld-3x3", 0.9);
    const auto data = collect_transitions(env.mdp, noisy_policy(env.target, 0.5), 137, 20, 6);
    EXPECT_EQ(data.size(), 137U);
    EXPECT_TRUE(validate(data, env.mdp).empty());
}

TEST(CollectTransitions, WholeEpisodesWhenNotTruncated) {
    const auto env = builtin_environment("chain-5", 0.9);
    const auto data = collect_transitions(env.mdp, noisy_policy(env.target, 0.5), 37, 40, 6, 0.0, false);
    EXPECT_GE(data.size(), 37U);
    EXPECT_TRUE(validate(data, env.mdp).empty());
    for (std::size_t k = 0; k < data.num_episodes(); ++k) {
        const auto last = data.episode_end(k) - 1;
        EXPECT_TRUE(data.transitions[last].terminal || data.transitions[last].t == 39);
    }
    EXPECT_LT(data.size() - (data.episode_end(data.num_episodes() - 1) - data.episode_begin(data.num_episodes() - 1)),
              37U);
}

TEST(Subsample, KeepsOrderWithoutReplacement) {
    const auto env = builtin_environment("gridworld-3x3", 0.9);
    const auto data = collect_transitions(env.mdp, PolicyTable::uniform(9, 4), 500, 20, 7);
    const auto sub = subsample(data, 100, 8);
    EXPECT_EQ(sub.size(), 100U);
    EXPECT_EQ(sub, subsample(data, 100, 8));
    EXPECT_THROW(subsample(data, 501, 8), std::invalid_argument);
}

TEST(MissingPairs, TwoStateExample) {
    const auto env = two_state_environment(0.9);
    Dataset data;
    data.transitions = {{0, 0, 0.0, 1, false, 0}};
    data.episode_offsets = {0};
    EXPECT_EQ(missing_relevant_pairs(data, env.mdp, env.target), (std::vector<StateAction>{{1, 0}}));
    data.transitions.push_back({1, 0, 0.0, 1, false, 1});
    EXPECT_TRUE(missing_relevant_pairs(data, env.mdp, env.target).empty());
}

TEST(MissingPairs, CompleteDatasetHasNone) {
    const auto env = builtin_environment("gridworld-3x3", 0.9);
    const auto data = collect(env.mdp, PolicyTable::uniform(9, 4), 200, 50, 9);
    EXPECT_TRUE(missing_relevant_pairs(data, env.mdp, env.target).empty());
}

TEST(MissingPairs, MatchesReachabilityAndOccupancySupport) {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const int ns = 2 + static_cast<int>(rng.index(8));
        const int na = 1 + static_cast<int>(rng.index(3));
        const auto mdp = random_mdp(ns, na, 0.5, rng, {.max_successors = 1 + static_cast<int>(rng.index(2))});
        const auto pi = random_policy(ns, na, rng, trial % 2 == 0);
        const auto data = collect(mdp, PolicyTable::uniform(ns, na), 1, 1 + static_cast<int>(rng.index(4)),
                                  rng.next_seed());
        const auto missing = missing_relevant_pairs(data, mdp, pi);

        const auto present = unique_pairs(data);
        const std::set<StateAction> in_data(present.begin(), present.end());
        std::set<StateAction> expected;
        for (const auto& p : oracle::reachable(mdp, pi, in_data))
            if (!in_data.contains(p)) expected.insert(p);
        EXPECT_EQ(std::set<StateAction>(missing.begin(), missing.end()), expected);

        // every reported pair carries positive occupancy from some dataset pair
        const auto occ = conditional_occupancy(mdp, pi);
        for (const auto& m : missing) {
            double best = 0.0;
            for (const auto& p : present)
                best = std::max(best, occ.conditional(p.state, p.action, m.state, m.action));
            EXPECT_GT(best, 1e-12);
        }
    }
}

TEST(MissingPairs, TerminalPairsAreNotCounted) {
    const auto env = builtin_environment("chain-4", 0.9);
    const auto data = collect(env.mdp, env.target, 5, 10, 11);
    EXPECT_TRUE(missing_relevant_pairs(data, env.mdp, env.target).empty());
    const auto gap = remove_pairs(data, {{2, 1}});
    EXPECT_EQ(missing_relevant_pairs(gap, env.mdp, env.target), (std::vector<StateAction>{{2, 1}}));
}

TEST(SingleTrajectory, AugmentationFormula) {
    Dataset traj;
    for (int t = 0; t < 1000; ++t) traj.transitions.push_back({0, 0, 1.0, 0, t == 999, t});
    traj.episode_offsets = {0};
    const auto out = single_trajectory_prepare(traj, 0.99);
    EXPECT_NEAR(out.transitions.back().r, 1.0 + 0.99 * 100.0, 1e-9);
    for (std::size_t i = 0; i + 1 < out.size(); ++i) EXPECT_EQ(out.transitions[i].r, 1.0);

    Dataset zero = traj;
    for (auto& tr : zero.transitions) tr.r = 0.0;
    EXPECT_EQ(single_trajectory_prepare(zero, 0.99), zero);

    Dataset one;
    one.transitions = {{0, 0, 2.0, 0, true, 0}};
    one.episode_offsets = {0};
    EXPECT_DOUBLE_EQ(single_trajectory_prepare(one, 0.5).transitions[0].r, 4.0);
    EXPECT_THROW(single_trajectory_prepare(Dataset{}, 0.5), std::invalid_argument);
}

TEST(Returns, DiscountedWithinEpisodes) {
    Dataset data;
    data.transitions = {{0, 0, 1.0, 0, false, 0}, {0, 0, 2.0, 0, true, 1}, {0, 0, 4.0, 0, true, 0}};
    data.episode_offsets = {0, 2};
    const auto g = discounted_returns(data, 0.5);
    EXPECT_EQ(g, (std::vector<double>{2.0, 2.0, 4.0}));
}

TEST(Persistence, RoundTripWithSidecar) {
    const auto env = builtin_environment("gridworld-3x3", 0.9);
    const auto data = collect(env.mdp, noisy_policy(env.target, 0.2), 5, 10, 12, 0.2);
    const auto stem = (std::filesystem::temp_directory_path() / "bellman_dataset_roundtrip").string();
    save_dataset(data, env.mdp, stem);
    const auto back = load_dataset(stem, env.mdp);
    EXPECT_EQ(back, data);
    EXPECT_THROW(load_dataset(stem, builtin_environment("gridworld-3x4", 0.9).mdp), FormatError);
    std::filesystem::remove(stem + ".csv");
    std::filesystem::remove(stem + ".json");
}

TEST(Persistence, RejectsMalformedCsv) {
    std::istringstream bad_header("a,b,c\n");
    EXPECT_THROW(read_dataset_csv(bad_header), FormatError);
    std::istringstream bad_row("episode,t,s,a,r,s_next,terminal\n0,0,x,0,1,1,0\n");
    EXPECT_THROW(read_dataset_csv(bad_row), FormatError);
}
