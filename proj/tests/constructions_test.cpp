#include "bellman/builtins.hpp"
#include "bellman/constructions.hpp"
#include "bellman/learners.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace bellman;

TEST(TwoStateMdp, ValuesAndOccupancy) {
    const auto env = two_state_mdp(0.99);
    EXPECT_TRUE(validate(env.mdp).empty());
    const QTable q = exact_q(env.mdp, env.target);
    EXPECT_EQ(q(0, 0), 0.0);
    EXPECT_EQ(q(1, 0), 0.0);
    const auto occ = conditional_occupancy(env.mdp, env.target);
    EXPECT_NEAR(occ.conditional(0, 0, 0, 0), 0.01, 1e-12);
    EXPECT_NEAR(occ.conditional(0, 0, 1, 0), 0.99, 1e-12);
    EXPECT_THROW(two_state_mdp(0.0), std::invalid_argument);
}

TEST(HiddenBias, ExampleValues) {
    auto inst = hidden_bias_instance(5.0, 0.99);
    EXPECT_DOUBLE_EQ(inst.q(1, 0), 5.0 / 0.99);
    EXPECT_TRUE(inst.certificate.passed);
    EXPECT_NEAR(inst.certificate.value("bellman_error"), 0.0, 1e-12);
    EXPECT_NEAR(inst.certificate.value("value_error"), 5.0, 1e-12);

    inst = hidden_bias_instance(1.0, 0.5);
    EXPECT_EQ(inst.q(1, 0), 2.0);
    EXPECT_EQ(inst.certificate.value("bellman_error"), 0.0);
    EXPECT_EQ(inst.certificate.value("value_error"), 1.0);
    ASSERT_EQ(inst.data.size(), 1U);
    EXPECT_EQ(inst.data.transitions[0], (Transition{0, 0, 0.0, 1, false, 0}));
}

TEST(HiddenBias, DatasetMsbeIsZero) {
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        const double c = rng.uniform(0.1, 10.0), gamma = rng.uniform(0.1, 0.99);
        const auto inst = hidden_bias_instance(c, gamma);
        const auto env = two_state_mdp(gamma);
        const auto m = empirical_metrics(inst.q, inst.data, env.target, exact_q(env.mdp, env.target), 1.0, gamma);
        EXPECT_NEAR(m.msbe, 0.0, 1e-20);
    }
}

TEST(VisibleError, ExampleValues) {
    auto inst = visible_error_instance(5.0, 0.99);
    EXPECT_TRUE(inst.certificate.passed);
    EXPECT_NEAR(inst.certificate.value("bellman_error"), 5.0, 1e-12);
    EXPECT_EQ(inst.certificate.value("value_error"), 0.0);
    inst = visible_error_instance(1.0, 0.5);
    EXPECT_EQ(inst.q(1, 0), -2.0);
    EXPECT_EQ(inst.certificate.value("bellman_error"), 1.0);
    const auto env = two_state_mdp(0.5);
    const auto m = empirical_metrics(inst.q, inst.data, env.target, exact_q(env.mdp, env.target), 1.0, 0.5);
    EXPECT_DOUBLE_EQ(m.msbe, 1.0);
}

TEST(VisibleError, DatasetMsbeIsCSquared) {
    const double c = 3.0, gamma = 0.7;
    const auto inst = visible_error_instance(c, gamma);
    const auto env = two_state_mdp(gamma);
    const auto m = empirical_metrics(inst.q, inst.data, env.target, exact_q(env.mdp, env.target), 1.0, gamma);
    EXPECT_NEAR(m.msbe, c * c, 1e-12);
}

TEST(ToyInstances, RejectNonPositiveC) {
    EXPECT_THROW(hidden_bias_instance(0.0, 0.9), std::invalid_argument);
    EXPECT_THROW(visible_error_instance(-1.0, 0.9), std::invalid_argument);
}

TEST(InverseRelation, HandComputedValuesWithoutSlack) {
    const double gamma = 0.5, c = 1.0;
    Rng rng(2);
    const auto mdp = ring_mdp(4, gamma);
    const auto pi = PolicyTable::deterministic(1, {0, 0, 0, 0});
    const auto pair = inverse_relation_pair(mdp, pi, c, gamma, rng, 0.0);
    EXPECT_DOUBLE_EQ(pair.k, 2.0);
    const auto e1 = error_table(mdp, pi, pair.q1);
    EXPECT_LT((e1.value.array().abs() - 4.0).abs().maxCoeff(), 1e-12);
    EXPECT_LT((e1.bellman.array().abs() - 2.0).abs().maxCoeff(), 1e-12);
    EXPECT_DOUBLE_EQ(pair.q2.magnitude, 3.0);
    const auto e2 = error_table(mdp, pi, pair.q2.realized());
    EXPECT_LT((e2.value.array().abs() - 3.0).abs().maxCoeff(), 1e-12);
    EXPECT_LT((pair.expected_abs_bellman_q2.array() - 3.0).abs().maxCoeff(), 1e-12);
    // the claimed strict margins are exactly zero here
    EXPECT_NEAR(pair.certificate.value("value_margin"), 0.0, 1e-12);
    EXPECT_NEAR(pair.certificate.value("bellman_margin"), 0.0, 1e-12);
    EXPECT_FALSE(pair.certificate.passed);
}

TEST(InverseRelation, PassesWithSlackOnRandomDraws) {
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
        const double c = rng.uniform(0.1, 10.0), gamma = rng.uniform(0.1, 0.99);
        const int n = 2 + static_cast<int>(rng.index(6));
        const auto pair = inverse_relation_pair(ring_mdp(n, gamma), PolicyTable::deterministic(1, std::vector<int>(static_cast<std::size_t>(n), 0)),
                                                c, gamma, rng);
        EXPECT_TRUE(pair.certificate.passed) << "C=" << c << " gamma=" << gamma;
        EXPECT_GT(pair.certificate.value("value_margin"), 0.0);
        EXPECT_GT(pair.certificate.value("bellman_margin"), 0.0);
    }
}

TEST(InverseRelation, HighDiscountChain) {
    Rng rng(4);
    const auto env = builtin_environment("ring-6", 0.99);
    const auto pair = inverse_relation_pair(env.mdp, env.target, 1.0, 0.99, rng);
    EXPECT_TRUE(pair.certificate.passed);
}

TEST(InverseRelation, ExpectationMatchesSignAverageOnStochasticMdp) {
    // Monte-Carlo over sign tables, compared with the enumerated expectation
    Rng rng(5);
    const double gamma = 0.7;
    const auto mdp = random_mdp(3, 2, gamma, rng);
    const auto pi = random_policy(3, 2, rng);
    const auto pair = inverse_relation_pair(mdp, pi, 1.0, gamma, rng);
    EXPECT_EQ(pair.monte_carlo_stderr, 0.0);
    const int draws = 20000;
    std::vector<std::vector<double>> samples(6);
    for (int d = 0; d < draws; ++d) {
        Matrix signs(3, 2);
        for (int s = 0; s < 3; ++s)
            for (int a = 0; a < 2; ++a) signs(s, a) = rng.coin() ? 1.0 : -1.0;
        const Matrix eps = bellman_error_table(mdp, pi, QTable(Matrix(pair.q2.base.values() + pair.q2.magnitude * signs)));
        for (int i = 0; i < 6; ++i) samples[static_cast<std::size_t>(i)].push_back(std::abs(eps(i / 2, i % 2)));
    }
    for (int i = 0; i < 6; ++i) {
        const auto est = oracle::estimate(samples[static_cast<std::size_t>(i)]);
        EXPECT_NEAR(pair.expected_abs_bellman_q2(i / 2, i % 2), est.mean, 4.0 * est.stderr_ + 1e-12);
    }
}

TEST(InverseRelation, MonteCarloFallbackForWideSupports) {
    // one dominant weight: |x| = 1 + sigma_0 * (small sum), whose mean is exactly 1
    std::vector<double> wide(24, 1e-3), narrow(12, 1e-3);
    wide[0] = narrow[0] = 1.0;
    Rng rng(6);
    const auto [mc_mean, mc_se] = expected_abs_signed_sum(wide, rng);
    EXPECT_GT(mc_se, 0.0);
    EXPECT_NEAR(mc_mean, 1.0, 4.0 * mc_se);
    const auto [exact_mean, exact_se] = expected_abs_signed_sum(narrow, rng);
    EXPECT_EQ(exact_se, 0.0);
    EXPECT_NEAR(exact_mean, 1.0, 1e-12);
}

TEST(InverseRelation, RejectsNonPositiveC) {
    Rng rng(8);
    const auto env = builtin_environment("ring-3", 0.5);
    EXPECT_THROW(inverse_relation_pair(env.mdp, env.target, 0.0, 0.5, rng), std::invalid_argument);
}

TEST(BoundEquality, RatiosAtGammaPointNineNine) {
    const auto [upper, lower] = bound_equality_instances(1.0, 0.99);
    EXPECT_TRUE(upper.certificate.passed);
    EXPECT_TRUE(lower.certificate.passed);
    EXPECT_NEAR(upper.certificate.value("max_abs_value_error"), 100.0, 1e-9);
    EXPECT_NEAR(upper.certificate.value("max_abs_bellman_error"), 1.0, 1e-12);
    EXPECT_NEAR(lower.certificate.value("max_abs_value_error"), 1.0 / 1.99, 1e-12);
    EXPECT_NEAR(lower.certificate.value("max_abs_bellman_error"), 1.0, 1e-12);
}

TEST(BoundEquality, ClosedFormRatios) {
    const auto [upper, lower] = bound_equality_instances(2.0, 0.5);
    EXPECT_NEAR(upper.certificate.value("ratio"), 2.0, 1e-12);
    EXPECT_NEAR(lower.certificate.value("ratio"), 2.0 / 3.0, 1e-12);
}

TEST(BoundEquality, BracketRandomRatios) {
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
        const double gamma = rng.uniform(0.1, 0.99);
        const auto [upper, lower] = bound_equality_instances(1.0, gamma);
        const int ns = 1 + static_cast<int>(rng.index(10));
        const int na = 1 + static_cast<int>(rng.index(3));
        const auto mdp = random_mdp(ns, na, gamma, rng);
        const auto pi = random_policy(ns, na, rng);
        const auto e = error_table(mdp, pi, random_q(ns, na, rng));
        const double ratio = e.value.cwiseAbs().maxCoeff() / e.bellman.cwiseAbs().maxCoeff();
        EXPECT_GE(ratio, lower.certificate.value("ratio") - 1e-9);
        EXPECT_LE(ratio, upper.certificate.value("ratio") + 1e-9);
    }
}

TEST(AnchoredZeroBellmanValue, RecoversHiddenBiasInstance) {
    const double gamma = 0.9;
    const auto env = two_state_mdp(gamma);
    const auto data = hidden_bias_instance(5.0, gamma).data;
    const auto [q, cert] = corollary1_value(env.mdp, env.target, data, 5.0, {0, 0});
    EXPECT_TRUE(cert.passed);
    EXPECT_NEAR(q(0, 0), 5.0, 1e-12);
    EXPECT_NEAR(q(1, 0), 5.0 / gamma, 1e-12);
}

TEST(AnchoredZeroBellmanValue, ChainMissingLastPair) {
    const double gamma = 0.9;
    const auto env = builtin_environment("chain-5", gamma);
    auto data = collect(env.mdp, env.target, 20, 10, 1);
    data = remove_pairs(data, {{3, 1}});
    ASSERT_EQ(missing_relevant_pairs(data, env.mdp, env.target), (std::vector<StateAction>{{3, 1}}));
    for (const auto& anchor : unique_pairs(data)) {
        const auto [q, cert] = corollary1_value(env.mdp, env.target, data, 3.0, anchor);
        EXPECT_TRUE(cert.passed);
        EXPECT_NEAR(q.at(anchor) - exact_q(env.mdp, env.target).at(anchor), 3.0, 1e-9);
        const Matrix eps = bellman_error_table(env.mdp, env.target, q);
        for (const auto& p : unique_pairs(data)) EXPECT_LT(std::abs(eps(p.state, p.action)), 1e-9);
    }
}

TEST(AnchoredZeroBellmanValue, CompleteCoverageIsAPreconditionViolation) {
    const auto env = builtin_environment("chain-5", 0.9);
    const auto data = collect(env.mdp, env.target, 20, 10, 1);
    ASSERT_TRUE(missing_relevant_pairs(data, env.mdp, env.target).empty());
    EXPECT_THROW(corollary1_value(env.mdp, env.target, data, 3.0, data.transitions[0].pair()), std::invalid_argument);
}

TEST(AnchoredZeroBellmanValue, AnchorMustBeInDataset) {
    const auto env = two_state_mdp(0.9);
    const auto data = hidden_bias_instance(1.0, 0.9).data;
    EXPECT_THROW(corollary1_value(env.mdp, env.target, data, 1.0, {1, 0}), std::invalid_argument);
}

TEST(AnchoredZeroBellmanValue, InfeasibleAnchorRaises) {
    // the anchor's successor is a dataset pair with no route to the gap, so
    // its value error is pinned to zero
    const double gamma = 0.9;
    std::vector<double> p(3 * 2 * 3, 0.0);
    auto set = [&](int s, int a, int n) { p[static_cast<std::size_t>((s * 2 + a) * 3 + n)] = 1.0; };
    set(0, 0, 1);  // (0,0) -> state 1
    set(0, 1, 2);
    set(1, 0, 1);  // (1,0) self-loop
    set(1, 1, 1);
    set(2, 0, 2);
    set(2, 1, 2);
    Matrix r = Matrix::Zero(3, 2);
    r(1, 0) = 1.0;
    FiniteMdp mdp(3, 2, p, r, gamma, Vector::Constant(3, 1.0 / 3), {false, false, false});
    const auto pi = PolicyTable::deterministic(2, {1, 0, 0});
    Dataset data;
    data.transitions = {{0, 0, 0.0, 1, false, 0}, {1, 0, 1.0, 1, false, 1}, {0, 1, 0.0, 2, false, 0}};
    data.episode_offsets = {0, 2, 3};
    ASSERT_EQ(missing_relevant_pairs(data, mdp, pi), (std::vector<StateAction>{{2, 0}}));
    EXPECT_THROW(corollary1_value(mdp, pi, data, 1.0, {0, 0}), Infeasible);
    const auto [q, cert] = corollary1_value_any_anchor(mdp, pi, data, 1.0);
    EXPECT_TRUE(cert.passed);
    EXPECT_EQ(cert.value("anchor_state"), 0.0);
    EXPECT_EQ(cert.value("anchor_action"), 1.0);
}

TEST(AnchoredZeroBellmanValue, OutputIsStationaryForBrm) {
    const double gamma = 0.95;
    const auto env = builtin_environment("gridworld-3x3", gamma);
    auto data = collect(env.mdp, env.target, 30, 20, 3);
    data = remove_pairs(data, {data.transitions.back().pair()});
    const auto [q, cert] = corollary1_value_any_anchor(env.mdp, env.target, data, 2.0);
    ASSERT_TRUE(cert.passed);
    const Vector g = loss_gradient(LossKind::kBrm, ValueModel::tabular(q), data.transitions, env.target, gamma);
    EXPECT_LT(g.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Certificates, PassForRandomDraws) {
    Rng rng(10);
    for (int i = 0; i < 100; ++i) {
        const double c = rng.uniform(0.1, 10.0), gamma = rng.uniform(0.1, 0.99);
        EXPECT_TRUE(hidden_bias_instance(c, gamma).certificate.passed);
        EXPECT_TRUE(visible_error_instance(c, gamma).certificate.passed);
        const auto [upper, lower] = bound_equality_instances(c, gamma);
        EXPECT_TRUE(upper.certificate.passed);
        EXPECT_TRUE(lower.certificate.passed);
        const auto env = two_state_mdp(gamma);
        EXPECT_TRUE(corollary1_value(env.mdp, env.target, hidden_bias_instance(1.0, gamma).data, c, {0, 0}).second.passed);
    }
}

TEST(Certificates, JsonRecord) {
    auto cert = hidden_bias_instance(2.0, 0.5).certificate;
    cert.seed = 42;
    const auto doc = to_json(cert);
    EXPECT_EQ(doc["claim"], cert.claim);
    EXPECT_EQ(doc["passed"], true);
    EXPECT_EQ(doc["seed"], 42);
    EXPECT_EQ(doc["measured"]["value_error"], 2.0);
    EXPECT_EQ(doc["tolerance"], 1e-9);
    EXPECT_EQ(doc["measured"].begin().key(), "C");
}
