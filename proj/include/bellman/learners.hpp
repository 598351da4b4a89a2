#pragma once

#include "bellman/data.hpp"
#include "bellman/diagnostics.hpp"
#include "bellman/mdp.hpp"
#include "bellman/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace bellman {

enum class ModelKind { kTabular, kLinear };

/// Approximate Q: one parameter per pair (tabular) or <theta, phi(s,a)> (linear).
///
/// Linear features are stored as a (num_pairs x dim) matrix, row s*|A|+a,
/// shared between copies of the model.
class ValueModel {
public:
    static ValueModel tabular(int num_states, int num_actions, double fill = 0.0) {
        return ValueModel(ModelKind::kTabular, num_states, num_actions, nullptr,
                          Vector::Constant(num_states * num_actions, fill));
    }

    static ValueModel tabular(const QTable& init) {
        return ValueModel(ModelKind::kTabular, init.num_states(), init.num_actions(), nullptr,
                          detail::flatten(init.values()));
    }

    static ValueModel linear(int num_states, int num_actions, std::shared_ptr<const Matrix> features,
                             Vector params = {}) {
        if (!features || features->rows() != num_states * num_actions)
            throw std::invalid_argument("ValueModel::linear: feature matrix needs one row per state-action pair");
        if (params.size() == 0) params = Vector::Zero(features->cols());
        if (params.size() != features->cols())
            throw std::invalid_argument("ValueModel::linear: parameter and feature dimensions differ");
        return ValueModel(ModelKind::kLinear, num_states, num_actions, std::move(features), std::move(params));
    }

    ModelKind kind() const { return kind_; }
    int num_states() const { return num_states_; }
    int num_actions() const { return num_actions_; }
    Eigen::Index num_params() const { return params_.size(); }

    const Vector& params() const { return params_; }
    void set_params(Vector params) {
        if (params.size() != params_.size()) throw std::invalid_argument("ValueModel: parameter size mismatch");
        params_ = std::move(params);
    }
    const std::shared_ptr<const Matrix>& features() const { return features_; }

    double predict(int s, int a) const { return predict_with(params_, s, a); }

    double predict_with(const Vector& params, int s, int a) const {
        const int idx = s * num_actions_ + a;
        if (kind_ == ModelKind::kTabular) return params(idx);
        return features_->row(idx).dot(params);
    }

    /// grad += scale * d predict(s,a) / d theta.
    void accumulate_gradient(int s, int a, double scale, Vector& grad) const {
        const int idx = s * num_actions_ + a;
        if (kind_ == ModelKind::kTabular)
            grad(idx) += scale;
        else
            grad += scale * features_->row(idx).transpose();
    }

    /// Design row of predict(s,a), i.e. its gradient.
    Vector feature_row(int s, int a) const {
        const int idx = s * num_actions_ + a;
        if (kind_ == ModelKind::kTabular) {
            Vector e = Vector::Zero(params_.size());
            e(idx) = 1.0;
            return e;
        }
        return features_->row(idx).transpose();
    }

    QTable to_qtable() const { return to_qtable_with(params_); }

    QTable to_qtable_with(const Vector& params) const {
        if (kind_ == ModelKind::kTabular) return QTable(detail::unflatten(params, num_actions_));
        return QTable(detail::unflatten(*features_ * params, num_actions_));
    }

    bool operator==(const ValueModel& other) const {
        return kind_ == other.kind_ && num_states_ == other.num_states_ && num_actions_ == other.num_actions_ &&
               params_ == other.params_ &&
               (features_ == other.features_ || (features_ && other.features_ && *features_ == *other.features_));
    }

private:
    ValueModel(ModelKind kind, int ns, int na, std::shared_ptr<const Matrix> features, Vector params)
        : kind_(kind), num_states_(ns), num_actions_(na), features_(std::move(features)), params_(std::move(params)) {}

    ModelKind kind_;
    int num_states_;
    int num_actions_;
    std::shared_ptr<const Matrix> features_;
    Vector params_;
};

/// Gaussian random features scaled by 1/sqrt(dim).
inline std::shared_ptr<const Matrix> random_features(int num_states, int num_actions, int dim, std::uint64_t seed) {
    if (dim <= 0) throw std::invalid_argument("random_features: dimension must be positive");
    Rng rng(seed);
    auto phi = std::make_shared<Matrix>(num_states * num_actions, dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (Eigen::Index i = 0; i < phi->rows(); ++i)
        for (Eigen::Index k = 0; k < phi->cols(); ++k) (*phi)(i, k) = scale * rng.normal();
    return phi;
}

enum class Optimizer {
    kPlainGradient,
    kAdam,
    kExact,  // closed-form least squares per regression (the limit of gradient descent)
};

enum class TargetUpdate { kPolyak, kHard };

struct TrainConfig {
    int steps = 100'000;
    int batch_size = 256;
    double learning_rate = 3e-4;
    Optimizer optimizer = Optimizer::kAdam;
    double polyak_rate = 5e-3;
    TargetUpdate target_update = TargetUpdate::kPolyak;
    int hard_update_period = 1;
    std::uint64_t seed = 0;
    double discount = 0.99;
    NextAction next_action = NextAction::kExpected;
    int checkpoint_every = 0;  // 0 selects max(1, steps / 200)
    double divergence_threshold = 1e12;

    int checkpoint_period() const { return checkpoint_every > 0 ? checkpoint_every : std::max(1, steps / 200); }
};

inline std::vector<std::string> validate(const TrainConfig& c) {
    std::vector<std::string> report;
    if (c.steps <= 0) report.push_back("steps must be positive");
    if (c.batch_size <= 0) report.push_back("batch_size must be positive");
    if (!(c.learning_rate > 0.0)) report.push_back("learning_rate must be positive");
    if (!(c.polyak_rate > 0.0 && c.polyak_rate <= 1.0)) report.push_back("polyak_rate must lie in (0,1]");
    if (c.hard_update_period <= 0) report.push_back("hard_update_period must be positive");
    if (!(c.discount >= 0.0 && c.discount < 1.0)) report.push_back("discount must lie in [0,1)");
    if (!(c.divergence_threshold > 0.0)) report.push_back("divergence_threshold must be positive");
    return report;
}

/// Held-out data and ground truth for the metric curves.
struct EvalSet {
    Dataset test;
    QTable q_true;
    double k_const = 1.0;
};

struct TrainReport {
    std::vector<int> steps;
    std::vector<double> loss_curve;
    std::vector<double> msbe_curve;  // on the training data
    std::vector<double> msbe_test_curve;
    std::vector<double> nave_curve;  // on the test data
    ValueModel final_model;
    bool diverged = false;

    explicit TrainReport(ValueModel model) : final_model(std::move(model)) {}

    /// Bitwise on the curves, so unrecorded (NaN) metrics compare equal.
    bool operator==(const TrainReport& other) const {
        const auto same = [](const std::vector<double>& x, const std::vector<double>& y) {
            return x.size() == y.size() &&
                   std::equal(x.begin(), x.end(), y.begin(), [](double a, double b) {
                       return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
                   });
        };
        return steps == other.steps && same(loss_curve, other.loss_curve) && same(msbe_curve, other.msbe_curve) &&
               same(msbe_test_curve, other.msbe_test_curve) && same(nave_curve, other.nave_curve) &&
               final_model == other.final_model && diverged == other.diverged;
    }
};

/// Columns: step, loss, msbe_train, msbe_test, nave_test.
inline void write_curves_csv(std::ostream& out, const TrainReport& report, bool header = true,
                             const std::string& prefix = {}) {
    if (header) out << (prefix.empty() ? "" : "run,") << "step,loss,msbe_train,msbe_test,nave_test\n";
    const auto old = out.precision(17);
    for (std::size_t i = 0; i < report.steps.size(); ++i) {
        if (!prefix.empty()) out << prefix << ',';
        out << report.steps[i] << ',' << report.loss_curve[i] << ',' << report.msbe_curve[i] << ','
            << report.msbe_test_curve[i] << ',' << report.nave_curve[i] << '\n';
    }
    out.precision(old);
}

enum class LossKind { kBrm, kFqe };

namespace detail {

/// gamma * E[Q_params(s',a')] over a' (or one sampled a'); zero after termination.
/// When `grad` is non-null, adds scale * d/dtheta of that quantity.
inline double successor_value(const ValueModel& model, const Vector& params, const PolicyTable& policy,
                              const Transition& tr, double gamma, NextAction mode, Rng* rng, double scale,
                              Vector* grad) {
    if (tr.terminal || gamma == 0.0) return 0.0;
    if (mode == NextAction::kSampled) {
        if (rng == nullptr) throw std::invalid_argument("sampled next action requires a generator");
        std::vector<double> w(static_cast<std::size_t>(policy.num_actions()));
        for (int a = 0; a < policy.num_actions(); ++a) w[static_cast<std::size_t>(a)] = policy.prob(tr.s_next, a);
        const int a = static_cast<int>(rng->categorical(w));
        if (grad) model.accumulate_gradient(tr.s_next, a, scale * gamma, *grad);
        return gamma * model.predict_with(params, tr.s_next, a);
    }
    double v = 0.0;
    for (int a = 0; a < policy.num_actions(); ++a) {
        const double p = policy.prob(tr.s_next, a);
        if (p == 0.0) continue;
        v += p * model.predict_with(params, tr.s_next, a);
        if (grad) model.accumulate_gradient(tr.s_next, a, scale * gamma * p, *grad);
    }
    return gamma * v;
}

/// Q(s,a) - r - boot, with differences below the rounding error of the
/// operands snapped to zero so adaptive optimizers do not amplify round-off.
inline double residual(double prediction, double reward, double boot) {
    const double d = prediction - (reward + boot);
    const double scale = std::abs(prediction) + std::abs(reward) + std::abs(boot);
    return std::abs(d) <= 8.0 * std::numeric_limits<double>::epsilon() * scale ? 0.0 : d;
}

}  // namespace detail

/// Mean squared TD residual of the batch. FQE bootstraps from `target`
/// (defaults to the model's own parameters).
inline double loss_value(LossKind kind, const ValueModel& model, std::span<const Transition> batch,
                         const PolicyTable& policy, double gamma, const Vector* target = nullptr) {
    if (batch.empty()) return 0.0;
    const Vector& boot = (kind == LossKind::kFqe && target) ? *target : model.params();
    double sum = 0.0;
    for (const auto& tr : batch) {
        const double y = tr.r + detail::successor_value(model, boot, policy, tr, gamma, NextAction::kExpected,
                                                        nullptr, 0.0, nullptr);
        const double d = model.predict(tr.s, tr.a) - y;
        sum += d * d;
    }
    return sum / static_cast<double>(batch.size());
}

/// Analytic gradient of loss_value. BRM differentiates through both Q(s,a) and
/// Q(s',a'): 2 delta (grad Q(s,a) - gamma grad Q(s',a')). FQE only through
/// Q(s,a): 2 delta grad Q(s,a).
inline Vector loss_gradient(LossKind kind, const ValueModel& model, std::span<const Transition> batch,
                            const PolicyTable& policy, double gamma, const Vector* target = nullptr) {
    Vector grad = Vector::Zero(model.num_params());
    if (batch.empty()) return grad;
    const Vector& boot = (kind == LossKind::kFqe && target) ? *target : model.params();
    const double n = static_cast<double>(batch.size());
    for (const auto& tr : batch) {
        const double next = detail::successor_value(model, boot, policy, tr, gamma, NextAction::kExpected, nullptr,
                                                    0.0, nullptr);
        const double delta = detail::residual(model.predict(tr.s, tr.a), tr.r, next);
        if (delta == 0.0) continue;
        model.accumulate_gradient(tr.s, tr.a, 2.0 * delta / n, grad);
        if (kind == LossKind::kBrm)
            detail::successor_value(model, boot, policy, tr, gamma, NextAction::kExpected, nullptr,
                                    -2.0 * delta / n, &grad);
    }
    return grad;
}

namespace detail {

class Adam {
public:
    explicit Adam(Eigen::Index n) : m_(Vector::Zero(n)), v_(Vector::Zero(n)) {}

    void step(Vector& params, const Vector& grad, double lr) {
        constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
        ++t_;
        m_ = beta1 * m_ + (1.0 - beta1) * grad;
        v_ = beta2 * v_ + (1.0 - beta2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(beta1, t_);
        const double c2 = 1.0 - std::pow(beta2, t_);
        params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps);
    }

private:
    Vector m_;
    Vector v_;
    int t_ = 0;
};

inline void apply_update(Optimizer opt, Adam& adam, Vector& params, const Vector& grad, double lr) {
    if (opt == Optimizer::kAdam)
        adam.step(params, grad, lr);
    else
        params -= lr * grad;
}

/// Regression rows grouped by pair: rows (s,a) with weight sqrt(count) and the
/// mean target, so the weighted fit equals the per-transition fit.
struct PairRegression {
    std::vector<StateAction> pairs;
    std::vector<std::vector<std::size_t>> members;
    Matrix design;   // weighted rows
    Vector weights;  // sqrt(count)
};

inline PairRegression group_by_pair(const ValueModel& model, const Dataset& data) {
    std::map<StateAction, std::size_t> index;
    PairRegression reg;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto p = data.transitions[i].pair();
        auto [it, fresh] = index.emplace(p, reg.pairs.size());
        if (fresh) {
            reg.pairs.push_back(p);
            reg.members.emplace_back();
        }
        reg.members[it->second].push_back(i);
    }
    reg.design.resize(static_cast<Eigen::Index>(reg.pairs.size()), model.num_params());
    reg.weights.resize(static_cast<Eigen::Index>(reg.pairs.size()));
    for (std::size_t k = 0; k < reg.pairs.size(); ++k) {
        const double w = std::sqrt(static_cast<double>(reg.members[k].size()));
        reg.weights(static_cast<Eigen::Index>(k)) = w;
        reg.design.row(static_cast<Eigen::Index>(k)) = w * model.feature_row(reg.pairs[k].state, reg.pairs[k].action).transpose();
    }
    return reg;
}

/// theta + argmin-norm correction so that the weighted rows fit `targets` (per transition).
inline Vector regress(const PairRegression& reg, const Eigen::CompleteOrthogonalDecomposition<Matrix>& cod,
                      const ValueModel& model, const Vector& params, const std::vector<double>& targets) {
    Vector rhs(static_cast<Eigen::Index>(reg.pairs.size()));
    for (std::size_t k = 0; k < reg.pairs.size(); ++k) {
        double mean = 0.0;
        for (auto i : reg.members[k]) mean += targets[i];
        mean /= static_cast<double>(reg.members[k].size());
        const auto row = static_cast<Eigen::Index>(k);
        rhs(row) = reg.weights(row) * (mean - model.predict_with(params, reg.pairs[k].state, reg.pairs[k].action));
    }
    return params + cod.solve(rhs);
}

/// Bookkeeping shared by every learner: checkpoint cadence, curves, divergence.
class Recorder {
public:
    Recorder(const TrainConfig& config, const Dataset& train, const PolicyTable* policy, const EvalSet* eval)
        : config_(config), train_(train), policy_(policy), eval_(eval) {}

    bool due(int step) const { return step == 0 || step == config_.steps || step % config_.checkpoint_period() == 0; }

    /// Records a checkpoint; returns false once the loss diverged.
    bool record(TrainReport& report, int step, double loss, const ValueModel& model) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        report.steps.push_back(step);
        report.loss_curve.push_back(loss);
        const QTable q = model.to_qtable();
        if (policy_) {
            double sq = 0.0;
            for (const auto& tr : train_.transitions) {
                const double d = q(tr.s, tr.a) - (tr.r + bootstrap_value(q.values(), *policy_, tr, config_.discount,
                                                                          NextAction::kExpected, nullptr));
                sq += d * d;
            }
            report.msbe_curve.push_back(sq / static_cast<double>(train_.size()));
        } else {
            report.msbe_curve.push_back(nan);
        }
        if (eval_ && !eval_->test.empty()) {
            const MetricRecord m = policy_ ? empirical_metrics(q, eval_->test, *policy_, eval_->q_true,
                                                               eval_->k_const, config_.discount)
                                           : MetricRecord{nan, nan, eval_->k_const};
            report.msbe_test_curve.push_back(m.msbe);
            if (!policy_) {
                double abs_err = 0.0;
                for (const auto& tr : eval_->test.transitions) abs_err += std::abs(q(tr.s, tr.a) - eval_->q_true(tr.s, tr.a));
                report.nave_curve.push_back(abs_err / (eval_->k_const * static_cast<double>(eval_->test.size())));
            } else {
                report.nave_curve.push_back(m.nave);
            }
        } else {
            report.msbe_test_curve.push_back(nan);
            report.nave_curve.push_back(nan);
        }
        if (!std::isfinite(loss) || loss > config_.divergence_threshold || !model.params().allFinite()) {
            report.diverged = true;
            return false;
        }
        return true;
    }

private:
    const TrainConfig& config_;
    const Dataset& train_;
    const PolicyTable* policy_;
    const EvalSet* eval_;
};

inline void require_trainable(const Dataset& data, const TrainConfig& config, const char* where) {
    if (data.empty()) throw std::invalid_argument(std::string(where) + ": empty dataset");
    const auto report = validate(config);
    if (!report.empty()) throw std::invalid_argument(std::string(where) + ": " + report.front());
}

inline double full_loss(LossKind kind, const ValueModel& model, const Dataset& data, const PolicyTable& policy,
                        double gamma, const Vector* target) {
    return loss_value(kind, model, data.transitions, policy, gamma, target);
}

}  // namespace detail

/// Bellman residual minimization: minimizes mean (Q(s,a) - r - gamma Q(s',a'))^2
/// with the gradient flowing through both value estimates.
///
/// kExact solves the (quadratic) objective in closed form, returning the
/// solution nearest the initial parameters, which is where gradient descent
/// from those parameters converges.
inline TrainReport brm_fit(const Dataset& data, const PolicyTable& policy, ValueModel model, const TrainConfig& config,
                           const EvalSet* eval = nullptr) {
    detail::require_trainable(data, config, "brm_fit");
    const double gamma = config.discount;
    TrainReport report(model);
    detail::Recorder recorder(config, data, &policy, eval);

    if (config.optimizer == Optimizer::kExact) {
        recorder.record(report, 0, detail::full_loss(LossKind::kBrm, model, data, policy, gamma, nullptr), model);
        // one residual row per transition: (phi(s,a) - gamma E phi(s',a')) theta = r
        Matrix rows(static_cast<Eigen::Index>(data.size()), model.num_params());
        Vector rhs(static_cast<Eigen::Index>(data.size()));
        for (std::size_t i = 0; i < data.size(); ++i) {
            const auto& tr = data.transitions[i];
            Vector row = model.feature_row(tr.s, tr.a);
            detail::successor_value(model, model.params(), policy, tr, gamma, NextAction::kExpected, nullptr, -1.0, &row);
            const auto r = static_cast<Eigen::Index>(i);
            rows.row(r) = row.transpose();
            rhs(r) = tr.r - row.dot(model.params());
        }
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod(rows);
        model.set_params(model.params() + cod.solve(rhs));
        recorder.record(report, config.steps, detail::full_loss(LossKind::kBrm, model, data, policy, gamma, nullptr), model);
        report.final_model = model;
        return report;
    }

    Rng rng(config.seed);
    detail::Adam adam(model.num_params());
    Vector params = model.params();
    if (!recorder.record(report, 0, detail::full_loss(LossKind::kBrm, model, data, policy, gamma, nullptr), model)) {
        report.final_model = model;
        return report;
    }
    const double n = static_cast<double>(config.batch_size);
    for (int step = 1; step <= config.steps; ++step) {
        Vector grad = Vector::Zero(model.num_params());
        for (int b = 0; b < config.batch_size; ++b) {
            const auto& tr = data.transitions[rng.index(data.size())];
            // one draw of a' feeds both the residual and its gradient
            Vector succ = Vector::Zero(model.num_params());
            const double boot = detail::successor_value(model, params, policy, tr, gamma, config.next_action, &rng,
                                                        1.0, &succ);
            const double delta = detail::residual(model.predict_with(params, tr.s, tr.a), tr.r, boot);
            model.accumulate_gradient(tr.s, tr.a, 2.0 * delta / n, grad);
            grad -= (2.0 * delta / n) * succ;
        }
        detail::apply_update(config.optimizer, adam, params, grad, config.learning_rate);
        if (recorder.due(step)) {
            model.set_params(params);
            if (!recorder.record(report, step, detail::full_loss(LossKind::kBrm, model, data, policy, gamma, nullptr),
                                 model))
                break;
        }
    }
    model.set_params(params);
    report.final_model = model;
    return report;
}

/// Fitted Q-evaluation: regression of Q(s,a) onto r + gamma Qbar(s',a') with a
/// frozen target Qbar, initialized to Q and tracked by Polyak averaging or hard
/// copies. Under kExact every step is a full least-squares regression.
inline TrainReport fqe_fit(const Dataset& data, const PolicyTable& policy, ValueModel model, const TrainConfig& config,
                           const EvalSet* eval = nullptr, const Vector* initial_target = nullptr) {
    detail::require_trainable(data, config, "fqe_fit");
    const double gamma = config.discount;
    TrainReport report(model);
    detail::Recorder recorder(config, data, &policy, eval);
    Vector params = model.params();
    Vector target = initial_target ? *initial_target : params;
    if (target.size() != params.size()) throw std::invalid_argument("fqe_fit: target parameter size mismatch");

    auto refresh_target = [&](int step) {
        if (config.target_update == TargetUpdate::kPolyak)
            target = (1.0 - config.polyak_rate) * target + config.polyak_rate * params;
        else if (step % config.hard_update_period == 0)
            target = params;
    };

    if (!recorder.record(report, 0, detail::full_loss(LossKind::kFqe, model, data, policy, gamma, &target), model)) {
        report.final_model = model;
        return report;
    }

    if (config.optimizer == Optimizer::kExact) {
        const auto reg = detail::group_by_pair(model, data);
        const Eigen::CompleteOrthogonalDecomposition<Matrix> cod(reg.design);
        std::vector<double> y(data.size());
        for (int step = 1; step <= config.steps; ++step) {
            for (std::size_t i = 0; i < data.size(); ++i) {
                const auto& tr = data.transitions[i];
                y[i] = tr.r + detail::successor_value(model, target, policy, tr, gamma, NextAction::kExpected, nullptr,
                                                      0.0, nullptr);
            }
            params = detail::regress(reg, cod, model, params, y);
            refresh_target(step);
            if (recorder.due(step)) {
                model.set_params(params);
                if (!recorder.record(report, step, detail::full_loss(LossKind::kFqe, model, data, policy, gamma, &target),
                                     model))
                    break;
            }
        }
        model.set_params(params);
        report.final_model = model;
        return report;
    }

    Rng rng(config.seed);
    detail::Adam adam(model.num_params());
    const double n = static_cast<double>(config.batch_size);
    for (int step = 1; step <= config.steps; ++step) {
        Vector grad = Vector::Zero(model.num_params());
        for (int b = 0; b < config.batch_size; ++b) {
            const auto& tr = data.transitions[rng.index(data.size())];
            const double next = detail::successor_value(model, target, policy, tr, gamma, config.next_action, &rng,
                                                        0.0, nullptr);
            const double delta = detail::residual(model.predict_with(params, tr.s, tr.a), tr.r, next);
            model.accumulate_gradient(tr.s, tr.a, 2.0 * delta / n, grad);
        }
        detail::apply_update(config.optimizer, adam, params, grad, config.learning_rate);
        refresh_target(step);
        if (recorder.due(step)) {
            model.set_params(params);
            if (!recorder.record(report, step, detail::full_loss(LossKind::kFqe, model, data, policy, gamma, &target),
                                 model))
                break;
        }
    }
    model.set_params(params);
    report.final_model = model;
    return report;
}

/// Monte-Carlo regression of Q(s_t,a_t) onto the discounted return of the rest
/// of its episode. kExact gives the least-squares fit (per-pair mean returns
/// for a tabular model). `policy` and `eval` only feed the metric curves.
inline TrainReport mc_fit(const Dataset& trajectories, ValueModel model, const TrainConfig& config,
                          const PolicyTable* policy = nullptr, const EvalSet* eval = nullptr) {
    if (trajectories.empty()) throw std::invalid_argument("mc_fit: empty trajectory set");
    detail::require_trainable(trajectories, config, "mc_fit");
    const std::vector<double> returns = discounted_returns(trajectories, config.discount);
    TrainReport report(model);
    detail::Recorder recorder(config, trajectories, policy, eval);

    auto loss_of = [&](const Vector& params) {
        double sum = 0.0;
        for (std::size_t i = 0; i < trajectories.size(); ++i) {
            const auto& tr = trajectories.transitions[i];
            const double d = model.predict_with(params, tr.s, tr.a) - returns[i];
            sum += d * d;
        }
        return sum / static_cast<double>(trajectories.size());
    };

    Vector params = model.params();
    if (!recorder.record(report, 0, loss_of(params), model)) return report;

    if (config.optimizer == Optimizer::kExact) {
        const auto reg = detail::group_by_pair(model, trajectories);
        const Eigen::CompleteOrthogonalDecomposition<Matrix> cod(reg.design);
        params = detail::regress(reg, cod, model, params, returns);
        model.set_params(params);
        recorder.record(report, config.steps, loss_of(params), model);
        report.final_model = model;
        return report;
    }

    Rng rng(config.seed);
    detail::Adam adam(model.num_params());
    const double n = static_cast<double>(config.batch_size);
    for (int step = 1; step <= config.steps; ++step) {
        Vector grad = Vector::Zero(model.num_params());
        for (int b = 0; b < config.batch_size; ++b) {
            const auto i = rng.index(trajectories.size());
            const auto& tr = trajectories.transitions[i];
            model.accumulate_gradient(tr.s, tr.a, 2.0 * (model.predict_with(params, tr.s, tr.a) - returns[i]) / n, grad);
        }
        detail::apply_update(config.optimizer, adam, params, grad, config.learning_rate);
        if (recorder.due(step)) {
            model.set_params(params);
            if (!recorder.record(report, step, loss_of(params), model)) break;
        }
    }
    model.set_params(params);
    report.final_model = model;
    return report;
}

}  // namespace bellman
