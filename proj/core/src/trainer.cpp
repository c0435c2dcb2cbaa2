#include "convsink/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace convsink {

TrainReport train(TinyTransformer& model, std::span<const TrainingSample> train_set,
                  std::span<const TrainingSample> holdout, const TrainSchedule& schedule) {
    if (schedule.steps == 0) {
        throw ValidationError("ValidationError", "schedule.steps must be positive");
    }
    if (train_set.empty()) {
        throw ValidationError("ValidationError", "training set is empty");
    }
    if (schedule.batch_size == 0) {
        throw ValidationError("ValidationError", "batch_size must be positive");
    }

    const std::size_t p = model.parameter_count();
    std::vector<double> m(p, 0.0), v(p, 0.0), grad_sum(p, 0.0);
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double adam_eps = 1e-8;

    std::mt19937_64 rng(schedule.seed);
    std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);

    TrainReport report;
    report.loss_curve.reserve(schedule.steps);
    double beta1_t = 1.0, beta2_t = 1.0;
    for (std::size_t step = 0; step < schedule.steps; ++step) {
        std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < schedule.batch_size; ++b) {
            const TrainingSample& s = train_set[pick(rng)];
            model.zero_gradients();
            batch_loss += model.loss_and_gradient(s.ids, s.mask, s.ids, s.predict_positions);
            const auto g = model.gradients();
            for (std::size_t i = 0; i < p; ++i) grad_sum[i] += g[i];
        }
        const double inv_b = 1.0 / static_cast<double>(schedule.batch_size);
        batch_loss *= inv_b;
        if (!std::isfinite(batch_loss)) {
            throw RuntimeFailure("DivergenceDetected",
                                 "loss became non-finite at step " + std::to_string(step));
        }
        report.loss_curve.push_back(batch_loss);

        // Cosine-annealed learning rate, zero warmup.
        const double lr = schedule.lr * 0.5 *
                          (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                          static_cast<double>(schedule.steps)));
        beta1_t *= beta1;
        beta2_t *= beta2;
        auto params = model.parameters();
        for (std::size_t i = 0; i < p; ++i) {
            const double g = grad_sum[i] * inv_b;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            const double mhat = m[i] / (1.0 - beta1_t);
            const double vhat = v[i] / (1.0 - beta2_t);
            params[i] -= lr * mhat / (std::sqrt(vhat) + adam_eps);
        }
    }
    report.final_loss = report.loss_curve.back();

    if (!holdout.empty()) {
        std::map<std::string, std::pair<std::size_t, std::size_t>> hits;  // task -> (correct, total)
        for (const auto& s : holdout) {
            const Matrix logits = model.forward(s.ids, s.mask);
            auto& [correct, total] = hits[task_name(s.task)];
            for (std::size_t pos : s.predict_positions) {
                const double* row = logits.row(pos - 1);
                std::size_t best = 0;
                for (std::size_t j = 1; j < logits.cols; ++j) {
                    if (row[j] > row[best]) best = j;
                }
                correct += (static_cast<TokenId>(best) == s.ids[pos]) ? 1 : 0;
                ++total;
            }
        }
        for (const auto& [task, ct] : hits) {
            report.accuracy_by_task[task] =
                static_cast<double>(ct.first) / static_cast<double>(ct.second);
        }
    }
    return report;
}

double token_accuracy(const TinyTransformer& model, std::span<const TrainingSample> samples) {
    std::size_t correct = 0, total = 0;
    for (const auto& s : samples) {
        const Matrix logits = model.forward(s.ids, s.mask);
        for (std::size_t pos : s.predict_positions) {
            const double* row = logits.row(pos - 1);
            std::size_t best = 0;
            for (std::size_t j = 1; j < logits.cols; ++j) {
                if (row[j] > row[best]) best = j;
            }
            correct += (static_cast<TokenId>(best) == s.ids[pos]) ? 1 : 0;
            ++total;
        }
    }
    if (total == 0) throw ValidationError("EmptyPredictSet", "no predict positions to score");
    return static_cast<double>(correct) / static_cast<double>(total);
}

GradCheckResult grad_check(TinyTransformer& model, const TrainingSample& sample, double eps) {
    if (eps <= 0.0) throw ValidationError("ValidationError", "eps must be positive");
    if (model.parameter_count() > 20000) {
        throw ValidationError("ValidationError",
                              "grad_check perturbs every parameter; keep the model under 20k");
    }
    GradCheckResult result;
    result.precision_warning = (eps < 1e-6 || eps > 1e-3);

    model.zero_gradients();
    model.loss_and_gradient(sample.ids, sample.mask, sample.ids, sample.predict_positions);
    const std::vector<double> analytic(model.gradients().begin(), model.gradients().end());

    // The difference below cancels all but ~eps of the loss, so evaluate it in
    // extended precision and narrow only the finished quotient; otherwise
    // forward-pass rounding noise dominates on small-gradient parameters.
    auto loss_at = [&]() {
        return model.loss_extended(sample.ids, sample.mask, sample.ids,
                                   sample.predict_positions);
    };
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + eps;
        const long double up = loss_at();
        params[i] = saved - eps;
        const long double down = loss_at();
        params[i] = saved;
        const double numeric =
            static_cast<double>((up - down) / (2.0L * static_cast<long double>(eps)));
        const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
        result.max_rel_error = std::max(result.max_rel_error,
                                        std::abs(analytic[i] - numeric) / denom);
    }
    return result;
}

}  // namespace convsink
