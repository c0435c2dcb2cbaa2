#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "convsink/model.hpp"
#include "convsink/tasks.hpp"

namespace convsink {

struct TrainSchedule {
    double lr = 5e-5;          // cosine-annealed to ~0, zero warmup
    std::size_t steps = 0;     // optimizer steps; 0 is a ValidationError
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;    // batch sampling order
};

struct TrainReport {
    std::vector<double> loss_curve;  // one mean-batch loss per step
    double final_loss = 0.0;
    std::map<std::string, double> accuracy_by_task;  // held-out, by task name
};

// Adam (0.9, 0.999, eps 1e-8) with cosine-annealed lr. Deterministic for a
// fixed (model seed, schedule seed, data); throws DivergenceDetected when the
// loss stops being finite.
TrainReport train(TinyTransformer& model, std::span<const TrainingSample> train_set,
                  std::span<const TrainingSample> holdout, const TrainSchedule& schedule);

// Fraction of predict positions where argmax logits[p-1] == ids[p].
double token_accuracy(const TinyTransformer& model, std::span<const TrainingSample> samples);

struct GradCheckResult {
    double max_rel_error = 0.0;
    bool precision_warning = false;  // eps outside [1e-6, 1e-3]
};

// Central finite differences over every parameter against the analytic
// gradient; relative error is |a - n| / max(1e-8, |a| + |n|). Models above
// 20k parameters are rejected.
GradCheckResult grad_check(TinyTransformer& model, const TrainingSample& sample, double eps);

}  // namespace convsink
