#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "convsink/model.hpp"
#include "convsink/tasks.hpp"
#include "convsink/trainer.hpp"

namespace convsink {

// Desk-scale training experiments:
//   smr-recon   copy task under the SMR mask, reports held-out accuracy
//   ablate-sink same task retrained with the u' -> sink edges removed
//   lmr-recall  key-value recall trained once under the streaming pattern,
//               then evaluated under streaming vs short-window StreamingLlm
struct ExperimentConfig {
    std::string name = "smr-recon";
    std::uint64_t seed = 0;

    std::size_t steps = 2500;
    double lr = 1e-3;
    std::size_t batch_size = 16;
    std::size_t n_train = 4096;
    std::size_t n_eval = 128;

    ModelConfig model;

    // smr-recon / ablate-sink
    std::size_t smr_pairs = 1;   // (u, u') pairs per sample
    std::size_t utt_len = 8;     // payload tokens per utterance

    // lmr-recall
    std::size_t qr_pairs = 24;
    std::size_t key_len = 1;
    std::size_t val_len = 2;
    std::size_t recall_x = 1;       // which pair gets re-asked (1-based)
    std::size_t strllm_window = 4;  // shorter than any distance back to pair x

    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
};

ExperimentConfig default_experiment_config(const std::string& name);

// Trained models plus one held-out sample per trained variant, keyed by the
// variant label, for checkpointing and attention export.
struct ExperimentOutputs {
    std::vector<std::pair<std::string, std::unique_ptr<TinyTransformer>>> models;
    std::vector<std::pair<std::string, TrainingSample>> probe_samples;
};

// Runs the named experiment and returns the report as canonical JSON (sorted
// keys, no timestamps, byte-stable for a fixed config and seed).
std::string run_experiment(const ExperimentConfig& config, ExperimentOutputs* outputs = nullptr);

}  // namespace convsink
