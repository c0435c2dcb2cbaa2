#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "convsink/analyzer.hpp"
#include "convsink/dialogue.hpp"
#include "convsink/mask.hpp"
#include "convsink/matrix.hpp"

namespace convsink {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_model = 32;
    std::size_t d_ff = 64;
    std::size_t vocab_size = 32;
    std::size_t max_seq_len = 64;
    std::uint64_t seed = 0;

    void validate() const;  // throws ValidationError
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// Mean next-token NLL over predict positions: position p's target is
// targets[p], read from the logits row at p - 1. Rows not used by any predict
// position contribute nothing (and receive zero gradient).
double loss_masked(const Matrix& logits, const TokenSeq& targets,
                   const std::vector<std::size_t>& predict_positions);

// dLoss/dLogits for the same objective; exposed so tests can assert the
// zero-rows property directly.
Matrix loss_masked_gradient(const Matrix& logits, const TokenSeq& targets,
                            const std::vector<std::size_t>& predict_positions);

// Decoder-only transformer, double precision, single-threaded, deterministic
// per config seed. Pre-norm residual blocks with RMS normalisation, learned
// absolute position embeddings, GELU feed-forward. Forbidden attention is an
// additive -1e9 before softmax followed by exact-zero enforcement, so masked
// keys influence nothing, bit for bit.
class TinyTransformer {
public:
    explicit TinyTransformer(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    std::size_t parameter_count() const { return params_.size(); }

    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::span<const double> gradients() const { return grads_; }
    void zero_gradients();

    // Logits [N, vocab]. Throws LengthMismatch (mask size or max_seq_len),
    // RowFullyMasked, or TokenOutOfRange. Optionally captures attention.
    Matrix forward(const TokenSeq& ids, const MaskMatrix& mask,
                   AttnMap* attention = nullptr) const;

    // Adds dLoss/dTheta into the gradient buffer and returns the loss.
    double loss_and_gradient(const TokenSeq& ids, const MaskMatrix& mask,
                             const TokenSeq& targets,
                             const std::vector<std::size_t>& predict_positions);

    // The same scalar loss evaluated through a long double forward pass, for
    // the finite-difference gradient checker: the central-difference numerator
    // cancels all but ~eps of the loss, so double-precision rounding noise in
    // the forward would otherwise dominate the quotient on parameters whose
    // gradient is small. Returns long double so the caller can form the
    // difference before narrowing.
    long double loss_extended(const TokenSeq& ids, const MaskMatrix& mask,
                              const TokenSeq& targets,
                              const std::vector<std::size_t>& predict_positions) const;

    // Versioned binary dump (config JSON + flat parameters + FNV-1a checksum).
    void save_checkpoint(const std::string& path) const;
    static TinyTransformer load_checkpoint(const std::string& path);

private:
    struct Impl;
    ModelConfig config_;
    std::vector<double> params_;
    std::vector<double> grads_;
};

}  // namespace convsink
