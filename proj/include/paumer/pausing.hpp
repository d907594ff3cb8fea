#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "paumer/model.hpp"
#include "paumer/rng.hpp"
#include "paumer/tensor.hpp"

namespace paumer {

// One (layer, proportion) pause point. Layers are 1-based.
struct PauseEntry {
    std::int64_t layer = 0;
    double tau = 0.0;
};

// Ordered pause schedule; empty means no pausing. tau is interpreted
// relative to the token count still active when the stage runs.
struct PauseConfig {
    std::vector<PauseEntry> entries;

    bool empty() const { return entries.empty(); }
    void validate(std::int64_t num_layers) const;  // throws ConfigError
    const PauseEntry* at_layer(std::int64_t layer) const;

    std::string to_json() const;  // [{"layer":3,"tau":0.2},...]
    static PauseConfig from_json(const std::string& text);
};

// Everything needed to undo one pause split: the pre-split token matrix,
// which of its rows stayed active (per batch item, ascending), and the
// auxiliary logits computed over the full pre-split set.
struct PauseStage {
    Tensor snapshot;    // [B,n,D]
    std::vector<std::vector<std::int64_t>> kept;
    std::int64_t layer = 0;
    Tensor aux_logits;  // [B,n,K]
};

struct PauseState {
    std::int64_t original_tokens = 0;
    std::vector<PauseStage> stages;
};

// Active-token accounting for one forward pass (per image).
struct PauseStats {
    std::vector<std::int64_t> per_layer_active;  // count entering each layer
    std::int64_t token_layer_products = 0;

    std::string to_json() const;
};

enum class SelectionPolicy { entropy, random };

// Per-token posterior entropy in nats, from raw logit values. Probabilities
// below 1e-30 contribute nothing. Output [B,n], never grad-tracked.
Tensor token_entropy(const Tensor& logits);

// Splits off the floor(tau*n) lowest-entropy tokens (ties to the lower
// index), records the stage, and returns the survivors in ascending
// original order. SelectionPolicy::random draws the kept set uniformly
// instead (the RP baseline); it requires an rng.
Tensor pause_step(const Tensor& x, double tau, const ModelParams& params,
                  std::int64_t layer, PauseState& state,
                  SelectionPolicy policy = SelectionPolicy::entropy,
                  Rng* rng = nullptr);

// Undoes the splits last-to-first: paused tokens keep their stage snapshot,
// survivors carry their fully processed values. Output width is the
// original token count.
Tensor assemble(const Tensor& x_final, const PauseState& state);

// embed -> encoder layers with pause_step after each configured layer ->
// assemble -> decode. Empty config is bitwise forward_full.
std::pair<Tensor, PauseStats> forward_with_pausing(
    const Tensor& image, const ModelParams& params, const ModelConfig& cfg,
    const PauseConfig& pause_config,
    SelectionPolicy policy = SelectionPolicy::entropy, Rng* rng = nullptr,
    PauseState* state_out = nullptr);

// Early-exit variant: paused tokens keep the auxiliary logits from their
// pause layer; only the surviving tokens see the main decoder.
Tensor forward_early_exit(const Tensor& image, const ModelParams& params,
                          const ModelConfig& cfg, const PauseConfig& pause_config,
                          SelectionPolicy policy = SelectionPolicy::entropy,
                          Rng* rng = nullptr, PauseStats* stats_out = nullptr);

}  // namespace paumer
