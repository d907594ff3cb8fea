#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "paumer/data.hpp"
#include "paumer/model.hpp"
#include "paumer/pausing.hpp"
#include "paumer/rng.hpp"

namespace paumer {

enum class OptimizerKind { adam, sgd_poly };
enum class BaselineMode { entropy, random_pausing, no_pausing };

std::string optimizer_kind_name(OptimizerKind k);
OptimizerKind optimizer_kind_from_name(const std::string& s);
std::string baseline_mode_name(BaselineMode m);
BaselineMode baseline_mode_from_name(const std::string& s);

struct TrainConfig {
    std::int64_t steps = 1000;
    std::int64_t batch_size = 2;
    double lr = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    double lambda_aux = 0.1;
    // Empty means the default {3..min(9,L)}.
    std::vector<std::int64_t> pause_layers;
    double tau_lo = 0.2;
    double tau_hi = 0.8;
    std::uint64_t seed = 1;
    std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
    BaselineMode baseline = BaselineMode::entropy;
    int ignore_index = 255;

    void validate(const ModelConfig& mc) const;  // throws ConfigError
    std::vector<std::int64_t> effective_pause_layers(std::int64_t num_layers) const;
};

struct PauseEvent {
    std::int64_t layer = 0;
    double tau = 0.0;
};

// One uniform draw: layer from the pause set, tau from [tau_lo, tau_hi].
PauseEvent sample_pause_event(Rng& rng, const TrainConfig& tc, std::int64_t num_layers);

struct TrainBatch {
    Tensor images;            // [B,H,W,3]
    std::vector<int> labels;  // B*H*W, row-major
};

TrainBatch make_batch(const std::vector<SegSample>& dataset,
                      const std::vector<std::size_t>& indices);

// Total loss, its parts, and the pause event it was computed under.
// event == nullopt runs without pausing (and with zero aux loss).
struct LossBundle {
    Tensor total;
    Tensor main_loss;
    Tensor aux_loss;  // undefined tensor when no event
    std::optional<PauseEvent> event;
};

LossBundle paumer_loss(const TrainBatch& batch, const ModelParams& params,
                       const ModelConfig& mc, const TrainConfig& tc,
                       std::optional<PauseEvent> event, Rng* rp_rng);

class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr, std::int64_t total_steps);

    // Applies the gradients currently stored on the parameters.
    void step(ModelParams& params);

    OptimizerKind kind() const { return kind_; }
    std::int64_t steps_taken() const { return t_; }

    // Flat per-tensor state in canonical parameter order (adam: m then v per
    // tensor; sgd_poly: momentum). Used by checkpointing.
    std::vector<std::vector<double>>& slot(std::size_t i) { return state_[i]; }
    std::size_t slots_per_tensor() const {
        return kind_ == OptimizerKind::adam ? 2 : 1;
    }
    void restore(std::int64_t t, std::vector<std::vector<std::vector<double>>> state) {
        t_ = t;
        state_ = std::move(state);
    }
    // Extends a resumed run; sgd_poly rescales its decay against the new total.
    void set_total_steps(std::int64_t total) { total_steps_ = total; }
    const std::vector<std::vector<std::vector<double>>>& state() const { return state_; }

private:
    OptimizerKind kind_;
    double lr_;
    std::int64_t total_steps_;
    std::int64_t t_ = 0;
    // state_[tensor][slot] -> flat buffer
    std::vector<std::vector<std::vector<double>>> state_;
};

struct StepRecord {
    std::int64_t step = 0;
    double loss_main = 0.0;
    double loss_aux = 0.0;
    std::optional<std::int64_t> layer;
    std::optional<double> tau;

    std::string to_jsonl() const;
};

// Drives the whole loop: batch sampling, pause-event draws, loss, optimizer,
// JSONL logging and checkpoints.
class Trainer {
public:
    Trainer(ModelConfig mc, TrainConfig tc);
    static Trainer resume(const std::string& checkpoint_path);
    static Trainer resume(const std::string& checkpoint_path,
                          const ModelConfig& expected);

    // One optimizer step on a batch sampled from `dataset`.
    StepRecord step(const std::vector<SegSample>& dataset);

    // Runs to tc.steps, appending JSONL records to `log` (may be null) and
    // writing checkpoints to `checkpoint_path` (skipped when empty).
    std::vector<StepRecord> run(const std::vector<SegSample>& dataset,
                                std::ostream* log,
                                const std::string& checkpoint_path);

    void save(const std::string& path) const;

    void set_total_steps(std::int64_t steps) {
        tc_.steps = steps;
        opt_.set_total_steps(steps);
    }

    const ModelConfig& model_config() const { return mc_; }
    const TrainConfig& train_config() const { return tc_; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }
    std::int64_t current_step() const { return step_; }
    Rng& rng() { return rng_; }

private:
    ModelConfig mc_;
    TrainConfig tc_;
    ModelParams params_;
    Optimizer opt_;
    Rng rng_;
    std::int64_t step_ = 0;
};

// Raw checkpoint I/O. Values are quantized to little-endian float32.
void save_checkpoint(const std::string& path, const ModelConfig& mc,
                     const TrainConfig& tc, const ModelParams& params,
                     const Optimizer& opt, std::int64_t step,
                     const std::array<std::uint64_t, 4>& rng_state);

struct LoadedCheckpoint {
    ModelConfig model;
    TrainConfig train;
    ModelParams params;
    OptimizerKind opt_kind = OptimizerKind::adam;
    std::int64_t opt_steps = 0;
    std::vector<std::vector<std::vector<double>>> opt_state;
    std::int64_t step = 0;
    std::array<std::uint64_t, 4> rng_state{};
};

LoadedCheckpoint load_checkpoint(const std::string& path);
// Validates stored tensors against shapes derived from `expected`; a
// mismatch raises an error naming the tensor.
LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace paumer
