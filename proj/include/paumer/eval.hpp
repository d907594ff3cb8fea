#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "paumer/data.hpp"
#include "paumer/model.hpp"
#include "paumer/pausing.hpp"

namespace paumer {

// K x K counts; rows index ground truth, columns prediction. Pixels labelled
// ignore_index are skipped.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::int64_t classes);

    void add(std::int64_t truth, std::int64_t pred);
    void add_map(const std::vector<std::uint8_t>& pred,
                 const std::vector<std::uint8_t>& truth, int ignore_index = kIgnoreLabel);
    void merge(const ConfusionMatrix& other);

    std::int64_t classes() const { return k_; }
    std::uint64_t at(std::int64_t truth, std::int64_t pred) const;
    std::uint64_t total() const;

private:
    std::int64_t k_;
    std::vector<std::uint64_t> counts_;
};

// Per-class IoU; classes absent from both prediction and truth are excluded
// from the mean. miou is empty when no pixel was evaluated.
struct IouResult {
    std::vector<double> per_class;
    std::vector<bool> present;
    std::optional<double> miou;
};

IouResult iou_from_confusion(const ConfusionMatrix& cm);
IouResult miou(const std::vector<std::uint8_t>& pred,
               const std::vector<std::uint8_t>& truth, std::int64_t classes,
               int ignore_index = kIgnoreLabel);

// Argmax class per pixel from [1,H,W,K] or [B,H,W,K] logits (batch item bi).
std::vector<std::uint8_t> argmax_map(const Tensor& logits, std::int64_t bi = 0);

// ---- analytical cost model -----------------------------------------------------
// Relative compute proxy: an encoder layer on n tokens costs 12 n D^2 + 2 n^2 D;
// the decoder always runs on the full token set.
struct CostModel {
    std::int64_t dim = 0;
    std::int64_t ffn_hidden = 0;

    static CostModel from_config(const ModelConfig& cfg) {
        return {cfg.dim, cfg.ffn()};
    }

    double layer_cost(std::int64_t n) const {
        const auto nd = static_cast<double>(n);
        const auto d = static_cast<double>(dim);
        return 12.0 * nd * d * d + 2.0 * nd * nd * d;
    }

    // Independent replay of the pause arithmetic (does not touch PauseState).
    static std::vector<std::int64_t> active_counts(std::int64_t layers,
                                                   std::int64_t tokens,
                                                   const PauseConfig& pc);
    static std::int64_t token_layer_products(std::int64_t layers, std::int64_t tokens,
                                             const PauseConfig& pc);

    double encoder_cost(std::int64_t layers, std::int64_t tokens,
                        const PauseConfig& pc) const;
    double decoder_cost(const ModelConfig& cfg) const;
    double total_cost(const ModelConfig& cfg, const PauseConfig& pc) const;
};

// ---- throughput ------------------------------------------------------------------

struct BenchResult {
    double images_per_second = 0.0;
    double median_seconds = 0.0;        // per forward of one batch
    std::int64_t token_layer_products = 0;
};

// Median wall-clock over `iters` forward passes after `warmup` discarded runs;
// iters must be >= 3. Inputs are synthesized from `rng`.
BenchResult bench_throughput(const ModelParams& params, const ModelConfig& cfg,
                             const PauseConfig& pc, std::int64_t batch_size,
                             int warmup, int iters, Rng& rng);

// ---- sweeps and skyline -------------------------------------------------------------

struct TradeoffPoint {
    std::string config_id;
    double throughput_ips = 0.0;
    std::int64_t token_layer_products = 0;
    double miou = 0.0;
};

struct SweepOptions {
    std::int64_t bench_batch = 8;
    int bench_warmup = 2;
    int bench_iters = 5;
    SelectionPolicy policy = SelectionPolicy::entropy;
    std::uint64_t policy_seed = 1234;  // seeds random selection per sample
    bool early_exit = false;
    std::uint64_t bench_seed = 99;
};

std::string config_id(const PauseConfig& pc);

// The paper's thirteen reference configurations.
std::vector<PauseConfig> table1_configs();

// mIoU over `eval_set` plus a throughput measurement per configuration.
// Evaluation parallelism is capped by the PAUMER_THREADS environment variable.
std::vector<TradeoffPoint> sweep(const ModelParams& params, const ModelConfig& cfg,
                                 const std::vector<PauseConfig>& configs,
                                 const std::vector<SegSample>& eval_set,
                                 const SweepOptions& opts);

// mIoU only (no timing), same parallelism rules.
double evaluate_miou(const ModelParams& params, const ModelConfig& cfg,
                     const PauseConfig& pc, const std::vector<SegSample>& eval_set,
                     SelectionPolicy policy = SelectionPolicy::entropy,
                     std::uint64_t policy_seed = 1234, bool early_exit = false);

// Indices of the dominance-maximal points, in stable input order. A point is
// dominated when another has >= throughput and >= mIoU with one strict.
std::vector<std::size_t> skyline(const std::vector<TradeoffPoint>& points);

// ---- entropy report ------------------------------------------------------------------

struct EntropyRow {
    std::int64_t layer = 0;
    double entropy_nats = 0.0;
    bool correct = false;
    int class_id = 0;  // token-resolution ground truth (center pixel)
};

// Runs the encoder without pausing and probes the auxiliary decoder after
// each requested layer. One row per (sample, layer, token).
std::vector<EntropyRow> entropy_report(const ModelParams& params,
                                       const ModelConfig& cfg,
                                       const std::vector<SegSample>& eval_set,
                                       const std::vector<std::int64_t>& layers);

void write_tradeoff_csv(const std::string& path,
                        const std::vector<TradeoffPoint>& points);
void write_entropy_csv(const std::string& path, const std::vector<EntropyRow>& rows);

}  // namespace paumer
