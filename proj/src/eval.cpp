#include "paumer/eval.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>

#include "paumer/errors.hpp"

namespace paumer {

// ---- confusion matrix ------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::int64_t classes) : k_(classes) {
    if (classes < 2) throw ConfigError("confusion matrix: need at least two classes");
    counts_.assign(static_cast<std::size_t>(k_ * k_), 0);
}

void ConfusionMatrix::add(std::int64_t truth, std::int64_t pred) {
    if (truth < 0 || truth >= k_) {
        throw InvalidLabelError("confusion matrix: truth label " + std::to_string(truth) +
                                " outside [0," + std::to_string(k_) + ")");
    }
    if (pred < 0 || pred >= k_) {
        throw InvalidLabelError("confusion matrix: prediction " + std::to_string(pred) +
                                " outside [0," + std::to_string(k_) + ")");
    }
    ++counts_[static_cast<std::size_t>(truth * k_ + pred)];
}

void ConfusionMatrix::add_map(const std::vector<std::uint8_t>& pred,
                              const std::vector<std::uint8_t>& truth, int ignore_index) {
    if (pred.size() != truth.size()) {
        throw ContractError("confusion matrix: prediction and truth sizes differ");
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (truth[i] == ignore_index) continue;
        add(truth[i], pred[i]);
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ContractError("confusion matrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::at(std::int64_t truth, std::int64_t pred) const {
    return counts_[static_cast<std::size_t>(truth * k_ + pred)];
}

std::uint64_t ConfusionMatrix::total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

IouResult iou_from_confusion(const ConfusionMatrix& cm) {
    const std::int64_t k = cm.classes();
    IouResult res;
    res.per_class.assign(static_cast<std::size_t>(k), 0.0);
    res.present.assign(static_cast<std::size_t>(k), false);
    double sum = 0.0;
    std::int64_t n_present = 0;
    for (std::int64_t c = 0; c < k; ++c) {
        const std::uint64_t tp = cm.at(c, c);
        std::uint64_t row = 0, col = 0;
        for (std::int64_t j = 0; j < k; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const std::uint64_t denom = row + col - tp;  // TP + FP + FN
        if (denom == 0) continue;                    // absent from truth and prediction
        const double iou = static_cast<double>(tp) / static_cast<double>(denom);
        res.per_class[static_cast<std::size_t>(c)] = iou;
        res.present[static_cast<std::size_t>(c)] = true;
        sum += iou;
        ++n_present;
    }
    if (n_present > 0) res.miou = sum / static_cast<double>(n_present);
    return res;
}

IouResult miou(const std::vector<std::uint8_t>& pred,
               const std::vector<std::uint8_t>& truth, std::int64_t classes,
               int ignore_index) {
    ConfusionMatrix cm(classes);
    cm.add_map(pred, truth, ignore_index);
    return iou_from_confusion(cm);
}

std::vector<std::uint8_t> argmax_map(const Tensor& logits, std::int64_t bi) {
    if (logits.rank() != 4) {
        throw ShapeError("argmax_map: expected [B,H,W,K], got " + shape_str(logits.shape()));
    }
    const std::int64_t hw = logits.dim(1) * logits.dim(2);
    const std::int64_t k = logits.dim(3);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(hw));
    const double* base = logits.data().data() + bi * hw * k;
    for (std::int64_t p = 0; p < hw; ++p) {
        const double* row = base + p * k;
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < k; ++c) {
            if (row[c] > row[best]) best = c;
        }
        out[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// ---- cost model --------------------------------------------------------------------

std::vector<std::int64_t> CostModel::active_counts(std::int64_t layers,
                                                   std::int64_t tokens,
                                                   const PauseConfig& pc) {
    std::vector<std::int64_t> counts;
    counts.reserve(static_cast<std::size_t>(layers));
    std::int64_t n = tokens;
    for (std::int64_t l = 1; l <= layers; ++l) {
        counts.push_back(n);
        if (const auto* e = pc.at_layer(l)) {
            n -= static_cast<std::int64_t>(e->tau * static_cast<double>(n));
        }
    }
    return counts;
}

std::int64_t CostModel::token_layer_products(std::int64_t layers, std::int64_t tokens,
                                             const PauseConfig& pc) {
    const auto counts = active_counts(layers, tokens, pc);
    return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

double CostModel::encoder_cost(std::int64_t layers, std::int64_t tokens,
                               const PauseConfig& pc) const {
    double total = 0.0;
    for (auto n : active_counts(layers, tokens, pc)) total += layer_cost(n);
    return total;
}

double CostModel::decoder_cost(const ModelConfig& cfg) const {
    const auto n = static_cast<double>(cfg.num_tokens());
    const auto d = static_cast<double>(cfg.dim);
    const auto k = static_cast<double>(cfg.classes);
    const double upsample = static_cast<double>(cfg.image_h * cfg.image_w) * k * 4.0;
    if (cfg.decoder == DecoderKind::linear) return n * d * k + upsample;
    double cost = static_cast<double>(cfg.mask_decoder_layers) *
                  layer_cost(cfg.num_tokens() + cfg.classes);
    return cost + n * d * k + upsample;
}

double CostModel::total_cost(const ModelConfig& cfg, const PauseConfig& pc) const {
    return encoder_cost(cfg.layers, cfg.num_tokens(), pc) + decoder_cost(cfg);
}

// ---- throughput -----------------------------------------------------------------------

BenchResult bench_throughput(const ModelParams& params, const ModelConfig& cfg,
                             const PauseConfig& pc, std::int64_t batch_size,
                             int warmup, int iters, Rng& rng) {
    if (iters < 3) throw ContractError("bench: need at least 3 timed iterations");
    if (batch_size < 1) throw ContractError("bench: batch_size must be >= 1");
    pc.validate(cfg.layers);

    std::vector<double> pixels(
        static_cast<std::size_t>(batch_size * cfg.image_h * cfg.image_w * 3));
    for (auto& v : pixels) v = rng.uniform();
    const Tensor images =
        Tensor::from({batch_size, cfg.image_h, cfg.image_w, 3}, std::move(pixels));

    NoGradGuard ng;
    for (int i = 0; i < warmup; ++i) {
        (void)forward_with_pausing(images, params, cfg, pc);
    }
    std::vector<double> times(static_cast<std::size_t>(iters));
    for (int i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        (void)forward_with_pausing(images, params, cfg, pc);
        const auto t1 = std::chrono::steady_clock::now();
        times[static_cast<std::size_t>(i)] = std::chrono::duration<double>(t1 - t0).count();
    }
    std::sort(times.begin(), times.end());
    const std::size_t mid = times.size() / 2;
    const double median = times.size() % 2 == 1
                              ? times[mid]
                              : 0.5 * (times[mid - 1] + times[mid]);

    BenchResult res;
    res.median_seconds = median;
    res.images_per_second = static_cast<double>(batch_size) / median;
    res.token_layer_products =
        CostModel::token_layer_products(cfg.layers, cfg.num_tokens(), pc);
    return res;
}

// ---- sweep -------------------------------------------------------------------------------

std::string config_id(const PauseConfig& pc) {
    if (pc.empty()) return "none";
    std::string id;
    for (const auto& e : pc.entries) {
        if (!id.empty()) id += "+";
        char buf[48];
        std::snprintf(buf, sizeof(buf), "l%ldp%.4g", static_cast<long>(e.layer), e.tau);
        id += buf;
    }
    return id;
}

std::vector<PauseConfig> table1_configs() {
    auto single = [](std::int64_t l, double t) {
        return PauseConfig{{{l, t}}};
    };
    auto stacked = [](std::vector<PauseEntry> e) { return PauseConfig{std::move(e)}; };
    return {
        single(3, 0.2),
        single(3, 0.4),
        single(3, 0.6),
        single(5, 0.2),
        single(5, 0.4),
        single(5, 0.6),
        single(5, 0.8),
        stacked({{3, 0.2}, {5, 0.2}}),
        stacked({{3, 0.3}, {5, 0.3}}),
        stacked({{3, 0.4}, {5, 0.4}}),
        stacked({{3, 0.2}, {5, 0.2}, {7, 0.2}}),
        stacked({{3, 0.3}, {5, 0.3}, {7, 0.3}}),
        stacked({{3, 0.4}, {5, 0.4}, {7, 0.4}}),
    };
}

namespace {

int eval_thread_count() {
    int n = omp_get_max_threads();
    if (const char* env = std::getenv("PAUMER_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) n = std::min(n, cap);
    }
    return std::max(1, n);
}

}  // namespace

double evaluate_miou(const ModelParams& params, const ModelConfig& cfg,
                     const PauseConfig& pc, const std::vector<SegSample>& eval_set,
                     SelectionPolicy policy, std::uint64_t policy_seed, bool early_exit) {
    pc.validate(cfg.layers);
    ConfusionMatrix cm(cfg.classes);
    const auto n = static_cast<std::int64_t>(eval_set.size());
    const int threads = eval_thread_count();

#pragma omp parallel num_threads(threads)
    {
        NoGradGuard ng;
        ConfusionMatrix local(cfg.classes);
#pragma omp for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) {
            const auto& s = eval_set[static_cast<std::size_t>(i)];
            std::vector<double> pixels(s.image.begin(), s.image.end());
            const Tensor image =
                Tensor::from({1, s.height, s.width, 3}, std::move(pixels));
            Rng sample_rng(policy_seed + 0x9e3779b97f4a7c15ULL *
                                             static_cast<std::uint64_t>(i + 1));
            Tensor logits;
            if (early_exit) {
                logits = forward_early_exit(image, params, cfg, pc, policy, &sample_rng);
            } else {
                logits = forward_with_pausing(image, params, cfg, pc, policy, &sample_rng)
                             .first;
            }
            local.add_map(argmax_map(logits), s.labels);
        }
#pragma omp critical
        cm.merge(local);
    }
    const auto res = iou_from_confusion(cm);
    return res.miou.value_or(std::numeric_limits<double>::quiet_NaN());
}

std::vector<TradeoffPoint> sweep(const ModelParams& params, const ModelConfig& cfg,
                                 const std::vector<PauseConfig>& configs,
                                 const std::vector<SegSample>& eval_set,
                                 const SweepOptions& opts) {
    std::vector<TradeoffPoint> points;
    points.reserve(configs.size());
    for (const auto& pc : configs) {
        pc.validate(cfg.layers);
        TradeoffPoint pt;
        pt.config_id = config_id(pc);
        pt.miou = evaluate_miou(params, cfg, pc, eval_set, opts.policy, opts.policy_seed,
                                opts.early_exit);
        Rng bench_rng(opts.bench_seed);
        const BenchResult bench =
            bench_throughput(params, cfg, pc, opts.bench_batch, opts.bench_warmup,
                             opts.bench_iters, bench_rng);
        pt.throughput_ips = bench.images_per_second;
        pt.token_layer_products = bench.token_layer_products;
        points.push_back(std::move(pt));
    }
    return points;
}

// ---- skyline ---------------------------------------------------------------------------

std::vector<std::size_t> skyline(const std::vector<TradeoffPoint>& points) {
    const std::size_t n = points.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Throughput descending, mIoU descending within equal throughput.
    std::sort(order.begin(), order.end(), [&points](std::size_t a, std::size_t b) {
        if (points[a].throughput_ips != points[b].throughput_ips) {
            return points[a].throughput_ips > points[b].throughput_ips;
        }
        return points[a].miou > points[b].miou;
    });

    std::vector<bool> keep(n, false);
    double best_prior = -std::numeric_limits<double>::infinity();
    std::size_t i = 0;
    while (i < n) {
        // Group of equal throughput; only its max-mIoU points can survive.
        std::size_t j = i;
        const double group_max = points[order[i]].miou;
        while (j < n &&
               points[order[j]].throughput_ips == points[order[i]].throughput_ips) {
            ++j;
        }
        if (group_max > best_prior) {
            for (std::size_t t = i; t < j; ++t) {
                if (points[order[t]].miou == group_max) keep[order[t]] = true;
            }
            best_prior = group_max;
        }
        i = j;
    }

    std::vector<std::size_t> result;
    for (std::size_t t = 0; t < n; ++t) {
        if (keep[t]) result.push_back(t);
    }
    return result;
}

// ---- entropy report ----------------------------------------------------------------------

std::vector<EntropyRow> entropy_report(const ModelParams& params, const ModelConfig& cfg,
                                       const std::vector<SegSample>& eval_set,
                                       const std::vector<std::int64_t>& layers) {
    if (layers.empty()) throw ConfigError("entropy report: empty layer list");
    for (auto l : layers) {
        if (l < 1 || l > cfg.layers) {
            throw ConfigError("entropy report: layer " + std::to_string(l) +
                              " outside [1," + std::to_string(cfg.layers) + "]");
        }
    }
    std::vector<std::int64_t> probe(layers);
    std::sort(probe.begin(), probe.end());
    probe.erase(std::unique(probe.begin(), probe.end()), probe.end());
    const std::int64_t max_layer = probe.back();

    NoGradGuard ng;
    std::vector<EntropyRow> rows;
    const std::int64_t n_tokens = cfg.num_tokens();
    rows.reserve(eval_set.size() * probe.size() * static_cast<std::size_t>(n_tokens));

    for (const auto& s : eval_set) {
        std::vector<double> pixels(s.image.begin(), s.image.end());
        const Tensor image = Tensor::from({1, s.height, s.width, 3}, std::move(pixels));
        // Token-resolution labels: the patch's center pixel.
        std::vector<int> token_label(static_cast<std::size_t>(n_tokens));
        for (std::int64_t pr = 0; pr < cfg.grid_h(); ++pr) {
            for (std::int64_t pc2 = 0; pc2 < cfg.grid_w(); ++pc2) {
                const std::int64_t cy = pr * cfg.patch + cfg.patch / 2;
                const std::int64_t cx = pc2 * cfg.patch + cfg.patch / 2;
                token_label[static_cast<std::size_t>(pr * cfg.grid_w() + pc2)] =
                    s.labels[static_cast<std::size_t>(cy * cfg.image_w + cx)];
            }
        }

        auto x = patch_embed(image, params, cfg);
        std::size_t probe_idx = 0;
        for (std::int64_t l = 1; l <= max_layer; ++l) {
            x = encoder_layer(x, params.encoder[static_cast<std::size_t>(l - 1)],
                              cfg.heads);
            if (probe_idx < probe.size() && probe[probe_idx] == l) {
                ++probe_idx;
                const Tensor aux = aux_decode(x, params);
                const Tensor ent = token_entropy(aux);
                const auto& av = aux.data();
                for (std::int64_t t = 0; t < n_tokens; ++t) {
                    const double* row = av.data() + t * cfg.classes;
                    std::int64_t best = 0;
                    for (std::int64_t c = 1; c < cfg.classes; ++c) {
                        if (row[c] > row[best]) best = c;
                    }
                    const int truth = token_label[static_cast<std::size_t>(t)];
                    EntropyRow r;
                    r.layer = l;
                    r.entropy_nats = ent.data()[static_cast<std::size_t>(t)];
                    r.correct = truth != kIgnoreLabel && best == truth;
                    r.class_id = truth;
                    rows.push_back(r);
                }
            }
        }
    }
    return rows;
}

// ---- CSV ------------------------------------------------------------------------------------

void write_tradeoff_csv(const std::string& path,
                        const std::vector<TradeoffPoint>& points) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "config_id,throughput_ips,token_layer_products,miou\n";
    char buf[160];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%lld,%.9g\n", p.config_id.c_str(),
                      p.throughput_ips, static_cast<long long>(p.token_layer_products),
                      p.miou);
        out << buf;
    }
    if (!out) throw IoError("short write to '" + path + "'");
}

void write_entropy_csv(const std::string& path, const std::vector<EntropyRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "layer,entropy_nats,correct,class_id\n";
    char buf[96];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g,%d,%d\n", static_cast<long long>(r.layer),
                      r.entropy_nats, r.correct ? 1 : 0, r.class_id);
        out << buf;
    }
    if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace paumer
