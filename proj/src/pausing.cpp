#include "paumer/pausing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "paumer/errors.hpp"

namespace paumer {

using nlohmann::json;

// ---- PauseConfig ---------------------------------------------------------------

void PauseConfig::validate(std::int64_t num_layers) const {
    std::int64_t prev = 0;
    for (const auto& e : entries) {
        if (e.layer <= prev) {
            throw ConfigError("pause config: layer indices must be strictly increasing");
        }
        if (e.layer < 1 || e.layer > num_layers) {
            throw ConfigError("pause config: layer " + std::to_string(e.layer) +
                              " outside [1," + std::to_string(num_layers) + "]");
        }
        if (!(e.tau >= 0.0 && e.tau < 1.0)) {
            throw ConfigError("pause config: tau " + std::to_string(e.tau) +
                              " outside [0,1)");
        }
        prev = e.layer;
    }
}

const PauseEntry* PauseConfig::at_layer(std::int64_t layer) const {
    for (const auto& e : entries) {
        if (e.layer == layer) return &e;
    }
    return nullptr;
}

std::string PauseConfig::to_json() const {
    json arr = json::array();
    for (const auto& e : entries) arr.push_back({{"layer", e.layer}, {"tau", e.tau}});
    return arr.dump();
}

PauseConfig PauseConfig::from_json(const std::string& text) {
    json arr;
    try {
        arr = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("pause config: invalid JSON: ") + e.what());
    }
    if (!arr.is_array()) throw ConfigError("pause config: expected a JSON array");
    PauseConfig pc;
    for (const auto& item : arr) {
        if (!item.is_object() || !item.contains("layer") || !item.contains("tau")) {
            throw ConfigError("pause config: entries need {\"layer\",\"tau\"}");
        }
        for (const auto& [key, _] : item.items()) {
            if (key != "layer" && key != "tau") {
                throw ConfigError("pause config: unknown key '" + key + "'");
            }
        }
        pc.entries.push_back({item["layer"].get<std::int64_t>(), item["tau"].get<double>()});
    }
    return pc;
}

std::string PauseStats::to_json() const {
    json j;
    j["per_layer_active"] = per_layer_active;
    j["token_layer_products"] = token_layer_products;
    return j.dump();
}

// ---- entropy --------------------------------------------------------------------

Tensor token_entropy(const Tensor& logits) {
    if (logits.rank() != 3) {
        throw ShapeError("token_entropy: expected [B,n,K], got " + shape_str(logits.shape()));
    }
    const std::int64_t b = logits.dim(0), n = logits.dim(1), k = logits.dim(2);
    std::vector<double> h(static_cast<std::size_t>(b * n));
    const auto& zv = logits.data();
    std::vector<double> p(static_cast<std::size_t>(k));
    for (std::int64_t t = 0; t < b * n; ++t) {
        const double* row = zv.data() + t * k;
        double mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            p[static_cast<std::size_t>(j)] = std::exp(row[j] - mx);
            s += p[static_cast<std::size_t>(j)];
        }
        const double inv = 1.0 / s;
        double ent = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const double pj = p[static_cast<std::size_t>(j)] * inv;
            if (pj >= 1e-30) ent -= pj * std::log(pj);
        }
        h[static_cast<std::size_t>(t)] = ent;
    }
    NoGradGuard ng;
    return Tensor::from({b, n}, std::move(h));
}

// ---- pauser / assembler -----------------------------------------------------------

Tensor pause_step(const Tensor& x, double tau, const ModelParams& params,
                  std::int64_t layer, PauseState& state, SelectionPolicy policy,
                  Rng* rng) {
    if (!(tau >= 0.0 && tau < 1.0)) {
        throw ConfigError("pause_step: tau " + std::to_string(tau) + " outside [0,1)");
    }
    const std::int64_t b = x.dim(0), n = x.dim(1);
    const auto paused_count = static_cast<std::int64_t>(tau * static_cast<double>(n));
    const std::int64_t keep_count = n - paused_count;

    PauseStage stage;
    stage.snapshot = x;
    stage.layer = layer;
    stage.aux_logits = aux_decode(x, params);
    stage.kept.resize(static_cast<std::size_t>(b));

    if (policy == SelectionPolicy::random) {
        if (rng == nullptr) {
            throw ContractError("pause_step: random selection needs an rng");
        }
        for (std::int64_t bi = 0; bi < b; ++bi) {
            stage.kept[static_cast<std::size_t>(bi)] =
                rng->sample_without_replacement(n, keep_count);
        }
    } else {
        const Tensor ent = token_entropy(stage.aux_logits);
        const auto& hv = ent.data();
        for (std::int64_t bi = 0; bi < b; ++bi) {
            const double* h = hv.data() + bi * n;
            std::vector<std::int64_t> order(static_cast<std::size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            // Partial selection: the paused_count lowest-entropy tokens end up
            // in front; ties broken toward the lower index.
            auto lower = [h](std::int64_t a2, std::int64_t b2) {
                if (h[a2] != h[b2]) return h[a2] < h[b2];
                return a2 < b2;
            };
            std::nth_element(order.begin(), order.begin() + paused_count, order.end(),
                             lower);
            std::vector<std::int64_t> kept(order.begin() + paused_count, order.end());
            std::sort(kept.begin(), kept.end());
            stage.kept[static_cast<std::size_t>(bi)] = std::move(kept);
        }
    }

    auto survivors = gather_tokens(x, stage.kept);
    state.stages.push_back(std::move(stage));
    return survivors;
}

Tensor assemble(const Tensor& x_final, const PauseState& state) {
    Tensor cur = x_final;
    for (auto it = state.stages.rbegin(); it != state.stages.rend(); ++it) {
        const auto expected = static_cast<std::int64_t>(it->kept.front().size());
        if (cur.dim(1) != expected) {
            throw ContractError("assemble: got " + std::to_string(cur.dim(1)) +
                                " tokens where stage at layer " + std::to_string(it->layer) +
                                " kept " + std::to_string(expected));
        }
        cur = scatter_tokens(it->snapshot, cur, it->kept);
    }
    return cur;
}

// ---- full forwards -----------------------------------------------------------------

std::pair<Tensor, PauseStats> forward_with_pausing(
    const Tensor& image, const ModelParams& params, const ModelConfig& cfg,
    const PauseConfig& pause_config, SelectionPolicy policy, Rng* rng,
    PauseState* state_out) {
    cfg.validate();
    pause_config.validate(cfg.layers);

    PauseState state;
    state.original_tokens = cfg.num_tokens();
    PauseStats stats;
    stats.per_layer_active.reserve(static_cast<std::size_t>(cfg.layers));

    auto x = patch_embed(image, params, cfg);
    for (std::int64_t l = 1; l <= cfg.layers; ++l) {
        stats.per_layer_active.push_back(x.dim(1));
        stats.token_layer_products += x.dim(1);
        x = encoder_layer(x, params.encoder[static_cast<std::size_t>(l - 1)], cfg.heads);
        if (const auto* entry = pause_config.at_layer(l)) {
            x = pause_step(x, entry->tau, params, l, state, policy, rng);
        }
    }
    auto assembled = assemble(x, state);
    auto logits = decode(assembled, params, cfg);
    if (state_out != nullptr) *state_out = std::move(state);
    return {std::move(logits), std::move(stats)};
}

Tensor forward_early_exit(const Tensor& image, const ModelParams& params,
                          const ModelConfig& cfg, const PauseConfig& pause_config,
                          SelectionPolicy policy, Rng* rng, PauseStats* stats_out) {
    cfg.validate();
    pause_config.validate(cfg.layers);

    const std::int64_t b = image.dim(0);
    const std::int64_t n_total = cfg.num_tokens();
    const std::int64_t k = cfg.classes;

    // Original-index bookkeeping for the active set of each batch item.
    std::vector<std::vector<std::int64_t>> active_orig(static_cast<std::size_t>(b));
    for (auto& v : active_orig) {
        v.resize(static_cast<std::size_t>(n_total));
        std::iota(v.begin(), v.end(), 0);
    }
    // Stashed aux logits for exited tokens, by original index.
    std::vector<double> exit_logits(static_cast<std::size_t>(b * n_total * k), 0.0);

    PauseState state;
    state.original_tokens = n_total;
    PauseStats stats;

    auto x = patch_embed(image, params, cfg);
    for (std::int64_t l = 1; l <= cfg.layers; ++l) {
        stats.per_layer_active.push_back(x.dim(1));
        stats.token_layer_products += x.dim(1);
        x = encoder_layer(x, params.encoder[static_cast<std::size_t>(l - 1)], cfg.heads);
        if (const auto* entry = pause_config.at_layer(l)) {
            const std::int64_t n_before = x.dim(1);
            x = pause_step(x, entry->tau, params, l, state, policy, rng);
            const auto& stage = state.stages.back();
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const auto& kept = stage.kept[static_cast<std::size_t>(bi)];
                auto& orig = active_orig[static_cast<std::size_t>(bi)];
                std::vector<bool> is_kept(static_cast<std::size_t>(n_before), false);
                for (auto i : kept) is_kept[static_cast<std::size_t>(i)] = true;
                std::vector<std::int64_t> next_orig;
                next_orig.reserve(kept.size());
                for (std::int64_t local = 0; local < n_before; ++local) {
                    if (is_kept[static_cast<std::size_t>(local)]) {
                        next_orig.push_back(orig[static_cast<std::size_t>(local)]);
                        continue;
                    }
                    // Token exits here: stash its aux logits by original index.
                    const double* src =
                        stage.aux_logits.data().data() + (bi * n_before + local) * k;
                    double* dst =
                        exit_logits.data() +
                        (bi * n_total + orig[static_cast<std::size_t>(local)]) * k;
                    std::copy(src, src + k, dst);
                }
                orig = std::move(next_orig);
            }
        }
    }

    // Main decoder sees only the surviving tokens; its per-token logits land
    // at their original grid positions, the rest keep their stashed values.
    Tensor main_logits = cfg.decoder == DecoderKind::linear
                             ? decode_tokens_linear(x, params)
                             : decode_tokens_mask(x, params, cfg);
    Tensor base = Tensor::from({b, n_total, k}, std::move(exit_logits));
    auto token_logits = scatter_tokens(base, main_logits, active_orig);
    if (stats_out != nullptr) *stats_out = std::move(stats);
    return logits_to_pixels(token_logits, cfg);
}

}  // namespace paumer
