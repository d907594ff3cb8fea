#include "paumer/config_io.hpp"

#include "paumer/errors.hpp"

namespace paumer {

using nlohmann::json;

void check_known_keys(const json& j, const std::set<std::string>& allowed,
                      const std::string& context) {
    if (!j.is_object()) {
        throw ConfigError(context + ": expected a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        if (allowed.find(key) == allowed.end()) {
            throw ConfigError(context + ": unknown key '" + key + "'");
        }
    }
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"image_h", cfg.image_h},
                {"image_w", cfg.image_w},
                {"patch", cfg.patch},
                {"dim", cfg.dim},
                {"layers", cfg.layers},
                {"heads", cfg.heads},
                {"classes", cfg.classes},
                {"ffn_hidden", cfg.ffn_hidden},
                {"decoder", decoder_kind_name(cfg.decoder)},
                {"mask_decoder_layers", cfg.mask_decoder_layers}};
}

ModelConfig model_config_from_json(const json& j) {
    check_known_keys(j,
                     {"image_h", "image_w", "patch", "dim", "layers", "heads", "classes",
                      "ffn_hidden", "decoder", "mask_decoder_layers"},
                     "model config");
    ModelConfig cfg;
    try {
        maybe(j, "image_h", cfg.image_h);
        maybe(j, "image_w", cfg.image_w);
        maybe(j, "patch", cfg.patch);
        maybe(j, "dim", cfg.dim);
        maybe(j, "layers", cfg.layers);
        maybe(j, "heads", cfg.heads);
        maybe(j, "classes", cfg.classes);
        maybe(j, "ffn_hidden", cfg.ffn_hidden);
        if (j.contains("decoder")) {
            cfg.decoder = decoder_kind_from_name(j.at("decoder").get<std::string>());
        }
        maybe(j, "mask_decoder_layers", cfg.mask_decoder_layers);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
    return json{{"steps", cfg.steps},
                {"batch_size", cfg.batch_size},
                {"lr", cfg.lr},
                {"optimizer", optimizer_kind_name(cfg.optimizer)},
                {"lambda", cfg.lambda_aux},
                {"pause_layers", cfg.pause_layers},
                {"tau_lo", cfg.tau_lo},
                {"tau_hi", cfg.tau_hi},
                {"seed", cfg.seed},
                {"checkpoint_every", cfg.checkpoint_every},
                {"baseline", baseline_mode_name(cfg.baseline)},
                {"ignore_index", cfg.ignore_index}};
}

TrainConfig train_config_from_json(const json& j) {
    check_known_keys(j,
                     {"steps", "batch_size", "lr", "optimizer", "lambda", "pause_layers",
                      "tau_lo", "tau_hi", "seed", "checkpoint_every", "baseline",
                      "ignore_index"},
                     "train config");
    TrainConfig cfg;
    try {
        maybe(j, "steps", cfg.steps);
        maybe(j, "batch_size", cfg.batch_size);
        maybe(j, "lr", cfg.lr);
        if (j.contains("optimizer")) {
            cfg.optimizer = optimizer_kind_from_name(j.at("optimizer").get<std::string>());
        }
        maybe(j, "lambda", cfg.lambda_aux);
        maybe(j, "pause_layers", cfg.pause_layers);
        maybe(j, "tau_lo", cfg.tau_lo);
        maybe(j, "tau_hi", cfg.tau_hi);
        maybe(j, "seed", cfg.seed);
        maybe(j, "checkpoint_every", cfg.checkpoint_every);
        if (j.contains("baseline")) {
            cfg.baseline = baseline_mode_from_name(j.at("baseline").get<std::string>());
        }
        maybe(j, "ignore_index", cfg.ignore_index);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    return cfg;
}

json task_config_to_json(const SyntheticTaskConfig& cfg) {
    return json{{"height", cfg.height},
                {"width", cfg.width},
                {"classes", cfg.classes},
                {"shapes_min", cfg.shapes_min},
                {"shapes_max", cfg.shapes_max},
                {"noise_sigma", cfg.noise_sigma},
                {"palette_seed", cfg.palette_seed},
                {"small_fraction", cfg.small_fraction},
                {"count", cfg.count},
                {"paired_shape_classes", cfg.paired_shape_classes},
                {"pair_color_delta", cfg.pair_color_delta}};
}

SyntheticTaskConfig task_config_from_json(const json& j) {
    check_known_keys(j,
                     {"height", "width", "classes", "shapes_min", "shapes_max",
                      "noise_sigma", "palette_seed", "small_fraction", "count",
                      "paired_shape_classes", "pair_color_delta"},
                     "task config");
    SyntheticTaskConfig cfg;
    try {
        maybe(j, "height", cfg.height);
        maybe(j, "width", cfg.width);
        maybe(j, "classes", cfg.classes);
        maybe(j, "shapes_min", cfg.shapes_min);
        maybe(j, "shapes_max", cfg.shapes_max);
        maybe(j, "noise_sigma", cfg.noise_sigma);
        maybe(j, "palette_seed", cfg.palette_seed);
        maybe(j, "small_fraction", cfg.small_fraction);
        maybe(j, "count", cfg.count);
        maybe(j, "paired_shape_classes", cfg.paired_shape_classes);
        maybe(j, "pair_color_delta", cfg.pair_color_delta);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("task config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

}  // namespace paumer
