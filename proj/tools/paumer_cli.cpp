// paumer: dataset generation, randomized-pause training, pause-configuration
// sweeps, throughput benchmarking and entropy reports from one binary.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "paumer/config_io.hpp"
#include "paumer/data.hpp"
#include "paumer/errors.hpp"
#include "paumer/eval.hpp"
#include "paumer/model.hpp"
#include "paumer/pausing.hpp"
#include "paumer/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace paumer;

namespace {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SyntheticTaskConfig task;
    SweepOptions eval_opts;
    std::string out_dir = ".";

    bool has_model = false, has_train = false, has_task = false;
};

SweepOptions eval_opts_from_json(const json& j) {
    check_known_keys(
        j, {"bench_batch", "bench_warmup", "bench_iters", "policy_seed", "bench_seed"},
        "eval config");
    SweepOptions opts;
    try {
        if (j.contains("bench_batch")) opts.bench_batch = j.at("bench_batch").get<std::int64_t>();
        if (j.contains("bench_warmup")) opts.bench_warmup = j.at("bench_warmup").get<int>();
        if (j.contains("bench_iters")) opts.bench_iters = j.at("bench_iters").get<int>();
        if (j.contains("policy_seed")) opts.policy_seed = j.at("policy_seed").get<std::uint64_t>();
        if (j.contains("bench_seed")) opts.bench_seed = j.at("bench_seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("eval config: ") + e.what());
    }
    return opts;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    check_known_keys(j, {"model", "train", "task", "eval", "out_dir"}, "run config");
    RunConfig rc;
    if (j.contains("model")) {
        rc.model = model_config_from_json(j.at("model"));
        rc.has_model = true;
    }
    if (j.contains("train")) {
        rc.train = train_config_from_json(j.at("train"));
        rc.has_train = true;
    }
    if (j.contains("task")) {
        rc.task = task_config_from_json(j.at("task"));
        rc.has_task = true;
    }
    if (j.contains("eval")) rc.eval_opts = eval_opts_from_json(j.at("eval"));
    if (j.contains("out_dir")) rc.out_dir = j.at("out_dir").get<std::string>();
    return rc;
}

// "3:0.4,5:0.2" -> PauseConfig
PauseConfig parse_pause_shorthand(const std::string& text) {
    PauseConfig pc;
    if (text.empty()) return pc;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto comma = text.find(',', pos);
        const std::string part =
            text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        const auto colon = part.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("pause shorthand: expected layer:tau in '" + part + "'");
        }
        try {
            pc.entries.push_back(
                {std::stoll(part.substr(0, colon)), std::stod(part.substr(colon + 1))});
        } catch (const std::exception&) {
            throw ConfigError("pause shorthand: cannot parse '" + part + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return pc;
}

std::vector<std::int64_t> parse_layer_list(const std::string& text) {
    std::vector<std::int64_t> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto comma = text.find(',', pos);
        const std::string part =
            text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            out.push_back(std::stoll(part));
        } catch (const std::exception&) {
            throw ConfigError("layer list: cannot parse '" + part + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

LoadedCheckpoint load_model_checkpoint(const std::string& path, const RunConfig& rc) {
    if (rc.has_model) return load_checkpoint(path, rc.model);
    return load_checkpoint(path);
}

int cmd_gen(const std::string& config_path, const std::string& out_path,
            std::optional<std::int64_t> count, std::optional<std::uint64_t> seed) {
    RunConfig rc = load_run_config(config_path);
    if (!rc.has_task) throw ConfigError("gen: config needs a 'task' section");
    const auto n = count.value_or(rc.task.count);
    Rng rng(seed.value_or(rc.train.seed));
    std::vector<SegSample> samples;
    samples.reserve(static_cast<std::size_t>(n));
    std::uint64_t digest = 0xcbf29ce484222325ULL;
    for (std::int64_t i = 0; i < n; ++i) {
        samples.push_back(generate_sample(rng, rc.task));
        const auto d = sample_digest(samples.back());
        for (int b = 0; b < 8; ++b) {
            digest ^= (d >> (8 * b)) & 0xff;
            digest *= 0x100000001b3ULL;
        }
    }
    write_dataset(out_path, samples, rc.task.classes);
    std::printf("wrote %lld samples to %s digest=%016llx\n", static_cast<long long>(n),
                out_path.c_str(), static_cast<unsigned long long>(digest));
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& dataset_path,
              std::optional<std::int64_t> steps, std::optional<std::uint64_t> seed,
              std::optional<std::string> baseline, const std::string& resume_from,
              std::optional<std::string> out_dir_flag) {
    RunConfig rc = load_run_config(config_path);
    if (!rc.has_model || !rc.has_train) {
        throw ConfigError("train: config needs 'model' and 'train' sections");
    }
    if (steps) rc.train.steps = *steps;
    if (seed) rc.train.seed = *seed;
    if (baseline) rc.train.baseline = baseline_mode_from_name(*baseline);
    const std::string out_dir = out_dir_flag.value_or(rc.out_dir);
    fs::create_directories(out_dir);

    std::int64_t classes = 0;
    auto dataset = read_dataset(dataset_path, &classes);
    if (dataset.empty()) throw ConfigError("train: dataset '" + dataset_path + "' is empty");
    if (classes != rc.model.classes) {
        throw ConfigError("train: dataset has " + std::to_string(classes) +
                          " classes, model expects " + std::to_string(rc.model.classes));
    }

    std::optional<Trainer> trainer;
    if (!resume_from.empty()) {
        trainer.emplace(Trainer::resume(resume_from, rc.model));
        if (steps) trainer->set_total_steps(*steps);
    } else {
        trainer.emplace(rc.model, rc.train);
    }

    const std::string ckpt = (fs::path(out_dir) / "checkpoint.pmck").string();
    const std::string log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    std::ofstream log(log_path, resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("train: cannot open log '" + log_path + "'");

    const auto records = trainer->run(dataset, &log, ckpt);
    double final_main = 0.0;
    if (!records.empty()) final_main = records.back().loss_main;
    std::printf("trained to step %lld, final loss_main=%.6f, checkpoint=%s\n",
                static_cast<long long>(trainer->current_step()), final_main, ckpt.c_str());
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& checkpoint_path,
              const std::string& dataset_path, bool table1,
              const std::string& configs_path, bool skyline_flag, bool early_exit,
              bool random_policy, const std::string& out_path) {
    RunConfig rc = load_run_config(config_path);
    LoadedCheckpoint ck = load_model_checkpoint(checkpoint_path, rc);
    const ModelConfig& mc = rc.has_model ? rc.model : ck.model;

    std::vector<PauseConfig> configs;
    if (table1 || configs_path.empty()) {
        // The thirteen reference configurations are the default sweep list.
        configs = table1_configs();
    } else {
        std::ifstream in(configs_path);
        if (!in) throw IoError("sweep: cannot open '" + configs_path + "'");
        json arr;
        try {
            in >> arr;
        } catch (const json::exception& e) {
            throw ConfigError(std::string("sweep configs: ") + e.what());
        }
        if (!arr.is_array()) throw ConfigError("sweep configs: expected a JSON array");
        for (const auto& item : arr) configs.push_back(PauseConfig::from_json(item.dump()));
    }
    for (const auto& pc : configs) pc.validate(mc.layers);

    std::int64_t classes = 0;
    auto eval_set = read_dataset(dataset_path, &classes);
    if (classes != mc.classes) {
        throw ConfigError("sweep: dataset classes do not match the model");
    }

    SweepOptions opts = rc.eval_opts;
    opts.early_exit = early_exit;
    opts.policy = random_policy ? SelectionPolicy::random : SelectionPolicy::entropy;

    const auto points = sweep(ck.params, mc, configs, eval_set, opts);
    write_tradeoff_csv(out_path, points);

    // JSON echo of what was swept, next to the CSV.
    json echo;
    echo["configs"] = json::array();
    for (std::size_t i = 0; i < configs.size(); ++i) {
        echo["configs"].push_back({{"id", points[i].config_id},
                                   {"entries", json::parse(configs[i].to_json())}});
    }
    echo["eval"] = {{"bench_batch", opts.bench_batch},
                    {"bench_warmup", opts.bench_warmup},
                    {"bench_iters", opts.bench_iters},
                    {"policy", random_policy ? "random" : "entropy"},
                    {"early_exit", early_exit},
                    {"dataset", dataset_path},
                    {"checkpoint", checkpoint_path}};
    std::ofstream echo_out(out_path + ".json", std::ios::trunc);
    echo_out << echo.dump(2) << "\n";

    if (skyline_flag) {
        const auto maximal = skyline(points);
        std::vector<TradeoffPoint> sky;
        for (auto i : maximal) sky.push_back(points[i]);
        const fs::path p(out_path);
        const std::string sky_path =
            (p.parent_path() / (p.stem().string() + "_skyline" + p.extension().string()))
                .string();
        write_tradeoff_csv(sky_path, sky);
        std::printf("skyline: %zu of %zu points -> %s\n", sky.size(), points.size(),
                    sky_path.c_str());
    }
    std::printf("swept %zu configurations -> %s\n", points.size(), out_path.c_str());
    return 0;
}

int cmd_bench(const std::string& config_path, const std::string& checkpoint_path,
              const std::string& pause_text, std::optional<std::int64_t> batch,
              std::optional<int> warmup, std::optional<int> iters) {
    RunConfig rc = load_run_config(config_path);
    LoadedCheckpoint ck = load_model_checkpoint(checkpoint_path, rc);
    const ModelConfig& mc = rc.has_model ? rc.model : ck.model;
    const PauseConfig pc = parse_pause_shorthand(pause_text);
    pc.validate(mc.layers);

    SweepOptions opts = rc.eval_opts;
    Rng rng(opts.bench_seed);
    const auto res = bench_throughput(ck.params, mc, pc, batch.value_or(opts.bench_batch),
                                      warmup.value_or(opts.bench_warmup),
                                      iters.value_or(opts.bench_iters), rng);
    const CostModel cm = CostModel::from_config(mc);
    json out = {{"config", config_id(pc)},
                {"images_per_second", res.images_per_second},
                {"median_seconds", res.median_seconds},
                {"token_layer_products", res.token_layer_products},
                {"per_layer_active",
                 CostModel::active_counts(mc.layers, mc.num_tokens(), pc)},
                {"analytical_cost", cm.total_cost(mc, pc)}};
    std::printf("%s\n", out.dump().c_str());
    return 0;
}

int cmd_report(const std::string& config_path, const std::string& checkpoint_path,
               const std::string& dataset_path, const std::string& layers_text,
               const std::string& out_path) {
    RunConfig rc = load_run_config(config_path);
    LoadedCheckpoint ck = load_model_checkpoint(checkpoint_path, rc);
    const ModelConfig& mc = rc.has_model ? rc.model : ck.model;

    std::vector<std::int64_t> layers;
    if (!layers_text.empty()) {
        layers = parse_layer_list(layers_text);
    } else {
        for (std::int64_t l = 2; l <= mc.layers; l += 2) layers.push_back(l);
    }

    std::int64_t classes = 0;
    auto eval_set = read_dataset(dataset_path, &classes);
    if (classes != mc.classes) {
        throw ConfigError("report: dataset classes do not match the model");
    }
    const auto rows = entropy_report(ck.params, mc, eval_set, layers);
    write_entropy_csv(out_path, rows);
    std::printf("wrote %zu entropy rows -> %s\n", rows.size(), out_path.c_str());
    return 0;
}

int cmd_convert(const std::string& images_dir, const std::string& labels_dir,
                std::int64_t classes, const std::string& out_path) {
    const auto n = convert_png_dir(images_dir, labels_dir, classes, out_path);
    std::printf("converted %lld image/label pairs -> %s\n", static_cast<long long>(n),
                out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Entropy-based patch pausing for segmentation transformers"};
    app.require_subcommand(1);

    std::string config_path, out_path, dataset_path, checkpoint_path;
    std::string resume_from, configs_path, pause_text, layers_text;
    std::string images_dir, labels_dir, baseline_str, out_dir_str;
    std::int64_t count_val = -1, batch_val = -1, classes_val = 0;
    std::uint64_t seed_val = 0;
    int warmup_val = -1, iters_val = -1;
    std::int64_t steps_val = -1;
    bool table1 = false, skyline_flag = false, early_exit = false, random_policy = false;

    auto* gen = app.add_subcommand("gen", "Generate a synthetic PMSEG1 dataset");
    gen->add_option("--config", config_path, "Run config JSON")->required();
    gen->add_option("--out", out_path, "Output dataset path")->required();
    auto* gen_count = gen->add_option("--count", count_val, "Sample count override");
    auto* gen_seed = gen->add_option("--seed", seed_val, "Generator seed override");

    auto* train = app.add_subcommand("train", "Train with randomized pausing");
    train->add_option("--config", config_path, "Run config JSON")->required();
    train->add_option("--dataset", dataset_path, "PMSEG1 training data")->required();
    auto* tr_steps = train->add_option("--steps", steps_val, "Step count override");
    auto* tr_seed = train->add_option("--seed", seed_val, "Seed override");
    auto* tr_base = train->add_option("--baseline", baseline_str,
                                      "entropy | random_pausing | no_pausing");
    train->add_option("--resume", resume_from, "Checkpoint to resume from");
    auto* tr_out = train->add_option("--out-dir", out_dir_str, "Output directory override");

    auto* sw = app.add_subcommand("sweep", "Evaluate pause configurations");
    sw->add_option("--config", config_path, "Run config JSON")->required();
    sw->add_option("--checkpoint", checkpoint_path, "Trained checkpoint")->required();
    sw->add_option("--dataset", dataset_path, "PMSEG1 evaluation data")->required();
    sw->add_option("--out", out_path, "Output CSV")->required();
    sw->add_flag("--table1", table1, "Use the thirteen reference configurations");
    sw->add_option("--configs", configs_path, "JSON array of pause configurations");
    sw->add_flag("--skyline", skyline_flag, "Also write the dominance-maximal subset");
    sw->add_flag("--early-exit", early_exit, "Use auxiliary logits for paused tokens");
    sw->add_flag("--random-policy", random_policy, "Pause random tokens instead");

    auto* bench = app.add_subcommand("bench", "Measure throughput for one configuration");
    bench->add_option("--config", config_path, "Run config JSON")->required();
    bench->add_option("--checkpoint", checkpoint_path, "Trained checkpoint")->required();
    bench->add_option("--pause", pause_text, "Pause shorthand, e.g. 3:0.4,5:0.2");
    auto* be_batch = bench->add_option("--batch", batch_val, "Batch size");
    auto* be_warm = bench->add_option("--warmup", warmup_val, "Warmup iterations");
    auto* be_iters = bench->add_option("--iters", iters_val, "Timed iterations");

    auto* report = app.add_subcommand("report", "Per-token aux entropy CSV");
    report->add_option("--config", config_path, "Run config JSON")->required();
    report->add_option("--checkpoint", checkpoint_path, "Trained checkpoint")->required();
    report->add_option("--dataset", dataset_path, "PMSEG1 evaluation data")->required();
    report->add_option("--layers", layers_text, "Comma list; default every second layer");
    report->add_option("--out", out_path, "Output CSV")->required();

    auto* convert = app.add_subcommand("convert", "PNG pairs -> PMSEG1");
    convert->add_option("--images", images_dir, "Directory of image PNGs")->required();
    convert->add_option("--labels", labels_dir, "Directory of label PNGs")->required();
    convert->add_option("--classes", classes_val, "Class count")->required();
    convert->add_option("--out", out_path, "Output dataset path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen(config_path, out_path,
                           gen_count->count() ? std::optional(count_val) : std::nullopt,
                           gen_seed->count() ? std::optional(seed_val) : std::nullopt);
        }
        if (train->parsed()) {
            return cmd_train(config_path, dataset_path,
                             tr_steps->count() ? std::optional(steps_val) : std::nullopt,
                             tr_seed->count() ? std::optional(seed_val) : std::nullopt,
                             tr_base->count() ? std::optional(baseline_str) : std::nullopt,
                             resume_from,
                             tr_out->count() ? std::optional(out_dir_str) : std::nullopt);
        }
        if (sw->parsed()) {
            return cmd_sweep(config_path, checkpoint_path, dataset_path, table1,
                             configs_path, skyline_flag, early_exit, random_policy,
                             out_path);
        }
        if (bench->parsed()) {
            return cmd_bench(config_path, checkpoint_path, pause_text,
                             be_batch->count() ? std::optional(batch_val) : std::nullopt,
                             be_warm->count() ? std::optional(warmup_val) : std::nullopt,
                             be_iters->count() ? std::optional(iters_val) : std::nullopt);
        }
        if (report->parsed()) {
            return cmd_report(config_path, checkpoint_path, dataset_path, layers_text,
                              out_path);
        }
        if (convert->parsed()) {
            return cmd_convert(images_dir, labels_dir, classes_val, out_path);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const InvalidLabelError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 4;
    } catch (const IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 4;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 0;
}
