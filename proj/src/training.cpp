#include "paumer/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "paumer/config_io.hpp"
#include "paumer/errors.hpp"

namespace paumer {

using nlohmann::json;

std::string optimizer_kind_name(OptimizerKind k) {
    return k == OptimizerKind::adam ? "adam" : "sgd_poly";
}

OptimizerKind optimizer_kind_from_name(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd_poly") return OptimizerKind::sgd_poly;
    throw ConfigError("unknown optimizer '" + s + "'");
}

std::string baseline_mode_name(BaselineMode m) {
    switch (m) {
        case BaselineMode::entropy: return "entropy";
        case BaselineMode::random_pausing: return "random_pausing";
        default: return "no_pausing";
    }
}

BaselineMode baseline_mode_from_name(const std::string& s) {
    if (s == "entropy") return BaselineMode::entropy;
    if (s == "random_pausing") return BaselineMode::random_pausing;
    if (s == "no_pausing") return BaselineMode::no_pausing;
    throw ConfigError("unknown baseline mode '" + s + "'");
}

// ---- TrainConfig ------------------------------------------------------------------

std::vector<std::int64_t> TrainConfig::effective_pause_layers(
    std::int64_t num_layers) const {
    if (!pause_layers.empty()) return pause_layers;
    std::vector<std::int64_t> layers;
    for (std::int64_t l = 3; l <= std::min<std::int64_t>(9, num_layers); ++l) {
        layers.push_back(l);
    }
    return layers;
}

void TrainConfig::validate(const ModelConfig& mc) const {
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (lambda_aux < 0.0) throw ConfigError("train: lambda must be >= 0");
    if (!(tau_lo >= 0.0 && tau_lo <= tau_hi && tau_hi < 1.0)) {
        throw ConfigError("train: need 0 <= tau_lo <= tau_hi < 1");
    }
    if (baseline != BaselineMode::no_pausing) {
        const auto layers = effective_pause_layers(mc.layers);
        if (layers.empty()) {
            throw ConfigError("train: empty pause layer set (model has " +
                              std::to_string(mc.layers) + " layers, pausing needs >= 3)");
        }
        for (auto l : layers) {
            if (l < 3 || l > mc.layers) {
                throw ConfigError("train: pause layer " + std::to_string(l) +
                                  " outside [3," + std::to_string(mc.layers) + "]");
            }
        }
    }
}

PauseEvent sample_pause_event(Rng& rng, const TrainConfig& tc, std::int64_t num_layers) {
    const auto layers = tc.effective_pause_layers(num_layers);
    if (layers.empty()) throw ConfigError("sample_pause_event: empty pause layer set");
    PauseEvent ev;
    ev.layer = layers[rng.uniform_index(layers.size())];
    ev.tau = rng.uniform(tc.tau_lo, tc.tau_hi);
    return ev;
}

// ---- batches and loss ----------------------------------------------------------------

TrainBatch make_batch(const std::vector<SegSample>& dataset,
                      const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("make_batch: empty index list");
    const auto& first = dataset.at(indices[0]);
    const std::int64_t h = first.height, w = first.width;
    const auto b = static_cast<std::int64_t>(indices.size());
    std::vector<double> pixels(static_cast<std::size_t>(b * h * w * 3));
    TrainBatch batch;
    batch.labels.resize(static_cast<std::size_t>(b * h * w));
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const auto& s = dataset.at(indices[static_cast<std::size_t>(bi)]);
        if (s.height != h || s.width != w) {
            throw ContractError("make_batch: mixed sample sizes");
        }
        double* dst = pixels.data() + bi * h * w * 3;
        for (std::size_t i = 0; i < s.image.size(); ++i) dst[i] = s.image[i];
        int* lab = batch.labels.data() + bi * h * w;
        for (std::size_t i = 0; i < s.labels.size(); ++i) lab[i] = s.labels[i];
    }
    batch.images = Tensor::from({b, h, w, 3}, std::move(pixels));
    return batch;
}

LossBundle paumer_loss(const TrainBatch& batch, const ModelParams& params,
                       const ModelConfig& mc, const TrainConfig& tc,
                       std::optional<PauseEvent> event, Rng* rp_rng) {
    const std::int64_t b = batch.images.dim(0);
    const std::int64_t hw = mc.image_h * mc.image_w;

    const SelectionPolicy policy = tc.baseline == BaselineMode::random_pausing
                                       ? SelectionPolicy::random
                                       : SelectionPolicy::entropy;

    PauseState state;
    state.original_tokens = mc.num_tokens();
    auto x = patch_embed(batch.images, params, mc);
    for (std::int64_t l = 1; l <= mc.layers; ++l) {
        x = encoder_layer(x, params.encoder[static_cast<std::size_t>(l - 1)], mc.heads);
        if (event && event->layer == l) {
            x = pause_step(x, event->tau, params, l, state, policy, rp_rng);
        }
    }
    auto assembled = assemble(x, state);
    auto logits = decode(assembled, params, mc);

    LossBundle out;
    out.event = event;
    out.main_loss = cross_entropy(reshape(logits, {b * hw, mc.classes}), batch.labels,
                                  tc.ignore_index);
    if (event) {
        // The stage's aux logits cover every token active at the pause layer
        // (a single event per batch, so that is the full grid).
        const auto& stage = state.stages.front();
        auto aux_pixels = logits_to_pixels(stage.aux_logits, mc);
        out.aux_loss = cross_entropy(reshape(aux_pixels, {b * hw, mc.classes}),
                                     batch.labels, tc.ignore_index);
        out.total = add(out.main_loss, scale(out.aux_loss, tc.lambda_aux));
    } else {
        out.total = out.main_loss;
    }
    return out;
}

// ---- optimizer -------------------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, double lr, std::int64_t total_steps)
    : kind_(kind), lr_(lr), total_steps_(total_steps) {}

void Optimizer::step(ModelParams& params) {
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    constexpr double kMomentum = 0.9, kPolyPower = 0.9;

    const std::int64_t t_next = t_ + 1;
    double lr_now = lr_;
    if (kind_ == OptimizerKind::sgd_poly) {
        const double frac = total_steps_ > 0
                                ? 1.0 - static_cast<double>(t_) / static_cast<double>(total_steps_)
                                : 1.0;
        lr_now = lr_ * std::pow(std::max(frac, 0.0), kPolyPower);
    }
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_next));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_next));

    std::size_t index = 0;
    params.visit([&](const std::string&, Tensor& p) {
        if (state_.size() <= index) {
            state_.emplace_back(slots_per_tensor(),
                                std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0));
        }
        auto& slots = state_[index];
        for (auto& s : slots) {
            if (s.size() != p.data().size()) {
                s.assign(p.data().size(), 0.0);
            }
        }
        const auto& g = p.grad();
        auto& v = p.data();
        if (kind_ == OptimizerKind::adam) {
            auto& m = slots[0];
            auto& vv = slots[1];
            for (std::size_t i = 0; i < v.size(); ++i) {
                const double gi = g.empty() ? 0.0 : g[i];
                m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * gi;
                vv[i] = kBeta2 * vv[i] + (1.0 - kBeta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = vv[i] / bc2;
                v[i] -= lr_now * mhat / (std::sqrt(vhat) + kEps);
            }
        } else {
            auto& mom = slots[0];
            for (std::size_t i = 0; i < v.size(); ++i) {
                const double gi = g.empty() ? 0.0 : g[i];
                mom[i] = kMomentum * mom[i] + gi;
                v[i] -= lr_now * mom[i];
            }
        }
        ++index;
    });
    t_ = t_next;
}

// ---- step records -------------------------------------------------------------------------

std::string StepRecord::to_jsonl() const {
    json j;
    j["step"] = step;
    j["loss_main"] = loss_main;
    j["loss_aux"] = loss_aux;
    j["layer"] = layer ? json(*layer) : json(nullptr);
    j["tau"] = tau ? json(*tau) : json(nullptr);
    return j.dump();
}

// ---- Trainer ---------------------------------------------------------------------------------

Trainer::Trainer(ModelConfig mc, TrainConfig tc)
    : mc_(mc), tc_(tc), opt_(tc.optimizer, tc.lr, tc.steps), rng_(tc.seed) {
    mc_.validate();
    tc_.validate(mc_);
    params_ = init_params(mc_, rng_);
}

StepRecord Trainer::step(const std::vector<SegSample>& dataset) {
    if (dataset.empty()) throw ContractError("train: empty dataset");
    std::vector<std::size_t> indices(static_cast<std::size_t>(tc_.batch_size));
    for (auto& i : indices) i = rng_.uniform_index(dataset.size());
    const TrainBatch batch = make_batch(dataset, indices);

    std::optional<PauseEvent> event;
    if (tc_.baseline != BaselineMode::no_pausing) {
        event = sample_pause_event(rng_, tc_, mc_.layers);
    }
    LossBundle lb = paumer_loss(batch, params_, mc_, tc_, event, &rng_);

    StepRecord rec;
    rec.step = step_ + 1;
    rec.loss_main = lb.main_loss.item();
    rec.loss_aux = event ? lb.aux_loss.item() : 0.0;
    if (event) {
        rec.layer = event->layer;
        rec.tau = event->tau;
    }
    if (!std::isfinite(lb.total.item())) {
        throw NumericError(
            "train: non-finite loss at step " + std::to_string(rec.step) +
            " (main=" + std::to_string(rec.loss_main) +
            ", aux=" + std::to_string(rec.loss_aux) +
            (event ? ", layer=" + std::to_string(event->layer) +
                         ", tau=" + std::to_string(event->tau)
                   : std::string(", no pause event")) +
            ")");
    }

    backward(lb.total);
    opt_.step(params_);
    params_.visit([](const std::string&, Tensor& p) { p.zero_grad(); });
    ++step_;
    return rec;
}

std::vector<StepRecord> Trainer::run(const std::vector<SegSample>& dataset,
                                     std::ostream* log,
                                     const std::string& checkpoint_path) {
    std::vector<StepRecord> records;
    records.reserve(static_cast<std::size_t>(std::max<std::int64_t>(0, tc_.steps - step_)));
    while (step_ < tc_.steps) {
        StepRecord rec = step(dataset);
        if (log != nullptr) *log << rec.to_jsonl() << '\n';
        if (!checkpoint_path.empty() && tc_.checkpoint_every > 0 &&
            step_ % tc_.checkpoint_every == 0) {
            save(checkpoint_path);
        }
        records.push_back(rec);
    }
    if (!checkpoint_path.empty()) save(checkpoint_path);
    return records;
}

void Trainer::save(const std::string& path) const {
    save_checkpoint(path, mc_, tc_, params_, opt_, step_, rng_.state());
}

Trainer Trainer::resume(const std::string& checkpoint_path) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint_path);
    Trainer t(ck.model, ck.train);
    t.params_ = std::move(ck.params);
    t.opt_.restore(ck.opt_steps, std::move(ck.opt_state));
    t.rng_.set_state(ck.rng_state);
    t.step_ = ck.step;
    return t;
}

Trainer Trainer::resume(const std::string& checkpoint_path, const ModelConfig& expected) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint_path, expected);
    Trainer t(ck.model, ck.train);
    t.params_ = std::move(ck.params);
    t.opt_.restore(ck.opt_steps, std::move(ck.opt_state));
    t.rng_.set_state(ck.rng_state);
    t.step_ = ck.step;
    return t;
}

// ---- checkpoint file format ----------------------------------------------------------------
// "PMCKPT1\0" | u32 version | u32 json_len, json {model, train} | u64 step |
// u64 rng[4] | u8 opt_kind | u64 opt_steps | u32 tensor_count |
// per tensor: u16 name_len, name, u8 ndim, u32 dims[], f32 values[] |
// u8 has_opt_state | per tensor, per slot (adam m,v / sgd momentum): f32[]
// All integers and floats little-endian.

namespace {

constexpr char kCkptMagic[8] = {'P', 'M', 'C', 'K', 'P', 'T', '1', '\0'};

struct ByteWriter {
    std::ofstream out;
    explicit ByteWriter(const std::string& path)
        : out(path, std::ios::binary | std::ios::trunc) {
        if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    }
    void bytes(const void* p, std::size_t n) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) {
        const std::uint8_t b[2] = {static_cast<std::uint8_t>(v),
                                   static_cast<std::uint8_t>(v >> 8)};
        bytes(b, 2);
    }
    void u32(std::uint32_t v) {
        std::uint8_t b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
        bytes(b, 4);
    }
    void u64(std::uint64_t v) {
        std::uint8_t b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
        bytes(b, 8);
    }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f32_array(const std::vector<double>& values) {
        for (double d : values) f32(static_cast<float>(d));
    }
};

struct ByteReader {
    std::ifstream in;
    std::uint64_t offset = 0;
    std::string path;
    explicit ByteReader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("checkpoint: cannot open '" + p + "'");
    }
    void bytes(void* p, std::size_t n, const char* what) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw FormatError("checkpoint: truncated " + std::string(what) + " in '" +
                                  path + "'",
                              offset);
        }
        offset += n;
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        bytes(&v, 1, what);
        return v;
    }
    std::uint16_t u16(const char* what) {
        std::uint8_t b[2];
        bytes(b, 2, what);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32(const char* what) {
        std::uint8_t b[4];
        bytes(b, 4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        std::uint8_t b[8];
        bytes(b, 8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    void f32_array(std::vector<double>& out, std::size_t n, const char* what) {
        out.resize(n);
        std::vector<std::uint8_t> raw(n * 4);
        bytes(raw.data(), raw.size(), what);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) {
                bits |= static_cast<std::uint32_t>(raw[i * 4 + static_cast<std::size_t>(b)])
                        << (8 * b);
            }
            float f;
            std::memcpy(&f, &bits, 4);
            out[i] = static_cast<double>(f);
        }
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& mc,
                     const TrainConfig& tc, const ModelParams& params,
                     const Optimizer& opt, std::int64_t step,
                     const std::array<std::uint64_t, 4>& rng_state) {
    ByteWriter w(path);
    w.bytes(kCkptMagic, sizeof(kCkptMagic));
    w.u32(1);

    json meta;
    meta["model"] = model_config_to_json(mc);
    meta["train"] = train_config_to_json(tc);
    const std::string meta_str = meta.dump();
    w.u32(static_cast<std::uint32_t>(meta_str.size()));
    w.bytes(meta_str.data(), meta_str.size());

    w.u64(static_cast<std::uint64_t>(step));
    for (auto s : rng_state) w.u64(s);
    w.u8(opt.kind() == OptimizerKind::adam ? 0 : 1);
    w.u64(static_cast<std::uint64_t>(opt.steps_taken()));

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    params.visit([&tensors](const std::string& name, const Tensor& t) {
        tensors.emplace_back(name, &t);
    });
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u8(static_cast<std::uint8_t>(t->rank()));
        for (auto d : t->shape()) w.u32(static_cast<std::uint32_t>(d));
        w.f32_array(t->data());
    }

    const auto& state = opt.state();
    const bool has_state = !state.empty();
    w.u8(has_state ? 1 : 0);
    if (has_state) {
        if (state.size() != tensors.size()) {
            throw ContractError("checkpoint: optimizer state does not cover parameters");
        }
        for (const auto& slots : state) {
            for (const auto& buf : slots) w.f32_array(buf);
        }
    }
    if (!w.out) throw IoError("checkpoint: short write to '" + path + "'");
}

namespace {

LoadedCheckpoint load_checkpoint_impl(const std::string& path,
                                      const ModelConfig* expected) {
    ByteReader r(path);
    char magic[sizeof(kCkptMagic)];
    r.bytes(magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kCkptMagic, sizeof(kCkptMagic)) != 0) {
        throw FormatError("checkpoint: bad magic in '" + path + "'", 0);
    }
    const std::uint32_t version = r.u32("version");
    if (version != 1) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version),
                          r.offset - 4);
    }
    const std::uint32_t meta_len = r.u32("metadata length");
    std::string meta_str(meta_len, '\0');
    r.bytes(meta_str.data(), meta_len, "metadata");

    LoadedCheckpoint ck;
    try {
        const json meta = json::parse(meta_str);
        ck.model = model_config_from_json(meta.at("model"));
        ck.train = train_config_from_json(meta.at("train"));
    } catch (const json::exception& e) {
        throw FormatError("checkpoint: bad metadata: " + std::string(e.what()),
                          r.offset - meta_len);
    }

    ck.step = static_cast<std::int64_t>(r.u64("step"));
    for (auto& s : ck.rng_state) s = r.u64("rng state");
    ck.opt_kind = r.u8("optimizer kind") == 0 ? OptimizerKind::adam
                                              : OptimizerKind::sgd_poly;
    ck.opt_steps = static_cast<std::int64_t>(r.u64("optimizer steps"));

    const ModelConfig& build_cfg = expected != nullptr ? *expected : ck.model;
    Rng scratch(0);
    ck.params = init_params(build_cfg, scratch);

    std::vector<std::pair<std::string, Tensor*>> tensors;
    ck.params.visit([&tensors](const std::string& name, Tensor& t) {
        tensors.emplace_back(name, &t);
    });

    const std::uint32_t tensor_count = r.u32("tensor count");
    if (tensor_count != tensors.size()) {
        throw ShapeError("checkpoint: stores " + std::to_string(tensor_count) +
                         " tensors, model needs " + std::to_string(tensors.size()));
    }
    for (auto& [name, t] : tensors) {
        const std::uint16_t name_len = r.u16("tensor name length");
        std::string stored_name(name_len, '\0');
        r.bytes(stored_name.data(), name_len, "tensor name");
        if (stored_name != name) {
            throw ShapeError("checkpoint: expected tensor '" + name + "', found '" +
                             stored_name + "'");
        }
        const std::uint8_t ndim = r.u8("tensor rank");
        Shape stored(ndim);
        for (auto& d : stored) d = r.u32("tensor dim");
        if (stored != t->shape()) {
            throw ShapeError("checkpoint: tensor '" + name + "' has shape " +
                             shape_str(stored) + ", expected " + shape_str(t->shape()));
        }
        r.f32_array(t->data(), t->data().size(), "tensor values");
    }

    const bool has_state = r.u8("optimizer state flag") != 0;
    if (has_state) {
        const std::size_t slots = ck.opt_kind == OptimizerKind::adam ? 2 : 1;
        ck.opt_state.resize(tensors.size());
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            ck.opt_state[i].resize(slots);
            for (std::size_t s = 0; s < slots; ++s) {
                r.f32_array(ck.opt_state[i][s], tensors[i].second->data().size(),
                            "optimizer state");
            }
        }
    }
    return ck;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
    return load_checkpoint_impl(path, nullptr);
}

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
    return load_checkpoint_impl(path, &expected);
}

}  // namespace paumer
