#include "paumer/model.hpp"

#include <cmath>
#include <cstring>

#include "paumer/errors.hpp"

namespace paumer {

std::string decoder_kind_name(DecoderKind k) {
    return k == DecoderKind::linear ? "linear" : "mask_transformer";
}

DecoderKind decoder_kind_from_name(const std::string& name) {
    if (name == "linear") return DecoderKind::linear;
    if (name == "mask_transformer") return DecoderKind::mask_transformer;
    throw ConfigError("unknown decoder kind '" + name + "'");
}

void ModelConfig::validate() const {
    if (image_h <= 0 || image_w <= 0 || patch <= 0) {
        throw ConfigError("model: image and patch sizes must be positive");
    }
    if (image_h % patch != 0 || image_w % patch != 0) {
        throw ConfigError("model: patch " + std::to_string(patch) +
                          " does not divide image " + std::to_string(image_h) + "x" +
                          std::to_string(image_w));
    }
    if (dim <= 0 || heads <= 0 || dim % heads != 0) {
        throw ConfigError("model: dim " + std::to_string(dim) +
                          " not divisible by heads " + std::to_string(heads));
    }
    if (layers < 1) throw ConfigError("model: need at least one encoder layer");
    if (classes < 2) throw ConfigError("model: need at least two classes");
    if (mask_decoder_layers < 1) {
        throw ConfigError("model: mask decoder needs at least one layer");
    }
}

// ---- parameters --------------------------------------------------------------

namespace {

LayerParams init_layer(std::int64_t d, std::int64_t f, Rng& rng) {
    const double sigma = 0.02;
    LayerParams p;
    p.ln1_g = Tensor::full({d}, 1.0, true);
    p.ln1_b = Tensor::zeros({d}, true);
    p.wq = Tensor::randn({d, d}, rng, sigma, true);
    p.bq = Tensor::zeros({d}, true);
    p.wk = Tensor::randn({d, d}, rng, sigma, true);
    p.bk = Tensor::zeros({d}, true);
    p.wv = Tensor::randn({d, d}, rng, sigma, true);
    p.bv = Tensor::zeros({d}, true);
    p.wo = Tensor::randn({d, d}, rng, sigma, true);
    p.bo = Tensor::zeros({d}, true);
    p.ln2_g = Tensor::full({d}, 1.0, true);
    p.ln2_b = Tensor::zeros({d}, true);
    p.w1 = Tensor::randn({d, f}, rng, sigma, true);
    p.b1 = Tensor::zeros({f}, true);
    p.w2 = Tensor::randn({f, d}, rng, sigma, true);
    p.b2 = Tensor::zeros({d}, true);
    return p;
}

void visit_layer(const std::string& prefix, LayerParams& p,
                 const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + ".ln1.g", p.ln1_g);
    fn(prefix + ".ln1.b", p.ln1_b);
    fn(prefix + ".wq", p.wq);
    fn(prefix + ".bq", p.bq);
    fn(prefix + ".wk", p.wk);
    fn(prefix + ".bk", p.bk);
    fn(prefix + ".wv", p.wv);
    fn(prefix + ".bv", p.bv);
    fn(prefix + ".wo", p.wo);
    fn(prefix + ".bo", p.bo);
    fn(prefix + ".ln2.g", p.ln2_g);
    fn(prefix + ".ln2.b", p.ln2_b);
    fn(prefix + ".w1", p.w1);
    fn(prefix + ".b1", p.b1);
    fn(prefix + ".w2", p.w2);
    fn(prefix + ".b2", p.b2);
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const double sigma = 0.02;
    const std::int64_t d = cfg.dim, k = cfg.classes, f = cfg.ffn();
    ModelParams p;
    p.embed_w = Tensor::randn({3 * cfg.patch * cfg.patch, d}, rng, sigma, true);
    p.embed_b = Tensor::zeros({d}, true);
    p.pos = Tensor::zeros({cfg.num_tokens(), d}, true);
    p.encoder.reserve(static_cast<std::size_t>(cfg.layers));
    for (std::int64_t l = 0; l < cfg.layers; ++l) p.encoder.push_back(init_layer(d, f, rng));
    p.aux_w = Tensor::randn({d, k}, rng, sigma, true);
    p.aux_b = Tensor::zeros({k}, true);
    p.lin_w = Tensor::randn({d, k}, rng, sigma, true);
    p.lin_b = Tensor::zeros({k}, true);
    p.cls_emb = Tensor::randn({k, d}, rng, sigma, true);
    p.mask_decoder.reserve(static_cast<std::size_t>(cfg.mask_decoder_layers));
    for (std::int64_t l = 0; l < cfg.mask_decoder_layers; ++l) {
        p.mask_decoder.push_back(init_layer(d, f, rng));
    }
    return p;
}

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("embed.w", embed_w);
    fn("embed.b", embed_b);
    fn("pos", pos);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
        visit_layer("enc." + std::to_string(l), encoder[l], fn);
    }
    fn("aux.w", aux_w);
    fn("aux.b", aux_b);
    fn("lin.w", lin_w);
    fn("lin.b", lin_b);
    fn("mask.cls", cls_emb);
    for (std::size_t l = 0; l < mask_decoder.size(); ++l) {
        visit_layer("mask." + std::to_string(l), mask_decoder[l], fn);
    }
}

void ModelParams::visit(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<ModelParams*>(this)->visit(
        [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

std::int64_t ModelParams::total_count() const {
    std::int64_t n = 0;
    visit([&n](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

namespace {

std::int64_t layer_param_count(std::int64_t d, std::int64_t f) {
    return 2 * (2 * d)         // layernorm affines
           + 4 * (d * d + d)   // q, k, v, o projections
           + (d * f + f) + (f * d + d);
}

}  // namespace

std::int64_t backbone_param_count(const ModelConfig& cfg) {
    const std::int64_t d = cfg.dim;
    return (3 * cfg.patch * cfg.patch * d + d)  // embedding
           + cfg.num_tokens() * d               // positions
           + cfg.layers * layer_param_count(d, cfg.ffn());
}

std::int64_t decoder_param_count(const ModelConfig& cfg) {
    const std::int64_t d = cfg.dim, k = cfg.classes;
    return 2 * (d * k + k)  // aux + linear decoders
           + k * d          // class embeddings
           + cfg.mask_decoder_layers * layer_param_count(d, cfg.ffn());
}

// ---- forward pieces -----------------------------------------------------------

namespace {

// Pure data movement: [B,H,W,3] -> [B,N,3*P*P] with patches in row-major grid
// order and pixels flattened row, column, channel.
Tensor extract_patches(const Tensor& image, const ModelConfig& cfg) {
    const std::int64_t b = image.dim(0), h = cfg.image_h, w = cfg.image_w, p = cfg.patch;
    const std::int64_t gw = cfg.grid_w(), gh = cfg.grid_h();
    const std::int64_t n = gh * gw, pl = 3 * p * p;
    std::vector<double> v(static_cast<std::size_t>(b * n * pl));
    const auto& im = image.data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const double* src = im.data() + bi * h * w * 3;
        double* dst = v.data() + bi * n * pl;
        for (std::int64_t pr = 0; pr < gh; ++pr) {
            for (std::int64_t pc = 0; pc < gw; ++pc) {
                double* patch = dst + (pr * gw + pc) * pl;
                for (std::int64_t py = 0; py < p; ++py) {
                    const double* row = src + ((pr * p + py) * w + pc * p) * 3;
                    std::memcpy(patch + py * p * 3, row,
                                static_cast<std::size_t>(p * 3) * sizeof(double));
                }
            }
        }
    }
    return make_op_result(
        Shape{b, n, pl}, std::move(v), {image},
        [b, h, w, p, gw, gh, n, pl](detail::Node& self) {
            auto& pi = *self.parents[0];
            pi.ensure_grad();
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const double* g = self.grad.data() + bi * n * pl;
                double* dst = pi.grad.data() + bi * h * w * 3;
                for (std::int64_t pr = 0; pr < gh; ++pr) {
                    for (std::int64_t pc = 0; pc < gw; ++pc) {
                        const double* patch = g + (pr * gw + pc) * pl;
                        for (std::int64_t py = 0; py < p; ++py) {
                            double* row = dst + ((pr * p + py) * w + pc * p) * 3;
                            for (std::int64_t i = 0; i < p * 3; ++i) row[i] += patch[py * p * 3 + i];
                        }
                    }
                }
            }
        },
        "extract_patches");
}

}  // namespace

Tensor patch_embed(const Tensor& image, const ModelParams& params,
                   const ModelConfig& cfg) {
    if (image.rank() != 4 || image.dim(1) != cfg.image_h || image.dim(2) != cfg.image_w ||
        image.dim(3) != 3) {
        throw ConfigError("patch_embed: image " + shape_str(image.shape()) +
                          " does not match configured " + std::to_string(cfg.image_h) +
                          "x" + std::to_string(cfg.image_w) + "x3");
    }
    auto patches = extract_patches(image, cfg);
    auto tokens = add_bias(matmul(patches, params.embed_w), params.embed_b);
    return add_tokenwise(tokens, params.pos);
}

Tensor mhsa(const Tensor& x, const LayerParams& p, std::int64_t heads) {
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    const std::int64_t dh = d / heads;
    auto split = [&](const Tensor& t) {
        return reshape(transpose(reshape(t, {b, n, heads, dh}), {0, 2, 1, 3}),
                       {b * heads, n, dh});
    };
    auto q = split(add_bias(matmul(x, p.wq), p.bq));
    auto k = split(add_bias(matmul(x, p.wk), p.bk));
    auto v = split(add_bias(matmul(x, p.wv), p.bv));
    auto att = softmax(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh))));
    auto o = matmul(att, v);  // [B*heads, n, dh]
    o = reshape(transpose(reshape(o, {b, heads, n, dh}), {0, 2, 1, 3}), {b, n, d});
    return add_bias(matmul(o, p.wo), p.bo);
}

Tensor ffn_block(const Tensor& x, const LayerParams& p) {
    return add_bias(matmul(gelu(add_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

Tensor encoder_layer(const Tensor& x, const LayerParams& p, std::int64_t heads) {
    auto h = add(x, mhsa(layernorm(x, p.ln1_g, p.ln1_b), p, heads));
    return add(h, ffn_block(layernorm(h, p.ln2_g, p.ln2_b), p));
}

Tensor aux_decode(const Tensor& x, const ModelParams& params) {
    return add_bias(matmul(x, params.aux_w), params.aux_b);
}

Tensor decode_tokens_linear(const Tensor& x, const ModelParams& params) {
    return add_bias(matmul(x, params.lin_w), params.lin_b);
}

Tensor decode_tokens_mask(const Tensor& x, const ModelParams& params,
                          const ModelConfig& cfg) {
    const std::int64_t b = x.dim(0), n = x.dim(1);
    auto joint = concat_tokens(x, tile_batch(params.cls_emb, b));
    for (const auto& lp : params.mask_decoder) joint = encoder_layer(joint, lp, cfg.heads);
    auto feats = slice_tokens(joint, 0, n);
    auto cls = slice_tokens(joint, n, cfg.classes);
    return scale(matmul_nt(feats, cls), 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
}

Tensor logits_to_pixels(const Tensor& token_logits, const ModelConfig& cfg) {
    const std::int64_t b = token_logits.dim(0);
    auto grid = reshape(token_logits, {b, cfg.grid_h(), cfg.grid_w(), cfg.classes});
    return bilinear_upsample(grid, cfg.image_h, cfg.image_w);
}

namespace {

void check_full_token_set(const Tensor& x, const ModelConfig& cfg, const char* op) {
    if (x.rank() != 3 || x.dim(1) != cfg.num_tokens()) {
        throw ContractError(std::string(op) + ": expected all " +
                            std::to_string(cfg.num_tokens()) + " tokens, got " +
                            shape_str(x.shape()));
    }
}

}  // namespace

Tensor decode_linear(const Tensor& x, const ModelParams& params, const ModelConfig& cfg) {
    check_full_token_set(x, cfg, "decode_linear");
    return logits_to_pixels(decode_tokens_linear(x, params), cfg);
}

Tensor decode_mask_transformer(const Tensor& x, const ModelParams& params,
                               const ModelConfig& cfg) {
    check_full_token_set(x, cfg, "decode_mask_transformer");
    return logits_to_pixels(decode_tokens_mask(x, params, cfg), cfg);
}

Tensor decode(const Tensor& x, const ModelParams& params, const ModelConfig& cfg) {
    return cfg.decoder == DecoderKind::linear ? decode_linear(x, params, cfg)
                                              : decode_mask_transformer(x, params, cfg);
}

Tensor forward_full(const Tensor& image, const ModelParams& params,
                    const ModelConfig& cfg) {
    auto x = patch_embed(image, params, cfg);
    for (const auto& lp : params.encoder) x = encoder_layer(x, lp, cfg.heads);
    return decode(x, params, cfg);
}

}  // namespace paumer
