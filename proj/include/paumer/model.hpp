#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "paumer/rng.hpp"
#include "paumer/tensor.hpp"

namespace paumer {

enum class DecoderKind { linear, mask_transformer };

std::string decoder_kind_name(DecoderKind k);
DecoderKind decoder_kind_from_name(const std::string& name);

// Segmenter-style encoder/decoder geometry. patch divides both image sides;
// dim divides heads. ffn_hidden == 0 means the 4*dim default.
struct ModelConfig {
    std::int64_t image_h = 64;
    std::int64_t image_w = 64;
    std::int64_t patch = 8;
    std::int64_t dim = 64;
    std::int64_t layers = 6;
    std::int64_t heads = 4;
    std::int64_t classes = 5;
    std::int64_t ffn_hidden = 0;
    DecoderKind decoder = DecoderKind::linear;
    std::int64_t mask_decoder_layers = 2;

    std::int64_t ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * dim; }
    std::int64_t grid_h() const { return image_h / patch; }
    std::int64_t grid_w() const { return image_w / patch; }
    std::int64_t num_tokens() const { return grid_h() * grid_w(); }

    void validate() const;  // throws ConfigError

    bool operator==(const ModelConfig&) const = default;
};

// One pre-norm residual transformer block: x + MHSA(LN(x)), then + FFN(LN(.)).
struct LayerParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

struct ModelParams {
    Tensor embed_w;  // [3*P*P, D]
    Tensor embed_b;  // [D]
    Tensor pos;      // [N, D]
    std::vector<LayerParams> encoder;
    Tensor aux_w, aux_b;  // shared auxiliary decoder, [D,K] + [K]
    Tensor lin_w, lin_b;  // linear decoder, [D,K] + [K]
    Tensor cls_emb;       // mask decoder class embeddings, [K,D]
    std::vector<LayerParams> mask_decoder;

    // Visits every tensor exactly once in the canonical (checkpoint) order.
    void visit(const std::function<void(const std::string&, Tensor&)>& fn);
    void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    std::int64_t total_count() const;
};

// Truncated normal (sigma 0.02) weights, zero biases and positional embedding,
// unit layernorm gains.
ModelParams init_params(const ModelConfig& cfg, Rng& rng);

// Analytic counts (no allocation). Backbone = embedding + positions + encoder.
std::int64_t backbone_param_count(const ModelConfig& cfg);
std::int64_t decoder_param_count(const ModelConfig& cfg);

// [B,H,W,3] image -> [B,N,D] tokens in row-major patch-grid order. Patch
// pixels are flattened row, column, channel before the embedding matmul.
Tensor patch_embed(const Tensor& image, const ModelParams& params,
                   const ModelConfig& cfg);

Tensor mhsa(const Tensor& x, const LayerParams& p, std::int64_t heads);
Tensor ffn_block(const Tensor& x, const LayerParams& p);
Tensor encoder_layer(const Tensor& x, const LayerParams& p, std::int64_t heads);

// Per-token affine map D->K (the 1x1-convolution auxiliary decoder).
Tensor aux_decode(const Tensor& x, const ModelParams& params);

// Token-level main decoders: work on any active-token count n.
Tensor decode_tokens_linear(const Tensor& x, const ModelParams& params);
Tensor decode_tokens_mask(const Tensor& x, const ModelParams& params,
                          const ModelConfig& cfg);

// [B,N,K] token logits -> [B,H,W,K] pixels: grid reshape + bilinear upsample
// (align_corners=false).
Tensor logits_to_pixels(const Tensor& token_logits, const ModelConfig& cfg);

// Full decoders; require the complete token set (post-assembly).
Tensor decode_linear(const Tensor& x, const ModelParams& params,
                     const ModelConfig& cfg);
Tensor decode_mask_transformer(const Tensor& x, const ModelParams& params,
                               const ModelConfig& cfg);
Tensor decode(const Tensor& x, const ModelParams& params, const ModelConfig& cfg);

// embed -> L encoder layers -> configured decoder.
Tensor forward_full(const Tensor& image, const ModelParams& params,
                    const ModelConfig& cfg);

}  // namespace paumer
