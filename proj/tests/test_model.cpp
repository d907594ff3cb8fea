#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "paumer/errors.hpp"
#include "paumer/model.hpp"

using namespace paumer;

namespace {

Tensor random_image(Rng& rng, std::int64_t b, std::int64_t h, std::int64_t w) {
    std::vector<double> v(static_cast<std::size_t>(b * h * w * 3));
    for (auto& x : v) x = rng.uniform();
    return Tensor::from({b, h, w, 3}, std::move(v));
}

Tensor random_tokens(Rng& rng, std::int64_t b, std::int64_t n, std::int64_t d) {
    std::vector<double> v(static_cast<std::size_t>(b * n * d));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from({b, n, d}, std::move(v));
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_h = 16;
    cfg.image_w = 16;
    cfg.patch = 4;
    cfg.dim = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.classes = 3;
    return cfg;
}

void zero_layer(LayerParams& lp) {
    for (Tensor* t : {&lp.wq, &lp.bq, &lp.wk, &lp.bk, &lp.wv, &lp.bv, &lp.wo, &lp.bo,
                      &lp.w1, &lp.b1, &lp.w2, &lp.b2}) {
        std::fill(t->data().begin(), t->data().end(), 0.0);
    }
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.patch = 5;  // does not divide 16
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.heads = 3;  // does not divide dim 8
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.classes = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("token counts follow N = WH/P^2") {
    ModelConfig cfg = tiny_config();
    cfg.image_h = 32;
    cfg.image_w = 32;
    cfg.patch = 8;
    CHECK(cfg.num_tokens() == 16);

    cfg.image_h = 512;
    cfg.image_w = 512;
    cfg.patch = 16;
    CHECK(cfg.num_tokens() == 1024);
}

TEST_CASE("patch_embed shapes and zero case") {
    ModelConfig cfg = tiny_config();
    Rng rng(1);
    auto params = init_params(cfg, rng);
    auto image = random_image(rng, 2, cfg.image_h, cfg.image_w);
    auto tokens = patch_embed(image, params, cfg);
    CHECK(tokens.shape() == Shape{2, cfg.num_tokens(), cfg.dim});

    // Zero embedding, bias and positions map any image to zero tokens.
    std::fill(params.embed_w.data().begin(), params.embed_w.data().end(), 0.0);
    std::fill(params.embed_b.data().begin(), params.embed_b.data().end(), 0.0);
    std::fill(params.pos.data().begin(), params.pos.data().end(), 0.0);
    auto zeros = patch_embed(image, params, cfg);
    for (double v : zeros.data()) CHECK(v == 0.0);

    auto bad = random_image(rng, 1, 8, 16);
    CHECK_THROWS_AS((void)patch_embed(bad, params, cfg), ConfigError);
}

TEST_CASE("encoder layer is permutation equivariant") {
    ModelConfig cfg = tiny_config();
    Rng rng(2);
    auto params = init_params(cfg, rng);
    auto x = random_tokens(rng, 1, 10, cfg.dim);

    std::vector<std::int64_t> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) {
        std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
    }
    const std::vector<std::vector<std::int64_t>> pidx{perm};

    auto out_then_perm = gather_tokens(encoder_layer(x, params.encoder[0], cfg.heads), pidx);
    auto perm_then_out = encoder_layer(gather_tokens(x, pidx), params.encoder[0], cfg.heads);
    for (std::size_t i = 0; i < out_then_perm.data().size(); ++i) {
        CHECK(std::abs(out_then_perm.data()[i] - perm_then_out.data()[i]) < 1e-9);
    }
}

TEST_CASE("encoder layer handles a single token") {
    ModelConfig cfg = tiny_config();
    Rng rng(3);
    auto params = init_params(cfg, rng);
    auto x = random_tokens(rng, 2, 1, cfg.dim);
    auto y = encoder_layer(x, params.encoder[0], cfg.heads);
    CHECK(y.shape() == x.shape());
    for (double v : y.data()) CHECK(std::isfinite(v));
}

TEST_CASE("residual decomposition: output - x equals the recomposed sublayers") {
    ModelConfig cfg = tiny_config();
    Rng rng(4);
    auto params = init_params(cfg, rng);
    const auto& lp = params.encoder[0];
    auto x = random_tokens(rng, 2, 6, cfg.dim);

    auto out = encoder_layer(x, lp, cfg.heads);
    auto a1 = mhsa(layernorm(x, lp.ln1_g, lp.ln1_b), lp, cfg.heads);
    auto h = add(x, a1);
    auto a2 = ffn_block(layernorm(h, lp.ln2_g, lp.ln2_b), lp);
    for (std::size_t i = 0; i < out.data().size(); ++i) {
        const double residual = out.data()[i] - x.data()[i];
        CHECK(std::abs(residual - (a1.data()[i] + a2.data()[i])) < 1e-12);
    }
}

TEST_CASE("aux decoder basics") {
    ModelConfig cfg = tiny_config();
    Rng rng(5);
    auto params = init_params(cfg, rng);

    SUBCASE("zero weights give the bias everywhere") {
        std::fill(params.aux_w.data().begin(), params.aux_w.data().end(), 0.0);
        params.aux_b = Tensor::from({3}, {0.1, 0.2, 0.3}, true);
        auto x = random_tokens(rng, 2, 4, cfg.dim);
        auto logits = aux_decode(x, params);
        for (std::int64_t t = 0; t < 8; ++t) {
            CHECK(logits.data()[t * 3 + 0] == doctest::Approx(0.1));
            CHECK(logits.data()[t * 3 + 1] == doctest::Approx(0.2));
            CHECK(logits.data()[t * 3 + 2] == doctest::Approx(0.3));
        }
    }
    SUBCASE("single token equals weight-row dot products plus bias") {
        auto x = random_tokens(rng, 1, 1, cfg.dim);
        auto logits = aux_decode(x, params);
        for (std::int64_t k = 0; k < 3; ++k) {
            double acc = params.aux_b.data()[static_cast<std::size_t>(k)];
            for (std::int64_t d = 0; d < cfg.dim; ++d) {
                acc += x.data()[static_cast<std::size_t>(d)] *
                       params.aux_w.data()[static_cast<std::size_t>(d * 3 + k)];
            }
            CHECK(logits.data()[static_cast<std::size_t>(k)] == doctest::Approx(acc));
        }
    }
    SUBCASE("batch decode equals per-item decode") {
        auto a = random_tokens(rng, 1, 4, cfg.dim);
        auto b = random_tokens(rng, 1, 4, cfg.dim);
        std::vector<double> stacked = a.data();
        stacked.insert(stacked.end(), b.data().begin(), b.data().end());
        auto both = aux_decode(Tensor::from({2, 4, cfg.dim}, stacked), params);
        auto la = aux_decode(a, params);
        auto lb = aux_decode(b, params);
        for (std::size_t i = 0; i < la.data().size(); ++i) {
            CHECK(both.data()[i] == doctest::Approx(la.data()[i]));
            CHECK(both.data()[la.data().size() + i] == doctest::Approx(lb.data()[i]));
        }
    }
}

TEST_CASE("aux decoder parameters are shared across layers") {
    ModelConfig cfg = tiny_config();
    Rng rng(6);
    auto params = init_params(cfg, rng);
    auto image = random_image(rng, 1, cfg.image_h, cfg.image_w);

    auto probe = [&](std::int64_t upto) {
        auto x = patch_embed(image, params, cfg);
        for (std::int64_t l = 0; l < upto; ++l) {
            x = encoder_layer(x, params.encoder[static_cast<std::size_t>(l)], cfg.heads);
        }
        return aux_decode(x, params);
    };
    auto l1_before = probe(1);
    auto l2_before = probe(2);
    params.aux_w.data()[0] += 0.5;
    auto l1_after = probe(1);
    auto l2_after = probe(2);
    // Perturbing the shared decoder moves the logits at every probed layer.
    CHECK(l1_before.data() != l1_after.data());
    CHECK(l2_before.data() != l2_after.data());
}

TEST_CASE("linear decoder") {
    ModelConfig cfg = tiny_config();
    Rng rng(7);
    auto params = init_params(cfg, rng);

    SUBCASE("constant token logits upsample to constant pixels") {
        std::fill(params.lin_w.data().begin(), params.lin_w.data().end(), 0.0);
        params.lin_b = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
        auto x = random_tokens(rng, 1, cfg.num_tokens(), cfg.dim);
        auto logits = decode_linear(x, params, cfg);
        CHECK(logits.shape() == Shape{1, 16, 16, 3});
        for (std::int64_t p = 0; p < 16 * 16; ++p) {
            CHECK(logits.data()[p * 3 + 0] == doctest::Approx(1.0));
            CHECK(logits.data()[p * 3 + 1] == doctest::Approx(-2.0));
            CHECK(logits.data()[p * 3 + 2] == doctest::Approx(0.5));
        }
    }
    SUBCASE("patch size one makes upsampling the identity") {
        ModelConfig c1 = cfg;
        c1.image_h = 4;
        c1.image_w = 4;
        c1.patch = 1;
        Rng r2(8);
        auto p1 = init_params(c1, r2);
        auto x = random_tokens(r2, 1, c1.num_tokens(), c1.dim);
        auto direct = decode_tokens_linear(x, p1);
        auto pixels = decode_linear(x, p1, c1);
        CHECK(pixels.data() == direct.data());
    }
    SUBCASE("wrong token count is a contract error") {
        auto x = random_tokens(rng, 1, 5, cfg.dim);
        CHECK_THROWS_AS((void)decode_linear(x, params, cfg), ContractError);
    }
}

TEST_CASE("mask transformer decoder") {
    ModelConfig cfg = tiny_config();
    cfg.decoder = DecoderKind::mask_transformer;
    cfg.mask_decoder_layers = 1;
    Rng rng(9);
    auto params = init_params(cfg, rng);

    SUBCASE("zero decoder weights reduce to scaled class-embedding dot products") {
        zero_layer(params.mask_decoder[0]);
        auto x = random_tokens(rng, 1, cfg.num_tokens(), cfg.dim);
        auto logits = decode_tokens_mask(x, params, cfg);
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
        for (std::int64_t t = 0; t < cfg.num_tokens(); ++t) {
            for (std::int64_t k = 0; k < cfg.classes; ++k) {
                double dot = 0.0;
                for (std::int64_t d = 0; d < cfg.dim; ++d) {
                    dot += x.data()[static_cast<std::size_t>(t * cfg.dim + d)] *
                           params.cls_emb.data()[static_cast<std::size_t>(k * cfg.dim + d)];
                }
                CHECK(std::abs(logits.data()[static_cast<std::size_t>(t * cfg.classes + k)] -
                               dot * inv_sqrt_d) < 1e-12);
            }
        }
    }
    SUBCASE("token equal to an orthogonal class embedding wins its class") {
        ModelConfig c2 = cfg;
        c2.classes = 2;
        Rng r2(10);
        auto p2 = init_params(c2, r2);
        zero_layer(p2.mask_decoder[0]);
        std::vector<double> emb(static_cast<std::size_t>(2 * c2.dim), 0.0);
        emb[0] = 1.0;                                   // class 0 -> x axis
        emb[static_cast<std::size_t>(c2.dim + 1)] = 1.0;  // class 1 -> y axis
        p2.cls_emb = Tensor::from({2, c2.dim}, std::move(emb), true);
        std::vector<double> tok(static_cast<std::size_t>(c2.num_tokens() * c2.dim), 0.0);
        for (std::int64_t t = 0; t < c2.num_tokens(); ++t) {
            tok[static_cast<std::size_t>(t * c2.dim)] = 1.0;  // every token equals e0
        }
        auto logits = decode_tokens_mask(Tensor::from({1, c2.num_tokens(), c2.dim}, tok),
                                         p2, c2);
        for (std::int64_t t = 0; t < c2.num_tokens(); ++t) {
            CHECK(logits.data()[static_cast<std::size_t>(t * 2)] >
                  logits.data()[static_cast<std::size_t>(t * 2 + 1)]);
        }
    }
    SUBCASE("matches a step-by-step composition of the public pieces") {
        auto x = random_tokens(rng, 2, cfg.num_tokens(), cfg.dim);
        auto got = decode_tokens_mask(x, params, cfg);
        auto joint = concat_tokens(x, tile_batch(params.cls_emb, 2));
        joint = encoder_layer(joint, params.mask_decoder[0], cfg.heads);
        auto feats = slice_tokens(joint, 0, cfg.num_tokens());
        auto cls = slice_tokens(joint, cfg.num_tokens(), cfg.classes);
        auto expect =
            scale(matmul_nt(feats, cls), 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
        for (std::size_t i = 0; i < got.data().size(); ++i) {
            CHECK(std::abs(got.data()[i] - expect.data()[i]) < 1e-10);
        }
    }
}

TEST_CASE("forward_full is deterministic and matches the unrolled oracle") {
    ModelConfig cfg = tiny_config();
    Rng rng(11);
    auto params = init_params(cfg, rng);
    auto image = random_image(rng, 1, cfg.image_h, cfg.image_w);

    auto a = forward_full(image, params, cfg);
    auto b = forward_full(image, params, cfg);
    CHECK(a.data() == b.data());
    CHECK(a.shape() == Shape{1, cfg.image_h, cfg.image_w, cfg.classes});

    auto x = patch_embed(image, params, cfg);
    x = encoder_layer(x, params.encoder[0], cfg.heads);
    x = encoder_layer(x, params.encoder[1], cfg.heads);
    auto expect = decode_linear(x, params, cfg);
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        CHECK(std::abs(a.data()[i] - expect.data()[i]) < 1e-10);
    }

    // Per-pixel softmax over the class axis is a distribution.
    auto probs = softmax(a);
    for (std::int64_t p = 0; p < cfg.image_h * cfg.image_w; ++p) {
        double s = 0.0;
        for (std::int64_t k = 0; k < cfg.classes; ++k) {
            s += probs.data()[static_cast<std::size_t>(p * cfg.classes + k)];
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("ViT-Ti proportioned backbone lands near the reference parameter count") {
    ModelConfig cfg;
    cfg.image_h = 512;
    cfg.image_w = 512;
    cfg.patch = 16;
    cfg.dim = 192;
    cfg.layers = 12;
    cfg.heads = 3;
    cfg.classes = 19;
    const auto count = backbone_param_count(cfg);
    CHECK(std::abs(static_cast<double>(count) - 5.9e6) < 0.05 * 5.9e6);
}

TEST_CASE("allocated parameters match the analytic count") {
    ModelConfig cfg = tiny_config();
    Rng rng(12);
    auto params = init_params(cfg, rng);
    CHECK(params.total_count() == backbone_param_count(cfg) + decoder_param_count(cfg));
}
