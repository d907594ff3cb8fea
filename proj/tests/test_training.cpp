#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "paumer/errors.hpp"
#include "paumer/training.hpp"

using namespace paumer;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("paumer_train_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

ModelConfig toy_model() {
    ModelConfig cfg;
    cfg.image_h = 16;
    cfg.image_w = 16;
    cfg.patch = 4;
    cfg.dim = 8;
    cfg.layers = 3;
    cfg.heads = 2;
    cfg.classes = 3;
    return cfg;
}

TrainConfig toy_train() {
    TrainConfig tc;
    tc.steps = 4;
    tc.batch_size = 2;
    tc.lr = 1e-3;
    tc.lambda_aux = 0.1;
    tc.pause_layers = {3};
    tc.seed = 5;
    return tc;
}

std::vector<SegSample> toy_dataset(int count = 12) {
    SyntheticTaskConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.classes = 3;
    cfg.shapes_min = 1;
    cfg.shapes_max = 2;
    cfg.noise_sigma = 0.02;
    Rng rng(123);
    std::vector<SegSample> out;
    for (int i = 0; i < count; ++i) out.push_back(generate_sample(rng, cfg));
    return out;
}

std::vector<double> flat_params(const ModelParams& p) {
    std::vector<double> out;
    p.visit([&out](const std::string&, const Tensor& t) {
        out.insert(out.end(), t.data().begin(), t.data().end());
    });
    return out;
}

std::vector<double> flat_grads(const ModelParams& p) {
    std::vector<double> out;
    p.visit([&out](const std::string&, const Tensor& t) {
        if (t.grad().empty()) {
            out.insert(out.end(), t.data().size(), 0.0);
        } else {
            out.insert(out.end(), t.grad().begin(), t.grad().end());
        }
    });
    return out;
}

void zero_all_grads(ModelParams& p) {
    p.visit([](const std::string&, Tensor& t) { t.zero_grad(); });
}

}  // namespace

TEST_CASE("train config validation") {
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    CHECK_NOTHROW(tc.validate(mc));

    tc.tau_lo = 0.9;
    tc.tau_hi = 0.5;
    CHECK_THROWS_AS(tc.validate(mc), ConfigError);

    tc = toy_train();
    tc.pause_layers = {2};  // below the layer-3 floor
    CHECK_THROWS_AS(tc.validate(mc), ConfigError);

    tc = toy_train();
    tc.pause_layers.clear();
    ModelConfig two_layers = mc;
    two_layers.layers = 2;  // default pause set becomes empty
    CHECK_THROWS_AS(tc.validate(two_layers), ConfigError);
    tc.baseline = BaselineMode::no_pausing;  // pausing disabled: fine
    CHECK_NOTHROW(tc.validate(two_layers));
}

TEST_CASE("default pause layer set clamps to the model depth") {
    TrainConfig tc;
    CHECK(tc.effective_pause_layers(12) ==
          std::vector<std::int64_t>{3, 4, 5, 6, 7, 8, 9});
    CHECK(tc.effective_pause_layers(6) == std::vector<std::int64_t>{3, 4, 5, 6});
}

TEST_CASE("sample_pause_event degenerate cases") {
    TrainConfig tc = toy_train();
    SUBCASE("point tau interval") {
        tc.tau_lo = tc.tau_hi = 0.5;
        Rng rng(1);
        for (int i = 0; i < 10; ++i) {
            CHECK(sample_pause_event(rng, tc, 3).tau == doctest::Approx(0.5));
        }
    }
    SUBCASE("singleton layer set") {
        tc.pause_layers = {3};
        Rng rng(2);
        for (int i = 0; i < 10; ++i) CHECK(sample_pause_event(rng, tc, 3).layer == 3);
    }
}

TEST_CASE("sample_pause_event statistics over 10000 draws") {
    TrainConfig tc;  // defaults: layers {3..9}, tau U[0.2, 0.8]
    Rng rng(42);
    std::map<std::int64_t, int> layer_counts;
    double tau_sum = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto ev = sample_pause_event(rng, tc, 12);
        layer_counts[ev.layer]++;
        tau_sum += ev.tau;
        CHECK(ev.tau >= 0.2);
        CHECK(ev.tau <= 0.8);
    }
    // Layer frequencies: binomial p=1/7, sigma = sqrt(p(1-p)/n).
    const double p = 1.0 / 7.0;
    const double sigma_f = std::sqrt(p * (1 - p) / n);
    CHECK(layer_counts.size() == 7);
    for (const auto& [layer, count] : layer_counts) {
        CHECK(layer >= 3);
        CHECK(layer <= 9);
        const double freq = static_cast<double>(count) / n;
        CHECK(std::abs(freq - p) < 3.0 * sigma_f);
    }
    // tau mean: U[0.2,0.8] has mean 0.5, sd 0.6/sqrt(12).
    const double sigma_tau = 0.6 / std::sqrt(12.0) / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(tau_sum / n - 0.5) < 3.0 * sigma_tau);
}

TEST_CASE("lambda scaling of the total-loss gradient") {
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    Rng init(9);
    auto params = init_params(mc, init);
    auto data = toy_dataset();
    auto batch = make_batch(data, {0, 1});
    const PauseEvent ev{3, 0.5};

    // Reference gradients of the two parts in isolation.
    TrainConfig tc_main = tc;
    tc_main.lambda_aux = 0.0;
    zero_all_grads(params);
    backward(paumer_loss(batch, params, mc, tc_main, ev, nullptr).main_loss);
    const auto g_main = flat_grads(params);

    zero_all_grads(params);
    backward(paumer_loss(batch, params, mc, tc, ev, nullptr).aux_loss);
    const auto g_aux = flat_grads(params);

    SUBCASE("lambda zero equals main-only gradients") {
        zero_all_grads(params);
        backward(paumer_loss(batch, params, mc, tc_main, ev, nullptr).total);
        const auto g_total = flat_grads(params);
        for (std::size_t i = 0; i < g_total.size(); ++i) {
            CHECK(g_total[i] == doctest::Approx(g_main[i]).epsilon(1e-12));
        }
    }
    SUBCASE("grad(total) = grad(main) + lambda grad(aux) elementwise") {
        zero_all_grads(params);
        backward(paumer_loss(batch, params, mc, tc, ev, nullptr).total);
        const auto g_total = flat_grads(params);
        for (std::size_t i = 0; i < g_total.size(); ++i) {
            const double expect = g_main[i] + tc.lambda_aux * g_aux[i];
            CHECK(std::abs(g_total[i] - expect) < 1e-10);
        }
    }
}

TEST_CASE("no_pausing with lambda zero is a plain training step") {
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    tc.baseline = BaselineMode::no_pausing;
    tc.lambda_aux = 0.0;
    Rng init(10);
    auto params = init_params(mc, init);
    auto data = toy_dataset();
    auto batch = make_batch(data, {2, 3});

    auto bundle = paumer_loss(batch, params, mc, tc, std::nullopt, nullptr);
    auto plain = forward_full(batch.images, params, mc);
    auto plain_loss = cross_entropy(
        reshape(plain, {2 * mc.image_h * mc.image_w, mc.classes}), batch.labels, 255);
    CHECK(bundle.total.item() == doctest::Approx(plain_loss.item()).epsilon(1e-12));
    CHECK_FALSE(bundle.event.has_value());
}

TEST_CASE("random pausing uses the same count formula with rng indices") {
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    tc.baseline = BaselineMode::random_pausing;
    Rng init(11);
    auto params = init_params(mc, init);
    auto data = toy_dataset();
    auto batch = make_batch(data, {0, 1});
    const PauseEvent ev{3, 0.4};  // 16 tokens -> keep 10

    Rng rp(7);
    PauseState state;
    auto x = patch_embed(batch.images, params, mc);
    for (std::int64_t l = 1; l <= mc.layers; ++l) {
        x = encoder_layer(x, params.encoder[static_cast<std::size_t>(l - 1)], mc.heads);
        if (l == ev.layer) {
            x = pause_step(x, ev.tau, params, l, state, SelectionPolicy::random, &rp);
        }
    }
    CHECK(x.dim(1) == 16 - static_cast<std::int64_t>(0.4 * 16.0));
    // Per-image draws: the two items generally keep different index sets.
    CHECK(state.stages[0].kept[0].size() == state.stages[0].kept[1].size());
}

TEST_CASE("total loss gradient passes finite differences with pausing active") {
    ModelConfig mc = toy_model();
    mc.layers = 2;  // smallest model exercising assembly + aux loss
    TrainConfig tc = toy_train();
    tc.pause_layers = {};  // bypassed: event passed explicitly
    Rng init(12);
    auto params = init_params(mc, init);
    auto data = toy_dataset();
    auto batch = make_batch(data, {4});
    const PauseEvent ev{1, 0.5};

    zero_all_grads(params);
    backward(paumer_loss(batch, params, mc, tc, ev, nullptr).total);

    // Spot-check a handful of parameters across tensors.
    Rng pick(13);
    std::vector<Tensor*> tensors;
    params.visit([&tensors](const std::string&, Tensor& t) { tensors.push_back(&t); });
    int checked = 0;
    while (checked < 12) {
        Tensor& t = *tensors[pick.uniform_index(tensors.size())];
        const auto i = static_cast<std::size_t>(pick.uniform_index(t.data().size()));
        const double orig = t.data()[i];
        const double h = 1e-5;
        double lp, lm;
        {
            NoGradGuard ng;
            t.data()[i] = orig + h;
            lp = paumer_loss(batch, params, mc, tc, ev, nullptr).total.item();
            t.data()[i] = orig - h;
            lm = paumer_loss(batch, params, mc, tc, ev, nullptr).total.item();
            t.data()[i] = orig;
        }
        const double fd = (lp - lm) / (2 * h);
        const double g = t.grad().empty() ? 0.0 : t.grad()[i];
        const double rel = std::abs(fd - g) / std::max(std::abs(fd) + std::abs(g), 1e-3);
        INFO("fd=", fd, " analytic=", g);
        CHECK(rel < 1e-4);
        ++checked;
    }
}

TEST_CASE("seeded training is deterministic and JSONL records are well formed") {
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    auto data = toy_dataset();

    Trainer a(mc, tc);
    Trainer b(mc, tc);
    std::ostringstream log_a;
    a.run(data, &log_a, "");
    std::ostringstream log_b;
    b.run(data, &log_b, "");
    CHECK(flat_params(a.params()) == flat_params(b.params()));
    CHECK(log_a.str() == log_b.str());

    std::istringstream lines(log_a.str());
    std::string line;
    int count = 0;
    while (std::getline(lines, line)) {
        CHECK(line.find("\"step\"") != std::string::npos);
        CHECK(line.find("\"loss_main\"") != std::string::npos);
        CHECK(line.find("\"tau\"") != std::string::npos);
        ++count;
    }
    CHECK(count == tc.steps);
}

TEST_CASE("no_pausing logs null pause fields") {
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    tc.steps = 2;
    tc.baseline = BaselineMode::no_pausing;
    auto data = toy_dataset();
    Trainer t(mc, tc);
    std::ostringstream log;
    t.run(data, &log, "");
    std::istringstream lines(log.str());
    std::string line;
    while (std::getline(lines, line)) {
        CHECK(line.find("\"tau\":null") != std::string::npos);
        CHECK(line.find("\"layer\":null") != std::string::npos);
    }
}

TEST_CASE("checkpoint round trip is byte identical") {
    TempDir dir;
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    tc.steps = 2;
    auto data = toy_dataset();
    Trainer t(mc, tc);
    t.run(data, nullptr, "");
    t.save(dir.file("a.pmck"));

    Trainer back = Trainer::resume(dir.file("a.pmck"));
    back.save(dir.file("b.pmck"));

    std::ifstream fa(dir.file("a.pmck"), std::ios::binary);
    std::ifstream fb(dir.file("b.pmck"), std::ios::binary);
    const std::string ba((std::istreambuf_iterator<char>(fa)),
                         std::istreambuf_iterator<char>());
    const std::string bb((std::istreambuf_iterator<char>(fb)),
                         std::istreambuf_iterator<char>());
    CHECK(ba == bb);
}

TEST_CASE("checkpoint rejects truncation and mismatched configs") {
    TempDir dir;
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    Trainer t(mc, tc);
    t.save(dir.file("ck.pmck"));

    SUBCASE("truncated file") {
        std::ifstream in(dir.file("ck.pmck"), std::ios::binary);
        const std::string bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        std::ofstream out(dir.file("cut.pmck"), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_AS((void)load_checkpoint(dir.file("cut.pmck")), FormatError);
    }
    SUBCASE("bad magic") {
        std::ofstream out(dir.file("junk.pmck"), std::ios::binary);
        out << "JUNKJUNKJUNKJUNKJUNK";
        out.close();
        CHECK_THROWS_AS((void)load_checkpoint(dir.file("junk.pmck")), FormatError);
    }
    SUBCASE("mismatched model config names the first bad tensor") {
        ModelConfig other = mc;
        other.dim = 16;
        other.heads = 2;
        try {
            (void)load_checkpoint(dir.file("ck.pmck"), other);
            FAIL("expected ShapeError");
        } catch (const ShapeError& e) {
            CHECK(std::string(e.what()).find("embed.w") != std::string::npos);
        }
    }
}

TEST_CASE("interrupt and resume reproduce the uninterrupted loss trace") {
    TempDir dir;
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    tc.steps = 6;
    auto data = toy_dataset();

    Trainer full(mc, tc);
    std::vector<double> full_losses;
    for (int i = 0; i < 6; ++i) full_losses.push_back(full.step(data).loss_main);

    Trainer first(mc, tc);
    for (int i = 0; i < 3; ++i) (void)first.step(data);
    first.save(dir.file("mid.pmck"));
    Trainer second = Trainer::resume(dir.file("mid.pmck"));
    CHECK(second.current_step() == 3);
    std::vector<double> resumed;
    for (int i = 0; i < 3; ++i) resumed.push_back(second.step(data).loss_main);

    for (int i = 0; i < 3; ++i) {
        CHECK(std::abs(resumed[static_cast<std::size_t>(i)] -
                       full_losses[static_cast<std::size_t>(i + 3)]) < 1e-6);
    }
}

TEST_CASE("non-finite loss aborts with a numeric error") {
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    auto data = toy_dataset();
    Trainer t(mc, tc);
    t.params().embed_w.data()[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS((void)t.step(data), NumericError);
}

TEST_CASE("sgd_poly optimizer also trains deterministically") {
    ModelConfig mc = toy_model();
    TrainConfig tc = toy_train();
    tc.optimizer = OptimizerKind::sgd_poly;
    tc.lr = 1e-2;
    tc.steps = 3;
    auto data = toy_dataset();
    Trainer a(mc, tc);
    Trainer b(mc, tc);
    a.run(data, nullptr, "");
    b.run(data, nullptr, "");
    CHECK(flat_params(a.params()) == flat_params(b.params()));
}
