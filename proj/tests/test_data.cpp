#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "paumer/data.hpp"
#include "paumer/errors.hpp"
#include "paumer/png_io.hpp"

using namespace paumer;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("paumer_data_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

SyntheticTaskConfig small_task() {
    SyntheticTaskConfig cfg;
    cfg.height = 24;
    cfg.width = 32;
    cfg.classes = 4;
    cfg.shapes_min = 1;
    cfg.shapes_max = 3;
    cfg.noise_sigma = 0.02;
    return cfg;
}

}  // namespace

TEST_CASE("zero shapes and zero noise give a constant sample") {
    SyntheticTaskConfig cfg = small_task();
    cfg.shapes_min = 0;
    cfg.shapes_max = 0;
    cfg.noise_sigma = 0.0;
    Rng rng(1);
    auto s = generate_sample(rng, cfg);
    const auto lab0 = s.labels[0];
    for (auto l : s.labels) CHECK(l == lab0);
    for (std::size_t p = 1; p < s.labels.size(); ++p) {
        for (int c = 0; c < 3; ++c) {
            CHECK(s.image[p * 3 + static_cast<std::size_t>(c)] ==
                  s.image[static_cast<std::size_t>(c)]);
        }
    }
}

TEST_CASE("labels stay in range and pixels stay in [0,1]") {
    SyntheticTaskConfig cfg = small_task();
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
        auto s = generate_sample(rng, cfg);
        for (auto l : s.labels) CHECK(l < cfg.classes);
        for (float v : s.image) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("generation is deterministic in the seed") {
    SyntheticTaskConfig cfg = small_task();
    Rng a(77), b(77);
    auto sa = generate_sample(a, cfg);
    auto sb = generate_sample(b, cfg);
    CHECK(sa.image == sb.image);
    CHECK(sa.labels == sb.labels);
    CHECK(sample_digest(sa) == sample_digest(sb));

    Rng c(78);
    auto sc = generate_sample(c, cfg);
    CHECK(sample_digest(sa) != sample_digest(sc));
}

TEST_CASE("labels equal the topmost shape at every pixel (re-rasterize oracle)") {
    SyntheticTaskConfig cfg = small_task();
    cfg.shapes_min = 3;
    cfg.shapes_max = 6;
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        std::int64_t background = -1;
        std::vector<ShapeSpec> shapes;
        auto s = generate_sample_debug(rng, cfg, &background, &shapes);
        for (std::int64_t py = 0; py < cfg.height; ++py) {
            for (std::int64_t px = 0; px < cfg.width; ++px) {
                // Independent point-in-shape evaluation, last shape wins.
                std::int64_t expect = background;
                const double x = static_cast<double>(px) + 0.5;
                const double y = static_cast<double>(py) + 0.5;
                for (const auto& sh : shapes) {
                    bool inside;
                    if (sh.kind == ShapeSpec::rect) {
                        inside = std::abs(x - sh.cx) <= sh.rx && std::abs(y - sh.cy) <= sh.ry;
                    } else {
                        const double dx = (x - sh.cx) / sh.rx;
                        const double dy = (y - sh.cy) / sh.ry;
                        inside = dx * dx + dy * dy <= 1.0;
                    }
                    if (inside) expect = sh.cls;
                }
                CHECK(s.labels[static_cast<std::size_t>(py * cfg.width + px)] == expect);
            }
        }
    }
}

TEST_CASE("palette is deterministic and class-distinct") {
    auto p1 = class_palette(5, 9);
    auto p2 = class_palette(5, 9);
    CHECK(p1 == p2);
    for (std::size_t a = 0; a < p1.size(); ++a) {
        for (std::size_t b = a + 1; b < p1.size(); ++b) {
            CHECK(p1[a] != p1[b]);
        }
    }
}

TEST_CASE("dataset round trips") {
    TempDir dir;
    SUBCASE("empty dataset") {
        write_dataset(dir.file("empty.pmseg"), {}, 4);
        std::int64_t k = 0;
        auto samples = read_dataset(dir.file("empty.pmseg"), &k);
        CHECK(samples.empty());
        CHECK(k == 4);
    }
    SUBCASE("single sample round trips bitwise") {
        SyntheticTaskConfig cfg = small_task();
        Rng rng(5);
        auto s = generate_sample(rng, cfg);
        write_dataset(dir.file("one.pmseg"), {s}, cfg.classes);
        auto back = read_dataset(dir.file("one.pmseg"));
        REQUIRE(back.size() == 1);
        CHECK(back[0].image == s.image);
        CHECK(back[0].labels == s.labels);
    }
    SUBCASE("100-sample digests survive the round trip") {
        SyntheticTaskConfig cfg = small_task();
        Rng rng(6);
        std::vector<SegSample> samples;
        std::vector<std::uint64_t> digests;
        for (int i = 0; i < 100; ++i) {
            samples.push_back(generate_sample(rng, cfg));
            digests.push_back(sample_digest(samples.back()));
        }
        write_dataset(dir.file("many.pmseg"), samples, cfg.classes);
        DatasetReader reader(dir.file("many.pmseg"));
        CHECK(reader.count() == 100);
        for (int i = 0; i < 100; ++i) {
            CHECK(sample_digest(reader.next()) == digests[static_cast<std::size_t>(i)]);
        }
        CHECK(reader.done());
    }
}

TEST_CASE("dataset format errors") {
    TempDir dir;
    SUBCASE("bad magic") {
        std::ofstream out(dir.file("bad.pmseg"), std::ios::binary);
        out << "NOTPMSEG_AT_ALL____";
        out.close();
        CHECK_THROWS_AS(DatasetReader r(dir.file("bad.pmseg")), FormatError);
    }
    SUBCASE("truncated sample") {
        SyntheticTaskConfig cfg = small_task();
        Rng rng(7);
        auto s = generate_sample(rng, cfg);
        write_dataset(dir.file("full.pmseg"), {s, s}, cfg.classes);
        const auto full_size = fs::file_size(dir.file("full.pmseg"));
        std::ifstream in(dir.file("full.pmseg"), std::ios::binary);
        std::vector<char> bytes(full_size - 100);
        in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        std::ofstream out(dir.file("cut.pmseg"), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.close();

        DatasetReader reader(dir.file("cut.pmseg"));
        (void)reader.next();  // first sample intact
        try {
            (void)reader.next();
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.byte_offset > 0);
        }
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(DatasetReader r(dir.file("nope.pmseg")), IoError);
    }
    SUBCASE("reader rejects labels outside [0,K) u {255}") {
        SegSample s;
        s.height = 2;
        s.width = 2;
        s.image.assign(12, 0.25f);
        s.labels = {0, 1, 2, 3};
        write_dataset(dir.file("k4.pmseg"), {s}, 4);
        // Corrupt one label byte to 200 (the last byte of the file).
        std::fstream f(dir.file("k4.pmseg"),
                       std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(-1, std::ios::end);
        const char bad = static_cast<char>(200);
        f.write(&bad, 1);
        f.close();
        DatasetReader reader(dir.file("k4.pmseg"));
        CHECK_THROWS_AS((void)reader.next(), InvalidLabelError);
    }
    SUBCASE("writer rejects out-of-range labels") {
        SegSample s;
        s.height = 2;
        s.width = 2;
        s.image.assign(12, 0.0f);
        s.labels = {0, 1, 9, 0};
        CHECK_THROWS_AS(write_dataset(dir.file("x.pmseg"), {s}, 4), InvalidLabelError);
        s.labels = {0, 1, kIgnoreLabel, 0};  // 255 is allowed
        CHECK_NOTHROW(write_dataset(dir.file("x.pmseg"), {s}, 4));
    }
}

TEST_CASE("png round trip and directory conversion") {
    TempDir dir;
    fs::create_directories(dir.path / "img");
    fs::create_directories(dir.path / "lab");

    SyntheticTaskConfig cfg = small_task();
    Rng rng(8);
    std::vector<SegSample> originals;
    for (int i = 0; i < 3; ++i) {
        auto s = generate_sample(rng, cfg);
        PngImage img;
        img.width = s.width;
        img.height = s.height;
        img.channels = 3;
        img.data.resize(s.image.size());
        for (std::size_t p = 0; p < s.image.size(); ++p) {
            img.data[p] = static_cast<std::uint8_t>(std::lround(s.image[p] * 255.0f));
        }
        PngImage lab;
        lab.width = s.width;
        lab.height = s.height;
        lab.channels = 1;
        lab.data = s.labels;
        const std::string name = "sample_" + std::to_string(i) + ".png";
        write_png((dir.path / "img" / name).string(), img);
        write_png((dir.path / "lab" / name).string(), lab);
        originals.push_back(std::move(s));
    }

    const auto n = convert_png_dir((dir.path / "img").string(),
                                   (dir.path / "lab").string(), cfg.classes,
                                   dir.file("converted.pmseg"));
    CHECK(n == 3);
    auto back = read_dataset(dir.file("converted.pmseg"));
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].labels == originals[i].labels);
        for (std::size_t p = 0; p < back[i].image.size(); ++p) {
            // Images pass through u8 quantization.
            CHECK(std::abs(back[i].image[p] - originals[i].image[p]) <=
                  0.5f / 255.0f + 1e-6f);
        }
    }
}
