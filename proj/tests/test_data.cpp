#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "cect/data.hpp"
#include "testutil.hpp"

using namespace cect;
using namespace cect::data;
using testutil::TempDir;

namespace {

RawImage solid(int channels, int h, int w, float v) {
    RawImage img;
    img.channels = channels;
    img.height = h;
    img.width = w;
    img.pixels.assign(static_cast<std::size_t>(channels) * h * w, v);
    return img;
}

Manifest fake_manifest(std::int64_t positives, std::int64_t negatives) {
    Manifest m;
    for (std::int64_t i = 0; i < positives; ++i)
        m.entries.push_back({"pos_" + std::to_string(i), 1});
    for (std::int64_t i = 0; i < negatives; ++i)
        m.entries.push_back({"neg_" + std::to_string(i), 0});
    return m;
}

} // namespace

TEST_CASE("netpbm decode: ascii and binary round trip") {
    TempDir tmp("netpbm");
    testutil::spit(tmp.file("a.pgm"), "P2\n# comment\n2 2\n255\n0 128\n255 64\n");
    auto img = decode_image(tmp.file("a.pgm"));
    CHECK(img.channels == 1);
    CHECK(img.height == 2);
    CHECK(img.width == 2);
    CHECK(img.at(0, 0, 0) == doctest::Approx(0.0));
    CHECK(img.at(0, 0, 1) == doctest::Approx(128.0 / 255));
    CHECK(img.at(0, 1, 0) == doctest::Approx(1.0));

    testutil::spit(tmp.file("c.ppm"), "P3\n1 2\n255\n255 0 0\n0 255 0\n");
    auto rgb = decode_image(tmp.file("c.ppm"));
    CHECK(rgb.channels == 3);
    CHECK(rgb.at(0, 0, 0) == doctest::Approx(1.0));
    CHECK(rgb.at(1, 1, 0) == doctest::Approx(1.0));

    // binary write -> read reproduces quantized values exactly
    RawImage src = solid(3, 5, 4, 0.0f);
    Rng rng(3);
    for (auto& p : src.pixels) p = static_cast<float>(rng.uniform01());
    write_netpbm(src, tmp.file("d.ppm"));
    auto back = decode_image(tmp.file("d.ppm"));
    REQUIRE(back.pixels.size() == src.pixels.size());
    for (std::size_t i = 0; i < src.pixels.size(); ++i)
        CHECK(back.pixels[i] ==
              doctest::Approx(std::round(src.pixels[i] * 255.0f) / 255.0f).epsilon(1e-6));
}

TEST_CASE("raw container round trip and corrupt input errors") {
    TempDir tmp("raw");
    RawImage src = solid(1, 3, 7, 0.25f);
    src.at(0, 1, 2) = 0.75f;
    write_raw(src, tmp.file("x.craw"));
    auto back = decode_image(tmp.file("x.craw"));
    CHECK(back.channels == 1);
    CHECK(back.height == 3);
    CHECK(back.width == 7);
    CHECK(back.at(0, 1, 2) == doctest::Approx(0.75).epsilon(1e-2));

    testutil::spit(tmp.file("bad.bin"), "not an image at all");
    CHECK_THROWS_AS(decode_image(tmp.file("bad.bin")), IoError);
    testutil::spit(tmp.file("trunc.pgm"), "P5\n4 4\n255\nab");
    CHECK_THROWS_AS(decode_image(tmp.file("trunc.pgm")), IoError);
    CHECK_THROWS_AS(decode_image(tmp.file("missing.pgm")), IoError);
}

TEST_CASE("manifest from directories and CSV") {
    TempDir tmp("manifest");
    namespace fs = std::filesystem;
    fs::create_directories(tmp.path / "positive");
    fs::create_directories(tmp.path / "negative");
    for (int i = 0; i < 3; ++i)
        write_netpbm(solid(1, 4, 4, 0.5f), (tmp.path / "positive" / ("p" + std::to_string(i) + ".pgm")).string());
    for (int i = 0; i < 2; ++i)
        write_netpbm(solid(1, 4, 4, 0.5f), (tmp.path / "negative" / ("n" + std::to_string(i) + ".pgm")).string());

    auto m = load_manifest(tmp.str());
    CHECK(m.size() == 5);
    CHECK(m.count(1) == 3);
    CHECK(m.count(0) == 2);
    CHECK(std::is_sorted(m.entries.begin(), m.entries.end(),
                         [](const auto& a, const auto& b) { return a.path < b.path; }));

    save_manifest_csv(m, tmp.file("index.csv"));
    auto m2 = load_manifest(tmp.file("index.csv"));
    CHECK(m2.size() == 5);
    CHECK(m2.count(1) == 3);

    testutil::spit(tmp.file("dup.csv"), "path,label\na.pgm,positive\na.pgm,negative\nb.pgm,negative\n");
    CHECK_THROWS_AS(load_manifest_csv(tmp.file("dup.csv")), IoError);
    testutil::spit(tmp.file("lbl.csv"), "path,label\na.pgm,maybe\n");
    CHECK_THROWS_AS(load_manifest_csv(tmp.file("lbl.csv")), IoError);
    testutil::spit(tmp.file("onecls.csv"), "path,label\na.pgm,positive\nb.pgm,1\n");
    CHECK_THROWS_AS(load_manifest_csv(tmp.file("onecls.csv")), IoError);
}

TEST_CASE("split reproduces the published 8:1:1 counts") {
    auto m = fake_manifest(3616, 10192);
    CHECK(m.size() == 13808);
    SplitSpec spec;
    spec.seed = 4;
    auto r = split(m, spec);
    CHECK(r.train.count(1) == 2892);
    CHECK(r.val.count(1) == 362);
    CHECK(r.test.count(1) == 362);
    CHECK(r.train.count(0) == 8154);
    CHECK(r.val.count(0) == 1019);
    CHECK(r.test.count(0) == 1019);
}

TEST_CASE("two-way split with external test reproduces the 8:2 counts") {
    auto m = fake_manifest(15994, 13992);
    auto ext = fake_manifest(200, 200);
    SplitSpec spec;
    spec.mode = SplitMode::TwoWayWithExternalTest;
    spec.ratios = {0.8, 0.2, 0.0};
    auto r = split(m, spec, &ext);
    CHECK(r.train.count(1) == 12795);
    CHECK(r.val.count(1) == 3199);
    CHECK(r.train.count(0) == 11194);
    CHECK(r.val.count(0) == 2798);
    CHECK(r.test.size() == 400);

    CHECK_THROWS_AS(split(m, spec, nullptr), ValidationError);
}

TEST_CASE("split is a stratified partition and deterministic") {
    auto m = fake_manifest(37, 53);
    SplitSpec spec;
    spec.seed = 11;
    auto r1 = split(m, spec);
    auto r2 = split(m, spec);

    std::set<std::string> all;
    for (const auto* part : {&r1.train, &r1.val, &r1.test})
        for (const auto& e : part->entries) CHECK(all.insert(e.path).second); // disjoint
    CHECK(all.size() == m.size());                                            // exhaustive

    auto paths = [](const Manifest& mm) {
        std::vector<std::string> v;
        for (const auto& e : mm.entries) v.push_back(e.path);
        return v;
    };
    CHECK(paths(r1.train) == paths(r2.train));
    CHECK(paths(r1.val) == paths(r2.val));
    CHECK(paths(r1.test) == paths(r2.test));

    SplitSpec other = spec;
    other.seed = 12;
    auto r3 = split(m, other);
    CHECK(paths(r1.train) != paths(r3.train)); // seed matters

    auto small = fake_manifest(2, 9);
    CHECK_THROWS_AS(split(small, spec), ValidationError);
}

TEST_CASE("preprocess: solid gray, exact 2x downscale, non-square input") {
    NormalizationConfig norm;
    auto gray = solid(1, 300, 300, 0.5f);
    auto t = preprocess(gray, 224, norm);
    CHECK(t.shape() == Shape{3, 224, 224});
    for (std::int64_t i = 0; i < t.size(); ++i)
        CHECK(t.data()[i] == doctest::Approx((0.5 - 0.5) / 0.5).epsilon(1e-6));

    // 448 -> 224 equals 2x2 block averaging
    RawImage big = solid(1, 448, 448, 0.0f);
    Rng rng(9);
    for (auto& p : big.pixels) p = static_cast<float>(rng.uniform01());
    NormalizationConfig ident;
    ident.mean = {0, 0, 0};
    ident.stddev = {1, 1, 1};
    auto small = preprocess(big, 224, ident);
    for (int y = 0; y < 224; ++y)
        for (int x = 0; x < 224; ++x) {
            const double avg = (big.at(0, 2 * y, 2 * x) + big.at(0, 2 * y, 2 * x + 1) +
                                big.at(0, 2 * y + 1, 2 * x) + big.at(0, 2 * y + 1, 2 * x + 1)) /
                               4.0;
            CHECK(small.at({0, y, x}) == doctest::Approx(avg).epsilon(1e-5));
        }

    auto rect = solid(3, 300, 200, 0.25f);
    auto tr = preprocess(rect, 224, norm);
    CHECK(tr.shape() == Shape{3, 224, 224});
    for (float v : tr.values()) CHECK(std::isfinite(v));
}

TEST_CASE("augment: involution, identity crop, determinism") {
    Rng rng(21);
    RawImage img = solid(3, 64, 64, 0.0f);
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform01());

    // double flip restores the original
    auto once = hflip(img);
    auto twice = hflip(once);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(twice.pixels[i] == img.pixels[i]);

    // degenerate crop ranges + zero flip probability = identity
    AugmentationConfig ident;
    ident.crop_scale_min = ident.crop_scale_max = 1.0;
    ident.crop_ratio_min = ident.crop_ratio_max = 1.0;
    ident.flip_prob = 0.0;
    Rng arng(5);
    auto out = augment(img, 64, ident, arng);
    REQUIRE(out.pixels.size() == img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(out.pixels[i] == img.pixels[i]);

    // forced flip twice restores the original
    AugmentationConfig flip = ident;
    flip.flip_prob = 1.0;
    Rng frng(6);
    auto f1 = augment(img, 64, flip, frng);
    auto f2 = hflip(f1);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(f2.pixels[i] == img.pixels[i]);

    // same seed -> identical augmented output
    AugmentationConfig cfg;
    Rng r1(77), r2(77);
    auto a1 = augment(img, 48, cfg, r1);
    auto a2 = augment(img, 48, cfg, r2);
    REQUIRE(a1.pixels.size() == a2.pixels.size());
    for (std::size_t i = 0; i < a1.pixels.size(); ++i) CHECK(a1.pixels[i] == a2.pixels[i]);

    AugmentationConfig bad;
    bad.crop_scale_min = 0.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("synthetic dataset: determinism, balance, band separation") {
    TempDir tmp1("synth1"), tmp2("synth2");
    auto m1 = synth_generate(16, 64, 7, tmp1.str());
    auto m2 = synth_generate(16, 64, 7, tmp2.str());
    CHECK(m1.size() == 32);
    CHECK(m1.count(0) == 16);
    CHECK(m1.count(1) == 16);

    // byte-identical across runs
    for (std::size_t i = 0; i < m1.entries.size(); ++i) {
        auto b1 = testutil::slurp(m1.entries[i].path);
        auto b2 = testutil::slurp(m2.entries[i].path);
        CHECK(b1 == b2);
        CHECK(!b1.empty());
    }

    // low-frequency band energy separates the classes: 8x8 box means vary
    // more for the gradient class
    auto band_energy = [](const RawImage& img) {
        const int cells = img.height / 8;
        std::vector<double> means;
        double total = 0.0;
        for (int cy = 0; cy < cells; ++cy)
            for (int cx = 0; cx < cells; ++cx) {
                double s = 0.0;
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) s += img.at(0, cy * 8 + y, cx * 8 + x);
                means.push_back(s / 64.0);
                total += s / 64.0;
            }
        const double mean = total / static_cast<double>(means.size());
        double var = 0.0;
        for (double v : means) var += (v - mean) * (v - mean);
        return var / static_cast<double>(means.size());
    };
    double e0 = 0.0, e1 = 0.0;
    for (const auto& e : m1.entries) {
        const double be = band_energy(decode_image(e.path));
        (e.label ? e1 : e0) += be;
    }
    e0 /= 16.0;
    e1 /= 16.0;
    CHECK(e1 > 3.0 * e0); // gradient class carries far more low-band energy

    CHECK_THROWS_AS(synth_generate(0, 64, 7, tmp1.str()), ValidationError);
}

TEST_CASE("load_dataset decodes every manifest entry") {
    TempDir tmp("load");
    auto m = synth_generate(3, 32, 5, tmp.str());
    auto ds = load_dataset(m);
    CHECK(ds.size() == 6);
    for (const auto& s : ds.samples) {
        CHECK(s.image.height == 32);
        CHECK((s.label == 0 || s.label == 1));
        CHECK(!s.source_id.empty());
    }
}
