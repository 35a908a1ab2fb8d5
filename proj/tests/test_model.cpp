#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "cect/gradcheck.hpp"
#include "cect/model.hpp"
#include "oracles.hpp"

using namespace cect;

namespace {

CectConfig gradcheck_config() {
    CectConfig cfg = CectConfig::tiny();
    cfg.input_resolution = 32;
    return cfg;
}

template <typename S>
void fill_uniform(TensorT<S>& t, double lo, double hi, Rng& rng) {
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
}

template <typename S>
CswtBlockParamsT<S> random_block(std::int64_t dim, std::int64_t heads, std::int64_t window,
                                 double mlp_ratio, Rng& rng, double bias_scale = 0.3) {
    auto b = init_cswt_block<S>(dim, heads, window, mlp_ratio, rng);
    fill_uniform(b.rel_bias, -bias_scale, bias_scale, rng);
    return b;
}

template <typename S>
CswtBlockParamsT<S> zero_block(std::int64_t dim, std::int64_t heads, std::int64_t window,
                               double mlp_ratio) {
    Rng rng(0);
    auto b = init_cswt_block<S>(dim, heads, window, mlp_ratio, rng);
    for (auto t : {b.qkv.weight, b.qkv.bias, b.proj.weight, b.proj.bias, b.mlp_fc1.weight,
                   b.mlp_fc1.bias, b.mlp_fc2.weight, b.mlp_fc2.bias, b.rel_bias}) {
        for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = S(0);
    }
    return b;
}

} // namespace

TEST_CASE("coefficient validation") {
    EnsembleCoefficients ok{0.8, 0.1, 0.1};
    CHECK_NOTHROW(ok.validate());
    EnsembleCoefficients third;
    CHECK_NOTHROW(third.validate());

    EnsembleCoefficients bad_sum{0.5, 0.4, 0.4};
    try {
        bad_sum.validate();
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("1.3") != std::string::npos); // names the sum
    }
    CHECK_THROWS_AS((EnsembleCoefficients{1.2, -0.1, -0.1}.validate()), ValidationError);
    CHECK_THROWS_AS((EnsembleCoefficients{-0.2, 0.6, 0.6}.validate()), ValidationError);
}

TEST_CASE("config validation") {
    CHECK_NOTHROW(CectConfig::tiny().validate());
    CHECK_NOTHROW(CectConfig::base().validate());

    auto bad_res = CectConfig::tiny();
    bad_res.input_resolution = 60;
    CHECK_THROWS_AS(bad_res.validate(), ConfigError);

    auto bad_dims = CectConfig::tiny();
    bad_dims.tcb.stage_dims = {4, 8, 16, 28}; // not doubling
    CHECK_THROWS_AS(bad_dims.validate(), ConfigError);

    auto bad_window = CectConfig::base();
    bad_window.tcb.window_size = 4; // grid 14 at stage 3 is not divisible by 4
    try {
        bad_window.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("stage 3") != std::string::npos);
    }

    auto bad_heads = CectConfig::tiny();
    bad_heads.tcb.heads = {3, 2, 4, 8}; // 3 does not divide 4
    CHECK_THROWS_AS(bad_heads.validate(), ConfigError);
}

TEST_CASE("effective coefficients renormalize disabled branches") {
    auto cfg = CectConfig::tiny();
    cfg.enabled_branches = {Branch::SD2, Branch::SD3};
    auto eff = cfg.effective_coefficients();
    CHECK(eff.alpha == 0.0);
    CHECK(eff.beta == doctest::Approx(0.5));
    CHECK(eff.gamma == doctest::Approx(0.5));

    cfg.enabled_branches = {Branch::SD3};
    eff = cfg.effective_coefficients();
    CHECK(eff.gamma == doctest::Approx(1.0));
}

TEST_CASE("window partition arithmetic and round trip") {
    Rng rng(5);
    // H = W = window: single window, content unchanged
    auto t1 = rand_uniform<float>({2, 4, 4, 3}, -1, 1, rng);
    auto w1 = window_partition(t1, 4);
    CHECK(w1.shape() == Shape{2, 16, 3});
    for (std::int64_t i = 0; i < t1.size(); ++i) CHECK(w1.data()[i] == t1.data()[i]);

    // H = W = 8, window 4 -> 4 windows of 16 tokens
    auto t2 = rand_uniform<float>({1, 8, 8, 2}, -1, 1, rng);
    auto w2 = window_partition(t2, 4);
    CHECK(w2.shape() == Shape{4, 16, 2});

    // round trip is bit-exact
    auto back = window_reverse(w2, 4, 1, 8, 8);
    REQUIRE(back.shape() == t2.shape());
    for (std::int64_t i = 0; i < t2.size(); ++i) CHECK(back.data()[i] == t2.data()[i]);

    CHECK_THROWS_AS(window_partition(t2, 3), DimensionError);
}

TEST_CASE("relative position index is the expected bijection") {
    const int w = 4;
    auto idx = relative_position_index(w);
    const int span = 2 * w - 1;
    CHECK(idx.size() == 256);
    std::set<int> diag;
    for (int i = 0; i < 16; ++i) diag.insert(idx[static_cast<std::size_t>(i * 16 + i)]);
    CHECK(diag.size() == 1); // zero displacement always maps to the centre
    CHECK(*diag.begin() == (w - 1) * span + (w - 1));
    // distinct displacements get distinct entries, covering the full table
    std::set<int> all(idx.begin(), idx.end());
    CHECK(static_cast<int>(all.size()) == span * span);
    for (int v : all) CHECK((v >= 0 && v < span * span));
}

TEST_CASE("zero attention weights leave tokens unchanged (pure residual)") {
    Rng rng(7);
    auto tokens = rand_uniform<float>({1, 4, 4, 8}, -1, 1, rng);
    auto blk = zero_block<float>(8, 2, 4, 2.0);
    auto out = wmsa_block(tokens, blk, 2, 4);
    REQUIRE(out.shape() == tokens.shape());
    for (std::int64_t i = 0; i < tokens.size(); ++i) CHECK(out.data()[i] == tokens.data()[i]);
}

TEST_CASE("window attention with full-grid window matches naive attention") {
    Rng rng(11);
    const int C = 8, heads = 2, grid = 4;
    auto tokens = rand_uniform<float>({1, grid, grid, C}, -1, 1, rng);
    auto blk = random_block<float>(C, heads, grid, 2.0, rng, 0.0);
    for (std::int64_t i = 0; i < blk.rel_bias.size(); ++i) blk.rel_bias.data()[i] = 0.0f;

    auto wins = window_partition(tokens, grid); // single window
    auto got = window_attention(wins, blk, heads, grid,
                                static_cast<const std::vector<float>*>(nullptr), 1);

    std::vector<double> toks(tokens.values().begin(), tokens.values().end());
    std::vector<double> wqkv(blk.qkv.weight.values().begin(), blk.qkv.weight.values().end());
    std::vector<double> bqkv(blk.qkv.bias.values().begin(), blk.qkv.bias.values().end());
    std::vector<double> wproj(blk.proj.weight.values().begin(), blk.proj.weight.values().end());
    std::vector<double> bproj(blk.proj.bias.values().begin(), blk.proj.bias.values().end());
    auto ref = oracle::full_attention(toks, grid * grid, C, heads, wqkv, bqkv, wproj, bproj);

    REQUIRE(got.size() == static_cast<std::int64_t>(ref.size()));
    for (std::int64_t i = 0; i < got.size(); ++i)
        CHECK(std::abs(static_cast<double>(got.data()[i]) - ref[static_cast<std::size_t>(i)]) < 1e-6);
}

TEST_CASE("shifted attention never crosses the wrap-around boundary") {
    Rng rng(13);
    const int H = 8, W = 8, window = 4, shift = 2, C = 8, heads = 2;
    auto tokens = rand_uniform<float>({1, H, W, C}, -1, 1, rng);
    auto blk = random_block<float>(C, heads, window, 2.0, rng);

    // reproduce the attention weights: LN -> roll -> partition -> scores
    auto t = layer_norm(tokens, blk.ln1.gain, blk.ln1.bias, 1e-5);
    t = roll2d(t, -shift, -shift);
    auto wins = window_partition(t, window);
    const std::int64_t B = wins.dim(0), m = wins.dim(1);
    auto qkv = linear(wins, blk.qkv.weight, blk.qkv.bias);
    const std::int64_t d = C / heads;
    auto split_heads = [&](TensorT<float> x) {
        x = reshape(x, {B, m, heads, d});
        x = permute(x, {0, 2, 1, 3});
        return reshape(x, {B * heads, m, d});
    };
    auto q = split_heads(slice_last(qkv, 0, C));
    auto k = split_heads(slice_last(qkv, C, C));
    auto kt = permute(k, {0, 2, 1});
    auto scores = scale(bmm(q, kt), 1.0 / std::sqrt(static_cast<double>(d)));
    scores = reshape(scores, {B, heads, m, m});
    scores = add_bias_heads(scores, gather_bias(blk.rel_bias, relative_position_index(window), m));
    auto mask = shift_attention_mask<float>(H, W, window, shift);
    scores = add_window_mask(scores, mask, B);
    auto weights = softmax(scores);

    // oracle by coordinate bookkeeping: a rolled token at (y, x) wrapped iff
    // y + shift >= H (resp. x + shift >= W); pairs with differing wrap status
    // must receive (numerically) zero attention.
    const int nwx = W / window;
    int masked_pairs = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        const int wy = static_cast<int>(b) / nwx, wx = static_cast<int>(b) % nwx;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                const int yi = wy * window + i / window, xi = wx * window + i % window;
                const int yj = wy * window + j / window, xj = wx * window + j % window;
                const bool cross = ((yi + shift >= H) != (yj + shift >= H)) ||
                                   ((xi + shift >= W) != (xj + shift >= W));
                if (!cross) continue;
                ++masked_pairs;
                for (int h = 0; h < heads; ++h)
                    CHECK(weights.at({b, h, i, j}) < 1e-12f);
            }
    }
    CHECK(masked_pairs > 0);

    // attention rows still sum to 1 over the permitted tokens
    for (std::int64_t b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < m; ++i) {
                double s = 0;
                for (int j = 0; j < m; ++j) s += weights.at({b, h, i, j});
                CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
            }
}

TEST_CASE("all-zero block pair is the identity map") {
    Rng rng(17);
    auto tokens = rand_uniform<float>({2, 8, 8, 8}, -1, 1, rng);
    auto b1 = zero_block<float>(8, 2, 4, 2.0);
    auto b2 = zero_block<float>(8, 2, 4, 2.0);
    auto out = cswt_block_pair(tokens, b1, b2, 2, 4);
    REQUIRE(out.shape() == tokens.shape());
    for (std::int64_t i = 0; i < tokens.size(); ++i) CHECK(out.data()[i] == tokens.data()[i]);
}

TEST_CASE("block pair preserves shape and passes gradient check") {
    Rng rng(19);
    auto tokens = rand_uniform<double>({1, 4, 4, 6}, -1, 1, rng);
    auto b1 = random_block<double>(6, 2, 2, 2.0, rng);
    auto b2 = random_block<double>(6, 2, 2, 2.0, rng);
    auto out = cswt_block_pair(tokens, b1, b2, 2, 2);
    CHECK(out.shape() == tokens.shape());

    auto w = rand_uniform<double>({1, 4, 4, 6}, -1, 1, rng);
    auto f = [&] { return sum(mul(cswt_block_pair(tokens, b1, b2, 2, 2), w)); };
    std::vector<std::pair<std::string, TensorT<double>>> leaves{
        {"tokens", tokens},        {"qkv1", b1.qkv.weight},     {"bias1", b1.rel_bias},
        {"proj1", b1.proj.weight}, {"mlp1", b1.mlp_fc1.weight}, {"ln1", b1.ln1.gain},
        {"qkv2", b2.qkv.weight},   {"mlp2", b2.mlp_fc2.weight}};
    auto report = grad_check<double>(f, leaves, 1e-5, 20, &rng);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("CEB scale contract and branch liveness") {
    for (int R : {224, 64}) {
        CectConfig cfg = R == 224 ? CectConfig::base() : CectConfig::tiny();
        cfg.input_resolution = R;
        Rng rng(23);
        auto ceb = init_ceb<float>(cfg, rng);
        auto img = rand_uniform<float>({1, 3, R, R}, 0, 1, rng);
        auto maps = ceb_forward(img, ceb, cfg);
        CHECK(maps.f28.tensor.dim(2) == R / 8);
        CHECK(maps.f56.tensor.dim(2) == R / 4);
        CHECK(maps.f112.tensor.dim(2) == R / 2);
        CHECK(maps.f28.tensor.dim(1) == cfg.encoder_channels[0]);
        for (float v : maps.f28.tensor.values()) CHECK(std::isfinite(v));
    }

    // perturbation probe: all three branches respond to input changes
    CectConfig cfg = CectConfig::tiny();
    Rng rng(29);
    auto ceb = init_ceb<float>(cfg, rng);
    auto img = rand_uniform<float>({1, 3, 64, 64}, 0, 1, rng);
    auto base = ceb_forward(img, ceb, cfg);
    auto img2 = img.detach();
    for (std::int64_t i = 0; i < img2.size(); ++i) img2.data()[i] += 0.05f;
    auto pert = ceb_forward(img2, ceb, cfg);
    auto changed = [](const Tensor& a, const Tensor& b) {
        double m = 0;
        for (std::int64_t i = 0; i < a.size(); ++i)
            m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
        return m > 1e-6;
    };
    CHECK(changed(base.f28.tensor, pert.f28.tensor));
    CHECK(changed(base.f56.tensor, pert.f56.tensor));
    CHECK(changed(base.f112.tensor, pert.f112.tensor));

    // wrong resolution is rejected
    auto bad = rand_uniform<float>({1, 3, 32, 32}, 0, 1, rng);
    CHECK_THROWS_AS(ceb_forward(bad, ceb, cfg), DimensionError);
}

TEST_CASE("TDB degenerate coefficients reproduce single branches bit-exactly") {
    CectConfig cfg = CectConfig::tiny();
    Rng rng(31);
    auto ceb = init_ceb<float>(cfg, rng);
    auto tdb = init_tdb<float>(cfg, rng);
    auto img = rand_uniform<float>({2, 3, 64, 64}, 0, 1, rng);
    auto maps = ceb_forward(img, ceb, cfg);
    const std::set<Branch> all{Branch::SD1, Branch::SD2, Branch::SD3};

    auto f1 = sd1_forward(maps.f28.tensor, tdb);
    auto f2 = sd2_forward(maps.f56.tensor, tdb);
    auto f3 = sd3_forward(maps.f112.tensor, tdb);

    auto y1 = tdb_forward(maps, tdb, {1.0, 0.0, 0.0}, all, cfg);
    for (std::int64_t i = 0; i < f1.size(); ++i) CHECK(y1.tensor.data()[i] == f1.data()[i]);
    auto y2 = tdb_forward(maps, tdb, {0.0, 1.0, 0.0}, all, cfg);
    for (std::int64_t i = 0; i < f2.size(); ++i) CHECK(y2.tensor.data()[i] == f2.data()[i]);
    auto y3 = tdb_forward(maps, tdb, {0.0, 0.0, 1.0}, all, cfg);
    for (std::int64_t i = 0; i < f3.size(); ++i) CHECK(y3.tensor.data()[i] == f3.data()[i]);

    // every branch emits [N, dec_ch, R, R]
    CHECK(f1.shape() == Shape{2, 3, 64, 64});
    CHECK(f2.shape() == Shape{2, 3, 64, 64});
    CHECK(f3.shape() == Shape{2, 3, 64, 64});

    CHECK_THROWS_AS(tdb_forward(maps, tdb, {0.5, 0.4, 0.4}, all, cfg), ValidationError);
}

TEST_CASE("TDB fusion is linear in the coefficients") {
    CectConfig cfg = CectConfig::tiny();
    Rng rng(37);
    auto ceb = init_ceb<float>(cfg, rng);
    auto tdb = init_tdb<float>(cfg, rng);
    auto img = rand_uniform<float>({1, 3, 64, 64}, 0, 1, rng);
    auto maps = ceb_forward(img, ceb, cfg);
    const std::set<Branch> all{Branch::SD1, Branch::SD2, Branch::SD3};

    // y(1/3,1/3,1/3) == (y(1,0,0) + y(0,1,0) + y(0,0,1)) / 3
    auto mix = tdb_forward(maps, tdb, {1.0 / 3, 1.0 / 3, 1.0 / 3}, all, cfg).tensor;
    auto y1 = tdb_forward(maps, tdb, {1.0, 0.0, 0.0}, all, cfg).tensor;
    auto y2 = tdb_forward(maps, tdb, {0.0, 1.0, 0.0}, all, cfg).tensor;
    auto y3 = tdb_forward(maps, tdb, {0.0, 0.0, 1.0}, all, cfg).tensor;
    for (std::int64_t i = 0; i < mix.size(); ++i) {
        const double want = (static_cast<double>(y1.data()[i]) + y2.data()[i] + y3.data()[i]) / 3.0;
        CHECK(std::abs(static_cast<double>(mix.data()[i]) - want) < 1e-5);
    }
}

TEST_CASE("TCB token grids and output shape") {
    CectConfig cfg = CectConfig::base();
    const auto grids = cfg.token_grids();
    CHECK(grids == std::array<int, 4>{56, 28, 14, 7});
    const auto wins = cfg.effective_windows();
    CHECK(wins == std::array<int, 4>{7, 7, 7, 7});

    CectConfig tiny = CectConfig::tiny();
    CHECK(tiny.token_grids() == std::array<int, 4>{16, 8, 4, 2});
    CHECK(tiny.effective_windows() == std::array<int, 4>{4, 4, 4, 2});

    Rng rng(41);
    auto tcb = init_tcb<float>(tiny, tiny.decoder_channels, rng);
    auto x = rand_uniform<float>({3, 3, 64, 64}, -1, 1, rng);
    auto out = tcb_forward_full(x, tcb, tiny);
    CHECK(out.logits.shape() == Shape{3, 2});
    CHECK(out.penultimate.shape() == Shape{3, tiny.tcb.stage_dims[3]});

    // sensitivity probe: logits respond to input perturbation
    auto x2 = x.detach();
    for (std::int64_t i = 0; i < x2.size(); ++i) x2.data()[i] += 0.05f;
    auto out2 = tcb_forward_full(x2, tcb, tiny);
    double diff = 0;
    for (std::int64_t i = 0; i < out.logits.size(); ++i)
        diff = std::max(diff, std::abs(static_cast<double>(out.logits.data()[i]) - out2.logits.data()[i]));
    CHECK(diff > 1e-6);
}

TEST_CASE("end-to-end forward and penultimate contract") {
    CectConfig cfg = CectConfig::tiny();
    Rng rng(43);
    auto params = init_cect_params<float>(cfg, rng);
    auto img = rand_uniform<float>({4, 3, 64, 64}, 0, 1, rng);
    auto full = cect_forward_full(img, params, cfg);
    CHECK(full.logits.shape() == Shape{4, 2});

    // logits == head(penultimate) exactly
    auto logits2 = linear(full.penultimate.detach(), params.tcb.head.weight.detach(),
                          params.tcb.head.bias.detach());
    for (std::int64_t i = 0; i < full.logits.size(); ++i)
        CHECK(full.logits.data()[i] == logits2.data()[i]);

    // horizontal flip produces a different embedding in an untrained net
    auto flipped = img.detach();
    for (int n = 0; n < 4; ++n)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x)
                    flipped.at({n, c, y, x}) = img.at({n, c, y, 63 - x});
    auto emb_a = extract_penultimate(img, params, cfg);
    auto emb_b = extract_penultimate(flipped, params, cfg);
    double diff = 0;
    for (std::int64_t i = 0; i < emb_a.size(); ++i)
        diff = std::max(diff, std::abs(static_cast<double>(emb_a.data()[i]) - emb_b.data()[i]));
    CHECK(diff > 1e-6);
}

TEST_CASE("degenerate coefficients match a model with other branches disabled") {
    CectConfig cfg = CectConfig::tiny();
    cfg.coefficients = {1.0, 0.0, 0.0};
    Rng rng(47);
    auto params = init_cect_params<float>(cfg, rng);
    auto img = rand_uniform<float>({1, 3, 64, 64}, 0, 1, rng);
    auto logits_full = cect_forward(img, params, cfg);

    CectConfig only1 = cfg;
    only1.enabled_branches = {Branch::SD1};
    auto logits_only = cect_forward(img, params, only1);
    for (std::int64_t i = 0; i < logits_full.size(); ++i)
        CHECK(logits_full.data()[i] == logits_only.data()[i]);
}

TEST_CASE("scale contract across resolutions") {
    for (int R : {32, 64, 224}) {
        CectConfig cfg = CectConfig::tiny();
        cfg.input_resolution = R;
        if (R == 224) cfg.tcb.window_size = 7;
        cfg.validate();
        Rng rng(53);
        auto params = init_cect_params<float>(cfg, rng);
        auto img = rand_uniform<float>({1, 3, R, R}, 0, 1, rng);
        auto maps = ceb_forward(img, params.ceb, cfg);
        CHECK(maps.f28.tensor.dim(2) == R / 8);
        CHECK(maps.f56.tensor.dim(2) == R / 4);
        CHECK(maps.f112.tensor.dim(2) == R / 2);
        auto fused = tdb_forward(maps, params.tdb, cfg.effective_coefficients(),
                                 cfg.enabled_branches, cfg);
        CHECK(fused.tensor.dim(2) == R);
        CHECK(fused.tensor.dim(3) == R);
        auto logits = tcb_forward(fused.tensor, params.tcb, cfg);
        CHECK(logits.shape() == Shape{1, 2});
    }
}

TEST_CASE("whole tiny model gradient check") {
    CectConfig cfg = gradcheck_config();
    Rng rng(59);
    auto params = init_cect_params<double>(cfg, rng);
    auto img = rand_uniform<double>({2, 3, 32, 32}, 0, 1, rng);
    std::vector<int> labels{0, 1};
    auto f = [&] { return cross_entropy(cect_forward(img, params, cfg), labels); };

    std::vector<std::pair<std::string, TensorT<double>>> leaves{
        {"image", img},
        {"ceb.se1.conv", params.ceb.encoders[0].stages[0].conv_a.weight},
        {"ceb.se3.conv", params.ceb.encoders[2].stages[0].conv_b.weight},
        {"tdb.sd1.t1", params.tdb.sd1_tconv1.weight},
        {"tdb.sd3.t", params.tdb.sd3_tconv.weight},
        {"tcb.patch", params.tcb.patch_embed.weight},
        {"tcb.qkv", params.tcb.stages[0][0].qkv.weight},
        {"tcb.bias_table", params.tcb.stages[1][1].rel_bias},
        {"tcb.merge", params.tcb.merges[0].reduce},
        {"tcb.head", params.tcb.head.weight},
    };
    auto report = grad_check<double>(f, leaves, 1e-5, 6, &rng);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("replaying init from the same seed is bit-identical") {
    CectConfig cfg = CectConfig::tiny();
    Rng r1(77), r2(77);
    auto p1 = init_cect_params<float>(cfg, r1);
    auto p2 = init_cect_params<float>(cfg, r2);
    auto n1 = named_parameters(p1);
    auto n2 = named_parameters(p2);
    REQUIRE(n1.size() == n2.size());
    Rng rng(78);
    auto img = rand_uniform<float>({1, 3, 64, 64}, 0, 1, rng);
    auto y1 = cect_forward(img, p1, cfg);
    auto y2 = cect_forward(img, p2, cfg);
    for (std::int64_t i = 0; i < y1.size(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
}
