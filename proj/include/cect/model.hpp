#pragma once

// The CECT architecture: a three-branch convolutional encoder (CEB), a
// transposed-convolution decoder with coefficient-weighted fusion (TDB) and
// a four-stage shifted-window transformer classifier (TCB) ending in a
// two-node head. Everything is templated on the scalar type so gradient
// checks can run the identical network in double precision.

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cect/config.hpp"
#include "cect/nn.hpp"
#include "cect/rng.hpp"
#include "cect/tensor.hpp"

namespace cect {

// A tensor tagged with its semantic scale relative to the input resolution.
template <typename S>
struct FeatureMapT {
    TensorT<S> tensor;
    ScaleTag tag = ScaleTag::S224;

    void validate(int resolution) const {
        const int want = resolution / scale_divisor(tag);
        if (tensor.rank() != 4 || tensor.dim(2) != want || tensor.dim(3) != want)
            throw DimensionError("feature map tagged " + scale_name(tag) + " must be [N,C," +
                                 std::to_string(want) + "," + std::to_string(want) + "], got " +
                                 shape_str(tensor.shape()));
    }
};

using FeatureMap = FeatureMapT<float>;

// ---------------------------------------------------------------------------
// parameter containers

template <typename S>
struct ConvParams {
    TensorT<S> weight, bias;
};

template <typename S>
struct LinearParams {
    TensorT<S> weight, bias; // bias may be undefined
};

template <typename S>
struct NormParams {
    TensorT<S> gain, bias;
};

template <typename S>
struct EncoderStage {
    ConvParams<S> conv_a; // 3x3 stride 1 pad 1
    ConvParams<S> conv_b; // 3x3 stride 2 pad 1
};

template <typename S>
struct SubEncoderParams {
    std::vector<EncoderStage<S>> stages;
};

template <typename S>
struct CebParams {
    std::array<SubEncoderParams<S>, 3> encoders; // SE1 (3 stages), SE2 (2), SE3 (1)
};

template <typename S>
struct TdbParams {
    ConvParams<S> sd1_tconv1, sd1_tconv2;
    ConvParams<S> sd2_tconv1, sd2_tconv2;
    ConvParams<S> sd3_tconv;
};

template <typename S>
struct CswtBlockParamsT {
    NormParams<S> ln1, ln2;
    LinearParams<S> qkv;  // [C, 3C]
    LinearParams<S> proj; // [C, C]
    LinearParams<S> mlp_fc1, mlp_fc2;
    TensorT<S> rel_bias; // [heads, (2w-1)^2], zero-initialized
};

using CswtBlockParams = CswtBlockParamsT<float>;

template <typename S>
struct PatchMergeParams {
    NormParams<S> norm;  // over 4C
    TensorT<S> reduce;   // [4C, 2C], no bias
};

template <typename S>
struct TcbParams {
    ConvParams<S> patch_embed; // [D0, in_ch, p, p], stride p
    NormParams<S> patch_norm;
    std::array<std::vector<CswtBlockParamsT<S>>, 4> stages; // 2 * depth blocks each
    std::array<PatchMergeParams<S>, 3> merges;
    NormParams<S> final_norm;
    LinearParams<S> head; // [D3, 2]
};

template <typename S>
struct CectParams {
    CebParams<S> ceb;
    TdbParams<S> tdb;
    TcbParams<S> tcb;
};

// ---------------------------------------------------------------------------
// initialization (uniform Kaiming-style fan-in scaling, zero biases)

template <typename S>
TensorT<S> init_weight(Shape shape, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    TensorT<S> w = rand_uniform<S>(std::move(shape), -bound, bound, rng);
    w.set_requires_grad(true);
    return w;
}

template <typename S>
TensorT<S> init_zeros(Shape shape) {
    TensorT<S> t(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

template <typename S>
TensorT<S> init_ones(Shape shape) {
    TensorT<S> t(std::move(shape), S(1));
    t.set_requires_grad(true);
    return t;
}

template <typename S>
ConvParams<S> init_conv(std::int64_t out_ch, std::int64_t in_ch, std::int64_t k, Rng& rng) {
    ConvParams<S> p;
    p.weight = init_weight<S>({out_ch, in_ch, k, k}, in_ch * k * k, rng);
    p.bias = init_zeros<S>({out_ch});
    return p;
}

// Transposed-conv kernels are stored [in_ch, out_ch, k, k].
template <typename S>
ConvParams<S> init_tconv(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, Rng& rng) {
    ConvParams<S> p;
    p.weight = init_weight<S>({in_ch, out_ch, k, k}, in_ch * k * k, rng);
    p.bias = init_zeros<S>({out_ch});
    return p;
}

template <typename S>
LinearParams<S> init_linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true) {
    LinearParams<S> p;
    p.weight = init_weight<S>({in, out}, in, rng);
    if (with_bias) p.bias = init_zeros<S>({out});
    return p;
}

template <typename S>
NormParams<S> init_norm(std::int64_t d) {
    return NormParams<S>{init_ones<S>({d}), init_zeros<S>({d})};
}

template <typename S>
CswtBlockParamsT<S> init_cswt_block(std::int64_t dim, std::int64_t heads, std::int64_t window,
                                    double mlp_ratio, Rng& rng) {
    CswtBlockParamsT<S> b;
    b.ln1 = init_norm<S>(dim);
    b.qkv = init_linear<S>(dim, 3 * dim, rng);
    b.proj = init_linear<S>(dim, dim, rng);
    b.ln2 = init_norm<S>(dim);
    const std::int64_t hidden = std::max<std::int64_t>(1, std::llround(mlp_ratio * static_cast<double>(dim)));
    b.mlp_fc1 = init_linear<S>(dim, hidden, rng);
    b.mlp_fc2 = init_linear<S>(hidden, dim, rng);
    b.rel_bias = init_zeros<S>({heads, (2 * window - 1) * (2 * window - 1)});
    return b;
}

template <typename S>
CebParams<S> init_ceb(const CectConfig& cfg, Rng& rng) {
    CebParams<S> ceb;
    const int stage_counts[3] = {3, 2, 1};
    for (int e = 0; e < 3; ++e) {
        const std::int64_t width = cfg.encoder_channels[static_cast<std::size_t>(e)];
        std::int64_t in_ch = cfg.input_channels;
        for (int s = 0; s < stage_counts[e]; ++s) {
            EncoderStage<S> st;
            st.conv_a = init_conv<S>(width, in_ch, 3, rng);
            st.conv_b = init_conv<S>(width, width, 3, rng);
            ceb.encoders[static_cast<std::size_t>(e)].stages.push_back(std::move(st));
            in_ch = width;
        }
    }
    return ceb;
}

template <typename S>
TdbParams<S> init_tdb(const CectConfig& cfg, Rng& rng) {
    TdbParams<S> tdb;
    tdb.sd1_tconv1 = init_tconv<S>(cfg.encoder_channels[0], cfg.decoder_hidden, 4, rng);
    tdb.sd1_tconv2 = init_tconv<S>(cfg.decoder_hidden, cfg.decoder_channels, 4, rng);
    tdb.sd2_tconv1 = init_tconv<S>(cfg.encoder_channels[1], cfg.decoder_hidden, 4, rng);
    tdb.sd2_tconv2 = init_tconv<S>(cfg.decoder_hidden, cfg.decoder_channels, 4, rng);
    tdb.sd3_tconv = init_tconv<S>(cfg.encoder_channels[2], cfg.decoder_channels, 4, rng);
    return tdb;
}

template <typename S>
TcbParams<S> init_tcb(const CectConfig& cfg, std::int64_t in_channels, Rng& rng) {
    TcbParams<S> tcb;
    const auto wins = cfg.effective_windows();
    tcb.patch_embed = init_conv<S>(cfg.tcb.stage_dims[0], in_channels, cfg.tcb.patch_size, rng);
    tcb.patch_norm = init_norm<S>(cfg.tcb.stage_dims[0]);
    for (int i = 0; i < 4; ++i) {
        const std::int64_t dim = cfg.tcb.stage_dims[static_cast<std::size_t>(i)];
        const std::int64_t heads = cfg.tcb.heads[static_cast<std::size_t>(i)];
        for (int b = 0; b < 2 * cfg.tcb.stage_depths[static_cast<std::size_t>(i)]; ++b)
            tcb.stages[static_cast<std::size_t>(i)].push_back(
                init_cswt_block<S>(dim, heads, wins[static_cast<std::size_t>(i)], cfg.tcb.mlp_ratio, rng));
        if (i < 3) {
            tcb.merges[static_cast<std::size_t>(i)].norm = init_norm<S>(4 * dim);
            tcb.merges[static_cast<std::size_t>(i)].reduce = init_weight<S>({4 * dim, 2 * dim}, 4 * dim, rng);
        }
    }
    tcb.final_norm = init_norm<S>(cfg.tcb.stage_dims[3]);
    tcb.head = init_linear<S>(cfg.tcb.stage_dims[3], 2, rng);
    return tcb;
}

template <typename S>
CectParams<S> init_cect_params(const CectConfig& cfg, Rng& rng) {
    cfg.validate();
    CectParams<S> p;
    p.ceb = init_ceb<S>(cfg, rng);
    p.tdb = init_tdb<S>(cfg, rng);
    p.tcb = init_tcb<S>(cfg, cfg.decoder_channels, rng);
    return p;
}

// ---------------------------------------------------------------------------
// named parameter enumeration (fixed order; checkpoint + optimizer rely on it)

template <typename S>
using NamedParams = std::vector<std::pair<std::string, TensorT<S>>>;

template <typename S>
void collect_conv(NamedParams<S>& out, const std::string& prefix, const ConvParams<S>& c) {
    out.emplace_back(prefix + ".weight", c.weight);
    out.emplace_back(prefix + ".bias", c.bias);
}

template <typename S>
void collect_linear(NamedParams<S>& out, const std::string& prefix, const LinearParams<S>& l) {
    out.emplace_back(prefix + ".weight", l.weight);
    if (l.bias.defined()) out.emplace_back(prefix + ".bias", l.bias);
}

template <typename S>
void collect_norm(NamedParams<S>& out, const std::string& prefix, const NormParams<S>& n) {
    out.emplace_back(prefix + ".gain", n.gain);
    out.emplace_back(prefix + ".bias", n.bias);
}

template <typename S>
void collect_block(NamedParams<S>& out, const std::string& prefix, const CswtBlockParamsT<S>& b) {
    collect_norm(out, prefix + ".ln1", b.ln1);
    collect_linear(out, prefix + ".qkv", b.qkv);
    collect_linear(out, prefix + ".proj", b.proj);
    collect_norm(out, prefix + ".ln2", b.ln2);
    collect_linear(out, prefix + ".mlp1", b.mlp_fc1);
    collect_linear(out, prefix + ".mlp2", b.mlp_fc2);
    out.emplace_back(prefix + ".rel_bias", b.rel_bias);
}

template <typename S>
void collect_ceb(NamedParams<S>& out, const CebParams<S>& ceb) {
    for (int e = 0; e < 3; ++e) {
        const auto& enc = ceb.encoders[static_cast<std::size_t>(e)];
        for (std::size_t s = 0; s < enc.stages.size(); ++s) {
            const std::string p = "ceb.se" + std::to_string(e + 1) + ".stage" + std::to_string(s);
            collect_conv(out, p + ".conv_a", enc.stages[s].conv_a);
            collect_conv(out, p + ".conv_b", enc.stages[s].conv_b);
        }
    }
}

template <typename S>
void collect_tdb(NamedParams<S>& out, const TdbParams<S>& tdb) {
    collect_conv(out, "tdb.sd1.tconv1", tdb.sd1_tconv1);
    collect_conv(out, "tdb.sd1.tconv2", tdb.sd1_tconv2);
    collect_conv(out, "tdb.sd2.tconv1", tdb.sd2_tconv1);
    collect_conv(out, "tdb.sd2.tconv2", tdb.sd2_tconv2);
    collect_conv(out, "tdb.sd3.tconv1", tdb.sd3_tconv);
}

template <typename S>
void collect_tcb(NamedParams<S>& out, const TcbParams<S>& tcb) {
    collect_conv(out, "tcb.patch_embed", tcb.patch_embed);
    collect_norm(out, "tcb.patch_norm", tcb.patch_norm);
    for (int i = 0; i < 4; ++i) {
        const auto& stage = tcb.stages[static_cast<std::size_t>(i)];
        for (std::size_t b = 0; b < stage.size(); ++b)
            collect_block(out, "tcb.stage" + std::to_string(i + 1) + ".block" + std::to_string(b),
                          stage[b]);
        if (i < 3) {
            const std::string p = "tcb.merge" + std::to_string(i + 1);
            collect_norm(out, p + ".norm", tcb.merges[static_cast<std::size_t>(i)].norm);
            out.emplace_back(p + ".reduce", tcb.merges[static_cast<std::size_t>(i)].reduce);
        }
    }
    collect_norm(out, "tcb.final_norm", tcb.final_norm);
    collect_linear(out, "tcb.head", tcb.head);
}

template <typename S>
NamedParams<S> named_parameters(const CectParams<S>& p) {
    NamedParams<S> out;
    collect_ceb(out, p.ceb);
    collect_tdb(out, p.tdb);
    collect_tcb(out, p.tcb);
    return out;
}

// ---------------------------------------------------------------------------
// window bookkeeping

// [N, H, W, C] -> [N*nw, window^2, C]; bit-exact inverse below.
template <typename S>
TensorT<S> window_partition(const TensorT<S>& tokens, int window) {
    if (tokens.rank() != 4)
        throw DimensionError("window_partition: expected [N,H,W,C], got " + shape_str(tokens.shape()));
    const std::int64_t N = tokens.dim(0), H = tokens.dim(1), W = tokens.dim(2), C = tokens.dim(3);
    if (window < 1 || H % window != 0 || W % window != 0)
        throw DimensionError("window_partition: grid " + std::to_string(H) + "x" + std::to_string(W) +
                             " not divisible by window " + std::to_string(window));
    auto t = reshape(tokens, {N, H / window, window, W / window, window, C});
    t = permute(t, {0, 1, 3, 2, 4, 5});
    return reshape(t, {N * (H / window) * (W / window), static_cast<std::int64_t>(window) * window, C});
}

template <typename S>
TensorT<S> window_reverse(const TensorT<S>& windows, int window, std::int64_t N, std::int64_t H,
                          std::int64_t W) {
    if (windows.rank() != 3)
        throw DimensionError("window_reverse: expected [B,m,C], got " + shape_str(windows.shape()));
    const std::int64_t nw = (H / window) * (W / window);
    if (H % window != 0 || W % window != 0 || windows.dim(0) != N * nw ||
        windows.dim(1) != static_cast<std::int64_t>(window) * window)
        throw DimensionError("window_reverse: windows " + shape_str(windows.shape()) +
                             " do not tile a " + std::to_string(H) + "x" + std::to_string(W) + " grid");
    const std::int64_t C = windows.dim(2);
    auto t = reshape(windows, {N, H / window, W / window, window, window, C});
    t = permute(t, {0, 1, 3, 2, 4, 5});
    return reshape(t, {N, H, W, C});
}

// Fixed bijection from intra-window displacement to bias-table index.
inline std::vector<int> relative_position_index(int window) {
    const int m = window * window;
    const int span = 2 * window - 1;
    std::vector<int> idx(static_cast<std::size_t>(m) * static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const int yi = i / window, xi = i % window;
        for (int j = 0; j < m; ++j) {
            const int yj = j / window, xj = j % window;
            idx[static_cast<std::size_t>(i * m + j)] = (yi - yj + window - 1) * span + (xi - xj + window - 1);
        }
    }
    return idx;
}

// Attention mask for shifted windows. Tokens that wrapped around under the
// cyclic shift get region ids different from their window mates; cross-region
// logits are pushed to -100 so their post-softmax weight vanishes.
template <typename S>
std::vector<S> shift_attention_mask(std::int64_t H, std::int64_t W, int window, int shift) {
    const std::int64_t nwy = H / window, nwx = W / window;
    const std::int64_t m = static_cast<std::int64_t>(window) * window;
    std::vector<int> ids(static_cast<std::size_t>(H * W));
    auto band = [&](std::int64_t t, std::int64_t extent) {
        if (t < extent - window) return 0;
        if (t < extent - shift) return 1;
        return 2;
    };
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
            ids[static_cast<std::size_t>(y * W + x)] = band(y, H) * 3 + band(x, W);
    std::vector<S> mask(static_cast<std::size_t>(nwy * nwx * m * m), S(0));
    for (std::int64_t wy = 0; wy < nwy; ++wy)
        for (std::int64_t wx = 0; wx < nwx; ++wx) {
            std::vector<int> wid(static_cast<std::size_t>(m));
            for (int dy = 0; dy < window; ++dy)
                for (int dx = 0; dx < window; ++dx)
                    wid[static_cast<std::size_t>(dy * window + dx)] =
                        ids[static_cast<std::size_t>((wy * window + dy) * W + wx * window + dx)];
            S* mp = mask.data() + (wy * nwx + wx) * m * m;
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < m; ++j)
                    if (wid[static_cast<std::size_t>(i)] != wid[static_cast<std::size_t>(j)])
                        mp[i * m + j] = S(-100);
        }
    return mask;
}

// ---------------------------------------------------------------------------
// attention and transformer blocks

// Multi-head self-attention over window tokens [B, m, C] with relative
// position bias and an optional shift mask ([nw, m, m], indexed b % nw).
template <typename S>
TensorT<S> window_attention(const TensorT<S>& windows, const CswtBlockParamsT<S>& p, int heads,
                            int window, const std::vector<S>* mask, std::int64_t nw) {
    const std::int64_t B = windows.dim(0), m = windows.dim(1), C = windows.dim(2);
    if (C % heads != 0)
        throw ConfigError("attention: heads " + std::to_string(heads) + " must divide dim " +
                          std::to_string(C));
    const std::int64_t d = C / heads;
    auto qkv = linear(windows, p.qkv.weight, p.qkv.bias); // [B, m, 3C]
    auto split_heads = [&](TensorT<S> t) {
        t = reshape(t, {B, m, heads, d});
        t = permute(t, {0, 2, 1, 3}); // [B, h, m, d]
        return reshape(t, {B * heads, m, d});
    };
    auto q = split_heads(slice_last(qkv, 0, C));
    auto k = split_heads(slice_last(qkv, C, C));
    auto v = split_heads(slice_last(qkv, 2 * C, C));

    auto kt = permute(reshape(k, {B * heads, m, d}), {0, 2, 1}); // [B*h, d, m]
    auto scores = scale(bmm(q, kt), 1.0 / std::sqrt(static_cast<double>(d)));
    scores = reshape(scores, {B, heads, m, m});

    auto bias = gather_bias(p.rel_bias, relative_position_index(window), m);
    scores = add_bias_heads(scores, bias);
    if (mask) scores = add_window_mask(scores, *mask, nw);

    auto attn = softmax(scores);
    auto ctx = bmm(reshape(attn, {B * heads, m, m}), v); // [B*h, m, d]
    ctx = reshape(ctx, {B, heads, m, d});
    ctx = permute(ctx, {0, 2, 1, 3});
    ctx = reshape(ctx, {B, m, C});
    return linear(ctx, p.proj.weight, p.proj.bias);
}

// Attention sublayer: z + (S)W-MSA(LN(z)). shift == 0 gives W-MSA; shift > 0
// cyclically shifts the token grid first and reverses it after.
template <typename S>
TensorT<S> attention_sublayer(const TensorT<S>& tokens, const CswtBlockParamsT<S>& p, int heads,
                              int window, int shift, double ln_eps) {
    const std::int64_t N = tokens.dim(0), H = tokens.dim(1), W = tokens.dim(2);
    auto t = layer_norm(tokens, p.ln1.gain, p.ln1.bias, ln_eps);
    if (shift > 0) t = roll2d(t, -shift, -shift);
    auto wins = window_partition(t, window);
    const std::int64_t nw = (H / window) * (W / window);
    std::vector<S> mask;
    if (shift > 0) mask = shift_attention_mask<S>(H, W, window, shift);
    auto attended = window_attention(wins, p, heads, window, shift > 0 ? &mask : nullptr, nw);
    t = window_reverse(attended, window, N, H, W);
    if (shift > 0) t = roll2d(t, shift, shift);
    return add(tokens, t);
}

// MLP sublayer: z + fc2(GELU(fc1(LN(z)))).
template <typename S>
TensorT<S> mlp_sublayer(const TensorT<S>& tokens, const CswtBlockParamsT<S>& p, double ln_eps) {
    auto t = layer_norm(tokens, p.ln2.gain, p.ln2.bias, ln_eps);
    t = linear(t, p.mlp_fc1.weight, p.mlp_fc1.bias);
    t = gelu(t);
    t = linear(t, p.mlp_fc2.weight, p.mlp_fc2.bias);
    return add(tokens, t);
}

template <typename S>
TensorT<S> wmsa_block(const TensorT<S>& tokens, const CswtBlockParamsT<S>& p, int heads, int window,
                      double ln_eps = 1e-5) {
    return attention_sublayer(tokens, p, heads, window, 0, ln_eps);
}

template <typename S>
TensorT<S> swmsa_block(const TensorT<S>& tokens, const CswtBlockParamsT<S>& p, int heads, int window,
                       double ln_eps = 1e-5) {
    const int shift = (window > 1 && (window < tokens.dim(1) || window < tokens.dim(2))) ? window / 2 : 0;
    return attention_sublayer(tokens, p, heads, window, shift, ln_eps);
}

// One regular + one shifted unit, each followed by its MLP sublayer.
template <typename S>
TensorT<S> cswt_block_pair(const TensorT<S>& tokens, const CswtBlockParamsT<S>& p1,
                           const CswtBlockParamsT<S>& p2, int heads, int window,
                           double ln_eps = 1e-5) {
    auto z = wmsa_block(tokens, p1, heads, window, ln_eps);
    z = mlp_sublayer(z, p1, ln_eps);
    z = swmsa_block(z, p2, heads, window, ln_eps);
    return mlp_sublayer(z, p2, ln_eps);
}

// ---------------------------------------------------------------------------
// CEB

template <typename S>
struct CebOutputs {
    FeatureMapT<S> f28, f56, f112;
};

template <typename S>
TensorT<S> sub_encoder_forward(const TensorT<S>& x, const SubEncoderParams<S>& enc) {
    TensorT<S> t = x;
    for (const auto& st : enc.stages) {
        t = relu(conv2d(t, st.conv_a.weight, st.conv_a.bias, 1, 1));
        t = relu(conv2d(t, st.conv_b.weight, st.conv_b.bias, 2, 1));
    }
    return t;
}

template <typename S>
CebOutputs<S> ceb_forward(const TensorT<S>& image, const CebParams<S>& p, const CectConfig& cfg) {
    if (image.rank() != 4 || image.dim(2) != cfg.input_resolution ||
        image.dim(3) != cfg.input_resolution)
        throw DimensionError("ceb_forward: image " + shape_str(image.shape()) +
                             " does not match configured resolution " +
                             std::to_string(cfg.input_resolution));
    if (cfg.input_resolution % 8 != 0)
        throw ConfigError("ceb_forward: resolution must be divisible by 8");
    CebOutputs<S> out;
    out.f28 = {sub_encoder_forward(image, p.encoders[0]), ScaleTag::S28};
    out.f56 = {sub_encoder_forward(image, p.encoders[1]), ScaleTag::S56};
    out.f112 = {sub_encoder_forward(image, p.encoders[2]), ScaleTag::S112};
    out.f28.validate(cfg.input_resolution);
    out.f56.validate(cfg.input_resolution);
    out.f112.validate(cfg.input_resolution);
    return out;
}

// ---------------------------------------------------------------------------
// TDB

template <typename S>
TensorT<S> sd1_forward(const TensorT<S>& f28, const TdbParams<S>& p) {
    auto t = upsample_nearest(f28, 2);
    t = relu(t);
    t = transposed_conv2d(t, p.sd1_tconv1.weight, p.sd1_tconv1.bias, 2, 1);
    t = relu(t);
    return transposed_conv2d(t, p.sd1_tconv2.weight, p.sd1_tconv2.bias, 2, 1);
}

template <typename S>
TensorT<S> sd2_forward(const TensorT<S>& f56, const TdbParams<S>& p) {
    auto t = transposed_conv2d(f56, p.sd2_tconv1.weight, p.sd2_tconv1.bias, 2, 1);
    t = relu(t);
    return transposed_conv2d(t, p.sd2_tconv2.weight, p.sd2_tconv2.bias, 2, 1);
}

template <typename S>
TensorT<S> sd3_forward(const TensorT<S>& f112, const TdbParams<S>& p) {
    return transposed_conv2d(f112, p.sd3_tconv.weight, p.sd3_tconv.bias, 2, 1);
}

// Coefficient-weighted fusion of the decoder branches. Branches that are
// disabled or carry a zero coefficient are dropped entirely, so degenerate
// coefficient triples reproduce single-branch outputs bit-exactly.
template <typename S>
FeatureMapT<S> tdb_forward(const CebOutputs<S>& maps, const TdbParams<S>& p,
                           const EnsembleCoefficients& coeffs, const std::set<Branch>& branches,
                           const CectConfig& cfg) {
    coeffs.validate();
    const std::int64_t n28 = maps.f28.tensor.dim(0);
    if (maps.f56.tensor.dim(0) != n28 || maps.f112.tensor.dim(0) != n28)
        throw ValidationError("tdb_forward: feature maps carry mismatched batch sizes");
    maps.f28.validate(cfg.input_resolution);
    maps.f56.validate(cfg.input_resolution);
    maps.f112.validate(cfg.input_resolution);

    TensorT<S> fused;
    auto accumulate_branch = [&](Branch b, double coeff, TensorT<S> branch_out) {
        if (!branches.count(b) || coeff == 0.0) return;
        auto weighted = scale(branch_out, coeff);
        fused = fused.defined() ? add(fused, weighted) : weighted;
    };
    if (branches.count(Branch::SD1) && coeffs.alpha != 0.0)
        accumulate_branch(Branch::SD1, coeffs.alpha, sd1_forward(maps.f28.tensor, p));
    if (branches.count(Branch::SD2) && coeffs.beta != 0.0)
        accumulate_branch(Branch::SD2, coeffs.beta, sd2_forward(maps.f56.tensor, p));
    if (branches.count(Branch::SD3) && coeffs.gamma != 0.0)
        accumulate_branch(Branch::SD3, coeffs.gamma, sd3_forward(maps.f112.tensor, p));
    if (!fused.defined())
        throw ValidationError("tdb_forward: no active branch with a nonzero coefficient");
    FeatureMapT<S> out{fused, ScaleTag::S224};
    out.validate(cfg.input_resolution);
    return out;
}

// ---------------------------------------------------------------------------
// TCB

template <typename S>
struct TcbOutputs {
    TensorT<S> logits;      // [N, 2]
    TensorT<S> penultimate; // [N, stage_dims[3]]
};

// 2x2 neighbour concatenation + LN + linear reduction to double width.
template <typename S>
TensorT<S> patch_merge(const TensorT<S>& tokens, const PatchMergeParams<S>& p, double ln_eps) {
    const std::int64_t N = tokens.dim(0), H = tokens.dim(1), W = tokens.dim(2), C = tokens.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw DimensionError("patch_merge: odd token grid " + shape_str(tokens.shape()));
    auto t = reshape(tokens, {N, H / 2, 2, W / 2, 2, C});
    t = permute(t, {0, 1, 3, 2, 4, 5});
    t = reshape(t, {N, H / 2, W / 2, 4 * C});
    t = layer_norm(t, p.norm.gain, p.norm.bias, ln_eps);
    return linear(t, p.reduce);
}

template <typename S>
TcbOutputs<S> tcb_forward_full(const TensorT<S>& input, const TcbParams<S>& p, const CectConfig& cfg) {
    const std::int64_t N = input.dim(0);
    if (input.rank() != 4 || input.dim(2) != cfg.input_resolution ||
        input.dim(3) != cfg.input_resolution)
        throw DimensionError("tcb_forward: input " + shape_str(input.shape()) +
                             " does not match resolution " + std::to_string(cfg.input_resolution));
    const auto grids = cfg.token_grids();
    const auto wins = cfg.effective_windows();

    auto x = conv2d(input, p.patch_embed.weight, p.patch_embed.bias, cfg.tcb.patch_size, 0);
    x = permute(x, {0, 2, 3, 1}); // [N, g, g, D0]
    x = layer_norm(x, p.patch_norm.gain, p.patch_norm.bias, cfg.ln_eps);

    for (int i = 0; i < 4; ++i) {
        const int heads = cfg.tcb.heads[static_cast<std::size_t>(i)];
        const int win = wins[static_cast<std::size_t>(i)];
        const auto& blocks = p.stages[static_cast<std::size_t>(i)];
        for (std::size_t b = 0; b + 1 < blocks.size(); b += 2)
            x = cswt_block_pair(x, blocks[b], blocks[b + 1], heads, win, cfg.ln_eps);
        if (i < 3) x = patch_merge(x, p.merges[static_cast<std::size_t>(i)], cfg.ln_eps);
    }

    const std::int64_t g3 = grids[3];
    x = reshape(x, {N, g3 * g3, cfg.tcb.stage_dims[3]});
    x = layer_norm(x, p.final_norm.gain, p.final_norm.bias, cfg.ln_eps);
    TcbOutputs<S> out;
    out.penultimate = mean_axis1(x);
    out.logits = linear(out.penultimate, p.head.weight, p.head.bias);
    return out;
}

template <typename S>
TensorT<S> tcb_forward(const TensorT<S>& input, const TcbParams<S>& p, const CectConfig& cfg) {
    return tcb_forward_full(input, p, cfg).logits;
}

// ---------------------------------------------------------------------------
// full model

template <typename S>
TcbOutputs<S> cect_forward_full(const TensorT<S>& image, const CectParams<S>& p,
                                const CectConfig& cfg) {
    auto maps = ceb_forward(image, p.ceb, cfg);
    auto fused = tdb_forward(maps, p.tdb, cfg.effective_coefficients(), cfg.enabled_branches, cfg);
    return tcb_forward_full(fused.tensor, p.tcb, cfg);
}

template <typename S>
TensorT<S> cect_forward(const TensorT<S>& image, const CectParams<S>& p, const CectConfig& cfg) {
    return cect_forward_full(image, p, cfg).logits;
}

template <typename S>
TensorT<S> extract_penultimate(const TensorT<S>& image, const CectParams<S>& p,
                               const CectConfig& cfg) {
    return cect_forward_full(image, p, cfg).penultimate;
}

} // namespace cect
