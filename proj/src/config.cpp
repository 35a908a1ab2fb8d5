#include "cect/config.hpp"

#include <cmath>
#include <sstream>

#include "cect/rng.hpp"

namespace cect {

void EnsembleCoefficients::validate() const {
    const double vals[3] = {alpha, beta, gamma};
    const char* names[3] = {"alpha", "beta", "gamma"};
    for (int i = 0; i < 3; ++i) {
        if (!(vals[i] >= 0.0 && vals[i] <= 1.0)) {
            std::ostringstream os;
            os << "ensemble coefficient " << names[i] << " = " << vals[i] << " outside [0,1]";
            throw ValidationError(os.str());
        }
    }
    const double sum = alpha + beta + gamma;
    if (std::abs(sum - 1.0) > 1e-9) {
        std::ostringstream os;
        os << "ensemble coefficients must sum to 1, got " << sum;
        throw ValidationError(os.str());
    }
}

std::string scale_name(ScaleTag t) {
    switch (t) {
        case ScaleTag::S28: return "S28";
        case ScaleTag::S56: return "S56";
        case ScaleTag::S112: return "S112";
        default: return "S224";
    }
}

std::array<int, 4> CectConfig::token_grids() const {
    std::array<int, 4> grids{};
    int g = input_resolution / tcb.patch_size;
    for (int i = 0; i < 4; ++i) {
        grids[static_cast<std::size_t>(i)] = g;
        g /= 2;
    }
    return grids;
}

std::array<int, 4> CectConfig::effective_windows() const {
    const auto grids = token_grids();
    std::array<int, 4> wins{};
    for (int i = 0; i < 4; ++i)
        wins[static_cast<std::size_t>(i)] = std::min(tcb.window_size, grids[static_cast<std::size_t>(i)]);
    return wins;
}

EnsembleCoefficients CectConfig::effective_coefficients() const {
    double vals[3] = {coefficients.alpha, coefficients.beta, coefficients.gamma};
    for (int i = 0; i < 3; ++i)
        if (!enabled_branches.count(static_cast<Branch>(i))) vals[i] = 0.0;
    const double sum = vals[0] + vals[1] + vals[2];
    if (sum <= 0.0)
        throw ConfigError("all decoder branches disabled (or weighted zero); nothing to fuse");
    EnsembleCoefficients eff{vals[0] / sum, vals[1] / sum, vals[2] / sum};
    eff.validate();
    return eff;
}

void CectConfig::validate() const {
    if (input_resolution < 32 || input_resolution % 32 != 0)
        throw ConfigError("input_resolution " + std::to_string(input_resolution) +
                          " must be a positive multiple of 32");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    for (int c : encoder_channels)
        if (c < 1) throw ConfigError("encoder channel widths must be >= 1");
    if (decoder_channels < 1 || decoder_hidden < 1)
        throw ConfigError("decoder widths must be >= 1");
    if (tcb.patch_size < 1 || input_resolution % tcb.patch_size != 0)
        throw ConfigError("patch_size " + std::to_string(tcb.patch_size) + " must divide resolution " +
                          std::to_string(input_resolution));
    const int g0 = input_resolution / tcb.patch_size;
    if (g0 % 8 != 0)
        throw ConfigError("token grid " + std::to_string(g0) +
                          " after patch embedding must be divisible by 8 (three patch merges)");
    if (tcb.window_size < 1) throw ConfigError("window_size must be >= 1");
    for (int i = 0; i < 4; ++i) {
        if (tcb.stage_depths[static_cast<std::size_t>(i)] < 1)
            throw ConfigError("stage " + std::to_string(i + 1) + " depth must be >= 1");
        const int dim = tcb.stage_dims[static_cast<std::size_t>(i)];
        const int h = tcb.heads[static_cast<std::size_t>(i)];
        if (dim < 1 || h < 1 || dim % h != 0)
            throw ConfigError("stage " + std::to_string(i + 1) + ": heads " + std::to_string(h) +
                              " must divide dim " + std::to_string(dim));
        if (i > 0 && dim != 2 * tcb.stage_dims[static_cast<std::size_t>(i - 1)])
            throw ConfigError("stage " + std::to_string(i + 1) + " dim " + std::to_string(dim) +
                              " must double the previous stage's " +
                              std::to_string(tcb.stage_dims[static_cast<std::size_t>(i - 1)]));
    }
    const auto grids = token_grids();
    const auto wins = effective_windows();
    for (int i = 0; i < 4; ++i) {
        if (grids[static_cast<std::size_t>(i)] % wins[static_cast<std::size_t>(i)] != 0)
            throw ConfigError("stage " + std::to_string(i + 1) + ": token grid " +
                              std::to_string(grids[static_cast<std::size_t>(i)]) +
                              " not divisible by window " +
                              std::to_string(wins[static_cast<std::size_t>(i)]));
    }
    if (tcb.mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
    if (enabled_branches.empty()) throw ConfigError("at least one decoder branch must be enabled");
    coefficients.validate();
    effective_coefficients();
}

std::string CectConfig::canonical_string() const {
    std::ostringstream os;
    os << "resolution=" << input_resolution << ";channels=" << input_channels << ";enc="
       << encoder_channels[0] << ',' << encoder_channels[1] << ',' << encoder_channels[2]
       << ";dec=" << decoder_channels << ',' << decoder_hidden << ";patch=" << tcb.patch_size
       << ";window=" << tcb.window_size << ";depths=" << tcb.stage_depths[0] << ','
       << tcb.stage_depths[1] << ',' << tcb.stage_depths[2] << ',' << tcb.stage_depths[3]
       << ";dims=" << tcb.stage_dims[0] << ',' << tcb.stage_dims[1] << ',' << tcb.stage_dims[2]
       << ',' << tcb.stage_dims[3] << ";heads=" << tcb.heads[0] << ',' << tcb.heads[1] << ','
       << tcb.heads[2] << ',' << tcb.heads[3] << ";mlp=" << tcb.mlp_ratio;
    return os.str();
}

std::uint64_t CectConfig::digest() const { return Rng::fnv1a64(canonical_string()); }

CectConfig CectConfig::tiny() {
    CectConfig cfg;
    cfg.input_resolution = 64;
    cfg.encoder_channels = {16, 12, 8};
    cfg.decoder_channels = 3;
    cfg.decoder_hidden = 8;
    cfg.tcb.patch_size = 4;
    cfg.tcb.window_size = 4;
    cfg.tcb.stage_depths = {1, 1, 1, 1};
    cfg.tcb.stage_dims = {4, 8, 16, 32};
    cfg.tcb.heads = {1, 2, 4, 8};
    cfg.tcb.mlp_ratio = 2.0;
    return cfg;
}

CectConfig CectConfig::base() { return CectConfig{}; }

} // namespace cect
