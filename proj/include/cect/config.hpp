#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>

#include "cect/errors.hpp"

namespace cect {

// Convex weights of the decoder fusion. Components live in [0,1] and sum
// to 1 (within 1e-9).
struct EnsembleCoefficients {
    double alpha = 1.0 / 3.0;
    double beta = 1.0 / 3.0;
    double gamma = 1.0 / 3.0;

    void validate() const;
    double operator[](int i) const { return i == 0 ? alpha : i == 1 ? beta : gamma; }
};

enum class Branch { SD1 = 0, SD2 = 1, SD3 = 2 };

enum class ScaleTag { S28, S56, S112, S224 };

// Spatial divisor of a scale tag relative to the input resolution.
inline int scale_divisor(ScaleTag t) {
    switch (t) {
        case ScaleTag::S28: return 8;
        case ScaleTag::S56: return 4;
        case ScaleTag::S112: return 2;
        default: return 1;
    }
}

std::string scale_name(ScaleTag t);

struct TcbConfig {
    int patch_size = 4;
    int window_size = 7;
    std::array<int, 4> stage_depths{2, 2, 2, 2}; // block *pairs* per stage
    std::array<int, 4> stage_dims{48, 96, 192, 384};
    std::array<int, 4> heads{2, 4, 8, 16};
    double mlp_ratio = 4.0;
};

struct CectConfig {
    int input_resolution = 224; // must be divisible by 32
    int input_channels = 3;
    std::array<int, 3> encoder_channels{64, 48, 32}; // SE1, SE2, SE3 widths
    int decoder_channels = 3;                        // fused map channels
    int decoder_hidden = 16;                         // intermediate decoder width
    TcbConfig tcb;
    EnsembleCoefficients coefficients;
    std::set<Branch> enabled_branches{Branch::SD1, Branch::SD2, Branch::SD3};
    double ln_eps = 1e-5;

    void validate() const; // throws ConfigError / ValidationError

    // Token grid side per transformer stage.
    std::array<int, 4> token_grids() const;
    // Window size actually used per stage: min(window_size, grid). A window
    // spanning the whole grid disables shifting at that stage.
    std::array<int, 4> effective_windows() const;

    // Coefficients after zeroing disabled branches and renormalizing the
    // remainder.
    EnsembleCoefficients effective_coefficients() const;

    std::string canonical_string() const;
    std::uint64_t digest() const;

    static CectConfig tiny(); // desk-scale preset (resolution 64)
    static CectConfig base(); // reference-resolution preset (224)
};

} // namespace cect
