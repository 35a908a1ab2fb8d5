#pragma once

// Dataset ingestion and preparation: NetPBM (P2/P3/P5/P6) and a small raw
// container for images, directory/CSV manifests, deterministic stratified
// splitting, bilinear resize + centre crop preprocessing, RandomResizedCrop /
// horizontal-flip augmentation, and a synthetic two-class generator whose
// classes differ only in a global low-frequency cue.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cect/errors.hpp"
#include "cect/rng.hpp"
#include "cect/tensor.hpp"

namespace cect::data {

// Decoded image, planar channel-major layout, values in [0, 1].
struct RawImage {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> pixels; // channels * height * width

    float at(int c, int y, int x) const {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    float& at(int c, int y, int x) {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
};

// -- image IO ---------------------------------------------------------------

RawImage decode_image(const std::string& path);
RawImage decode_image_bytes(const std::vector<unsigned char>& bytes, const std::string& origin);

// P5 (single channel) / P6 (three channels), maxval 255.
void write_netpbm(const RawImage& img, const std::string& path);

// Raw container: "CRAW" magic, u8 version, u8 channels, u16 reserved,
// u32 LE height, u32 LE width, then channel-major 8-bit samples.
void write_raw(const RawImage& img, const std::string& path);

// -- geometry ---------------------------------------------------------------

RawImage resize_bilinear(const RawImage& img, int out_h, int out_w);
RawImage center_crop(const RawImage& img, int size);
RawImage crop(const RawImage& img, int y, int x, int h, int w);
RawImage hflip(const RawImage& img);
RawImage to_three_channels(const RawImage& img);

// -- manifests ---------------------------------------------------------------

struct ManifestEntry {
    std::string path;
    int label = 0; // negative = 0, positive = 1
};

struct Manifest {
    std::vector<ManifestEntry> entries;

    std::size_t size() const { return entries.size(); }
    std::int64_t count(int label) const;
};

// Directory layout <root>/positive/*, <root>/negative/* or a CSV index with
// header "path,label". A path argument naming a file is treated as CSV.
Manifest load_manifest(const std::string& root_or_csv);
Manifest load_manifest_dir(const std::string& root);
Manifest load_manifest_csv(const std::string& csv_path);
void save_manifest_csv(const Manifest& m, const std::string& path);

// -- splitting ----------------------------------------------------------------

enum class SplitMode { ThreeWay, TwoWayWithExternalTest };

struct SplitSpec {
    std::array<double, 3> ratios{0.8, 0.1, 0.1}; // train, val, test
    std::uint64_t seed = 0;
    SplitMode mode = SplitMode::ThreeWay;

    void validate() const;
};

struct SplitResult {
    Manifest train, val, test;
};

// Per-class stratified partition. Non-train part sizes are rounded to the
// nearest integer and the remainder goes to train, which reproduces the
// 8:1:1 counts (2892/362/362 for 3616, 8154/1019/1019 for 10192) exactly.
// Two-way mode splits into train/val only and takes `external_test` as the
// test manifest.
SplitResult split(const Manifest& m, const SplitSpec& spec,
                  const Manifest* external_test = nullptr);

// -- preprocessing -------------------------------------------------------------

struct NormalizationConfig {
    std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
    std::array<float, 3> stddev{0.5f, 0.5f, 0.5f};
};

struct AugmentationConfig {
    double crop_scale_min = 0.6;
    double crop_scale_max = 1.0;
    double crop_ratio_min = 3.0 / 4.0;
    double crop_ratio_max = 4.0 / 3.0;
    double flip_prob = 0.5;
    NormalizationConfig normalization;

    void validate() const;
};

// Shorter side to R (bilinear), centre crop R x R, grayscale replicated to
// three channels, then per-channel normalization.
Tensor preprocess(const RawImage& img, int resolution, const NormalizationConfig& norm);

// RandomResizedCrop + horizontal flip; output stays in [0, 1] (three
// channels, un-normalized). Deterministic for a given rng state.
RawImage augment(const RawImage& img, int resolution, const AugmentationConfig& cfg, Rng& rng);

Tensor normalize_to_tensor(const RawImage& img, const NormalizationConfig& norm);

// -- in-memory dataset ----------------------------------------------------------

struct LoadedSample {
    RawImage image;
    int label = 0;
    std::string source_id;
};

struct LoadedDataset {
    std::vector<LoadedSample> samples;
    std::size_t size() const { return samples.size(); }
};

LoadedDataset load_dataset(const Manifest& m);

// -- synthetic data ---------------------------------------------------------------

// Writes 2 * n_per_class grayscale NetPBM images plus manifest.csv under
// out_dir. Class 0 is a high-frequency checker texture with noise; class 1
// adds a global low-frequency gradient on top of the same texture.
Manifest synth_generate(int n_per_class, int resolution, std::uint64_t seed,
                        const std::string& out_dir);

} // namespace cect::data
