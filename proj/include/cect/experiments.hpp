#pragma once

// Experiment protocols: the seven-group ensemble-coefficient sweep and the
// seven-row block/scale ablation. Every row trains its own model from the
// same seed, so repeated runs replay identically and the full-configuration
// ablation row coincides with a plain training run.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "cect/config.hpp"
#include "cect/data.hpp"
#include "cect/metrics.hpp"
#include "cect/train.hpp"

namespace cect::eval {

struct SweepSpec {
    std::vector<EnsembleCoefficients> groups;

    // The seven published coefficient groups: components drawn from
    // {0.1, 0.2, 1/3, 0.6, 0.8} with at least two equal.
    static SweepSpec paper_default();
    void validate() const;
};

struct SweepRow {
    EnsembleCoefficients coeffs;
    bool ok = false;
    std::string error;
    MetricsReport metrics;
    ConfusionMatrix cm;
    train::RunReport run;
};

struct ExperimentData {
    data::LoadedDataset train, val, test;
};

std::vector<SweepRow> run_sweep(const CectConfig& model_cfg, const train::TrainConfig& tcfg,
                                const data::AugmentationConfig& aug, const ExperimentData& data,
                                const SweepSpec& spec, const std::string& out_dir = "");

// One ablation configuration: which blocks exist, which feature scales are
// active (28/56/112/224 order), and the coefficient override for full rows.
struct AblationRow {
    bool ceb = false, tdb = false, tcb = false;
    std::array<bool, 4> scales{false, false, false, false};
    std::optional<EnsembleCoefficients> coeffs;
    std::string label;
};

// The seven published configurations.
std::vector<AblationRow> default_ablation_rows();

void validate_ablation_row(const AblationRow& row);

struct AblationResult {
    AblationRow row;
    bool ok = false;
    std::string error;
    std::optional<double> acc;
    train::RunReport run;
};

std::vector<AblationResult> run_ablation(const CectConfig& model_cfg,
                                         const train::TrainConfig& tcfg,
                                         const data::AugmentationConfig& aug,
                                         const ExperimentData& data,
                                         const std::vector<AblationRow>& rows,
                                         const std::string& out_dir = "");

} // namespace cect::eval
