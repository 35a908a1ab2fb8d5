#include "cect/experiments.hpp"

#include <filesystem>

namespace fs = std::filesystem;

namespace cect::eval {

SweepSpec SweepSpec::paper_default() {
    const double third = 1.0 / 3.0;
    SweepSpec spec;
    spec.groups = {
        {0.8, 0.1, 0.1},     {0.6, 0.2, 0.2},     {0.1, 0.8, 0.1},    {0.2, 0.6, 0.2},
        {0.1, 0.1, 0.8},     {0.2, 0.2, 0.6},     {third, third, third},
    };
    return spec;
}

void SweepSpec::validate() const {
    if (groups.empty()) throw ValidationError("sweep: no coefficient groups given");
    for (const auto& g : groups) g.validate();
}

std::vector<SweepRow> run_sweep(const CectConfig& model_cfg, const train::TrainConfig& tcfg,
                                const data::AugmentationConfig& aug, const ExperimentData& data,
                                const SweepSpec& spec, const std::string& out_dir) {
    spec.validate();
    tcfg.validate();
    std::vector<SweepRow> rows;
    for (std::size_t gi = 0; gi < spec.groups.size(); ++gi) {
        SweepRow row;
        row.coeffs = spec.groups[gi];
        try {
            CectConfig cfg = model_cfg;
            cfg.coefficients = row.coeffs;
            CectModel model(cfg, tcfg.seed);
            train::FitOptions opts;
            if (!out_dir.empty())
                opts.out_dir = (fs::path(out_dir) / ("group_" + std::to_string(gi))).string();
            row.run = train::fit(model, data.train, data.val, tcfg, aug, opts);
            row.run.kind = "sweep";
            auto test = train::evaluate_model(model, data.test, aug.normalization,
                                              tcfg.batch_size, tcfg.threads);
            row.metrics = test.metrics;
            row.cm = test.cm;
            row.run.test_metrics = test.metrics;
            row.run.test_confusion = test.cm;
            row.ok = true;
        } catch (const Error& e) {
            // keep earlier rows; report the failure in place
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<AblationRow> default_ablation_rows() {
    const double third = 1.0 / 3.0;
    std::vector<AblationRow> rows(7);
    rows[0] = {true, false, false, {true, false, false, false}, std::nullopt, "ceb_28"};
    rows[1] = {true, false, false, {false, true, false, false}, std::nullopt, "ceb_56"};
    rows[2] = {true, false, false, {false, false, true, false}, std::nullopt, "ceb_112"};
    rows[3] = {false, false, true, {false, false, false, true}, std::nullopt, "tcb_224"};
    rows[4] = {true, true, true, {false, false, true, true}, EnsembleCoefficients{0.0, 0.0, 1.0},
               "full_no28_no56"};
    rows[5] = {true, true, true, {false, true, true, true}, EnsembleCoefficients{0.0, 0.5, 0.5},
               "full_no28"};
    rows[6] = {true, true, true, {true, true, true, true},
               EnsembleCoefficients{third, third, third}, "full"};
    return rows;
}

void validate_ablation_row(const AblationRow& row) {
    if (row.tdb && !row.ceb)
        throw ValidationError("ablation row '" + row.label + "': TDB requires CEB");
    if (!row.ceb && !row.tcb)
        throw ValidationError("ablation row '" + row.label + "': no classifier block enabled");
    if (row.ceb && row.tcb && !row.tdb)
        throw ValidationError("ablation row '" + row.label +
                              "': CEB and TCB can only be combined through TDB");
    if (row.ceb && !row.tdb) {
        // sub-encoder variant with a pooled classification head
        if (row.tcb) throw ValidationError("ablation row '" + row.label + "': unexpected TCB");
        int local = 0;
        for (int i = 0; i < 3; ++i)
            if (row.scales[static_cast<std::size_t>(i)]) ++local;
        if (local != 1 || row.scales[3])
            throw ValidationError("ablation row '" + row.label +
                                  "': CEB-only rows use exactly one local scale");
        if (row.coeffs)
            throw ValidationError("ablation row '" + row.label +
                                  "': coefficients do not apply without TDB");
        return;
    }
    if (row.tcb && !row.ceb) {
        if (row.scales != std::array<bool, 4>{false, false, false, true})
            throw ValidationError("ablation row '" + row.label +
                                  "': TCB-only rows use the 224 scale only");
        if (row.coeffs)
            throw ValidationError("ablation row '" + row.label +
                                  "': coefficients do not apply without TDB");
        return;
    }
    // full pipeline: scales must mirror the nonzero coefficients, 224 always on
    if (!row.coeffs)
        throw ValidationError("ablation row '" + row.label + "': full rows need coefficients");
    row.coeffs->validate();
    const std::array<bool, 4> want{row.coeffs->alpha > 0.0, row.coeffs->beta > 0.0,
                                   row.coeffs->gamma > 0.0, true};
    if (row.scales != want)
        throw ValidationError("ablation row '" + row.label +
                              "': scale flags do not match the coefficients");
}

std::vector<AblationResult> run_ablation(const CectConfig& model_cfg,
                                         const train::TrainConfig& tcfg,
                                         const data::AugmentationConfig& aug,
                                         const ExperimentData& data,
                                         const std::vector<AblationRow>& rows,
                                         const std::string& out_dir) {
    tcfg.validate();
    std::vector<AblationResult> results;
    for (std::size_t ri = 0; ri < rows.size(); ++ri) {
        AblationResult res;
        res.row = rows[ri];
        try {
            validate_ablation_row(rows[ri]);
            const AblationRow& row = rows[ri];
            std::unique_ptr<TrainableModel> model;
            if (row.ceb && !row.tdb) {
                int idx = row.scales[0] ? 0 : row.scales[1] ? 1 : 2;
                model = std::make_unique<EncoderClassifier>(model_cfg, idx, tcfg.seed);
            } else if (row.tcb && !row.ceb) {
                model = std::make_unique<TcbClassifier>(model_cfg, tcfg.seed);
            } else {
                CectConfig cfg = model_cfg;
                cfg.coefficients = *row.coeffs;
                cfg.enabled_branches.clear();
                if (row.coeffs->alpha > 0.0) cfg.enabled_branches.insert(Branch::SD1);
                if (row.coeffs->beta > 0.0) cfg.enabled_branches.insert(Branch::SD2);
                if (row.coeffs->gamma > 0.0) cfg.enabled_branches.insert(Branch::SD3);
                model = std::make_unique<CectModel>(cfg, tcfg.seed);
            }
            train::FitOptions opts;
            if (!out_dir.empty())
                opts.out_dir = (fs::path(out_dir) / ("row_" + std::to_string(ri))).string();
            res.run = train::fit(*model, data.train, data.val, tcfg, aug, opts);
            res.run.kind = "ablation";
            auto test = train::evaluate_model(*model, data.test, aug.normalization,
                                              tcfg.batch_size, tcfg.threads);
            res.acc = test.metrics.acc;
            res.run.test_metrics = test.metrics;
            res.run.test_confusion = test.cm;
            res.ok = true;
        } catch (const Error& e) {
            res.ok = false;
            res.error = e.what();
        }
        results.push_back(std::move(res));
    }
    return results;
}

} // namespace cect::eval
