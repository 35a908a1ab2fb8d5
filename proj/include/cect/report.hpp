#pragma once

// Post-hoc analysis artifacts: exact O(n^2) t-SNE of penultimate features,
// confusion-matrix rendering as SVG, and JSON/CSV emission of run reports
// with stable field ordering.

#include <cstdint>
#include <string>
#include <vector>

#include "cect/experiments.hpp"
#include "cect/metrics.hpp"
#include "cect/train.hpp"

namespace cect::report {

// -- t-SNE -----------------------------------------------------------------

struct TsneConfig {
    double perplexity = 30.0; // clamped to < n/3 at run time
    int iterations = 1000;
    double learning_rate = 200.0;
    double early_exaggeration = 12.0;
    int exaggeration_iters = 250;
    int momentum_switch_iter = 250;
    double initial_momentum = 0.5;
    double final_momentum = 0.8;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TsneResult {
    std::vector<double> points;   // n x 2, row-major
    std::vector<double> kl_trace; // KL vs the un-exaggerated P, one entry per iteration
    double effective_perplexity = 0.0;
};

struct TsneAffinities {
    std::vector<double> P;              // n x n, symmetric, sums to 1
    std::vector<double> row_perplexity; // achieved conditional perplexity per point
};

// Gaussian conditional affinities with per-point bandwidths found by binary
// search to the target perplexity, then symmetrized and normalized.
TsneAffinities tsne_affinities(const std::vector<double>& X, std::size_t n, std::size_t d,
                               double perplexity);

TsneResult tsne(const std::vector<double>& X, std::size_t n, std::size_t d,
                const TsneConfig& cfg);

// -- embeddings --------------------------------------------------------------

struct EmbeddingSet {
    std::vector<double> features; // n x d
    std::vector<int> labels;      // n
    std::vector<std::string> subsets; // n, e.g. "validation"/"test"
    std::size_t n = 0, d = 0;
};

// Penultimate features of every sample in the dataset, batched, no-grad.
EmbeddingSet extract_embeddings(CectModel& model, const data::LoadedDataset& ds,
                                const data::NormalizationConfig& norm, int batch_size,
                                const std::string& subset_tag);

void append_embeddings(EmbeddingSet& dst, const EmbeddingSet& src);

// -- rendering ----------------------------------------------------------------

// 2x2 confusion grid; columns are true labels, rows are predictions.
std::string render_confusion_svg(const eval::ConfusionMatrix& cm,
                                 const std::string& positive_name = "positive",
                                 const std::string& negative_name = "negative");

std::string render_scatter_svg(const TsneResult& tsne, const std::vector<int>& labels);

// -- emission -----------------------------------------------------------------

std::string run_report_json(const train::RunReport& report);
std::string sweep_json(const std::vector<eval::SweepRow>& rows);
std::string ablation_json(const std::vector<eval::AblationResult>& rows);

// Fixed columns: alpha,beta,gamma,acc,npv,ppv,sen,spe,fos,status
std::string sweep_csv(const std::vector<eval::SweepRow>& rows);
// Fixed columns: ceb,tdb,tcb,scale28,scale56,scale112,scale224,alpha,beta,gamma,acc,status
std::string ablation_csv(const std::vector<eval::AblationResult>& rows);
// n rows, d+1 comma-separated columns, label last, no header.
std::string embeddings_csv(const EmbeddingSet& set);
// Header x,y,label,subset.
std::string tsne_csv(const TsneResult& tsne, const EmbeddingSet& set);

void write_text_file(const std::string& path, const std::string& content);

} // namespace cect::report
