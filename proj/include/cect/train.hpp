#pragma once

// Cross-entropy training with Adam and validation-loss plateau scheduling.
// A single seed drives initialization, shuffling and augmentation through
// derived streams, so runs replay bit-for-bit and checkpoint resume
// continues the uninterrupted trajectory exactly.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cect/data.hpp"
#include "cect/metrics.hpp"
#include "cect/models.hpp"

namespace cect::train {

struct TrainConfig {
    int epochs = 20;
    double initial_lr = 0.003;
    int batch_size = 64;
    double plateau_factor = 0.5;
    int plateau_patience = 5;
    std::uint64_t seed = 0;
    int max_steps = 0; // 0 = no cap
    bool augment = true;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int threads = 1;

    void validate() const;
};

class AdamOptimizer {
public:
    AdamOptimizer(NamedParams<float> params, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);

    void zero_grad();
    // Standard Adam with bias correction; parameters without a gradient are
    // left untouched.
    void step(double lr);

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    // First/second moments copied into named tensors ("adam.m.*", "adam.v.*").
    NamedFloatParams state_tensors();
    // Inverse of state_tensors(): copy moment values back in.
    void restore_state(const NamedFloatParams& tensors);

private:
    NamedParams<float> params_;
    std::vector<std::vector<float>> m_, v_;
    std::int64_t t_ = 0;
    double beta1_, beta2_, eps_;
};

class PlateauScheduler {
public:
    PlateauScheduler(double initial_lr, double factor, int patience);

    // Feed the monitored value once per epoch; returns the lr for the next
    // epoch. Any strict improvement resets the counter; once the counter
    // exceeds the patience the lr is multiplied by the factor.
    double step(double monitored);

    double lr() const { return lr_; }
    double best() const { return best_; }
    int bad_epochs() const { return bad_; }
    void restore(double current_lr, double best, int bad_epochs);

private:
    double lr_, factor_, best_;
    int patience_, bad_ = 0;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double lr = 0; // in effect during the epoch
    eval::MetricsReport val_metrics;
    eval::ConfusionMatrix val_confusion;
};

struct RunReport {
    std::string kind = "train";
    std::uint64_t seed = 0;
    std::map<std::string, std::string> config;
    std::vector<double> step_losses;
    std::vector<EpochStats> epochs;
    std::optional<eval::MetricsReport> test_metrics;
    std::optional<eval::ConfusionMatrix> test_confusion;
};

struct EvalResult {
    double loss = 0;
    eval::ConfusionMatrix cm;
    eval::MetricsReport metrics;
    std::vector<int> predictions;
};

// No-grad evaluation; batches may fan out across threads, results reduce in
// index order so the outcome is independent of the thread count.
EvalResult evaluate_model(TrainableModel& model, const data::LoadedDataset& ds,
                          const data::NormalizationConfig& norm, int batch_size, int threads = 1);

struct FitOptions {
    std::string out_dir; // empty = keep everything in memory
    bool resume = false; // continue from out_dir's last checkpoint
};

RunReport fit(TrainableModel& model, const data::LoadedDataset& train_ds,
              const data::LoadedDataset& val_ds, const TrainConfig& cfg,
              const data::AugmentationConfig& aug, const FitOptions& opts = {});

// Assemble a normalized [B,3,R,R] batch from dataset rows (evaluation path).
Tensor eval_batch(const data::LoadedDataset& ds, const std::vector<std::size_t>& indices,
                  std::size_t begin, std::size_t end, int resolution,
                  const data::NormalizationConfig& norm);

} // namespace cect::train
