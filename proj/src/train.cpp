#include "cect/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;

namespace cect::train {

namespace {

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : pool) t.join();
}

void copy_into_batch(Tensor& batch, std::size_t row, const Tensor& sample) {
    const std::int64_t n = sample.size();
    std::copy(sample.data(), sample.data() + n, batch.data() + static_cast<std::int64_t>(row) * n);
}

} // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("train: epochs must be >= 1");
    if (!(initial_lr > 0.0)) throw ValidationError("train: learning rate must be positive");
    if (batch_size < 1) throw ValidationError("train: batch size must be >= 1");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
        throw ValidationError("train: plateau factor must lie in (0, 1)");
    if (plateau_patience < 0) throw ValidationError("train: plateau patience must be >= 0");
    if (max_steps < 0) throw ValidationError("train: max_steps must be >= 0");
    if (threads < 1) throw ValidationError("train: threads must be >= 1");
}

AdamOptimizer::AdamOptimizer(NamedParams<float> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& [name, p] : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0f);
        v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0f);
    }
}

void AdamOptimizer::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

void AdamOptimizer::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k].second;
        if (!p.has_grad()) continue;
        const auto& g = p.grad();
        if (g.size() != static_cast<std::size_t>(p.size()))
            throw ContractError("adam: gradient shape mismatch for " + params_[k].first);
        auto& m = m_[k];
        auto& v = v_[k];
        float* pd = p.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
            const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            pd[i] = static_cast<float>(pd[i] - lr * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

NamedFloatParams AdamOptimizer::state_tensors() {
    NamedFloatParams out;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto& shape = params_[k].second.shape();
        Tensor m(shape);
        Tensor v(shape);
        std::copy(m_[k].begin(), m_[k].end(), m.data());
        std::copy(v_[k].begin(), v_[k].end(), v.data());
        out.emplace_back("adam.m." + params_[k].first, m);
        out.emplace_back("adam.v." + params_[k].first, v);
    }
    return out;
}

void AdamOptimizer::restore_state(const NamedFloatParams& tensors) {
    if (tensors.size() != 2 * params_.size())
        throw ContractError("adam: restore expects " + std::to_string(2 * params_.size()) +
                            " state tensors, got " + std::to_string(tensors.size()));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        const auto& mt = tensors[2 * k];
        const auto& vt = tensors[2 * k + 1];
        if (mt.first != "adam.m." + params_[k].first || vt.first != "adam.v." + params_[k].first)
            throw ContractError("adam: state tensor names do not match parameter order");
        std::copy(mt.second.data(), mt.second.data() + mt.second.size(), m_[k].begin());
        std::copy(vt.second.data(), vt.second.data() + vt.second.size(), v_[k].begin());
    }
}

PlateauScheduler::PlateauScheduler(double initial_lr, double factor, int patience)
    : lr_(initial_lr), factor_(factor), best_(std::numeric_limits<double>::infinity()),
      patience_(patience) {}

double PlateauScheduler::step(double monitored) {
    if (!std::isfinite(monitored))
        throw NumericError("scheduler: monitored value is not finite");
    if (monitored < best_) {
        best_ = monitored;
        bad_ = 0;
    } else {
        ++bad_;
        if (bad_ > patience_) {
            lr_ *= factor_;
            bad_ = 0;
        }
    }
    return lr_;
}

void PlateauScheduler::restore(double current_lr, double best, int bad_epochs) {
    lr_ = current_lr;
    best_ = best;
    bad_ = bad_epochs;
}

Tensor eval_batch(const data::LoadedDataset& ds, const std::vector<std::size_t>& indices,
                  std::size_t begin, std::size_t end, int resolution,
                  const data::NormalizationConfig& norm) {
    const std::size_t b = end - begin;
    Tensor batch({static_cast<std::int64_t>(b), 3, resolution, resolution});
    for (std::size_t i = 0; i < b; ++i) {
        const auto& s = ds.samples[indices[begin + i]];
        copy_into_batch(batch, i, data::preprocess(s.image, resolution, norm));
    }
    return batch;
}

EvalResult evaluate_model(TrainableModel& model, const data::LoadedDataset& ds,
                          const data::NormalizationConfig& norm, int batch_size, int threads) {
    if (ds.size() == 0) throw ContractError("evaluate_model: empty dataset");
    const int R = model.resolution();
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t n_batches = (ds.size() + batch_size - 1) / static_cast<std::size_t>(batch_size);

    struct BatchOut {
        double loss_sum = 0;
        std::vector<int> preds;
    };
    std::vector<BatchOut> results(n_batches);
    parallel_for(n_batches, threads, [&](std::size_t bi) {
        autograd::NoGradGuard ng;
        const std::size_t begin = bi * static_cast<std::size_t>(batch_size);
        const std::size_t end = std::min(ds.size(), begin + static_cast<std::size_t>(batch_size));
        Tensor batch = eval_batch(ds, order, begin, end, R, norm);
        std::vector<int> labels;
        for (std::size_t i = begin; i < end; ++i) labels.push_back(ds.samples[i].label);
        auto logits = model.forward(batch);
        auto loss = cross_entropy(logits, labels);
        results[bi].loss_sum = static_cast<double>(loss.item()) * static_cast<double>(end - begin);
        for (std::size_t i = 0; i < end - begin; ++i)
            results[bi].preds.push_back(eval::predict_label(
                logits.at({static_cast<std::int64_t>(i), 0}), logits.at({static_cast<std::int64_t>(i), 1})));
    });

    EvalResult out;
    double loss_sum = 0;
    for (const auto& r : results) {
        loss_sum += r.loss_sum;
        out.predictions.insert(out.predictions.end(), r.preds.begin(), r.preds.end());
    }
    out.loss = loss_sum / static_cast<double>(ds.size());
    std::vector<int> labels;
    for (const auto& s : ds.samples) labels.push_back(s.label);
    out.cm = eval::confusion(out.predictions, labels);
    out.metrics = eval::metrics(out.cm);
    return out;
}

namespace {

struct TrainState {
    int epoch_next = 0;
    std::int64_t global_step = 0;
    double lr = 0;
    double best_val = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;
    std::int64_t adam_steps = 0;
};

void save_state(const std::string& dir, const TrainState& st) {
    nlohmann::ordered_json j;
    j["epoch_next"] = st.epoch_next;
    j["global_step"] = st.global_step;
    j["lr"] = st.lr;
    j["best_val"] = std::isfinite(st.best_val) ? st.best_val : 1e308;
    j["bad_epochs"] = st.bad_epochs;
    j["adam_steps"] = st.adam_steps;
    std::ofstream out(fs::path(dir) / "train_state.json", std::ios::binary);
    if (!out) throw IoError("cannot write train state under " + dir);
    out << j.dump(2) << "\n";
}

TrainState load_state(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "train_state.json");
    if (!in) throw IoError("cannot open train state under " + dir);
    nlohmann::json j = nlohmann::json::parse(in);
    TrainState st;
    st.epoch_next = j.at("epoch_next").get<int>();
    st.global_step = j.at("global_step").get<std::int64_t>();
    st.lr = j.at("lr").get<double>();
    st.best_val = j.at("best_val").get<double>();
    st.bad_epochs = j.at("bad_epochs").get<int>();
    st.adam_steps = j.at("adam_steps").get<std::int64_t>();
    return st;
}

} // namespace

RunReport fit(TrainableModel& model, const data::LoadedDataset& train_ds,
              const data::LoadedDataset& val_ds, const TrainConfig& cfg,
              const data::AugmentationConfig& aug, const FitOptions& opts) {
    cfg.validate();
    aug.validate();
    if (train_ds.size() == 0 || val_ds.size() == 0)
        throw ValidationError("fit: train and validation splits must be non-empty");
    const int R = model.resolution();
    const auto& norm = aug.normalization;

    AdamOptimizer opt(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    PlateauScheduler sched(cfg.initial_lr, cfg.plateau_factor, cfg.plateau_patience);
    TrainState st;
    st.lr = cfg.initial_lr;

    const bool has_dir = !opts.out_dir.empty();
    if (has_dir) fs::create_directories(opts.out_dir);
    if (opts.resume) {
        if (!has_dir) throw ContractError("fit: resume requires an output directory");
        st = load_state(opts.out_dir);
        model.load((fs::path(opts.out_dir) / "checkpoint_last.ckpt").string());
        auto moments = opt.state_tensors();
        load_checkpoint((fs::path(opts.out_dir) / "adam_state.ckpt").string(), model.digest(),
                        moments);
        opt.restore_state(moments);
        opt.set_step_count(st.adam_steps);
        sched.restore(st.lr, st.best_val, st.bad_epochs);
    }

    RunReport report;
    report.seed = cfg.seed;
    Rng root(cfg.seed);

    bool stop = false;
    for (int epoch = st.epoch_next; epoch < cfg.epochs && !stop; ++epoch) {
        std::vector<std::size_t> order(train_ds.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng = root.split("shuffle", static_cast<std::uint64_t>(epoch));
        shuffle_rng.shuffle(order);

        double epoch_loss_sum = 0;
        std::int64_t epoch_steps = 0;
        const double lr_in_effect = sched.lr();
        for (std::size_t begin = 0; begin < order.size() && !stop;
             begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
            Tensor batch({static_cast<std::int64_t>(end - begin), 3, R, R});
            std::vector<int> labels;
            for (std::size_t i = begin; i < end; ++i) {
                const auto& s = train_ds.samples[order[i]];
                if (cfg.augment) {
                    Rng arng = root.split(s.source_id, static_cast<std::uint64_t>(epoch));
                    auto img = data::augment(s.image, R, aug, arng);
                    copy_into_batch(batch, i - begin, data::normalize_to_tensor(img, norm));
                } else {
                    copy_into_batch(batch, i - begin, data::preprocess(s.image, R, norm));
                }
                labels.push_back(s.label);
            }
            try {
                auto logits = model.forward(batch);
                auto loss = cross_entropy(logits, labels);
                report.step_losses.push_back(static_cast<double>(loss.item()));
                epoch_loss_sum += static_cast<double>(loss.item());
                ++epoch_steps;
                opt.zero_grad();
                backward(loss);
                opt.step(sched.lr());
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(st.global_step) + ": " + e.what());
            }
            ++st.global_step;
            if (cfg.max_steps > 0 && st.global_step >= cfg.max_steps) stop = true;
        }

        auto val = evaluate_model(model, val_ds, norm, cfg.batch_size, cfg.threads);
        EpochStats es;
        es.epoch = epoch;
        es.train_loss = epoch_steps > 0 ? epoch_loss_sum / static_cast<double>(epoch_steps) : 0.0;
        es.val_loss = val.loss;
        es.lr = lr_in_effect;
        es.val_metrics = val.metrics;
        es.val_confusion = val.cm;
        report.epochs.push_back(es);

        const bool improved = val.loss < st.best_val;
        sched.step(val.loss);
        st.lr = sched.lr();
        st.best_val = sched.best();
        st.bad_epochs = sched.bad_epochs();
        st.epoch_next = epoch + 1;
        st.adam_steps = opt.step_count();

        if (has_dir) {
            model.save((fs::path(opts.out_dir) / "checkpoint_last.ckpt").string());
            if (improved)
                model.save((fs::path(opts.out_dir) / "checkpoint_best.ckpt").string());
            auto moments = opt.state_tensors();
            save_checkpoint((fs::path(opts.out_dir) / "adam_state.ckpt").string(), model.digest(),
                            moments);
            save_state(opts.out_dir, st);
        }
    }
    return report;
}

} // namespace cect::train
