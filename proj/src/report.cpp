#include "cect/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace cect::report {

using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// t-SNE

void TsneConfig::validate() const {
    if (perplexity < 2.0) throw ValidationError("tsne: perplexity must be >= 2");
    if (iterations < 1) throw ValidationError("tsne: iterations must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("tsne: learning rate must be positive");
    if (early_exaggeration < 1.0) throw ValidationError("tsne: exaggeration must be >= 1");
}

namespace {

std::vector<double> squared_distances(const std::vector<double>& X, std::size_t n, std::size_t d) {
    std::vector<double> d2(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = X[i * d + k] - X[j * d + k];
                s += diff * diff;
            }
            s = std::max(s, 1e-12); // duplicate points: epsilon distance floor
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    return d2;
}

// Shannon entropy (nats) and conditional row for a given precision beta.
// Rows whose exponentials underflow entirely (indistinguishable neighbours
// at extreme beta) fall back to the uniform limit.
double row_entropy(const std::vector<double>& d2, std::size_t n, std::size_t i, double beta,
                   std::vector<double>& row) {
    double sum_p = 0.0, sum_dp = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
            row[j] = 0.0;
            continue;
        }
        const double p = std::exp(-beta * d2[i * n + j]);
        row[j] = p;
        sum_p += p;
        sum_dp += d2[i * n + j] * p;
    }
    if (sum_p < 1e-300) {
        const double u = 1.0 / static_cast<double>(n - 1);
        for (std::size_t j = 0; j < n; ++j) row[j] = j == i ? 0.0 : u;
        return std::log(static_cast<double>(n - 1));
    }
    const double H = std::log(sum_p) + beta * sum_dp / sum_p;
    const double inv = 1.0 / sum_p;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
    return H;
}

} // namespace

TsneAffinities tsne_affinities(const std::vector<double>& X, std::size_t n, std::size_t d,
                               double perplexity) {
    if (n < 2) throw ValidationError("tsne: need at least two points");
    if (X.size() != n * d) throw ContractError("tsne: feature buffer does not match n*d");
    if (perplexity < 2.0 || perplexity > static_cast<double>(n - 1))
        throw ValidationError("tsne: perplexity " + std::to_string(perplexity) +
                              " infeasible for " + std::to_string(n) + " points");
    const auto d2 = squared_distances(X, n, d);
    const double target_H = std::log(perplexity);

    TsneAffinities out;
    out.P.assign(n * n, 0.0);
    out.row_perplexity.assign(n, 0.0);
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i) {
        double beta = 1.0;
        double beta_min = -std::numeric_limits<double>::infinity();
        double beta_max = std::numeric_limits<double>::infinity();
        double H = row_entropy(d2, n, i, beta, row);
        for (int iter = 0; iter < 200 && std::abs(std::exp(H) - perplexity) > 1e-6; ++iter) {
            if (H > target_H) { // too spread out: sharpen
                beta_min = beta;
                beta = std::isinf(beta_max) ? beta * 2.0 : (beta + beta_max) / 2.0;
            } else {
                beta_max = beta;
                beta = std::isinf(beta_min) ? beta / 2.0 : (beta + beta_min) / 2.0;
            }
            beta = std::min(std::max(beta, 1e-18), 1e18);
            H = row_entropy(d2, n, i, beta, row);
            if (beta >= 1e18 || beta <= 1e-18) break; // degenerate geometry, accept the limit
        }
        out.row_perplexity[i] = std::exp(H);
        for (std::size_t j = 0; j < n; ++j) out.P[i * n + j] = row[j];
    }
    // symmetrize: p_ij = (p_{j|i} + p_{i|j}) / 2n, so the matrix sums to 1
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double p = (out.P[i * n + j] + out.P[j * n + i]) / (2.0 * static_cast<double>(n));
            out.P[i * n + j] = p;
            out.P[j * n + i] = p;
        }
    for (std::size_t i = 0; i < n; ++i) out.P[i * n + i] = 0.0;
    return out;
}

TsneResult tsne(const std::vector<double>& X, std::size_t n, std::size_t d,
                const TsneConfig& cfg) {
    cfg.validate();
    if (n < 7) throw ValidationError("tsne: need at least 7 points for a perplexity of 2");
    const double eff_perp = std::min(cfg.perplexity, (static_cast<double>(n) / 3.0) - 1e-9);
    if (eff_perp < 2.0)
        throw ValidationError("tsne: clamped perplexity " + std::to_string(eff_perp) +
                              " below the minimum of 2");
    auto aff = tsne_affinities(X, n, d, eff_perp);

    // pristine copy for KL reporting; the working copy gets exaggerated
    const std::vector<double> P = aff.P;
    std::vector<double> Pw = aff.P;
    for (auto& p : Pw) p *= cfg.early_exaggeration;

    TsneResult out;
    out.effective_perplexity = eff_perp;
    out.points.assign(n * 2, 0.0);
    Rng rng = Rng(cfg.seed).split("tsne-init");
    for (auto& y : out.points) y = rng.normal() * 1e-4;

    std::vector<double> uY(n * 2, 0.0), gains(n * 2, 1.0), dY(n * 2, 0.0);
    std::vector<double> Q(n * n, 0.0), y_old(n * 2, 0.0);
    double momentum = cfg.initial_momentum;

    // Student-t kernel at the current layout; fills Q and returns its sum.
    auto compute_kernel = [&](const std::vector<double>& y) {
        double sum_q = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double dx = y[i * 2] - y[j * 2];
                const double dy = y[i * 2 + 1] - y[j * 2 + 1];
                const double q = 1.0 / (1.0 + dx * dx + dy * dy);
                Q[i * n + j] = q;
                Q[j * n + i] = q;
                sum_q += 2.0 * q;
            }
        return sum_q;
    };
    auto kl_against = [&](const std::vector<double>& ref, double sum_q) {
        double kl = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double p = ref[i * n + j];
                if (p <= 0.0) continue;
                const double q = std::max(Q[i * n + j] / sum_q, 1e-12);
                kl += p * std::log(p / q);
            }
        return kl;
    };

    double sum_q = compute_kernel(out.points);
    double objective = kl_against(Pw, sum_q);

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        if (iter == cfg.exaggeration_iters) {
            Pw = P;
            objective = kl_against(Pw, sum_q); // same layout, new objective
        }
        if (iter == cfg.momentum_switch_iter) momentum = cfg.final_momentum;

        std::fill(dY.begin(), dY.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double q = Q[i * n + j];
                const double mult = (Pw[i * n + j] - q / sum_q) * q;
                dY[i * 2] += 4.0 * mult * (out.points[i * 2] - out.points[j * 2]);
                dY[i * 2 + 1] += 4.0 * mult * (out.points[i * 2 + 1] - out.points[j * 2 + 1]);
            }
        for (std::size_t k = 0; k < n * 2; ++k) {
            gains[k] = (dY[k] > 0.0) != (uY[k] > 0.0) ? gains[k] + 0.2 : gains[k] * 0.8;
            gains[k] = std::max(gains[k], 0.01);
        }

        // Momentum step with a backtracking safeguard: if the objective went
        // up, restart the momentum and retry with a shrinking step so the
        // recorded KL trace never climbs.
        y_old = out.points;
        const std::vector<double> u_old = uY;
        double scale = 1.0, mom = momentum, new_obj = objective;
        for (int attempt = 0; attempt < 40; ++attempt) {
            for (std::size_t k = 0; k < n * 2; ++k) {
                uY[k] = mom * u_old[k] - cfg.learning_rate * scale * gains[k] * dY[k];
                out.points[k] = y_old[k] + uY[k];
            }
            double mx = 0.0, my = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                mx += out.points[i * 2];
                my += out.points[i * 2 + 1];
            }
            mx /= static_cast<double>(n);
            my /= static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                out.points[i * 2] -= mx;
                out.points[i * 2 + 1] -= my;
            }
            sum_q = compute_kernel(out.points);
            new_obj = kl_against(Pw, sum_q);
            if (new_obj <= objective) break;
            mom = 0.0;
            scale *= 0.5;
        }
        if (new_obj > objective) { // no improving step found: stay put
            out.points = y_old;
            std::fill(uY.begin(), uY.end(), 0.0);
            sum_q = compute_kernel(out.points);
            new_obj = objective;
        }
        objective = new_obj;

        out.kl_trace.push_back(iter >= cfg.exaggeration_iters ? new_obj : kl_against(P, sum_q));
    }
    return out;
}

// ---------------------------------------------------------------------------
// embeddings

EmbeddingSet extract_embeddings(CectModel& model, const data::LoadedDataset& ds,
                                const data::NormalizationConfig& norm, int batch_size,
                                const std::string& subset_tag) {
    if (ds.size() == 0) throw ContractError("extract_embeddings: empty dataset");
    autograd::NoGradGuard ng;
    EmbeddingSet set;
    set.n = ds.size();
    const int R = model.resolution();
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) order[i] = i;
    for (std::size_t begin = 0; begin < ds.size(); begin += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(ds.size(), begin + static_cast<std::size_t>(batch_size));
        Tensor batch = train::eval_batch(ds, order, begin, end, R, norm);
        auto emb = model.penultimate(batch);
        if (set.d == 0) set.d = static_cast<std::size_t>(emb.dim(1));
        for (std::size_t i = 0; i < end - begin; ++i) {
            for (std::size_t k = 0; k < set.d; ++k)
                set.features.push_back(
                    static_cast<double>(emb.at({static_cast<std::int64_t>(i), static_cast<std::int64_t>(k)})));
            set.labels.push_back(ds.samples[begin + i].label);
            set.subsets.push_back(subset_tag);
        }
    }
    return set;
}

void append_embeddings(EmbeddingSet& dst, const EmbeddingSet& src) {
    if (dst.n == 0) {
        dst = src;
        return;
    }
    if (dst.d != src.d) throw ContractError("append_embeddings: width mismatch");
    dst.features.insert(dst.features.end(), src.features.begin(), src.features.end());
    dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
    dst.subsets.insert(dst.subsets.end(), src.subsets.begin(), src.subsets.end());
    dst.n += src.n;
}

// ---------------------------------------------------------------------------
// rendering

std::string render_confusion_svg(const eval::ConfusionMatrix& cm, const std::string& positive_name,
                                 const std::string& negative_name) {
    const std::int64_t counts[4] = {cm.tp, cm.fp, cm.fn, cm.tn};
    const std::int64_t peak = std::max<std::int64_t>(1, *std::max_element(counts, counts + 4));
    const int cell = 120, left = 110, top = 70;
    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\""
        << left + 2 * cell + 20 << "\" height=\"" << top + 2 * cell + 30 << "\">\n"
        << "  <text x=\"" << left + cell << "\" y=\"22\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"14\">true</text>\n"
        << "  <text x=\"18\" y=\"" << top + cell
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" "
           "transform=\"rotate(-90 18 "
        << top + cell << ")\">predicted</text>\n";
    const std::string col_names[2] = {positive_name, negative_name};
    for (int c = 0; c < 2; ++c)
        svg << "  <text x=\"" << left + c * cell + cell / 2 << "\" y=\"" << top - 12
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
            << col_names[c] << "</text>\n";
    for (int r = 0; r < 2; ++r)
        svg << "  <text x=\"" << left - 10 << "\" y=\"" << top + r * cell + cell / 2 + 4
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" << col_names[r]
            << "</text>\n";
    const char* tags[4] = {"TP", "FP", "FN", "TN"};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            const int k = r * 2 + c;
            const double shade = static_cast<double>(counts[k]) / static_cast<double>(peak);
            const int blue = 235 - static_cast<int>(shade * 150.0);
            svg << "  <rect x=\"" << left + c * cell << "\" y=\"" << top + r * cell << "\" width=\""
                << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << blue << "," << blue + 10
                << ",235)\" stroke=\"black\"/>\n"
                << "  <text x=\"" << left + c * cell + cell / 2 << "\" y=\""
                << top + r * cell + cell / 2 - 6
                << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"18\">"
                << counts[k] << "</text>\n"
                << "  <text x=\"" << left + c * cell + cell / 2 << "\" y=\""
                << top + r * cell + cell / 2 + 16
                << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
                << tags[k] << "</text>\n";
        }
    svg << "</svg>\n";
    return svg.str();
}

std::string render_scatter_svg(const TsneResult& tsne, const std::vector<int>& labels) {
    if (labels.size() * 2 != tsne.points.size())
        throw ContractError("render_scatter_svg: label count does not match points");
    const int size = 480, margin = 30;
    double lo = 0, hi = 0;
    for (double v : tsne.points) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = std::max(hi - lo, 1e-9);
    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << size
        << "\" height=\"" << size << "\">\n"
        << "  <rect x=\"0\" y=\"0\" width=\"" << size << "\" height=\"" << size
        << "\" fill=\"white\"/>\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double x = margin + (tsne.points[i * 2] - lo) / span * (size - 2 * margin);
        const double y = margin + (tsne.points[i * 2 + 1] - lo) / span * (size - 2 * margin);
        svg << "  <circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"3.5\" fill=\""
            << (labels[i] ? "#d62728" : "#1f77b4") << "\" fill-opacity=\"0.75\"/>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

// ---------------------------------------------------------------------------
// emission

namespace {

ordered_json metric_json(const std::optional<double>& m) {
    if (!m) return nullptr;
    return *m;
}

ordered_json metrics_json(const eval::MetricsReport& m) {
    ordered_json j;
    j["acc"] = metric_json(m.acc);
    j["npv"] = metric_json(m.npv);
    j["ppv"] = metric_json(m.ppv);
    j["sen"] = metric_json(m.sen);
    j["spe"] = metric_json(m.spe);
    j["fos"] = metric_json(m.fos);
    return j;
}

ordered_json confusion_json(const eval::ConfusionMatrix& cm) {
    ordered_json j;
    j["tp"] = cm.tp;
    j["fp"] = cm.fp;
    j["fn"] = cm.fn;
    j["tn"] = cm.tn;
    return j;
}

std::string metric_csv(const std::optional<double>& m) {
    if (!m) return "undef";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", *m);
    return buf;
}

std::string coeff_csv(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

std::string run_report_json(const train::RunReport& report) {
    ordered_json j;
    j["kind"] = report.kind;
    j["seed"] = report.seed;
    j["config"] = ordered_json::object();
    for (const auto& [k, v] : report.config) j["config"][k] = v;
    j["step_losses"] = report.step_losses;
    j["epochs"] = ordered_json::array();
    for (const auto& e : report.epochs) {
        ordered_json ej;
        ej["epoch"] = e.epoch;
        ej["train_loss"] = e.train_loss;
        ej["val_loss"] = e.val_loss;
        ej["lr"] = e.lr;
        ej["val_metrics"] = metrics_json(e.val_metrics);
        ej["val_confusion"] = confusion_json(e.val_confusion);
        j["epochs"].push_back(ej);
    }
    j["test_metrics"] = report.test_metrics ? metrics_json(*report.test_metrics) : ordered_json(nullptr);
    j["test_confusion"] =
        report.test_confusion ? confusion_json(*report.test_confusion) : ordered_json(nullptr);
    return j.dump(2) + "\n";
}

std::string sweep_json(const std::vector<eval::SweepRow>& rows) {
    ordered_json j = ordered_json::array();
    for (const auto& r : rows) {
        ordered_json rj;
        rj["alpha"] = r.coeffs.alpha;
        rj["beta"] = r.coeffs.beta;
        rj["gamma"] = r.coeffs.gamma;
        rj["status"] = r.ok ? "ok" : "failed";
        if (r.ok) {
            rj["metrics"] = metrics_json(r.metrics);
            rj["confusion"] = confusion_json(r.cm);
        } else {
            rj["error"] = r.error;
        }
        j.push_back(rj);
    }
    return j.dump(2) + "\n";
}

std::string ablation_json(const std::vector<eval::AblationResult>& rows) {
    ordered_json j = ordered_json::array();
    for (const auto& r : rows) {
        ordered_json rj;
        rj["label"] = r.row.label;
        rj["ceb"] = r.row.ceb;
        rj["tdb"] = r.row.tdb;
        rj["tcb"] = r.row.tcb;
        rj["scales"] = {r.row.scales[0], r.row.scales[1], r.row.scales[2], r.row.scales[3]};
        if (r.row.coeffs) {
            rj["alpha"] = r.row.coeffs->alpha;
            rj["beta"] = r.row.coeffs->beta;
            rj["gamma"] = r.row.coeffs->gamma;
        }
        rj["status"] = r.ok ? "ok" : "failed";
        if (r.ok)
            rj["acc"] = metric_json(r.acc);
        else
            rj["error"] = r.error;
        j.push_back(rj);
    }
    return j.dump(2) + "\n";
}

std::string sweep_csv(const std::vector<eval::SweepRow>& rows) {
    std::ostringstream out;
    out << "alpha,beta,gamma,acc,npv,ppv,sen,spe,fos,status\n";
    for (const auto& r : rows) {
        out << coeff_csv(r.coeffs.alpha) << ',' << coeff_csv(r.coeffs.beta) << ','
            << coeff_csv(r.coeffs.gamma) << ',';
        if (r.ok)
            out << metric_csv(r.metrics.acc) << ',' << metric_csv(r.metrics.npv) << ','
                << metric_csv(r.metrics.ppv) << ',' << metric_csv(r.metrics.sen) << ','
                << metric_csv(r.metrics.spe) << ',' << metric_csv(r.metrics.fos) << ",ok\n";
        else
            out << "undef,undef,undef,undef,undef,undef,failed\n";
    }
    return out.str();
}

std::string ablation_csv(const std::vector<eval::AblationResult>& rows) {
    std::ostringstream out;
    out << "ceb,tdb,tcb,scale28,scale56,scale112,scale224,alpha,beta,gamma,acc,status\n";
    for (const auto& r : rows) {
        out << (r.row.ceb ? 1 : 0) << ',' << (r.row.tdb ? 1 : 0) << ',' << (r.row.tcb ? 1 : 0);
        for (bool s : r.row.scales) out << ',' << (s ? 1 : 0);
        if (r.row.coeffs)
            out << ',' << coeff_csv(r.row.coeffs->alpha) << ',' << coeff_csv(r.row.coeffs->beta)
                << ',' << coeff_csv(r.row.coeffs->gamma);
        else
            out << ",-,-,-";
        out << ',' << (r.ok ? metric_csv(r.acc) : "undef") << ',' << (r.ok ? "ok" : "failed")
            << '\n';
    }
    return out.str();
}

std::string embeddings_csv(const EmbeddingSet& set) {
    std::ostringstream out;
    for (std::size_t i = 0; i < set.n; ++i) {
        for (std::size_t k = 0; k < set.d; ++k) {
            char buf[40];
            std::snprintf(buf, sizeof(buf), "%.8g", set.features[i * set.d + k]);
            out << buf << ',';
        }
        out << set.labels[i] << '\n';
    }
    return out.str();
}

std::string tsne_csv(const TsneResult& tsne, const EmbeddingSet& set) {
    if (set.n * 2 != tsne.points.size())
        throw ContractError("tsne_csv: embedding set does not match the projection");
    std::ostringstream out;
    out << "x,y,label,subset\n";
    for (std::size_t i = 0; i < set.n; ++i) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.8g,%.8g", tsne.points[i * 2], tsne.points[i * 2 + 1]);
        out << buf << ',' << set.labels[i] << ','
            << (set.subsets.empty() ? "" : set.subsets[i]) << '\n';
    }
    return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write file: " + path);
    out << content;
    if (!out) throw IoError("short write: " + path);
}

} // namespace cect::report
