#include "cect/kvconfig.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace cect::cli {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            parts.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(trim(cur));
    return parts;
}

[[noreturn]] void type_error(const std::string& key, const std::string& expected,
                             const std::string& got) {
    throw ConfigError("config key '" + key + "' expects " + expected + ", got '" + got + "'");
}

long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) type_error(key, "an integer", v);
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        type_error(key, "an integer", v);
    }
}

// accepts decimals and simple fractions like "1/3"
double parse_number(const std::string& key, const std::string& v) {
    const auto slash = v.find('/');
    try {
        if (slash != std::string::npos) {
            const double num = std::stod(trim(v.substr(0, slash)));
            const double den = std::stod(trim(v.substr(slash + 1)));
            if (den == 0.0) type_error(key, "a number", v);
            return num / den;
        }
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) type_error(key, "a number", v);
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        type_error(key, "a number", v);
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    type_error(key, "a boolean (true/false)", v);
}

template <std::size_t N>
std::array<int, N> parse_int_list(const std::string& key, const std::string& v) {
    const auto parts = split_on(v, ',');
    if (parts.size() != N)
        type_error(key, std::to_string(N) + " comma-separated integers", v);
    std::array<int, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<int>(parse_int(key, parts[i]));
    return out;
}

template <std::size_t N>
std::array<double, N> parse_number_list(const std::string& key, const std::string& v) {
    const auto parts = split_on(v, ',');
    if (parts.size() != N) type_error(key, std::to_string(N) + " comma-separated numbers", v);
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = parse_number(key, parts[i]);
    return out;
}

std::array<float, 3> parse_channel_stats(const std::string& key, const std::string& v) {
    const auto parts = split_on(v, ',');
    if (parts.size() == 1) {
        const float x = static_cast<float>(parse_number(key, parts[0]));
        return {x, x, x};
    }
    if (parts.size() != 3) type_error(key, "1 or 3 comma-separated numbers", v);
    return {static_cast<float>(parse_number(key, parts[0])),
            static_cast<float>(parse_number(key, parts[1])),
            static_cast<float>(parse_number(key, parts[2]))};
}

EnsembleCoefficients parse_coefficients(const std::string& key, const std::string& v) {
    const auto nums = parse_number_list<3>(key, v);
    return {nums[0], nums[1], nums[2]};
}

std::set<Branch> parse_branches(const std::string& key, const std::string& v) {
    std::set<Branch> out;
    for (const auto& part : split_on(v, ',')) {
        if (part == "SD1")
            out.insert(Branch::SD1);
        else if (part == "SD2")
            out.insert(Branch::SD2);
        else if (part == "SD3")
            out.insert(Branch::SD3);
        else
            type_error(key, "a subset of SD1,SD2,SD3", v);
    }
    if (out.empty()) type_error(key, "a non-empty subset of SD1,SD2,SD3", v);
    return out;
}

std::vector<EnsembleCoefficients> parse_groups(const std::string& key, const std::string& v) {
    if (v == "paper") return eval::SweepSpec::paper_default().groups;
    std::vector<EnsembleCoefficients> groups;
    for (const auto& part : split_on(v, ';'))
        groups.push_back(parse_coefficients(key, part));
    return groups;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text,
                                                 const std::string& origin) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": expected 'key = value', got '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        out[key] = value;
    }
    return out;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_kv_text(buf.str(), path);
}

ResolvedConfig load_config(const std::string& config_path,
                           const std::vector<std::string>& overrides, const std::string& preset,
                           std::uint64_t seed) {
    ResolvedConfig cfg;
    cfg.preset = preset;
    cfg.seed = seed;
    if (preset == "base") {
        cfg.model = CectConfig::base();
    } else if (preset == "tiny") {
        cfg.model = CectConfig::tiny();
        cfg.train.batch_size = 16;
        cfg.train.augment = false;
    } else {
        throw ConfigError("unknown preset '" + preset + "' (expected base or tiny)");
    }

    std::map<std::string, std::string> kv;
    if (!config_path.empty()) kv = parse_kv_file(config_path);
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + o + "' must have the form key=value");
        std::string key = trim(o.substr(0, eq));
        if (key == "coefficients") key = "model.coefficients"; // common shorthand
        kv[key] = trim(o.substr(eq + 1));
    }

    // one handler per known key
    const std::map<std::string, std::function<void(const std::string&, const std::string&)>>
        schema{
            {"model.resolution",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.input_resolution = static_cast<int>(parse_int(k, v));
             }},
            {"model.input_channels",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.input_channels = static_cast<int>(parse_int(k, v));
             }},
            {"model.encoder_channels",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.encoder_channels = parse_int_list<3>(k, v);
             }},
            {"model.decoder_channels",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.decoder_channels = static_cast<int>(parse_int(k, v));
             }},
            {"model.decoder_hidden",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.decoder_hidden = static_cast<int>(parse_int(k, v));
             }},
            {"model.patch_size",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.tcb.patch_size = static_cast<int>(parse_int(k, v));
             }},
            {"model.window",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.tcb.window_size = static_cast<int>(parse_int(k, v));
             }},
            {"model.depths",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.tcb.stage_depths = parse_int_list<4>(k, v);
             }},
            {"model.dims",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.tcb.stage_dims = parse_int_list<4>(k, v);
             }},
            {"model.heads",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.tcb.heads = parse_int_list<4>(k, v);
             }},
            {"model.mlp_ratio",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.tcb.mlp_ratio = parse_number(k, v);
             }},
            {"model.coefficients",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.coefficients = parse_coefficients(k, v);
             }},
            {"model.branches",
             [&](const std::string& k, const std::string& v) {
                 cfg.model.enabled_branches = parse_branches(k, v);
             }},
            {"train.epochs",
             [&](const std::string& k, const std::string& v) {
                 cfg.train.epochs = static_cast<int>(parse_int(k, v));
             }},
            {"train.lr",
             [&](const std::string& k, const std::string& v) {
                 cfg.train.initial_lr = parse_number(k, v);
             }},
            {"train.batch",
             [&](const std::string& k, const std::string& v) {
                 cfg.train.batch_size = static_cast<int>(parse_int(k, v));
             }},
            {"train.plateau_factor",
             [&](const std::string& k, const std::string& v) {
                 cfg.train.plateau_factor = parse_number(k, v);
             }},
            {"train.plateau_patience",
             [&](const std::string& k, const std::string& v) {
                 cfg.train.plateau_patience = static_cast<int>(parse_int(k, v));
             }},
            {"train.max_steps",
             [&](const std::string& k, const std::string& v) {
                 cfg.train.max_steps = static_cast<int>(parse_int(k, v));
             }},
            {"train.augment",
             [&](const std::string& k, const std::string& v) {
                 cfg.train.augment = parse_bool(k, v);
             }},
            {"train.threads",
             [&](const std::string& k, const std::string& v) {
                 cfg.train.threads = static_cast<int>(parse_int(k, v));
             }},
            {"data.root",
             [&](const std::string&, const std::string& v) { cfg.data_root = v; }},
            {"data.split",
             [&](const std::string& k, const std::string& v) {
                 if (v == "three_way")
                     cfg.split.mode = data::SplitMode::ThreeWay;
                 else if (v == "two_way_external")
                     cfg.split.mode = data::SplitMode::TwoWayWithExternalTest;
                 else
                     type_error(k, "three_way or two_way_external", v);
             }},
            {"data.ratios",
             [&](const std::string& k, const std::string& v) {
                 cfg.split.ratios = parse_number_list<3>(k, v);
             }},
            {"data.external_manifest",
             [&](const std::string&, const std::string& v) { cfg.external_manifest = v; }},
            {"data.synth_per_class",
             [&](const std::string& k, const std::string& v) {
                 cfg.synth_per_class = static_cast<int>(parse_int(k, v));
             }},
            {"data.norm_mean",
             [&](const std::string& k, const std::string& v) {
                 cfg.aug.normalization.mean = parse_channel_stats(k, v);
             }},
            {"data.norm_std",
             [&](const std::string& k, const std::string& v) {
                 cfg.aug.normalization.stddev = parse_channel_stats(k, v);
             }},
            {"data.crop_scale",
             [&](const std::string& k, const std::string& v) {
                 const auto r = parse_number_list<2>(k, v);
                 cfg.aug.crop_scale_min = r[0];
                 cfg.aug.crop_scale_max = r[1];
             }},
            {"data.crop_ratio",
             [&](const std::string& k, const std::string& v) {
                 const auto r = parse_number_list<2>(k, v);
                 cfg.aug.crop_ratio_min = r[0];
                 cfg.aug.crop_ratio_max = r[1];
             }},
            {"data.flip_prob",
             [&](const std::string& k, const std::string& v) {
                 cfg.aug.flip_prob = parse_number(k, v);
             }},
            {"sweep.groups",
             [&](const std::string& k, const std::string& v) {
                 cfg.sweep.groups = parse_groups(k, v);
             }},
            {"tsne.perplexity",
             [&](const std::string& k, const std::string& v) {
                 cfg.tsne.perplexity = parse_number(k, v);
             }},
            {"tsne.iterations",
             [&](const std::string& k, const std::string& v) {
                 cfg.tsne.iterations = static_cast<int>(parse_int(k, v));
             }},
            {"tsne.learning_rate",
             [&](const std::string& k, const std::string& v) {
                 cfg.tsne.learning_rate = parse_number(k, v);
             }},
        };

    for (const auto& [key, value] : kv) {
        const auto it = schema.find(key);
        if (it == schema.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second(key, value);
    }

    cfg.sweep.groups = cfg.sweep.groups.empty() ? eval::SweepSpec::paper_default().groups
                                                : cfg.sweep.groups;
    cfg.train.seed = seed;
    cfg.split.seed = seed;
    cfg.tsne.seed = seed;

    cfg.model.validate();
    cfg.train.validate();
    cfg.aug.validate();
    cfg.sweep.validate();
    cfg.tsne.validate();
    if (cfg.synth_per_class < 1) throw ConfigError("data.synth_per_class must be >= 1");

    // resolved snapshot, written next to every run's artifacts
    auto& s = cfg.snapshot;
    s["preset"] = cfg.preset;
    s["seed"] = std::to_string(cfg.seed);
    s["model.resolution"] = std::to_string(cfg.model.input_resolution);
    s["model.input_channels"] = std::to_string(cfg.model.input_channels);
    s["model.encoder_channels"] = std::to_string(cfg.model.encoder_channels[0]) + "," +
                                  std::to_string(cfg.model.encoder_channels[1]) + "," +
                                  std::to_string(cfg.model.encoder_channels[2]);
    s["model.decoder_channels"] = std::to_string(cfg.model.decoder_channels);
    s["model.decoder_hidden"] = std::to_string(cfg.model.decoder_hidden);
    s["model.patch_size"] = std::to_string(cfg.model.tcb.patch_size);
    s["model.window"] = std::to_string(cfg.model.tcb.window_size);
    {
        std::string depths, dims, heads;
        for (int i = 0; i < 4; ++i) {
            const std::string sep = i ? "," : "";
            depths += sep + std::to_string(cfg.model.tcb.stage_depths[static_cast<std::size_t>(i)]);
            dims += sep + std::to_string(cfg.model.tcb.stage_dims[static_cast<std::size_t>(i)]);
            heads += sep + std::to_string(cfg.model.tcb.heads[static_cast<std::size_t>(i)]);
        }
        s["model.depths"] = depths;
        s["model.dims"] = dims;
        s["model.heads"] = heads;
    }
    s["model.mlp_ratio"] = fmt_double(cfg.model.tcb.mlp_ratio);
    s["model.coefficients"] = fmt_double(cfg.model.coefficients.alpha) + "," +
                              fmt_double(cfg.model.coefficients.beta) + "," +
                              fmt_double(cfg.model.coefficients.gamma);
    {
        std::string branches;
        for (Branch b : cfg.model.enabled_branches) {
            if (!branches.empty()) branches += ",";
            branches += b == Branch::SD1 ? "SD1" : b == Branch::SD2 ? "SD2" : "SD3";
        }
        s["model.branches"] = branches;
    }
    s["train.epochs"] = std::to_string(cfg.train.epochs);
    s["train.lr"] = fmt_double(cfg.train.initial_lr);
    s["train.batch"] = std::to_string(cfg.train.batch_size);
    s["train.plateau_factor"] = fmt_double(cfg.train.plateau_factor);
    s["train.plateau_patience"] = std::to_string(cfg.train.plateau_patience);
    s["train.max_steps"] = std::to_string(cfg.train.max_steps);
    s["train.augment"] = cfg.train.augment ? "true" : "false";
    s["train.threads"] = std::to_string(cfg.train.threads);
    s["data.root"] = cfg.data_root;
    s["data.split"] =
        cfg.split.mode == data::SplitMode::ThreeWay ? "three_way" : "two_way_external";
    s["data.ratios"] = fmt_double(cfg.split.ratios[0]) + "," + fmt_double(cfg.split.ratios[1]) +
                       "," + fmt_double(cfg.split.ratios[2]);
    s["data.external_manifest"] = cfg.external_manifest;
    s["data.synth_per_class"] = std::to_string(cfg.synth_per_class);
    s["data.norm_mean"] = fmt_double(cfg.aug.normalization.mean[0]) + "," +
                          fmt_double(cfg.aug.normalization.mean[1]) + "," +
                          fmt_double(cfg.aug.normalization.mean[2]);
    s["data.norm_std"] = fmt_double(cfg.aug.normalization.stddev[0]) + "," +
                         fmt_double(cfg.aug.normalization.stddev[1]) + "," +
                         fmt_double(cfg.aug.normalization.stddev[2]);
    s["data.crop_scale"] = fmt_double(cfg.aug.crop_scale_min) + "," + fmt_double(cfg.aug.crop_scale_max);
    s["data.crop_ratio"] = fmt_double(cfg.aug.crop_ratio_min) + "," + fmt_double(cfg.aug.crop_ratio_max);
    s["data.flip_prob"] = fmt_double(cfg.aug.flip_prob);
    {
        std::string groups;
        for (std::size_t i = 0; i < cfg.sweep.groups.size(); ++i) {
            if (i) groups += ";";
            groups += fmt_double(cfg.sweep.groups[i].alpha) + "," +
                      fmt_double(cfg.sweep.groups[i].beta) + "," +
                      fmt_double(cfg.sweep.groups[i].gamma);
        }
        s["sweep.groups"] = groups;
    }
    s["tsne.perplexity"] = fmt_double(cfg.tsne.perplexity);
    s["tsne.iterations"] = std::to_string(cfg.tsne.iterations);
    s["tsne.learning_rate"] = fmt_double(cfg.tsne.learning_rate);
    return cfg;
}

std::string snapshot_text(const ResolvedConfig& cfg) {
    std::ostringstream out;
    for (const auto& [k, v] : cfg.snapshot) out << k << " = " << v << "\n";
    return out.str();
}

} // namespace cect::cli
