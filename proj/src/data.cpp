#include "cect/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;

namespace cect::data {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

struct ByteReader {
    const std::vector<unsigned char>& bytes;
    const std::string& origin;
    std::size_t pos = 0;

    bool eof() const { return pos >= bytes.size(); }
    unsigned char next() {
        if (eof()) throw IoError("truncated image file: " + origin);
        return bytes[pos++];
    }
    void skip_whitespace_and_comments() {
        while (!eof()) {
            const unsigned char c = bytes[pos];
            if (c == '#') {
                while (!eof() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(c)) {
                ++pos;
            } else {
                break;
            }
        }
    }
    long next_int() {
        skip_whitespace_and_comments();
        if (eof() || !std::isdigit(bytes[pos])) throw IoError("malformed NetPBM header: " + origin);
        long v = 0;
        while (!eof() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
        return v;
    }
};

RawImage decode_netpbm(const std::vector<unsigned char>& bytes, const std::string& origin) {
    ByteReader r{bytes, origin};
    const char kind = static_cast<char>(bytes[1]);
    r.pos = 2;
    const bool color = (kind == '3' || kind == '6');
    const bool binary = (kind == '5' || kind == '6');
    const long w = r.next_int();
    const long h = r.next_int();
    const long maxval = r.next_int();
    if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
        throw IoError("invalid NetPBM dimensions in " + origin);
    const int ch = color ? 3 : 1;
    RawImage img;
    img.channels = ch;
    img.height = static_cast<int>(h);
    img.width = static_cast<int>(w);
    img.pixels.resize(static_cast<std::size_t>(ch) * h * w);
    const double inv = 1.0 / static_cast<double>(maxval);
    const long n = static_cast<long>(ch) * h * w;
    if (binary) {
        if (r.eof() || !std::isspace(bytes[r.pos]))
            throw IoError("malformed NetPBM raster in " + origin);
        ++r.pos; // single whitespace between maxval and raster
        for (long i = 0; i < n; ++i) {
            long v = r.next();
            if (maxval > 255) v = (v << 8) | r.next(); // two-byte big-endian samples
            // interleaved -> planar
            const long pix = i / ch, c = i % ch;
            const long y = pix / w, x = pix % w;
            img.pixels[static_cast<std::size_t>((c * h + y) * w + x)] =
                static_cast<float>(static_cast<double>(v) * inv);
        }
    } else {
        for (long i = 0; i < n; ++i) {
            const long v = r.next_int();
            if (v > maxval) throw IoError("sample above maxval in " + origin);
            const long pix = i / ch, c = i % ch;
            const long y = pix / w, x = pix % w;
            img.pixels[static_cast<std::size_t>((c * h + y) * w + x)] =
                static_cast<float>(static_cast<double>(v) * inv);
        }
    }
    return img;
}

constexpr char kRawMagic[4] = {'C', 'R', 'A', 'W'};

RawImage decode_raw(const std::vector<unsigned char>& bytes, const std::string& origin) {
    if (bytes.size() < 16) throw IoError("truncated raw image: " + origin);
    if (bytes[4] != 1) throw IoError("unsupported raw image version in " + origin);
    const int ch = bytes[5];
    if (ch != 1 && ch != 3) throw IoError("raw image must have 1 or 3 channels: " + origin);
    auto u32 = [&](std::size_t off) {
        return static_cast<std::uint32_t>(bytes[off]) |
               (static_cast<std::uint32_t>(bytes[off + 1]) << 8) |
               (static_cast<std::uint32_t>(bytes[off + 2]) << 16) |
               (static_cast<std::uint32_t>(bytes[off + 3]) << 24);
    };
    const std::uint32_t h = u32(8), w = u32(12);
    if (h == 0 || w == 0 || h > (1u << 20) || w > (1u << 20))
        throw IoError("invalid raw image dimensions in " + origin);
    const std::size_t n = static_cast<std::size_t>(ch) * h * w;
    if (bytes.size() != 16 + n) throw IoError("raw image payload size mismatch in " + origin);
    RawImage img;
    img.channels = ch;
    img.height = static_cast<int>(h);
    img.width = static_cast<int>(w);
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<float>(bytes[16 + i]) / 255.0f;
    return img;
}

unsigned char quantize(float v) {
    const float c = std::min(1.0f, std::max(0.0f, v));
    return static_cast<unsigned char>(std::lround(c * 255.0f));
}

int parse_label(const std::string& s, const std::string& origin) {
    if (s == "positive" || s == "1") return 1;
    if (s == "negative" || s == "0") return 0;
    throw IoError("unknown label '" + s + "' in " + origin);
}

void sort_by_path(Manifest& m) {
    std::sort(m.entries.begin(), m.entries.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
}

} // namespace

RawImage decode_image_bytes(const std::vector<unsigned char>& bytes, const std::string& origin) {
    if (bytes.size() >= 2 && bytes[0] == 'P' &&
        (bytes[1] == '2' || bytes[1] == '3' || bytes[1] == '5' || bytes[1] == '6'))
        return decode_netpbm(bytes, origin);
    if (bytes.size() >= 4 && std::equal(kRawMagic, kRawMagic + 4, bytes.begin()))
        return decode_raw(bytes, origin);
    throw IoError("unsupported image format: " + origin);
}

RawImage decode_image(const std::string& path) {
    return decode_image_bytes(read_file(path), path);
}

void write_netpbm(const RawImage& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3)
        throw ContractError("write_netpbm: image must have 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write file: " + path);
    out << (img.channels == 1 ? "P5" : "P6") << "\n"
        << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                row[static_cast<std::size_t>(x * img.channels + c)] = quantize(img.at(c, y, x));
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("short write: " + path);
}

void write_raw(const RawImage& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3)
        throw ContractError("write_raw: image must have 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write file: " + path);
    unsigned char header[16] = {};
    std::copy(kRawMagic, kRawMagic + 4, header);
    header[4] = 1;
    header[5] = static_cast<unsigned char>(img.channels);
    const std::uint32_t h = static_cast<std::uint32_t>(img.height);
    const std::uint32_t w = static_cast<std::uint32_t>(img.width);
    for (int i = 0; i < 4; ++i) {
        header[8 + i] = static_cast<unsigned char>((h >> (8 * i)) & 0xff);
        header[12 + i] = static_cast<unsigned char>((w >> (8 * i)) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(header), 16);
    std::vector<unsigned char> payload(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) payload[i] = quantize(img.pixels[i]);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("short write: " + path);
}

RawImage resize_bilinear(const RawImage& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ContractError("resize_bilinear: non-positive output size");
    if (out_h == img.height && out_w == img.width) return img;
    RawImage out;
    out.channels = img.channels;
    out.height = out_h;
    out.width = out_w;
    out.pixels.resize(static_cast<std::size_t>(img.channels) * out_h * out_w);
    const double sy = static_cast<double>(img.height) / out_h;
    const double sx = static_cast<double>(img.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        // half-pixel centres
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < img.channels; ++c) {
                const double top = (1.0 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
                const double bot = (1.0 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

RawImage crop(const RawImage& img, int y, int x, int h, int w) {
    if (y < 0 || x < 0 || h < 1 || w < 1 || y + h > img.height || x + w > img.width)
        throw ContractError("crop: window outside image bounds");
    RawImage out;
    out.channels = img.channels;
    out.height = h;
    out.width = w;
    out.pixels.resize(static_cast<std::size_t>(img.channels) * h * w);
    for (int c = 0; c < img.channels; ++c)
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) out.at(c, yy, xx) = img.at(c, y + yy, x + xx);
    return out;
}

RawImage center_crop(const RawImage& img, int size) {
    if (size > img.height || size > img.width)
        throw ContractError("center_crop: image smaller than crop size");
    return crop(img, (img.height - size) / 2, (img.width - size) / 2, size, size);
}

RawImage hflip(const RawImage& img) {
    RawImage out = img;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

RawImage to_three_channels(const RawImage& img) {
    if (img.channels == 3) return img;
    if (img.channels != 1) throw ContractError("to_three_channels: expected 1 or 3 channels");
    RawImage out;
    out.channels = 3;
    out.height = img.height;
    out.width = img.width;
    out.pixels.resize(3 * img.pixels.size());
    for (int c = 0; c < 3; ++c)
        std::copy(img.pixels.begin(), img.pixels.end(),
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(c * img.pixels.size()));
    return out;
}

std::int64_t Manifest::count(int label) const {
    std::int64_t n = 0;
    for (const auto& e : entries)
        if (e.label == label) ++n;
    return n;
}

Manifest load_manifest_dir(const std::string& root) {
    Manifest m;
    for (const auto& [dir, label] : {std::pair<const char*, int>{"negative", 0}, {"positive", 1}}) {
        const fs::path cls = fs::path(root) / dir;
        if (!fs::is_directory(cls)) throw IoError("missing class directory: " + cls.string());
        const std::size_t before = m.entries.size();
        for (const auto& e : fs::directory_iterator(cls)) {
            if (!e.is_regular_file()) continue;
            m.entries.push_back({e.path().string(), label});
        }
        if (m.entries.size() == before) throw IoError("empty class directory: " + cls.string());
    }
    sort_by_path(m);
    return m;
}

Manifest load_manifest_csv(const std::string& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw IoError("cannot open manifest: " + csv_path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty manifest: " + csv_path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "path,label")
        throw IoError("manifest header must be 'path,label', got '" + line + "' in " + csv_path);
    Manifest m;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos)
            throw IoError("malformed manifest row '" + line + "' in " + csv_path);
        const std::string path = line.substr(0, comma);
        const std::string label = line.substr(comma + 1);
        if (!seen.insert(path).second) throw IoError("duplicate path '" + path + "' in " + csv_path);
        // relative entries are taken relative to the manifest's directory
        fs::path p(path);
        if (p.is_relative()) p = fs::path(csv_path).parent_path() / p;
        m.entries.push_back({p.string(), parse_label(label, csv_path)});
    }
    if (m.count(0) == 0 || m.count(1) == 0)
        throw IoError("manifest must contain both classes: " + csv_path);
    sort_by_path(m);
    return m;
}

Manifest load_manifest(const std::string& root_or_csv) {
    if (fs::is_directory(root_or_csv)) return load_manifest_dir(root_or_csv);
    return load_manifest_csv(root_or_csv);
}

void save_manifest_csv(const Manifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << "path,label\n";
    for (const auto& e : m.entries) {
        // store entries relative to the manifest when they live beneath it,
        // so a dataset directory is relocatable and byte-stable
        const fs::path base = fs::path(path).parent_path();
        const fs::path p(e.path);
        std::error_code ec;
        const fs::path rel = fs::relative(p, base, ec);
        const bool use_rel = !ec && !rel.empty() && rel.native().rfind("..", 0) != 0;
        out << (use_rel ? rel.string() : e.path) << ','
            << (e.label ? "positive" : "negative") << '\n';
    }
    if (!out) throw IoError("short write: " + path);
}

void SplitSpec::validate() const {
    double sum = 0.0;
    const int active = mode == SplitMode::ThreeWay ? 3 : 2;
    for (int i = 0; i < 3; ++i) {
        const double r = ratios[static_cast<std::size_t>(i)];
        if (i < active && r <= 0.0)
            throw ValidationError("split ratios must be positive, got " + std::to_string(r));
        if (i >= active && r != 0.0)
            throw ValidationError("two-way split must leave the test ratio at 0");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ValidationError("split ratios must sum to 1, got " + std::to_string(sum));
}

SplitResult split(const Manifest& m, const SplitSpec& spec, const Manifest* external_test) {
    spec.validate();
    if (spec.mode == SplitMode::TwoWayWithExternalTest && external_test == nullptr)
        throw ValidationError("two-way split requires an external test manifest");
    const int parts = spec.mode == SplitMode::ThreeWay ? 3 : 2;
    SplitResult result;
    Rng root(spec.seed);
    for (int label = 0; label < 2; ++label) {
        std::vector<ManifestEntry> cls;
        for (const auto& e : m.entries)
            if (e.label == label) cls.push_back(e);
        const std::int64_t n = static_cast<std::int64_t>(cls.size());
        if (n < parts)
            throw ValidationError("class " + std::string(label ? "positive" : "negative") + " has " +
                                  std::to_string(n) + " samples, fewer than " +
                                  std::to_string(parts) + " split parts");
        Rng rng = root.split("split-class", static_cast<std::uint64_t>(label));
        rng.shuffle(cls);
        // nearest-integer counts for the non-train parts, remainder to train
        const std::int64_t n_val = std::llround(spec.ratios[1] * static_cast<double>(n));
        const std::int64_t n_test =
            parts == 3 ? std::llround(spec.ratios[2] * static_cast<double>(n)) : 0;
        const std::int64_t n_train = n - n_val - n_test;
        if (n_train < 1 || n_val < 1 || (parts == 3 && n_test < 1))
            throw ValidationError("split produces an empty part for class " +
                                  std::string(label ? "positive" : "negative"));
        auto take = [&cls](std::int64_t from, std::int64_t count, Manifest& dst) {
            for (std::int64_t i = from; i < from + count; ++i)
                dst.entries.push_back(cls[static_cast<std::size_t>(i)]);
        };
        take(0, n_train, result.train);
        take(n_train, n_val, result.val);
        take(n_train + n_val, n_test, result.test);
    }
    if (spec.mode == SplitMode::TwoWayWithExternalTest) result.test = *external_test;
    sort_by_path(result.train);
    sort_by_path(result.val);
    sort_by_path(result.test);
    return result;
}

void AugmentationConfig::validate() const {
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
        throw ValidationError("crop scale range must lie inside (0, 1]");
    if (!(crop_ratio_min > 0.0 && crop_ratio_min <= crop_ratio_max))
        throw ValidationError("crop ratio range is invalid");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0))
        throw ValidationError("flip probability must lie in [0, 1]");
}

Tensor preprocess(const RawImage& raw, int resolution, const NormalizationConfig& norm) {
    if (raw.channels != 1 && raw.channels != 3)
        throw IoError("preprocess: unsupported channel count " + std::to_string(raw.channels));
    RawImage img = to_three_channels(raw);
    const int shorter = std::min(img.height, img.width);
    const double scl = static_cast<double>(resolution) / shorter;
    const int out_h = std::max(resolution, static_cast<int>(std::lround(img.height * scl)));
    const int out_w = std::max(resolution, static_cast<int>(std::lround(img.width * scl)));
    img = resize_bilinear(img, out_h, out_w);
    img = center_crop(img, resolution);
    return normalize_to_tensor(img, norm);
}

Tensor normalize_to_tensor(const RawImage& raw, const NormalizationConfig& norm) {
    RawImage img = to_three_channels(raw);
    Tensor t({3, img.height, img.width});
    for (int c = 0; c < 3; ++c) {
        const float mean = norm.mean[static_cast<std::size_t>(c)];
        const float inv = 1.0f / norm.stddev[static_cast<std::size_t>(c)];
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at({c, y, x}) = (img.at(c, y, x) - mean) * inv;
    }
    return t;
}

RawImage augment(const RawImage& raw, int resolution, const AugmentationConfig& cfg, Rng& rng) {
    cfg.validate();
    RawImage img = to_three_channels(raw);
    const double area = static_cast<double>(img.height) * img.width;
    RawImage cropped;
    bool found = false;
    for (int attempt = 0; attempt < 10 && !found; ++attempt) {
        const double target = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
        const double ratio =
            std::exp(rng.uniform(std::log(cfg.crop_ratio_min), std::log(cfg.crop_ratio_max)));
        const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
        const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
        if (w < 1 || h < 1 || w > img.width || h > img.height) continue;
        const int y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(img.height - h + 1)));
        const int x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(img.width - w + 1)));
        cropped = crop(img, y, x, h, w);
        found = true;
    }
    if (!found) cropped = center_crop(img, std::min(img.height, img.width));
    RawImage out = resize_bilinear(cropped, resolution, resolution);
    if (rng.uniform01() < cfg.flip_prob) out = hflip(out);
    return out;
}

LoadedDataset load_dataset(const Manifest& m) {
    LoadedDataset ds;
    ds.samples.reserve(m.entries.size());
    for (const auto& e : m.entries) {
        // location-independent sample id (class dir + file name) so derived
        // rng streams do not depend on where the dataset root lives
        const fs::path p(e.path);
        const std::string source_id = (p.parent_path().filename() / p.filename()).string();
        ds.samples.push_back({decode_image(e.path), e.label, source_id});
    }
    return ds;
}

Manifest synth_generate(int n_per_class, int resolution, std::uint64_t seed,
                        const std::string& out_dir) {
    if (n_per_class < 1) throw ValidationError("synth_generate: n_per_class must be >= 1");
    if (resolution < 4) throw ValidationError("synth_generate: resolution must be >= 4");
    fs::create_directories(fs::path(out_dir) / "negative");
    fs::create_directories(fs::path(out_dir) / "positive");
    Rng root(seed);
    Manifest m;
    for (int label = 0; label < 2; ++label) {
        for (int k = 0; k < n_per_class; ++k) {
            char name[64];
            std::snprintf(name, sizeof(name), "sample_%04d.pgm", k);
            const fs::path path = fs::path(out_dir) / (label ? "positive" : "negative") / name;
            Rng rng = root.split(std::string(label ? "positive/" : "negative/") + name);
            RawImage img;
            img.channels = 1;
            img.height = resolution;
            img.width = resolution;
            img.pixels.resize(static_cast<std::size_t>(resolution) * resolution);
            const double theta = rng.uniform(0.0, 6.283185307179586);
            const double gx = std::cos(theta), gy = std::sin(theta);
            for (int y = 0; y < resolution; ++y)
                for (int x = 0; x < resolution; ++x) {
                    // fine checker texture shared by both classes
                    const int cell = ((x / 2) + (y / 2)) % 2;
                    double v = 0.5 + (cell ? 0.15 : -0.15) + rng.uniform(-0.1, 0.1);
                    if (label == 1) {
                        // plus a global low-frequency gradient
                        const double t = (gx * (x - resolution / 2.0) + gy * (y - resolution / 2.0)) /
                                         static_cast<double>(resolution);
                        v += 0.5 * t;
                    }
                    img.at(0, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
                }
            write_netpbm(img, path.string());
            m.entries.push_back({path.string(), label});
        }
    }
    sort_by_path(m);
    save_manifest_csv(m, (fs::path(out_dir) / "manifest.csv").string());
    return m;
}

} // namespace cect::data
