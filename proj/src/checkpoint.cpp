#include "cect/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "cect/errors.hpp"

namespace cect {

namespace {

constexpr char kMagic[8] = {'C', 'E', 'C', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    std::ifstream in;
    std::string path;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("cannot open checkpoint: " + p);
    }
    void bytes(void* dst, std::size_t n) {
        in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw IoError("truncated checkpoint: " + path);
    }
    std::uint32_t u32() {
        unsigned char b[4];
        bytes(b, 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        unsigned char b[8];
        bytes(b, 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

std::uint64_t check_header(Reader& r) {
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw IoError("not a checkpoint file: " + r.path);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + r.path);
    return r.u64();
}

} // namespace

void save_checkpoint(const std::string& path, std::uint64_t config_digest,
                     const NamedFloatParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kMagic, 8);
    put_u32(out, kVersion);
    put_u64(out, config_digest);
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
        for (int d = 0; d < tensor.rank(); ++d)
            put_u64(out, static_cast<std::uint64_t>(tensor.dim(d)));
        for (std::int64_t i = 0; i < tensor.size(); ++i) put_f32(out, tensor.data()[i]);
    }
    if (!out) throw IoError("short write: " + path);
}

std::uint64_t read_checkpoint_digest(const std::string& path) {
    Reader r(path);
    return check_header(r);
}

void load_checkpoint(const std::string& path, std::uint64_t expected_digest,
                     NamedFloatParams& params) {
    Reader r(path);
    const std::uint64_t digest = check_header(r);
    if (digest != expected_digest) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%016llx vs expected %016llx",
                      static_cast<unsigned long long>(digest),
                      static_cast<unsigned long long>(expected_digest));
        throw ValidationError("checkpoint config digest mismatch (" + std::string(buf) + ") in " +
                              path);
    }
    const std::uint32_t count = r.u32();
    if (count != params.size())
        throw ValidationError("checkpoint has " + std::to_string(count) + " records, model expects " +
                              std::to_string(params.size()) + ": " + path);
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        auto& [want_name, tensor] = params[k];
        if (name != want_name)
            throw ValidationError("checkpoint record '" + name + "' does not match parameter '" +
                                  want_name + "' in " + path);
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<std::int64_t>(r.u64());
        if (shape != tensor.shape())
            throw ValidationError("checkpoint record '" + name + "' has shape " + shape_str(shape) +
                                  ", model expects " + shape_str(tensor.shape()));
        for (std::int64_t i = 0; i < tensor.size(); ++i) tensor.data()[i] = r.f32();
    }
}

} // namespace cect
