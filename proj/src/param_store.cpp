#include "rsmpod/param_store.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace rsmpod {

namespace {

constexpr char kMagic[4] = {'P', 'D', 'P', 'S'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint: truncated u32");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f64_le(std::ostream& os, const double* d, size_t n) {
    // Little-endian host assumed for the payload fast path.
    static_assert(sizeof(double) == 8);
    os.write(reinterpret_cast<const char*>(d), static_cast<std::streamsize>(n * 8));
}

}  // namespace

Tensor& ParamStore::create(const std::string& path, Tensor t) {
    auto [it, inserted] = params_.emplace(path, std::move(t));
    if (!inserted) throw ConfigError("duplicate parameter path: " + path);
    it->second.set_requires_grad(!is_frozen(path));
    return it->second;
}

Tensor& ParamStore::at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw LookupError("unknown parameter: " + path);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw LookupError("unknown parameter: " + path);
    return it->second;
}

bool ParamStore::is_frozen(const std::string& path) const {
    for (const auto& pre : frozen_)
        if (path.rfind(pre, 0) == 0) return true;
    return false;
}

void ParamStore::set_frozen_prefixes(std::set<std::string> prefixes) {
    frozen_ = std::move(prefixes);
    for (auto& [path, t] : params_) t.set_requires_grad(!is_frozen(path));
}

void ParamStore::zero_all_grads() {
    for (auto& [path, t] : params_) t.zero_grad();
}

void ParamStore::save(const std::string& file) const {
    std::ofstream os(file, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + file);
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<uint32_t>(params_.size()));
    for (const auto& [path, t] : params_) {
        write_u32(os, static_cast<uint32_t>(path.size()));
        os.write(path.data(), static_cast<std::streamsize>(path.size()));
        write_u32(os, static_cast<uint32_t>(t.shape().size()));
        for (int d : t.shape()) write_u32(os, static_cast<uint32_t>(d));
        write_f64_le(os, t.values().data(), t.size());
    }
    if (!os) throw IoError("checkpoint write failed: " + file);
}

void ParamStore::load(const std::string& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + file);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad checkpoint magic in " + file);
    uint32_t version = read_u32(is);
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + file);
    uint32_t count = read_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t plen = read_u32(is);
        std::string path(plen, '\0');
        is.read(path.data(), plen);
        uint32_t rank = read_u32(is);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(read_u32(is));
        size_t n = shape_product(shape);
        std::vector<double> vals(n);
        is.read(reinterpret_cast<char*>(vals.data()), static_cast<std::streamsize>(n * 8));
        if (!is) throw IoError("checkpoint: truncated payload for " + path);
        auto it = params_.find(path);
        if (it == params_.end()) {
            create(path, Tensor::from_values(shape, std::move(vals)));
        } else {
            if (it->second.shape() != shape)
                throw IoError("checkpoint: shape mismatch for " + path);
            it->second.mutable_values() = std::move(vals);
        }
    }
}

ParamStore deep_copy(const ParamStore& ps) {
    ParamStore out;
    out.set_frozen_prefixes(ps.frozen_prefixes());
    for (const auto& [path, t] : ps.params())
        out.create(path, Tensor::from_values(t.shape(), t.values(), t.requires_grad()));
    return out;
}

}  // namespace rsmpod
