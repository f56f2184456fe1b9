#pragma once

// Binary checkpoint container:
//   "SEPO" | u32 version | u32 scalar bytes | u32 role | u32 meta_len | meta
//   | u32 n_tensors | { u32 name_len | name | u32 ndim | u64 dims[ndim] | data }*
// All integers and reals little-endian; meta is UTF-8 key=value lines.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "sepo/core/error.hpp"
#include "sepo/core/hash.hpp"
#include "sepo/lm/model.hpp"

namespace sepo::lm {

enum class Role : std::uint32_t { base_ref = 0, oracle = 1, policy = 2 };

inline std::string to_string(Role r) {
    switch (r) {
        case Role::base_ref: return "base_ref";
        case Role::oracle: return "oracle";
        case Role::policy: return "policy";
    }
    return "unknown";
}

inline Role role_from_string(const std::string& s) {
    if (s == "base_ref") return Role::base_ref;
    if (s == "oracle") return Role::oracle;
    if (s == "policy") return Role::policy;
    throw ValidationError("unknown checkpoint role '" + s + "'");
}

struct Provenance {
    std::string config_hash;
    std::string data_hash;
    std::uint64_t steps = 0;
};

template <class T>
struct ModelCheckpoint {
    Model<T> model;
    Role role = Role::policy;
    Provenance provenance;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
  public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    template <class U>
    void le(U v) {
        static_assert(std::is_unsigned_v<U>);
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) { le(v); }
    void u64(std::uint64_t v) { le(v); }
    void real(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void real(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    const std::vector<unsigned char>& buffer() const { return buf_; }

  private:
    std::vector<unsigned char> buf_;
};

class ByteReader {
  public:
    explicit ByteReader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw ValidationError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    template <class U>
    U le() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf_[pos_ + i]) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    std::uint32_t u32() { return le<std::uint32_t>(); }
    std::uint64_t u64() { return le<std::uint64_t>(); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::string str() { return raw(u32()); }
    bool done() const { return pos_ == buf_.size(); }

  private:
    std::vector<unsigned char> buf_;
    std::size_t pos_ = 0;
};

inline std::map<std::string, std::string> parse_meta(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("checkpoint metadata line without '=': " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline std::size_t meta_count(const std::map<std::string, std::string>& kv, const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ValidationError("checkpoint metadata missing '" + key + "'");
    return static_cast<std::size_t>(std::stoull(it->second));
}

} // namespace detail

template <class T>
std::vector<unsigned char> serialize_checkpoint(const ModelCheckpoint<T>& ckpt) {
    static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);
    detail::ByteWriter w;
    w.bytes("SEPO", 4);
    w.u32(kCheckpointVersion);
    w.u32(sizeof(T));
    w.u32(static_cast<std::uint32_t>(ckpt.role));
    std::string meta = ckpt.model.config().canonical();
    meta += "role=" + to_string(ckpt.role) + "\n";
    meta += "config_hash=" + ckpt.provenance.config_hash + "\n";
    meta += "data_hash=" + ckpt.provenance.data_hash + "\n";
    meta += "steps=" + std::to_string(ckpt.provenance.steps) + "\n";
    w.str(meta);
    const auto params = ckpt.model.named_parameters();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t->shape().size()));
        for (std::size_t d : t->shape()) w.u64(d);
        for (T v : t->data()) w.real(v);
    }
    return w.buffer();
}

template <class T>
ModelCheckpoint<T> deserialize_checkpoint(std::vector<unsigned char> bytes) {
    detail::ByteReader r(std::move(bytes));
    if (r.raw(4) != "SEPO") throw ValidationError("not a checkpoint: bad magic bytes");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t width = r.u32();
    if (width != sizeof(T))
        throw ValidationError("checkpoint stores " + std::to_string(8 * width) + "-bit reals, requested " +
                              std::to_string(8 * sizeof(T)));
    const auto role_code = r.u32();
    if (role_code > 2) throw ValidationError("checkpoint role code " + std::to_string(role_code) + " invalid");
    const auto kv = detail::parse_meta(r.str());
    LMConfig cfg;
    cfg.vocab_size = detail::meta_count(kv, "vocab_size");
    cfg.n_layers = detail::meta_count(kv, "n_layers");
    cfg.n_heads = detail::meta_count(kv, "n_heads");
    cfg.d_model = detail::meta_count(kv, "d_model");
    cfg.max_context = detail::meta_count(kv, "max_context");
    cfg.validate();

    ModelCheckpoint<T> ck;
    ck.model = Model<T>(cfg, 0);
    ck.role = static_cast<Role>(role_code);
    if (kv.count("role") && role_from_string(kv.at("role")) != ck.role)
        throw ValidationError("checkpoint role tag disagrees with header");
    ck.provenance.config_hash = kv.count("config_hash") ? kv.at("config_hash") : "";
    ck.provenance.data_hash = kv.count("data_hash") ? kv.at("data_hash") : "";
    ck.provenance.steps = kv.count("steps") ? std::stoull(kv.at("steps")) : 0;

    auto params = ck.model.named_parameters();
    const std::uint32_t count = r.u32();
    if (count != params.size())
        throw ValidationError("checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                              std::to_string(params.size()));
    for (auto& [name, t] : params) {
        const std::string stored = r.str();
        if (stored != name) throw ValidationError("checkpoint tensor '" + stored + "' where '" + name + "' expected");
        const std::uint32_t ndim = r.u32();
        ad::Shape shape(ndim);
        for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
        if (shape != t->shape())
            throw ValidationError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(shape) +
                                  ", config implies " + ad::shape_str(t->shape()));
        for (T& v : t->data()) {
            if constexpr (std::is_same_v<T, double>) v = std::bit_cast<double>(r.u64());
            else v = std::bit_cast<float>(r.u32());
        }
    }
    if (!r.done()) throw ValidationError("checkpoint has trailing bytes");
    return ck;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ValidationError("short write to '" + path + "'");
}

template <class T>
void save_checkpoint(const std::string& path, const ModelCheckpoint<T>& ckpt) {
    write_file_bytes(path, serialize_checkpoint(ckpt));
}

template <class T>
ModelCheckpoint<T> load_checkpoint(const std::string& path) {
    return deserialize_checkpoint<T>(read_file_bytes(path));
}

/// Content hash of a file on disk; ties derived artifacts to their inputs.
inline std::string file_hash(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return to_hex(fnv1a64(std::span<const unsigned char>(bytes)));
}

/// Reads only the header to report the stored real width (4 or 8).
inline std::uint32_t checkpoint_scalar_bytes(const std::string& path) {
    auto bytes = read_file_bytes(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "SEPO", 4) != 0)
        throw ValidationError("not a checkpoint: '" + path + "'");
    return static_cast<std::uint32_t>(bytes[8]) | (static_cast<std::uint32_t>(bytes[9]) << 8) |
           (static_cast<std::uint32_t>(bytes[10]) << 16) | (static_cast<std::uint32_t>(bytes[11]) << 24);
}

} // namespace sepo::lm
