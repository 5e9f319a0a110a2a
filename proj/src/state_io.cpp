#include "powernorm/state_io.hpp"

#include "json.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace powernorm {

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint8_t kTagU64 = 1;
constexpr std::uint8_t kTagF64 = 2;
constexpr std::uint8_t kTagVector = 3;

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        auto b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename U>
    void uint(U v) {
        for (std::size_t k = 0; k < sizeof(U); ++k) {
            out_.push_back(static_cast<std::uint8_t>((v >> (8 * k)) & 0xFF));
        }
    }
    void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) throw FormatError("state snapshot: truncated input");
    }
    template <typename U>
    U uint() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t k = 0; k < sizeof(U); ++k) v |= static_cast<U>(in_[pos_ + k]) << (8 * k);
        pos_ += sizeof(U);
        return v;
    }
    double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

template <Real T>
std::vector<double> widen(const Vector<T>& v) {
    return {v.begin(), v.end()};
}

template <Real T>
Vector<T> narrow(const std::vector<double>& v, std::size_t dim, const char* what) {
    if (v.size() != dim) {
        throw FormatError(std::string("state snapshot: '") + what + "' has length " +
                          std::to_string(v.size()) + ", expected " + std::to_string(dim));
    }
    std::vector<T> out(v.begin(), v.end());
    return Vector<T>(std::move(out));
}

void expect_kind(const StateSnapshot& snap, NormKind kind) {
    const auto k = snap.get_u64("kind");
    if (k != static_cast<std::uint64_t>(kind)) {
        throw FormatError("state snapshot: kind code " + std::to_string(k) + " is not " +
                          std::string(to_string(kind)));
    }
}

} // namespace

void StateSnapshot::set(std::string key, SnapshotValue value) {
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    entries_.emplace_back(std::move(key), std::move(value));
}

bool StateSnapshot::contains(const std::string& key) const {
    for (const auto& e : entries_)
        if (e.first == key) return true;
    return false;
}

const SnapshotValue& StateSnapshot::at(const std::string& key) const {
    for (const auto& e : entries_)
        if (e.first == key) return e.second;
    throw FormatError("state snapshot: missing key '" + key + "'");
}

std::uint64_t StateSnapshot::get_u64(const std::string& key) const {
    const auto* v = std::get_if<std::uint64_t>(&at(key));
    if (!v) throw FormatError("state snapshot: '" + key + "' is not an integer");
    return *v;
}

double StateSnapshot::get_f64(const std::string& key) const {
    const auto* v = std::get_if<double>(&at(key));
    if (!v) throw FormatError("state snapshot: '" + key + "' is not a float");
    return *v;
}

const std::vector<double>& StateSnapshot::get_vector(const std::string& key) const {
    const auto* v = std::get_if<std::vector<double>>(&at(key));
    if (!v) throw FormatError("state snapshot: '" + key + "' is not a vector");
    return *v;
}

void StateSnapshot::merge(const StateSnapshot& other, const std::string& prefix) {
    for (const auto& [k, v] : other.entries_) set(prefix + k, v);
}

StateSnapshot StateSnapshot::extract(const std::string& prefix) const {
    StateSnapshot out;
    for (const auto& [k, v] : entries_) {
        if (k.compare(0, prefix.size(), prefix) == 0) out.set(k.substr(prefix.size()), v);
    }
    return out;
}

std::vector<std::uint8_t> encode_binary(const StateSnapshot& snap) {
    Writer w;
    w.bytes("PNSS", 4);
    w.uint<std::uint32_t>(kFormatVersion);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(snap.entries().size()));
    for (const auto& [key, value] : snap.entries()) {
        if (key.size() > 0xFFFF) throw FormatError("state snapshot: key too long");
        w.uint<std::uint16_t>(static_cast<std::uint16_t>(key.size()));
        w.bytes(key.data(), key.size());
        if (const auto* u = std::get_if<std::uint64_t>(&value)) {
            w.uint<std::uint8_t>(kTagU64);
            w.uint<std::uint64_t>(*u);
        } else if (const auto* f = std::get_if<double>(&value)) {
            w.uint<std::uint8_t>(kTagF64);
            w.f64(*f);
        } else {
            const auto& vec = std::get<std::vector<double>>(value);
            w.uint<std::uint8_t>(kTagVector);
            w.uint<std::uint64_t>(vec.size());
            for (double x : vec) w.f64(x);
        }
    }
    return w.take();
}

StateSnapshot decode_binary(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.str(4) != "PNSS") throw FormatError("state snapshot: bad magic");
    const auto version = r.uint<std::uint32_t>();
    if (version != kFormatVersion) {
        throw FormatError("state snapshot: unsupported version " + std::to_string(version));
    }
    const auto count = r.uint<std::uint32_t>();
    StateSnapshot snap;
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto klen = r.uint<std::uint16_t>();
        std::string key = r.str(klen);
        const auto tag = r.uint<std::uint8_t>();
        switch (tag) {
        case kTagU64: snap.set(std::move(key), r.uint<std::uint64_t>()); break;
        case kTagF64: snap.set(std::move(key), r.f64()); break;
        case kTagVector: {
            const auto len = r.uint<std::uint64_t>();
            r.need(len * 8);
            std::vector<double> vec(len);
            for (auto& x : vec) x = r.f64();
            snap.set(std::move(key), std::move(vec));
            break;
        }
        default: throw FormatError("state snapshot: unknown tag " + std::to_string(tag));
        }
    }
    if (!r.done()) throw FormatError("state snapshot: trailing bytes");
    return snap;
}

std::string encode_json(const StateSnapshot& snap) {
    nlohmann::ordered_json entries = nlohmann::ordered_json::object();
    for (const auto& [key, value] : snap.entries()) {
        std::visit([&](const auto& v) { entries[key] = v; }, value);
    }
    nlohmann::ordered_json doc;
    doc["format"] = "powernorm-state";
    doc["version"] = kFormatVersion;
    doc["entries"] = std::move(entries);
    return doc.dump(2) + "\n";
}

StateSnapshot decode_json(const std::string& text) {
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("state snapshot JSON: ") + e.what());
    }
    if (doc.value("format", "") != "powernorm-state") throw FormatError("state JSON: bad format tag");
    StateSnapshot snap;
    for (const auto& [key, v] : doc.at("entries").items()) {
        if (v.is_number_unsigned() || v.is_number_integer()) {
            snap.set(key, v.get<std::uint64_t>());
        } else if (v.is_number_float()) {
            snap.set(key, v.get<double>());
        } else if (v.is_array()) {
            snap.set(key, v.get<std::vector<double>>());
        } else {
            throw FormatError("state JSON: unsupported value for '" + key + "'");
        }
    }
    return snap;
}

void write_binary_file(const std::filesystem::path& path, const StateSnapshot& snap) {
    const auto bytes = encode_binary(snap);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

StateSnapshot read_binary_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_binary(bytes);
}

template <Real T>
StateSnapshot to_snapshot(const BNRunningState<T>& s) {
    StateSnapshot snap;
    snap.set("kind", static_cast<std::uint64_t>(NormKind::BN));
    snap.set("dim", static_cast<std::uint64_t>(s.dim()));
    snap.set("alpha", static_cast<double>(s.alpha));
    snap.set("eps", static_cast<double>(s.eps));
    snap.set("mu", widen(s.mu));
    snap.set("sigma2", widen(s.sigma2));
    return snap;
}

template <Real T>
StateSnapshot to_snapshot(const PNVRunningState<T>& s) {
    StateSnapshot snap;
    snap.set("kind", static_cast<std::uint64_t>(NormKind::PNV));
    snap.set("dim", static_cast<std::uint64_t>(s.dim()));
    snap.set("alpha", static_cast<double>(s.alpha));
    snap.set("eps", static_cast<double>(s.eps));
    snap.set("psi2", widen(s.psi2));
    return snap;
}

template <Real T>
StateSnapshot to_snapshot(const PNState<T>& s) {
    StateSnapshot snap;
    snap.set("kind", static_cast<std::uint64_t>(NormKind::PN));
    snap.set("dim", static_cast<std::uint64_t>(s.dim()));
    snap.set("alpha_fwd", static_cast<double>(s.alpha_fwd));
    snap.set("alpha_bwd", static_cast<double>(s.alpha_bwd));
    snap.set("eps", static_cast<double>(s.eps));
    snap.set("step", s.step);
    snap.set("warmup_steps", s.warmup_steps);
    snap.set("psi2", widen(s.psi2));
    snap.set("nu", widen(s.nu));
    return snap;
}

template <Real T>
BNRunningState<T> bn_state_from_snapshot(const StateSnapshot& snap) {
    expect_kind(snap, NormKind::BN);
    const auto d = snap.get_u64("dim");
    BNRunningState<T> s;
    s.alpha = static_cast<T>(snap.get_f64("alpha"));
    s.eps = static_cast<T>(snap.get_f64("eps"));
    s.mu = narrow<T>(snap.get_vector("mu"), d, "mu");
    s.sigma2 = narrow<T>(snap.get_vector("sigma2"), d, "sigma2");
    return s;
}

template <Real T>
PNVRunningState<T> pnv_state_from_snapshot(const StateSnapshot& snap) {
    expect_kind(snap, NormKind::PNV);
    const auto d = snap.get_u64("dim");
    PNVRunningState<T> s;
    s.alpha = static_cast<T>(snap.get_f64("alpha"));
    s.eps = static_cast<T>(snap.get_f64("eps"));
    s.psi2 = narrow<T>(snap.get_vector("psi2"), d, "psi2");
    return s;
}

template <Real T>
PNState<T> pn_state_from_snapshot(const StateSnapshot& snap) {
    expect_kind(snap, NormKind::PN);
    const auto d = snap.get_u64("dim");
    PNState<T> s;
    s.alpha_fwd = static_cast<T>(snap.get_f64("alpha_fwd"));
    s.alpha_bwd = static_cast<T>(snap.get_f64("alpha_bwd"));
    s.eps = static_cast<T>(snap.get_f64("eps"));
    s.step = snap.get_u64("step");
    s.warmup_steps = snap.get_u64("warmup_steps");
    s.psi2 = narrow<T>(snap.get_vector("psi2"), d, "psi2");
    s.nu = narrow<T>(snap.get_vector("nu"), d, "nu");
    return s;
}

#define POWERNORM_INSTANTIATE(T)                                                  \
    template StateSnapshot to_snapshot(const BNRunningState<T>&);                 \
    template StateSnapshot to_snapshot(const PNVRunningState<T>&);                \
    template StateSnapshot to_snapshot(const PNState<T>&);                        \
    template BNRunningState<T> bn_state_from_snapshot<T>(const StateSnapshot&);   \
    template PNVRunningState<T> pnv_state_from_snapshot<T>(const StateSnapshot&); \
    template PNState<T> pn_state_from_snapshot<T>(const StateSnapshot&);

POWERNORM_INSTANTIATE(float)
POWERNORM_INSTANTIATE(double)

#undef POWERNORM_INSTANTIATE

} // namespace powernorm
