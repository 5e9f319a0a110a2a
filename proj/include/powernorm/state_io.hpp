#pragma once

// Flat key-value snapshots of normalization state.
//
// Binary layout (all integers and floats little-endian, IEEE-754 doubles):
//
//   offset  size  field
//   0       4     magic "PNSS"
//   4       4     u32 format version (1)
//   8       4     u32 entry count N
//   then N entries, each:
//           2     u16 key length K
//           K     key bytes (UTF-8, no terminator)
//           1     u8 tag: 1 = u64, 2 = f64, 3 = f64 vector
//           ...   payload: u64 | f64 | u64 length L followed by L f64
//
// The JSON twin is {"format": "powernorm-state", "version": 1,
// "entries": {key: value, ...}} with entries in the same order; integers are
// JSON integers, doubles are JSON numbers with a fractional part or
// exponent, vectors are arrays of numbers.

#include "powernorm/normalization.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace powernorm {

using SnapshotValue = std::variant<std::uint64_t, double, std::vector<double>>;

class StateSnapshot {
public:
    void set(std::string key, SnapshotValue value);

    bool contains(const std::string& key) const;
    const SnapshotValue& at(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_f64(const std::string& key) const;
    const std::vector<double>& get_vector(const std::string& key) const;

    const std::vector<std::pair<std::string, SnapshotValue>>& entries() const { return entries_; }

    // Copies every entry of `other` with `prefix` prepended to its key.
    void merge(const StateSnapshot& other, const std::string& prefix);
    // Entries whose key starts with `prefix`, with the prefix stripped.
    StateSnapshot extract(const std::string& prefix) const;

    bool operator==(const StateSnapshot&) const = default;

private:
    std::vector<std::pair<std::string, SnapshotValue>> entries_;
};

std::vector<std::uint8_t> encode_binary(const StateSnapshot& snap);
StateSnapshot decode_binary(const std::vector<std::uint8_t>& bytes);

std::string encode_json(const StateSnapshot& snap);
StateSnapshot decode_json(const std::string& text);

void write_binary_file(const std::filesystem::path& path, const StateSnapshot& snap);
StateSnapshot read_binary_file(const std::filesystem::path& path);

template <Real T>
StateSnapshot to_snapshot(const BNRunningState<T>& s);
template <Real T>
StateSnapshot to_snapshot(const PNVRunningState<T>& s);
template <Real T>
StateSnapshot to_snapshot(const PNState<T>& s);

template <Real T>
BNRunningState<T> bn_state_from_snapshot(const StateSnapshot& snap);
template <Real T>
PNVRunningState<T> pnv_state_from_snapshot(const StateSnapshot& snap);
template <Real T>
PNState<T> pn_state_from_snapshot(const StateSnapshot& snap);

} // namespace powernorm
