#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfseg {

// Axis order everywhere is (z, y, x).
using Dims3 = std::array<int, 3>;
using Spacing3 = std::array<double, 3>;

inline std::int64_t voxel_count(const Dims3& d) {
    return static_cast<std::int64_t>(d[0]) * d[1] * d[2];
}

// ---------------------------------------------------------------------------
// Little-endian scalar serialization. Hosts we target are little-endian, but
// the container formats are defined byte-exact, so go through explicit stores.
// ---------------------------------------------------------------------------

template <typename T>
void store_le(std::vector<std::uint8_t>& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T load_le(const std::uint8_t* p) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

// FNV-1a, used for config digests embedded in checkpoints.
inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Flat key-value config text: one "key = value" per line, '#' comments.
// ---------------------------------------------------------------------------

class KvConfig {
  public:
    static KvConfig parse(const std::string& text);
    static KvConfig load(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    std::string get(const std::string& key) const;
    std::string get_or(const std::string& key, const std::string& def) const;
    double get_double(const std::string& key, double def) const;
    std::int64_t get_int(const std::string& key, std::int64_t def) const;
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    // Deterministic rendering (sorted keys), used for digests and geometry logs.
    std::string canonical() const;
    void save(const std::string& path) const;

  private:
    std::map<std::string, std::string> values_;
};

std::vector<std::string> split(const std::string& s, char sep);

// Worker cap shared by the per-case pools. DFSEG_THREADS overrides, minimum 1.
int worker_count();

// Runs fn(i) for i in [0, n). Results must not depend on execution order;
// callers that reduce do so after the parallel section, in index order.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::string read_file_text(const std::string& path);
void write_file_text(const std::string& path, const std::string& text);

}  // namespace dfseg
