#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace deferkit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Error taxonomy shared by all modules. Everything derives from
// std::runtime_error so callers can catch coarsely or finely.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct PreconditionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InsufficientDataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MetadataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// 64-bit FNV-1a. Used wherever a stable, platform-independent hash is
// needed (per-id seeding, config fingerprints). std::hash is not stable
// across implementations, so it is never used for anything persisted.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::string_view s) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((seed >> (8 * i)) & 0xff);
    return fnv1a64(s, fnv1a64(std::string_view(buf, 8)));
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    return hash_combine(seed, std::string_view(buf, 8));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Deterministic stream for one (run seed, instance id) pair.
inline Rng per_id_rng(std::uint64_t run_seed, std::string_view id) {
    return Rng(hash_combine(run_seed, id));
}

// Fisher-Yates over indices, driven by the given generator.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> d(0, i - 1);
        std::swap(idx[i - 1], idx[d(rng)]);
    }
    return idx;
}

// Weighted draw without replacement: picks one index with probability
// proportional to weights[i] among entries where alive[i].
inline std::size_t weighted_pick(const std::vector<double>& weights,
                                 const std::vector<bool>& alive, Rng& rng) {
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i)
        if (alive[i]) total += weights[i];
    if (!(total > 0.0)) throw NumericError("weighted_pick: no positive mass");
    std::uniform_real_distribution<double> d(0.0, total);
    double r = d(rng);
    double acc = 0.0;
    std::size_t last = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (!alive[i]) continue;
        acc += weights[i];
        last = i;
        if (r < acc) return i;
    }
    return last;  // r == total edge case
}

}  // namespace deferkit
