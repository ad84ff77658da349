#include "realcompo/rng.hpp"

#include <cmath>
#include <numbers>

namespace realcompo {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
}

inline PhiloxCounter philox_round(const PhiloxCounter& c, const PhiloxKey& k) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, c[0], hi0, lo0);
    mulhilo(kPhiloxM1, c[2], hi1, lo1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

// 53-bit uniform strictly inside (0, 1).
inline double to_unit(std::uint32_t a, std::uint32_t b) {
    const std::uint64_t bits = (static_cast<std::uint64_t>(a >> 5) << 26) | (b >> 6);
    return (static_cast<double>(bits) + 0.5) / 9007199254740992.0;
}

}  // namespace

PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key) {
    for (int round = 0; round < 10; ++round) {
        if (round > 0) {
            key[0] += kPhiloxW0;
            key[1] += kPhiloxW1;
        }
        ctr = philox_round(ctr, key);
    }
    return ctr;
}

std::array<double, 2> Rng::next_uniform_pair() {
    const PhiloxCounter ctr{static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32), stream_, 0u};
    const PhiloxKey key{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
    ++block_;
    const auto out = philox4x32_10(ctr, key);
    return {to_unit(out[0], out[1]), to_unit(out[2], out[3])};
}

double Rng::uniform() {
    if (has_uniform_) {
        has_uniform_ = false;
        return pending_uniform_;
    }
    const auto u = next_uniform_pair();
    pending_uniform_ = u[1];
    has_uniform_     = true;
    return u[0];
}

double Rng::normal() {
    if (has_normal_) {
        has_normal_ = false;
        return pending_normal_;
    }
    const auto u       = next_uniform_pair();
    const double r     = std::sqrt(-2.0 * std::log(u[0]));
    const double theta = 2.0 * std::numbers::pi * u[1];
    pending_normal_    = r * std::sin(theta);
    has_normal_        = true;
    return r * std::cos(theta);
}

std::uint32_t Rng::below(std::uint32_t n) {
    const auto k = static_cast<std::uint32_t>(uniform() * n);
    return k < n ? k : n - 1;
}

void Rng::fill_normal(Tensor3& t, double scale) {
    for (auto& x : t.data()) {
        x = scale * normal();
    }
}

void Rng::fill_normal(Grid& g, double scale) {
    for (auto& x : g.data()) {
        x = scale * normal();
    }
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace realcompo
