#pragma once

#include <array>
#include <cstdint>

#include "realcompo/tensor.hpp"

namespace realcompo {

// Reference generator used everywhere a seed appears: Philox4x32-10
// (counter-based, Random123 constants) with Box-Muller normals built from
// 53-bit uniforms. Identifier recorded in run outputs: kRngName.
//
// Counter layout: words 0-1 hold the 64-bit block index, word 2 the stream
// id, word 3 is zero. The key is the 64-bit seed. Every block yields two
// uniforms and hence two normals, so a draw is a pure function of
// (seed, stream, index).
inline constexpr const char* kRngName = "philox4x32-10/box-muller v1";

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey     = std::array<std::uint32_t, 2>;

PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key);

// Named stream ids so that unrelated draws never share counters.
enum class Stream : std::uint32_t {
    initial_latent = 1,
    coefficients   = 2,
    ddim_noise     = 3,
    params         = 4,
    instances      = 5,
    training       = 6,
    embeddings     = 7,
};

class Rng {
public:
    Rng(std::uint64_t seed, std::uint32_t stream) : seed_(seed), stream_(stream) {}
    Rng(std::uint64_t seed, Stream stream) : Rng(seed, static_cast<std::uint32_t>(stream)) {}

    // Uniform on the open interval (0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    // Uniform integer in [0, n).
    std::uint32_t below(std::uint32_t n);

    void fill_normal(Tensor3& t, double scale = 1.0);
    void fill_normal(Grid& g, double scale = 1.0);

private:
    std::array<double, 2> next_uniform_pair();

    std::uint64_t seed_;
    std::uint32_t stream_;
    std::uint64_t block_ = 0;
    double pending_uniform_ = 0.0;
    bool has_uniform_       = false;
    double pending_normal_  = 0.0;
    bool has_normal_        = false;
};

// 64-bit FNV-1a, used to derive seeds from strings and to fingerprint bytes.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull);

}  // namespace realcompo
