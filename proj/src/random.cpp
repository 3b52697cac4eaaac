#include "phydi/random.hpp"

namespace phydi {

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
    // splitmix64 finaliser over the mixed inputs
    std::uint64_t z = seed ^ fnv1a(name);
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void fill_uniform(std::span<double> out, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : out) v = dist(rng);
}

void fill_normal(std::span<double> out, double mean, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : out) v = dist(rng);
}

}  // namespace phydi
