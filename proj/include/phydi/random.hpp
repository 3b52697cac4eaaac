#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace phydi {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view text);

/// Seed for a named stream, independent of the order streams are created in.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

void fill_uniform(std::span<double> out, double lo, double hi, Rng& rng);
void fill_normal(std::span<double> out, double mean, double stddev, Rng& rng);

}  // namespace phydi
