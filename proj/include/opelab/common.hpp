#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace opelab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a(const void* data, std::size_t bytes,
                    std::uint64_t hash = 0xcbf29ce484222325ULL);
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t hash = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), hash);
}

// Seeds for independent streams: changing one purpose never shifts another.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index, std::string_view purpose);

double uniform01(Rng& rng);
double standard_normal(Rng& rng);

// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = hardware concurrency).
// The first exception thrown by any task is rethrown after all workers join.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace opelab
