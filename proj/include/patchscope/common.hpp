#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace patchscope {

// Error taxonomy shared across modules. The CLI maps each class to a fixed
// exit code (see tools/main.cpp):
//   ConfigError -> 2, IoError -> 3, DataError -> 4, NumericError -> 5.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- threading

// Number of worker lanes used by parallel_for. Defaults to
// PATCHSCOPE_THREADS if set, else the hardware concurrency (capped at 16).
std::size_t thread_count();
void set_thread_count(std::size_t n);

// Runs body(begin, end) over a partition of [0, n). Consumers must
// accumulate per output element in a fixed order so results do not depend
// on the partition; under that contract results are bitwise identical for
// every thread count.
void parallel_for(std::int64_t n,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

// ------------------------------------------------------- deterministic rng

std::uint64_t splitmix64(std::uint64_t& state);

// Stable derivation of independent streams from (base seed, stream id).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

// xoshiro256** with hand-rolled distributions. Unlike the std <random>
// distributions, every draw here is pinned down by this code, so a seed
// reproduces byte-identical output on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  double next_unit();                       // uniform [0, 1)
  double next_normal();                     // N(0, 1), Box-Muller
  std::int64_t next_index(std::int64_t n);  // uniform [0, n), unbiased

 private:
  std::uint64_t s_[4];
  bool have_cached_ = false;
  double cached_ = 0.0;
};

// Fisher-Yates with Rng::next_index; deterministic for a given seed.
void shuffle_indices(std::vector<std::int64_t>& idx, Rng& rng);

// ----------------------------------------------------------------- misc

// FNV-1a over raw bytes; used for run/model identifiers in reports.
std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t seed = 1469598103934665603ull);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace patchscope
