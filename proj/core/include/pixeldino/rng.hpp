#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace pixeldino {

using Rng = std::mt19937_64;

// Stream tags keep the independent random streams of a run apart.
enum class Stream : uint64_t {
  kInit = 1,
  kLabelledDraw = 2,
  kUnlabelledDraw = 3,
  kLabelledAugment = 4,
  kUnlabelledAugment = 5,
  kSynthetic = 6,
  kGradcheck = 7,
  kHeldOut = 8,
};

// Counter-based stream derivation: the generator for (seed, stream, keys...)
// depends only on those values, so any step or sample can be regenerated
// without replaying earlier draws.
Rng make_rng(uint64_t seed, Stream stream, std::initializer_list<uint64_t> keys = {});

double uniform(Rng& rng, double lo, double hi);
int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi);  // inclusive bounds
bool bernoulli(Rng& rng, double p);
double normal(Rng& rng, double mean, double stddev);

}  // namespace pixeldino
