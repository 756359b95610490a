#include "pixeldino/rng.hpp"

#include <vector>

namespace pixeldino {

Rng make_rng(uint64_t seed, Stream stream, std::initializer_list<uint64_t> keys) {
  std::vector<uint32_t> words;
  auto push = [&](uint64_t v) {
    words.push_back(static_cast<uint32_t>(v));
    words.push_back(static_cast<uint32_t>(v >> 32));
  };
  push(seed);
  push(static_cast<uint64_t>(stream));
  for (auto k : keys) push(k);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); }

bool bernoulli(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

double normal(Rng& rng, double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(rng); }

}  // namespace pixeldino
