#include "raglab/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace raglab {

uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t s = a;
  uint64_t x = splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ull + (x << 6) + (x >> 2);
  return splitmix64(s);
}

int Rng::next_int(int n) {
  if (n <= 0) throw std::invalid_argument("Rng::next_int: n must be positive");
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<int>(v % un);
}

int Rng::next_categorical(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("Rng::next_categorical: empty distribution");
  double total = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw std::invalid_argument("Rng::next_categorical: negative probability");
    total += p;
  }
  if (total <= 0.0) throw std::invalid_argument("Rng::next_categorical: zero mass");
  const double u = next_double() * total;
  double acc = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size() - 1);  // rounding fell off the end
}

Rng Rng::fork(uint64_t stream_id) {
  // derive without disturbing this stream more than one draw
  return Rng(mix_seed(next_u64(), stream_id));
}

std::string Rng::state_string() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::set_state_string(const std::string& s) {
  std::istringstream in(s);
  in >> engine_;
  if (in.fail()) throw std::runtime_error("Rng::set_state_string: bad state");
}

}  // namespace raglab
