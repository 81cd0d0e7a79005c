#include "ldseg/hashing.hpp"

#include <cstdio>

#include "ldseg/errors.hpp"
#include "ldseg/random.hpp"

#include <bit>
#include <sstream>

namespace ldseg {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ' << hex64(std::bit_cast<std::uint64_t>(spare_));
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  int spare_flag = 0;
  std::string spare_hex;
  is >> engine_ >> spare_flag >> spare_hex;
  if (!is || spare_hex.size() != 16) throw FormatError("malformed rng state");
  has_spare_ = spare_flag != 0;
  spare_ = std::bit_cast<double>(std::stoull(spare_hex, nullptr, 16));
}

}  // namespace ldseg
