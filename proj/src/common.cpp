#include "promptrestore/common.hpp"

#include <cctype>
#include <cmath>
#include <numbers>
#include <sstream>

namespace promptrestore {

std::string_view to_string(DegradationType type) {
  switch (type) {
    case DegradationType::noise: return "noise";
    case DegradationType::rain: return "rain";
    case DegradationType::haze: return "haze";
  }
  return "unknown";
}

DegradationType parse_degradation(std::string_view name) {
  if (name == "noise" || name == "denoise") return DegradationType::noise;
  if (name == "rain" || name == "derain") return DegradationType::rain;
  if (name == "haze" || name == "dehaze") return DegradationType::haze;
  throw InvalidArgument("unknown degradation type '" + std::string(name) + "'");
}

uint64_t uniform_index(Rng& rng, uint64_t n) {
  if (n == 0) throw InvalidArgument("uniform_index: empty range");
  const uint64_t limit = Rng::max() - (Rng::max() % n);
  uint64_t draw = rng();
  while (draw >= limit) draw = rng();
  return draw % n;
}

double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

double standard_normal(Rng& rng) {
  double u1 = uniform_unit(rng);
  while (u1 <= 0.0) u1 = uniform_unit(rng);
  const double u2 = uniform_unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string rng_state(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void restore_rng_state(Rng& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  if (in.fail()) throw InvalidArgument("malformed rng state");
}

std::vector<std::string> split_list(std::string_view text, char sep) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (start <= text.size()) {
    size_t end = text.find(sep, start);
    if (end == std::string_view::npos) end = text.size();
    auto part = text.substr(start, end - start);
    while (!part.empty() && std::isspace(static_cast<unsigned char>(part.front()))) part.remove_prefix(1);
    while (!part.empty() && std::isspace(static_cast<unsigned char>(part.back()))) part.remove_suffix(1);
    if (!part.empty()) parts.emplace_back(part);
    start = end + 1;
  }
  return parts;
}

}  // namespace promptrestore
