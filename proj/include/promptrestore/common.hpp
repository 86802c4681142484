#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace promptrestore {

/// Random stream used by every stochastic operation. The engine is fully
/// specified by the standard, so streams replay identically on every platform.
using Rng = std::mt19937_64;

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingFailure : public std::runtime_error {
 public:
  TrainingFailure(int64_t step, const std::string& what)
      : std::runtime_error("training failed at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  int64_t step() const { return step_; }

 private:
  int64_t step_;
};

enum class DegradationType { noise, rain, haze };

inline constexpr DegradationType kAllDegradations[] = {DegradationType::noise, DegradationType::rain,
                                                       DegradationType::haze};

std::string_view to_string(DegradationType type);
DegradationType parse_degradation(std::string_view name);

/// Uniform integer in [0, n) by rejection; unlike std::uniform_int_distribution
/// the mapping from engine output is fixed, so results are portable.
uint64_t uniform_index(Rng& rng, uint64_t n);

/// Uniform double in [0, 1) from the top 53 bits of one engine draw.
double uniform_unit(Rng& rng);

/// Standard normal via Box-Muller on uniform_unit draws (portable).
double standard_normal(Rng& rng);

template <typename T>
void portable_shuffle(std::vector<T>& items, Rng& rng) {
  for (size_t i = items.size(); i > 1; --i) {
    const size_t j = uniform_index(rng, i);
    std::swap(items[i - 1], items[j]);
  }
}

std::string rng_state(const Rng& rng);
void restore_rng_state(Rng& rng, const std::string& state);

/// Splits "a,b,c" into trimmed parts.
std::vector<std::string> split_list(std::string_view text, char sep = ',');

}  // namespace promptrestore
