#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "promptrestore/common.hpp"
#include "promptrestore/corpus.hpp"
#include "promptrestore/image.hpp"

namespace promptrestore {

/// Noise standard deviation in units of the [0, 1] dynamic range.
struct NoiseParams {
  double sigma = 25.0 / 255.0;
};

struct RainParams {
  double density = 3000.0;   // streaks per megapixel
  double angle_deg = 0.0;    // from vertical
  double length = 10.0;      // pixels
  double intensity = 0.35;   // additive amplitude
};

struct HazeParams {
  double beta = 1.5;                            // scattering coefficient
  std::array<double, 3> airlight{0.85, 0.85, 0.85};
  int depth_grid = 4;                           // control points per side of the depth field
};

/// One degradation; exactly one parameter block is active and it matches `kind`.
class DegradationSpec {
 public:
  using Params = std::variant<NoiseParams, RainParams, HazeParams>;

  static DegradationSpec noise(double sigma);
  static DegradationSpec rain(const RainParams& params);
  static DegradationSpec haze(const HazeParams& params);

  DegradationType kind() const { return kind_; }
  const Params& params() const { return params_; }

  nlohmann::json to_json() const;
  static DegradationSpec from_json(const nlohmann::json& j);

 private:
  DegradationSpec(DegradationType kind, Params params) : kind_(kind), params_(std::move(params)) {}

  DegradationType kind_;
  Params params_;
};

/// sigma in [0, 1] units; result clipped to [0, 1].
Image add_gaussian_noise(const Image& clean, double sigma, Rng& rng);

struct RainSeed {
  int y = 0;
  int x = 0;
  float brightness = 1.0f;
  float length_scale = 1.0f;
};

/// Poisson-distributed streak seeds with mean density * H * W / 1e6.
std::vector<RainSeed> sample_rain_seeds(int height, int width, double density, Rng& rng);
/// Single-channel non-negative streak layer (row-major H*W) before intensity scaling.
std::vector<float> render_streak_layer(int height, int width, const RainParams& params,
                                       std::span<const RainSeed> seeds);
Image add_rain(const Image& clean, const RainParams& params, Rng& rng);

/// Band-limited random field normalized to [0, 1] (row-major H*W).
std::vector<float> smooth_depth_field(int height, int width, int grid, Rng& rng);
/// Atmospheric scattering: clean * t + airlight * (1 - t), per pixel.
Image apply_scattering(const Image& clean, std::span<const float> transmission,
                       const std::array<double, 3>& airlight);
Image add_haze(const Image& clean, const HazeParams& params, Rng& rng);

Image apply(const Image& clean, const DegradationSpec& spec, Rng& rng);
/// Applies specs in list order.
Image compose(const Image& clean, std::span<const DegradationSpec> specs, Rng& rng);

/// A degradation with its own random stream, so that any subset of a
/// composition can be re-rendered with identical realizations.
struct SeededSpec {
  DegradationSpec spec;
  uint64_t seed = 0;
};

/// Applies specs in list order, each with Rng(seed). An empty list returns the input.
Image compose_seeded(const Image& clean, std::span<const SeededSpec> specs);

/// Composition order used for multi-degradation scenes: scene effects first,
/// sensor noise last.
std::vector<DegradationSpec> physical_order(std::vector<DegradationSpec> specs);

struct ImagePair {
  Image degraded;
  Image clean;
  std::vector<DegradationSpec> specs;
  Instruction instruction;
};

/// Relative frequency of each task in a batch (noise, rain, haze); must sum to 1.
struct TaskMix {
  std::array<double, 3> weights{1.0 / 3, 1.0 / 3, 1.0 / 3};

  static TaskMix only(DegradationType type);
  static TaskMix uniform_over(std::span<const DegradationType> tasks);
  double weight(DegradationType type) const { return weights[static_cast<size_t>(type)]; }
};

/// Training-time parameter ranges per task.
struct DegradationRanges {
  std::vector<double> noise_levels_255{15.0, 25.0, 50.0};
  std::array<double, 2> rain_density{2000.0, 5000.0};
  std::array<double, 2> rain_angle_deg{-20.0, 20.0};
  std::array<double, 2> rain_length{6.0, 14.0};
  std::array<double, 2> rain_intensity{0.25, 0.5};
  std::array<double, 2> haze_beta{1.0, 2.0};
  std::array<double, 2> haze_airlight{0.75, 0.95};
};

DegradationSpec sample_spec(DegradationType type, Rng& rng, const DegradationRanges& ranges = {});
DegradationType sample_task(const TaskMix& mix, Rng& rng);

/// One pair per clean image: task from the mix, spec from the task's ranges,
/// random patch crop, independent horizontal/vertical flips shared by both
/// members, and an instruction of the matching category from `split`.
std::vector<ImagePair> make_batch(std::span<const Image> cleans, const TaskMix& mix,
                                  const InstructionCorpus& corpus, int patch, Rng& rng,
                                  const DegradationRanges& ranges = {}, Split split = Split::train);

struct NamedPair {
  std::string name;
  Image clean;
  Image degraded;
};

/// Reads `{root}/clean/NAME.png` with its `{root}/degraded/NAME.png` partner.
std::vector<NamedPair> load_pair_directory(const std::filesystem::path& root);

struct ManifestEntry {
  std::string clean_path;
  DegradationSpec spec;
  std::string instruction;
};

std::string manifest_line(const ManifestEntry& entry);
ManifestEntry parse_manifest_line(const std::string& line);

}  // namespace promptrestore
