#include "promptrestore/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace promptrestore {

using nlohmann::json;

DegradationSpec DegradationSpec::noise(double sigma) {
  if (!(sigma >= 0.0)) throw InvalidArgument("noise sigma must be >= 0");
  return {DegradationType::noise, NoiseParams{sigma}};
}

DegradationSpec DegradationSpec::rain(const RainParams& p) {
  if (!(p.density >= 0.0) || !(p.intensity >= 0.0) || !(p.length >= 0.0)) {
    throw InvalidArgument("rain density, length and intensity must be >= 0");
  }
  return {DegradationType::rain, p};
}

DegradationSpec DegradationSpec::haze(const HazeParams& p) {
  if (!(p.beta >= 0.0)) throw InvalidArgument("haze beta must be >= 0");
  for (double a : p.airlight) {
    if (!(a >= 0.0 && a <= 1.0)) throw InvalidArgument("airlight must lie in [0, 1]");
  }
  if (p.depth_grid < 1) throw InvalidArgument("depth grid must be >= 1");
  return {DegradationType::haze, p};
}

json DegradationSpec::to_json() const {
  json j;
  j["kind"] = to_string(kind_);
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, NoiseParams>) {
          j["sigma"] = p.sigma;
        } else if constexpr (std::is_same_v<T, RainParams>) {
          j["density"] = p.density;
          j["angle_deg"] = p.angle_deg;
          j["length"] = p.length;
          j["intensity"] = p.intensity;
        } else {
          j["beta"] = p.beta;
          j["airlight"] = p.airlight;
          j["depth_grid"] = p.depth_grid;
        }
      },
      params_);
  return j;
}

DegradationSpec DegradationSpec::from_json(const json& j) {
  switch (parse_degradation(j.at("kind").get<std::string>())) {
    case DegradationType::noise:
      if (j.contains("sigma_255")) return noise(j["sigma_255"].get<double>() / 255.0);
      return noise(j.value("sigma", NoiseParams{}.sigma));
    case DegradationType::rain: {
      RainParams p;
      p.density = j.value("density", p.density);
      p.angle_deg = j.value("angle_deg", p.angle_deg);
      p.length = j.value("length", p.length);
      p.intensity = j.value("intensity", p.intensity);
      return rain(p);
    }
    case DegradationType::haze: {
      HazeParams p;
      p.beta = j.value("beta", p.beta);
      if (j.contains("airlight")) {
        if (j["airlight"].is_number()) {
          p.airlight.fill(j["airlight"].get<double>());
        } else {
          p.airlight = j["airlight"].get<std::array<double, 3>>();
        }
      }
      p.depth_grid = j.value("depth_grid", p.depth_grid);
      return haze(p);
    }
  }
  throw InvalidArgument("unreachable degradation kind");
}

Image add_gaussian_noise(const Image& clean, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw InvalidArgument("noise sigma must be >= 0");
  Image out = clean;
  if (sigma == 0.0) return out;
  for (float& v : out.values()) {
    v = std::clamp(static_cast<float>(v + sigma * standard_normal(rng)), 0.0f, 1.0f);
  }
  return out;
}

namespace {

// Inversion sampling keeps the draw sequence independent of the standard library.
int64_t sample_poisson(double mean, Rng& rng) {
  if (mean <= 0.0) return 0;
  if (mean > 500.0) {
    return std::max<int64_t>(0, std::llround(mean + std::sqrt(mean) * standard_normal(rng)));
  }
  const double u = uniform_unit(rng);
  double pmf = std::exp(-mean);
  double cdf = pmf;
  int64_t k = 0;
  while (u > cdf && k < 100000) {
    ++k;
    pmf *= mean / static_cast<double>(k);
    cdf += pmf;
    if (pmf < 1e-300 && static_cast<double>(k) > mean) break;
  }
  return k;
}

double lerp(double lo, double hi, double t) { return lo + (hi - lo) * t; }
double uniform_in(const std::array<double, 2>& range, Rng& rng) {
  return lerp(range[0], range[1], uniform_unit(rng));
}

}  // namespace

std::vector<RainSeed> sample_rain_seeds(int height, int width, double density, Rng& rng) {
  const double mean = density * static_cast<double>(height) * width / 1e6;
  const int64_t count = sample_poisson(mean, rng);
  std::vector<RainSeed> seeds;
  seeds.reserve(count);
  for (int64_t i = 0; i < count; ++i) {
    RainSeed s;
    s.y = static_cast<int>(uniform_index(rng, height));
    s.x = static_cast<int>(uniform_index(rng, width));
    s.brightness = static_cast<float>(0.6 + 0.4 * uniform_unit(rng));
    s.length_scale = static_cast<float>(0.7 + 0.6 * uniform_unit(rng));
    seeds.push_back(s);
  }
  return seeds;
}

std::vector<float> render_streak_layer(int height, int width, const RainParams& params,
                                       std::span<const RainSeed> seeds) {
  std::vector<float> layer(static_cast<size_t>(height) * width, 0.0f);
  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double dy = std::cos(theta), dx = std::sin(theta);
  for (const auto& seed : seeds) {
    const double half = 0.5 * params.length * seed.length_scale;
    for (double t = -half; t <= half; t += 0.5) {
      const long y = std::lround(seed.y + t * dy);
      const long x = std::lround(seed.x + t * dx);
      if (y < 0 || y >= height || x < 0 || x >= width) continue;
      float& cell = layer[static_cast<size_t>(y) * width + x];
      cell = std::max(cell, seed.brightness);
    }
  }
  return layer;
}

Image add_rain(const Image& clean, const RainParams& params, Rng& rng) {
  DegradationSpec::rain(params);  // validates
  if (params.density == 0.0 || params.intensity == 0.0) return clean;
  const auto seeds = sample_rain_seeds(clean.height(), clean.width(), params.density, rng);
  const auto layer = render_streak_layer(clean.height(), clean.width(), params, seeds);
  Image out = clean;
  for (int c = 0; c < Image::kChannels; ++c) {
    auto plane = out.plane(c);
    for (size_t i = 0; i < plane.size(); ++i) {
      plane[i] = std::min(1.0f, plane[i] + static_cast<float>(params.intensity) * layer[i]);
    }
  }
  return out;
}

std::vector<float> smooth_depth_field(int height, int width, int grid, Rng& rng) {
  if (grid < 1) throw InvalidArgument("depth grid must be >= 1");
  const int g = grid + 1;
  std::vector<double> nodes(static_cast<size_t>(g) * g);
  for (double& v : nodes) v = uniform_unit(rng);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };

  std::vector<float> field(static_cast<size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    const double gy = height > 1 ? static_cast<double>(y) / (height - 1) * grid : 0.0;
    const int y0 = std::min(static_cast<int>(gy), grid - 1);
    const double ty = smooth(gy - y0);
    for (int x = 0; x < width; ++x) {
      const double gx = width > 1 ? static_cast<double>(x) / (width - 1) * grid : 0.0;
      const int x0 = std::min(static_cast<int>(gx), grid - 1);
      const double tx = smooth(gx - x0);
      const double top = lerp(nodes[y0 * g + x0], nodes[y0 * g + x0 + 1], tx);
      const double bot = lerp(nodes[(y0 + 1) * g + x0], nodes[(y0 + 1) * g + x0 + 1], tx);
      field[static_cast<size_t>(y) * width + x] = static_cast<float>(lerp(top, bot, ty));
    }
  }
  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  const float min = *lo, range = *hi - *lo;
  for (float& v : field) v = range > 0.0f ? (v - min) / range : 0.0f;
  return field;
}

Image apply_scattering(const Image& clean, std::span<const float> transmission,
                       const std::array<double, 3>& airlight) {
  const size_t pixels = static_cast<size_t>(clean.height()) * clean.width();
  if (transmission.size() != pixels) throw InvalidArgument("transmission map size mismatch");
  Image out = clean;
  for (int c = 0; c < Image::kChannels; ++c) {
    auto plane = out.plane(c);
    const auto a = static_cast<float>(airlight[c]);
    for (size_t i = 0; i < pixels; ++i) {
      const float t = transmission[i];
      plane[i] = plane[i] * t + a * (1.0f - t);
    }
  }
  return out;
}

Image add_haze(const Image& clean, const HazeParams& params, Rng& rng) {
  DegradationSpec::haze(params);
  if (params.beta == 0.0) return clean;
  auto transmission = smooth_depth_field(clean.height(), clean.width(), params.depth_grid, rng);
  for (float& t : transmission) t = static_cast<float>(std::exp(-params.beta * t));
  return apply_scattering(clean, transmission, params.airlight);
}

Image apply(const Image& clean, const DegradationSpec& spec, Rng& rng) {
  return std::visit(
      [&](const auto& p) -> Image {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, NoiseParams>) {
          return add_gaussian_noise(clean, p.sigma, rng);
        } else if constexpr (std::is_same_v<T, RainParams>) {
          return add_rain(clean, p, rng);
        } else {
          return add_haze(clean, p, rng);
        }
      },
      spec.params());
}

Image compose(const Image& clean, std::span<const DegradationSpec> specs, Rng& rng) {
  if (specs.empty()) throw InvalidArgument("compose needs at least one degradation");
  Image out = clean;
  for (const auto& spec : specs) out = apply(out, spec, rng);
  return out;
}

Image compose_seeded(const Image& clean, std::span<const SeededSpec> specs) {
  Image out = clean;
  for (const auto& item : specs) {
    Rng rng(item.seed);
    out = apply(out, item.spec, rng);
  }
  return out;
}

std::vector<DegradationSpec> physical_order(std::vector<DegradationSpec> specs) {
  auto rank = [](DegradationType t) {
    switch (t) {
      case DegradationType::haze: return 0;
      case DegradationType::rain: return 1;
      case DegradationType::noise: return 2;
    }
    return 3;
  };
  std::stable_sort(specs.begin(), specs.end(),
                   [&](const auto& a, const auto& b) { return rank(a.kind()) < rank(b.kind()); });
  return specs;
}

TaskMix TaskMix::only(DegradationType type) {
  TaskMix mix;
  mix.weights = {0.0, 0.0, 0.0};
  mix.weights[static_cast<size_t>(type)] = 1.0;
  return mix;
}

TaskMix TaskMix::uniform_over(std::span<const DegradationType> tasks) {
  if (tasks.empty()) throw InvalidArgument("task set must be non-empty");
  TaskMix mix;
  mix.weights = {0.0, 0.0, 0.0};
  for (auto t : tasks) mix.weights[static_cast<size_t>(t)] = 1.0;
  double total = 0.0;
  for (double w : mix.weights) total += w;
  for (double& w : mix.weights) w /= total;
  return mix;
}

DegradationType sample_task(const TaskMix& mix, Rng& rng) {
  double total = 0.0;
  for (double w : mix.weights) {
    if (w < 0.0) throw InvalidArgument("task weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InvalidArgument("task weights must sum to 1");
  const double u = uniform_unit(rng);
  double acc = 0.0;
  DegradationType last = DegradationType::noise;
  for (auto type : kAllDegradations) {
    const double w = mix.weight(type);
    if (w <= 0.0) continue;
    acc += w;
    last = type;
    if (u < acc) return type;
  }
  return last;
}

DegradationSpec sample_spec(DegradationType type, Rng& rng, const DegradationRanges& ranges) {
  switch (type) {
    case DegradationType::noise: {
      const auto& levels = ranges.noise_levels_255;
      return DegradationSpec::noise(levels[uniform_index(rng, levels.size())] / 255.0);
    }
    case DegradationType::rain: {
      RainParams p;
      p.density = uniform_in(ranges.rain_density, rng);
      p.angle_deg = uniform_in(ranges.rain_angle_deg, rng);
      p.length = uniform_in(ranges.rain_length, rng);
      p.intensity = uniform_in(ranges.rain_intensity, rng);
      return DegradationSpec::rain(p);
    }
    case DegradationType::haze: {
      HazeParams p;
      p.beta = uniform_in(ranges.haze_beta, rng);
      const double base = uniform_in(ranges.haze_airlight, rng);
      for (double& a : p.airlight) a = std::clamp(base + 0.03 * (2.0 * uniform_unit(rng) - 1.0), 0.0, 1.0);
      return DegradationSpec::haze(p);
    }
  }
  throw InvalidArgument("unreachable degradation kind");
}

std::vector<ImagePair> make_batch(std::span<const Image> cleans, const TaskMix& mix,
                                  const InstructionCorpus& corpus, int patch, Rng& rng,
                                  const DegradationRanges& ranges, Split split) {
  for (const auto& img : cleans) {
    if (patch <= 0 || patch > std::min(img.height(), img.width())) {
      throw InvalidArgument("patch size " + std::to_string(patch) + " exceeds image dimension");
    }
  }
  std::vector<ImagePair> out;
  out.reserve(cleans.size());
  for (const auto& img : cleans) {
    const DegradationType task = sample_task(mix, rng);
    DegradationSpec spec = sample_spec(task, rng, ranges);
    const int top = static_cast<int>(uniform_index(rng, img.height() - patch + 1));
    const int left = static_cast<int>(uniform_index(rng, img.width() - patch + 1));
    const bool hflip = uniform_index(rng, 2) == 1;
    const bool vflip = uniform_index(rng, 2) == 1;
    Image clean = img.crop(top, left, patch, patch);
    Image degraded = apply(clean, spec, rng);
    Instruction instruction = corpus.sample(task, split, rng);
    out.push_back({degraded.flipped(hflip, vflip), clean.flipped(hflip, vflip), {std::move(spec)},
                   std::move(instruction)});
  }
  return out;
}

std::vector<NamedPair> load_pair_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path clean_dir = root / "clean", degraded_dir = root / "degraded";
  if (!fs::is_directory(clean_dir) || !fs::is_directory(degraded_dir)) {
    throw NotFound("expected " + clean_dir.string() + " and " + degraded_dir.string());
  }
  std::vector<fs::path> names;
  for (const auto& entry : fs::directory_iterator(clean_dir)) {
    if (entry.is_regular_file()) names.push_back(entry.path().filename());
  }
  std::sort(names.begin(), names.end());
  std::vector<NamedPair> pairs;
  for (const auto& name : names) {
    if (!fs::exists(degraded_dir / name)) continue;
    NamedPair p{name.stem().string(), read_image(clean_dir / name), read_image(degraded_dir / name)};
    require_same_shape(p.clean, p.degraded, "pair directory");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::string manifest_line(const ManifestEntry& entry) {
  json j;
  j["clean_path"] = entry.clean_path;
  j["kind"] = to_string(entry.spec.kind());
  j["params"] = entry.spec.to_json();
  j["instruction"] = entry.instruction;
  return j.dump();
}

ManifestEntry parse_manifest_line(const std::string& line) {
  const json j = json::parse(line);
  json params = j.at("params");
  params["kind"] = j.at("kind");
  return {j.at("clean_path").get<std::string>(), DegradationSpec::from_json(params),
          j.at("instruction").get<std::string>()};
}

}  // namespace promptrestore
