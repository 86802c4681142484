#include "test_support.hpp"

#include <cmath>
#include <map>

#include "promptrestore/degrade.hpp"
#include "promptrestore/metrics.hpp"

using namespace promptrestore;

namespace {

Image gradient_image(int h, int w) {
  Image img(h, w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) img.at(c, y, x) = 0.1f + 0.8f * static_cast<float>(x + y + c) / (h + w + 2);
    }
  }
  return img;
}

bool in_unit_range(const Image& img) {
  for (float v : img.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("degenerate parameters are exact identities") {
  const Image clean = gradient_image(32, 40);
  Rng rng(1);
  CHECK(add_gaussian_noise(clean, 0.0, rng) == clean);
  RainParams rain;
  rain.density = 0.0;
  CHECK(add_rain(clean, rain, rng) == clean);
  rain = RainParams{};
  rain.intensity = 0.0;
  CHECK(add_rain(clean, rain, rng) == clean);
  HazeParams haze;
  haze.beta = 0.0;
  CHECK(add_haze(clean, haze, rng) == clean);
  const std::vector<DegradationSpec> identities = {DegradationSpec::noise(0.0), DegradationSpec::rain(rain),
                                                   DegradationSpec::haze(haze)};
  CHECK(compose(clean, identities, rng) == clean);
}

TEST_CASE("invalid parameters are rejected") {
  const Image clean = gradient_image(8, 8);
  Rng rng(1);
  CHECK_THROWS_AS(add_gaussian_noise(clean, -0.1, rng), InvalidArgument);
  RainParams rain;
  rain.density = -1.0;
  CHECK_THROWS_AS(add_rain(clean, rain, rng), InvalidArgument);
  HazeParams haze;
  haze.beta = -1.0;
  CHECK_THROWS_AS(add_haze(clean, haze, rng), InvalidArgument);
  haze = HazeParams{};
  haze.airlight = {1.2, 0.5, 0.5};
  CHECK_THROWS_AS(add_haze(clean, haze, rng), InvalidArgument);
  CHECK_THROWS_AS(compose(clean, std::vector<DegradationSpec>{}, rng), InvalidArgument);
}

TEST_CASE("noise PSNR on mid-gray matches 20 log10(255 / sigma)") {
  const Image gray(128, 128, 0.5f);
  for (double s255 : {15.0, 25.0, 50.0}) {
    Rng rng(static_cast<uint64_t>(s255));
    const double measured = psnr(add_gaussian_noise(gray, s255 / 255.0, rng), gray);
    CHECK(std::abs(measured - 20.0 * std::log10(255.0 / s255)) < 0.1);
  }
}

TEST_CASE("rain only brightens and the streak count follows the density") {
  const Image clean = gradient_image(64, 64);
  Rng rng(4);
  RainParams p;
  p.density = 4000;
  const Image rainy = add_rain(clean, p, rng);
  for (size_t i = 0; i < clean.size(); ++i) CHECK(rainy.values()[i] >= clean.values()[i]);
  CHECK(rainy != clean);

  for (double density : {1000.0, 3000.0}) {
    Rng seeds_rng(static_cast<uint64_t>(density));
    double total = 0.0;
    const int runs = 20;
    for (int r = 0; r < runs; ++r) total += static_cast<double>(sample_rain_seeds(512, 512, density, seeds_rng).size());
    const double expected = 0.262144 * density;
    CHECK(std::abs(total / runs - expected) < 0.15 * expected);
  }
}

TEST_CASE("streak layer draws oriented line segments") {
  RainParams p;
  p.length = 8;
  p.angle_deg = 0;
  const std::vector<RainSeed> seed{{10, 10, 1.0f, 1.0f}};
  const auto layer = render_streak_layer(21, 21, p, seed);
  int lit = 0;
  for (int y = 0; y < 21; ++y) {
    for (int x = 0; x < 21; ++x) {
      if (layer[y * 21 + x] > 0.0f) {
        ++lit;
        CHECK(x == 10);
      }
    }
  }
  CHECK(lit == 9);
}

TEST_CASE("haze is a convex combination with the airlight") {
  const Image half(4, 4, 0.5f);
  const std::vector<float> t(16, 0.5f);
  const Image out = apply_scattering(half, t, {0.9, 0.9, 0.9});
  for (float v : out.values()) CHECK(v == doctest::Approx(0.7f));
  const std::vector<float> opaque(16, 0.0f);
  const Image veil = apply_scattering(gradient_image(4, 4), opaque, {0.2, 0.4, 0.6});
  for (int y = 0; y < 4; ++y) {
    CHECK(veil.at(0, y, 1) == doctest::Approx(0.2f));
    CHECK(veil.at(2, y, 3) == doctest::Approx(0.6f));
  }

  Image extremes(32, 32);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) extremes.at(0, y, x) = (x + y) % 2 ? 1.0f : 0.0f;
  }
  HazeParams p;
  p.beta = 3.0;
  Rng rng(2);
  CHECK(in_unit_range(add_haze(extremes, p, rng)));
}

TEST_CASE("depth field is normalized and smooth") {
  Rng rng(5);
  const auto field = smooth_depth_field(64, 64, 4, rng);
  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  CHECK(*lo == 0.0f);
  CHECK(*hi == 1.0f);
  float max_step = 0.0f;
  for (int y = 0; y < 64; ++y) {
    for (int x = 1; x < 64; ++x) max_step = std::max(max_step, std::abs(field[y * 64 + x] - field[y * 64 + x - 1]));
  }
  CHECK(max_step < 0.2f);
}

TEST_CASE("generators are deterministic, in range and shape preserving") {
  const Image clean = gradient_image(40, 48);
  for (auto type : kAllDegradations) {
    Rng spec_rng(9);
    const auto spec = sample_spec(type, spec_rng);
    Rng a(3), b(3);
    const Image x = apply(clean, spec, a);
    CHECK(x == apply(clean, spec, b));
    CHECK(x.same_shape(clean));
    CHECK(in_unit_range(x));
  }
}

TEST_CASE("single-element composition equals the operation; order matters") {
  const Image clean = gradient_image(32, 32);
  const auto noise = DegradationSpec::noise(25.0 / 255.0);
  HazeParams hp;
  const auto haze = DegradationSpec::haze(hp);
  Rng a(1), b(1);
  CHECK(compose(clean, std::vector{noise}, a) == add_gaussian_noise(clean, 25.0 / 255.0, b));
  Rng c(1), d(1);
  CHECK(compose(clean, std::vector{haze, noise}, c) != compose(clean, std::vector{noise, haze}, d));
}

TEST_CASE("physical order puts haze, then rain, then noise") {
  const auto ordered = physical_order({DegradationSpec::noise(0.1), DegradationSpec::rain({}),
                                       DegradationSpec::haze({})});
  REQUIRE(ordered.size() == 3);
  CHECK(ordered[0].kind() == DegradationType::haze);
  CHECK(ordered[1].kind() == DegradationType::rain);
  CHECK(ordered[2].kind() == DegradationType::noise);
}

TEST_CASE("seeded composition replays each degradation independently") {
  const Image clean = gradient_image(32, 32);
  const std::vector<SeededSpec> both = {{DegradationSpec::rain({}), 11}, {DegradationSpec::noise(0.1), 12}};
  const std::vector<SeededSpec> only_noise = {both[1]};
  Rng r(11), n(12);
  const Image manual = add_gaussian_noise(add_rain(clean, RainParams{}, r), 0.1, n);
  CHECK(compose_seeded(clean, both) == manual);
  Rng n2(12);
  CHECK(compose_seeded(clean, only_noise) == add_gaussian_noise(clean, 0.1, n2));
  CHECK(compose_seeded(clean, {}) == clean);
}

TEST_CASE("batches follow the task mix and share flips between members") {
  const auto corpus = InstructionCorpus::generate(0, 20);
  std::vector<Image> cleans(4, gradient_image(48, 48));
  Rng rng(3);
  const auto batch = make_batch(cleans, TaskMix::only(DegradationType::noise), corpus, 32, rng);
  REQUIRE(batch.size() == 4);
  for (const auto& pair : batch) {
    CHECK(pair.specs.at(0).kind() == DegradationType::noise);
    CHECK(pair.instruction.category == DegradationType::noise);
    CHECK(pair.instruction.split == Split::train);
    CHECK(pair.degraded.height() == 32);
    CHECK(pair.clean.width() == 32);
  }
  CHECK_THROWS_AS(make_batch(cleans, TaskMix{}, corpus, 64, rng), InvalidArgument);

  // Rain only brightens, so degraded >= clean holds per pixel only if both members share the flip.
  Image ramp(16, 16);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) ramp.at(c, y, x) = static_cast<float>(x) / 15.0f;
    }
  }
  std::vector<Image> ramps(40, ramp);
  Rng flip_rng(8);
  const auto flipped = make_batch(ramps, TaskMix::only(DegradationType::rain), corpus, 16, flip_rng);
  int horizontal = 0;
  for (const auto& pair : flipped) {
    const bool h = pair.clean.at(0, 0, 0) > pair.clean.at(0, 0, 15);
    horizontal += h;
    for (size_t i = 0; i < pair.clean.size(); ++i) CHECK(pair.degraded.values()[i] >= pair.clean.values()[i]);
  }
  CHECK(horizontal > 5);
  CHECK(horizontal < 35);
}

TEST_CASE("noise levels are drawn uniformly from the three settings") {
  Rng rng(12);
  std::map<long, int> counts;
  for (int i = 0; i < 3000; ++i) {
    const auto spec = sample_spec(DegradationType::noise, rng);
    ++counts[std::lround(std::get<NoiseParams>(spec.params()).sigma * 255.0)];
  }
  CHECK(counts.size() == 3);
  for (long s : {15L, 25L, 50L}) {
    CHECK(counts[s] > 900);
    CHECK(counts[s] < 1100);
  }
}

TEST_CASE("task sampling follows the mix") {
  Rng rng(6);
  TaskMix mix;
  mix.weights = {0.5, 0.3, 0.2};
  std::map<DegradationType, int> counts;
  for (int i = 0; i < 10000; ++i) ++counts[sample_task(mix, rng)];
  CHECK(std::abs(counts[DegradationType::noise] - 5000) < 250);
  CHECK(std::abs(counts[DegradationType::rain] - 3000) < 250);
  CHECK(std::abs(counts[DegradationType::haze] - 2000) < 250);
  TaskMix bad;
  bad.weights = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(sample_task(bad, rng), InvalidArgument);
}

TEST_CASE("specs and manifest lines round trip through JSON") {
  RainParams rp;
  rp.density = 1234;
  rp.angle_deg = -7.5;
  HazeParams hp;
  hp.airlight = {0.8, 0.85, 0.9};
  for (const auto& spec : {DegradationSpec::noise(0.2), DegradationSpec::rain(rp), DegradationSpec::haze(hp)}) {
    CHECK(DegradationSpec::from_json(spec.to_json()).to_json() == spec.to_json());
    const ManifestEntry entry{"clean/a.png", spec, "remove it"};
    const auto parsed = parse_manifest_line(manifest_line(entry));
    CHECK(parsed.clean_path == "clean/a.png");
    CHECK(parsed.instruction == "remove it");
    CHECK(parsed.spec.to_json() == spec.to_json());
  }
  CHECK_THROWS(DegradationSpec::from_json(nlohmann::json{{"kind", "snow"}}));
}
