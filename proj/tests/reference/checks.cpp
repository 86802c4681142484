#include "checks.hpp"

#include <cmath>

#include "from_torch.hpp"

namespace oracle {

namespace {

using promptrestore::BackboneConfig;

constexpr int kChannels = 8;
constexpr int kHeads = 2;
constexpr int kSide = 4;
constexpr int kText = 6;

BackboneConfig small_config() {
  BackboneConfig cfg = BackboneConfig::tiny();
  cfg.d_text = kText;
  return cfg;
}

void positive_temperature(torch::Tensor& t) {
  torch::NoGradGuard guard;
  t.copy_(torch::rand_like(t) * 1.5 + 0.5);
}

template <typename Fn>
Discrepancy run_trials(int trials, uint64_t seed, Fn&& fn) {
  torch::manual_seed(seed);
  Discrepancy d;
  d.trials = trials;
  for (int i = 0; i < trials; ++i) d.max_abs = std::max(d.max_abs, fn());
  return d;
}

}  // namespace

Discrepancy attention_discrepancy(int trials, uint64_t seed) {
  return run_trials(trials, seed, [] {
    promptrestore::TransposedAttention attn(kChannels, kHeads);
    attn->to(torch::kFloat64);
    randomize(*attn);
    positive_temperature(attn->temperature);
    const auto xc = torch::randn({1, kChannels, kSide, kSide}, torch::kFloat64);
    const auto residual = torch::randn({1, kChannels, kSide, kSide}, torch::kFloat64);
    torch::NoGradGuard guard;
    const auto got = map_from(attn->forward(xc, residual));
    const auto want = transposed_attention(map_from(xc), map_from(residual), attention_from(attn));
    return max_abs_diff(got, want);
  });
}

Discrepancy imta_discrepancy(int trials, uint64_t seed) {
  const auto cfg = small_config();
  return run_trials(trials, seed, [&] {
    promptrestore::IMTA block(kChannels, kHeads, cfg);
    block->to(torch::kFloat64);
    randomize(*block);
    positive_temperature(block->attention->temperature);
    const auto x = torch::randn({1, kChannels, kSide, kSide}, torch::kFloat64);
    const auto z = torch::randn({1, kText}, torch::kFloat64);
    torch::NoGradGuard guard;
    const auto got = map_from(block->forward(x, z));
    const auto want = imta(map_from(x), values(z), fusion_from(block->fusion), attention_from(block->attention));
    return max_abs_diff(got, want);
  });
}

Discrepancy igfn_discrepancy(int trials, uint64_t seed) {
  const auto cfg = small_config();
  return run_trials(trials, seed, [&] {
    promptrestore::IGFN block(kChannels, cfg);
    block->to(torch::kFloat64);
    randomize(*block);
    const auto x = torch::randn({1, kChannels, kSide, kSide}, torch::kFloat64);
    const auto z = torch::randn({1, kText}, torch::kFloat64);
    torch::NoGradGuard guard;
    const auto got = map_from(block->forward(x, z));
    const auto want = igfn(map_from(x), values(z), fusion_from(block->fusion), gated_ffn_from(block));
    return max_abs_diff(got, want);
  });
}

GradientReport itblock_gradient_check(int channels, int height, int width, uint64_t seed, double h, double floor,
                                      double tolerance) {
  torch::manual_seed(seed);
  const auto cfg = BackboneConfig::tiny();
  promptrestore::ITBlock block(channels, 1, cfg);
  block->to(torch::kFloat64);
  randomize(*block, 0.3);
  positive_temperature(block->imta->attention->temperature);
  auto x = torch::randn({1, channels, height, width}, torch::kFloat64).requires_grad_(true);
  const auto z = torch::randn({1, cfg.d_text}, torch::kFloat64);

  // Targets sit far on a random side of the initial output so every residual
  // keeps its sign under the perturbation and the L1 loss is smooth there.
  torch::Tensor target;
  {
    torch::NoGradGuard guard;
    const auto out = block->forward(x, z);
    const auto side = torch::randint(0, 2, out.sizes(), torch::kFloat64) * 2 - 1;
    target = out + side * 10.0;
  }
  auto loss_fn = [&] { return (block->forward(x, z) - target).abs().mean(); };

  std::vector<std::pair<std::string, torch::Tensor>> coords;
  for (auto& item : block->named_parameters()) coords.emplace_back(item.key(), item.value());
  coords.emplace_back("input", x);

  for (auto& [name, t] : coords) {
    if (t.grad().defined()) t.mutable_grad().zero_();
  }
  loss_fn().backward();

  GradientReport report;
  torch::NoGradGuard guard;
  for (auto& [name, t] : coords) {
    auto flat = t.view({-1});
    const auto grad = t.grad().view({-1});
    for (int64_t i = 0; i < flat.numel(); ++i) {
      const double analytic = grad[i].item<double>();
      const double original = flat[i].item<double>();
      flat[i] = original + h;
      const double up = loss_fn().item<double>();
      flat[i] = original - h;
      const double down = loss_fn().item<double>();
      flat[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      if (std::abs(analytic) <= floor && std::abs(numeric) <= floor) continue;
      ++report.checked;
      const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
      if (rel > tolerance) ++report.failed;
      if (rel > report.worst_relative) {
        report.worst_relative = rel;
        report.worst_name = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace oracle
