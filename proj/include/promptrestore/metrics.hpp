#pragma once

#include <array>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptrestore/image.hpp"

namespace promptrestore {

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / MSE) over all RGB samples; +infinity when the images match.
double psnr(const Image& a, const Image& b, double peak = 1.0);

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, valid-region evaluation, data range 1.
double ssim(const Image& a, const Image& b);

struct EvalRecord {
  std::string task;
  std::string dataset;
  double psnr = 0.0;  // mean over images; +inf only if every image matched exactly
  double ssim = 0.0;
  int n_images = 0;

  nlohmann::json to_json() const;
};

/// Averages per-image scores. Infinite PSNR entries are carried as infinity.
EvalRecord summarize(std::string task, std::string dataset, std::span<const double> psnrs,
                     std::span<const double> ssims);

/// Mean silhouette coefficient under Euclidean distance.
/// Requires >= 2 distinct labels and >= 2 points per label.
double cluster_score(const std::vector<std::vector<double>>& embeddings, const std::vector<int>& labels);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Two leading principal axes of a point set, reusable for new points.
struct PcaProjection {
  std::vector<double> mean;
  std::array<std::vector<double>, 2> axes;

  static PcaProjection fit(const std::vector<std::vector<double>>& embeddings);
  Point2 apply(const std::vector<double>& embedding) const;
};

/// Principal-component projection onto the two leading axes (deterministic sign
/// convention: the largest-magnitude loading of each axis is positive).
std::vector<Point2> project_2d(const std::vector<std::vector<double>>& embeddings);

/// Exact t-SNE (Gaussian input affinities at the given perplexity, Student-t output).
std::vector<Point2> project_tsne(const std::vector<std::vector<double>>& embeddings, double perplexity,
                                 int iterations, uint64_t seed);

/// Fixed-width text table: header row then one row per entry.
std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows);

std::string format_score(double psnr, double ssim);

}  // namespace promptrestore
