#include "promptrestore/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include <Eigen/Dense>

namespace promptrestore {

double psnr(const Image& a, const Image& b, double peak) {
  require_same_shape(a, b, "psnr");
  const auto va = a.values(), vb = b.values();
  double sum = 0.0;
  for (size_t i = 0; i < va.size(); ++i) {
    const double d = static_cast<double>(va[i]) - vb[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(va.size());
  if (mse == 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(peak * peak / mse);
}

namespace {

constexpr int kWindow = 11;
constexpr double kWindowSigma = 1.5;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    w[i] = std::exp(-d * d / (2.0 * kWindowSigma * kWindowSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Separable "valid" filtering of a row-major plane.
std::vector<double> filter_valid(const std::vector<double>& in, int h, int w) {
  static const auto win = gaussian_window();
  const int ow = w - kWindow + 1, oh = h - kWindow + 1;
  std::vector<double> rows(static_cast<size_t>(h) * ow);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += win[k] * in[static_cast<size_t>(y) * w + x + k];
      rows[static_cast<size_t>(y) * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += win[k] * rows[static_cast<size_t>(y + k) * ow + x];
      out[static_cast<size_t>(y) * ow + x] = acc;
    }
  }
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  const int h = a.height(), w = a.width();
  if (std::min(h, w) < kWindow) throw InvalidArgument("ssim needs images of at least 11x11");
  if (a == b) return 1.0;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  double total = 0.0;
  for (int c = 0; c < Image::kChannels; ++c) {
    const auto pa = a.plane(c), pb = b.plane(c);
    std::vector<double> x(pa.begin(), pa.end()), y(pb.begin(), pb.end());
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w), my = filter_valid(y, h, w);
    const auto sxx = filter_valid(xx, h, w), syy = filter_valid(yy, h, w), sxy = filter_valid(xy, h, w);
    double sum = 0.0;
    for (size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      sum += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += sum / static_cast<double>(mx.size());
  }
  return total / Image::kChannels;
}

nlohmann::json EvalRecord::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["dataset"] = dataset;
  if (std::isinf(psnr)) {
    j["psnr"] = "inf";
  } else {
    j["psnr"] = psnr;
  }
  j["ssim"] = ssim;
  j["n_images"] = n_images;
  return j;
}

EvalRecord summarize(std::string task, std::string dataset, std::span<const double> psnrs,
                     std::span<const double> ssims) {
  if (psnrs.empty() || psnrs.size() != ssims.size()) {
    throw InvalidArgument("evaluation needs at least one image and matching score lists");
  }
  EvalRecord rec{std::move(task), std::move(dataset), 0.0, 0.0, static_cast<int>(psnrs.size())};
  rec.psnr = std::accumulate(psnrs.begin(), psnrs.end(), 0.0) / psnrs.size();
  rec.ssim = std::accumulate(ssims.begin(), ssims.end(), 0.0) / ssims.size();
  return rec;
}

double cluster_score(const std::vector<std::vector<double>>& embeddings, const std::vector<int>& labels) {
  if (embeddings.size() != labels.size()) throw InvalidArgument("one label per embedding required");
  std::map<int, int> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw InvalidArgument("silhouette needs at least two labels");
  for (const auto& [label, n] : sizes) {
    if (n < 2) throw InvalidArgument("silhouette needs at least two points per label");
  }
  const size_t n = embeddings.size();
  auto dist = [&](size_t i, size_t j) {
    double s = 0.0;
    for (size_t k = 0; k < embeddings[i].size(); ++k) {
      const double d = embeddings[i][k] - embeddings[j][k];
      s += d * d;
    }
    return std::sqrt(s);
  };
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    std::map<int, double> sums;
    for (size_t j = 0; j < n; ++j) {
      if (j != i) sums[labels[j]] += dist(i, j);
    }
    const double a = sums[labels[i]] / (sizes[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, count] : sizes) {
      if (label != labels[i]) b = std::min(b, sums[label] / count);
    }
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

namespace {

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.empty()) return {};
  const auto dim = static_cast<Eigen::Index>(embeddings.front().size());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(embeddings.size()), dim);
  for (size_t i = 0; i < embeddings.size(); ++i) {
    if (static_cast<Eigen::Index>(embeddings[i].size()) != dim) {
      throw InvalidArgument("embeddings must share one dimensionality");
    }
    for (Eigen::Index k = 0; k < dim; ++k) m(static_cast<Eigen::Index>(i), k) = embeddings[i][k];
  }
  return m;
}

}  // namespace

PcaProjection PcaProjection::fit(const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.empty()) throw InvalidArgument("PCA needs at least one embedding");
  Eigen::MatrixXd m = to_matrix(embeddings);
  const Eigen::RowVectorXd mean = m.colwise().mean();
  m.rowwise() -= mean;
  const Eigen::MatrixXd cov = (m.transpose() * m) / std::max<Eigen::Index>(1, m.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const auto& vecs = solver.eigenvectors();  // ascending eigenvalues
  const Eigen::Index d = cov.rows();
  PcaProjection out;
  out.mean.assign(mean.data(), mean.data() + d);
  for (int axis = 0; axis < 2; ++axis) {
    Eigen::VectorXd v = d - 1 - axis >= 0 ? Eigen::VectorXd(vecs.col(d - 1 - axis)) : Eigen::VectorXd::Zero(d);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    out.axes[axis].assign(v.data(), v.data() + d);
  }
  return out;
}

Point2 PcaProjection::apply(const std::vector<double>& embedding) const {
  if (embedding.size() != mean.size()) throw InvalidArgument("embedding width does not match the projection");
  Point2 p;
  for (size_t k = 0; k < mean.size(); ++k) {
    const double centered = embedding[k] - mean[k];
    p.x += centered * axes[0][k];
    p.y += centered * axes[1][k];
  }
  return p;
}

std::vector<Point2> project_2d(const std::vector<std::vector<double>>& embeddings) {
  if (embeddings.empty()) return {};
  const auto pca = PcaProjection::fit(embeddings);
  std::vector<Point2> out;
  out.reserve(embeddings.size());
  for (const auto& e : embeddings) out.push_back(pca.apply(e));
  return out;
}

std::vector<Point2> project_tsne(const std::vector<std::vector<double>>& embeddings, double perplexity,
                                 int iterations, uint64_t seed) {
  const Eigen::MatrixXd m = to_matrix(embeddings);
  const Eigen::Index n = m.rows();
  if (n < 3) throw InvalidArgument("t-SNE needs at least 3 points");
  perplexity = std::min(perplexity, (n - 1) / 3.0);

  Eigen::MatrixXd d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) d2(i, j) = (m.row(i) - m.row(j)).squaredNorm();
  }
  // Conditional affinities with per-point bandwidth from binary search on entropy.
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  const double target = std::log(perplexity);
  for (Eigen::Index i = 0; i < n; ++i) {
    double lo = 0.0, hi = std::numeric_limits<double>::infinity(), beta = 1.0;
    for (int iter = 0; iter < 64; ++iter) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double v = std::exp(-beta * d2(i, j));
        p(i, j) = v;
        sum += v;
        weighted += v * d2(i, j);
      }
      sum = std::max(sum, 1e-300);
      const double entropy = std::log(sum) + beta * weighted / sum;
      for (Eigen::Index j = 0; j < n; ++j) p(i, j) /= sum;
      if (std::abs(entropy - target) < 1e-5) break;
      if (entropy > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  Eigen::MatrixXd joint = (p + p.transpose()) / (2.0 * n);
  joint = joint.cwiseMax(1e-12);

  Rng rng(seed);
  Eigen::MatrixXd y(n, 2), velocity = Eigen::MatrixXd::Zero(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i, 0) = 1e-4 * standard_normal(rng);
    y(i, 1) = 1e-4 * standard_normal(rng);
  }
  const double learning_rate = std::max(10.0, n / 12.0);
  for (int it = 0; it < iterations; ++it) {
    const double exaggeration = it < 100 ? 12.0 : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    Eigen::MatrixXd num(n, n);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
        total += num(i, j);
      }
    }
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        const double coeff = 4.0 * (exaggeration * joint(i, j) - num(i, j) / total) * num(i, j);
        grad.row(i) += coeff * (y.row(i) - y.row(j));
      }
    }
    velocity = momentum * velocity - learning_rate * grad;
    y += velocity;
    y.rowwise() -= y.colwise().mean();
  }
  std::vector<Point2> out(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out[static_cast<size_t>(i)] = {y(i, 0), y(i, 1)};
  return out;
}

std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> widths(header.size());
  for (size_t c = 0; c < header.size(); ++c) widths[c] = header[c].size();
  for (const auto& row : rows) {
    for (size_t c = 0; c < row.size() && c < widths.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (size_t c = 0; c < widths.size(); ++c) {
      const std::string cell = c < cells.size() ? cells[c] : "";
      out += (c == 0 ? "" : " | ") + cell + std::string(widths[c] - cell.size(), ' ');
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out + "\n";
  };
  std::string out = line(header);
  size_t total = 0;
  for (size_t w : widths) total += w;
  out += std::string(total + 3 * (widths.size() - 1), '-') + "\n";
  for (const auto& row : rows) out += line(row);
  return out;
}

std::string format_score(double psnr_db, double ssim_value) {
  char buf[64];
  if (std::isinf(psnr_db)) {
    std::snprintf(buf, sizeof(buf), "inf/%.3f", ssim_value);
  } else {
    std::snprintf(buf, sizeof(buf), "%.2f/%.3f", psnr_db, ssim_value);
  }
  return buf;
}

}  // namespace promptrestore
