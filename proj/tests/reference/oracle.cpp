#include "oracle.hpp"

#include <algorithm>
#include <stdexcept>

namespace oracle {

Map conv2d(const Map& x, const Conv& conv) {
  if (x.c != conv.in) throw std::invalid_argument("oracle conv: channel mismatch");
  const int in_per_group = conv.in / conv.groups;
  const int out_per_group = conv.out / conv.groups;
  const int pad = conv.k / 2;
  Map y(conv.out, x.h, x.w);
  for (int o = 0; o < conv.out; ++o) {
    const int g = o / out_per_group;
    for (int py = 0; py < x.h; ++py) {
      for (int px = 0; px < x.w; ++px) {
        double acc = conv.b.empty() ? 0.0 : conv.b[o];
        for (int i = 0; i < in_per_group; ++i) {
          const int ic = g * in_per_group + i;
          for (int ky = 0; ky < conv.k; ++ky) {
            for (int kx = 0; kx < conv.k; ++kx) {
              const int sy = py + ky - pad;
              const int sx = px + kx - pad;
              if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
              const double wv = conv.w[((static_cast<size_t>(o) * in_per_group + i) * conv.k + ky) * conv.k + kx];
              acc += wv * x.at(ic, sy, sx);
            }
          }
        }
        y.at(o, py, px) = acc;
      }
    }
  }
  return y;
}

Map layer_norm_channels(const Map& x, const std::vector<double>& weight, double eps) {
  Map y(x.c, x.h, x.w);
  for (int py = 0; py < x.h; ++py) {
    for (int px = 0; px < x.w; ++px) {
      double mean = 0.0;
      for (int c = 0; c < x.c; ++c) mean += x.at(c, py, px);
      mean /= x.c;
      double var = 0.0;
      for (int c = 0; c < x.c; ++c) var += (x.at(c, py, px) - mean) * (x.at(c, py, px) - mean);
      var /= x.c;
      for (int c = 0; c < x.c; ++c) y.at(c, py, px) = (x.at(c, py, px) - mean) / std::sqrt(var + eps) * weight[c];
    }
  }
  return y;
}

std::vector<double> linear(const Linear& l, const std::vector<double>& x) {
  std::vector<double> y(l.out);
  for (int o = 0; o < l.out; ++o) {
    double acc = l.b.empty() ? 0.0 : l.b[o];
    for (int i = 0; i < l.in; ++i) acc += l.w[static_cast<size_t>(o) * l.in + i] * x[i];
    y[o] = acc;
  }
  return y;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

void fuse(const Map& x, const std::vector<double>& z, const Fusion& f, Map& x0, Map& xc) {
  x0 = layer_norm_channels(x, f.ln_weight);
  if (!f.enabled) {
    xc = x0;
    return;
  }
  std::vector<double> pooled(x.c, 0.0);
  for (int c = 0; c < x.c; ++c) {
    for (int py = 0; py < x.h; ++py) {
      for (int px = 0; px < x.w; ++px) pooled[c] += x0.at(c, py, px);
    }
    pooled[c] /= static_cast<double>(x.h) * x.w;
  }
  const int k = static_cast<int>(f.channel_kernel.size());
  std::vector<double> omega(x.c);
  for (int c = 0; c < x.c; ++c) {
    double acc = f.channel_bias;
    for (int t = 0; t < k; ++t) {
      const int src = c + t - k / 2;
      if (src >= 0 && src < x.c) acc += f.channel_kernel[t] * pooled[src];
    }
    omega[c] = sigmoid(acc);
  }
  const auto projected = linear(f.w1, z);
  std::vector<double> xw(x.c);
  for (int c = 0; c < x.c; ++c) xw[c] = omega[c] * projected[c];
  const auto scale = linear(f.w2, xw);
  const auto shift = linear(f.w3, xw);
  xc = Map(x.c, x.h, x.w);
  for (int c = 0; c < x.c; ++c) {
    for (int py = 0; py < x.h; ++py) {
      for (int px = 0; px < x.w; ++px) xc.at(c, py, px) = scale[c] * x0.at(c, py, px) + shift[c];
    }
  }
}

namespace {

struct Projected {
  Map q, k, v;
};

Projected project(const Map& xc, const Attention& a) {
  const Map all = conv2d(conv2d(xc, a.qkv), a.dw);
  Projected p{Map(xc.c, xc.h, xc.w), Map(xc.c, xc.h, xc.w), Map(xc.c, xc.h, xc.w)};
  for (int c = 0; c < xc.c; ++c) {
    for (int py = 0; py < xc.h; ++py) {
      for (int px = 0; px < xc.w; ++px) {
        p.q.at(c, py, px) = all.at(c, py, px);
        p.k.at(c, py, px) = all.at(xc.c + c, py, px);
        p.v.at(c, py, px) = all.at(2 * xc.c + c, py, px);
      }
    }
  }
  return p;
}

double pixel_norm(const Map& m, int c) {
  double ss = 0.0;
  for (int py = 0; py < m.h; ++py) {
    for (int px = 0; px < m.w; ++px) ss += m.at(c, py, px) * m.at(c, py, px);
  }
  return std::max(std::sqrt(ss), 1e-12);
}

}  // namespace

std::vector<std::vector<std::vector<double>>> attention_weights(const Map& xc, const Attention& a) {
  const auto p = project(xc, a);
  const int ch = xc.c / a.heads;
  std::vector<std::vector<std::vector<double>>> weights(a.heads,
                                                        std::vector<std::vector<double>>(ch, std::vector<double>(ch)));
  for (int h = 0; h < a.heads; ++h) {
    for (int j = 0; j < ch; ++j) {
      const int qc = h * ch + j;
      const double qn = pixel_norm(p.q, qc);
      std::vector<double> logits(ch);
      for (int i = 0; i < ch; ++i) {
        const int kc = h * ch + i;
        const double kn = pixel_norm(p.k, kc);
        double dot = 0.0;
        for (int py = 0; py < xc.h; ++py) {
          for (int px = 0; px < xc.w; ++px) dot += (p.q.at(qc, py, px) / qn) * (p.k.at(kc, py, px) / kn);
        }
        logits[i] = dot / a.beta[h];
      }
      const double peak = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (int i = 0; i < ch; ++i) total += std::exp(logits[i] - peak);
      for (int i = 0; i < ch; ++i) weights[h][j][i] = std::exp(logits[i] - peak) / total;
    }
  }
  return weights;
}

Map transposed_attention(const Map& xc, const Map& residual, const Attention& a) {
  const auto p = project(xc, a);
  const auto weights = attention_weights(xc, a);
  const int ch = xc.c / a.heads;
  Map mixed(xc.c, xc.h, xc.w);
  for (int h = 0; h < a.heads; ++h) {
    for (int j = 0; j < ch; ++j) {
      for (int py = 0; py < xc.h; ++py) {
        for (int px = 0; px < xc.w; ++px) {
          double acc = 0.0;
          for (int i = 0; i < ch; ++i) acc += weights[h][j][i] * p.v.at(h * ch + i, py, px);
          mixed.at(h * ch + j, py, px) = acc;
        }
      }
    }
  }
  Map out = conv2d(mixed, a.proj);
  for (size_t n = 0; n < out.v.size(); ++n) out.v[n] += residual.v[n];
  return out;
}

Map imta(const Map& x, const std::vector<double>& z, const Fusion& f, const Attention& a) {
  Map x0, xc;
  fuse(x, z, f, x0, xc);
  return transposed_attention(xc, x, a);
}

Map igfn(const Map& x, const std::vector<double>& z, const Fusion& f, const GatedFfn& g) {
  Map x0, xc;
  fuse(x, z, f, x0, xc);
  const Map gate = conv2d(conv2d(xc, g.gate_in), g.gate_dw);
  const Map value = conv2d(conv2d(xc, g.value_in), g.value_dw);
  Map gated(gate.c, gate.h, gate.w);
  for (size_t n = 0; n < gated.v.size(); ++n) gated.v[n] = gelu(gate.v[n]) * value.v[n];
  Map out = conv2d(gated, g.proj);
  for (size_t n = 0; n < out.v.size(); ++n) out.v[n] += xc.v[n];
  return out;
}

double max_abs_diff(const Map& a, const Map& b) {
  if (a.v.size() != b.v.size()) throw std::invalid_argument("oracle: size mismatch");
  double m = 0.0;
  for (size_t n = 0; n < a.v.size(); ++n) m = std::max(m, std::abs(a.v[n] - b.v[n]));
  return m;
}

}  // namespace oracle
