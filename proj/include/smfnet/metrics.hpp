#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "smfnet/imaging.hpp"
#include "smfnet/losses.hpp"

namespace smfnet {

/// Fused-image quality metrics. Conventions (pinned here):
///  - EN: Shannon entropy of the 256-bin histogram, bits.
///  - SD: population standard deviation on the 0-255 scale.
///  - SF/AG: forward differences on the 0-255 scale.
///  - MI: 256-bin joint-histogram mutual information, log2, summed over
///    (fused,ir) and (fused,vis).
///  - VIF: pixel-domain multi-scale VIF, summed over both sources.
///  - Qabf: Sobel-based edge transfer with symmetric min/max gradient ratio.
///  - SSIM: SSIM(fused,ir) + SSIM(fused,vis) (sum by default, mean optional).
///  - SCD: r(F-V, I) + r(F-I, V) with Pearson r.
struct MetricsReport {
  double en = 0, sd = 0, sf = 0, mi = 0, vif = 0, qabf = 0, ag = 0, ssim = 0, scd = 0;

  static const std::vector<std::string>& names() {
    static const std::vector<std::string> n = {"EN", "SD", "SF", "MI", "VIF",
                                              "Qabf", "AG", "SSIM", "SCD"};
    return n;
  }
  std::vector<double> values() const { return {en, sd, sf, mi, vif, qabf, ag, ssim, scd}; }
};

namespace metrics_detail {

// Minimal double-precision matrix helpers (row-major).
struct Mat {
  int h = 0, w = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0.0) {}
  double& at(int i, int j) { return v[static_cast<std::size_t>(i) * w + j]; }
  double at(int i, int j) const { return v[static_cast<std::size_t>(i) * w + j]; }
};

template <class T>
Mat to255(const Image<T>& img) {
  check(img.channels == Channels::GRAY1, "metrics: grayscale input required");
  Mat m(img.height(), img.width());
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) m.at(i, j) = static_cast<double>(img.data.at(0, 0, i, j)) * 255.0;
  return m;
}

inline double mean(const Mat& m) {
  double s = 0;
  for (double x : m.v) s += x;
  return s / static_cast<double>(m.v.size());
}

inline std::vector<double> hist256(const Mat& m) {
  std::vector<double> h(256, 0.0);
  for (double x : m.v) {
    int b = static_cast<int>(std::lround(x));
    h[static_cast<std::size_t>(std::clamp(b, 0, 255))] += 1.0;
  }
  for (auto& x : h) x /= static_cast<double>(m.v.size());
  return h;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  double va = 0, vb = 0, vab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
    vab += (a[i] - ma) * (b[i] - mb);
  }
  if (va < 1e-12 || vb < 1e-12) return 0.0;
  return vab / std::sqrt(va * vb);
}

inline Mat conv_valid(const Mat& m, const Mat& k) {
  Mat out(m.h - k.h + 1, m.w - k.w + 1);
  for (int i = 0; i < out.h; ++i)
    for (int j = 0; j < out.w; ++j) {
      double s = 0;
      for (int a = 0; a < k.h; ++a)
        for (int b = 0; b < k.w; ++b) s += m.at(i + a, j + b) * k.at(a, b);
      out.at(i, j) = s;
    }
  return out;
}

inline Mat gaussian2d(int n, double sigma) {
  Mat k(n, n);
  int r = n / 2;
  double sum = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double d2 = (i - r) * (i - r) + (j - r) * (j - r);
      k.at(i, j) = std::exp(-d2 / (2 * sigma * sigma));
      sum += k.at(i, j);
    }
  for (auto& x : k.v) x /= sum;
  return k;
}

inline Mat downsample2(const Mat& m) {
  Mat out((m.h + 1) / 2, (m.w + 1) / 2);
  for (int i = 0; i < out.h; ++i)
    for (int j = 0; j < out.w; ++j) out.at(i, j) = m.at(i * 2, j * 2);
  return out;
}

inline void sobel_pair(const Mat& m, Mat& gx, Mat& gy) {
  gx = Mat(m.h, m.w);
  gy = Mat(m.h, m.w);
  static const double kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static const double ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  for (int i = 1; i + 1 < m.h; ++i)
    for (int j = 1; j + 1 < m.w; ++j) {
      double sx = 0, sy = 0;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          sx += kx[a * 3 + b] * m.at(i + a - 1, j + b - 1);
          sy += ky[a * 3 + b] * m.at(i + a - 1, j + b - 1);
        }
      gx.at(i, j) = sx;
      gy.at(i, j) = sy;
    }
}

/// Pixel-domain multi-scale VIF of one (reference, distorted) pair.
inline double vifp(const Mat& ref0, const Mat& dist0, double sigma_nsq = 2.0) {
  Mat ref = ref0, dist = dist0;
  double num = 0, den = 0;
  for (int scale = 1; scale <= 4; ++scale) {
    int n = (1 << (4 - scale + 1)) + 1;  // 17, 9, 5, 3
    Mat win = gaussian2d(n, n / 5.0);
    if (scale > 1) {
      ref = downsample2(conv_valid(ref, win));
      dist = downsample2(conv_valid(dist, win));
    }
    if (ref.h < win.h || ref.w < win.w) break;
    Mat mu1 = conv_valid(ref, win), mu2 = conv_valid(dist, win);
    Mat r2(ref.h, ref.w), d2(ref.h, ref.w), rd(ref.h, ref.w);
    for (std::size_t i = 0; i < ref.v.size(); ++i) {
      r2.v[i] = ref.v[i] * ref.v[i];
      d2.v[i] = dist.v[i] * dist.v[i];
      rd.v[i] = ref.v[i] * dist.v[i];
    }
    Mat s1 = conv_valid(r2, win), s2 = conv_valid(d2, win), s12 = conv_valid(rd, win);
    for (std::size_t i = 0; i < mu1.v.size(); ++i) {
      double sigma1 = std::max(0.0, s1.v[i] - mu1.v[i] * mu1.v[i]);
      double sigma2 = std::max(0.0, s2.v[i] - mu2.v[i] * mu2.v[i]);
      double sigma12 = s12.v[i] - mu1.v[i] * mu2.v[i];
      double g = sigma12 / (sigma1 + 1e-10);
      double sv = sigma2 - g * sigma12;
      if (sigma1 < 1e-10) {
        g = 0;
        sv = sigma2;
        sigma1 = 0;
      }
      if (sigma2 < 1e-10) {
        g = 0;
        sv = 0;
      }
      if (g < 0) {
        sv = sigma2;
        g = 0;
      }
      sv = std::max(sv, 1e-10);
      num += std::log10(1.0 + g * g * sigma1 / (sv + sigma_nsq));
      den += std::log10(1.0 + sigma1 / sigma_nsq);
    }
  }
  return den > 0 ? num / den : 1.0;
}

inline double mutual_information(const Mat& a, const Mat& b) {
  std::vector<double> joint(256 * 256, 0.0);
  std::vector<double> pa(256, 0.0), pb(256, 0.0);
  double n = static_cast<double>(a.v.size());
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    int ia = std::clamp(static_cast<int>(std::lround(a.v[i])), 0, 255);
    int ib = std::clamp(static_cast<int>(std::lround(b.v[i])), 0, 255);
    joint[static_cast<std::size_t>(ia) * 256 + ib] += 1.0;
    pa[ia] += 1.0;
    pb[ib] += 1.0;
  }
  double mi = 0;
  for (int ia = 0; ia < 256; ++ia)
    for (int ib = 0; ib < 256; ++ib) {
      double pj = joint[static_cast<std::size_t>(ia) * 256 + ib];
      if (pj <= 0) continue;
      mi += (pj / n) * std::log2(pj * n / (pa[ia] * pb[ib]));
    }
  return mi;
}

/// Xydeas-Petrovic edge-transfer quality of fused F against source S.
inline void qabf_edge(const Mat& s, const Mat& f, Mat& q) {
  Mat gxs, gys, gxf, gyf;
  sobel_pair(s, gxs, gys);
  sobel_pair(f, gxf, gyf);
  const double tg = 0.9994, kg = -15.0, dg = 0.5;
  const double ta = 0.9879, ka = -22.0, da = 0.8;
  q = Mat(s.h, s.w);
  for (int i = 0; i < s.h; ++i)
    for (int j = 0; j < s.w; ++j) {
      double gs = std::hypot(gxs.at(i, j), gys.at(i, j));
      double gf = std::hypot(gxf.at(i, j), gyf.at(i, j));
      double as = gxs.at(i, j) == 0 ? M_PI / 2 : std::atan(gys.at(i, j) / gxs.at(i, j));
      double af = gxf.at(i, j) == 0 ? M_PI / 2 : std::atan(gyf.at(i, j) / gxf.at(i, j));
      double gr;
      if (gs <= 0 && gf <= 0)
        gr = 0;
      else
        gr = std::min(gs, gf) / std::max(gs, gf);
      double ar = 1.0 - std::abs(as - af) / (M_PI / 2);
      double qg = tg / (1.0 + std::exp(kg * (gr - dg)));
      double qa = ta / (1.0 + std::exp(ka * (ar - da)));
      q.at(i, j) = qg * qa;
    }
}

inline double qabf(const Mat& a, const Mat& b, const Mat& f) {
  Mat qaf, qbf;
  qabf_edge(a, f, qaf);
  qabf_edge(b, f, qbf);
  Mat gxa, gya, gxb, gyb;
  sobel_pair(a, gxa, gya);
  sobel_pair(b, gxb, gyb);
  double num = 0, den = 0;
  for (int i = 0; i < a.h; ++i)
    for (int j = 0; j < a.w; ++j) {
      double wa = std::hypot(gxa.at(i, j), gya.at(i, j));
      double wb = std::hypot(gxb.at(i, j), gyb.at(i, j));
      num += qaf.at(i, j) * wa + qbf.at(i, j) * wb;
      den += wa + wb;
    }
  return den > 0 ? num / den : 0.0;
}

}  // namespace metrics_detail

template <class T>
double entropy(const Image<T>& img) {
  auto h = metrics_detail::hist256(metrics_detail::to255(img));
  double e = 0;
  for (double p : h)
    if (p > 0) e -= p * std::log2(p);
  return e;
}

template <class T>
double ssim_metric(const Image<T>& a, const Image<T>& b) {
  NoGradGuard ng;
  Tensor<double> ta({1, 1, a.height(), a.width()}), tb = ta;
  for (long long i = 0; i < ta.numel(); ++i) {
    ta[i] = static_cast<double>(a.data[i]);
    tb[i] = static_cast<double>(b.data[i]);
  }
  return ssim_value(Var<double>::constant(std::move(ta)), Var<double>::constant(std::move(tb)))
      .item();
}

struct MetricsOptions {
  bool ssim_mean = false;  // default: sum of the two SSIM values
};

template <class T>
MetricsReport evaluate_pair(const Image<T>& fused, const Image<T>& ir, const Image<T>& vis,
                            const MetricsOptions& opt = {}) {
  using namespace metrics_detail;
  check(fused.height() == ir.height() && fused.width() == ir.width() &&
            fused.height() == vis.height() && fused.width() == vis.width(),
        "evaluate_pair: shape mismatch");
  Mat f = to255(fused), a = to255(ir), b = to255(vis);
  MetricsReport r;
  r.en = entropy(fused);
  double mu = mean(f);
  double var = 0;
  for (double x : f.v) var += (x - mu) * (x - mu);
  r.sd = std::sqrt(var / static_cast<double>(f.v.size()));
  {
    double rf = 0, cf = 0;
    long long nr = 0, nc = 0;
    for (int i = 0; i < f.h; ++i)
      for (int j = 1; j < f.w; ++j) {
        double d = f.at(i, j) - f.at(i, j - 1);
        rf += d * d;
        ++nr;
      }
    for (int i = 1; i < f.h; ++i)
      for (int j = 0; j < f.w; ++j) {
        double d = f.at(i, j) - f.at(i - 1, j);
        cf += d * d;
        ++nc;
      }
    r.sf = std::sqrt(rf / nr + cf / nc);
  }
  {
    double s = 0;
    long long n = 0;
    for (int i = 0; i + 1 < f.h; ++i)
      for (int j = 0; j + 1 < f.w; ++j) {
        double dx = f.at(i, j + 1) - f.at(i, j);
        double dy = f.at(i + 1, j) - f.at(i, j);
        s += std::sqrt((dx * dx + dy * dy) / 2.0);
        ++n;
      }
    r.ag = s / n;
  }
  r.mi = mutual_information(f, a) + mutual_information(f, b);
  r.vif = vifp(a, f) + vifp(b, f);
  r.qabf = qabf(a, b, f);
  double s1 = ssim_metric(fused, ir), s2 = ssim_metric(fused, vis);
  r.ssim = opt.ssim_mean ? (s1 + s2) / 2.0 : s1 + s2;
  {
    std::vector<double> fv(f.v.size()), fi(f.v.size());
    for (std::size_t i = 0; i < f.v.size(); ++i) {
      fv[i] = f.v[i] - b.v[i];  // F - V
      fi[i] = f.v[i] - a.v[i];  // F - I
    }
    r.scd = pearson(fv, a.v) + pearson(fi, b.v);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Directory evaluation
// ---------------------------------------------------------------------------

struct MetricsTable {
  std::vector<std::pair<std::string, MetricsReport>> rows;
  std::vector<std::string> errors;  // filenames missing a counterpart
  MetricsReport mean;
  bool empty() const { return rows.empty(); }
};

template <class T>
MetricsTable evaluate_directory(const std::string& fused_dir, const std::string& ir_dir,
                                const std::string& vis_dir, const MetricsOptions& opt = {}) {
  namespace fs = std::filesystem;
  MetricsTable tbl;
  std::vector<std::string> names;
  for (auto& e : fs::directory_iterator(fused_dir))
    if (e.is_regular_file()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  std::vector<double> acc(MetricsReport::names().size(), 0.0);
  for (auto& name : names) {
    fs::path irp = fs::path(ir_dir) / name, visp = fs::path(vis_dir) / name;
    if (!fs::exists(irp) || !fs::exists(visp)) {
      tbl.errors.push_back(name);
      continue;
    }
    auto fused = load_image<T>((fs::path(fused_dir) / name).string(), Channels::GRAY1);
    auto ir = load_image<T>(irp.string(), Channels::GRAY1);
    auto vis = load_image<T>(visp.string(), Channels::GRAY1);
    auto rep = evaluate_pair(fused, ir, vis, opt);
    auto vals = rep.values();
    for (std::size_t i = 0; i < vals.size(); ++i) acc[i] += vals[i];
    tbl.rows.push_back({name, rep});
  }
  if (!tbl.rows.empty()) {
    double n = static_cast<double>(tbl.rows.size());
    MetricsReport m;
    m.en = acc[0] / n;
    m.sd = acc[1] / n;
    m.sf = acc[2] / n;
    m.mi = acc[3] / n;
    m.vif = acc[4] / n;
    m.qabf = acc[5] / n;
    m.ag = acc[6] / n;
    m.ssim = acc[7] / n;
    m.scd = acc[8] / n;
    tbl.mean = m;
  }
  return tbl;
}

inline std::string format_table(const MetricsTable& tbl) {
  std::ostringstream os;
  if (tbl.empty() && tbl.errors.empty()) return "no pairs\n";
  os << std::left << std::setw(24) << "image";
  for (auto& n : MetricsReport::names()) os << std::right << std::setw(9) << n;
  os << "\n";
  auto row = [&](const std::string& name, const MetricsReport& r) {
    os << std::left << std::setw(24) << name;
    for (double v : r.values()) os << std::right << std::setw(9) << std::fixed << std::setprecision(4) << v;
    os << "\n";
  };
  for (auto& [name, r] : tbl.rows) row(name, r);
  if (!tbl.rows.empty()) row("mean", tbl.mean);
  if (!tbl.errors.empty()) {
    os << "errors (missing counterpart, excluded from means):\n";
    for (auto& e : tbl.errors) os << "  " << e << "\n";
  }
  return os.str();
}

inline void write_csv(const MetricsTable& tbl, const std::string& path) {
  std::ofstream os(path);
  check(static_cast<bool>(os), "write_csv: cannot open " + path);
  os << "image";
  for (auto& n : MetricsReport::names()) os << "," << n;
  os << "\n";
  auto row = [&](const std::string& name, const MetricsReport& r) {
    os << name;
    for (double v : r.values()) os << "," << std::setprecision(10) << v;
    os << "\n";
  };
  for (auto& [name, r] : tbl.rows) row(name, r);
  if (!tbl.rows.empty()) row("mean", tbl.mean);
}

}  // namespace smfnet
