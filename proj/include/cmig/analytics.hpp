#pragma once

// Training-curve statistics: least-squares trend, Pearson correlation and
// late-window volatility (std and coefficient of variation over the final
// ceil(30%) of points).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cmig::analytics {

struct InsufficientData : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Point {
  double step = 0.0;
  double value = 0.0;
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  std::optional<double> r2;  // absent when the values have zero variance
};

inline constexpr double kLateFraction = 0.3;

inline double mean(std::span<const double> v) {
  if (v.empty()) throw InsufficientData("mean of empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Population standard deviation.
inline double pstdev(std::span<const double> v) {
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

inline LinearFit linear_fit(std::span<const Point> series) {
  if (series.size() < 2) throw InsufficientData("linear fit needs at least 2 points");
  const double n = static_cast<double>(series.size());
  double mx = 0.0;
  double my = 0.0;
  for (const auto& p : series) {
    mx += p.step;
    my += p.value;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (const auto& p : series) {
    const double dx = p.step - mx;
    const double dy = p.value - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0.0) throw InsufficientData("linear fit needs at least 2 distinct steps");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  // With an intercept, R^2 = 1 - SS_res / SS_tot = Sxy^2 / (Sxx * Syy).
  if (syy > 0.0) f.r2 = (sxy * sxy) / (sxx * syy);
  return f;
}

/// Pearson r of two equally indexed samples; absent if either is constant.
inline std::optional<double> pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson_r needs equally sized samples");
  if (x.size() < 2) throw InsufficientData("pearson_r needs at least 2 points");
  const double mx = mean(x);
  const double my = mean(y);
  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  const double r = sxy / std::sqrt(sxx * syy);
  return std::max(-1.0, std::min(1.0, r));
}

/// Number of trailing points in the late window: ceil(fraction * n).
inline std::size_t late_window_size(std::size_t n, double fraction = kLateFraction) {
  // Guard against 0.3 * n landing a hair above an integer.
  const double raw = fraction * static_cast<double>(n);
  const double rounded = std::round(raw);
  const double w = std::fabs(raw - rounded) < 1e-9 ? rounded : std::ceil(raw);
  return static_cast<std::size_t>(w);
}

struct SeriesSummary {
  LinearFit fit;
  std::optional<double> pearson;  // against the paired series, when given
  std::size_t late_points = 0;
  double late_mean = 0.0;
  double late_std = 0.0;
  std::optional<double> cv;  // late_std / late_mean; absent when the mean is 0
};

inline SeriesSummary analyze(std::span<const Point> series, std::span<const Point> paired = {}) {
  if (series.size() < 2) throw InsufficientData("analytics need at least 2 points");
  SeriesSummary s;
  s.fit = linear_fit(series);

  std::vector<double> values;
  values.reserve(series.size());
  for (const auto& p : series) values.push_back(p.value);

  if (!paired.empty()) {
    std::vector<double> other;
    other.reserve(paired.size());
    for (const auto& p : paired) other.push_back(p.value);
    s.pearson = pearson_r(values, other);
  }

  s.late_points = late_window_size(values.size());
  const std::span<const double> late(values.data() + values.size() - s.late_points, s.late_points);
  s.late_mean = mean(late);
  s.late_std = pstdev(late);
  if (s.late_mean != 0.0) s.cv = s.late_std / s.late_mean;
  return s;
}

}  // namespace cmig::analytics
