// Reference computations for tests, written with plain loops and normal
// equations so that they share no code path with the library.
#ifndef SAFELABEL_TEST_ORACLE_HPP
#define SAFELABEL_TEST_ORACLE_HPP

#include <cmath>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;
using Vec = std::vector<double>;

// Gauss-Jordan with partial pivoting.
inline Vec solve(Mat a, Vec b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  for (std::size_t c = 0; c < n; ++c) b[c] /= a[c][c];
  return b;
}

inline Mat inverse(const Mat& a) {
  const std::size_t n = a.size();
  Mat out(n, Vec(n));
  for (std::size_t j = 0; j < n; ++j) {
    Vec e(n, 0.0);
    e[j] = 1.0;
    const auto col = solve(a, e);
    for (std::size_t i = 0; i < n; ++i) out[i][j] = col[i];
  }
  return out;
}

inline Mat xtx(const Mat& x) {
  const std::size_t k = x.front().size();
  Mat m(k, Vec(k, 0.0));
  for (const auto& row : x)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) m[i][j] += row[i] * row[j];
  return m;
}

inline Vec xty(const Mat& x, const Vec& y) {
  Vec v(x.front().size(), 0.0);
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += x[r][i] * y[r];
  return v;
}

inline Vec ols(const Mat& x, const Vec& y) { return solve(xtx(x), xty(x, y)); }

inline Mat hc1(const Mat& x, const Vec& y) {
  const auto b = ols(x, y);
  const std::size_t n = x.size(), k = b.size();
  const auto inv = inverse(xtx(x));
  Mat meat(k, Vec(k, 0.0));
  for (std::size_t r = 0; r < n; ++r) {
    double e = y[r];
    for (std::size_t i = 0; i < k; ++i) e -= x[r][i] * b[i];
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) meat[i][j] += e * e * x[r][i] * x[r][j];
  }
  Mat out(k, Vec(k, 0.0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t c = 0; c < k; ++c) out[i][j] += inv[i][a] * meat[a][c] * inv[c][j];
  for (auto& row : out)
    for (auto& v : row) v *= double(n) / double(n - k);
  return out;
}

inline double mean(const Vec& x) {
  double s = 0;
  for (double v : x) s += v;
  return s / double(x.size());
}

inline double var(const Vec& x) {
  const double m = mean(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / double(x.size() - 1);
}

// Product of centered series.
inline Vec centered_product(const Vec& a, const Vec& b) {
  const double ma = mean(a), mb = mean(b);
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] - ma) * (b[i] - mb);
  return out;
}

inline double mean_square_dev(const Vec& x) {
  const double m = mean(x);
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / double(x.size());
}

}  // namespace oracle

#endif
