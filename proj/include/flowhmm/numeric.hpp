#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowhmm {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Shared model floors: variances never collapse below kVarianceFloor, and a
// mixture component (or state) whose pooled responsibility falls below
// kResponsibilityFloor keeps its previous parameters instead of updating
// from numerical dust.
inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kResponsibilityFloor = 1e-8;

/// log(sum_i exp(v_i)) with max shift. All -inf gives -inf; empty input is
/// an error rather than a silent -inf.
inline double log_sum_exp(const double* v, std::size_t n) {
  if (n == 0) throw std::invalid_argument("log_sum_exp: empty input");
  double m = kNegInf;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, v[i]);
  if (m == kNegInf) return kNegInf;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::exp(v[i] - m);
  return m + std::log(acc);
}

inline double log_sum_exp(const std::vector<double>& v) { return log_sum_exp(v.data(), v.size()); }

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/// Max relative error between an analytic gradient and central differences,
/// elementwise |fd - g| / max(1, |g|). Non-finite function values during
/// probing are an error that names the offending parameter index.
inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         std::vector<double> params, const std::vector<double>& grad,
                         double eps = 1e-5) {
  if (params.size() != grad.size())
    throw std::invalid_argument("grad_check: gradient size does not match parameter size");
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double p0 = params[i];
    params[i] = p0 + eps;
    const double fp = f(params);
    params[i] = p0 - eps;
    const double fm = f(params);
    params[i] = p0;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("grad_check: non-finite function value probing parameter " +
                               std::to_string(i));
    const double fd = (fp - fm) / (2.0 * eps);
    const double err = std::abs(fd - grad[i]) / std::max(1.0, std::abs(grad[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace flowhmm
