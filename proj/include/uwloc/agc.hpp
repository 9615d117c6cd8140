#pragma once

// Adaptive gain control: a single input-dependent scalar gain pulling the
// energy per element of a tensor toward a target level.
//
//   E = mean(x^2)
//   g = (e_target / (E + eps) - 1) * alpha + 1
//   y = g * x
//
// There is no clamp on g. A zero input yields a huge gain but y stays zero.

#include "uwloc/error.hpp"
#include "uwloc/types.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace uwloc {

struct FeaturePair;
struct LabeledSegment;

struct AgcParams {
  double e_target = 1.0;
  double alpha = 0.2;
  static constexpr double epsilon = 1e-6;
};

inline void validate(const AgcParams& p) {
  if (!(p.e_target > 0.0)) throw usage_error("agc.e_target must be positive");
  if (!(p.alpha > 0.0 && p.alpha <= 1.0)) throw usage_error("agc.alpha must lie in (0, 1]");
}

/// Where the gain layer sits in the pipeline.
enum class AgcMode { features, waveform, off };

AgcMode parse_agc_mode(const std::string& text);
std::string to_string(AgcMode mode);

template <typename Derived>
double energy(const Eigen::DenseBase<Derived>& x) {
  if (x.size() == 0) throw data_error("energy of an empty tensor");
  double sum = 0.0;
  for (Index j = 0; j < x.cols(); ++j) {
    for (Index i = 0; i < x.rows(); ++i) {
      const double v = static_cast<double>(x(i, j));
      sum += v * v;
    }
  }
  return sum / static_cast<double>(x.size());
}

inline double agc_gain(double e, const AgcParams& p) {
  return (p.e_target / (e + AgcParams::epsilon) - 1.0) * p.alpha + 1.0;
}

/// Returns (y, gain).
template <typename Derived>
std::pair<typename Derived::PlainObject, double> agc_forward(const Eigen::DenseBase<Derived>& x,
                                                             const AgcParams& p) {
  using Scalar = typename Derived::Scalar;
  if (!x.derived().allFinite()) throw numeric_error("agc: non-finite input");
  const double g = agc_gain(energy(x), p);
  typename Derived::PlainObject y = x.derived() * static_cast<Scalar>(g);
  if (!std::isfinite(g) || !y.allFinite()) throw numeric_error("agc: non-finite output");
  return {std::move(y), g};
}

/// Vector-Jacobian product of agc_forward:
///   dL/dx_i = g * gy_i + (sum_j gy_j x_j) * g'(E) * 2 x_i / N,
///   g'(E) = -alpha * e_target / (E + eps)^2.
template <typename DerivedX, typename DerivedG>
typename DerivedX::PlainObject agc_backward(const Eigen::DenseBase<DerivedX>& x, const AgcParams& p,
                                            const Eigen::DenseBase<DerivedG>& grad_y) {
  using Scalar = typename DerivedX::Scalar;
  if (x.rows() != grad_y.rows() || x.cols() != grad_y.cols()) {
    throw data_error("agc_backward: shape mismatch between x and grad_y");
  }
  const double e = energy(x);
  const double g = agc_gain(e, p);
  const double denom = e + AgcParams::epsilon;
  const double g_prime = -p.alpha * p.e_target / (denom * denom);
  double projection = 0.0;
  for (Index j = 0; j < x.cols(); ++j) {
    for (Index i = 0; i < x.rows(); ++i) {
      projection += static_cast<double>(grad_y(i, j)) * static_cast<double>(x(i, j));
    }
  }
  const double coupling = projection * g_prime * 2.0 / static_cast<double>(x.size());
  typename DerivedX::PlainObject out =
      grad_y.derived().template cast<Scalar>() * static_cast<Scalar>(g) +
      x.derived() * static_cast<Scalar>(coupling);
  return out;
}

/// Applies the gain separately to the log-mel and GCC tensors of one segment.
void apply_agc(FeaturePair& features, const AgcParams& p);

/// Applies the gain to the raw multi-channel waveform of one segment.
void apply_agc(LabeledSegment& segment, const AgcParams& p);

}  // namespace uwloc
