#pragma once

// Fixed-step RK4 helpers over half-grid sampled coefficients.

#include <cstddef>

namespace beliefroad::detail {

/// Coefficient position within one RK4 step.
enum class Stage { kStart, kMid, kEnd };

/// One classical RK4 step. `rhs(y, stage)` evaluates the derivative with
/// coefficients taken at the start, midpoint or end of the interval.
template <typename State, typename Rhs>
State rk4_step(const State& y, double h, Rhs&& rhs) {
  const State k1 = rhs(y, Stage::kStart);
  const State k2 = rhs(State(y + (0.5 * h) * k1), Stage::kMid);
  const State k3 = rhs(State(y + (0.5 * h) * k2), Stage::kMid);
  const State k4 = rhs(State(y + h * k3), Stage::kEnd);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// Cubic Hermite value at the middle of an interval of length h.
template <typename State>
State hermite_mid(const State& y0, const State& y1, const State& dy0, const State& dy1, double h) {
  return 0.5 * (y0 + y1) + (h / 8.0) * (dy0 - dy1);
}

/// Half-grid sample index used by `stage` of interval i.
inline std::size_t sample_index(std::size_t interval, Stage stage) {
  switch (stage) {
    case Stage::kStart:
      return 2 * interval;
    case Stage::kMid:
      return 2 * interval + 1;
    case Stage::kEnd:
      break;
  }
  return 2 * interval + 2;
}

}  // namespace beliefroad::detail
