#pragma once

#include "deso/linalg.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace deso {

namespace shape {

struct Constant {
  double level = 0.0;
  bool operator==(const Constant&) const = default;
};

struct Ramp {
  double level0 = 0.0;
  double slope = 0.0;
  bool operator==(const Ramp&) const = default;
};

struct SineTerm {
  double amplitude = 0.0;
  double omega = 0.0;  // rad/s
  double phase = 0.0;  // rad, at the segment start
  bool operator==(const SineTerm&) const = default;
};

/// offset + sum_k a_k sin(w_k (t - t_start) + phi_k). A single term is the plain sine.
struct Sine {
  double offset = 0.0;
  std::vector<SineTerm> terms;
  bool operator==(const Sine&) const = default;
};

}  // namespace shape

using Shape = std::variant<shape::Constant, shape::Ramp, shape::Sine>;

struct Segment {
  double t_start = 0.0;
  double t_end = std::numeric_limits<double>::infinity();
  Shape shape;
  bool jump = false;  // allow a discontinuity at t_start (explicit step)

  bool contains(double t) const { return t >= t_start && t < t_end; }

  /// k-th time derivative at absolute time t.
  double derivative(double t, int k) const {
    const double tau = t - t_start;
    return std::visit(
        [&](const auto& s) -> double {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, shape::Constant>) {
            return k == 0 ? s.level : 0.0;
          } else if constexpr (std::is_same_v<S, shape::Ramp>) {
            if (k == 0) return s.level0 + s.slope * tau;
            return k == 1 ? s.slope : 0.0;
          } else {
            double v = k == 0 ? s.offset : 0.0;
            for (const auto& term : s.terms) {
              // d^k/dt^k sin(wt+phi) = w^k sin(wt + phi + k pi/2)
              v += term.amplitude * std::pow(term.omega, k) *
                   std::sin(term.omega * tau + term.phase + k * M_PI / 2.0);
            }
            return v;
          }
        },
        shape);
  }

  double value(double t) const { return derivative(t, 0); }

  /// Analytic sup of |d^(k)| over the segment, k in {1, 2}.
  double derivative_bound(int k) const {
    return std::visit(
        [&](const auto& s) -> double {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, shape::Constant>) {
            return 0.0;
          } else if constexpr (std::is_same_v<S, shape::Ramp>) {
            return k == 1 ? std::abs(s.slope) : 0.0;
          } else {
            double b = 0.0;
            for (const auto& term : s.terms) {
              b += std::abs(term.amplitude) * std::pow(std::abs(term.omega), k);
            }
            return b;
          }
        },
        shape);
  }

  bool operator==(const Segment&) const = default;
};

inline Segment constant_segment(double t0, double t1, double level) {
  return Segment{t0, t1, shape::Constant{level}, false};
}
inline Segment ramp_segment(double t0, double t1, double level0, double slope) {
  return Segment{t0, t1, shape::Ramp{level0, slope}, false};
}
inline Segment sine_segment(double t0, double t1, double offset, double amplitude, double omega,
                            double phase = 0.0) {
  return Segment{t0, t1, shape::Sine{offset, {{amplitude, omega, phase}}}, false};
}

struct DerivativeBounds {
  double d1 = 0.0;
  double d2 = 0.0;
};

/// Piecewise schedule, one segment list per channel. Time in seconds.
class SignalProfile {
 public:
  SignalProfile() = default;

  explicit SignalProfile(std::vector<std::vector<Segment>> channels)
      : channels_(std::move(channels)) {
    for (std::size_t c = 0; c < channels_.size(); ++c) validate_channel(c);
  }

  /// Single channel convenience.
  static SignalProfile single(std::vector<Segment> segments) {
    return SignalProfile({std::move(segments)});
  }

  /// Constant values on [0, inf).
  static SignalProfile constant(const Vector& values) {
    std::vector<std::vector<Segment>> ch;
    for (Eigen::Index i = 0; i < values.size(); ++i) {
      ch.push_back({constant_segment(0.0, std::numeric_limits<double>::infinity(), values(i))});
    }
    return SignalProfile(std::move(ch));
  }

  Eigen::Index channels() const { return static_cast<Eigen::Index>(channels_.size()); }
  const std::vector<Segment>& segments(std::size_t channel) const { return channels_.at(channel); }
  const std::vector<std::vector<Segment>>& all_segments() const { return channels_; }

  double t_begin() const {
    double t = -std::numeric_limits<double>::infinity();
    for (const auto& ch : channels_) t = std::max(t, ch.front().t_start);
    return t;
  }
  double t_finish() const {
    double t = std::numeric_limits<double>::infinity();
    for (const auto& ch : channels_) t = std::min(t, ch.back().t_end);
    return t;
  }

  Vector eval(double t) const { return derivative(t, 0); }

  Vector derivative(double t, int k) const {
    Vector out(channels());
    for (std::size_t c = 0; c < channels_.size(); ++c) {
      out(static_cast<Eigen::Index>(c)) = locate(c, t).derivative(t, k);
    }
    return out;
  }

  /// Sup of per-segment analytic bounds over segments touching [t0, t1], combined
  /// across channels with the Euclidean norm.
  DerivativeBounds derivative_bounds(double t0, double t1) const {
    if (!(t1 >= t0)) throw std::invalid_argument("derivative_bounds: empty window");
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t c = 0; c < channels_.size(); ++c) {
      const auto& ch = channels_[c];
      if (t0 < ch.front().t_start || t1 > ch.back().t_end) {
        throw std::out_of_range("derivative_bounds: window not covered by channel " +
                                std::to_string(c));
      }
      double b1 = 0.0, b2 = 0.0;
      for (const auto& seg : ch) {
        const bool touches = (seg.t_start < t1 && seg.t_end > t0) || seg.contains(t0);
        if (!touches) continue;
        b1 = std::max(b1, seg.derivative_bound(1));
        b2 = std::max(b2, seg.derivative_bound(2));
      }
      s1 += b1 * b1;
      s2 += b2 * b2;
    }
    return {std::sqrt(s1), std::sqrt(s2)};
  }

  /// Sorted union of all segment boundaries inside [t0, t1].
  std::vector<double> breakpoints(double t0, double t1) const {
    std::vector<double> out{t0, t1};
    for (const auto& ch : channels_) {
      for (const auto& seg : ch) {
        if (seg.t_start > t0 && seg.t_start < t1) out.push_back(seg.t_start);
      }
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  bool operator==(const SignalProfile&) const = default;

 private:
  const Segment& locate(std::size_t c, double t) const {
    const auto& ch = channels_[c];
    for (const auto& seg : ch) {
      if (seg.contains(t)) return seg;
    }
    if (t == ch.back().t_end) return ch.back();
    throw std::out_of_range("signal evaluated at t=" + std::to_string(t) +
                            " outside all segments of channel " + std::to_string(c));
  }

  void validate_channel(std::size_t c) const {
    const auto& ch = channels_[c];
    const std::string where = "channel " + std::to_string(c);
    if (ch.empty()) throw std::invalid_argument(where + " has no segments");
    for (std::size_t i = 0; i < ch.size(); ++i) {
      const auto& seg = ch[i];
      if (!(seg.t_end > seg.t_start)) {
        throw std::invalid_argument(where + ": segment " + std::to_string(i) +
                                    " has t_end <= t_start");
      }
      if (i == 0) continue;
      const auto& prev = ch[i - 1];
      if (std::abs(prev.t_end - seg.t_start) > 1e-12 * (1.0 + std::abs(seg.t_start))) {
        throw std::invalid_argument(where + ": segments " + std::to_string(i - 1) + " and " +
                                    std::to_string(i) + " are not contiguous");
      }
      if (!seg.jump) {
        const double left = prev.derivative(prev.t_end, 0);
        const double right = seg.value(seg.t_start);
        if (std::abs(left - right) > 1e-9 * (1.0 + std::abs(left))) {
          throw std::invalid_argument(where + ": discontinuity at t=" +
                                      std::to_string(seg.t_start) + " (" + std::to_string(left) +
                                      " -> " + std::to_string(right) +
                                      "); mark the segment as a jump if intended");
        }
      }
    }
  }

  std::vector<std::vector<Segment>> channels_;
};

using DisturbanceProfile = SignalProfile;

// ---------------------------------------------------------------------------

enum class NoiseDistribution { Uniform, Gaussian };

struct NoiseSpec {
  bool enabled = false;
  double relative_amplitude = 0.0;  // fraction of the running max |y_i|
  std::uint64_t seed = 1;
  NoiseDistribution distribution = NoiseDistribution::Uniform;

  void validate() const {
    if (!(relative_amplitude >= 0.0 && relative_amplitude <= 1.0)) {
      throw std::invalid_argument("noise relative_amplitude must lie in [0, 1]");
    }
  }

  bool operator==(const NoiseSpec&) const = default;
};

/// Additive measurement noise scaled per channel by the running max of |y_i|.
/// Uniform noise lies in [-a, a]; Gaussian noise has standard deviation a.
class NoiseGenerator {
 public:
  NoiseGenerator(NoiseSpec spec, Eigen::Index channels)
      : spec_(spec), rng_(spec.seed), running_max_(Vector::Zero(channels)) {
    spec_.validate();
  }

  Vector apply(const Vector& y) {
    running_max_ = running_max_.cwiseMax(y.cwiseAbs());
    if (!spec_.enabled || spec_.relative_amplitude == 0.0) return y;
    Vector out = y;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double a = spec_.relative_amplitude * running_max_(i);
      out(i) += a * draw();
    }
    return out;
  }

 private:
  double draw() {
    if (spec_.distribution == NoiseDistribution::Uniform) {
      return std::uniform_real_distribution<double>(-1.0, 1.0)(rng_);
    }
    return std::normal_distribution<double>(0.0, 1.0)(rng_);
  }

  NoiseSpec spec_;
  std::mt19937_64 rng_;
  Vector running_max_;
};

inline Vector apply_noise(const Vector& y, NoiseGenerator& generator) {
  return generator.apply(y);
}

}  // namespace deso
