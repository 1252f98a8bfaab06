#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace pimppi {

/// Control channels, in the order used by every flattened vector in the library.
enum class Channel : int { Speed = 0, Roll = 1, Pitch = 2 };
inline constexpr int kNumChannels = 3;
inline constexpr std::array<const char*, kNumChannels> kChannelNames{"v", "phi", "theta"};

/// K x 3 control sequence; columns are (v, phi, theta). Column-major storage
/// makes the flat view channel-major: [v_0..v_{K-1}, phi_0.., theta_0..].
using ControlSequence = Eigen::Matrix<double, Eigen::Dynamic, kNumChannels>;

inline Eigen::Map<Eigen::VectorXd> flat(ControlSequence& u) {
  return {u.data(), u.size()};
}
inline Eigen::Map<const Eigen::VectorXd> flat(const ControlSequence& u) {
  return {u.data(), u.size()};
}
inline ControlSequence unflatten(const Eigen::Ref<const Eigen::VectorXd>& z, Eigen::Index K) {
  ControlSequence u(K, kNumChannels);
  flat(u) = z;
  return u;
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace pimppi
