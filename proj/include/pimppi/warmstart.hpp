#pragma once

#include "pimppi/mppi.hpp"

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace pimppi {

// Learned initialization of the projection filter.
//
// Weight file, little-endian:
//   char[8]  "PIMPPIWS"
//   u32      format version (1)
//   u32      input dim I, u32 output dim O
//   f32[I]   feature offsets, f32[I] feature scales (x_norm = (x - offset) / scale)
//   u32      layer count
//   per layer: u32 rows, u32 cols, u32 activation (0 linear, 1 relu),
//              f32[rows * cols] weights (row-major), f32[rows] biases
//   u32      CRC-32 of every preceding byte
//
// Observation: the sampled waypoint sequence nu (3K, channel-major) followed
// by the boundary values ordered (channel, derivative order), 3K + 9 entries.
// Output: nu_bar0 (N entries) then lambda0 (N entries), N the decision
// dimension of the filter.

inline constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr std::uint32_t kSampleLogVersion = 1;

class CorruptFileError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

enum class Activation : std::uint32_t { Linear = 0, Relu = 1 };

struct DenseLayer {
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> weights;  // rows x cols
  Eigen::VectorXf bias;
  Activation activation{Activation::Linear};
};

struct MlpWeights {
  std::vector<float> offset;
  std::vector<float> scale;
  std::vector<DenseLayer> layers;

  int input_dim() const;
  int output_dim() const;
  /// Throws DimensionError when the layer chain or normalization is inconsistent.
  void validate() const;
  /// Forward pass in double precision.
  Eigen::VectorXd forward(const Eigen::Ref<const Eigen::VectorXd>& input) const;

  /// Random network of the given widths with relu hidden layers and a linear
  /// output, unit scales and zero offsets.
  static MlpWeights random(const std::vector<int>& widths, std::uint64_t seed);
  /// Network of the given widths with every weight and bias zero.
  static MlpWeights zeros(const std::vector<int>& widths);
};

void save_weights(const std::string& path, const MlpWeights& weights);
MlpWeights load_weights(const std::string& path);
std::vector<unsigned char> serialize_weights(const MlpWeights& weights);
MlpWeights parse_weights(const std::vector<unsigned char>& bytes);

/// Widths of the default architecture for horizon K and basis size n.
std::vector<int> default_architecture(int K, int n);

/// Checks the network against a filter of decision dimension N and a
/// horizon K. Throws DimensionError.
void check_compatible(const MlpWeights& weights, int K, int decision_dim);

int observation_dim(int K);
Eigen::VectorXd make_observation(const Eigen::Ref<const Eigen::VectorXd>& nu_waypoints,
                                 const BoundaryConditions& bc);

struct WarmStart {
  Eigen::VectorXd nu_bar0;
  Eigen::VectorXd lambda0;
};

WarmStart warm_start(const Eigen::Ref<const Eigen::VectorXd>& observation, const MlpWeights& weights);

// ---------------------------------------------------------------------------
// Initialization strategies

enum class InitKind { Zero, NuPassthrough, Neural, Direct };

const char* to_string(InitKind kind);
InitKind parse_init_kind(const std::string& text);

class ZeroInitializer : public ProjectionInitializer {
 public:
  BatchInit initialize(const Eigen::Ref<const Eigen::MatrixXd>&, const Eigen::Ref<const Eigen::MatrixXd>&,
                       const BoundaryConditions&) const override {
    return {};
  }
  std::string name() const override { return "zero"; }
};

/// nu_bar0 = nu (the filter input), lambda0 = 0.
class PassthroughInitializer : public ProjectionInitializer {
 public:
  BatchInit initialize(const Eigen::Ref<const Eigen::MatrixXd>& nus_waypoint,
                       const Eigen::Ref<const Eigen::MatrixXd>& nus_decision,
                       const BoundaryConditions& bc) const override;
  std::string name() const override { return "nu"; }
};

/// Network prediction of (nu_bar0, lambda0).
class NeuralInitializer : public ProjectionInitializer {
 public:
  explicit NeuralInitializer(std::shared_ptr<const MlpWeights> weights);
  BatchInit initialize(const Eigen::Ref<const Eigen::MatrixXd>& nus_waypoint,
                       const Eigen::Ref<const Eigen::MatrixXd>& nus_decision,
                       const BoundaryConditions& bc) const override;
  std::string name() const override { return "neural"; }

 protected:
  std::shared_ptr<const MlpWeights> weights_;
};

/// Network output used as the solution: no filter iterations.
class DirectInitializer : public NeuralInitializer {
 public:
  using NeuralInitializer::NeuralInitializer;
  int iterations_override() const override { return 0; }
  std::string name() const override { return "direct"; }
};

/// Throws ConfigError when a network-based kind has no weights.
std::shared_ptr<const ProjectionInitializer> make_initializer(InitKind kind,
                                                              std::shared_ptr<const MlpWeights> weights);

// ---------------------------------------------------------------------------
// Sample log for the trainer
//
//   char[8] "PIMPPIDS", u32 version, u32 K, u32 n, u32 observation dim D,
//   u64 row count, then rows of D f32 values.

struct SampleLogHeader {
  std::uint32_t version{kSampleLogVersion};
  std::uint32_t K{0};
  std::uint32_t n{0};
  std::uint32_t dim{0};
  std::uint64_t rows{0};
};

class SampleLogWriter {
 public:
  /// Appends to an existing log with the same header fields, or creates one.
  /// Each row is kept with probability `keep` (1 keeps every row).
  SampleLogWriter(const std::string& path, int K, int n, double keep = 1.0, std::uint64_t seed = 0);
  ~SampleLogWriter();
  SampleLogWriter(const SampleLogWriter&) = delete;
  SampleLogWriter& operator=(const SampleLogWriter&) = delete;

  void append(const Eigen::Ref<const Eigen::VectorXd>& observation);
  std::uint64_t offered() const { return offered_; }
  std::uint64_t rows() const { return header_.rows; }
  /// Writes the row count; also done by the destructor.
  void close();

 private:
  std::fstream file_;
  SampleLogHeader header_;
  double keep_;
  std::uint64_t seed_;
  std::uint64_t offered_{0};
};

struct SampleLog {
  SampleLogHeader header;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows;
};

SampleLog read_sample_log(const std::string& path);

/// Zero initialization that streams every observation to a log.
class LoggingInitializer : public ProjectionInitializer {
 public:
  explicit LoggingInitializer(SampleLogWriter& writer) : writer_(writer) {}
  BatchInit initialize(const Eigen::Ref<const Eigen::MatrixXd>& nus_waypoint,
                       const Eigen::Ref<const Eigen::MatrixXd>& nus_decision,
                       const BoundaryConditions& bc) const override;
  std::string name() const override { return "zero"; }

 private:
  SampleLogWriter& writer_;
};

}  // namespace pimppi
