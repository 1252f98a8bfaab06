#include "pimppi/warmstart.hpp"

#include <gtest/gtest.h>
#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace pimppi;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "pimppi_tests";
  std::filesystem::create_directories(dir);
  const auto p = dir / (name + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  std::filesystem::remove(p);
  return p.string();
}

void bitwise_equal(const MlpWeights& a, const MlpWeights& b) {
  ASSERT_EQ(a.layers.size(), b.layers.size());
  EXPECT_EQ(0, std::memcmp(a.offset.data(), b.offset.data(), a.offset.size() * 4));
  EXPECT_EQ(0, std::memcmp(a.scale.data(), b.scale.data(), a.scale.size() * 4));
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    ASSERT_EQ(a.layers[l].weights.rows(), b.layers[l].weights.rows());
    ASSERT_EQ(a.layers[l].weights.cols(), b.layers[l].weights.cols());
    EXPECT_EQ(a.layers[l].activation, b.layers[l].activation);
    EXPECT_EQ(0, std::memcmp(a.layers[l].weights.data(), b.layers[l].weights.data(), a.layers[l].weights.size() * 4));
    EXPECT_EQ(0, std::memcmp(a.layers[l].bias.data(), b.layers[l].bias.data(), a.layers[l].bias.size() * 4));
  }
}

void restamp_crc(std::vector<unsigned char>& bytes) {
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
  for (int i = 0; i < 4; ++i) bytes[body + i] = static_cast<unsigned char>(crc >> (8 * i));
}

// Filter with K = 20 and n = 5: decision dimension 15, observation 69.
ProjectionSolver small_solver(const BasisMatrices& B, const BoundaryConditions& bc, SolverOptions o) {
  ConstraintOptions co;
  co.equality_rows = EqualityRows::ForwardDifference;
  return ProjectionSolver(
      build_constraints(DerivativeBounds::fixed_wing_defaults(), bc, Space::Coefficient, &B, 20, 0.2, co), o);
}

}  // namespace

TEST(WeightFile, RoundTripIsBitwise) {
  MlpWeights w = MlpWeights::random({69, 32, 16, 30}, 3);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> U(0.5f, 2.0f);
  for (auto& s : w.scale) s = U(rng);
  for (auto& o : w.offset) o = U(rng) - 1.0f;
  const std::string path = temp_path("roundtrip.bin");
  save_weights(path, w);
  bitwise_equal(w, load_weights(path));
  bitwise_equal(w, parse_weights(serialize_weights(w)));
}

TEST(WeightFile, RejectsDamagedFiles) {
  const std::vector<unsigned char> good = serialize_weights(MlpWeights::random({69, 8, 30}, 4));
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{20}, good.size() / 2, good.size() - 1}) {
    EXPECT_THROW(parse_weights({good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)}), CorruptFileError)
        << cut;
  }
  for (std::size_t at : {std::size_t{3}, std::size_t{12}, good.size() / 2, good.size() - 2}) {
    auto bad = good;
    bad[at] ^= 0x10;
    EXPECT_THROW(parse_weights(bad), CorruptFileError) << at;
  }
  const std::string path = temp_path("truncated.bin");
  {
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(good.data()), 40);
  }
  EXPECT_THROW(load_weights(path), CorruptFileError);
  EXPECT_THROW(load_weights(temp_path("missing.bin")), Error);
}

TEST(WeightFile, RejectsOtherVersions) {
  auto bytes = serialize_weights(MlpWeights::random({69, 8, 30}, 5));
  bytes[8] = 2;  // version field follows the 8-byte magic
  restamp_crc(bytes);
  EXPECT_THROW(parse_weights(bytes), VersionError);
}

TEST(WeightFile, UnknownActivationRejected) {
  auto bytes = serialize_weights(MlpWeights::random({4, 3}, 6));
  // magic, version, I, O, offsets, scales, layer count, rows, cols, activation
  const std::size_t at = 8 + 4 + 8 + 4 * 4 * 2 + 4 + 8;
  bytes[at] = 7;
  restamp_crc(bytes);
  EXPECT_THROW(parse_weights(bytes), CorruptFileError);
}

TEST(Network, DefaultArchitecture) {
  EXPECT_EQ(default_architecture(100, 11), (std::vector<int>{309, 1024, 256, 66}));
  EXPECT_EQ(observation_dim(100), 309);
  const MlpWeights w = MlpWeights::random(default_architecture(100, 11), 1);
  EXPECT_EQ(w.input_dim(), 309);
  EXPECT_EQ(w.output_dim(), 66);
  EXPECT_EQ(w.layers[0].activation, Activation::Relu);
  EXPECT_EQ(w.layers[1].activation, Activation::Relu);
  EXPECT_EQ(w.layers[2].activation, Activation::Linear);
  EXPECT_NO_THROW(check_compatible(w, 100, 33));
}

TEST(Network, DimensionMismatch) {
  EXPECT_THROW(check_compatible(MlpWeights::random({309, 64, 65}, 2), 100, 33), DimensionError);
  EXPECT_THROW(check_compatible(MlpWeights::random({300, 64, 66}, 2), 100, 33), DimensionError);
  MlpWeights broken = MlpWeights::random({10, 8, 4}, 2);
  broken.layers[1].weights.resize(4, 7);
  EXPECT_THROW(broken.validate(), DimensionError);
}

TEST(Network, ZeroWeightsGiveZeroWarmStart) {
  const MlpWeights w = MlpWeights::zeros({69, 16, 30});
  Eigen::VectorXd obs = Eigen::VectorXd::LinSpaced(69, -3, 3);
  const WarmStart ws = warm_start(obs, w);
  EXPECT_EQ(ws.nu_bar0, Eigen::VectorXd::Zero(15));
  EXPECT_EQ(ws.lambda0, Eigen::VectorXd::Zero(15));
}

TEST(Network, DeterministicForward) {
  const MlpWeights w = MlpWeights::random({69, 16, 30}, 8);
  Eigen::VectorXd obs = Eigen::VectorXd::LinSpaced(69, -3, 3);
  const WarmStart a = warm_start(obs, w);
  const WarmStart b = warm_start(obs, w);
  EXPECT_EQ(a.nu_bar0, b.nu_bar0);
  EXPECT_EQ(a.lambda0, b.lambda0);
}

TEST(Network, ForwardMatchesManualEvaluation) {
  MlpWeights w = MlpWeights::random({3, 2, 1}, 9);
  w.offset = {1.0f, 0.0f, -1.0f};
  w.scale = {2.0f, 1.0f, 0.5f};
  const Eigen::Vector3d x(3.0, -1.0, 0.0);
  const Eigen::Vector3d xn((3.0 - 1.0) / 2.0, -1.0, (0.0 + 1.0) / 0.5);
  const Eigen::VectorXd h =
      (w.layers[0].weights.cast<double>() * xn + w.layers[0].bias.cast<double>()).cwiseMax(0.0);
  const double y = (w.layers[1].weights.cast<double>() * h + w.layers[1].bias.cast<double>())(0);
  EXPECT_NEAR(w.forward(x)(0), y, 1e-12);
}

TEST(Observation, Layout) {
  Eigen::VectorXd nu = Eigen::VectorXd::LinSpaced(6, 1, 6);
  BoundaryConditions bc;
  bc.values[0] = {20, 0.5, -0.1};
  bc.values[2] = {0.1, 0.2, 0.3};
  const Eigen::VectorXd obs = make_observation(nu, bc);
  ASSERT_EQ(obs.size(), observation_dim(2));
  EXPECT_EQ(obs.head(6), nu);
  EXPECT_EQ(obs(6), 20);
  EXPECT_EQ(obs(7), 0.5);
  EXPECT_EQ(obs(8), -0.1);
  EXPECT_EQ(obs(14), 0.3);
}

// ---------------------------------------------------------------------------
// Initializers

TEST(Initializers, FactoryAndNames) {
  EXPECT_EQ(parse_init_kind("nu"), InitKind::NuPassthrough);
  EXPECT_EQ(parse_init_kind("direct"), InitKind::Direct);
  EXPECT_THROW(parse_init_kind("magic"), ConfigError);
  EXPECT_EQ(make_initializer(InitKind::Zero, nullptr)->name(), "zero");
  EXPECT_THROW(make_initializer(InitKind::Neural, nullptr), ConfigError);
  EXPECT_THROW(make_initializer(InitKind::Direct, nullptr), ConfigError);
  auto w = std::make_shared<const MlpWeights>(MlpWeights::random({69, 8, 30}, 1));
  EXPECT_EQ(make_initializer(InitKind::Direct, w)->iterations_override(), 0);
  EXPECT_EQ(make_initializer(InitKind::Neural, w)->iterations_override(), -1);
}

TEST(Initializers, PassthroughConvergesFastOnFeasibleInput) {
  const BasisMatrices B = build_basis(20, 5, 3.8);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> U(-1, 1);
  const PassthroughInitializer init;
  for (int t = 0; t < 20; ++t) {
    // Smooth sequences well inside every bound, boundary read off the input.
    ControlSequence u(20, 3);
    const double a = U(rng), b = U(rng);
    for (int k = 0; k < 20; ++k) {
      const double s = 0.2 * k;
      u.row(k) << 20 + 0.5 * std::sin(0.4 * s + a), 0.1 * std::cos(0.3 * s + b), 0.05 * std::sin(0.2 * s);
    }
    const Eigen::VectorXd c = controls_to_stacked(u, B);
    const ControlSequence fit = stacked_to_controls(c, B);
    BoundaryConditions bc;
    for (int ch = 0; ch < 3; ++ch) bc.values[ch] = {fit(0, ch), (fit(1, ch) - fit(0, ch)) / 0.2, 0.0};
    for (SolverOptions o : {SolverOptions{}, SolverOptions{100.0, 1.0, 50}}) {
      const ProjectionSolver solver = small_solver(B, bc, o);
      const Eigen::MatrixXd nus = c.transpose();
      const BatchInit bi = init.initialize(flat(fit).transpose(), nus, bc);
      std::vector<std::vector<double>> hist;
      const Eigen::MatrixXd out = batch_project(nus, solver, bi, 5, &hist);
      EXPECT_LT((out.row(0) - nus.row(0)).lpNorm<Eigen::Infinity>(), 1e-4);
      EXPECT_LT(hist[0].back(), 1e-4);
    }
  }
}

TEST(Initializers, DirectReturnsNetworkOutput) {
  const BasisMatrices B = build_basis(20, 5, 3.8);
  const BoundaryConditions bc = BoundaryConditions::from_control(20, 0, 0);
  const ProjectionSolver solver = small_solver(B, bc, {100.0, 1.0, 50});
  auto w = std::make_shared<const MlpWeights>(MlpWeights::random({69, 16, 30}, 12));
  const auto direct = make_initializer(InitKind::Direct, w);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> N;
  Eigen::MatrixXd wp(4, 60), dec(4, 15);
  for (int i = 0; i < wp.size(); ++i) wp.data()[i] = N(rng);
  for (int i = 0; i < dec.size(); ++i) dec.data()[i] = N(rng);
  const BatchInit bi = direct->initialize(wp, dec, bc);
  const Eigen::MatrixXd out = batch_project(dec, solver, bi, direct->iterations_override());
  EXPECT_EQ(out, bi.nu_bar);
  for (int m = 0; m < 4; ++m) {
    const WarmStart ws = warm_start(make_observation(wp.row(m).transpose(), bc), *w);
    EXPECT_EQ(out.row(m), ws.nu_bar0.transpose());
    EXPECT_EQ(bi.lambda.row(m), ws.lambda0.transpose());
  }
}

TEST(Initializers, ZeroNetworkMatchesZeroInit) {
  const BasisMatrices B = build_basis(20, 5, 3.8);
  const BoundaryConditions bc = BoundaryConditions::from_control(20, 0.1, 0);
  const ProjectionSolver solver = small_solver(B, bc, {100.0, 1.0, 10});
  auto w = std::make_shared<const MlpWeights>(MlpWeights::zeros({69, 16, 30}));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N;
  Eigen::MatrixXd wp(3, 60), dec(3, 15);
  for (int i = 0; i < wp.size(); ++i) wp.data()[i] = N(rng);
  for (int i = 0; i < dec.size(); ++i) dec.data()[i] = 20 + N(rng);
  const Eigen::MatrixXd neural = batch_project(dec, solver, NeuralInitializer(w).initialize(wp, dec, bc));
  EXPECT_LT((neural - batch_project(dec, solver)).cwiseAbs().maxCoeff(), 1e-12);
}

// ---------------------------------------------------------------------------
// Sample log

TEST(SampleLog, HeaderRowsAndAppend) {
  const std::string path = temp_path("samples.bin");
  Eigen::VectorXd row = Eigen::VectorXd::LinSpaced(observation_dim(4), 0, 1);
  {
    SampleLogWriter w(path, 4, 3);
    w.append(row);
    w.append(2 * row);
  }
  SampleLog log = read_sample_log(path);
  EXPECT_EQ(log.header.version, kSampleLogVersion);
  EXPECT_EQ(log.header.K, 4u);
  EXPECT_EQ(log.header.n, 3u);
  EXPECT_EQ(log.header.dim, 21u);
  EXPECT_EQ(log.header.rows, 2u);
  EXPECT_EQ(log.rows.row(1).cast<double>().transpose(), (2 * row).cast<float>().cast<double>());
  {
    SampleLogWriter w(path, 4, 3);
    w.append(3 * row);
  }
  log = read_sample_log(path);
  EXPECT_EQ(log.header.rows, 3u);
  EXPECT_EQ(log.rows(2, 20), 3.0f);
  EXPECT_THROW(SampleLogWriter(path, 5, 3), ConfigError);
  EXPECT_THROW(SampleLogWriter(path, 4, 3, 0.0), ConfigError);
}

TEST(SampleLog, TruncatedLogRejected) {
  const std::string path = temp_path("short.bin");
  {
    SampleLogWriter w(path, 2, 3);
    for (int i = 0; i < 5; ++i) w.append(Eigen::VectorXd::Constant(observation_dim(2), i));
  }
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(read_sample_log(path), CorruptFileError);
}

TEST(SampleLog, SubsamplingKeepsAFraction) {
  const std::string path = temp_path("sub.bin");
  SampleLogWriter w(path, 2, 3, 0.25, 7);
  for (int i = 0; i < 4000; ++i) w.append(Eigen::VectorXd::Constant(observation_dim(2), i));
  w.close();
  EXPECT_EQ(w.offered(), 4000u);
  EXPECT_NEAR(static_cast<double>(w.rows()) / 4000.0, 0.25, 0.03);
  EXPECT_EQ(read_sample_log(path).header.rows, w.rows());
}

TEST(SampleLog, LoggingControllerWritesOneRowPerSample) {
  const std::string path = temp_path("ctl.bin");
  auto run = [&] {
    SampleLogWriter writer(path, 20, 5);
    PiMppiConfig c;
    c.mppi.K = 20;
    c.mppi.M = 8;
    c.n = 5;
    c.mppi.seed = 4;
    c.mppi.noise = NoiseSpec::coefficient(Eigen::Vector3d(20, 2, 2), 5);
    PiMppiController ctl(c, {20, 0, 0}, std::make_shared<LoggingInitializer>(writer));
    struct Zero : CostFunction {
      double running(const State&, const ControlPoint&, int) const override { return 0.0; }
      double terminal(const State&) const override { return 0.0; }
    } cost;
    for (int i = 0; i < 3; ++i) {
      ctl.plan({0, 0, -100, 0}, cost, nullptr);
      ctl.advance();
    }
  };
  run();
  const SampleLog first = read_sample_log(path);
  EXPECT_EQ(first.header.rows, 3u * 8u);
  EXPECT_EQ(first.header.dim, 69u);
  run();
  const SampleLog both = read_sample_log(path);
  ASSERT_EQ(both.header.rows, 48u);
  EXPECT_EQ(both.rows.topRows(24), both.rows.bottomRows(24));
}
