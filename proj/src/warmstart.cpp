#include "pimppi/warmstart.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iterator>
#include <random>

namespace pimppi {

namespace {

constexpr char kWeightMagic[8] = {'P', 'I', 'M', 'P', 'P', 'I', 'W', 'S'};
constexpr char kSampleMagic[8] = {'P', 'I', 'M', 'P', 'P', 'I', 'D', 'S'};

class ByteWriter {
 public:
  void raw(const char* data, std::size_t n) { bytes.insert(bytes.end(), data, data + n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

  std::vector<unsigned char> bytes;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw CorruptFileError("weight file is truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_{0};
};

std::uint32_t crc32_of(const unsigned char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes 32-bit lengths.
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Network

int MlpWeights::input_dim() const {
  return layers.empty() ? static_cast<int>(offset.size()) : static_cast<int>(layers.front().weights.cols());
}

int MlpWeights::output_dim() const {
  return layers.empty() ? 0 : static_cast<int>(layers.back().weights.rows());
}

void MlpWeights::validate() const {
  if (layers.empty()) throw DimensionError("network has no layers");
  const std::size_t in = static_cast<std::size_t>(input_dim());
  if (offset.size() != in || scale.size() != in) {
    throw DimensionError("normalization size differs from the input dimension");
  }
  for (float s : scale) {
    if (!(s != 0.0f) || !std::isfinite(s)) throw DimensionError("feature scales must be finite and nonzero");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const DenseLayer& l = layers[i];
    if (l.weights.rows() < 1 || l.weights.cols() < 1) throw DimensionError("empty layer");
    if (l.bias.size() != l.weights.rows()) throw DimensionError("bias size differs from layer rows");
    if (i > 0 && l.weights.cols() != layers[i - 1].weights.rows()) {
      throw DimensionError("layer " + std::to_string(i) + " does not chain with the previous layer");
    }
    if (l.activation != Activation::Linear && l.activation != Activation::Relu) {
      throw DimensionError("unknown activation");
    }
  }
}

Eigen::VectorXd MlpWeights::forward(const Eigen::Ref<const Eigen::VectorXd>& input) const {
  if (input.size() != input_dim()) {
    throw DimensionError("observation has " + std::to_string(input.size()) + " entries, network expects " +
                         std::to_string(input_dim()));
  }
  Eigen::VectorXd x(input.size());
  for (Eigen::Index i = 0; i < input.size(); ++i) {
    x(i) = (input(i) - static_cast<double>(offset[static_cast<std::size_t>(i)])) /
           static_cast<double>(scale[static_cast<std::size_t>(i)]);
  }
  for (const DenseLayer& l : layers) {
    Eigen::VectorXd y = l.weights.cast<double>() * x + l.bias.cast<double>();
    if (l.activation == Activation::Relu) y = y.cwiseMax(0.0);
    x = std::move(y);
  }
  return x;
}

MlpWeights MlpWeights::random(const std::vector<int>& widths, std::uint64_t seed) {
  if (widths.size() < 2) throw DimensionError("a network needs at least two widths");
  MlpWeights w;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  w.offset.assign(static_cast<std::size_t>(widths[0]), 0.0f);
  w.scale.assign(static_cast<std::size_t>(widths[0]), 1.0f);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    DenseLayer l;
    const float gain = std::sqrt(2.0f / static_cast<float>(widths[i]));
    l.weights.resize(widths[i + 1], widths[i]);
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = gain * normal(rng);
    }
    l.bias.resize(widths[i + 1]);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = 0.1f * normal(rng);
    l.activation = i + 2 < widths.size() ? Activation::Relu : Activation::Linear;
    w.layers.push_back(std::move(l));
  }
  return w;
}

MlpWeights MlpWeights::zeros(const std::vector<int>& widths) {
  if (widths.size() < 2) throw DimensionError("a network needs at least two widths");
  MlpWeights w;
  w.offset.assign(static_cast<std::size_t>(widths[0]), 0.0f);
  w.scale.assign(static_cast<std::size_t>(widths[0]), 1.0f);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    DenseLayer l;
    l.weights.setZero(widths[i + 1], widths[i]);
    l.bias.setZero(widths[i + 1]);
    l.activation = i + 2 < widths.size() ? Activation::Relu : Activation::Linear;
    w.layers.push_back(std::move(l));
  }
  return w;
}

std::vector<unsigned char> serialize_weights(const MlpWeights& weights) {
  weights.validate();
  ByteWriter out;
  out.raw(kWeightMagic, sizeof kWeightMagic);
  out.u32(kWeightFormatVersion);
  out.u32(static_cast<std::uint32_t>(weights.input_dim()));
  out.u32(static_cast<std::uint32_t>(weights.output_dim()));
  for (float v : weights.offset) out.f32(v);
  for (float v : weights.scale) out.f32(v);
  out.u32(static_cast<std::uint32_t>(weights.layers.size()));
  for (const DenseLayer& l : weights.layers) {
    out.u32(static_cast<std::uint32_t>(l.weights.rows()));
    out.u32(static_cast<std::uint32_t>(l.weights.cols()));
    out.u32(static_cast<std::uint32_t>(l.activation));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) out.f32(l.weights(r, c));
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) out.f32(l.bias(r));
  }
  out.u32(crc32_of(out.bytes.data(), out.bytes.size()));
  return out.bytes;
}

MlpWeights parse_weights(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < sizeof kWeightMagic + 8) throw CorruptFileError("weight file is truncated");
  if (std::memcmp(bytes.data(), kWeightMagic, sizeof kWeightMagic) != 0) {
    throw CorruptFileError("not a weight file (bad magic)");
  }
  const std::size_t body = bytes.size() - 4;
  ByteReader trailer(bytes.data() + body, 4);
  if (trailer.u32() != crc32_of(bytes.data(), body)) throw CorruptFileError("weight file checksum mismatch");

  ByteReader in(bytes.data() + sizeof kWeightMagic, body - sizeof kWeightMagic);
  const std::uint32_t version = in.u32();
  if (version != kWeightFormatVersion) {
    throw VersionError("weight file version " + std::to_string(version) + ", expected " +
                       std::to_string(kWeightFormatVersion));
  }
  const std::uint32_t input = in.u32();
  const std::uint32_t output = in.u32();
  if (static_cast<std::uint64_t>(input) * 8 > in.remaining()) throw CorruptFileError("weight file is truncated");
  MlpWeights w;
  w.offset.resize(input);
  w.scale.resize(input);
  for (auto& v : w.offset) v = in.f32();
  for (auto& v : w.scale) v = in.f32();
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    DenseLayer l;
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    const std::uint32_t act = in.u32();
    if (act > 1) throw CorruptFileError("unknown activation tag " + std::to_string(act));
    l.activation = static_cast<Activation>(act);
    const std::uint64_t values = static_cast<std::uint64_t>(rows) * cols + rows;
    if (values * 4 > in.remaining()) throw CorruptFileError("weight file is truncated");
    l.weights.resize(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) l.weights(r, c) = in.f32();
    }
    l.bias.resize(rows);
    for (std::uint32_t r = 0; r < rows; ++r) l.bias(r) = in.f32();
    w.layers.push_back(std::move(l));
  }
  if (in.remaining() != 0) throw CorruptFileError("trailing bytes in weight file");
  w.validate();
  if (static_cast<std::uint32_t>(w.input_dim()) != input || static_cast<std::uint32_t>(w.output_dim()) != output) {
    throw DimensionError("header dimensions differ from the layer chain");
  }
  return w;
}

void save_weights(const std::string& path, const MlpWeights& weights) {
  const std::vector<unsigned char> bytes = serialize_weights(weights);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path + "' failed");
}

MlpWeights load_weights(const std::string& path) { return parse_weights(read_file(path)); }

std::vector<int> default_architecture(int K, int n) {
  return {observation_dim(K), 1024, 256, 2 * kNumChannels * n};
}

void check_compatible(const MlpWeights& weights, int K, int decision_dim) {
  weights.validate();
  if (weights.input_dim() != observation_dim(K)) {
    throw DimensionError("network input " + std::to_string(weights.input_dim()) + " differs from 3K + 9 = " +
                         std::to_string(observation_dim(K)));
  }
  if (weights.output_dim() != 2 * decision_dim) {
    throw DimensionError("network output " + std::to_string(weights.output_dim()) + " differs from 2N = " +
                         std::to_string(2 * decision_dim));
  }
}

int observation_dim(int K) { return kNumChannels * K + kNumChannels * 3; }

Eigen::VectorXd make_observation(const Eigen::Ref<const Eigen::VectorXd>& nu_waypoints,
                                 const BoundaryConditions& bc) {
  if (nu_waypoints.size() % kNumChannels != 0) throw DimensionError("waypoint vector must have 3K entries");
  Eigen::VectorXd obs(nu_waypoints.size() + kNumChannels * 3);
  obs.head(nu_waypoints.size()) = nu_waypoints;
  Eigen::Index i = nu_waypoints.size();
  for (int ch = 0; ch < kNumChannels; ++ch) {
    for (int j = 0; j < 3; ++j) obs(i++) = bc.values[ch][j];
  }
  return obs;
}

WarmStart warm_start(const Eigen::Ref<const Eigen::VectorXd>& observation, const MlpWeights& weights) {
  const Eigen::VectorXd y = weights.forward(observation);
  if (y.size() % 2 != 0) throw DimensionError("network output must have even size");
  const Eigen::Index N = y.size() / 2;
  return {y.head(N), y.tail(N)};
}

// ---------------------------------------------------------------------------
// Initializers

const char* to_string(InitKind kind) {
  switch (kind) {
    case InitKind::Zero: return "zero";
    case InitKind::NuPassthrough: return "nu";
    case InitKind::Neural: return "neural";
    case InitKind::Direct: return "direct";
  }
  return "unknown";
}

InitKind parse_init_kind(const std::string& text) {
  if (text == "zero") return InitKind::Zero;
  if (text == "nu" || text == "nu-passthrough" || text == "nu_passthrough") return InitKind::NuPassthrough;
  if (text == "neural") return InitKind::Neural;
  if (text == "direct") return InitKind::Direct;
  throw ConfigError("unknown init strategy '" + text + "'");
}

BatchInit PassthroughInitializer::initialize(const Eigen::Ref<const Eigen::MatrixXd>&,
                                             const Eigen::Ref<const Eigen::MatrixXd>& nus_decision,
                                             const BoundaryConditions&) const {
  BatchInit init;
  init.nu_bar = nus_decision;
  return init;
}

NeuralInitializer::NeuralInitializer(std::shared_ptr<const MlpWeights> weights) : weights_(std::move(weights)) {
  if (!weights_) throw ConfigError("network initialization needs weights");
  weights_->validate();
}

BatchInit NeuralInitializer::initialize(const Eigen::Ref<const Eigen::MatrixXd>& nus_waypoint,
                                        const Eigen::Ref<const Eigen::MatrixXd>& nus_decision,
                                        const BoundaryConditions& bc) const {
  const Eigen::Index M = nus_waypoint.rows();
  const Eigen::Index N = nus_decision.cols();
  if (weights_->output_dim() != 2 * N) throw DimensionError("network output does not match the filter");
  BatchInit init;
  init.nu_bar.resize(M, N);
  init.lambda.resize(M, N);
#pragma omp parallel for schedule(static)
  for (Eigen::Index m = 0; m < M; ++m) {
    const WarmStart ws = warm_start(make_observation(nus_waypoint.row(m).transpose(), bc), *weights_);
    init.nu_bar.row(m) = ws.nu_bar0.transpose();
    init.lambda.row(m) = ws.lambda0.transpose();
  }
  return init;
}

std::shared_ptr<const ProjectionInitializer> make_initializer(InitKind kind,
                                                              std::shared_ptr<const MlpWeights> weights) {
  switch (kind) {
    case InitKind::Zero: return std::make_shared<ZeroInitializer>();
    case InitKind::NuPassthrough: return std::make_shared<PassthroughInitializer>();
    case InitKind::Neural:
      if (!weights) throw ConfigError("--init neural needs --weights");
      return std::make_shared<NeuralInitializer>(std::move(weights));
    case InitKind::Direct:
      if (!weights) throw ConfigError("--init direct needs --weights");
      return std::make_shared<DirectInitializer>(std::move(weights));
  }
  throw ConfigError("unknown init strategy");
}

// ---------------------------------------------------------------------------
// Sample log

namespace {

constexpr std::streamoff kRowCountOffset = 8 + 4 * 4;
constexpr std::streamoff kSampleHeaderSize = kRowCountOffset + 8;

void write_sample_header(std::fstream& f, const SampleLogHeader& h) {
  ByteWriter w;
  w.raw(kSampleMagic, sizeof kSampleMagic);
  w.u32(h.version);
  w.u32(h.K);
  w.u32(h.n);
  w.u32(h.dim);
  w.u64(h.rows);
  f.seekp(0);
  f.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
}

SampleLogHeader parse_sample_header(const unsigned char* data, std::size_t size) {
  if (size < static_cast<std::size_t>(kSampleHeaderSize)) throw CorruptFileError("sample log is truncated");
  if (std::memcmp(data, kSampleMagic, sizeof kSampleMagic) != 0) throw CorruptFileError("not a sample log");
  ByteReader in(data + sizeof kSampleMagic, size - sizeof kSampleMagic);
  SampleLogHeader h;
  h.version = in.u32();
  if (h.version != kSampleLogVersion) throw VersionError("unsupported sample log version");
  h.K = in.u32();
  h.n = in.u32();
  h.dim = in.u32();
  const std::uint64_t lo = in.u32();
  const std::uint64_t hi = in.u32();
  h.rows = lo | (hi << 32);
  return h;
}

}  // namespace

SampleLogWriter::SampleLogWriter(const std::string& path, int K, int n, double keep, std::uint64_t seed)
    : keep_(keep), seed_(seed) {
  if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("subsample fraction must lie in (0, 1]");
  header_.K = static_cast<std::uint32_t>(K);
  header_.n = static_cast<std::uint32_t>(n);
  header_.dim = static_cast<std::uint32_t>(observation_dim(K));
  const bool exists = std::filesystem::exists(path) && std::filesystem::file_size(path) > 0;
  if (exists) {
    const std::vector<unsigned char> head = [&] {
      std::ifstream in(path, std::ios::binary);
      std::vector<unsigned char> b(static_cast<std::size_t>(kSampleHeaderSize));
      in.read(reinterpret_cast<char*>(b.data()), kSampleHeaderSize);
      b.resize(static_cast<std::size_t>(in.gcount()));
      return b;
    }();
    const SampleLogHeader h = parse_sample_header(head.data(), head.size());
    if (h.K != header_.K || h.n != header_.n || h.dim != header_.dim) {
      throw ConfigError("existing sample log has a different layout");
    }
    const auto expected = static_cast<std::uintmax_t>(kSampleHeaderSize) + h.rows * h.dim * 4;
    if (std::filesystem::file_size(path) != expected) throw CorruptFileError("sample log size mismatch");
    header_.rows = h.rows;
    file_.open(path, std::ios::binary | std::ios::in | std::ios::out);
    file_.seekp(0, std::ios::end);
  } else {
    file_.open(path, std::ios::binary | std::ios::in | std::ios::out | std::ios::trunc);
    if (!file_) throw Error("cannot create '" + path + "'");
    write_sample_header(file_, header_);
    file_.seekp(0, std::ios::end);
  }
  if (!file_) throw Error("cannot open '" + path + "'");
}

SampleLogWriter::~SampleLogWriter() {
  try {
    close();
  } catch (...) {
  }
}

void SampleLogWriter::append(const Eigen::Ref<const Eigen::VectorXd>& observation) {
  if (observation.size() != static_cast<Eigen::Index>(header_.dim)) {
    throw DimensionError("observation size differs from the log layout");
  }
  const std::uint64_t index = offered_++;
  if (keep_ < 1.0) {
    std::mt19937_64 engine = lane_engine(seed_, 0x5a3d, index);
    if (std::uniform_real_distribution<double>(0.0, 1.0)(engine) >= keep_) return;
  }
  ByteWriter w;
  for (Eigen::Index i = 0; i < observation.size(); ++i) w.f32(static_cast<float>(observation(i)));
  file_.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
  if (!file_) throw Error("sample log write failed");
  ++header_.rows;
}

void SampleLogWriter::close() {
  if (!file_.is_open()) return;
  write_sample_header(file_, header_);
  file_.close();
}

SampleLog read_sample_log(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  SampleLog log;
  log.header = parse_sample_header(bytes.data(), bytes.size());
  const std::uint64_t values = log.header.rows * log.header.dim;
  if (bytes.size() != static_cast<std::size_t>(kSampleHeaderSize) + values * 4) {
    throw CorruptFileError("sample log size does not match its row count");
  }
  log.rows.resize(static_cast<Eigen::Index>(log.header.rows), log.header.dim);
  ByteReader in(bytes.data() + kSampleHeaderSize, bytes.size() - static_cast<std::size_t>(kSampleHeaderSize));
  for (Eigen::Index r = 0; r < log.rows.rows(); ++r) {
    for (Eigen::Index c = 0; c < log.rows.cols(); ++c) log.rows(r, c) = in.f32();
  }
  return log;
}

BatchInit LoggingInitializer::initialize(const Eigen::Ref<const Eigen::MatrixXd>& nus_waypoint,
                                         const Eigen::Ref<const Eigen::MatrixXd>&,
                                         const BoundaryConditions& bc) const {
  for (Eigen::Index m = 0; m < nus_waypoint.rows(); ++m) {
    writer_.append(make_observation(nus_waypoint.row(m).transpose(), bc));
  }
  return {};
}

}  // namespace pimppi
