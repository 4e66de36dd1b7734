#include "painmeter/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "painmeter/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace painmeter {
namespace {

constexpr char kMagic[8] = {'P', 'M', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw IoError("cannot write checkpoint " + path.string());
  }
  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data),
               static_cast<std::streamsize>(n));
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof(v)); }
  void i32(std::int32_t v) { bytes(&v, sizeof(v)); }
  void f64(double v) { bytes(&v, sizeof(v)); }
  void matrix_row_major(const Eigen::MatrixXd& m) {
    i32(static_cast<std::int32_t>(m.rows()));
    i32(static_cast<std::int32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
    }
  }
  void vector(const Eigen::VectorXd& v) {
    i32(static_cast<std::int32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
  }
  void finish() {
    if (!out_) throw IoError("write failed for " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open checkpoint " + path.string());
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!in_) {
      throw FormatError("truncated checkpoint file " + path_.string());
    }
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof(v));
    return v;
  }
  std::int32_t i32() {
    std::int32_t v;
    bytes(&v, sizeof(v));
    return v;
  }
  double f64() {
    double v;
    bytes(&v, sizeof(v));
    return v;
  }
  Eigen::MatrixXd matrix_row_major() {
    const std::int32_t rows = i32();
    const std::int32_t cols = i32();
    if (rows < 0 || cols < 0 || static_cast<long>(rows) * cols > (1L << 28)) {
      throw FormatError("implausible matrix dims in " + path_.string());
    }
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = f64();
    }
    return m;
  }
  Eigen::VectorXd vector() {
    const std::int32_t n = i32();
    if (n < 0 || n > (1 << 28)) {
      throw FormatError("implausible vector length in " + path_.string());
    }
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = f64();
    return v;
  }
  bool at_end() { return in_.peek() == std::ifstream::traits_type::eof(); }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint,
                     const std::filesystem::path& path) {
  checkpoint.model.check();
  const ModelParams& model = checkpoint.model;
  Writer w(path);
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);

  const Architecture& arch = model.arch;
  w.i32(arch.input_channels);
  w.i32(arch.flat_input);
  w.i32(arch.categories);
  w.i32(static_cast<std::int32_t>(arch.conv.size()));
  for (const ConvLayerSpec& spec : arch.conv) {
    w.i32(spec.filters);
    w.i32(spec.window_rows);
    w.i32(spec.window_cols);
    w.i32(spec.pool_width);
    w.i32(spec.pool_stride);
  }
  w.i32(static_cast<std::int32_t>(arch.hidden.size()));
  for (int h : arch.hidden) w.i32(h);

  for (const ConvLayerParams& layer : model.conv) {
    w.matrix_row_major(layer.weight);
    w.vector(layer.bias);
    w.vector(layer.gamma);
    w.vector(layer.beta);
    w.vector(layer.running_mean);
    w.vector(layer.running_var);
  }
  for (const DenseLayerParams& layer : model.dense) {
    w.matrix_row_major(layer.weight);
    w.vector(layer.bias);
  }
  w.vector(checkpoint.normalizer.mean);
  w.vector(checkpoint.normalizer.std);
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + " is not a model checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  }

  Checkpoint checkpoint;
  Architecture& arch = checkpoint.model.arch;
  arch.input_channels = r.i32();
  arch.flat_input = r.i32();
  arch.categories = r.i32();
  const std::int32_t n_conv = r.i32();
  if (n_conv < 0 || n_conv > 16) {
    throw FormatError("implausible conv layer count");
  }
  for (int i = 0; i < n_conv; ++i) {
    ConvLayerSpec spec;
    spec.filters = r.i32();
    spec.window_rows = r.i32();
    spec.window_cols = r.i32();
    spec.pool_width = r.i32();
    spec.pool_stride = r.i32();
    arch.conv.push_back(spec);
  }
  const std::int32_t n_hidden = r.i32();
  if (n_hidden < 0 || n_hidden > 64) {
    throw FormatError("implausible hidden layer count");
  }
  for (int i = 0; i < n_hidden; ++i) arch.hidden.push_back(r.i32());

  for (int i = 0; i < n_conv; ++i) {
    ConvLayerParams layer;
    layer.weight = r.matrix_row_major();
    layer.bias = r.vector();
    layer.gamma = r.vector();
    layer.beta = r.vector();
    layer.running_mean = r.vector();
    layer.running_var = r.vector();
    checkpoint.model.conv.push_back(std::move(layer));
  }
  for (int i = 0; i <= n_hidden; ++i) {
    DenseLayerParams layer;
    layer.weight = r.matrix_row_major();
    layer.bias = r.vector();
    checkpoint.model.dense.push_back(std::move(layer));
  }
  checkpoint.normalizer.mean = r.vector();
  checkpoint.normalizer.std = r.vector();
  checkpoint.model.check();
  return checkpoint;
}

}  // namespace painmeter
