#include "sbc/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "sbc/binio.hpp"
#include "sbc/errors.hpp"

namespace sbc {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  if (b.size() < at + 4) throw FormatError("truncated IDX header", b.size());
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  Dataset d;
  d.image_shape = image_shape;
  d.classes = classes;
  d.split = split;
  const std::size_t f = feature_size();
  d.images = Tensor({n, f}, std::vector<double>(images.values().begin(), images.values().begin() + n * f));
  d.labels.assign(labels.begin(), labels.begin() + n);
  return d;
}

Batch gather(const Dataset& d, std::span<const std::size_t> indices) {
  const std::size_t f = d.feature_size();
  Batch b{Tensor({indices.size(), f}), {}};
  b.y.reserve(indices.size());
  double* out = b.x.data().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t k = indices[i];
    if (k >= d.size()) throw IndexError("gather: sample index " + std::to_string(k) + " out of range");
    std::copy_n(d.images.values().begin() + k * f, f, out + i * f);
    b.y.push_back(d.labels[k]);
  }
  return b;
}

Dataset parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  if (read_be32(images, 0) != 0x00000803) throw FormatError("image file: bad magic", 0);
  const std::size_t n = read_be32(images, 4), rows = read_be32(images, 8), cols = read_be32(images, 12);
  const std::size_t need = 16 + n * rows * cols;
  if (images.size() < need) {
    throw FormatError("image file truncated: expected " + std::to_string(need) + " bytes", images.size());
  }
  if (images.size() > need) throw FormatError("image file has trailing bytes", need);
  if (read_be32(labels, 0) != 0x00000801) throw FormatError("label file: bad magic", 0);
  const std::size_t nl = read_be32(labels, 4);
  if (nl != n) throw FormatError("label count " + std::to_string(nl) + " != image count " + std::to_string(n), 4);
  if (labels.size() < 8 + n) throw FormatError("label file truncated", labels.size());
  if (labels.size() > 8 + n) throw FormatError("label file has trailing bytes", 8 + n);

  Dataset d;
  d.image_shape = {1, rows, cols};
  d.images = Tensor({n, rows * cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.images[i] = images[16 + i] / 255.0;
  d.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = labels[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = std::max(10, max_label + 1);
  return d;
}

Dataset load_mnist_idx(const std::string& image_path, const std::string& label_path) {
  const auto img = binio::read_file(image_path);
  const auto lab = binio::read_file(label_path);
  return parse_mnist_idx(img, lab);
}

Dataset load_mnist_split(const std::string& dir, const std::string& split) {
  const std::string prefix = split == "train" ? "train" : split == "test" ? "t10k" : "";
  if (prefix.empty()) throw DomainError("unknown split '" + split + "'");
  Dataset d = load_mnist_idx(dir + "/" + prefix + "-images-idx3-ubyte", dir + "/" + prefix + "-labels-idx1-ubyte");
  d.split = split;
  return d;
}

std::vector<std::uint8_t> encode_idx_images(std::size_t n, std::size_t rows, std::size_t cols,
                                            std::span<const std::uint8_t> pixels) {
  if (pixels.size() != n * rows * cols) throw DimensionError("encode_idx_images: pixel count mismatch");
  std::vector<std::uint8_t> out;
  for (std::uint32_t v : {0x803u, static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(rows),
                          static_cast<std::uint32_t>(cols)})
    put_be32(out, v);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, 0x801u);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

BlockSparseProblem synth_blocksparse(std::size_t n_features, std::size_t block_size, std::size_t k_active,
                                     std::size_t n_samples, double noise, std::uint64_t seed) {
  if (block_size == 0 || n_features == 0 || n_features % block_size != 0 || k_active * block_size > n_features ||
      !(noise >= 0.0)) {
    throw DomainError("synth_blocksparse: infeasible sizes (n_features=" + std::to_string(n_features) +
                      ", block_size=" + std::to_string(block_size) + ", k_active=" + std::to_string(k_active) + ")");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  BlockSparseProblem p;
  p.block_size = block_size;
  p.noise_sd = noise;
  std::vector<std::size_t> order(n_features / block_size);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  p.active_blocks.assign(order.begin(), order.begin() + k_active);
  std::sort(p.active_blocks.begin(), p.active_blocks.end());
  p.w_true.assign(n_features, 0.0);
  for (std::size_t b : p.active_blocks)
    for (std::size_t i = b * block_size; i < (b + 1) * block_size; ++i) p.w_true[i] = normal(rng);
  p.x = Tensor({n_samples, n_features});
  for (double& v : p.x.values()) v = normal(rng);
  p.y.assign(n_samples, 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n_features; ++i) acc += p.x.at(s, i) * p.w_true[i];
    p.y[s] = acc + noise * normal(rng);
  }
  return p;
}

BlockSparseProblem synth_blocksparse_snr(std::size_t n_features, std::size_t block_size, std::size_t k_active,
                                         std::size_t n_samples, double snr_db, std::uint64_t seed) {
  BlockSparseProblem clean = synth_blocksparse(n_features, block_size, k_active, n_samples, 0.0, seed);
  double power = 0.0;
  for (double v : clean.y) power += v * v;
  power /= static_cast<double>(std::max<std::size_t>(n_samples, 1));
  const double noise = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  // Same seed gives the same design and weights; only the noise draw is added.
  return synth_blocksparse(n_features, block_size, k_active, n_samples, noise, seed);
}

Dataset synth_classification(std::size_t n, std::size_t classes, std::size_t image_size, std::uint64_t seed) {
  if (classes == 0 || n % classes != 0) throw DomainError("synth_classification: n must be a multiple of classes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset d;
  d.classes = classes;
  d.image_shape = {1, image_size, image_size};
  d.split = "synthetic";
  const std::size_t f = image_size * image_size;
  d.images = Tensor({n, f});
  d.labels.resize(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t s = 0; s < n; ++s) {
    const int c = static_cast<int>(order[s] % classes);
    d.labels[s] = c;
    const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
    const double freq = 2.0 * std::numbers::pi / (4.0 + 0.5 * uni(rng));
    const double phase = 2.0 * std::numbers::pi * uni(rng);
    const double kx = std::cos(theta) * freq, ky = std::sin(theta) * freq;
    const double background = 0.3 + 0.2 * uni(rng);
    double* px = d.images.data().data() + s * f;
    for (std::size_t i = 0; i < image_size; ++i)
      for (std::size_t j = 0; j < image_size; ++j) {
        const double v = background + 0.25 * std::sin(kx * j + ky * i + phase) + 0.1 * normal(rng);
        px[i * image_size + j] = std::clamp(v, 0.0, 1.0);
      }
  }
  return d;
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw DomainError("batches: batch_size must be >= 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch_size)
    out.emplace_back(idx.begin() + s, idx.begin() + std::min(n, s + batch_size));
  return out;
}

}  // namespace sbc
