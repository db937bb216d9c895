#pragma once

// MNIST IDX parsing, synthetic generators and seeded minibatching.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sbc/tensor.hpp"

namespace sbc {

struct Dataset {
  Tensor images;            // [n × d], pixels in [0, 1]
  Shape image_shape;        // {c, h, w} or {d}
  std::vector<int> labels;  // class indices
  std::size_t classes = 10;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_size() const { return shape_numel(image_shape); }
  /// First n samples.
  Dataset head(std::size_t n) const;
};

struct Batch {
  Tensor x;
  std::vector<int> y;
};

Batch gather(const Dataset& d, std::span<const std::size_t> indices);

/// Parses big-endian IDX image (magic 0x803) and label (0x801) files.
Dataset load_mnist_idx(const std::string& image_path, const std::string& label_path);
Dataset parse_mnist_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);

/// IDX encoders (used to build fixtures).
std::vector<std::uint8_t> encode_idx_images(std::size_t n, std::size_t rows, std::size_t cols,
                                            std::span<const std::uint8_t> pixels);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

/// `dir`/train-images-idx3-ubyte etc. `split` is "train" or "test".
Dataset load_mnist_split(const std::string& dir, const std::string& split);

struct BlockSparseProblem {
  Tensor x;                              // [n_samples × n_features]
  std::vector<double> w_true;            // n_features
  std::vector<double> y;                 // n_samples
  double noise_sd = 0.0;
  std::size_t block_size = 0;
  std::vector<std::size_t> active_blocks;  // block indices b (support [b·B, (b+1)·B)), sorted
};

/// Standard normal design; k_active random aligned blocks carry N(0,1)
/// weights; y = Xw + N(0, noise²). Throws DomainError for infeasible sizes.
BlockSparseProblem synth_blocksparse(std::size_t n_features, std::size_t block_size, std::size_t k_active,
                                     std::size_t n_samples, double noise, std::uint64_t seed);
/// Noise σ that gives the requested SNR (dB) on the noiseless signal.
BlockSparseProblem synth_blocksparse_snr(std::size_t n_features, std::size_t block_size, std::size_t k_active,
                                         std::size_t n_samples, double snr_db, std::uint64_t seed);

/// Balanced class-conditional textures on 1×size×size images: each class has
/// an oriented sinusoid over a random background plus pixel noise.
Dataset synth_classification(std::size_t n, std::size_t classes, std::size_t image_size, std::uint64_t seed);

/// One epoch of shuffled index batches; the last batch may be short.
std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed);

}  // namespace sbc
