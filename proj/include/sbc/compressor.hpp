#pragma once

// Pruning, bit-width assignment, compression accounting, the SBCM compressed
// format and sparse inference over it.

#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sbc/dataio.hpp"
#include "sbc/model.hpp"

namespace sbc {

struct PruneThresholds {
  double group_tau = -4.0;             // drop groups with group score below this
  double weight_log_alpha_tau = 3.0;   // drop weights with ln(σ²/μ²) above this

  static PruneThresholds identity() {
    return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  }
};

struct PruneResult {
  Model model;                          // masks set, dead units folded into downstream biases
  std::vector<std::size_t> units;       // kept units per layer (dense: inputs, conv: output channels)
  std::vector<std::size_t> original_units;
  std::vector<std::size_t> kept_weights;
  std::vector<std::size_t> total_weights;
};

/// Units reported per layer: input units for dense layers, output channels for conv.
std::vector<std::size_t> kept_units(const Model& model);
std::vector<std::size_t> layer_units(const Architecture& arch);
std::string format_architecture(std::span<const std::size_t> units);

/// Group and weight pruning followed by unit-removal consistency: a unit with no
/// outgoing weights loses its incoming weights; a unit with no incoming weights
/// emits the constant act(bias), which is folded into the next layer's bias
/// before its outgoing weights are dropped. Throws PruneError when a layer
/// would lose every weight.
PruneResult prune(const Model& model, const PruneThresholds& thresholds);

/// b = clamp(ceil(log2(range of kept means / min kept σ)) + 1, 1, 32).
unsigned assign_bits(const BayesLayer& layer);
std::vector<unsigned> assign_bits(const Model& model);
/// Bit width for explicit value range and smallest σ.
unsigned bits_for(double range, double min_sd);

struct CompressedLayer {
  LayerSpec spec;
  std::size_t rows = 0;   // output units / channels
  std::size_t width = 0;  // inputs per row: in (dense) or in·kh·kw (conv)
  unsigned bits = 1;
  float scale = 0.0f;     // quantization step
  float offset = 0.0f;    // value of code 0
  std::vector<std::uint32_t> row_ptr;  // rows + 1
  std::vector<std::uint32_t> cols;     // kept, strictly increasing per row
  std::vector<std::uint32_t> codes;    // kept quantization codes
  std::vector<double> values;          // offset + code·scale
  std::vector<float> bias;             // rows; stored in the file only for non-empty rows (all rows of the last layer)
  bool last = false;

  std::size_t kept() const { return cols.size(); }
  bool bias_stored(std::size_t row) const { return last || row_ptr[row + 1] > row_ptr[row]; }
};

struct CompressedModel {
  Architecture arch;
  std::vector<CompressedLayer> layers;

  /// Indices of units with stored weights (rows) per layer.
  std::vector<std::vector<std::uint32_t>> kept_rows() const;
};

/// Quantizes the kept effective means of each layer at the given widths.
CompressedModel compress(const Model& pruned, std::span<const unsigned> bits);

// File: "SBCM", u16 version, u16 layer count, architecture block, then per
// layer: u32 width, u32 kept, u8 bits, f32 scale, f32 offset, u32 rows,
// row pointers packed at index_bits(kept+1), columns packed at
// index_bits(width), codes packed at `bits`, each padded to a byte, then f32
// biases of stored rows. Trailing CRC32 of everything before it.
std::vector<std::uint8_t> encode_compressed(const CompressedModel& c);
CompressedModel decode_compressed(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> export_compressed(const Model& pruned, std::span<const unsigned> bits);
CompressedModel import_compressed(const std::string& path);

Tensor sparse_forward(const CompressedModel& c, const Tensor& x);
std::vector<int> sparse_predict_labels(const CompressedModel& c, const Tensor& x, std::size_t chunk = 1000);

struct LayerAccount {
  std::size_t total = 0, kept = 0, units = 0, original_units = 0;
  unsigned bits = 0;
  std::size_t value_bits = 0, index_bits = 0, row_pointer_bits = 0, bias_bits = 0;
};

struct CompressionReport {
  std::string arch;
  std::vector<LayerAccount> layers;
  std::vector<std::size_t> units, original_units;
  double wr = 0.0;        // % of weights kept
  double cr = 0.0;        // dense 32-bit bits / compressed bits
  double cr_values_only = 0.0;
  double average_bits = 0.0;
  double error_before = std::numeric_limits<double>::quiet_NaN();
  double error_after = std::numeric_limits<double>::quiet_NaN();  // pruned, unquantized
  double error_quantized = std::numeric_limits<double>::quiet_NaN();
  std::size_t file_bits = 0;
};

/// CR denominator: Σ kept·b, plus column-index, row-pointer and bias bits when
/// `index_overhead` is set.
CompressionReport compression_metrics(const Model& dense, const CompressedModel& c, bool index_overhead = true);
std::size_t compressed_bits(const CompressionReport& r, bool index_overhead = true);

void write_report_csv(std::ostream& os, const CompressionReport& r);
std::string report_json(const CompressionReport& r);

struct SweepPoint {
  double threshold = 0.0;
  double kept_fraction = 1.0;
  double error = 0.0;
};

/// Masks weights with ln α above each threshold (visited in decreasing order)
/// and evaluates error%.
std::vector<SweepPoint> sweep_curve(const Model& model, std::vector<double> thresholds, const Dataset& test);
/// ln α threshold keeping (at least) the given fraction of currently kept weights.
double threshold_for_keep_fraction(const Model& model, double fraction);
/// Thresholds keeping each fraction in `fractions`.
std::vector<double> thresholds_for_fractions(const Model& model, std::span<const double> fractions);
Model mask_by_log_alpha(const Model& model, double threshold);
void write_curve_csv(std::ostream& os, std::span<const SweepPoint> curve);

struct TimingReport {
  double dense_seconds = 0.0;
  double sparse_seconds = 0.0;
  double speedup() const { return sparse_seconds > 0 ? dense_seconds / sparse_seconds : 0.0; }
};

/// Median wall time of dense posterior-mean inference of `dense` against
/// sparse_forward of `c` on the same inputs, both run in minibatches of `batch`.
TimingReport time_inference(const Model& dense, const CompressedModel& c, const Tensor& x, int repeats = 5,
                            std::size_t batch = 100);
/// Same, with the dense side rebuilt from the compressed rows (zeros elsewhere).
TimingReport time_inference(const CompressedModel& c, const Tensor& x, int repeats = 5, std::size_t batch = 100);

struct DenseWeights {
  std::vector<Tensor> weights, biases;
};
/// Dense weight and bias tensors in the layout forward_weights() expects.
DenseWeights decompress(const CompressedModel& c);

}  // namespace sbc
