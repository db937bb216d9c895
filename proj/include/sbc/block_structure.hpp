#pragma once

// Overlapping equal-size blocks over a flattened weight vector, and the two
// block regularisers: group lasso over block energies (cluster sparsity) and
// the entropy of the normalised energy distribution (skew).

#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

namespace sbc {

struct BlockRange {
  std::size_t offset = 0;
  std::size_t length = 0;
};

struct BlockLayout {
  std::size_t n = 0;
  std::size_t block_size = 0;
  std::size_t stride = 0;
  std::vector<BlockRange> blocks;

  /// Number of blocks containing each index.
  std::vector<unsigned> cover_counts() const;
};

inline constexpr std::size_t kDefaultBlockSize = 16;
inline constexpr std::size_t kDefaultBlockStride = 8;

/// Blocks start at 0, S, 2S, ... until index n−1 is covered; the last block is
/// clipped at n. Throws DomainError unless 1 <= stride <= block_size <= n.
BlockLayout make_layout(std::size_t n, std::size_t block_size, std::size_t stride);

struct BlockEnergies {
  std::vector<double> e;  // squared L2 norm per block
  std::vector<double> p;  // e / Σe, all zero when zero_energy
  double total = 0.0;
  bool zero_energy = false;
};

BlockEnergies block_energies(const BlockLayout& layout, std::span<const double> w);

/// Σ_b sqrt(e_b).
double cluster_sparsity_penalty(const BlockLayout& layout, std::span<const double> w);
/// Same value; adds weight·∂/∂w into grad (subgradient 0 on empty blocks).
double cluster_sparsity_penalty(const BlockLayout& layout, std::span<const double> w, std::span<double> grad,
                                double weight);

/// Shannon entropy of p; 0 when the total energy is zero.
double skew_penalty(const BlockEnergies& energies);
/// Same value computed from w; adds weight·∂/∂w into grad.
double skew_penalty(const BlockLayout& layout, std::span<const double> w, std::span<double> grad, double weight);

/// CSV `block,offset,length,energy,share`.
void write_block_energies_csv(std::ostream& os, const BlockLayout& layout, const BlockEnergies& energies);

}  // namespace sbc
