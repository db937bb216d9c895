#include "sbc/block_structure.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "sbc/errors.hpp"

namespace sbc {

std::vector<unsigned> BlockLayout::cover_counts() const {
  std::vector<unsigned> c(n, 0);
  for (const auto& b : blocks)
    for (std::size_t i = b.offset; i < b.offset + b.length; ++i) ++c[i];
  return c;
}

BlockLayout make_layout(std::size_t n, std::size_t block_size, std::size_t stride) {
  if (stride < 1 || stride > block_size || block_size > n) {
    throw DomainError("make_layout: need 1 <= stride <= block_size <= n, got n=" + std::to_string(n) +
                      " block_size=" + std::to_string(block_size) + " stride=" + std::to_string(stride));
  }
  BlockLayout layout{n, block_size, stride, {}};
  for (std::size_t offset = 0;; offset += stride) {
    layout.blocks.push_back({offset, std::min(block_size, n - offset)});
    if (offset + block_size >= n) break;
  }
  return layout;
}

BlockEnergies block_energies(const BlockLayout& layout, std::span<const double> w) {
  if (w.size() != layout.n) {
    throw DimensionError("block_energies: weight length " + std::to_string(w.size()) + " != layout size " +
                         std::to_string(layout.n));
  }
  BlockEnergies out;
  out.e.reserve(layout.blocks.size());
  for (const auto& b : layout.blocks) {
    double e = 0.0;
    for (std::size_t i = b.offset; i < b.offset + b.length; ++i) e += w[i] * w[i];
    out.e.push_back(e);
    out.total += e;
  }
  out.p.assign(out.e.size(), 0.0);
  out.zero_energy = !(out.total > 0.0);
  if (!out.zero_energy)
    for (std::size_t b = 0; b < out.e.size(); ++b) out.p[b] = out.e[b] / out.total;
  return out;
}

double cluster_sparsity_penalty(const BlockLayout& layout, std::span<const double> w) {
  const BlockEnergies en = block_energies(layout, w);
  double total = 0.0;
  for (double e : en.e) total += std::sqrt(e);
  return total;
}

double cluster_sparsity_penalty(const BlockLayout& layout, std::span<const double> w, std::span<double> grad,
                                double weight) {
  const BlockEnergies en = block_energies(layout, w);
  double total = 0.0;
  for (std::size_t b = 0; b < en.e.size(); ++b) {
    const double norm = std::sqrt(en.e[b]);
    total += norm;
    if (norm == 0.0) continue;
    const BlockRange& r = layout.blocks[b];
    const double f = weight / norm;
    for (std::size_t i = r.offset; i < r.offset + r.length; ++i) grad[i] += f * w[i];
  }
  return total;
}

double skew_penalty(const BlockEnergies& energies) {
  if (energies.zero_energy) return 0.0;
  double h = 0.0;
  for (double p : energies.p)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double skew_penalty(const BlockLayout& layout, std::span<const double> w, std::span<double> grad, double weight) {
  const BlockEnergies en = block_energies(layout, w);
  const double h = skew_penalty(en);
  if (en.zero_energy) return h;
  // ∂H/∂e_b = −(ln p_b + H) / Σe, ∂e_b/∂w_i = 2 w_i
  for (std::size_t b = 0; b < en.e.size(); ++b) {
    if (en.p[b] <= 0.0) continue;
    const double f = weight * 2.0 * (-(std::log(en.p[b]) + h) / en.total);
    const BlockRange& r = layout.blocks[b];
    for (std::size_t i = r.offset; i < r.offset + r.length; ++i) grad[i] += f * w[i];
  }
  return h;
}

void write_block_energies_csv(std::ostream& os, const BlockLayout& layout, const BlockEnergies& energies) {
  os << "block,offset,length,energy,share\n";
  char buf[128];
  for (std::size_t b = 0; b < layout.blocks.size(); ++b) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.17g,%.17g\n", b, layout.blocks[b].offset, layout.blocks[b].length,
                  energies.e[b], energies.p[b]);
    os << buf;
  }
}

}  // namespace sbc
