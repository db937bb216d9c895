#include "sbc/compressor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <json.hpp>

#include "sbc/binio.hpp"
#include "sbc/errors.hpp"
#include "sbc/kernels.hpp"
#include "sbc/trainer.hpp"

namespace sbc {

namespace {

constexpr std::uint16_t kFormatVersion = 1;

// Row = output unit/channel, group = input unit/channel.
struct LayerIndex {
  const LayerShape& s;
  std::size_t kk() const { return s.kh * s.kw; }
  template <class F>
  void for_row(std::size_t o, F&& f) const {
    if (s.kind == LayerKind::dense) {
      for (std::size_t i = 0; i < s.in; ++i) f(i * s.out + o, i);
    } else {
      const std::size_t w = s.in * kk();
      for (std::size_t t = 0; t < w; ++t) f(o * w + t, t / kk());
    }
  }
  template <class F>
  void for_group(std::size_t g, F&& f) const {
    if (s.kind == LayerKind::dense) {
      for (std::size_t o = 0; o < s.out; ++o) f(g * s.out + o, o);
    } else {
      for (std::size_t o = 0; o < s.out; ++o)
        for (std::size_t t = 0; t < kk(); ++t) f((o * s.in + g) * kk() + t, o);
    }
  }
};

bool row_alive(const BayesLayer& l, std::size_t o) {
  bool alive = false;
  LayerIndex{l.shape}.for_row(o, [&](std::size_t k, std::size_t) { alive = alive || l.mask[k] != 0.0; });
  return alive;
}

bool group_alive(const BayesLayer& l, std::size_t g) {
  bool alive = false;
  LayerIndex{l.shape}.for_group(g, [&](std::size_t k, std::size_t) { alive = alive || l.mask[k] != 0.0; });
  return alive;
}

std::size_t count_kept(const BayesLayer& l) {
  std::size_t n = 0;
  for (double m : l.mask.values()) n += m != 0.0;
  return n;
}

double sd_of(double var) { return std::sqrt(var); }

}  // namespace

std::vector<std::size_t> layer_units(const Architecture& arch) {
  std::vector<std::size_t> u;
  for (const auto& l : arch.layers) u.push_back(l.shape.kind == LayerKind::dense ? l.shape.in : l.shape.out);
  return u;
}

std::vector<std::size_t> kept_units(const Model& model) {
  std::vector<std::size_t> u;
  for (const auto& l : model.layers) {
    std::size_t n = 0;
    if (l.shape.kind == LayerKind::dense) {
      for (std::size_t g = 0; g < l.shape.in; ++g) n += group_alive(l, g);
    } else {
      for (std::size_t o = 0; o < l.shape.out; ++o) n += row_alive(l, o);
    }
    u.push_back(n);
  }
  return u;
}

std::string format_architecture(std::span<const std::size_t> units) {
  std::string s;
  for (std::size_t i = 0; i < units.size(); ++i) s += (i ? "-" : "") + std::to_string(units[i]);
  return s;
}

PruneResult prune(const Model& model, const PruneThresholds& t) {
  PruneResult res;
  res.model = model;
  Model& m = res.model;
  for (auto& l : m.layers) {
    const auto scores = group_scores(l);
    for (std::size_t g = 0; g < l.shape.in; ++g)
      if (scores[g] < t.group_tau) LayerIndex{l.shape}.for_group(g, [&](std::size_t k, std::size_t) { l.mask[k] = 0.0; });
    const auto la = log_alpha(l);
    for (std::size_t k = 0; k < la.size(); ++k)
      if (la[k] > t.weight_log_alpha_tau) l.mask[k] = 0.0;
  }

  const auto spans = m.arch.group_span();
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t l = 0; l + 1 < m.layers.size(); ++l) {
      BayesLayer& up = m.layers[l];
      BayesLayer& down = m.layers[l + 1];
      const std::size_t span = spans[l + 1];
      for (std::size_t u = 0; u < up.shape.out; ++u) {
        bool used = false;
        for (std::size_t g = u * span; g < (u + 1) * span; ++g) used = used || group_alive(down, g);
        const bool fed = row_alive(up, u);
        if (fed && !used) {
          LayerIndex{up.shape}.for_row(u, [&](std::size_t k, std::size_t) { up.mask[k] = 0.0; });
          changed = true;
        } else if (!fed && used) {
          // Constant unit: act(b) everywhere (pooling keeps it constant).
          double c = up.bias_mu[u];
          if (m.arch.layers[l].relu) c = std::max(c, 0.0);
          for (std::size_t g = u * span; g < (u + 1) * span; ++g) {
            const double ez = std::exp(down.scale_mu[g] + 0.5 * std::exp(down.scale_logvar[g]));
            LayerIndex{down.shape}.for_group(g, [&](std::size_t k, std::size_t o) {
              if (down.mask[k] == 0.0) return;
              down.bias_mu[o] += c * ez * down.w_mu[k];
              down.mask[k] = 0.0;
            });
          }
          changed = true;
        }
      }
    }
  }

  for (auto& l : m.layers) {
    for (std::size_t k = 0; k < l.mask.size(); ++k)
      if (l.mask[k] == 0.0) l.w_mu[k] = 0.0;
    l.refresh_mask_flag();
    res.kept_weights.push_back(count_kept(l));
    res.total_weights.push_back(l.w_mu.size());
  }
  res.units = kept_units(m);
  res.original_units = layer_units(m.arch);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    if (res.kept_weights[l] == 0) {
      std::string msg = "pruning would empty layer " + std::to_string(l) + "; survivors per layer:";
      for (std::size_t j = 0; j < m.layers.size(); ++j)
        msg += " " + std::to_string(res.kept_weights[j]) + "/" + std::to_string(res.total_weights[j]);
      throw PruneError(msg, res.kept_weights);
    }
  }
  return res;
}

unsigned bits_for(double range, double min_sd) {
  if (!(range > 0.0)) return 1;
  if (!(min_sd > 0.0)) return 32;
  const double b = std::ceil(std::log2(range / min_sd)) + 1.0;
  return static_cast<unsigned>(std::clamp(b, 1.0, 32.0));
}

unsigned assign_bits(const BayesLayer& layer) {
  const EffectiveWeights ew = effective_weights(layer);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, sd = lo;
  for (std::size_t k = 0; k < ew.mean.size(); ++k) {
    if (layer.mask[k] == 0.0) continue;
    lo = std::min(lo, ew.mean[k]);
    hi = std::max(hi, ew.mean[k]);
    sd = std::min(sd, sd_of(ew.var[k]));
  }
  if (hi < lo) return 1;
  return bits_for(hi - lo, sd);
}

std::vector<unsigned> assign_bits(const Model& model) {
  std::vector<unsigned> b;
  for (const auto& l : model.layers) b.push_back(assign_bits(l));
  return b;
}

std::vector<std::vector<std::uint32_t>> CompressedModel::kept_rows() const {
  std::vector<std::vector<std::uint32_t>> out;
  for (const auto& l : layers) {
    std::vector<std::uint32_t> r;
    for (std::size_t o = 0; o < l.rows; ++o)
      if (l.row_ptr[o + 1] > l.row_ptr[o]) r.push_back(static_cast<std::uint32_t>(o));
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

void quantize(CompressedLayer& cl, std::span<const double> means) {
  const std::size_t n = means.size();
  cl.codes.assign(n, 0);
  cl.values.assign(n, 0.0);
  if (n == 0) return;
  const auto [lo_it, hi_it] = std::minmax_element(means.begin(), means.end());
  const double lo = *lo_it, hi = *hi_it;
  float off = static_cast<float>(lo);
  if (static_cast<double>(off) > lo) off = std::nextafter(off, -std::numeric_limits<float>::infinity());
  const double levels = std::ldexp(1.0, static_cast<int>(cl.bits)) - 1.0;
  float sc = 0.0f;
  if (hi > static_cast<double>(off)) {
    sc = static_cast<float>((hi - off) / levels);
    while (static_cast<double>(off) + static_cast<double>(sc) * levels < hi)
      sc = std::nextafter(sc, std::numeric_limits<float>::infinity());
  }
  cl.offset = off;
  cl.scale = sc;
  for (std::size_t k = 0; k < n; ++k) {
    double q = sc > 0.0f ? std::nearbyint((means[k] - off) / static_cast<double>(sc)) : 0.0;
    q = std::clamp(q, 0.0, levels);
    cl.codes[k] = static_cast<std::uint32_t>(q);
    cl.values[k] = static_cast<double>(off) + q * static_cast<double>(sc);
  }
}

void dequantize(CompressedLayer& cl) {
  cl.values.resize(cl.codes.size());
  for (std::size_t k = 0; k < cl.codes.size(); ++k)
    cl.values[k] = static_cast<double>(cl.offset) + static_cast<double>(cl.codes[k]) * static_cast<double>(cl.scale);
}

}  // namespace

CompressedModel compress(const Model& pruned, std::span<const unsigned> bits) {
  if (bits.size() != pruned.layers.size()) throw DimensionError("compress: one bit width per layer required");
  CompressedModel c;
  c.arch = pruned.arch;
  for (std::size_t l = 0; l < pruned.layers.size(); ++l) {
    const BayesLayer& layer = pruned.layers[l];
    if (bits[l] < 1 || bits[l] > 32) throw DomainError("compress: bit width must be in [1, 32]");
    const EffectiveWeights ew = effective_weights(layer);
    CompressedLayer cl;
    cl.spec = pruned.arch.layers[l];
    cl.rows = layer.shape.out;
    cl.width = layer.shape.in * layer.shape.kh * layer.shape.kw;
    cl.bits = bits[l];
    cl.last = l + 1 == pruned.layers.size();
    cl.row_ptr.push_back(0);
    std::vector<double> means;
    for (std::size_t o = 0; o < cl.rows; ++o) {
      LayerIndex{layer.shape}.for_row(o, [&](std::size_t k, std::size_t) {
        if (layer.mask[k] == 0.0) return;
        const std::size_t col = layer.shape.kind == LayerKind::dense ? k / layer.shape.out : k % cl.width;
        cl.cols.push_back(static_cast<std::uint32_t>(col));
        means.push_back(ew.mean[k]);
      });
      cl.row_ptr.push_back(static_cast<std::uint32_t>(cl.cols.size()));
    }
    quantize(cl, means);
    cl.bias.assign(cl.rows, 0.0f);
    for (std::size_t o = 0; o < cl.rows; ++o)
      if (cl.bias_stored(o)) cl.bias[o] = static_cast<float>(layer.bias_mu[o]);
    c.layers.push_back(std::move(cl));
  }
  return c;
}

std::vector<std::uint8_t> encode_compressed(const CompressedModel& c) {
  binio::ByteWriter w;
  for (char ch : std::string("SBCM")) w.u8(static_cast<std::uint8_t>(ch));
  w.u16(kFormatVersion);
  w.u16(static_cast<std::uint16_t>(c.layers.size()));
  w.str(c.arch.name);
  w.u8(static_cast<std::uint8_t>(c.arch.input.size()));
  for (auto d : c.arch.input) w.u32(static_cast<std::uint32_t>(d));
  for (const auto& l : c.layers) {
    const LayerShape& s = l.spec.shape;
    w.u8(s.kind == LayerKind::conv);
    for (auto v : {s.in, s.out, s.kh, s.kw, s.stride}) w.u32(static_cast<std::uint32_t>(v));
    w.u8(static_cast<std::uint8_t>(l.spec.relu | (l.spec.pool << 1)));
  }
  for (const auto& l : c.layers) {
    w.u32(static_cast<std::uint32_t>(l.width));
    w.u32(static_cast<std::uint32_t>(l.kept()));
    w.u8(static_cast<std::uint8_t>(l.bits));
    w.f32(l.scale);
    w.f32(l.offset);
    w.u32(static_cast<std::uint32_t>(l.rows));
    const unsigned rp_bits = binio::index_bits(l.kept() + 1), col_bits = binio::index_bits(l.width);
    binio::BitWriter rp, cols, vals;
    for (auto p : l.row_ptr) rp.put(p, rp_bits);
    for (auto cidx : l.cols) cols.put(cidx, col_bits);
    for (auto q : l.codes) vals.put(q, l.bits);
    w.bytes(rp.finish());
    w.bytes(cols.finish());
    w.bytes(vals.finish());
    for (std::size_t o = 0; o < l.rows; ++o)
      if (l.bias_stored(o)) w.f32(l.bias[o]);
  }
  w.seal();
  return w.buffer();
}

CompressedModel decode_compressed(std::span<const std::uint8_t> bytes) {
  binio::ByteReader r(bytes);
  {
    auto magic = r.bytes(4);
    if (std::string(magic.begin(), magic.end()) != "SBCM") throw FormatError("not a compressed model (bad magic)", 0);
  }
  r.verify_seal();
  std::size_t at = r.offset();
  if (r.u16() != kFormatVersion) throw FormatError("unsupported format version", at);
  const std::size_t n_layers = r.u16();
  CompressedModel c;
  c.arch.name = r.str();
  at = r.offset();
  const std::size_t rank = r.u8();
  if (rank < 1 || rank > 3) throw FormatError("bad input rank", at);
  for (std::size_t i = 0; i < rank; ++i) c.arch.input.push_back(r.u32());
  for (std::size_t i = 0; i < n_layers; ++i) {
    LayerSpec s;
    s.shape.kind = r.u8() ? LayerKind::conv : LayerKind::dense;
    s.shape.in = r.u32();
    s.shape.out = r.u32();
    s.shape.kh = r.u32();
    s.shape.kw = r.u32();
    s.shape.stride = r.u32();
    const auto flags = r.u8();
    s.relu = flags & 1;
    s.pool = flags & 2;
    c.arch.layers.push_back(s);
  }
  try {
    c.arch.validate();
  } catch (const DimensionError& e) {
    throw FormatError(std::string("inconsistent architecture: ") + e.what(), r.offset());
  }
  for (std::size_t i = 0; i < n_layers; ++i) {
    CompressedLayer l;
    l.spec = c.arch.layers[i];
    l.last = i + 1 == n_layers;
    at = r.offset();
    l.width = r.u32();
    const std::size_t kept = r.u32();
    l.bits = r.u8();
    l.scale = r.f32();
    l.offset = r.f32();
    l.rows = r.u32();
    const LayerShape& s = l.spec.shape;
    if (l.width != s.in * s.kh * s.kw || l.rows != s.out || kept > l.width * l.rows || l.bits < 1 || l.bits > 32) {
      throw FormatError("layer " + std::to_string(i) + " header disagrees with architecture", at);
    }
    const unsigned rp_bits = binio::index_bits(kept + 1), col_bits = binio::index_bits(l.width);
    at = r.offset();
    binio::BitReader rp(r.bytes(binio::packed_bytes(l.rows + 1, rp_bits)), at);
    for (std::size_t o = 0; o <= l.rows; ++o) l.row_ptr.push_back(static_cast<std::uint32_t>(rp.get(rp_bits)));
    if (l.row_ptr.front() != 0 || l.row_ptr.back() != kept) throw FormatError("bad row pointers", at);
    for (std::size_t o = 0; o < l.rows; ++o)
      if (l.row_ptr[o + 1] < l.row_ptr[o]) throw FormatError("row pointers decrease", at);
    at = r.offset();
    binio::BitReader cr(r.bytes(binio::packed_bytes(kept, col_bits)), at);
    for (std::size_t k = 0; k < kept; ++k) l.cols.push_back(static_cast<std::uint32_t>(cr.get(col_bits)));
    for (std::size_t o = 0; o < l.rows; ++o)
      for (std::size_t k = l.row_ptr[o]; k < l.row_ptr[o + 1]; ++k)
        if (l.cols[k] >= l.width || (k > l.row_ptr[o] && l.cols[k] <= l.cols[k - 1]))
          throw FormatError("column indices out of range or not increasing in row " + std::to_string(o), at);
    at = r.offset();
    binio::BitReader vr(r.bytes(binio::packed_bytes(kept, l.bits)), at);
    for (std::size_t k = 0; k < kept; ++k) l.codes.push_back(static_cast<std::uint32_t>(vr.get(l.bits)));
    dequantize(l);
    l.bias.assign(l.rows, 0.0f);
    for (std::size_t o = 0; o < l.rows; ++o)
      if (l.bias_stored(o)) l.bias[o] = r.f32();
    c.layers.push_back(std::move(l));
  }
  r.expect_end();
  return c;
}

std::vector<std::uint8_t> export_compressed(const Model& pruned, std::span<const unsigned> bits) {
  return encode_compressed(compress(pruned, bits));
}

CompressedModel import_compressed(const std::string& path) { return decode_compressed(binio::read_file(path)); }

Tensor sparse_forward(const CompressedModel& c, const Tensor& x) {
  Tensor h = to_input_layout(c.arch, x);
  const std::size_t n = x.dim(0);
  for (const auto& l : c.layers) {
    const LayerShape& s = l.spec.shape;
    const double floor = l.spec.relu ? 0.0 : -std::numeric_limits<double>::infinity();  // relu fused into the store
    if (s.kind == LayerKind::dense) {
      const std::size_t d = h.size() / n;
      if (d != s.in) throw DimensionError("sparse_forward: activation width mismatch");
      Tensor out({n, l.rows});
      for (std::size_t i = 0; i < n; ++i) {
        const double* xi = h.data().data() + i * d;
        double* oi = out.data().data() + i * l.rows;
        for (std::size_t o = 0; o < l.rows; ++o) {
          double acc = l.bias[o];
          for (std::size_t k = l.row_ptr[o]; k < l.row_ptr[o + 1]; ++k) acc += l.values[k] * xi[l.cols[k]];
          oi[o] = std::max(acc, floor);
        }
      }
      h = std::move(out);
    } else {
      const std::size_t C = h.dim(1), H = h.dim(2), W = h.dim(3);
      const std::size_t oh = (H - s.kh) / s.stride + 1, ow = (W - s.kw) / s.stride + 1, kk = s.kh * s.kw;
      Tensor out({n, l.rows, oh, ow});
      // stride 1: accumulate on rows of the input width so every kept weight
      // is one contiguous axpy, then drop the kw-1 wrap-around columns
      const std::size_t span = (oh - 1) * W + ow;
      std::vector<double> acc(s.stride == 1 ? oh * W : 0);
      for (std::size_t i = 0; i < n; ++i) {
        const double* xi = h.data().data() + i * C * H * W;
        for (std::size_t o = 0; o < l.rows; ++o) {
          double* plane = out.data().data() + (i * l.rows + o) * oh * ow;
          if (s.stride == 1) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t k = l.row_ptr[o]; k < l.row_ptr[o + 1]; ++k) {
              const std::size_t ci = l.cols[k] / kk, t = l.cols[k] % kk, ki = t / s.kw, kj = t % s.kw;
              const double v = l.values[k];
              const double* src = xi + (ci * H + ki) * W + kj;
              double* dst = acc.data();
              for (std::size_t p = 0; p < span; ++p) dst[p] += v * src[p];
            }
            const double b = l.bias[o];
            for (std::size_t y = 0; y < oh; ++y)
              for (std::size_t xo = 0; xo < ow; ++xo) plane[y * ow + xo] = std::max(acc[y * W + xo] + b, floor);
            continue;
          }
          std::fill(plane, plane + oh * ow, static_cast<double>(l.bias[o]));
          for (std::size_t k = l.row_ptr[o]; k < l.row_ptr[o + 1]; ++k) {
            const std::size_t ci = l.cols[k] / kk, t = l.cols[k] % kk, ki = t / s.kw, kj = t % s.kw;
            const double v = l.values[k];
            for (std::size_t y = 0; y < oh; ++y) {
              const double* src = xi + (ci * H + y * s.stride + ki) * W + kj;
              double* dst = plane + y * ow;
              for (std::size_t xo = 0; xo < ow; ++xo) dst[xo] += v * src[xo * s.stride];
            }
          }
          for (std::size_t p = 0; p < oh * ow; ++p) plane[p] = std::max(plane[p], floor);
        }
      }
      h = std::move(out);
    }
    if (l.spec.pool) h = kernels::max_pool2(h);
  }
  return h;
}

std::vector<int> sparse_predict_labels(const CompressedModel& c, const Tensor& x, std::size_t chunk) {
  const std::size_t n = x.dim(0), d = x.size() / std::max<std::size_t>(n, 1);
  std::vector<int> out;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    std::vector<double> part(x.values().begin() + start * d, x.values().begin() + (start + m) * d);
    const auto labels = kernels::argmax_rows(sparse_forward(c, Tensor({m, d}, std::move(part))));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

CompressionReport compression_metrics(const Model& dense, const CompressedModel& c, bool index_overhead) {
  if (dense.layers.size() != c.layers.size()) throw DimensionError("compression_metrics: layer count mismatch");
  CompressionReport r;
  r.arch = c.arch.name;
  std::size_t total = 0, kept = 0, weighted_bits = 0;
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    const CompressedLayer& cl = c.layers[l];
    if (dense.layers[l].w_mu.size() != cl.rows * cl.width) {
      throw DimensionError("compression_metrics: layer " + std::to_string(l) + " size mismatch");
    }
    LayerAccount a;
    a.total = dense.layers[l].w_mu.size();
    a.kept = cl.kept();
    a.bits = cl.bits;
    a.value_bits = a.kept * cl.bits;
    a.index_bits = a.kept * binio::index_bits(cl.width);
    a.row_pointer_bits = (cl.rows + 1) * binio::index_bits(cl.kept() + 1);
    std::size_t stored = 0;
    for (std::size_t o = 0; o < cl.rows; ++o) stored += cl.bias_stored(o);
    a.bias_bits = 32 * stored;
    const LayerShape& s = cl.spec.shape;
    if (s.kind == LayerKind::dense) {
      std::vector<char> seen(s.in, 0);
      for (auto col : cl.cols) seen[col] = 1;
      a.units = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), 1));
      a.original_units = s.in;
    } else {
      for (std::size_t o = 0; o < cl.rows; ++o) a.units += cl.row_ptr[o + 1] > cl.row_ptr[o];
      a.original_units = s.out;
    }
    r.units.push_back(a.units);
    r.original_units.push_back(a.original_units);
    total += a.total;
    kept += a.kept;
    weighted_bits += a.value_bits;
    r.layers.push_back(a);
  }
  r.wr = total ? 100.0 * static_cast<double>(kept) / static_cast<double>(total) : 0.0;
  const double dense_bits = 32.0 * static_cast<double>(total);
  const std::size_t denom = compressed_bits(r, index_overhead);
  r.cr = denom ? dense_bits / static_cast<double>(denom) : std::numeric_limits<double>::infinity();
  r.cr_values_only = weighted_bits ? dense_bits / static_cast<double>(weighted_bits) : std::numeric_limits<double>::infinity();
  r.average_bits = kept ? static_cast<double>(weighted_bits) / static_cast<double>(kept) : 0.0;
  r.file_bits = 8 * encode_compressed(c).size();
  return r;
}

std::size_t compressed_bits(const CompressionReport& r, bool index_overhead) {
  std::size_t bits = 0;
  for (const auto& a : r.layers) {
    bits += a.value_bits;
    if (index_overhead) bits += a.index_bits + a.row_pointer_bits + a.bias_bits;
  }
  return bits;
}

void write_report_csv(std::ostream& os, const CompressionReport& r) {
  os << "layer,original_units,units,total_weights,kept_weights,bits,value_bits,index_bits,row_pointer_bits,bias_bits,"
        "wr,cr\n";
  char buf[320];
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& a = r.layers[l];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%zu,%zu,%u,%zu,%zu,%zu,%zu,%.6g,%.6g\n", l, a.original_units, a.units,
                  a.total, a.kept, a.bits, a.value_bits, a.index_bits, a.row_pointer_bits, a.bias_bits,
                  a.total ? 100.0 * static_cast<double>(a.kept) / static_cast<double>(a.total) : 0.0,
                  (a.value_bits + a.index_bits + a.row_pointer_bits + a.bias_bits)
                      ? 32.0 * static_cast<double>(a.total) /
                            static_cast<double>(a.value_bits + a.index_bits + a.row_pointer_bits + a.bias_bits)
                      : 0.0);
    os << buf;
  }
  std::size_t total = 0, kept = 0;
  for (const auto& a : r.layers) {
    total += a.total;
    kept += a.kept;
  }
  std::snprintf(buf, sizeof buf, "all,%s,%s,%zu,%zu,%.4g,%zu,,,,%.6g,%.6g\n",
                format_architecture(r.original_units).c_str(), format_architecture(r.units).c_str(), total, kept,
                r.average_bits, compressed_bits(r), r.wr, r.cr);
  os << buf;
}

std::string report_json(const CompressionReport& r) {
  nlohmann::ordered_json j;
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(); };
  j["architecture"] = r.arch;
  j["original_units"] = r.original_units;
  j["pruned_architecture"] = format_architecture(r.units);
  j["units"] = r.units;
  j["wr_percent"] = r.wr;
  j["cr"] = num(r.cr);
  j["cr_values_only"] = num(r.cr_values_only);
  j["average_bits"] = r.average_bits;
  j["error_before_percent"] = num(r.error_before);
  j["error_after_percent"] = num(r.error_after);
  j["error_quantized_percent"] = num(r.error_quantized);
  j["file_bits"] = r.file_bits;
  j["accounted_bits"] = compressed_bits(r);
  for (const auto& a : r.layers) {
    j["layers"].push_back({{"total", a.total},
                           {"kept", a.kept},
                           {"units", a.units},
                           {"original_units", a.original_units},
                           {"bits", a.bits},
                           {"value_bits", a.value_bits},
                           {"index_bits", a.index_bits},
                           {"row_pointer_bits", a.row_pointer_bits},
                           {"bias_bits", a.bias_bits}});
  }
  return j.dump(2);
}

Model mask_by_log_alpha(const Model& model, double threshold) {
  Model m = model;
  for (auto& l : m.layers) {
    const auto la = log_alpha(l);
    for (std::size_t k = 0; k < la.size(); ++k)
      if (la[k] > threshold) l.mask[k] = 0.0;
    l.refresh_mask_flag();
  }
  return m;
}

double threshold_for_keep_fraction(const Model& model, double fraction) {
  std::vector<double> la;
  for (const auto& l : model.layers) {
    const auto a = log_alpha(l);
    for (std::size_t k = 0; k < a.size(); ++k)
      if (l.mask[k] != 0.0) la.push_back(a[k]);
  }
  if (la.empty()) return -std::numeric_limits<double>::infinity();
  std::sort(la.begin(), la.end());
  const double want = std::clamp(fraction, 0.0, 1.0) * static_cast<double>(la.size());
  const std::size_t k = static_cast<std::size_t>(std::ceil(want - 1e-9));
  if (k == 0) return std::nextafter(la.front(), -std::numeric_limits<double>::infinity());
  return la[std::min(k, la.size()) - 1];
}

std::vector<double> thresholds_for_fractions(const Model& model, std::span<const double> fractions) {
  std::vector<double> t;
  for (double f : fractions) t.push_back(threshold_for_keep_fraction(model, f));
  return t;
}

std::vector<SweepPoint> sweep_curve(const Model& model, std::vector<double> thresholds, const Dataset& test) {
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  const double total = static_cast<double>(model.weight_count());
  std::vector<SweepPoint> out;
  for (double t : thresholds) {
    const Model m = mask_by_log_alpha(model, t);
    out.push_back({t, static_cast<double>(m.kept_weight_count()) / total, evaluate(m, test)});
  }
  return out;
}

void write_curve_csv(std::ostream& os, std::span<const SweepPoint> curve) {
  os << "threshold,kept_fraction,error\n";
  char buf[128];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.kept_fraction, p.error);
    os << buf;
  }
}

DenseWeights decompress(const CompressedModel& c) {
  DenseWeights d;
  for (const auto& l : c.layers) {
    Tensor w(l.spec.shape.weight_shape(), 0.0);
    const bool dense = l.spec.shape.kind == LayerKind::dense;
    for (std::size_t o = 0; o < l.rows; ++o)
      for (std::size_t k = l.row_ptr[o]; k < l.row_ptr[o + 1]; ++k)
        w[dense ? l.cols[k] * l.rows + o : o * l.width + l.cols[k]] = l.values[k];
    Tensor b({l.rows});
    for (std::size_t o = 0; o < l.rows; ++o) b[o] = l.bias[o];
    d.weights.push_back(std::move(w));
    d.biases.push_back(std::move(b));
  }
  return d;
}

namespace {

TimingReport time_pair(const Architecture& arch, const std::vector<Tensor>& w, const std::vector<Tensor>& b,
                       const CompressedModel& c, const Tensor& x, int repeats, std::size_t batch) {
  using clock = std::chrono::steady_clock;
  const std::size_t n = x.dim(0), d = x.size() / std::max<std::size_t>(n, 1);
  batch = std::max<std::size_t>(batch, 1);
  std::vector<Tensor> chunks;
  for (std::size_t s = 0; s < n; s += batch) {
    const std::size_t m = std::min(batch, n - s);
    Shape shape = x.shape();
    shape[0] = m;
    chunks.emplace_back(shape, std::vector<double>(x.values().begin() + s * d, x.values().begin() + (s + m) * d));
  }
  std::vector<double> td, ts;
  double sink = 0.0;
  for (int r = 0; r < std::max(repeats, 1); ++r) {
    auto t0 = clock::now();
    for (const auto& xc : chunks) sink += forward_weights(arch, w, b, xc)[0];
    auto t1 = clock::now();
    for (const auto& xc : chunks) sink += sparse_forward(c, xc)[0];
    auto t2 = clock::now();
    td.push_back(std::chrono::duration<double>(t1 - t0).count());
    ts.push_back(std::chrono::duration<double>(t2 - t1).count());
  }
  std::sort(td.begin(), td.end());
  std::sort(ts.begin(), ts.end());
  volatile double keep = sink;
  (void)keep;
  return {td[td.size() / 2], ts[ts.size() / 2]};
}

}  // namespace

TimingReport time_inference(const Model& dense, const CompressedModel& c, const Tensor& x, int repeats,
                            std::size_t batch) {
  return time_pair(dense.arch, effective_means(dense), bias_means(dense), c, x, repeats, batch);
}

TimingReport time_inference(const CompressedModel& c, const Tensor& x, int repeats, std::size_t batch) {
  const DenseWeights d = decompress(c);
  return time_pair(c.arch, d.weights, d.biases, c, x, repeats, batch);
}

}  // namespace sbc
