#include "sbc/model.hpp"

#include <sstream>
#include <algorithm>
#include <cmath>

#include "sbc/binio.hpp"
#include "sbc/errors.hpp"
#include "sbc/kernels.hpp"

namespace sbc {

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

Tensor linear(const LayerShape& s, const Tensor& w, const Tensor& b, const Tensor& x) {
  Tensor out = s.kind == LayerKind::dense ? kernels::matmul(x, w) : kernels::conv2d(x, w, s.stride);
  const std::size_t inner = s.kind == LayerKind::dense ? 1 : out.dim(2) * out.dim(3);
  const std::size_t rows = out.size() / (s.out * inner);
  double* p = out.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < s.out; ++c, p += inner)
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
  return out;
}

}  // namespace

Architecture Architecture::lenet300() {
  return mlp({784, 300, 100, 10}, "lenet300");
}

Architecture Architecture::lenet5() {
  Architecture a;
  a.name = "lenet5";
  a.input = {1, 28, 28};
  a.layers = {{LayerShape::conv(1, 20, 5), false, true},
              {LayerShape::conv(20, 50, 5), false, true},
              {LayerShape::dense(800, 500), true, false},
              {LayerShape::dense(500, 10), false, false}};
  return a;
}

Architecture Architecture::synth_conv(std::size_t size, std::size_t classes) {
  Architecture a;
  a.name = "synthconv";
  a.input = {1, size, size};
  a.layers = {{LayerShape::conv(1, 16, 3), true, false},
              {LayerShape::conv(16, 16, 3), true, true},
              {LayerShape::conv(16, 16, 3), true, true}};
  const std::size_t s = ((size - 4) / 2 - 2) / 2;
  a.layers.push_back({LayerShape::dense(16 * s * s, 32), true, false});
  a.layers.push_back({LayerShape::dense(32, classes), false, false});
  return a;
}

Architecture Architecture::mlp(const std::vector<std::size_t>& widths, const std::string& name) {
  if (widths.size() < 2) throw DimensionError("mlp: need at least input and output widths");
  Architecture a;
  a.name = name;
  a.input = {widths[0]};
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    a.layers.push_back({LayerShape::dense(widths[i], widths[i + 1]), i + 2 < widths.size(), false});
  return a;
}

Architecture Architecture::by_name(const std::string& name, std::size_t classes) {
  if (name == "lenet300") return lenet300();
  if (name == "lenet5") return lenet5();
  if (name == "synthconv") return synth_conv(32, classes);
  if (name.starts_with("synthconv:")) {
    std::size_t used = 0;
    unsigned long size = 0;
    try {
      size = std::stoul(name.substr(10), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != name.size() - 10) throw DomainError("bad image size in architecture '" + name + "'");
    return synth_conv(size, classes);
  }
  if (name.starts_with("mlp:")) {
    std::vector<std::size_t> dims;
    std::stringstream ss(name.substr(4));
    for (std::string tok; std::getline(ss, tok, '-');) {
      std::size_t used = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v == 0) throw DomainError("bad layer width '" + tok + "' in architecture '" + name + "'");
      dims.push_back(v);
    }
    if (dims.size() < 2) throw DomainError("architecture '" + name + "' needs at least two widths");
    return mlp(dims);
  }
  throw DomainError("unknown architecture '" + name + "' (expected lenet300, lenet5, synthconv[:size] or mlp:A-B-...)");
}

std::vector<Shape> Architecture::activation_shapes() const {
  std::vector<Shape> out;
  Shape cur = input;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerShape& s = layers[l].shape;
    if (s.kind == LayerKind::conv) {
      if (cur.size() != 3 || cur[0] != s.in || cur[1] < s.kh || cur[2] < s.kw) {
        throw DimensionError("layer " + std::to_string(l) + ": conv input " + shape_str(cur) + " does not fit");
      }
      cur = {s.out, (cur[1] - s.kh) / s.stride + 1, (cur[2] - s.kw) / s.stride + 1};
      if (layers[l].pool) {
        if (cur[1] % 2 || cur[2] % 2) throw DimensionError("layer " + std::to_string(l) + ": odd size before pooling");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
      }
    } else {
      if (shape_numel(cur) != s.in) {
        throw DimensionError("layer " + std::to_string(l) + ": dense input " + std::to_string(s.in) + " != " +
                             std::to_string(shape_numel(cur)));
      }
      if (layers[l].pool) throw DimensionError("layer " + std::to_string(l) + ": pooling after a dense layer");
      cur = {s.out};
    }
    out.push_back(cur);
  }
  return out;
}

void Architecture::validate() const {
  if (layers.empty()) throw DimensionError("architecture has no layers");
  activation_shapes();
}

std::vector<std::size_t> Architecture::group_span() const {
  const auto shapes = activation_shapes();
  std::vector<std::size_t> span(layers.size(), 1);
  for (std::size_t l = 1; l < layers.size(); ++l)
    if (layers[l].shape.kind == LayerKind::dense && shapes[l - 1].size() == 3)
      span[l] = shapes[l - 1][1] * shapes[l - 1][2];
  return span;
}

double softplus(double x) { return x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse: argument must be positive");
  return y + std::log(-std::expm1(-y));
}

priors::PriorMixtureSpec Model::mixture() const {
  priors::PriorMixtureSpec m = prior;
  for (std::size_t k = 0; k < m.alpha.size(); ++k) m.alpha[k] = softplus(alpha_raw[k]);
  m.global_sigma = std::exp(log_tau[0]);
  return m;
}

std::vector<Tensor*> Model::layer_parameters() {
  std::vector<Tensor*> out;
  for (auto& l : layers)
    for (Tensor* t : l.parameters()) out.push_back(t);
  return out;
}

std::size_t Model::weight_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.w_mu.size();
  return n;
}

std::size_t Model::kept_weight_count() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    for (double m : l.mask.values()) n += m != 0.0;
  return n;
}

Model init_model(const Architecture& arch, const priors::PriorMixtureSpec& prior, std::uint64_t seed,
                 const ModelInit& opts) {
  arch.validate();
  prior.validate();
  Model m;
  m.arch = arch;
  m.prior = prior;
  m.bayesian = opts.bayesian;
  m.alpha_raw = Tensor({prior.size()});
  for (std::size_t k = 0; k < prior.size(); ++k) m.alpha_raw[k] = softplus_inverse(prior.alpha[k]);
  m.log_tau = Tensor({1}, std::log(prior.global_sigma));
  InitOptions lo = opts.layer;
  lo.tau = prior.global_sigma;
  std::vector<Tensor> warm_w, warm_b;
  if (opts.warm_start) {
    if (opts.warm_start->layers.size() != arch.layers.size()) {
      throw DimensionError("warm start has " + std::to_string(opts.warm_start->layers.size()) + " layers, need " +
                           std::to_string(arch.layers.size()));
    }
    warm_w = effective_means(*opts.warm_start);
    warm_b = bias_means(*opts.warm_start);
  }
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const std::uint64_t layer_seed = seed * 1000003ULL + l;
    m.layers.push_back(init_layer(arch.layers[l].shape, opts.warm_start ? &warm_w[l] : nullptr, layer_seed, lo,
                                  opts.warm_start ? &warm_b[l] : nullptr));
  }
  return m;
}

Tensor to_input_layout(const Architecture& arch, const Tensor& x) {
  const std::size_t d = arch.input_size();
  if (x.rank() < 1 || x.size() % d != 0 || x.dim(0) * d != x.size()) {
    throw DimensionError("input " + shape_str(x.shape()) + " does not match architecture input " +
                         shape_str(arch.input));
  }
  Shape s{x.dim(0)};
  s.insert(s.end(), arch.input.begin(), arch.input.end());
  return x.reshaped(s);
}

Var forward(Model& model, Graph& g, const Tensor& x, ForwardMode mode, std::uint64_t seed) {
  Var h = g.constant(to_input_layout(model.arch, x));
  const std::size_t n = x.dim(0);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const LayerSpec& spec = model.arch.layers[l];
    if (spec.shape.kind == LayerKind::dense && g.value(h).rank() != 2) h = reshape(g, h, {n, spec.shape.in});
    h = sbc::forward(model.layers[l], g, h, mode, seed * 7919ULL + l);
    if (spec.relu) h = relu(g, h);
    if (spec.pool) h = max_pool2(g, h);
  }
  return h;
}

Tensor forward_weights(const Architecture& arch, std::span<const Tensor> weights, std::span<const Tensor> biases,
                       const Tensor& x) {
  Tensor h = to_input_layout(arch, x);
  const std::size_t n = x.dim(0);
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const LayerSpec& spec = arch.layers[l];
    if (spec.shape.kind == LayerKind::dense && h.rank() != 2) h.reshape({n, spec.shape.in});
    h = linear(spec.shape, weights[l], biases[l], h);
    if (spec.relu) h = kernels::relu(h);
    if (spec.pool) h = kernels::max_pool2(h);
  }
  return h;
}

std::vector<Tensor> effective_means(const Model& model) {
  std::vector<Tensor> w;
  for (const auto& l : model.layers) w.push_back(effective_weights(l).mean);
  return w;
}

std::vector<Tensor> bias_means(const Model& model) {
  std::vector<Tensor> b;
  for (const auto& l : model.layers) b.push_back(l.bias_mu);
  return b;
}

Tensor predict(const Model& model, const Tensor& x) {
  return forward_weights(model.arch, effective_means(model), bias_means(model), x);
}

std::vector<int> predict_labels(const Model& model, const Tensor& x, std::size_t chunk) {
  const auto w = effective_means(model);
  const auto b = bias_means(model);
  const std::size_t n = x.dim(0), d = x.size() / std::max<std::size_t>(n, 1);
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    std::vector<double> part(x.values().begin() + start * d, x.values().begin() + (start + m) * d);
    const auto labels = kernels::argmax_rows(forward_weights(model.arch, w, b, Tensor({m, d}, std::move(part))));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

// ---- checkpoint ------------------------------------------------------------

namespace {

void put_tensor(binio::ByteWriter& w, const Tensor& t) { w.f64s(t.values()); }

Tensor get_tensor(binio::ByteReader& r, const Shape& shape) {
  const std::size_t at = r.offset();
  auto v = r.f64s();
  if (v.size() != shape_numel(shape)) {
    throw FormatError("tensor length " + std::to_string(v.size()) + " != expected " + shape_str(shape), at);
  }
  return Tensor(shape, std::move(v));
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& m) {
  binio::ByteWriter w;
  for (char c : std::string("SBCK")) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kCheckpointVersion);
  w.str(m.arch.name);
  w.u32(static_cast<std::uint32_t>(m.arch.input.size()));
  for (auto d : m.arch.input) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(m.arch.layers.size()));
  for (const auto& l : m.arch.layers) {
    w.u8(l.shape.kind == LayerKind::conv);
    for (auto v : {l.shape.in, l.shape.out, l.shape.kh, l.shape.kw, l.shape.stride}) w.u32(static_cast<std::uint32_t>(v));
    w.u8(static_cast<std::uint8_t>(l.relu | (l.pool << 1)));
  }
  w.u8(m.bayesian);
  w.u32(static_cast<std::uint32_t>(m.prior.size()));
  for (std::size_t k = 0; k < m.prior.size(); ++k) {
    w.str(priors::to_string(m.prior.components[k].kind));
    w.f64(m.prior.components[k].scale_hyper);
    w.f64(m.prior.alpha[k]);
  }
  w.f64(m.prior.global_sigma);
  put_tensor(w, m.alpha_raw);
  put_tensor(w, m.log_tau);
  for (const auto& l : m.layers) {
    for (const Tensor* t : {&l.w_mu, &l.w_logvar, &l.bias_mu, &l.bias_logvar, &l.scale_mu, &l.scale_logvar, &l.aux_mu,
                            &l.aux_logvar, &l.mask})
      put_tensor(w, *t);
    w.u32(l.block_layout ? static_cast<std::uint32_t>(l.block_layout->block_size) : 0);
    w.u32(l.block_layout ? static_cast<std::uint32_t>(l.block_layout->stride) : 0);
  }
  w.seal();
  return w.buffer();
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  binio::ByteReader r(bytes);
  {
    auto magic = r.bytes(4);
    if (std::string(magic.begin(), magic.end()) != "SBCK") throw FormatError("not a checkpoint (bad magic)", 0);
  }
  r.verify_seal();
  const std::size_t vat = r.offset();
  if (r.u16() != kCheckpointVersion) throw FormatError("unsupported checkpoint version", vat);
  Model m;
  m.arch.name = r.str();
  const std::uint32_t rank = r.u32();
  if (rank < 1 || rank > 3) throw FormatError("bad input rank", r.offset() - 4);
  for (std::uint32_t i = 0; i < rank; ++i) m.arch.input.push_back(r.u32());
  const std::uint32_t n_layers = r.u32();
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    LayerSpec s;
    s.shape.kind = r.u8() ? LayerKind::conv : LayerKind::dense;
    s.shape.in = r.u32();
    s.shape.out = r.u32();
    s.shape.kh = r.u32();
    s.shape.kw = r.u32();
    s.shape.stride = r.u32();
    const std::uint8_t flags = r.u8();
    s.relu = flags & 1;
    s.pool = flags & 2;
    m.arch.layers.push_back(s);
  }
  try {
    m.arch.validate();
  } catch (const DimensionError& e) {
    throw FormatError(std::string("inconsistent architecture: ") + e.what(), r.offset());
  }
  m.bayesian = r.u8();
  const std::uint32_t k = r.u32();
  for (std::uint32_t i = 0; i < k; ++i) {
    const std::size_t at = r.offset();
    priors::PriorComponent c;
    try {
      c.kind = priors::prior_kind_from_string(r.str());
    } catch (const std::exception&) {
      throw FormatError("unknown prior component", at);
    }
    c.scale_hyper = r.f64();
    m.prior.components.push_back(c);
    m.prior.alpha.push_back(r.f64());
  }
  m.prior.global_sigma = r.f64();
  m.alpha_raw = get_tensor(r, {k});
  m.log_tau = get_tensor(r, {1});
  for (const auto& spec : m.arch.layers) {
    BayesLayer l;
    l.shape = spec.shape;
    const Shape ws = spec.shape.weight_shape();
    l.w_mu = get_tensor(r, ws);
    l.w_logvar = get_tensor(r, ws);
    l.bias_mu = get_tensor(r, {spec.shape.out});
    l.bias_logvar = get_tensor(r, {spec.shape.out});
    l.scale_mu = get_tensor(r, {spec.shape.in});
    l.scale_logvar = get_tensor(r, {spec.shape.in});
    l.aux_mu = get_tensor(r, {spec.shape.in});
    l.aux_logvar = get_tensor(r, {spec.shape.in});
    l.mask = get_tensor(r, ws);
    const std::size_t at = r.offset();
    const std::uint32_t bs = r.u32(), st = r.u32();
    if (bs) {
      try {
        l.block_layout = make_layout(l.w_mu.size(), bs, st);
      } catch (const DomainError& e) {
        throw FormatError(e.what(), at);
      }
    }
    l.refresh_mask_flag();
    m.layers.push_back(std::move(l));
  }
  r.expect_end();
  return m;
}

void save_checkpoint(const Model& model, const std::string& path) { binio::write_file(path, serialize_model(model)); }

Model load_checkpoint(const std::string& path) { return deserialize_model(binio::read_file(path)); }

}  // namespace sbc
