#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dsd/checkpoint.hpp"
#include "dsd/graph.hpp"
#include "dsd/rng.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

// Partitioned latent layout: part k owns dimensions [k*m, (k+1)*m).
struct CodeLayout {
  int parts = 3;          // n
  int dims_per_part = 5;  // m

  int total() const { return parts * dims_per_part; }
  int lo(int k) const { return k * dims_per_part; }
  int hi(int k) const { return (k + 1) * dims_per_part; }

  void validate() const {
    if (parts < 2 || dims_per_part < 1)
      throw Error("code layout: need at least 2 parts of at least 1 dimension");
  }
  bool operator==(const CodeLayout&) const = default;
};

struct Code {
  Tensor values;  // flat, length layout.total()
  CodeLayout layout;
};

// Exchanges part k between two codes; everything else is untouched and
// the inputs are not mutated.
inline std::pair<Code, Code> swap_part(const Code& a, const Code& b, int k) {
  if (!(a.layout == b.layout)) throw ShapeError("swap_part: layouts differ");
  if (static_cast<int>(a.values.numel()) != a.layout.total() ||
      static_cast<int>(b.values.numel()) != b.layout.total())
    throw ShapeError("swap_part: code length does not match layout");
  if (k < 0 || k >= a.layout.parts) throw ShapeError("swap_part: part index out of range");
  Code sa = a, sb = b;
  for (int i = a.layout.lo(k); i < a.layout.hi(k); ++i) {
    sa.values.data[static_cast<std::size_t>(i)] = b.values.data[static_cast<std::size_t>(i)];
    sb.values.data[static_cast<std::size_t>(i)] = a.values.data[static_cast<std::size_t>(i)];
  }
  return {std::move(sa), std::move(sb)};
}

// Batch variant over row-major (batch x total) matrices.
inline std::pair<Tensor, Tensor> swap_part_rows(const Tensor& a, const Tensor& b,
                                                const CodeLayout& layout, int k) {
  if (!same_shape(a, b) || a.last_dim() != layout.total())
    throw ShapeError("swap_part_rows: shape mismatch");
  if (k < 0 || k >= layout.parts) throw ShapeError("swap_part_rows: part index out of range");
  Tensor sa = a, sb = b;
  const int cols = a.last_dim();
  for (int r = 0; r < a.lead_count(); ++r) {
    for (int i = layout.lo(k); i < layout.hi(k); ++i) {
      sa.data[static_cast<std::size_t>(r) * cols + i] = b.at(r, i);
      sb.data[static_cast<std::size_t>(r) * cols + i] = a.at(r, i);
    }
  }
  return {std::move(sa), std::move(sb)};
}

// MLP autoencoder: flatten -> hidden (relu) -> code, then the mirrored
// decoder with a tanh head so pixels land in [-1, 1].
struct ModelConfig {
  int canvas = 16;
  std::vector<int> hidden = {256, 128};
  CodeLayout layout = {3, 5};

  int input_dim() const { return 3 * canvas * canvas; }

  std::vector<int> encoder_dims() const {
    std::vector<int> d = {input_dim()};
    d.insert(d.end(), hidden.begin(), hidden.end());
    d.push_back(layout.total());
    return d;
  }
  std::vector<int> decoder_dims() const {
    std::vector<int> d = {layout.total()};
    d.insert(d.end(), hidden.rbegin(), hidden.rend());
    d.push_back(input_dim());
    return d;
  }

  void validate() const {
    layout.validate();
    if (canvas <= 0) throw Error("model config: canvas must be positive");
    for (int h : hidden)
      if (h <= 0) throw Error("model config: hidden sizes must be positive");
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"canvas", c.canvas},
                        {"hidden", c.hidden},
                        {"parts", c.layout.parts},
                        {"dims_per_part", c.layout.dims_per_part}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("canvas")) j.at("canvas").get_to(c.canvas);
  if (j.contains("hidden")) j.at("hidden").get_to(c.hidden);
  if (j.contains("parts")) j.at("parts").get_to(c.layout.parts);
  if (j.contains("dims_per_part")) j.at("dims_per_part").get_to(c.layout.dims_per_part);
  c.validate();
  return c;
}

struct AutoencoderParams {
  ckpt::NamedTensors tensors;  // enc.w0, enc.b0, ..., dec.w0, dec.b0, ...

  static AutoencoderParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    AutoencoderParams p;
    const auto add_stack = [&](const char* prefix, const std::vector<int>& dims) {
      for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const int fan_in = dims[l], fan_out = dims[l + 1];
        const double s = std::sqrt(6.0 / (fan_in + fan_out));
        p.tensors.emplace_back(std::string(prefix) + ".w" + std::to_string(l),
                               Tensor::uniform({fan_in, fan_out}, -s, s, rng));
        p.tensors.emplace_back(std::string(prefix) + ".b" + std::to_string(l),
                               Tensor::zeros({fan_out}));
      }
    };
    add_stack("enc", cfg.encoder_dims());
    add_stack("dec", cfg.decoder_dims());
    return p;
  }

  const Tensor& get(const std::string& name) const {
    const Tensor* t = ckpt::find(tensors, name);
    if (!t) throw Error("params: missing tensor '" + name + "'");
    return *t;
  }
};

namespace detail {

inline Tensor affine_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = Tensor::zeros({x.shape[0], w.shape[1]});
  auto ym = as_matrix(y, x.shape[0], w.shape[1]);
  ym.noalias() = as_matrix(x, x.shape[0], x.shape[1]) * as_matrix(w, w.shape[0], w.shape[1]);
  ym.rowwise() += ConstEigenMap(b.data.data(), 1, b.shape[0]).row(0);
  return y;
}

inline void relu_inplace(Tensor& t) {
  for (double& v : t.data)
    if (v < 0.0) v = 0.0;
}

inline void tanh_inplace(Tensor& t) {
  for (double& v : t.data) v = std::tanh(v);
}

}  // namespace detail

// Deterministic batch forward over (batch x input_dim) rows.
inline Tensor encode_batch(const Tensor& images, const AutoencoderParams& p,
                           const ModelConfig& cfg) {
  if (images.rank() != 2 || images.shape[1] != cfg.input_dim())
    throw ShapeError("encode: expected rows of length " + std::to_string(cfg.input_dim()) +
                     ", got " + shape_str(images.shape));
  const auto dims = cfg.encoder_dims();
  Tensor h = images;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    h = detail::affine_rows(h, p.get("enc.w" + std::to_string(l)),
                            p.get("enc.b" + std::to_string(l)));
    if (l + 2 < dims.size()) detail::relu_inplace(h);
  }
  return h;
}

inline Tensor decode_batch(const Tensor& codes, const AutoencoderParams& p,
                           const ModelConfig& cfg) {
  if (codes.rank() != 2 || codes.shape[1] != cfg.layout.total())
    throw ShapeError("decode: expected rows of length " + std::to_string(cfg.layout.total()) +
                     ", got " + shape_str(codes.shape));
  const auto dims = cfg.decoder_dims();
  Tensor h = codes;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    h = detail::affine_rows(h, p.get("dec.w" + std::to_string(l)),
                            p.get("dec.b" + std::to_string(l)));
    if (l + 2 < dims.size())
      detail::relu_inplace(h);
    else
      detail::tanh_inplace(h);
  }
  return h;
}

inline Tensor flatten_image(const Tensor& image) {
  Tensor flat = image;
  flat.shape = {1, static_cast<int>(image.numel())};
  return flat;
}

inline Code encode(const Tensor& image, const AutoencoderParams& p, const ModelConfig& cfg) {
  Tensor row = image.rank() == 2 ? image : flatten_image(image);
  Tensor codes = encode_batch(row, p, cfg);
  Code c;
  c.layout = cfg.layout;
  c.values = Tensor({cfg.layout.total()},
                    std::vector<double>(codes.data.begin(), codes.data.end()));
  return c;
}

inline Tensor decode(const Code& code, const AutoencoderParams& p, const ModelConfig& cfg) {
  if (!(code.layout == cfg.layout)) throw ShapeError("decode: code layout does not match model");
  Tensor row({1, cfg.layout.total()},
             std::vector<double>(code.values.data.begin(), code.values.data.end()));
  Tensor out = decode_batch(row, p, cfg);
  return Tensor({3, cfg.canvas, cfg.canvas}, std::move(out.data));
}

// --- graph builders (training path) --------------------------------------

struct GraphParams {
  std::vector<NodeId> ids;  // aligned with AutoencoderParams::tensors
  std::vector<std::string> names;
};

inline GraphParams register_params(Graph& g, const AutoencoderParams& p) {
  GraphParams gp;
  for (const auto& [name, tensor] : p.tensors) {
    gp.ids.push_back(g.param(name, tensor));
    gp.names.push_back(name);
  }
  return gp;
}

namespace detail {

inline NodeId find_param(const GraphParams& gp, const std::string& name) {
  for (std::size_t i = 0; i < gp.names.size(); ++i)
    if (gp.names[i] == name) return gp.ids[i];
  throw Error("graph params: missing '" + name + "'");
}

}  // namespace detail

inline NodeId build_encoder(Graph& g, const ModelConfig& cfg, const GraphParams& gp, NodeId x) {
  const auto dims = cfg.encoder_dims();
  NodeId h = x;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    h = g.affine(h, detail::find_param(gp, "enc.w" + std::to_string(l)),
                 detail::find_param(gp, "enc.b" + std::to_string(l)));
    if (l + 2 < dims.size()) h = g.relu(h);
  }
  return h;
}

inline NodeId build_decoder(Graph& g, const ModelConfig& cfg, const GraphParams& gp, NodeId code) {
  const auto dims = cfg.decoder_dims();
  NodeId h = code;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    h = g.affine(h, detail::find_param(gp, "dec.w" + std::to_string(l)),
                 detail::find_param(gp, "dec.b" + std::to_string(l)));
    h = l + 2 < dims.size() ? g.relu(h) : g.tanh(h);
  }
  return h;
}

// Gradient-transparent swap of part k: a permutation assembled from
// slices, so the adjoint is the inverse permutation.
inline std::pair<NodeId, NodeId> build_swap(Graph& g, NodeId a, NodeId b, int k,
                                            const CodeLayout& layout) {
  if (k < 0 || k >= layout.parts) throw ShapeError("build_swap: part index out of range");
  const auto swapped = [&](NodeId own, NodeId other) {
    std::vector<NodeId> segments;
    if (layout.lo(k) > 0) segments.push_back(g.slice(own, 0, layout.lo(k)));
    segments.push_back(g.slice(other, layout.lo(k), layout.hi(k)));
    if (layout.hi(k) < layout.total()) segments.push_back(g.slice(own, layout.hi(k), layout.total()));
    return g.concat(segments);
  };
  return {swapped(a, b), swapped(b, a)};
}

}  // namespace dsd
