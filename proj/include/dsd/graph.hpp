#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd {

using NodeId = int;

enum class Op {
  kInput,
  kParam,
  kConst,
  kAdd,
  kMul,
  kMatMul,
  kAffine,
  kRelu,
  kTanh,
  kConcat,
  kSlice,
  kScale,
  kMse,   // mean over all elements of squared difference
  kSse,   // plain sum of squared differences (unnormalized form)
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kMatMul: return "matmul";
    case Op::kAffine: return "affine";
    case Op::kRelu: return "relu";
    case Op::kTanh: return "tanh";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kScale: return "scale";
    case Op::kMse: return "mse";
    case Op::kSse: return "sse";
  }
  return "?";
}

struct Node {
  Op op;
  std::vector<NodeId> inputs;
  Shape shape;
  Tensor value;
  Tensor grad;
  bool has_value = false;
  std::string name;        // inputs, params and marked outputs
  int slice_lo = 0;        // kSlice
  int slice_hi = 0;
  double factor = 1.0;     // kScale
};

// Reverse-mode tape over dense tensors. Nodes are created in topological
// order; shapes are fixed at build time so every shape error surfaces
// when the graph is assembled, not mid-training. Instances share no
// global state and may live on independent threads.
class Graph {
 public:
  NodeId input(const std::string& name, Shape shape) {
    shape_numel(shape);
    Node n;
    n.op = Op::kInput;
    n.shape = std::move(shape);
    n.name = name;
    return push(std::move(n));
  }

  NodeId param(const std::string& name, Tensor init) {
    Node n;
    n.op = Op::kParam;
    n.shape = init.shape;
    n.value = std::move(init);
    n.has_value = true;
    n.name = name;
    param_ids_.push_back(static_cast<NodeId>(nodes_.size()));
    return push(std::move(n));
  }

  NodeId constant(Tensor value) {
    Node n;
    n.op = Op::kConst;
    n.shape = value.shape;
    n.value = std::move(value);
    n.has_value = true;
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) { return binary_same_shape(Op::kAdd, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary_same_shape(Op::kMul, a, b); }

  NodeId matmul(NodeId x, NodeId w) {
    const Shape& xs = at(x).shape;
    const Shape& ws = at(w).shape;
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0]) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(xs) + " x " + shape_str(ws));
    }
    Node n;
    n.op = Op::kMatMul;
    n.inputs = {x, w};
    n.shape = {xs[0], ws[1]};
    return push(std::move(n));
  }

  // y = x.w + b with the bias row broadcast over the batch.
  NodeId affine(NodeId x, NodeId w, NodeId b) {
    const Shape& xs = at(x).shape;
    const Shape& ws = at(w).shape;
    const Shape& bs = at(b).shape;
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0]) {
      throw ShapeError("affine: incompatible shapes " + shape_str(xs) + " x " + shape_str(ws));
    }
    if (bs.size() != 1 || bs[0] != ws[1]) {
      throw ShapeError("affine: bias shape " + shape_str(bs) + " does not match output dim " +
                       std::to_string(ws[1]));
    }
    Node n;
    n.op = Op::kAffine;
    n.inputs = {x, w, b};
    n.shape = {xs[0], ws[1]};
    return push(std::move(n));
  }

  NodeId relu(NodeId x) { return unary(Op::kRelu, x); }
  NodeId tanh(NodeId x) { return unary(Op::kTanh, x); }
  NodeId scale(NodeId x, double factor) {
    NodeId id = unary(Op::kScale, x);
    at(id).factor = factor;
    return id;
  }

  NodeId concat(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (parts.size() == 1) return parts[0];
    Shape shape = at(parts[0]).shape;
    int last = 0;
    for (NodeId p : parts) {
      const Shape& s = at(p).shape;
      if (s.size() != shape.size() ||
          !std::equal(s.begin(), s.end() - 1, shape.begin())) {
        throw ShapeError("concat: leading axes differ, " + shape_str(shape) + " vs " +
                         shape_str(s));
      }
      last += s.back();
    }
    shape.back() = last;
    Node n;
    n.op = Op::kConcat;
    n.inputs = parts;
    n.shape = std::move(shape);
    return push(std::move(n));
  }

  // Columns [lo, hi) of the last axis.
  NodeId slice(NodeId x, int lo, int hi) {
    const Shape& xs = at(x).shape;
    if (lo < 0 || hi <= lo || hi > xs.back()) {
      throw ShapeError("slice: range [" + std::to_string(lo) + "," + std::to_string(hi) +
                       ") invalid for shape " + shape_str(xs));
    }
    Node n;
    n.op = Op::kSlice;
    n.inputs = {x};
    n.shape = xs;
    n.shape.back() = hi - lo;
    n.slice_lo = lo;
    n.slice_hi = hi;
    return push(std::move(n));
  }

  NodeId mse(NodeId a, NodeId b) { return reduction(Op::kMse, a, b); }
  NodeId sse(NodeId a, NodeId b) { return reduction(Op::kSse, a, b); }

  void mark_output(const std::string& name, NodeId id) { at(id).name = name; }

  // --- execution ------------------------------------------------------

  // Evaluates the ancestors of `root` given feeds for the input nodes it
  // depends on. Values of params/consts persist between calls.
  void eval(const std::map<std::string, Tensor>& feeds, NodeId root) {
    const std::vector<char> needed = ancestors(root);
    run_forward(feeds, needed);
  }

  // Evaluates every node (spec surface); returns the values of all named
  // nodes. Deterministic for fixed feeds and parameter values.
  std::map<std::string, Tensor> forward_eval(const std::map<std::string, Tensor>& feeds) {
    run_forward(feeds, std::vector<char>(nodes_.size(), 1));
    std::map<std::string, Tensor> out;
    for (const Node& n : nodes_) {
      if (!n.name.empty()) out[n.name] = n.value;
    }
    return out;
  }

  // Reverse pass from a scalar loss node. Returns gradients for every
  // named input/param node; d(loss)/d(loss) = 1.
  std::map<std::string, Tensor> backward(NodeId loss) {
    backward_from(loss);
    std::map<std::string, Tensor> out;
    for (const Node& n : nodes_) {
      if (!n.name.empty() && (n.op == Op::kParam || n.op == Op::kInput)) out[n.name] = n.grad;
    }
    return out;
  }

  void backward_from(NodeId loss) {
    Node& ln = at(loss);
    if (!ln.has_value) throw Error("backward: forward pass has not populated node " + label(loss));
    if (ln.value.numel() != 1) {
      throw ShapeError("backward: loss node " + label(loss) + " is not scalar, shape " +
                       shape_str(ln.shape));
    }
    const std::vector<char> needed = ancestors(loss);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!needed[i]) continue;
      if (n.grad.shape != n.shape) n.grad = Tensor::zeros(n.shape);
      else std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
    at(loss).grad.data[0] = 1.0;
    for (int i = loss; i >= 0; --i) {
      if (!needed[i]) continue;
      propagate(static_cast<NodeId>(i));
    }
  }

  // --- access ---------------------------------------------------------

  const std::vector<NodeId>& param_ids() const { return param_ids_; }
  Node& at(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& at(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  const Tensor& value(NodeId id) const { return at(id).value; }
  const Tensor& grad(NodeId id) const { return at(id).grad; }
  Tensor& mutable_value(NodeId id) { return at(id).value; }
  std::size_t size() const { return nodes_.size(); }

  NodeId find(const std::string& name) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].name == name) return static_cast<NodeId>(i);
    }
    throw Error("graph: no node named '" + name + "'");
  }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  NodeId unary(Op op, NodeId x) {
    Node n;
    n.op = op;
    n.inputs = {x};
    n.shape = at(x).shape;
    return push(std::move(n));
  }

  NodeId binary_same_shape(Op op, NodeId a, NodeId b) {
    if (at(a).shape != at(b).shape) {
      throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(at(a).shape) +
                       " vs " + shape_str(at(b).shape));
    }
    Node n;
    n.op = op;
    n.inputs = {a, b};
    n.shape = at(a).shape;
    return push(std::move(n));
  }

  NodeId reduction(Op op, NodeId a, NodeId b) {
    if (at(a).shape != at(b).shape) {
      throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(at(a).shape) +
                       " vs " + shape_str(at(b).shape));
    }
    Node n;
    n.op = op;
    n.inputs = {a, b};
    n.shape = {1};
    return push(std::move(n));
  }

  std::string label(NodeId id) const {
    const Node& n = at(id);
    std::string s = "#" + std::to_string(id) + "(" + op_name(n.op);
    if (!n.name.empty()) s += " '" + n.name + "'";
    return s + ")";
  }

  std::vector<char> ancestors(NodeId root) const {
    std::vector<char> mark(nodes_.size(), 0);
    mark[static_cast<std::size_t>(root)] = 1;
    for (int i = root; i >= 0; --i) {
      if (!mark[i]) continue;
      for (NodeId in : nodes_[static_cast<std::size_t>(i)].inputs) mark[in] = 1;
    }
    return mark;
  }

  void run_forward(const std::map<std::string, Tensor>& feeds, const std::vector<char>& needed) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!needed[i]) continue;
      Node& n = nodes_[i];
      if (n.op == Op::kInput) {
        auto it = feeds.find(n.name);
        if (it == feeds.end()) throw Error("forward: input '" + n.name + "' not fed");
        if (it->second.shape != n.shape) {
          throw ShapeError("forward: feed '" + n.name + "' has shape " +
                           shape_str(it->second.shape) + ", declared " + shape_str(n.shape));
        }
        n.value = it->second;
        n.has_value = true;
      } else if (n.op != Op::kParam && n.op != Op::kConst) {
        compute(static_cast<NodeId>(i));
      }
      if (!n.value.all_finite()) {
        throw NumericError("forward: non-finite value at node " + label(static_cast<NodeId>(i)));
      }
    }
  }

  void compute(NodeId id) {
    Node& n = at(id);
    if (n.value.shape != n.shape) n.value = Tensor::zeros(n.shape);
    const auto in = [&](int i) -> const Tensor& { return at(n.inputs[static_cast<std::size_t>(i)]).value; };
    switch (n.op) {
      case Op::kAdd: {
        const Tensor &a = in(0), &b = in(1);
        for (std::size_t i = 0; i < a.data.size(); ++i) n.value.data[i] = a.data[i] + b.data[i];
        break;
      }
      case Op::kMul: {
        const Tensor &a = in(0), &b = in(1);
        for (std::size_t i = 0; i < a.data.size(); ++i) n.value.data[i] = a.data[i] * b.data[i];
        break;
      }
      case Op::kMatMul: {
        const Tensor &x = in(0), &w = in(1);
        as_matrix(n.value, x.shape[0], w.shape[1]).noalias() =
            as_matrix(x, x.shape[0], x.shape[1]) * as_matrix(w, w.shape[0], w.shape[1]);
        break;
      }
      case Op::kAffine: {
        const Tensor &x = in(0), &w = in(1), &b = in(2);
        auto y = as_matrix(n.value, x.shape[0], w.shape[1]);
        y.noalias() = as_matrix(x, x.shape[0], x.shape[1]) * as_matrix(w, w.shape[0], w.shape[1]);
        y.rowwise() += ConstEigenMap(b.data.data(), 1, b.shape[0]).row(0);
        break;
      }
      case Op::kRelu: {
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < x.data.size(); ++i)
          n.value.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
        break;
      }
      case Op::kTanh: {
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = std::tanh(x.data[i]);
        break;
      }
      case Op::kScale: {
        const Tensor& x = in(0);
        for (std::size_t i = 0; i < x.data.size(); ++i) n.value.data[i] = n.factor * x.data[i];
        break;
      }
      case Op::kConcat: {
        const int rows = n.value.lead_count();
        const int out_cols = n.value.last_dim();
        int col = 0;
        for (NodeId pid : n.inputs) {
          const Tensor& p = at(pid).value;
          const int cols = p.last_dim();
          for (int r = 0; r < rows; ++r) {
            std::copy_n(p.data.data() + static_cast<std::size_t>(r) * cols, cols,
                        n.value.data.data() + static_cast<std::size_t>(r) * out_cols + col);
          }
          col += cols;
        }
        break;
      }
      case Op::kSlice: {
        const Tensor& x = in(0);
        const int rows = x.lead_count();
        const int in_cols = x.last_dim();
        const int out_cols = n.slice_hi - n.slice_lo;
        for (int r = 0; r < rows; ++r) {
          std::copy_n(x.data.data() + static_cast<std::size_t>(r) * in_cols + n.slice_lo, out_cols,
                      n.value.data.data() + static_cast<std::size_t>(r) * out_cols);
        }
        break;
      }
      case Op::kMse:
      case Op::kSse: {
        const Tensor &a = in(0), &b = in(1);
        double acc = 0.0;
        for (std::size_t i = 0; i < a.data.size(); ++i) {
          const double d = a.data[i] - b.data[i];
          acc += d * d;
        }
        n.value.data[0] = n.op == Op::kMse ? acc / static_cast<double>(a.numel()) : acc;
        break;
      }
      default:
        throw Error("forward: node " + label(id) + " cannot be computed");
    }
    n.has_value = true;
  }

  void propagate(NodeId id) {
    Node& n = at(id);
    const Tensor& g = n.grad;
    const auto in_val = [&](int i) -> const Tensor& { return at(n.inputs[static_cast<std::size_t>(i)]).value; };
    const auto in_grad = [&](int i) -> Tensor& { return at(n.inputs[static_cast<std::size_t>(i)]).grad; };
    switch (n.op) {
      case Op::kInput:
      case Op::kParam:
      case Op::kConst:
        break;
      case Op::kAdd: {
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          in_grad(0).data[i] += g.data[i];
          in_grad(1).data[i] += g.data[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor &a = in_val(0), &b = in_val(1);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          in_grad(0).data[i] += g.data[i] * b.data[i];
          in_grad(1).data[i] += g.data[i] * a.data[i];
        }
        break;
      }
      case Op::kMatMul: {
        add_matmul_nt(in_grad(0), g, in_val(1));   // gx += g . w^T
        add_matmul_tn(in_grad(1), in_val(0), g);   // gw += x^T . g
        break;
      }
      case Op::kAffine: {
        add_matmul_nt(in_grad(0), g, in_val(1));
        add_matmul_tn(in_grad(1), in_val(0), g);
        Tensor& gb = in_grad(2);
        const int rows = g.lead_count();
        const int cols = g.last_dim();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) gb.data[static_cast<std::size_t>(c)] += g.at(r, c);
        break;
      }
      case Op::kRelu: {
        const Tensor& x = in_val(0);
        Tensor& gx = in_grad(0);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if (x.data[i] > 0.0) gx.data[i] += g.data[i];
        break;
      }
      case Op::kTanh: {
        const Tensor& y = n.value;
        Tensor& gx = in_grad(0);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          gx.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
        break;
      }
      case Op::kScale: {
        Tensor& gx = in_grad(0);
        for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += n.factor * g.data[i];
        break;
      }
      case Op::kConcat: {
        const int rows = n.value.lead_count();
        const int out_cols = n.value.last_dim();
        int col = 0;
        for (std::size_t pi = 0; pi < n.inputs.size(); ++pi) {
          Tensor& gp = at(n.inputs[pi]).grad;
          const int cols = gp.last_dim();
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
              gp.data[static_cast<std::size_t>(r) * cols + c] += g.at(r, col + c);
          col += cols;
        }
        break;
      }
      case Op::kSlice: {
        // Adjoint of slice: inject into columns [lo, hi), zeros elsewhere.
        Tensor& gx = in_grad(0);
        const int rows = gx.lead_count();
        const int in_cols = gx.last_dim();
        const int out_cols = n.slice_hi - n.slice_lo;
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < out_cols; ++c)
            gx.data[static_cast<std::size_t>(r) * in_cols + n.slice_lo + c] += g.at(r, c);
        break;
      }
      case Op::kMse:
      case Op::kSse: {
        const Tensor &a = in_val(0), &b = in_val(1);
        const double go = g.data[0];
        const double norm = n.op == Op::kMse ? 1.0 / static_cast<double>(a.numel()) : 1.0;
        Tensor &ga = in_grad(0), &gb = in_grad(1);
        for (std::size_t i = 0; i < a.data.size(); ++i) {
          const double d = 2.0 * norm * go * (a.data[i] - b.data[i]);
          ga.data[i] += d;
          gb.data[i] -= d;
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> param_ids_;
};

// Spec-surface free functions over the tape.
inline std::map<std::string, Tensor> forward_eval(Graph& graph,
                                                  const std::map<std::string, Tensor>& feeds) {
  return graph.forward_eval(feeds);
}

inline std::map<std::string, Tensor> backward(Graph& graph, NodeId loss_node) {
  return graph.backward(loss_node);
}

}  // namespace dsd
