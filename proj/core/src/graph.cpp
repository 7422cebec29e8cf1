#include "advdet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "advdet/errors.hpp"

namespace advdet {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kInput: return "input";
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kAffine: return "affine";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kMaxPool2d: return "max_pool2d";
    case OpKind::kRelu: return "relu";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kNeg: return "neg";
    case OpKind::kScale: return "scale";
    case OpKind::kShift: return "shift";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMax: return "max";
    case OpKind::kGather: return "gather";
    case OpKind::kConcat: return "concat";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kReshape: return "reshape";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

std::string Graph::label(NodeId id) const {
  const Node& n = nodes_[id.index];
  return n.name + " (" + op_name(n.kind) + " #" + std::to_string(id.index) + ")";
}

const Node& Graph::checked(NodeId id, const char* op) const {
  if (id.index >= nodes_.size()) {
    throw ShapeError(std::string(op) + ": input node #" +
                     std::to_string(id.index) + " does not exist");
  }
  return nodes_[id.index];
}

NodeId Graph::push(Node node) {
  if (node.name.empty()) {
    node.name = std::string(op_name(node.kind)) + "_" + std::to_string(nodes_.size());
  }
  nodes_.push_back(std::move(node));
  return NodeId{nodes_.size() - 1};
}

NodeId Graph::named_leaf(OpKind kind, std::string name, Shape shape) {
  if (name.empty()) throw ContractError("graph leaves need a name");
  if (find_leaf(name)) throw ContractError("duplicate graph leaf '" + name + "'");
  Node n;
  n.kind = kind;
  n.name = std::move(name);
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::input(std::string name, Shape shape) {
  return named_leaf(OpKind::kInput, std::move(name), std::move(shape));
}

NodeId Graph::parameter(std::string name, Shape shape) {
  return named_leaf(OpKind::kParameter, std::move(name), std::move(shape));
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.shape = value.shape();
  n.constant = std::move(value);
  return push(std::move(n));
}

std::optional<NodeId> Graph::find_leaf(const std::string& name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if ((n.kind == OpKind::kInput || n.kind == OpKind::kParameter) && n.name == name) {
      return NodeId{i};
    }
  }
  return std::nullopt;
}

std::vector<NodeId> Graph::leaves() const {
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const OpKind k = nodes_[i].kind;
    if (k == OpKind::kInput || k == OpKind::kParameter) out.push_back(NodeId{i});
  }
  return out;
}

NodeId Graph::affine(NodeId x, NodeId weight, NodeId bias) {
  const Shape& xs = checked(x, "affine").shape;
  const Shape& ws = checked(weight, "affine").shape;
  const Shape& bs = checked(bias, "affine").shape;
  if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1 || ws[1] != xs[1] ||
      bs[0] != ws[0]) {
    throw ShapeError("affine: incompatible shapes x " + shape_string(xs) + ", weight " +
                     shape_string(ws) + ", bias " + shape_string(bs) + " at " + label(x));
  }
  Node n;
  n.kind = OpKind::kAffine;
  n.inputs = {x, weight, bias};
  n.shape = {xs[0], ws[0]};
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId weight, NodeId bias, std::size_t padding) {
  const Shape& xs = checked(x, "conv2d").shape;
  const Shape& ws = checked(weight, "conv2d").shape;
  const Shape& bs = checked(bias, "conv2d").shape;
  if (xs.size() != 4 || ws.size() != 4 || bs.size() != 1 || ws[1] != xs[1] ||
      ws[2] != ws[3] || bs[0] != ws[0] || xs[2] + 2 * padding < ws[2] ||
      xs[3] + 2 * padding < ws[3]) {
    throw ShapeError("conv2d: incompatible shapes x " + shape_string(xs) + ", weight " +
                     shape_string(ws) + ", bias " + shape_string(bs) + " at " + label(x));
  }
  Node n;
  n.kind = OpKind::kConv2d;
  n.inputs = {x, weight, bias};
  n.padding = padding;
  n.shape = {xs[0], ws[0], xs[2] + 2 * padding - ws[2] + 1, xs[3] + 2 * padding - ws[3] + 1};
  return push(std::move(n));
}

NodeId Graph::max_pool2d(NodeId x, std::size_t window) {
  const Shape& xs = checked(x, "max_pool2d").shape;
  if (xs.size() != 4 || window == 0 || xs[2] < window || xs[3] < window) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) +
                     " does not fit " + shape_string(xs) + " at " + label(x));
  }
  Node n;
  n.kind = OpKind::kMaxPool2d;
  n.inputs = {x};
  n.window = window;
  n.shape = {xs[0], xs[1], xs[2] / window, xs[3] / window};
  return push(std::move(n));
}

namespace {

Node unary(OpKind kind, NodeId x, Shape shape) {
  Node n;
  n.kind = kind;
  n.inputs = {x};
  n.shape = std::move(shape);
  return n;
}

}  // namespace

NodeId Graph::relu(NodeId x) {
  return push(unary(OpKind::kRelu, x, checked(x, "relu").shape));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Shape& as = checked(a, "add").shape;
  const Shape& bs = checked(b, "add").shape;
  if (as != bs) {
    throw ShapeError("add: shape " + shape_string(as) + " vs " + shape_string(bs) +
                     " at " + label(a) + ", " + label(b));
  }
  Node n = unary(OpKind::kAdd, a, as);
  n.inputs.push_back(b);
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Shape& as = checked(a, "mul").shape;
  const Shape& bs = checked(b, "mul").shape;
  if (as != bs) {
    throw ShapeError("mul: shape " + shape_string(as) + " vs " + shape_string(bs) +
                     " at " + label(a) + ", " + label(b));
  }
  Node n = unary(OpKind::kMul, a, as);
  n.inputs.push_back(b);
  return push(std::move(n));
}

NodeId Graph::neg(NodeId x) { return push(unary(OpKind::kNeg, x, checked(x, "neg").shape)); }

NodeId Graph::scale(NodeId x, double factor) {
  Node n = unary(OpKind::kScale, x, checked(x, "scale").shape);
  n.factor = factor;
  return push(std::move(n));
}

NodeId Graph::shift(NodeId x, double offset) {
  Node n = unary(OpKind::kShift, x, checked(x, "shift").shape);
  n.factor = offset;
  return push(std::move(n));
}

NodeId Graph::log(NodeId x) { return push(unary(OpKind::kLog, x, checked(x, "log").shape)); }
NodeId Graph::exp(NodeId x) { return push(unary(OpKind::kExp, x, checked(x, "exp").shape)); }

NodeId Graph::sum(NodeId x) {
  checked(x, "sum");
  return push(unary(OpKind::kSum, x, {}));
}

NodeId Graph::mean(NodeId x) {
  if (shape_size(checked(x, "mean").shape) == 0) throw ShapeError("mean of empty tensor");
  return push(unary(OpKind::kMean, x, {}));
}

NodeId Graph::max(NodeId x) {
  if (shape_size(checked(x, "max").shape) == 0) throw ShapeError("max of empty tensor");
  return push(unary(OpKind::kMax, x, {}));
}

NodeId Graph::gather(NodeId x, std::vector<std::size_t> flat_indices) {
  const std::size_t n_in = shape_size(checked(x, "gather").shape);
  for (std::size_t i : flat_indices) {
    if (i >= n_in) {
      throw ShapeError("gather: index " + std::to_string(i) + " out of range for " +
                       shape_string(shape(x)) + " at " + label(x));
    }
  }
  Node n = unary(OpKind::kGather, x, {flat_indices.size()});
  n.indices = std::move(flat_indices);
  return push(std::move(n));
}

NodeId Graph::concat(std::span<const NodeId> parts) {
  if (parts.empty()) throw ShapeError("concat of zero parts");
  Node n;
  n.kind = OpKind::kConcat;
  std::size_t total = 0;
  for (NodeId p : parts) {
    total += shape_size(checked(p, "concat").shape);
    n.inputs.push_back(p);
  }
  n.shape = {total};
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId x, std::size_t axis) {
  const Shape& xs = checked(x, "softmax").shape;
  if (axis >= xs.size()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                     shape_string(xs) + " at " + label(x));
  }
  Node n = unary(OpKind::kSoftmax, x, xs);
  n.axis = axis;
  return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId x, std::size_t axis) {
  const Shape& xs = checked(x, "log_softmax").shape;
  if (axis >= xs.size()) {
    throw ShapeError("log_softmax: axis " + std::to_string(axis) + " invalid for " +
                     shape_string(xs) + " at " + label(x));
  }
  Node n = unary(OpKind::kLogSoftmax, x, xs);
  n.axis = axis;
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, Shape shape) {
  const Shape& xs = checked(x, "reshape").shape;
  if (shape_size(xs) != shape_size(shape)) {
    throw ShapeError("reshape: " + shape_string(xs) + " to " + shape_string(shape) +
                     " at " + label(x));
  }
  return push(unary(OpKind::kReshape, x, std::move(shape)));
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Max-subtracted log-softmax; softmax is exp() of the result.
void log_softmax_kernel(const Tensor& in, std::size_t axis, Tensor& out) {
  const AxisSplit s = split_axis(in.shape(), axis);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) m = std::max(m, in[base + k * s.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(in[base + k * s.inner] - m);
      const double log_total = std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k) {
        out[base + k * s.inner] = (in[base + k * s.inner] - m) - log_total;
      }
    }
  }
}

void affine_forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* xr = x.data() + r * in;
    double* yr = y.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = w.data() + o * in;
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wo[i];
      yr[o] = acc + b[o];
    }
  }
}

void affine_backward(const Tensor& x, const Tensor& w, const Tensor& g, Tensor* gx,
                     Tensor* gw, Tensor* gb) {
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* xr = x.data() + r * in;
    const double* gr = g.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double go = gr[o];
      if (gb) (*gb)[o] += go;
      if (go == 0.0) continue;
      if (gw) {
        double* gwo = gw->data() + o * in;
        for (std::size_t i = 0; i < in; ++i) gwo[i] += go * xr[i];
      }
      if (gx) {
        const double* wo = w.data() + o * in;
        double* gxr = gx->data() + r * in;
        for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wo[i];
      }
    }
  }
}

struct ConvDims {
  std::size_t batch, cin, h, w, cout, k, pad, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, std::size_t pad) {
  ConvDims d{};
  d.batch = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.k = w.dim(2);
  d.pad = pad;
  d.oh = d.h + 2 * pad - d.k + 1;
  d.ow = d.w + 2 * pad - d.k + 1;
  return d;
}

// Output positions [lo, hi) whose input coordinate o + kk - pad is in [0, n).
inline void valid_range(std::size_t kk, std::size_t pad, std::size_t n, std::size_t out,
                        std::size_t& lo, std::size_t& hi) {
  lo = kk < pad ? pad - kk : 0;
  hi = std::min(out, n + pad - kk);
  if (hi < lo) hi = lo;
}

void conv_forward(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad,
                  Tensor& y) {
  const ConvDims d = conv_dims(x, w, pad);
  const std::size_t in_plane = d.h * d.w, out_plane = d.oh * d.ow;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      double* yp = y.data() + (n * d.cout + co) * out_plane;
      std::fill(yp, yp + out_plane, b[co]);
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const double* xp = x.data() + (n * d.cin + ci) * in_plane;
        const double* wk = w.data() + (co * d.cin + ci) * d.k * d.k;
        for (std::size_t ky = 0; ky < d.k; ++ky) {
          std::size_t y0, y1;
          valid_range(ky, d.pad, d.h, d.oh, y0, y1);
          for (std::size_t kx = 0; kx < d.k; ++kx) {
            const double wv = wk[ky * d.k + kx];
            std::size_t x0, x1;
            valid_range(kx, d.pad, d.w, d.ow, x0, x1);
            for (std::size_t oy = y0; oy < y1; ++oy) {
              const double* xr = xp + (oy + ky - d.pad) * d.w + kx - d.pad;
              double* yr = yp + oy * d.ow;
              for (std::size_t ox = x0; ox < x1; ++ox) yr[ox] += wv * xr[ox];
            }
          }
        }
      }
    }
  }
}

void conv_backward(const Tensor& x, const Tensor& w, const Tensor& g, std::size_t pad,
                   Tensor* gx, Tensor* gw, Tensor* gb) {
  const ConvDims d = conv_dims(x, w, pad);
  const std::size_t in_plane = d.h * d.w, out_plane = d.oh * d.ow;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t co = 0; co < d.cout; ++co) {
      const double* gp = g.data() + (n * d.cout + co) * out_plane;
      if (gb) {
        double acc = 0.0;
        for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
        (*gb)[co] += acc;
      }
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const double* xp = x.data() + (n * d.cin + ci) * in_plane;
        const double* wk = w.data() + (co * d.cin + ci) * d.k * d.k;
        double* gxp = gx ? gx->data() + (n * d.cin + ci) * in_plane : nullptr;
        double* gwk = gw ? gw->data() + (co * d.cin + ci) * d.k * d.k : nullptr;
        for (std::size_t ky = 0; ky < d.k; ++ky) {
          std::size_t y0, y1;
          valid_range(ky, d.pad, d.h, d.oh, y0, y1);
          for (std::size_t kx = 0; kx < d.k; ++kx) {
            const double wv = wk[ky * d.k + kx];
            std::size_t x0, x1;
            valid_range(kx, d.pad, d.w, d.ow, x0, x1);
            double wacc = 0.0;
            for (std::size_t oy = y0; oy < y1; ++oy) {
              const std::size_t off = (oy + ky - d.pad) * d.w + kx - d.pad;
              const double* gr = gp + oy * d.ow;
              const double* xr = xp + off;
              for (std::size_t ox = x0; ox < x1; ++ox) wacc += gr[ox] * xr[ox];
              if (gxp) {
                double* gxr = gxp + off;
                for (std::size_t ox = x0; ox < x1; ++ox) gxr[ox] += gr[ox] * wv;
              }
            }
            if (gwk) gwk[ky * d.k + kx] += wacc;
          }
        }
      }
    }
  }
}

void max_pool_forward(const Tensor& x, std::size_t win, Tensor& y,
                      std::vector<std::size_t>& route) {
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / win, ow = w / win;
  route.assign(y.size(), 0);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + oy * win * w + ox * win;
        for (std::size_t dy = 0; dy < win; ++dy) {
          for (std::size_t dx = 0; dx < win; ++dx) {
            const std::size_t idx = p * h * w + (oy * win + dy) * w + ox * win + dx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        y[o] = x[best];
        route[o] = best;
      }
    }
  }
}

void check_finite(const Graph& g, std::size_t i, const Tensor& t) {
  if (!t.all_finite()) {
    const Node& n = g.node(NodeId{i});
    throw NumericError("node '" + n.name + "' (" + op_name(n.kind) +
                       ") produced non-finite values");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward

Execution forward(const Graph& graph, const TensorMap& bindings) {
  Execution run;
  run.values_.resize(graph.size());
  run.routes_.resize(graph.size());
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(NodeId{i});
    auto in = [&](std::size_t k) -> const Tensor& { return run.values_[n.inputs[k].index]; };
    Tensor& out = run.values_[i];
    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kParameter: {
        auto it = bindings.find(n.name);
        if (it == bindings.end()) {
          throw ShapeError("no binding for " + std::string(op_name(n.kind)) + " '" +
                           n.name + "'");
        }
        if (it->second.shape() != n.shape) {
          throw ShapeError("binding for '" + n.name + "' has shape " +
                           shape_string(it->second.shape()) + ", node expects " +
                           shape_string(n.shape));
        }
        out = it->second;
        break;
      }
      case OpKind::kConstant:
        out = n.constant;
        break;
      case OpKind::kAffine:
        out = Tensor(n.shape);
        affine_forward(in(0), in(1), in(2), out);
        break;
      case OpKind::kConv2d:
        out = Tensor(n.shape);
        conv_forward(in(0), in(1), in(2), n.padding, out);
        break;
      case OpKind::kMaxPool2d:
        out = Tensor(n.shape);
        max_pool_forward(in(0), n.window, out, run.routes_[i]);
        break;
      case OpKind::kRelu:
        out = in(0);
        for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
        break;
      case OpKind::kAdd:
        out = in(0);
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += in(1)[k];
        break;
      case OpKind::kMul:
        out = in(0);
        for (std::size_t k = 0; k < out.size(); ++k) out[k] *= in(1)[k];
        break;
      case OpKind::kNeg:
        out = in(0);
        for (double& v : out.values()) v = -v;
        break;
      case OpKind::kScale:
        out = in(0);
        for (double& v : out.values()) v *= n.factor;
        break;
      case OpKind::kShift:
        out = in(0);
        for (double& v : out.values()) v += n.factor;
        break;
      case OpKind::kLog:
        out = in(0);
        for (double& v : out.values()) v = std::log(v);
        break;
      case OpKind::kExp:
        out = in(0);
        for (double& v : out.values()) v = std::exp(v);
        break;
      case OpKind::kSum:
      case OpKind::kMean: {
        double acc = 0.0;
        for (double v : in(0).values()) acc += v;
        if (n.kind == OpKind::kMean) acc /= static_cast<double>(in(0).size());
        out = Tensor::scalar(acc);
        break;
      }
      case OpKind::kMax: {
        const auto vals = in(0).values();
        const auto it = std::max_element(vals.begin(), vals.end());
        run.routes_[i] = {static_cast<std::size_t>(it - vals.begin())};
        out = Tensor::scalar(*it);
        break;
      }
      case OpKind::kGather: {
        out = Tensor(n.shape);
        for (std::size_t k = 0; k < n.indices.size(); ++k) out[k] = in(0)[n.indices[k]];
        break;
      }
      case OpKind::kConcat: {
        out = Tensor(n.shape);
        std::size_t pos = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          for (double v : in(k).values()) out[pos++] = v;
        }
        break;
      }
      case OpKind::kSoftmax:
        out = Tensor(n.shape);
        log_softmax_kernel(in(0), n.axis, out);
        for (double& v : out.values()) v = std::exp(v);
        break;
      case OpKind::kLogSoftmax:
        out = Tensor(n.shape);
        log_softmax_kernel(in(0), n.axis, out);
        break;
      case OpKind::kReshape:
        out = in(0).reshaped(n.shape);
        break;
    }
    check_finite(graph, i, out);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Backward

TensorMap backward_impl(const Graph& graph, const Execution& run, NodeId output,
                        const std::vector<bool>& needed) {
  if (output.index >= graph.size() || run.values_.size() != graph.size()) {
    throw ContractError("backward: output node does not belong to this execution");
  }
  if (shape_size(graph.shape(output)) != 1) {
    throw ContractError("backward: output '" + graph.node(output).name +
                        "' is not a scalar (shape " + shape_string(graph.shape(output)) +
                        ")");
  }

  std::vector<Tensor> grads(graph.size());
  std::vector<bool> live(graph.size(), false);
  Tensor sink;
  auto grad_ptr = [&](NodeId id) -> Tensor* {
    if (!needed[id.index]) return nullptr;
    if (!live[id.index]) {
      grads[id.index] = Tensor(graph.shape(id));
      live[id.index] = true;
    }
    return &grads[id.index];
  };
  // Accumulations into nodes nobody asked for land in a scratch tensor.
  auto grad_of = [&](NodeId id) -> Tensor& {
    if (!needed[id.index]) {
      sink = Tensor(graph.shape(id));
      return sink;
    }
    if (!live[id.index]) {
      grads[id.index] = Tensor(graph.shape(id));
      live[id.index] = true;
    }
    return grads[id.index];
  };
  if (!needed[output.index]) return {};
  grad_of(output)[0] = 1.0;

  for (std::size_t step = output.index + 1; step-- > 0;) {
    if (!live[step]) continue;
    const Node& n = graph.node(NodeId{step});
    const Tensor& g = grads[step];
    const Tensor& y = run.values_[step];
    auto in = [&](std::size_t k) -> const Tensor& { return run.values_[n.inputs[k].index]; };

    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kParameter:
      case OpKind::kConstant:
        break;
      case OpKind::kAffine:
        affine_backward(in(0), in(1), g, grad_ptr(n.inputs[0]), grad_ptr(n.inputs[1]),
                        grad_ptr(n.inputs[2]));
        break;
      case OpKind::kConv2d:
        conv_backward(in(0), in(1), g, n.padding, grad_ptr(n.inputs[0]),
                      grad_ptr(n.inputs[1]), grad_ptr(n.inputs[2]));
        break;
      case OpKind::kMaxPool2d: {
        Tensor& gx = grad_of(n.inputs[0]);
        const auto& route = run.routes_[step];
        for (std::size_t k = 0; k < g.size(); ++k) gx[route[k]] += g[k];
        break;
      }
      case OpKind::kRelu: {
        Tensor& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (in(0)[k] > 0.0) gx[k] += g[k];
        }
        break;
      }
      case OpKind::kAdd: {
        for (std::size_t side = 0; side < 2; ++side) {
          Tensor& gx = grad_of(n.inputs[side]);
          for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
        }
        break;
      }
      case OpKind::kMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        Tensor& ga = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * b[k];
        Tensor& gb = grad_of(n.inputs[1]);
        for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * a[k];
        break;
      }
      case OpKind::kNeg: {
        Tensor& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] -= g[k];
        break;
      }
      case OpKind::kScale: {
        Tensor& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * n.factor;
        break;
      }
      case OpKind::kShift:
      case OpKind::kReshape: {
        Tensor& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
        break;
      }
      case OpKind::kLog: {
        Tensor& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] / in(0)[k];
        break;
      }
      case OpKind::kExp: {
        Tensor& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * y[k];
        break;
      }
      case OpKind::kSum:
      case OpKind::kMean: {
        Tensor& gx = grad_of(n.inputs[0]);
        double seed = g[0];
        if (n.kind == OpKind::kMean) seed /= static_cast<double>(gx.size());
        for (double& v : gx.values()) v += seed;
        break;
      }
      case OpKind::kMax:
        grad_of(n.inputs[0])[run.routes_[step][0]] += g[0];
        break;
      case OpKind::kGather: {
        Tensor& gx = grad_of(n.inputs[0]);
        for (std::size_t k = 0; k < n.indices.size(); ++k) gx[n.indices[k]] += g[k];
        break;
      }
      case OpKind::kConcat: {
        std::size_t pos = 0;
        for (NodeId part : n.inputs) {
          Tensor& gx = grad_of(part);
          for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += g[pos++];
        }
        break;
      }
      case OpKind::kSoftmax:
      case OpKind::kLogSoftmax: {
        Tensor& gx = grad_of(n.inputs[0]);
        const AxisSplit s = split_axis(n.shape, n.axis);
        const bool is_log = n.kind == OpKind::kLogSoftmax;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            double dot = 0.0;
            for (std::size_t k = 0; k < s.extent; ++k) {
              const std::size_t idx = base + k * s.inner;
              dot += is_log ? g[idx] : g[idx] * y[idx];
            }
            for (std::size_t k = 0; k < s.extent; ++k) {
              const std::size_t idx = base + k * s.inner;
              if (is_log) {
                gx[idx] += g[idx] - std::exp(y[idx]) * dot;
              } else {
                gx[idx] += y[idx] * (g[idx] - dot);
              }
            }
          }
        }
        break;
      }
    }
  }

  TensorMap out;
  for (NodeId leaf : graph.leaves()) {
    if (!needed[leaf.index]) continue;
    out[graph.node(leaf).name] = live[leaf.index] ? std::move(grads[leaf.index])
                                                  : Tensor(graph.shape(leaf));
  }
  return out;
}

namespace {

// Marks every node that lies on a path from a requested leaf.
std::vector<bool> dependents_of(const Graph& graph, std::span<const NodeId> wrt) {
  std::vector<bool> needed(graph.size(), false);
  for (NodeId id : wrt) needed.at(id.index) = true;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    for (NodeId in : graph.node(NodeId{i}).inputs) {
      if (needed[in.index]) needed[i] = true;
    }
  }
  return needed;
}

}  // namespace

TensorMap backward(const Graph& graph, const Execution& run, NodeId output) {
  const std::vector<NodeId> leaves = graph.leaves();
  TensorMap out = backward_impl(graph, run, output, dependents_of(graph, leaves));
  // Leaves the output does not depend on still get a zero gradient.
  for (NodeId leaf : leaves) {
    out.try_emplace(graph.node(leaf).name, graph.shape(leaf));
  }
  return out;
}

TensorMap backward(const Graph& graph, const Execution& run, NodeId output,
                   std::span<const NodeId> wrt) {
  for (NodeId id : wrt) {
    const OpKind k = graph.node(id).kind;
    if (k != OpKind::kInput && k != OpKind::kParameter) {
      throw ContractError("backward: '" + graph.node(id).name + "' is not a named leaf");
    }
  }
  TensorMap out = backward_impl(graph, run, output, dependents_of(graph, wrt));
  for (NodeId leaf : wrt) out.try_emplace(graph.node(leaf).name, graph.shape(leaf));
  return out;
}

}  // namespace advdet
