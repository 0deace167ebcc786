#include "scam/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "scam/errors.hpp"

namespace scam {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Array& a) {
  return ConstMap(a.raw(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
}

MutMap as_matrix(Array& a) {
  return MutMap(a.raw(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ContractError("operands recorded on different tapes");
  return t;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace

// ---- Tensor / Var / Tape ------------------------------------------------

Array& Tensor::ensure_grad() {
  if (!has_grad) {
    grad = Array(value.shape(), 0.0);
    has_grad = true;
  }
  return grad;
}

void Tensor::zero_grad() {
  if (has_grad) grad.fill(0.0);
}

TensorPtr make_parameter(Array value) { return std::make_shared<Tensor>(std::move(value), true); }

const Array& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->tensor(id_).value;
}

Array Var::grad() const {
  if (!tape_) throw ContractError("grad() on an unbound Var");
  const Tensor& t = tape_->tensor(id_);
  return t.has_grad ? t.grad : Array(t.value.shape(), 0.0);
}

bool Var::requires_grad() const { return tape_ && tape_->tensor(id_).requires_grad; }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Array value) { return leaf(std::move(value), false); }

Var Tape::leaf(Array value, bool requires_grad) {
  Node node;
  node.tensor = std::make_shared<Tensor>(std::move(value), requires_grad);
  return push(std::move(node));
}

Var Tape::parameter(const TensorPtr& tensor) {
  if (!tensor) throw ContractError("null parameter tensor");
  Node node;
  node.tensor = tensor;
  return push(std::move(node));
}

Var Tape::record(Array value, std::vector<Var> inputs, BackwardRule rule) {
  Node node;
  bool needs = false;
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape() != this) throw ContractError("input recorded on a different tape");
    node.inputs.push_back(in.id());
    needs = needs || tensor(in.id()).requires_grad;
  }
  node.tensor = std::make_shared<Tensor>(std::move(value), needs);
  node.is_leaf = false;
  if (needs) node.rule = std::move(rule);
  return push(std::move(node));
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw ContractError("backward root belongs to another tape");
  if (tensor(root.id()).value.size() != 1) {
    throw ContractError("backward root must be scalar, got shape " + shape_string(root.shape()));
  }
  for (auto& node : nodes_) {
    if (!node.is_leaf) node.tensor->has_grad = false;
  }
  Tensor& r = tensor(root.id());
  if (!r.requires_grad) return;
  r.ensure_grad()[0] += 1.0;

  std::vector<Tensor*> inputs;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.is_leaf || !node.tensor->requires_grad || !node.tensor->has_grad) continue;
    inputs.clear();
    for (auto in : node.inputs) inputs.push_back(nodes_[in].tensor.get());
    node.rule(node.tensor->grad, inputs);
  }
}

void Tape::zero_grad() {
  for (auto& node : nodes_) node.tensor->zero_grad();
}

// ---- matmul -------------------------------------------------------------

Array matmul_array(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Array out({a.dim(0), b.dim(1)});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  Array out = matmul_array(a.value(), b.value());
  return t.record(std::move(out), {a, b}, [](const Array& g, std::span<Tensor* const> in) {
    const auto gm = as_matrix(g);
    if (in[0]->requires_grad) {
      as_matrix(in[0]->ensure_grad()).noalias() += gm * as_matrix(in[1]->value).transpose();
    }
    if (in[1]->requires_grad) {
      as_matrix(in[1]->ensure_grad()).noalias() += as_matrix(in[0]->value).transpose() * gm;
    }
  });
}

// ---- conv1d -------------------------------------------------------------

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                 std::size_t padding) {
  if (kernel < 1 || stride < 1) throw DimensionError("conv1d requires kernel >= 1 and stride >= 1");
  if (length + 2 * padding < kernel) {
    throw DimensionError("conv1d output length <= 0 (T=" + std::to_string(length) +
                         ", k=" + std::to_string(kernel) + ", p=" + std::to_string(padding) + ")");
  }
  return (length + 2 * padding - kernel) / stride + 1;
}

Var conv1d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t padding) {
  Tape& t = tape_of(x, w);
  tape_of(x, b);
  const Array& xv = x.value();
  const Array& wv = w.value();
  const Array& bv = b.value();
  const bool batched = xv.rank() == 3;
  if (!(xv.rank() == 2 || batched) || wv.rank() != 3 || bv.rank() != 1) {
    throw DimensionError("conv1d expects x [C x T] or [B x C x T], w [O x C x k], b [O]");
  }
  const std::size_t batch = batched ? xv.dim(0) : 1;
  const std::size_t cin = xv.dim(batched ? 1 : 0);
  const std::size_t len = xv.dim(batched ? 2 : 1);
  const std::size_t cout = wv.dim(0);
  const std::size_t k = wv.dim(2);
  if (wv.dim(1) != cin || bv.dim(0) != cout) {
    throw DimensionError("conv1d channel mismatch: x " + shape_string(xv.shape()) + ", w " +
                         shape_string(wv.shape()) + ", b " + shape_string(bv.shape()));
  }
  const std::size_t tout = conv1d_output_length(len, k, stride, padding);

  Array out(batched ? Shape{batch, cout, tout} : Shape{cout, tout});
  for (std::size_t n = 0; n < batch; ++n) {
    const double* xs = xv.raw() + n * cin * len;
    double* ys = out.raw() + n * cout * tout;
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t p = 0; p < tout; ++p) {
        double acc = bv[o];
        for (std::size_t c = 0; c < cin; ++c) {
          const double* wk = wv.raw() + (o * cin + c) * k;
          for (std::size_t j = 0; j < k; ++j) {
            const long pos = static_cast<long>(p * stride + j) - static_cast<long>(padding);
            if (pos < 0 || pos >= static_cast<long>(len)) continue;
            acc += wk[j] * xs[c * len + static_cast<std::size_t>(pos)];
          }
        }
        ys[o * tout + p] = acc;
      }
    }
  }

  auto rule = [=](const Array& g, std::span<Tensor* const> in) {
    const Array& xval = in[0]->value;
    const Array& wval = in[1]->value;
    Array* gx = in[0]->requires_grad ? &in[0]->ensure_grad() : nullptr;
    Array* gw = in[1]->requires_grad ? &in[1]->ensure_grad() : nullptr;
    Array* gb = in[2]->requires_grad ? &in[2]->ensure_grad() : nullptr;
    for (std::size_t n = 0; n < batch; ++n) {
      const double* xs = xval.raw() + n * cin * len;
      const double* gs = g.raw() + n * cout * tout;
      for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t p = 0; p < tout; ++p) {
          const double go = gs[o * tout + p];
          if (gb) (*gb)[o] += go;
          for (std::size_t c = 0; c < cin; ++c) {
            const std::size_t wbase = (o * cin + c) * k;
            for (std::size_t j = 0; j < k; ++j) {
              const long pos = static_cast<long>(p * stride + j) - static_cast<long>(padding);
              if (pos < 0 || pos >= static_cast<long>(len)) continue;
              const std::size_t xi = c * len + static_cast<std::size_t>(pos);
              if (gw) (*gw)[wbase + j] += go * xs[xi];
              if (gx) (*gx)[n * cin * len + xi] += go * wval[wbase + j];
            }
          }
        }
      }
    }
  };
  return t.record(std::move(out), {x, w, b}, rule);
}

// ---- elementwise --------------------------------------------------------

namespace {

enum class Side { same, scalar_a, scalar_b };

Side broadcast_side(const Array& a, const Array& b) {
  if (a.shape() == b.shape()) return Side::same;
  if (a.size() == 1) return Side::scalar_a;
  if (b.size() == 1) return Side::scalar_b;
  throw DimensionError("incompatible elementwise shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

// Adds d/d(operand) contributions; `local` gives the per-element partial.
template <class Local>
void accumulate_binary(Tensor* target, bool target_is_scalar, const Array& g, Local local) {
  if (!target->requires_grad) return;
  Array& dst = target->ensure_grad();
  if (target_is_scalar && g.size() != 1) {
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * local(i);
    dst[0] += acc;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * local(i);
  }
}

template <class Fn>
Array combine(const Array& a, const Array& b, Side side, Fn fn) {
  Array out(side == Side::scalar_a ? b.shape() : a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double av = side == Side::scalar_a ? a[0] : a[i];
    const double bv = side == Side::scalar_b ? b[0] : b[i];
    out[i] = fn(av, bv);
  }
  return out;
}

inline double pick(const Array& x, bool scalar, std::size_t i) { return scalar ? x[0] : x[i]; }

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Side side = broadcast_side(a.value(), b.value());
  Array out = combine(a.value(), b.value(), side, [](double x, double y) { return x + y; });
  return t.record(std::move(out), {a, b}, [side](const Array& g, std::span<Tensor* const> in) {
    accumulate_binary(in[0], side == Side::scalar_a, g, [](std::size_t) { return 1.0; });
    accumulate_binary(in[1], side == Side::scalar_b, g, [](std::size_t) { return 1.0; });
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Side side = broadcast_side(a.value(), b.value());
  Array out = combine(a.value(), b.value(), side, [](double x, double y) { return x - y; });
  return t.record(std::move(out), {a, b}, [side](const Array& g, std::span<Tensor* const> in) {
    accumulate_binary(in[0], side == Side::scalar_a, g, [](std::size_t) { return 1.0; });
    accumulate_binary(in[1], side == Side::scalar_b, g, [](std::size_t) { return -1.0; });
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Side side = broadcast_side(a.value(), b.value());
  Array out = combine(a.value(), b.value(), side, [](double x, double y) { return x * y; });
  return t.record(std::move(out), {a, b}, [side](const Array& g, std::span<Tensor* const> in) {
    const Array& av = in[0]->value;
    const Array& bv = in[1]->value;
    const bool sa = side == Side::scalar_a;
    const bool sb = side == Side::scalar_b;
    accumulate_binary(in[0], sa, g, [&](std::size_t i) { return pick(bv, sb, i); });
    accumulate_binary(in[1], sb, g, [&](std::size_t i) { return pick(av, sa, i); });
  });
}

namespace {

template <class Fwd, class Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  Array out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return t.record(std::move(out), {x}, [deriv](const Array& g, std::span<Tensor* const> in) {
    if (!in[0]->requires_grad) return;
    Array& dst = in[0]->ensure_grad();
    const Array& xval = in[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * deriv(xval[i]);
  });
}

}  // namespace

Var abs(const Var& x) {
  // sign(0) := 0
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var scale(const Var& x, double factor) {
  return unary(
      x, [factor](double v) { return factor * v; }, [factor](double) { return factor; });
}

Var reciprocal(const Var& x) {
  for (double v : x.value().data()) {
    if (v == 0.0) throw ContractError("reciprocal of zero");
  }
  return unary(
      x, [](double v) { return 1.0 / v; }, [](double v) { return -1.0 / (v * v); });
}

// ---- reductions ---------------------------------------------------------

namespace {

// Output flat index for every input element when `axes` are dropped.
std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<bool>& reduced,
                                       Shape& out_shape) {
  out_shape.clear();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!reduced[i]) out_shape.push_back(shape[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const auto in_strides = strides_of(shape);
  Shape kept;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (!reduced[i]) kept.push_back(shape[i]);
  }
  const auto kept_strides = strides_of(kept.empty() ? Shape{1} : kept);
  const std::size_t n = shape_size(shape);
  std::vector<std::size_t> map(n);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat;
    std::size_t out = 0;
    std::size_t k = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
      const std::size_t idx = rem / in_strides[d];
      rem %= in_strides[d];
      if (!reduced[d]) out += idx * kept_strides[k++];
    }
    map[flat] = out;
  }
  return map;
}

Var reduce(const Var& x, std::vector<std::size_t> axes, bool average) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  std::vector<bool> reduced(xv.rank(), false);
  for (auto a : axes) {
    if (a >= xv.rank()) {
      throw DimensionError("reduction axis " + std::to_string(a) + " invalid for shape " +
                           shape_string(xv.shape()));
    }
    reduced[a] = true;
  }
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(reduction_map(xv.shape(), reduced, out_shape));
  Array out(out_shape, 0.0);
  const double factor = average ? static_cast<double>(out.size()) / static_cast<double>(xv.size()) : 1.0;
  for (std::size_t i = 0; i < xv.size(); ++i) out[(*map)[i]] += xv[i];
  if (average) {
    for (auto& v : out.data()) v *= factor;
  }
  return t.record(std::move(out), {x}, [map, factor](const Array& g, std::span<Tensor* const> in) {
    if (!in[0]->requires_grad) return;
    Array& dst = in[0]->ensure_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[(*map)[i]] * factor;
  });
}

Var reduce_all(const Var& x, bool average) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  double acc = 0.0;
  for (double v : xv.data()) acc += v;
  const double factor = average ? 1.0 / static_cast<double>(xv.size()) : 1.0;
  return t.record(Array::scalar(acc * factor), {x}, [factor](const Array& g, std::span<Tensor* const> in) {
    if (!in[0]->requires_grad) return;
    Array& dst = in[0]->ensure_grad();
    const double gv = g[0] * factor;
    for (auto& v : dst.data()) v += gv;
  });
}

}  // namespace

Var sum(const Var& x) { return reduce_all(x, false); }
Var mean(const Var& x) { return reduce_all(x, true); }
Var sum(const Var& x, std::vector<std::size_t> axes) { return reduce(x, std::move(axes), false); }
Var mean(const Var& x, std::vector<std::size_t> axes) { return reduce(x, std::move(axes), true); }

// ---- structural ---------------------------------------------------------

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero parts");
  Tape& t = tape_of(parts.front());
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> chunk;
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (const auto& p : parts) {
    tape_of(parts.front(), p);
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw DimensionError("concat shape mismatch " + shape_string(first) + " vs " + shape_string(s));
      }
    }
    out_shape[axis] += s[axis];
    chunk.push_back(s[axis] * inner);
  }
  Array out(out_shape);
  std::size_t row = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    row += chunk[k];
  }
  const std::size_t row_len = row;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& pv = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.raw() + o * chunk[k], chunk[k], out.raw() + o * row_len + offset);
    }
    offset += chunk[k];
  }
  return t.record(std::move(out), parts, [chunk, outer, row_len](const Array& g, std::span<Tensor* const> in) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      if (in[k]->requires_grad) {
        Array& dst = in[k]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g.raw() + o * row_len + off;
          double* d = dst.raw() + o * chunk[k];
          for (std::size_t i = 0; i < chunk[k]; ++i) d[i] += src[i];
        }
      }
      off += chunk[k];
    }
  });
}

Array permute_array(const Array& x, const std::vector<std::size_t>& order) {
  const Shape& s = x.shape();
  if (order.size() != s.size()) throw DimensionError("permute order rank mismatch");
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= s.size() || seen[order[i]]) throw DimensionError("invalid permutation");
    seen[order[i]] = true;
    out_shape[i] = s[order[i]];
  }
  const auto in_strides = strides_of(s);
  const auto out_strides = strides_of(out_shape);
  Array out(out_shape);
  const std::size_t n = x.size();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat;
    std::size_t src = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      const std::size_t idx = rem / out_strides[d];
      rem %= out_strides[d];
      src += idx * in_strides[order[d]];
    }
    out[flat] = x[src];
  }
  return out;
}

Var permute(const Var& x, std::vector<std::size_t> order) {
  Tape& t = tape_of(x);
  Array out = permute_array(x.value(), order);
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
  return t.record(std::move(out), {x}, [inverse](const Array& g, std::span<Tensor* const> in) {
    if (!in[0]->requires_grad) return;
    Array back = permute_array(g, inverse);
    Array& dst = in[0]->ensure_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += back[i];
  });
}

Var transpose(const Var& x) {
  if (x.shape().size() != 2) throw DimensionError("transpose expects a matrix");
  return permute(x, {1, 0});
}

Var reshape(const Var& x, Shape shape) {
  Tape& t = tape_of(x);
  Array out = x.value().reshaped(std::move(shape));
  return t.record(std::move(out), {x}, [](const Array& g, std::span<Tensor* const> in) {
    if (!in[0]->requires_grad) return;
    Array& dst = in[0]->ensure_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  });
}

Var stop_gradient(const Var& x) { return tape_of(x).constant(x.value()); }

}  // namespace scam
