#include "tact/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tact {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

// Decomposition of a shape around one axis: index = (o*n + j)*inner + i.
struct AxisView {
  std::size_t outer, n, inner;
};

AxisView axis_view(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  AxisView v{1, static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) v.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
    v.inner *= static_cast<std::size_t>(shape[i]);
  }
  return v;
}

template <typename S>
void require_2d(const Tensor<S>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

// C[MxP] += A[MxK] * B[KxP]
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, int m, int k, int p) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    S* crow = c + static_cast<std::size_t>(i) * p;
    for (int l = 0; l < k; ++l) {
      const S ail = arow[l];
      const S* brow = b + static_cast<std::size_t>(l) * p;
      for (int j = 0; j < p; ++j) crow[j] += ail * brow[j];
    }
  }
}

// C[MxK] += A[MxP] * B[KxP]^T
template <typename S>
void gemm_nt_acc(const S* a, const S* b, S* c, int m, int p, int k) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * p;
    S* crow = c + static_cast<std::size_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      const S* brow = b + static_cast<std::size_t>(l) * p;
      S acc = 0;
      for (int j = 0; j < p; ++j) acc += arow[j] * brow[j];
      crow[l] += acc;
    }
  }
}

// C[KxP] += A[MxK]^T * B[MxP]
template <typename S>
void gemm_tn_acc(const S* a, const S* b, S* c, int m, int k, int p) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    const S* brow = b + static_cast<std::size_t>(i) * p;
    for (int l = 0; l < k; ++l) {
      const S ail = arow[l];
      S* crow = c + static_cast<std::size_t>(l) * p;
      for (int j = 0; j < p; ++j) crow[j] += ail * brow[j];
    }
  }
}

template <typename S>
void debug_check(const Tensor<S>& t, const char* op) {
#ifndef NDEBUG
  check_finite(t, op);
#else
  (void)t;
  (void)op;
#endif
}

template <typename S>
bool any_requires_grad(std::initializer_list<Tensor<S>> ts) {
  for (const auto& t : ts) {
    if (t.requires_grad()) return true;
  }
  return false;
}

}  // namespace

template <typename S>
Tensor<S> Tensor<S>::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  auto s = std::make_shared<TensorStorage<S>>();
  s->values.assign(shape_numel(shape), S{0});
  s->shape = std::move(shape);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

template <typename S>
Tensor<S> Tensor<S>::full(Shape shape, S value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::from_values(Shape shape, std::vector<S> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_values: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto s = std::make_shared<TensorStorage<S>>();
  s->shape = std::move(shape);
  s->values = std::move(values);
  s->requires_grad = requires_grad;
  Tensor t(std::move(s));
  debug_check(t, "from_values");
  return t;
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value, bool requires_grad) {
  return from_values({}, {value}, requires_grad);
}

template <typename S>
S Tensor<S>::item() const {
  if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
  return s_->values[0];
}

template <typename S>
void Tensor<S>::ensure_grad() {
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), S{0});
}

template <typename S>
Tensor<S> Tensor<S>::clone() const {
  auto s = std::make_shared<TensorStorage<S>>(*s_);
  return Tensor(std::move(s));
}

template <typename S>
void Tape<S>::backward(Tensor<S> loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  loss.ensure_grad();
  loss.grad()[0] += S{1};
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

template <typename S>
void check_finite(const Tensor<S>& t, const char* what) {
  for (S v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in ") + what);
    }
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros({m, p}, false);
  gemm_acc(a.values().data(), b.values().data(), out.values().data(), m, k, p);
  debug_check(out, "matmul");
  if (any_requires_grad({a, b})) {
    out.set_requires_grad(true);
    tape.record("matmul", [a = a, b = b, out = out, m, k, p]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      if (a.requires_grad()) {
        a.ensure_grad();
        gemm_nt_acc(g, b.values().data(), a.grad().data(), m, p, k);
      }
      if (b.requires_grad()) {
        b.ensure_grad();
        gemm_tn_acc(a.values().data(), g, b.grad().data(), m, k, p);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose_last_two(Tape<S>& tape, const Tensor<S>& x) {
  require_2d(x, "transpose_last_two");
  const int m = x.dim(0), n = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n, m}, false);
  {
    const S* in = x.values().data();
    S* o = out.values().data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) o[static_cast<std::size_t>(j) * m + i] = in[static_cast<std::size_t>(i) * n + j];
  }
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("transpose", [x = x, out = out, m, n]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      const S* g = out.grad().data();
      S* xg = x.grad().data();
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) xg[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& y) {
  const bool bias_broadcast =
      y.rank() == 1 && x.rank() >= 1 && x.shape().back() == y.dim(0) && x.shape() != y.shape();
  if (!bias_broadcast && x.shape() != y.shape()) {
    throw ShapeError("add: shapes disagree, " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape(), false);
  const std::size_t n = x.size();
  const std::size_t d = bias_broadcast ? static_cast<std::size_t>(y.dim(0)) : n;
  {
    const S* xs = x.values().data();
    const S* ys = y.values().data();
    S* o = out.values().data();
    if (bias_broadcast) {
      for (std::size_t i = 0; i < n; ++i) o[i] = xs[i] + ys[i % d];
    } else {
      for (std::size_t i = 0; i < n; ++i) o[i] = xs[i] + ys[i];
    }
  }
  debug_check(out, "add");
  if (any_requires_grad({x, y})) {
    out.set_requires_grad(true);
    tape.record("add", [x = x, y = y, out = out, n, d, bias_broadcast]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      if (x.requires_grad()) {
        x.ensure_grad();
        S* xg = x.grad().data();
        for (std::size_t i = 0; i < n; ++i) xg[i] += g[i];
      }
      if (y.requires_grad()) {
        y.ensure_grad();
        S* yg = y.grad().data();
        if (bias_broadcast) {
          for (std::size_t i = 0; i < n; ++i) yg[i % d] += g[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) yg[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& y) {
  if (x.shape() != y.shape()) {
    throw ShapeError("mul: shapes disagree, " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape(), false);
  const std::size_t n = x.size();
  {
    const S* xs = x.values().data();
    const S* ys = y.values().data();
    S* o = out.values().data();
    for (std::size_t i = 0; i < n; ++i) o[i] = xs[i] * ys[i];
  }
  debug_check(out, "mul");
  if (any_requires_grad({x, y})) {
    out.set_requires_grad(true);
    tape.record("mul", [x = x, y = y, out = out, n]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      if (x.requires_grad()) {
        x.ensure_grad();
        S* xg = x.grad().data();
        const S* ys = y.values().data();
        for (std::size_t i = 0; i < n; ++i) xg[i] += g[i] * ys[i];
      }
      if (y.requires_grad()) {
        y.ensure_grad();
        S* yg = y.grad().data();
        const S* xs = x.values().data();
        for (std::size_t i = 0; i < n; ++i) yg[i] += g[i] * xs[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& x, S c) {
  Tensor<S> out = Tensor<S>::zeros(x.shape(), false);
  const std::size_t n = x.size();
  {
    const S* xs = x.values().data();
    S* o = out.values().data();
    for (std::size_t i = 0; i < n; ++i) o[i] = xs[i] * c;
  }
  debug_check(out, "scale");
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("scale", [x = x, out = out, c, n]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      const S* g = out.grad().data();
      S* xg = x.grad().data();
      for (std::size_t i = 0; i < n; ++i) xg[i] += g[i] * c;
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(Tape<S>& tape, const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape(), false);
  const std::size_t n = x.size();
  {
    const S* xs = x.values().data();
    S* o = out.values().data();
    for (std::size_t i = 0; i < n; ++i) o[i] = xs[i] > S{0} ? xs[i] : S{0};
  }
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("relu", [x = x, out = out, n]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      const S* g = out.grad().data();
      const S* xs = x.values().data();
      S* xg = x.grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        if (xs[i] > S{0}) xg[i] += g[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> softmax_rows(Tape<S>& tape, const Tensor<S>& x) {
  require_2d(x, "softmax_rows");
  const int m = x.dim(0), p = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), false);
  {
    const S* xs = x.values().data();
    S* o = out.values().data();
    for (int r = 0; r < m; ++r) {
      const S* row = xs + static_cast<std::size_t>(r) * p;
      S* orow = o + static_cast<std::size_t>(r) * p;
      S mx = row[0];
      for (int j = 1; j < p; ++j) mx = std::max(mx, row[j]);
      S sum = 0;
      for (int j = 0; j < p; ++j) {
        orow[j] = std::exp(row[j] - mx);
        sum += orow[j];
      }
      const S inv = S{1} / sum;
      for (int j = 0; j < p; ++j) orow[j] *= inv;
    }
  }
  debug_check(out, "softmax_rows");
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("softmax_rows", [x = x, out = out, m, p]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      const S* g = out.grad().data();
      const S* y = out.values().data();
      S* xg = x.grad().data();
      for (int r = 0; r < m; ++r) {
        const S* grow = g + static_cast<std::size_t>(r) * p;
        const S* yrow = y + static_cast<std::size_t>(r) * p;
        S* xrow = xg + static_cast<std::size_t>(r) * p;
        S dot = 0;
        for (int j = 0; j < p; ++j) dot += grow[j] * yrow[j];
        for (int j = 0; j < p; ++j) xrow[j] += yrow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> layer_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: input must have rank >= 1");
  const int d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError("layer_norm: gain/bias must be rank-1 of extent " + std::to_string(d) +
                     ", got " + shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  if (!(eps > S{0})) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  Tensor<S> out = Tensor<S>::zeros(x.shape(), false);
  // Normalized values and reciprocal sigmas are kept for the backward rule.
  auto xhat = std::make_shared<std::vector<S>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<S>>(rows);
  {
    const S* xs = x.values().data();
    const S* gn = gain.values().data();
    const S* bs = bias.values().data();
    S* o = out.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const S* row = xs + r * static_cast<std::size_t>(d);
      S mean = 0;
      for (int j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<S>(d);
      S var = 0;
      for (int j = 0; j < d; ++j) {
        const S c = row[j] - mean;
        var += c * c;
      }
      var /= static_cast<S>(d);
      const S is = S{1} / std::sqrt(var + eps);
      (*inv_sigma)[r] = is;
      S* xh = xhat->data() + r * static_cast<std::size_t>(d);
      S* orow = o + r * static_cast<std::size_t>(d);
      for (int j = 0; j < d; ++j) {
        xh[j] = (row[j] - mean) * is;
        orow[j] = gn[j] * xh[j] + bs[j];
      }
    }
  }
  debug_check(out, "layer_norm");
  if (any_requires_grad({x, gain, bias})) {
    out.set_requires_grad(true);
    tape.record("layer_norm", [x = x, gain = gain, bias = bias, out = out, xhat, inv_sigma, rows, d]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      const S* gn = gain.values().data();
      if (gain.requires_grad()) gain.ensure_grad();
      if (bias.requires_grad()) bias.ensure_grad();
      if (x.requires_grad()) x.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const S* grow = g + r * static_cast<std::size_t>(d);
        const S* xh = xhat->data() + r * static_cast<std::size_t>(d);
        if (gain.requires_grad()) {
          S* gg = gain.grad().data();
          for (int j = 0; j < d; ++j) gg[j] += grow[j] * xh[j];
        }
        if (bias.requires_grad()) {
          S* bg = bias.grad().data();
          for (int j = 0; j < d; ++j) bg[j] += grow[j];
        }
        if (x.requires_grad()) {
          // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) / sigma
          S mean_h = 0, mean_hx = 0;
          for (int j = 0; j < d; ++j) {
            const S h = grow[j] * gn[j];
            mean_h += h;
            mean_hx += h * xh[j];
          }
          mean_h /= static_cast<S>(d);
          mean_hx /= static_cast<S>(d);
          const S is = (*inv_sigma)[r];
          S* xg = x.grad().data() + r * static_cast<std::size_t>(d);
          for (int j = 0; j < d; ++j) {
            const S h = grow[j] * gn[j];
            xg[j] += (h - mean_h - xh[j] * mean_hx) * is;
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat(Tape<S>& tape, const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  Shape out_shape = ref;
  if (axis < 0 || axis >= static_cast<int>(ref.size())) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for shape " + shape_str(ref));
  }
  int total = 0;
  for (const auto& t : parts) {
    Shape s = t.shape();
    if (s.size() != ref.size()) {
      throw ShapeError("concat: rank mismatch, " + shape_str(ref) + " vs " + shape_str(s));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != ref[i]) {
        throw ShapeError("concat: shapes disagree off-axis, " + shape_str(ref) + " vs " + shape_str(s));
      }
    }
    total += s[static_cast<std::size_t>(axis)];
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor<S> out = Tensor<S>::zeros(out_shape, false);
  const AxisView ov = axis_view(out_shape, axis);
  {
    S* o = out.values().data();
    std::size_t off = 0;
    for (const auto& t : parts) {
      const AxisView tv = axis_view(t.shape(), axis);
      const S* src = t.values().data();
      for (std::size_t u = 0; u < tv.outer; ++u) {
        S* dst = o + (u * ov.n + off) * ov.inner;
        std::copy_n(src + u * tv.n * tv.inner, tv.n * tv.inner, dst);
      }
      off += tv.n;
    }
  }
  bool rg = false;
  for (const auto& t : parts) rg = rg || t.requires_grad();
  if (rg) {
    out.set_requires_grad(true);
    tape.record("concat", [parts = parts, out = out, ov, axis]() mutable {
      if (!out.has_grad()) return;
      const S* g = out.grad().data();
      std::size_t off = 0;
      for (auto& t : parts) {
        const AxisView tv = axis_view(t.shape(), axis);
        if (t.requires_grad()) {
          t.ensure_grad();
          S* tg = t.grad().data();
          for (std::size_t u = 0; u < tv.outer; ++u) {
            const S* src = g + (u * ov.n + off) * ov.inner;
            S* dst = tg + u * tv.n * tv.inner;
            for (std::size_t i = 0; i < tv.n * tv.inner; ++i) dst[i] += src[i];
          }
        }
        off += tv.n;
      }
    });
  }
  return out;
}

template <typename S>
std::vector<Tensor<S>> split(Tape<S>& tape, const Tensor<S>& x, const std::vector<int>& sizes,
                             int axis) {
  const AxisView xv = axis_view(x.shape(), axis);
  int total = 0;
  for (int s : sizes) {
    if (s <= 0) throw ShapeError("split: sizes must be positive");
    total += s;
  }
  if (total != static_cast<int>(xv.n)) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()) + " has extent " +
                     std::to_string(xv.n));
  }
  std::vector<Tensor<S>> parts;
  parts.reserve(sizes.size());
  std::size_t off = 0;
  for (int s : sizes) {
    Shape ps = x.shape();
    ps[static_cast<std::size_t>(axis)] = s;
    Tensor<S> part = Tensor<S>::zeros(ps, false);
    const std::size_t sn = static_cast<std::size_t>(s);
    const S* src = x.values().data();
    S* dst = part.values().data();
    for (std::size_t u = 0; u < xv.outer; ++u) {
      std::copy_n(src + (u * xv.n + off) * xv.inner, sn * xv.inner, dst + u * sn * xv.inner);
    }
    if (x.requires_grad()) {
      part.set_requires_grad(true);
      tape.record("split", [x = x, part = part, xv, off, sn]() mutable {
        if (!part.has_grad()) return;
        x.ensure_grad();
        const S* g = part.grad().data();
        S* xg = x.grad().data();
        for (std::size_t u = 0; u < xv.outer; ++u) {
          S* dst = xg + (u * xv.n + off) * xv.inner;
          const S* src = g + u * sn * xv.inner;
          for (std::size_t i = 0; i < sn * xv.inner; ++i) dst[i] += src[i];
        }
      });
    }
    parts.push_back(std::move(part));
    off += sn;
  }
  return parts;
}

template <typename S>
Tensor<S> mean_over_axis(Tape<S>& tape, const Tensor<S>& x, int axis) {
  const AxisView v = axis_view(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.shape().size(); ++i) {
    if (static_cast<int>(i) != axis) out_shape.push_back(x.shape()[i]);
  }
  Tensor<S> out = Tensor<S>::zeros(out_shape, false);
  const S inv = S{1} / static_cast<S>(v.n);
  {
    const S* xs = x.values().data();
    S* o = out.values().data();
    for (std::size_t u = 0; u < v.outer; ++u) {
      for (std::size_t j = 0; j < v.n; ++j) {
        const S* src = xs + (u * v.n + j) * v.inner;
        S* dst = o + u * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
      }
    }
    for (std::size_t i = 0; i < out.size(); ++i) o[i] *= inv;
  }
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("mean_over_axis", [x = x, out = out, v, inv]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      const S* g = out.grad().data();
      S* xg = x.grad().data();
      for (std::size_t u = 0; u < v.outer; ++u) {
        for (std::size_t j = 0; j < v.n; ++j) {
          S* dst = xg + (u * v.n + j) * v.inner;
          const S* src = g + u * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i] * inv;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> reshape(Tape<S>& tape, const Tensor<S>& x, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<S> out = Tensor<S>::from_values(std::move(shape),
                                         std::vector<S>(x.values().begin(), x.values().end()));
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("reshape", [x = x, out = out]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      const S* g = out.grad().data();
      S* xg = x.grad().data();
      for (std::size_t i = 0; i < x.size(); ++i) xg[i] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(Tape<S>& tape, const Tensor<S>& x) {
  S acc = 0;
  for (S v : x.values()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (x.requires_grad()) {
    out.set_requires_grad(true);
    tape.record("sum_all", [x = x, out = out]() mutable {
      if (!out.has_grad()) return;
      x.ensure_grad();
      const S g = out.grad()[0];
      for (S& v : x.grad()) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Explicit instantiation for the two global precisions.
// ---------------------------------------------------------------------------

#define TACT_INSTANTIATE(S)                                                                      \
  template class Tensor<S>;                                                                      \
  template class Tape<S>;                                                                        \
  template void check_finite<S>(const Tensor<S>&, const char*);                                  \
  template Tensor<S> matmul<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                    \
  template Tensor<S> transpose_last_two<S>(Tape<S>&, const Tensor<S>&);                          \
  template Tensor<S> add<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                       \
  template Tensor<S> mul<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                       \
  template Tensor<S> scale<S>(Tape<S>&, const Tensor<S>&, S);                                    \
  template Tensor<S> relu<S>(Tape<S>&, const Tensor<S>&);                                        \
  template Tensor<S> softmax_rows<S>(Tape<S>&, const Tensor<S>&);                                \
  template Tensor<S> layer_norm<S>(Tape<S>&, const Tensor<S>&, const Tensor<S>&,                 \
                                   const Tensor<S>&, S);                                         \
  template Tensor<S> concat<S>(Tape<S>&, const std::vector<Tensor<S>>&, int);                    \
  template std::vector<Tensor<S>> split<S>(Tape<S>&, const Tensor<S>&, const std::vector<int>&,  \
                                           int);                                                 \
  template Tensor<S> mean_over_axis<S>(Tape<S>&, const Tensor<S>&, int);                         \
  template Tensor<S> reshape<S>(Tape<S>&, const Tensor<S>&, Shape);                              \
  template Tensor<S> sum_all<S>(Tape<S>&, const Tensor<S>&);

TACT_INSTANTIATE(float)
TACT_INSTANTIATE(double)

#undef TACT_INSTANTIATE

}  // namespace tact
