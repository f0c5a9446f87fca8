#include "fusiondepth/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace fusiondepth {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
std::vector<T>& grad_buffer(TensorImpl<T>& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), T(0));
  return t.grad;
}

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* in : inputs) {
    if (in != nullptr && in->defined() && in->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make_output(const char* op, Shape shape, std::vector<T> data) {
  if (finite_checks_enabled()) {
    for (T v : data) {
      if (!std::isfinite(v)) throw NonFinite(std::string(op) + ": non-finite value in output");
    }
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor<T>(std::move(impl));
}

template <typename T>
void attach(const char* op, const Tensor<T>& out, std::vector<ImplPtr<T>> inputs, typename Tape<T>::BackwardFn fn) {
  out.impl()->requires_grad = true;
  out.impl()->leaf = false;
  Tape<T>::active()->record(op, std::move(inputs), out.impl(), std::move(fn));
}

template <typename T>
void require_4d(const Tensor<T>& x, const char* op) {
  if (!x.defined() || x.ndim() != 4) {
    throw ShapeMismatch(std::string(op) + ": expected [N,C,H,W] tensor, got " +
                        (x.defined() ? shape_str(x.shape()) : std::string("<undefined>")));
  }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> binary(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!b.defined()) throw ShapeMismatch("binary elementwise op needs two operands");
  const auto na = a.numel();
  const auto nb = b.numel();
  Shape shape;
  if (a.shape() == b.shape() || nb == 1) {
    shape = a.shape();
  } else if (na == 1) {
    shape = b.shape();
  } else {
    throw ShapeMismatch("elementwise: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  const std::size_t sa = (na == 1 && n != 1) ? 0 : 1;
  const std::size_t sb = (nb == 1 && n != 1) ? 0 : 1;
  const T* A = a.data().data();
  const T* B = b.data().data();
  std::vector<T> out(n);
  const char* name = "add";
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = A[i * sa] + B[i * sb];
      break;
    case ElementwiseOp::sub:
      name = "sub";
      for (std::size_t i = 0; i < n; ++i) out[i] = A[i * sa] - B[i * sb];
      break;
    case ElementwiseOp::mul:
      name = "mul";
      for (std::size_t i = 0; i < n; ++i) out[i] = A[i * sa] * B[i * sb];
      break;
    case ElementwiseOp::div:
      name = "div";
      for (std::size_t i = 0; i < n; ++i) out[i] = A[i * sa] / B[i * sb];
      break;
    default:
      throw ShapeMismatch("unary op passed to binary elementwise");
  }
  auto result = make_output<T>(name, shape, std::move(out));
  if (should_record<T>({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = result.impl();
    attach<T>(name, result, {ai, bi}, [=](std::span<const T> g) {
      const T* A = ai->data.data();
      const T* B = bi->data.data();
      if (ai->requires_grad) {
        auto& ga = grad_buffer(*ai);
        for (std::size_t i = 0; i < n; ++i) {
          T d = g[i];
          if (op == ElementwiseOp::mul) d *= B[i * sb];
          else if (op == ElementwiseOp::div) d /= B[i * sb];
          ga[i * sa] += d;
        }
      }
      if (bi->requires_grad) {
        auto& gb = grad_buffer(*bi);
        const T* O = oi->data.data();
        for (std::size_t i = 0; i < n; ++i) {
          T d = g[i];
          switch (op) {
            case ElementwiseOp::sub: d = -d; break;
            case ElementwiseOp::mul: d *= A[i * sa]; break;
            case ElementwiseOp::div: d = -d * O[i] / B[i * sb]; break;
            default: break;
          }
          gb[i * sb] += d;
        }
      }
    });
  }
  return result;
}

enum class UnaryKind { exp, abs, square, relu };

template <typename T>
Tensor<T> unary(UnaryKind kind, const Tensor<T>& a) {
  const auto n = static_cast<std::size_t>(a.numel());
  const T* A = a.data().data();
  std::vector<T> out(n);
  const char* name = "exp";
  switch (kind) {
    case UnaryKind::exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(A[i]);
      break;
    case UnaryKind::abs:
      name = "abs";
      for (std::size_t i = 0; i < n; ++i) out[i] = std::abs(A[i]);
      break;
    case UnaryKind::square:
      name = "square";
      for (std::size_t i = 0; i < n; ++i) out[i] = A[i] * A[i];
      break;
    case UnaryKind::relu:
      name = "relu";
      for (std::size_t i = 0; i < n; ++i) out[i] = A[i] > T(0) ? A[i] : T(0);
      break;
  }
  auto result = make_output<T>(name, a.shape(), std::move(out));
  if (should_record<T>({&a})) {
    auto ai = a.impl();
    auto oi = result.impl();
    attach<T>(name, result, {ai}, [=](std::span<const T> g) {
      auto& ga = grad_buffer(*ai);
      const T* A = ai->data.data();
      const T* O = oi->data.data();
      for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
          case UnaryKind::exp: ga[i] += g[i] * O[i]; break;
          case UnaryKind::abs: ga[i] += A[i] > T(0) ? g[i] : (A[i] < T(0) ? -g[i] : T(0)); break;
          case UnaryKind::square: ga[i] += T(2) * A[i] * g[i]; break;
          case UnaryKind::relu: ga[i] += A[i] > T(0) ? g[i] : T(0); break;
        }
      }
    });
  }
  return result;
}

// ------------------------------------------------------------ im2col helpers

// Output columns [lo, hi) whose input column ox * stride - pad + k lies in [0, W).
inline std::pair<int, int> valid_range(int W, int Wo, int k, int stride, int pad) {
  const int shift = k - pad;
  int lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  int hi = (W - 1 - shift) < 0 ? 0 : (W - 1 - shift) / stride + 1;
  lo = std::min(lo, Wo);
  hi = std::clamp(hi, lo, Wo);
  return {lo, hi};
}

template <typename T>
void im2col(const T* img, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo, T* col) {
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * kh + ky) * kw + kx) * plane;
        const auto [lo, hi] = valid_range(W, Wo, kx, stride, pad);
        const int shift = kx - pad;
        for (int oy = 0; oy < Ho; ++oy) {
          T* dst = row + static_cast<std::size_t>(oy) * Wo;
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * H + iy) * W;
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) {
            std::copy(src + (lo + shift), src + (hi + shift), dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + shift];
          }
          std::fill(dst + hi, dst + Wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo, T* img) {
  const std::size_t plane = static_cast<std::size_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * kh + ky) * kw + kx) * plane;
        const auto [lo, hi] = valid_range(W, Wo, kx, stride, pad);
        const int shift = kx - pad;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + static_cast<std::size_t>(oy) * Wo;
          T* dst = img + (static_cast<std::size_t>(c) * H + iy) * W;
          if (stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * stride + shift] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid_diff(T x, T y) {
  const T d = x - y;
  if (d >= T(0)) return T(1) / (T(1) + std::exp(-d));
  const T e = std::exp(d);
  return e / (T(1) + e);
}

}  // namespace

// ------------------------------------------------------------------ public API

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  switch (op) {
    case ElementwiseOp::exp: return unary(UnaryKind::exp, a);
    case ElementwiseOp::abs: return unary(UnaryKind::abs, a);
    case ElementwiseOp::square: return unary(UnaryKind::square, a);
    default: return binary(op, a, b);
  }
}

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::add, a, b); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::sub, a, b); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::mul, a, b); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(ElementwiseOp::div, a, b); }
template <typename T> Tensor<T> exp(const Tensor<T>& a) { return unary(UnaryKind::exp, a); }
template <typename T> Tensor<T> abs(const Tensor<T>& a) { return unary(UnaryKind::abs, a); }
template <typename T> Tensor<T> square(const Tensor<T>& a) { return unary(UnaryKind::square, a); }
template <typename T> Tensor<T> relu(const Tensor<T>& a) { return unary(UnaryKind::relu, a); }

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  auto result = make_output<T>("add_scalar", a.shape(), std::move(out));
  if (should_record<T>({&a})) {
    auto ai = a.impl();
    attach<T>("add_scalar", result, {ai}, [ai](std::span<const T> g) {
      auto& ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  auto result = make_output<T>("mul_scalar", a.shape(), std::move(out));
  if (should_record<T>({&a})) {
    auto ai = a.impl();
    attach<T>("mul_scalar", result, {ai}, [ai, s](std::span<const T> g) {
      auto& ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  auto result = make_output<T>("sum", {1}, {static_cast<T>(acc)});
  if (should_record<T>({&a})) {
    auto ai = a.impl();
    attach<T>("sum", result, {ai}, [ai](std::span<const T> g) {
      auto& ga = grad_buffer(*ai);
      for (auto& v : ga) v += g[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a) {
  const auto n = a.numel();
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  auto result = make_output<T>("mean", {1}, {static_cast<T>(acc / static_cast<double>(n))});
  if (should_record<T>({&a})) {
    auto ai = a.impl();
    attach<T>("mean", result, {ai}, [ai, n](std::span<const T> g) {
      auto& ga = grad_buffer(*ai);
      const T d = g[0] / static_cast<T>(n);
      for (auto& v : ga) v += d;
    });
  }
  return result;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, const Tensor<T>& mask) {
  if (!mask.defined() || mask.shape() != a.shape()) {
    throw ShapeMismatch("reduce_mean: mask shape must equal input shape " + shape_str(a.shape()));
  }
  const auto n = static_cast<std::size_t>(a.numel());
  const T* A = a.data().data();
  const T* M = mask.data().data();
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (M[i] == T(0)) continue;
    if (M[i] != T(1)) throw ShapeMismatch("reduce_mean: mask values must be 0 or 1");
    acc += static_cast<double>(A[i]);
    ++count;
  }
  if (count == 0) throw EmptyMask("reduce_mean: mask selects no elements");
  auto result = make_output<T>("masked_mean", {1}, {static_cast<T>(acc / static_cast<double>(count))});
  if (should_record<T>({&a})) {
    auto ai = a.impl();
    auto mi = mask.impl();
    attach<T>("masked_mean", result, {ai, mi}, [ai, mi, count](std::span<const T> g) {
      auto& ga = grad_buffer(*ai);
      const T d = g[0] / static_cast<T>(count);
      const T* M = mi->data.data();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (M[i] != T(0)) ga[i] += d;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_channels: no inputs");
  for (const auto& p : parts) require_4d(p, "concat_channels");
  const auto N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  std::int64_t C = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != N || p.dim(2) != H || p.dim(3) != W) {
      throw ShapeMismatch("concat_channels: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    C += p.dim(1);
  }
  const auto plane = H * W;
  std::vector<T> out(static_cast<std::size_t>(N * C * plane));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto pc = p.dim(1);
    for (std::int64_t n = 0; n < N; ++n) {
      std::copy_n(p.data().data() + n * pc * plane, pc * plane, out.data() + (n * C + off) * plane);
    }
    off += pc;
  }
  auto result = make_output<T>("concat", {N, C, H, W}, std::move(out));
  bool record = false;
  for (const auto& p : parts) record = record || should_record<T>({&p});
  if (record) {
    std::vector<ImplPtr<T>> inputs;
    for (const auto& p : parts) inputs.push_back(p.impl());
    attach<T>("concat", result, inputs, [inputs, offsets, N, C, plane](std::span<const T> g) {
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& in = *inputs[k];
        if (!in.requires_grad) continue;
        auto& gi = grad_buffer(in);
        const auto pc = in.shape[1];
        for (std::int64_t n = 0; n < N; ++n) {
          const T* src = g.data() + (n * C + offsets[k]) * plane;
          T* dst = gi.data() + n * pc * plane;
          for (std::int64_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t count) {
  require_4d(x, "slice_channels");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (begin < 0 || count < 1 || begin + count > C) {
    throw ShapeMismatch("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                        ") outside " + std::to_string(C) + " channels");
  }
  const auto plane = H * W;
  std::vector<T> out(static_cast<std::size_t>(N * count * plane));
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy_n(x.data().data() + (n * C + begin) * plane, count * plane, out.data() + n * count * plane);
  }
  auto result = make_output<T>("slice", {N, count, H, W}, std::move(out));
  if (should_record<T>({&x})) {
    auto xi = x.impl();
    attach<T>("slice", result, {xi}, [xi, N, C, begin, count, plane](std::span<const T> g) {
      auto& gx = grad_buffer(*xi);
      for (std::int64_t n = 0; n < N; ++n) {
        const T* src = g.data() + n * count * plane;
        T* dst = gx.data() + (n * C + begin) * plane;
        for (std::int64_t i = 0; i < count * plane; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> pad_bottom_right(const Tensor<T>& x, std::int64_t rows, std::int64_t cols) {
  require_4d(x, "pad_bottom_right");
  if (rows < 0 || cols < 0) throw InvalidShape("pad_bottom_right: negative padding");
  if (rows == 0 && cols == 0) return x;
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto Hp = H + rows, Wp = W + cols;
  std::vector<T> out(static_cast<std::size_t>(N * C * Hp * Wp), T(0));
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    for (std::int64_t y = 0; y < H; ++y) {
      std::copy_n(x.data().data() + (nc * H + y) * W, W, out.data() + (nc * Hp + y) * Wp);
    }
  }
  auto result = make_output<T>("pad", {N, C, Hp, Wp}, std::move(out));
  if (should_record<T>({&x})) {
    auto xi = x.impl();
    attach<T>("pad", result, {xi}, [xi, N, C, H, W, Hp, Wp](std::span<const T> g) {
      auto& gx = grad_buffer(*xi);
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        for (std::int64_t y = 0; y < H; ++y) {
          for (std::int64_t c = 0; c < W; ++c) gx[(nc * H + y) * W + c] += g[(nc * Hp + y) * Wp + c];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> crop_top_left(const Tensor<T>& x, std::int64_t rows, std::int64_t cols) {
  require_4d(x, "crop_top_left");
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (rows < 1 || cols < 1 || rows > H || cols > W) {
    throw InvalidShape("crop_top_left: window " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " does not fit " + shape_str(x.shape()));
  }
  if (rows == H && cols == W) return x;
  std::vector<T> out(static_cast<std::size_t>(N * C * rows * cols));
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    for (std::int64_t y = 0; y < rows; ++y) {
      std::copy_n(x.data().data() + (nc * H + y) * W, cols, out.data() + (nc * rows + y) * cols);
    }
  }
  auto result = make_output<T>("crop", {N, C, rows, cols}, std::move(out));
  if (should_record<T>({&x})) {
    auto xi = x.impl();
    attach<T>("crop", result, {xi}, [xi, N, C, H, W, rows, cols](std::span<const T> g) {
      auto& gx = grad_buffer(*xi);
      for (std::int64_t nc = 0; nc < N * C; ++nc) {
        for (std::int64_t y = 0; y < rows; ++y) {
          for (std::int64_t c = 0; c < cols; ++c) gx[(nc * H + y) * W + c] += g[(nc * rows + y) * cols + c];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
  require_4d(x, "conv2d");
  require_4d(weight, "conv2d weight");
  const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
  const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
  const int O = static_cast<int>(weight.dim(0)), kh = static_cast<int>(weight.dim(2)),
            kw = static_cast<int>(weight.dim(3));
  if (weight.dim(1) != C) {
    throw ShapeMismatch("conv2d: input has " + std::to_string(C) + " channels, weight expects " +
                        std::to_string(weight.dim(1)));
  }
  if (bias.defined() && bias.numel() != O) throw ShapeMismatch("conv2d: bias size does not match out channels");
  if (stride < 1 || padding < 0) throw InvalidShape("conv2d: stride must be >= 1 and padding >= 0");
  if (H + 2 * padding < kh || W + 2 * padding < kw) throw InvalidShape("conv2d: kernel larger than padded input");
  const int Ho = (H + 2 * padding - kh) / stride + 1;
  const int Wo = (W + 2 * padding - kw) / stride + 1;
  const int K = C * kh * kw;
  const int P = Ho * Wo;

  std::vector<T> out(static_cast<std::size_t>(N) * O * P);
  std::vector<T> col(static_cast<std::size_t>(K) * P);
  ConstMatMap<T> Wm(weight.data().data(), O, K);
  for (int n = 0; n < N; ++n) {
    im2col(x.data().data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo,
           col.data());
    MatMap<T> Y(out.data() + static_cast<std::size_t>(n) * O * P, O, P);
    Y.noalias() = Wm * ConstMatMap<T>(col.data(), K, P);
    if (bias.defined()) {
      for (int o = 0; o < O; ++o) Y.row(o).array() += bias.data()[o];
    }
  }
  auto result = make_output<T>("conv2d", {N, O, Ho, Wo}, std::move(out));
  if (should_record<T>({&x, &weight, &bias})) {
    auto xi = x.impl();
    auto wi = weight.impl();
    auto bi = bias.defined() ? bias.impl() : ImplPtr<T>{};
    std::vector<ImplPtr<T>> inputs{xi, wi};
    if (bi) inputs.push_back(bi);
    attach<T>("conv2d", result, inputs, [=](std::span<const T> g) {
      std::vector<T> colb(static_cast<std::size_t>(K) * P);
      std::vector<T> dcol;
      ConstMatMap<T> Wm(wi->data.data(), O, K);
      for (int n = 0; n < N; ++n) {
        ConstMatMap<T> dY(g.data() + static_cast<std::size_t>(n) * O * P, O, P);
        if (wi->requires_grad) {
          im2col(xi->data.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, kh, kw, stride, padding, Ho,
                 Wo, colb.data());
          MatMap<T> gW(grad_buffer(*wi).data(), O, K);
          gW.noalias() += dY * ConstMatMap<T>(colb.data(), K, P).transpose();
        }
        if (bi && bi->requires_grad) {
          auto& gb = grad_buffer(*bi);
          const T* d = g.data() + static_cast<std::size_t>(n) * O * P;
          for (int o = 0; o < O; ++o) {
            T acc = T(0);
            for (int p = 0; p < P; ++p) acc += d[static_cast<std::size_t>(o) * P + p];
            gb[o] += acc;
          }
        }
        if (xi->requires_grad) {
          dcol.resize(static_cast<std::size_t>(K) * P);
          MatMap<T>(dcol.data(), K, P).noalias() = Wm.transpose() * dY;
          col2im(dcol.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                 grad_buffer(*xi).data() + static_cast<std::size_t>(n) * C * H * W);
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                           int padding) {
  require_4d(x, "conv_transpose2d");
  require_4d(weight, "conv_transpose2d weight");
  const int N = static_cast<int>(x.dim(0)), C = static_cast<int>(x.dim(1));
  const int H = static_cast<int>(x.dim(2)), W = static_cast<int>(x.dim(3));
  const int O = static_cast<int>(weight.dim(1)), kh = static_cast<int>(weight.dim(2)),
            kw = static_cast<int>(weight.dim(3));
  if (weight.dim(0) != C) {
    throw ShapeMismatch("conv_transpose2d: input has " + std::to_string(C) + " channels, weight expects " +
                        std::to_string(weight.dim(0)));
  }
  if (bias.defined() && bias.numel() != O) {
    throw ShapeMismatch("conv_transpose2d: bias size does not match out channels");
  }
  if (stride < 1 || padding < 0) throw InvalidShape("conv_transpose2d: stride must be >= 1 and padding >= 0");
  const int Ho = (H - 1) * stride - 2 * padding + kh;
  const int Wo = (W - 1) * stride - 2 * padding + kw;
  if (Ho < 1 || Wo < 1) throw InvalidShape("conv_transpose2d: empty output");
  const int K = O * kh * kw;
  const int P = H * W;

  std::vector<T> out(static_cast<std::size_t>(N) * O * Ho * Wo, T(0));
  std::vector<T> col(static_cast<std::size_t>(K) * P);
  ConstMatMap<T> Wm(weight.data().data(), C, K);
  for (int n = 0; n < N; ++n) {
    MatMap<T>(col.data(), K, P).noalias() =
        Wm.transpose() * ConstMatMap<T>(x.data().data() + static_cast<std::size_t>(n) * C * P, C, P);
    T* dst = out.data() + static_cast<std::size_t>(n) * O * Ho * Wo;
    col2im(col.data(), O, Ho, Wo, kh, kw, stride, padding, H, W, dst);
    if (bias.defined()) {
      for (int o = 0; o < O; ++o) {
        const T b = bias.data()[o];
        T* plane = dst + static_cast<std::size_t>(o) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) plane[i] += b;
      }
    }
  }
  auto result = make_output<T>("conv_transpose2d", {N, O, Ho, Wo}, std::move(out));
  if (should_record<T>({&x, &weight, &bias})) {
    auto xi = x.impl();
    auto wi = weight.impl();
    auto bi = bias.defined() ? bias.impl() : ImplPtr<T>{};
    std::vector<ImplPtr<T>> inputs{xi, wi};
    if (bi) inputs.push_back(bi);
    attach<T>("conv_transpose2d", result, inputs, [=](std::span<const T> g) {
      std::vector<T> dcol(static_cast<std::size_t>(K) * P);
      ConstMatMap<T> Wm(wi->data.data(), C, K);
      for (int n = 0; n < N; ++n) {
        const T* gn = g.data() + static_cast<std::size_t>(n) * O * Ho * Wo;
        im2col(gn, O, Ho, Wo, kh, kw, stride, padding, H, W, dcol.data());
        ConstMatMap<T> dC(dcol.data(), K, P);
        if (xi->requires_grad) {
          MatMap<T> gX(grad_buffer(*xi).data() + static_cast<std::size_t>(n) * C * P, C, P);
          gX.noalias() += Wm * dC;
        }
        if (wi->requires_grad) {
          MatMap<T> gW(grad_buffer(*wi).data(), C, K);
          gW.noalias() += ConstMatMap<T>(xi->data.data() + static_cast<std::size_t>(n) * C * P, C, P) * dC.transpose();
        }
        if (bi && bi->requires_grad) {
          auto& gb = grad_buffer(*bi);
          for (int o = 0; o < O; ++o) {
            const T* plane = gn + static_cast<std::size_t>(o) * Ho * Wo;
            T acc = 0;
            for (int i = 0; i < Ho * Wo; ++i) acc += plane[i];
            gb[o] += acc;
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, const BatchNormOptions& options) {
  require_4d(x, "batch_norm");
  const auto N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C) {
    throw ShapeMismatch("batch_norm: parameter size does not match " + std::to_string(C) + " channels");
  }
  const auto M = N * plane;
  if (options.training && M < 2) {
    throw DegenerateBatch("batch_norm: training mode needs at least 2 values per channel, got " + std::to_string(M));
  }
  const T* X = x.data().data();
  std::vector<T> mean(C), invstd(C);
  if (options.training) {
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = X + (n * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = X + (n * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + options.eps));
      auto rm = running_mean.data();
      auto rv = running_var.data();
      rm[c] = static_cast<T>((1.0 - options.momentum) * rm[c] + options.momentum * mu);
      rv[c] = static_cast<T>((1.0 - options.momentum) * rv[c] +
                             options.momentum * var * static_cast<double>(M) / static_cast<double>(M - 1));
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + options.eps));
    }
  }
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> out(xhat.size());
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t c = 0; c < C; ++c) {
      const auto base = (n * C + c) * plane;
      const T g = gamma.data()[c], b = beta.data()[c];
      for (std::int64_t i = 0; i < plane; ++i) {
        const T h = (X[base + i] - mean[c]) * invstd[c];
        xhat[base + i] = h;
        out[base + i] = g * h + b;
      }
    }
  }
  auto result = make_output<T>("batch_norm", x.shape(), std::move(out));
  if (should_record<T>({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    const bool training = options.training;
    attach<T>("batch_norm", result, {xi, gi, bi},
              [=, xhat = std::move(xhat), invstd = std::move(invstd)](std::span<const T> g) {
                for (std::int64_t c = 0; c < C; ++c) {
                  double sum_g = 0.0, sum_gx = 0.0;
                  for (std::int64_t n = 0; n < N; ++n) {
                    const auto base = (n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                      sum_g += g[base + i];
                      sum_gx += static_cast<double>(g[base + i]) * xhat[base + i];
                    }
                  }
                  if (gi->requires_grad) grad_buffer(*gi)[c] += static_cast<T>(sum_gx);
                  if (bi->requires_grad) grad_buffer(*bi)[c] += static_cast<T>(sum_g);
                  if (!xi->requires_grad) continue;
                  auto& gx = grad_buffer(*xi);
                  const T scale = gi->data[c] * invstd[c];
                  const T mean_g = static_cast<T>(sum_g / static_cast<double>(M));
                  const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(M));
                  for (std::int64_t n = 0; n < N; ++n) {
                    const auto base = (n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                      if (training) {
                        gx[base + i] += scale * (g[base + i] - mean_g - xhat[base + i] * mean_gx);
                      } else {
                        gx[base + i] += scale * g[base + i];
                      }
                    }
                  }
                }
              });
  }
  return result;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> softmax_pair(const Tensor<T>& x, const Tensor<T>& y) {
  if (!x.defined() || !y.defined() || x.shape() != y.shape()) {
    throw ShapeMismatch("softmax_pair: operands must have equal shapes");
  }
  const auto n = static_cast<std::size_t>(x.numel());
  std::vector<T> wx(n);
  for (std::size_t i = 0; i < n; ++i) wx[i] = sigmoid_diff(x.data()[i], y.data()[i]);
  auto first = make_output<T>("softmax_pair", x.shape(), std::move(wx));
  if (should_record<T>({&x, &y})) {
    auto xi = x.impl(), yi = y.impl(), oi = first.impl();
    attach<T>("softmax_pair", first, {xi, yi}, [xi, yi, oi](std::span<const T> g) {
      const auto& w = oi->data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T d = g[i] * w[i] * (T(1) - w[i]);
        if (xi->requires_grad) grad_buffer(*xi)[i] += d;
        if (yi->requires_grad) grad_buffer(*yi)[i] -= d;
      }
    });
  }
  // 1 - wx: exact for wx >= 0.5, so the pair sums to 1 within an ulp.
  auto second = add_scalar(mul_scalar(first, T(-1)), T(1));
  return {first, second};
}

template <typename T>
Tensor<T> confidence_fuse(const Tensor<T>& d_global, const Tensor<T>& d_local, const Tensor<T>& conf_global,
                          const Tensor<T>& conf_local) {
  const auto& s = d_global.shape();
  if (d_local.shape() != s || conf_global.shape() != s || conf_local.shape() != s) {
    throw ShapeMismatch("confidence_fuse: all four maps must share one shape");
  }
  const auto n = static_cast<std::size_t>(d_global.numel());
  const T* G = d_global.data().data();
  const T* L = d_local.data().data();
  const T* X = conf_global.data().data();
  const T* Y = conf_local.data().data();
  std::vector<T> weight(n), out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T w = sigmoid_diff(X[i], Y[i]);
    weight[i] = w;
    const T v = L[i] + w * (G[i] - L[i]);
    out[i] = std::clamp(v, std::min(G[i], L[i]), std::max(G[i], L[i]));
  }
  auto result = make_output<T>("confidence_fuse", s, std::move(out));
  if (should_record<T>({&d_global, &d_local, &conf_global, &conf_local})) {
    auto gi = d_global.impl(), li = d_local.impl(), xi = conf_global.impl(), yi = conf_local.impl();
    attach<T>("confidence_fuse", result, {gi, li, xi, yi},
              [gi, li, xi, yi, weight = std::move(weight)](std::span<const T> g) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                  const T w = weight[i];
                  if (gi->requires_grad) grad_buffer(*gi)[i] += g[i] * w;
                  if (li->requires_grad) grad_buffer(*li)[i] += g[i] * (T(1) - w);
                  const T dc = g[i] * w * (T(1) - w) * (gi->data[i] - li->data[i]);
                  if (xi->requires_grad) grad_buffer(*xi)[i] += dc;
                  if (yi->requires_grad) grad_buffer(*yi)[i] -= dc;
                }
              });
  }
  return result;
}

#define FUSIONDEPTH_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> elementwise<T>(ElementwiseOp, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                                 \
  template Tensor<T> abs<T>(const Tensor<T>&);                                                                 \
  template Tensor<T> square<T>(const Tensor<T>&);                                                              \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                                \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                       \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                                       \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                 \
  template Tensor<T> reduce_mean<T>(const Tensor<T>&);                                                         \
  template Tensor<T> reduce_mean<T>(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                                        \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::int64_t, std::int64_t);                          \
  template Tensor<T> pad_bottom_right<T>(const Tensor<T>&, std::int64_t, std::int64_t);                        \
  template Tensor<T> crop_top_left<T>(const Tensor<T>&, std::int64_t, std::int64_t);                           \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                \
  template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);      \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,           \
                                   Tensor<T>&, const BatchNormOptions&);                                       \
  template std::pair<Tensor<T>, Tensor<T>> softmax_pair<T>(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> confidence_fuse<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

FUSIONDEPTH_INSTANTIATE_OPS(float)
FUSIONDEPTH_INSTANTIATE_OPS(double)

#undef FUSIONDEPTH_INSTANTIATE_OPS

}  // namespace fusiondepth
