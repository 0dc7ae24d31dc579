#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "trajkit/tensor.hpp"
#include "trajkit/threadpool.hpp"

namespace trajkit {
namespace detail {

template <typename S>
inline void check_finite(const char* op, const Tensor<S>& t) {
  for (S x : t.values()) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw NumericFault(std::string(op) + ": non-finite value in output of shape " +
                         shape_str(t.shape()));
    }
  }
}

template <typename S>
inline bool recording(std::initializer_list<const Tensor<S>*> inputs) {
  if (active_tape<S>() == nullptr) return false;
  for (const Tensor<S>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename S>
inline Tensor<S> make_output(Shape shape) {
  return Tensor<S>::zeros(std::move(shape));
}

// c (m,n) += a (m,k) * b (k,n). Row-major, fixed accumulation order; the
// inner loop over n vectorizes without reassociation.
template <typename S>
inline void gemm_nn(int m, int k, int n, const S* a, const S* b, S* c) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    S* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
inline void transpose_copy(int m, int n, const S* a, S* at) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      at[static_cast<std::size_t>(j) * m + i] = a[static_cast<std::size_t>(i) * n + j];
    }
  }
}

struct ConvDims {
  int batch, cin, h, w;
  int cout, kh, kw;
  int stride, pad;
  int ho, wo;
};

inline ConvDims conv_dims(const char* op, const Shape& x, const Shape& k, int stride,
                          int pad, bool depthwise) {
  if (x.size() != 4) {
    throw ShapeError(std::string(op) + ": input must be rank-4, got " + shape_str(x));
  }
  if (k.size() != 4) {
    throw ShapeError(std::string(op) + ": kernel must be rank-4, got " + shape_str(k));
  }
  if (stride < 1 || pad < 0) {
    throw ShapeError(std::string(op) + ": invalid stride/pad " + std::to_string(stride) +
                     "/" + std::to_string(pad));
  }
  ConvDims d;
  d.batch = x[0];
  d.cin = x[1];
  d.h = x[2];
  d.w = x[3];
  d.kh = k[2];
  d.kw = k[3];
  d.stride = stride;
  d.pad = pad;
  if (depthwise) {
    if (k[0] != d.cin || k[1] != 1) {
      throw ShapeError(std::string(op) + ": kernel " + shape_str(k) +
                       " incompatible with input " + shape_str(x));
    }
    d.cout = d.cin;
  } else {
    if (k[1] != d.cin) {
      throw ShapeError(std::string(op) + ": kernel " + shape_str(k) +
                       " incompatible with input " + shape_str(x));
    }
    d.cout = k[0];
  }
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw) {
    throw ShapeError(std::string(op) + ": kernel " + shape_str(k) +
                     " larger than padded input " + shape_str(x));
  }
  return d;
}

// col has layout (cin*kh*kw, ho*wo) for one sample.
template <typename S>
inline void im2col(const ConvDims& d, const S* x, S* col) {
  const int hw = d.ho * d.wo;
  for (int ci = 0; ci < d.cin; ++ci) {
    const S* xc = x + static_cast<std::size_t>(ci) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        S* crow = col + static_cast<std::size_t>((ci * d.kh + ki) * d.kw + kj) * hw;
        for (int ho = 0; ho < d.ho; ++ho) {
          const int hi = ho * d.stride + ki - d.pad;
          S* cr = crow + static_cast<std::size_t>(ho) * d.wo;
          if (hi < 0 || hi >= d.h) {
            std::fill(cr, cr + d.wo, S(0));
            continue;
          }
          const S* xr = xc + static_cast<std::size_t>(hi) * d.w;
          for (int wo = 0; wo < d.wo; ++wo) {
            const int wi = wo * d.stride + kj - d.pad;
            cr[wo] = (wi < 0 || wi >= d.w) ? S(0) : xr[wi];
          }
        }
      }
    }
  }
}

template <typename S>
inline void col2im_add(const ConvDims& d, const S* col, S* x) {
  const int hw = d.ho * d.wo;
  for (int ci = 0; ci < d.cin; ++ci) {
    S* xc = x + static_cast<std::size_t>(ci) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const S* crow = col + static_cast<std::size_t>((ci * d.kh + ki) * d.kw + kj) * hw;
        for (int ho = 0; ho < d.ho; ++ho) {
          const int hi = ho * d.stride + ki - d.pad;
          if (hi < 0 || hi >= d.h) continue;
          const S* cr = crow + static_cast<std::size_t>(ho) * d.wo;
          S* xr = xc + static_cast<std::size_t>(hi) * d.w;
          for (int wo = 0; wo < d.wo; ++wo) {
            const int wi = wo * d.stride + kj - d.pad;
            if (wi >= 0 && wi < d.w) xr[wi] += cr[wo];
          }
        }
      }
    }
  }
}

// Splits a shape at `axis` into (outer, extent, inner) so that flat index
// (o, e, i) = (o*extent + e)*inner + i.
inline void axis_split(const Shape& s, int axis, std::size_t* outer, int* extent,
                       std::size_t* inner) {
  *outer = 1;
  *inner = 1;
  for (int i = 0; i < axis; ++i) *outer *= static_cast<std::size_t>(s[i]);
  *extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) *inner *= static_cast<std::size_t>(s[i]);
}

inline void check_axis(const char* op, const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

// add supports equal shapes plus the bias cases (B,F)+(F) and (B,C,H,W)+(C).
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  const bool same = a.shape() == b.shape();
  bool bias2 = false, bias4 = false;
  if (!same) {
    if (a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0)) {
      bias2 = true;
    } else if (a.rank() == 4 && b.rank() == 1 && a.dim(1) == b.dim(0)) {
      bias4 = true;
    } else {
      throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " are not addable");
    }
  }
  Tensor<S> y = detail::make_output<S>(a.shape());
  const S* av = a.data();
  const S* bv = b.data();
  S* yv = y.data();
  if (same) {
    for (std::size_t i = 0; i < a.numel(); ++i) yv[i] = av[i] + bv[i];
  } else if (bias2) {
    const int rows = a.dim(0), cols = a.dim(1);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        yv[static_cast<std::size_t>(r) * cols + c] =
            av[static_cast<std::size_t>(r) * cols + c] + bv[c];
      }
    }
  } else {
    const int bn = a.dim(0), ch = a.dim(1);
    const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    for (int n = 0; n < bn; ++n) {
      for (int c = 0; c < ch; ++c) {
        S* yr = yv + (static_cast<std::size_t>(n) * ch + c) * hw;
        const S* ar = av + (static_cast<std::size_t>(n) * ch + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) yr[i] = ar[i] + bv[c];
      }
    }
  }
  detail::check_finite("add", y);
  if (detail::recording<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn_ = b.node(), yn = y.node();
    const bool arg = a.requires_grad(), brg = b.requires_grad();
    active_tape<S>()->record([an, bn_, yn, same, bias2, arg, brg] {
      if (yn->grad.empty()) return;
      const std::vector<S>& g = yn->grad;
      if (arg) {
        auto& ag = ensure_grad(an);
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
      }
      if (!brg) return;
      auto& bg = ensure_grad(bn_);
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i];
      } else if (bias2) {
        const int rows = an->shape[0], cols = an->shape[1];
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < cols; ++c) bg[c] += g[static_cast<std::size_t>(r) * cols + c];
        }
      } else {
        const int bn2 = an->shape[0], ch = an->shape[1];
        const std::size_t hw = static_cast<std::size_t>(an->shape[2]) * an->shape[3];
        for (int n = 0; n < bn2; ++n) {
          for (int c = 0; c < ch; ++c) {
            const S* gr = g.data() + (static_cast<std::size_t>(n) * ch + c) * hw;
            S acc = S(0);
            for (std::size_t i = 0; i < hw; ++i) acc += gr[i];
            bg[c] += acc;
          }
        }
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
  Tensor<S> y = detail::make_output<S>(a.shape());
  const S* av = a.data();
  const S* bv = b.data();
  S* yv = y.data();
  for (std::size_t i = 0; i < a.numel(); ++i) yv[i] = av[i] * bv[i];
  detail::check_finite("mul", y);
  if (detail::recording<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    const bool arg = a.requires_grad(), brg = b.requires_grad();
    active_tape<S>()->record([an, bn, yn, arg, brg] {
      if (yn->grad.empty()) return;
      const std::vector<S>& g = yn->grad;
      if (arg) {
        auto& ag = ensure_grad(an);
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bn->value[i];
      }
      if (brg) {
        auto& bg = ensure_grad(bn);
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * an->value[i];
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> scalar_scale(const Tensor<S>& x, double c) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  const S cs = static_cast<S>(c);
  for (std::size_t i = 0; i < x.numel(); ++i) yv[i] = cs * xv[i];
  detail::check_finite("scalar_scale", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn, cs] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xg[i] += cs * yn->grad[i];
    });
  }
  return y;
}

template <typename S>
Tensor<S> scalar_add(const Tensor<S>& x, double c) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  const S cs = static_cast<S>(c);
  for (std::size_t i = 0; i < x.numel(); ++i) yv[i] = xv[i] + cs;
  detail::check_finite("scalar_add", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xg[i] += yn->grad[i];
    });
  }
  return y;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) yv[i] = xv[i] > S(0) ? xv[i] : S(0);
  detail::check_finite("relu", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) {
        if (xn->value[i] > S(0)) xg[i] += yn->grad[i];
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    yv[i] = S(1) / (S(1) + std::exp(-xv[i]));
  }
  detail::check_finite("sigmoid", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) {
        const S s = yn->value[i];
        xg[i] += yn->grad[i] * s * (S(1) - s);
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  std::vector<S> sig(x.numel());
  const S* xv = x.data();
  S* yv = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    sig[i] = S(1) / (S(1) + std::exp(-xv[i]));
    yv[i] = xv[i] * sig[i];
  }
  detail::check_finite("silu", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn, sig = std::move(sig)] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) {
        const S s = sig[i];
        xg[i] += yn->grad[i] * s * (S(1) + xn->value[i] * (S(1) - s));
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) yv[i] = std::tanh(xv[i]);
  detail::check_finite("tanh", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) {
        const S t = yn->value[i];
        xg[i] += yn->grad[i] * (S(1) - t * t);
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) yv[i] = std::exp(xv[i]);
  detail::check_finite("exp", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xg[i] += yn->grad[i] * yn->value[i];
    });
  }
  return y;
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) yv[i] = std::log(xv[i]);
  detail::check_finite("log", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xg[i] += yn->grad[i] / xn->value[i];
    });
  }
  return y;
}

// Hard clamp; gradient passes through strictly inside (lo, hi).
template <typename S>
Tensor<S> clamp(const Tensor<S>& x, double lo, double hi) {
  Tensor<S> y = detail::make_output<S>(x.shape());
  const S* xv = x.data();
  S* yv = y.data();
  const S l = static_cast<S>(lo), h = static_cast<S>(hi);
  for (std::size_t i = 0; i < x.numel(); ++i) yv[i] = std::min(std::max(xv[i], l), h);
  detail::check_finite("clamp", y);
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn, l, h] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (std::size_t i = 0; i < yn->grad.size(); ++i) {
        if (xn->value[i] > l && xn->value[i] < h) xg[i] += yn->grad[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not multiplicable");
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> y = detail::make_output<S>({m, n});
  detail::gemm_nn(m, k, n, a.data(), b.data(), y.data());
  detail::check_finite("matmul", y);
  if (detail::recording<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    const bool arg = a.requires_grad(), brg = b.requires_grad();
    active_tape<S>()->record([an, bn, yn, m, k, n, arg, brg] {
      if (yn->grad.empty()) return;
      const S* g = yn->grad.data();
      if (arg) {
        // da (m,k) += g (m,n) * b^T (n,k)
        std::vector<S> bt(static_cast<std::size_t>(n) * k);
        detail::transpose_copy(k, n, bn->value.data(), bt.data());
        detail::gemm_nn(m, n, k, g, bt.data(), ensure_grad(an).data());
      }
      if (brg) {
        // db (k,n) += a^T (k,m) * g (m,n)
        std::vector<S> at(static_cast<std::size_t>(k) * m);
        detail::transpose_copy(m, k, an->value.data(), at.data());
        detail::gemm_nn(k, m, n, at.data(), g, ensure_grad(bn).data());
      }
    });
  }
  return y;
}

// Batched matmul over equal leading extents: (N,m,k) x (N,k,n) -> (N,m,n).
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not multiplicable");
  }
  const int nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<S> y = detail::make_output<S>({nb, m, n});
  const std::size_t as = static_cast<std::size_t>(m) * k;
  const std::size_t bs = static_cast<std::size_t>(k) * n;
  const std::size_t ys = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < nb; ++i) {
    detail::gemm_nn(m, k, n, a.data() + i * as, b.data() + i * bs, y.data() + i * ys);
  }
  detail::check_finite("bmm", y);
  if (detail::recording<S>({&a, &b})) {
    y.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    const bool arg = a.requires_grad(), brg = b.requires_grad();
    active_tape<S>()->record([an, bn, yn, nb, m, k, n, as, bs, ys, arg, brg] {
      if (yn->grad.empty()) return;
      for (int i = 0; i < nb; ++i) {
        const S* g = yn->grad.data() + i * ys;
        if (arg) {
          std::vector<S> bt(static_cast<std::size_t>(n) * k);
          detail::transpose_copy(k, n, bn->value.data() + i * bs, bt.data());
          detail::gemm_nn(m, n, k, g, bt.data(), ensure_grad(an).data() + i * as);
        }
        if (brg) {
          std::vector<S> at(static_cast<std::size_t>(k) * m);
          detail::transpose_copy(m, k, an->value.data() + i * as, at.data());
          detail::gemm_nn(k, m, n, at.data(), g, ensure_grad(bn).data() + i * bs);
        }
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) {
    throw ShapeError("transpose: expected rank-2, got " + shape_str(x.shape()));
  }
  const int m = x.dim(0), n = x.dim(1);
  Tensor<S> y = detail::make_output<S>({n, m});
  detail::transpose_copy(m, n, x.data(), y.data());
  if (detail::recording<S>({&x})) {
    y.set_requires_grad(true);
    auto xn = x.node(), yn = y.node();
    active_tape<S>()->record([xn, yn, m, n] {
      if (yn->grad.empty()) return;
      auto& xg = ensure_grad(xn);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
          xg[static_cast<std::size_t>(j) * n + i] += yn->grad[static_cast<std::size_t>(i) * m + j];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, int stride, int pad) {
  const detail::ConvDims d =
      detail::conv_dims("conv2d", x.shape(), kernel.shape(), stride, pad, false);
  const int ckk = d.cin * d.kh * d.kw;
  const int hw = d.ho * d.wo;
  Tensor<S> y = detail::make_output<S>({d.batch, d.cout, d.ho, d.wo});
  const std::size_t xs = static_cast<std::size_t>(d.cin) * d.h * d.w;
  const std::size_t ys = static_cast<std::size_t>(d.cout) * hw;
  const S* xv = x.data();
  const S* wv = kernel.data();
  S* yv = y.data();
  parallel_for(d.batch, [&](int b) {
    std::vector<S> col(static_cast<std::size_t>(ckk) * hw);
    detail::im2col(d, xv + b * xs, col.data());
    detail::gemm_nn(d.cout, ckk, hw, wv, col.data(), yv + b * ys);
  });
  detail::check_finite("conv2d", y);
  if (detail::recording<S>({&x, &kernel})) {
    y.set_requires_grad(true);
    auto xn = x.node(), kn = kernel.node(), yn = y.node();
    const bool xrg = x.requires_grad(), krg = kernel.requires_grad();
    active_tape<S>()->record([xn, kn, yn, d, ckk, hw, xs, ys, xrg, krg] {
      if (yn->grad.empty()) return;
      const S* g = yn->grad.data();
      std::vector<S> wt;
      if (xrg) {
        wt.resize(static_cast<std::size_t>(ckk) * d.cout);
        detail::transpose_copy(d.cout, ckk, kn->value.data(), wt.data());
      }
      std::vector<std::vector<S>> dw_parts;
      if (krg) dw_parts.assign(d.batch, std::vector<S>());
      S* xg = xrg ? ensure_grad(xn).data() : nullptr;
      parallel_for(d.batch, [&](int b) {
        std::vector<S> col(static_cast<std::size_t>(ckk) * hw);
        detail::im2col(d, xn->value.data() + b * xs, col.data());
        if (krg) {
          // dW (cout, ckk) += g_b (cout, hw) * col^T (hw, ckk); accumulated
          // per sample and reduced in batch order below.
          std::vector<S> colt(static_cast<std::size_t>(hw) * ckk);
          detail::transpose_copy(ckk, hw, col.data(), colt.data());
          dw_parts[b].assign(static_cast<std::size_t>(d.cout) * ckk, S(0));
          detail::gemm_nn(d.cout, hw, ckk, g + b * ys, colt.data(), dw_parts[b].data());
        }
        if (xg) {
          std::vector<S> dcol(static_cast<std::size_t>(ckk) * hw, S(0));
          detail::gemm_nn(ckk, d.cout, hw, wt.data(), g + b * ys, dcol.data());
          detail::col2im_add(d, dcol.data(), xg + b * xs);
        }
      });
      if (krg) {
        auto& kg = ensure_grad(kn);
        for (int b = 0; b < d.batch; ++b) {
          for (std::size_t i = 0; i < kg.size(); ++i) kg[i] += dw_parts[b][i];
        }
      }
    });
  }
  return y;
}

template <typename S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& kernel, int stride,
                           int pad) {
  const detail::ConvDims d =
      detail::conv_dims("depthwise_conv2d", x.shape(), kernel.shape(), stride, pad, true);
  Tensor<S> y = detail::make_output<S>({d.batch, d.cin, d.ho, d.wo});
  const std::size_t xs = static_cast<std::size_t>(d.cin) * d.h * d.w;
  const std::size_t ys = static_cast<std::size_t>(d.cin) * d.ho * d.wo;
  const S* xv = x.data();
  const S* wv = kernel.data();
  S* yv = y.data();
  parallel_for(d.batch, [&](int b) {
    for (int c = 0; c < d.cin; ++c) {
      const S* xc = xv + b * xs + static_cast<std::size_t>(c) * d.h * d.w;
      const S* wc = wv + static_cast<std::size_t>(c) * d.kh * d.kw;
      S* yc = yv + b * ys + static_cast<std::size_t>(c) * d.ho * d.wo;
      for (int ho = 0; ho < d.ho; ++ho) {
        for (int wo = 0; wo < d.wo; ++wo) {
          S acc = S(0);
          for (int ki = 0; ki < d.kh; ++ki) {
            const int hi = ho * d.stride + ki - d.pad;
            if (hi < 0 || hi >= d.h) continue;
            for (int kj = 0; kj < d.kw; ++kj) {
              const int wi = wo * d.stride + kj - d.pad;
              if (wi < 0 || wi >= d.w) continue;
              acc += wc[ki * d.kw + kj] * xc[static_cast<std::size_t>(hi) * d.w + wi];
            }
          }
          yc[static_cast<std::size_t>(ho) * d.wo + wo] = acc;
        }
      }
    }
  });
  detail::check_finite("depthwise_conv2d", y);
  if (detail::recording<S>({&x, &kernel})) {
    y.set_requires_grad(true);
    auto xn = x.node(), kn = kernel.node(), yn = y.node();
    const bool xrg = x.requires_grad(), krg = kernel.requires_grad();
    active_tape<S>()->record([xn, kn, yn, d, xs, ys, xrg, krg] {
      if (yn->grad.empty()) return;
      const S* g = yn->grad.data();
      S* xg = xrg ? ensure_grad(xn).data() : nullptr;
      std::vector<std::vector<S>> dw_parts;
      if (krg) dw_parts.assign(d.batch, std::vector<S>());
      parallel_for(d.batch, [&](int b) {
        if (krg) dw_parts[b].assign(kn->value.size(), S(0));
        for (int c = 0; c < d.cin; ++c) {
          const S* xc = xn->value.data() + b * xs + static_cast<std::size_t>(c) * d.h * d.w;
          const S* wc = kn->value.data() + static_cast<std::size_t>(c) * d.kh * d.kw;
          const S* gc = g + b * ys + static_cast<std::size_t>(c) * d.ho * d.wo;
          S* xgc = xg ? xg + b * xs + static_cast<std::size_t>(c) * d.h * d.w : nullptr;
          S* wgc = krg ? dw_parts[b].data() + static_cast<std::size_t>(c) * d.kh * d.kw : nullptr;
          for (int ho = 0; ho < d.ho; ++ho) {
            for (int wo = 0; wo < d.wo; ++wo) {
              const S gv = gc[static_cast<std::size_t>(ho) * d.wo + wo];
              for (int ki = 0; ki < d.kh; ++ki) {
                const int hi = ho * d.stride + ki - d.pad;
                if (hi < 0 || hi >= d.h) continue;
                for (int kj = 0; kj < d.kw; ++kj) {
                  const int wi = wo * d.stride + kj - d.pad;
                  if (wi < 0 || wi >= d.w) continue;
                  if (wgc) wgc[ki * d.kw + kj] += gv * xc[static_cast<std::size_t>(hi) * d.w + wi];
                  if (xgc) xgc[static_cast<std::size_t>(hi) * d.w + wi] += gv * wc[ki * d.kw + kj];
                }
              }
            }
          }
        }
      });
      if (krg) {
        auto& kg = ensure_grad(kn);
        for (int b = 0; b < d.batch; ++b) {
          for (std::size_t i = 0; i < kg.size(); ++i) kg[i] += dw_parts[b][i];
        }
      }
    });
  }
  return y;
}

}  // namespace trajkit
