#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "tsdiff/tensor.hpp"

// Forward values and reverse-mode gradients for the operator set the
// denoiser, metric networks and utility classifier need. No general
// broadcasting: every op states the exact shapes it accepts.

namespace tsdiff {
namespace ops {

namespace detail {

template <typename S>
using MatMap =
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
void record(Tensor<S>& out, std::initializer_list<Tensor<S>> parents,
            std::function<void(TensorNode<S>&)> fn) {
  if (!autograd::grad_enabled()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return;
  out.node()->requires_grad = true;
  for (const auto& p : parents) out.node()->parents.push_back(p.node());
  out.node()->backprop = std::move(fn);
}

template <typename S>
void accumulate(const std::shared_ptr<TensorNode<S>>& n, std::size_t i, S v) {
  if (n->requires_grad) {
    n->ensure_grad();
    n->grad[i] += v;
  }
}

inline void check_axis(std::size_t axis, std::size_t rank) {
  if (axis >= rank) {
    throw IndexError("axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
}

// Decompose a shape around `axis` into [outer, n, inner] extents.
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer,
                       std::size_t& n, std::size_t& inner) {
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.shape() == b.shape(), "add: shape mismatch " +
                                          shape_str(a.shape()) + " vs " +
                                          shape_str(b.shape()));
  std::vector<S> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  auto out = Tensor<S>::from_data(a.shape(), std::move(v));
  detail::record(out, {a, b}, [an = a.node(), bn = b.node()](TensorNode<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.shape() == b.shape(), "sub: shape mismatch " +
                                          shape_str(a.shape()) + " vs " +
                                          shape_str(b.shape()));
  std::vector<S> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  auto out = Tensor<S>::from_data(a.shape(), std::move(v));
  detail::record(out, {a, b}, [an = a.node(), bn = b.node()](TensorNode<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.shape() == b.shape(), "mul: shape mismatch " +
                                          shape_str(a.shape()) + " vs " +
                                          shape_str(b.shape()));
  std::vector<S> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  auto out = Tensor<S>::from_data(a.shape(), std::move(v));
  detail::record(out, {a, b}, [an = a.node(), bn = b.node()](TensorNode<S>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        an->grad[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  std::vector<S> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
  auto out = Tensor<S>::from_data(a.shape(), std::move(v));
  detail::record(out, {a}, [an = a.node(), c](TensorNode<S>& o) {
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += c * o.grad[i];
  });
  return out;
}

// x[B,C,L] + e[B,C] broadcast along L; the timestep-conditioning injection.
template <typename S>
Tensor<S> add_channel(const Tensor<S>& x, const Tensor<S>& e) {
  check_shape(x.rank() == 3 && e.rank() == 2 && x.dim(0) == e.dim(0) &&
                  x.dim(1) == e.dim(1),
              "add_channel: incompatible shapes " + shape_str(x.shape()) +
                  " vs " + shape_str(e.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  std::vector<S> v(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S ev = e.data()[b * C + c];
      const std::size_t base = (b * C + c) * L;
      for (std::size_t l = 0; l < L; ++l) v[base + l] = x.data()[base + l] + ev;
    }
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x, e},
                 [xn = x.node(), en = e.node(), B, C, L](TensorNode<S>& o) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
    }
    if (en->requires_grad) {
      en->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          S s = 0;
          const std::size_t base = (b * C + c) * L;
          for (std::size_t l = 0; l < L; ++l) s += o.grad[base + l];
          en->grad[b * C + c] += s;
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// activations

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = S(1) / (S(1) + std::exp(-x.data()[i]));
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x}, [xn = x.node()](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const S y = o.value[i];
      xn->grad[i] += o.grad[i] * y * (S(1) - y);
    }
  });
  return out;
}

template <typename S>
Tensor<S> silu(const Tensor<S>& x) {
  std::vector<S> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const S s = S(1) / (S(1) + std::exp(-x.data()[i]));
    v[i] = x.data()[i] * s;
  }
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x}, [xn = x.node()](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const S xv = xn->value[i];
      const S s = S(1) / (S(1) + std::exp(-xv));
      xn->grad[i] += o.grad[i] * s * (S(1) + xv * (S(1) - s));
    }
  });
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  std::vector<S> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x}, [xn = x.node()](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (xn->value[i] > S(0)) xn->grad[i] += o.grad[i];
  });
  return out;
}

template <typename S>
Tensor<S> tanh_op(const Tensor<S>& x) {
  std::vector<S> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(x.data()[i]);
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x}, [xn = x.node()](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const S y = o.value[i];
      xn->grad[i] += o.grad[i] * (S(1) - y * y);
    }
  });
  return out;
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  detail::check_axis(axis, x.rank());
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  if (n == 0) throw IndexError("softmax over zero-length axis");
  std::vector<S> v(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      S mx = x.data()[base];
      for (std::size_t j = 1; j < n; ++j)
        mx = std::max(mx, x.data()[base + j * inner]);
      S sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const S e = std::exp(x.data()[base + j * inner] - mx);
        v[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) v[base + j * inner] /= sum;
    }
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x},
                 [xn = x.node(), outer, n, inner](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t ou = 0; ou < outer; ++ou)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = ou * n * inner + in;
        S dot = 0;
        for (std::size_t j = 0; j < n; ++j)
          dot += o.grad[base + j * inner] * o.value[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          xn->grad[k] += (o.grad[k] - dot) * o.value[k];
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
              "matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> v(m * n);
  {
    detail::ConstMatMap<S> A(a.ptr(), m, k), B(b.ptr(), k, n);
    detail::MatMap<S> O(v.data(), m, n);
    O.noalias() = A * B;
  }
  auto out = Tensor<S>::from_data({m, n}, std::move(v));
  detail::record(out, {a, b},
                 [an = a.node(), bn = b.node(), m, k, n](TensorNode<S>& o) {
    detail::ConstMatMap<S> G(o.grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      detail::ConstMatMap<S> B(bn->value.data(), k, n);
      detail::MatMap<S> dA(an->grad.data(), m, k);
      dA.noalias() += G * B.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::ConstMatMap<S> A(an->value.data(), m, k);
      detail::MatMap<S> dB(bn->grad.data(), k, n);
      dB.noalias() += A.transpose() * G;
    }
  });
  return out;
}

// Batched matmul over a shared leading dimension.
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  check_shape(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == b.dim(1),
              "bmm: incompatible shapes " + shape_str(a.shape()) + " vs " +
                  shape_str(b.shape()));
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<S> v(nb * m * n);
  for (std::size_t i = 0; i < nb; ++i) {
    detail::ConstMatMap<S> A(a.ptr() + i * m * k, m, k);
    detail::ConstMatMap<S> B(b.ptr() + i * k * n, k, n);
    detail::MatMap<S> O(v.data() + i * m * n, m, n);
    O.noalias() = A * B;
  }
  auto out = Tensor<S>::from_data({nb, m, n}, std::move(v));
  detail::record(out, {a, b},
                 [an = a.node(), bn = b.node(), nb, m, k, n](TensorNode<S>& o) {
    for (std::size_t i = 0; i < nb; ++i) {
      detail::ConstMatMap<S> G(o.grad.data() + i * m * n, m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        detail::ConstMatMap<S> B(bn->value.data() + i * k * n, k, n);
        detail::MatMap<S> dA(an->grad.data() + i * m * k, m, k);
        dA.noalias() += G * B.transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::ConstMatMap<S> A(an->value.data() + i * m * k, m, k);
        detail::MatMap<S> dB(bn->grad.data() + i * k * n, k, n);
        dB.noalias() += A.transpose() * G;
      }
    }
  });
  return out;
}

// y = x W^T + b with x[B,in], W[out,in], b[out] (pass an undefined tensor to
// skip the bias).
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  check_shape(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
              "linear: input " + shape_str(x.shape()) + " vs weight " +
                  shape_str(w.shape()));
  const std::size_t B = x.dim(0), in = x.dim(1), outd = w.dim(0);
  const bool with_bias = b.defined();
  if (with_bias)
    check_shape(b.rank() == 1 && b.dim(0) == outd,
                "linear: bias " + shape_str(b.shape()) + " vs out dim " +
                    std::to_string(outd));
  std::vector<S> v(B * outd);
  {
    detail::ConstMatMap<S> X(x.ptr(), B, in), W(w.ptr(), outd, in);
    detail::MatMap<S> O(v.data(), B, outd);
    O.noalias() = X * W.transpose();
    if (with_bias)
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < outd; ++c) v[r * outd + c] += b.data()[c];
  }
  auto out = Tensor<S>::from_data({B, outd}, std::move(v));
  auto fn = [xn = x.node(), wn = w.node(),
             bn = with_bias ? b.node() : nullptr, B, in,
             outd](TensorNode<S>& o) {
    detail::ConstMatMap<S> G(o.grad.data(), B, outd);
    if (xn->requires_grad) {
      xn->ensure_grad();
      detail::ConstMatMap<S> W(wn->value.data(), outd, in);
      detail::MatMap<S> dX(xn->grad.data(), B, in);
      dX.noalias() += G * W;
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      detail::ConstMatMap<S> X(xn->value.data(), B, in);
      detail::MatMap<S> dW(wn->grad.data(), outd, in);
      dW.noalias() += G.transpose() * X;
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t c = 0; c < outd; ++c)
          bn->grad[c] += o.grad[r * outd + c];
    }
  };
  if (with_bias)
    detail::record(out, {x, w, b}, std::move(fn));
  else
    detail::record(out, {x, w}, std::move(fn));
  return out;
}

// ---------------------------------------------------------------------------
// convolution

struct ConvPad {
  bool same = false;
  int pad = 0;
  static ConvPad same_pad() { return ConvPad{true, 0}; }
  static ConvPad fixed(int p) { return ConvPad{false, p}; }
};

// 1-D convolution (cross-correlation) over x[B,Cin,L] with w[Cout,Cin,K].
// "same" padding keeps L and requires stride 1; odd total padding for even K
// is split left-heavy.
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 std::size_t stride, std::size_t dilation, ConvPad padding) {
  check_shape(x.rank() == 3 && w.rank() == 3,
              "conv1d: need rank-3 input and weight, got " +
                  shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1)) {
    throw ShapeError("conv1d: input channels " + shape_str(x.shape()) +
                     " do not match weight " + shape_str(w.shape()));
  }
  if (w.dim(2) < 1) throw ConfigError("conv1d: kernel size must be >= 1");
  if (stride < 1 || dilation < 1)
    throw ConfigError("conv1d: stride and dilation must be >= 1");
  if (padding.same && stride != 1)
    throw ConfigError("conv1d: \"same\" padding requires stride 1");

  const std::size_t B = x.dim(0), Cin = x.dim(1), L = x.dim(2);
  const std::size_t Cout = w.dim(0), K = w.dim(2);
  const long span = static_cast<long>(dilation) * (static_cast<long>(K) - 1);
  long pad_left, pad_right;
  if (padding.same) {
    pad_left = (span + 1) / 2;
    pad_right = span - pad_left;
  } else {
    pad_left = pad_right = padding.pad;
  }
  const long lout_num = static_cast<long>(L) + pad_left + pad_right - span - 1;
  if (lout_num < 0) {
    throw ShapeError("conv1d: kernel span exceeds padded input length " +
                     shape_str(x.shape()));
  }
  const std::size_t Lout =
      static_cast<std::size_t>(lout_num / static_cast<long>(stride)) + 1;

  const bool with_bias = b.defined();
  if (with_bias)
    check_shape(b.rank() == 1 && b.dim(0) == Cout,
                "conv1d: bias " + shape_str(b.shape()) + " vs Cout " +
                    std::to_string(Cout));

  std::vector<S> v(B * Cout * Lout, S(0));
  const S* xd = x.ptr();
  const S* wd = w.ptr();
  for (std::size_t bb = 0; bb < B; ++bb) {
    for (std::size_t co = 0; co < Cout; ++co) {
      S* outp = v.data() + (bb * Cout + co) * Lout;
      if (with_bias) {
        const S bias = b.data()[co];
        for (std::size_t l = 0; l < Lout; ++l) outp[l] = bias;
      }
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const S* xp = xd + (bb * Cin + ci) * L;
        const S* wp = wd + (co * Cin + ci) * K;
        for (std::size_t k = 0; k < K; ++k) {
          const S wv = wp[k];
          const long off = static_cast<long>(k * dilation) - pad_left;
          // valid l: 0 <= l*stride + off < L
          long lo = off < 0 ? (-off + static_cast<long>(stride) - 1) /
                                  static_cast<long>(stride)
                            : 0;
          long hi = (static_cast<long>(L) - 1 - off) /
                    static_cast<long>(stride);  // inclusive
          hi = std::min(hi, static_cast<long>(Lout) - 1);
          if (stride == 1) {
            const S* xq = xp + lo + off;
            for (long l = lo; l <= hi; ++l) outp[l] += wv * xq[l - lo];
          } else {
            for (long l = lo; l <= hi; ++l)
              outp[l] += wv * xp[l * static_cast<long>(stride) + off];
          }
        }
      }
    }
  }
  auto out = Tensor<S>::from_data({B, Cout, Lout}, std::move(v));
  auto bwd = [xn = x.node(), wn = w.node(),
              bn = with_bias ? b.node() : nullptr, B, Cin, Cout, K, L, Lout,
              stride, pad_left, dilation](TensorNode<S>& o) {
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t bb = 0; bb < B; ++bb)
        for (std::size_t co = 0; co < Cout; ++co) {
          const S* gp = o.grad.data() + (bb * Cout + co) * Lout;
          S s = 0;
          for (std::size_t l = 0; l < Lout; ++l) s += gp[l];
          bn->grad[co] += s;
        }
    }
    const bool need_x = xn->requires_grad, need_w = wn->requires_grad;
    if (!need_x && !need_w) return;
    if (need_x) xn->ensure_grad();
    if (need_w) wn->ensure_grad();
    for (std::size_t bb = 0; bb < B; ++bb) {
      for (std::size_t co = 0; co < Cout; ++co) {
        const S* gp = o.grad.data() + (bb * Cout + co) * Lout;
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          const S* xp = xn->value.data() + (bb * Cin + ci) * L;
          S* dxp = need_x ? xn->grad.data() + (bb * Cin + ci) * L : nullptr;
          const S* wp = wn->value.data() + (co * Cin + ci) * K;
          S* dwp = need_w ? wn->grad.data() + (co * Cin + ci) * K : nullptr;
          for (std::size_t k = 0; k < K; ++k) {
            const long off = static_cast<long>(k * dilation) - pad_left;
            long lo = off < 0 ? (-off + static_cast<long>(stride) - 1) /
                                    static_cast<long>(stride)
                              : 0;
            long hi = (static_cast<long>(L) - 1 - off) /
                      static_cast<long>(stride);
            hi = std::min(hi, static_cast<long>(Lout) - 1);
            if (need_w) {
              S s = 0;
              for (long l = lo; l <= hi; ++l)
                s += gp[l] * xp[l * static_cast<long>(stride) + off];
              dwp[k] += s;
            }
            if (need_x) {
              const S wv = wp[k];
              for (long l = lo; l <= hi; ++l)
                dxp[l * static_cast<long>(stride) + off] += wv * gp[l];
            }
          }
        }
      }
    }
  };
  (void)fn;
  if (with_bias)
    detail::record(out, {x, w, b}, std::move(bwd));
  else
    detail::record(out, {x, w}, std::move(bwd));
  return out;
}

// ---------------------------------------------------------------------------
// normalization

template <typename S>
struct BatchNormState {
  std::vector<S> running_mean;
  std::vector<S> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, S(0)), running_var(channels, S(1)) {}
};

// Per-channel batch normalization over [B,C,L] (or [B,C], treated as L=1).
// Train mode normalizes by batch statistics (biased variance) and blends
// running statistics with `momentum` (running variance stored unbiased);
// eval mode normalizes by the running statistics.
template <typename S>
Tensor<S> batchnorm1d(const Tensor<S>& x, const Tensor<S>& gamma,
                      const Tensor<S>& beta, BatchNormState<S>& state,
                      bool train, S momentum = S(0.1), S eps = S(1e-5)) {
  check_shape(x.rank() == 2 || x.rank() == 3,
              "batchnorm1d: need [B,C] or [B,C,L], got " +
                  shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1),
                    L = x.rank() == 3 ? x.dim(2) : 1;
  check_shape(gamma.size() == C && beta.size() == C &&
                  state.running_mean.size() == C,
              "batchnorm1d: channel mismatch with affine parameters");
  const std::size_t N = B * L;
  if (N == 0) throw IndexError("batchnorm1d: empty reduction");

  std::vector<S> mean(C), var(C);
  if (train) {
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const S* xp = x.ptr() + (b * C + c) * L;
        for (std::size_t l = 0; l < L; ++l) m += xp[l];
      }
      m /= static_cast<double>(N);
      double v = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const S* xp = x.ptr() + (b * C + c) * L;
        for (std::size_t l = 0; l < L; ++l) {
          const double d = xp[l] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(N);
      mean[c] = static_cast<S>(m);
      var[c] = static_cast<S>(v);
      const double unbiased = N > 1 ? v * N / (N - 1.0) : v;
      state.running_mean[c] = static_cast<S>((1 - momentum) *
                                             state.running_mean[c]) +
                              momentum * mean[c];
      state.running_var[c] =
          static_cast<S>((1 - momentum) * state.running_var[c] +
                         momentum * unbiased);
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  std::vector<S> v(x.size());
  std::vector<S> inv_std(C);
  for (std::size_t c = 0; c < C; ++c)
    inv_std[c] = S(1) / std::sqrt(var[c] + eps);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const S* xp = x.ptr() + (b * C + c) * L;
      S* vp = v.data() + (b * C + c) * L;
      const S g = gamma.data()[c], be = beta.data()[c], m = mean[c],
              is = inv_std[c];
      for (std::size_t l = 0; l < L; ++l) vp[l] = g * (xp[l] - m) * is + be;
    }
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x, gamma, beta},
                 [xn = x.node(), gn = gamma.node(), bn = beta.node(), mean,
                  inv_std, B, C, L, N, train](TensorNode<S>& o) {
    std::vector<double> sum_g(C, 0), sum_gx(C, 0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const S* gp = o.grad.data() + (b * C + c) * L;
        const S* xp = xn->value.data() + (b * C + c) * L;
        for (std::size_t l = 0; l < L; ++l) {
          sum_g[c] += gp[l];
          sum_gx[c] += gp[l] * (xp[l] - mean[c]) * inv_std[c];
        }
      }
    if (gn->requires_grad) {
      gn->ensure_grad();
      for (std::size_t c = 0; c < C; ++c)
        gn->grad[c] += static_cast<S>(sum_gx[c]);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t c = 0; c < C; ++c)
        bn->grad[c] += static_cast<S>(sum_g[c]);
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          const S* gp = o.grad.data() + (b * C + c) * L;
          const S* xp = xn->value.data() + (b * C + c) * L;
          S* dxp = xn->grad.data() + (b * C + c) * L;
          const S gam = gn->value[c], is = inv_std[c], m = mean[c];
          if (train) {
            const S mg = static_cast<S>(sum_g[c] / N);
            const S mgx = static_cast<S>(sum_gx[c] / N);
            for (std::size_t l = 0; l < L; ++l) {
              const S xhat = (xp[l] - m) * is;
              dxp[l] += gam * is * (gp[l] - mg - xhat * mgx);
            }
          } else {
            for (std::size_t l = 0; l < L; ++l) dxp[l] += gam * is * gp[l];
          }
        }
    }
  });
  return out;
}

// Layer normalization over the trailing axis with elementwise affine.
template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gamma,
                    const Tensor<S>& beta, S eps = S(1e-5)) {
  const std::size_t D = x.shape().back();
  if (D == 0) throw IndexError("layernorm over zero-length axis");
  check_shape(gamma.size() == D && beta.size() == D,
              "layernorm: affine size mismatch with last axis " +
                  std::to_string(D));
  const std::size_t rows = x.size() / D;
  std::vector<S> v(x.size());
  std::vector<S> means(rows), inv_stds(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xp = x.ptr() + r * D;
    double m = 0;
    for (std::size_t j = 0; j < D; ++j) m += xp[j];
    m /= static_cast<double>(D);
    double var = 0;
    for (std::size_t j = 0; j < D; ++j) {
      const double d = xp[j] - m;
      var += d * d;
    }
    var /= static_cast<double>(D);
    const S is = static_cast<S>(1.0 / std::sqrt(var + eps));
    means[r] = static_cast<S>(m);
    inv_stds[r] = is;
    for (std::size_t j = 0; j < D; ++j)
      v[r * D + j] = gamma.data()[j] * (xp[j] - means[r]) * is + beta.data()[j];
  }
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x, gamma, beta},
                 [xn = x.node(), gn = gamma.node(), bn = beta.node(), means,
                  inv_stds, rows, D](TensorNode<S>& o) {
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const S* gp = o.grad.data() + r * D;
      const S* xp = xn->value.data() + r * D;
      const S m = means[r], is = inv_stds[r];
      double sum_g = 0, sum_gx = 0;
      for (std::size_t j = 0; j < D; ++j) {
        const S xhat = (xp[j] - m) * is;
        const S gg = gp[j] * gn->value[j];
        sum_g += gg;
        sum_gx += gg * xhat;
        if (gn->requires_grad) gn->grad[j] += gp[j] * xhat;
        if (bn->requires_grad) bn->grad[j] += gp[j];
      }
      if (xn->requires_grad) {
        const S mg = static_cast<S>(sum_g / D), mgx = static_cast<S>(sum_gx / D);
        for (std::size_t j = 0; j < D; ++j) {
          const S xhat = (xp[j] - m) * is;
          xn->grad[r * D + j] += is * (gp[j] * gn->value[j] - mg - xhat * mgx);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// resampling along the time axis

template <typename S>
Tensor<S> upsample_nearest(const Tensor<S>& x, std::size_t factor) {
  check_shape(x.rank() == 3, "upsample_nearest: need [B,C,L], got " +
                                 shape_str(x.shape()));
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const std::size_t Lout = L * factor;
  std::vector<S> v(B * C * Lout);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const S* xp = x.ptr() + bc * L;
    S* vp = v.data() + bc * Lout;
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t f = 0; f < factor; ++f) vp[l * factor + f] = xp[l];
  }
  auto out = Tensor<S>::from_data({B, C, Lout}, std::move(v));
  detail::record(out, {x}, [xn = x.node(), B, C, L, factor](TensorNode<S>& o) {
    xn->ensure_grad();
    const std::size_t Lout = L * factor;
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const S* gp = o.grad.data() + bc * Lout;
      S* dxp = xn->grad.data() + bc * L;
      for (std::size_t l = 0; l < L; ++l) {
        S s = 0;
        for (std::size_t f = 0; f < factor; ++f) s += gp[l * factor + f];
        dxp[l] += s;
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> downsample_stride(const Tensor<S>& x, std::size_t stride) {
  check_shape(x.rank() == 3, "downsample_stride: need [B,C,L], got " +
                                 shape_str(x.shape()));
  if (stride < 1) throw ConfigError("downsample_stride: stride must be >= 1");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const std::size_t Lout = (L + stride - 1) / stride;
  std::vector<S> v(B * C * Lout);
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t l = 0; l < Lout; ++l)
      v[bc * Lout + l] = x.data()[bc * L + l * stride];
  auto out = Tensor<S>::from_data({B, C, Lout}, std::move(v));
  detail::record(out, {x}, [xn = x.node(), B, C, L, stride](TensorNode<S>& o) {
    xn->ensure_grad();
    const std::size_t Lout = (L + stride - 1) / stride;
    for (std::size_t bc = 0; bc < B * C; ++bc)
      for (std::size_t l = 0; l < Lout; ++l)
        xn->grad[bc * L + l * stride] += o.grad[bc * Lout + l];
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions and losses

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  if (x.size() == 0) throw IndexError("mean over empty tensor");
  double s = 0;
  for (S v : x.data()) s += v;
  auto out = Tensor<S>::scalar(static_cast<S>(s / x.size()));
  detail::record(out, {x}, [xn = x.node()](TensorNode<S>& o) {
    xn->ensure_grad();
    const S g = o.grad[0] / static_cast<S>(xn->value.size());
    for (auto& d : xn->grad) d += g;
  });
  return out;
}

template <typename S>
Tensor<S> mean_axis(const Tensor<S>& x, std::size_t axis) {
  detail::check_axis(axis, x.rank());
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  if (n == 0) throw IndexError("mean over zero-length axis");
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) os.push_back(x.dim(i));
  if (os.empty()) os.push_back(1);
  std::vector<S> v(outer * inner, S(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t in = 0; in < inner; ++in)
        v[o * inner + in] += x.data()[(o * n + j) * inner + in];
  for (auto& e : v) e /= static_cast<S>(n);
  auto out = Tensor<S>::from_data(os, std::move(v));
  detail::record(out, {x},
                 [xn = x.node(), outer, n, inner](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t ou = 0; ou < outer; ++ou)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t in = 0; in < inner; ++in)
          xn->grad[(ou * n + j) * inner + in] +=
              o.grad[ou * inner + in] / static_cast<S>(n);
  });
  return out;
}

template <typename S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  check_shape(pred.shape() == target.shape(),
              "mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                  shape_str(target.shape()));
  if (pred.size() == 0) throw IndexError("mse_loss over empty tensors");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    s += d * d;
  }
  auto out = Tensor<S>::scalar(static_cast<S>(s / pred.size()));
  detail::record(out, {pred, target},
                 [pn = pred.node(), tn = target.node()](TensorNode<S>& o) {
    const S g = o.grad[0] * S(2) / static_cast<S>(pn->value.size());
    if (pn->requires_grad) {
      pn->ensure_grad();
      for (std::size_t i = 0; i < pn->value.size(); ++i)
        pn->grad[i] += g * (pn->value[i] - tn->value[i]);
    }
    if (tn->requires_grad) {
      tn->ensure_grad();
      for (std::size_t i = 0; i < tn->value.size(); ++i)
        tn->grad[i] -= g * (pn->value[i] - tn->value[i]);
    }
  });
  return out;
}

// Binary cross entropy on probabilities, clamped away from {0,1}. The
// gradient is zero where the clamp is active.
template <typename S>
Tensor<S> bce_loss(const Tensor<S>& p, const Tensor<S>& y) {
  check_shape(p.shape() == y.shape(), "bce_loss: shape mismatch " +
                                          shape_str(p.shape()) + " vs " +
                                          shape_str(y.shape()));
  if (p.size() == 0) throw IndexError("bce_loss over empty tensors");
  const S lo = S(1e-7), hi = S(1) - S(1e-7);
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const S pc = std::clamp(p.data()[i], lo, hi);
    const S yy = y.data()[i];
    s -= yy * std::log(pc) + (S(1) - yy) * std::log(S(1) - pc);
  }
  auto out = Tensor<S>::scalar(static_cast<S>(s / p.size()));
  detail::record(out, {p, y}, [pn = p.node(), yn = y.node(), lo,
                               hi](TensorNode<S>& o) {
    if (!pn->requires_grad) return;
    pn->ensure_grad();
    const S g = o.grad[0] / static_cast<S>(pn->value.size());
    for (std::size_t i = 0; i < pn->value.size(); ++i) {
      const S pv = pn->value[i];
      if (pv <= lo || pv >= hi) continue;
      const S yy = yn->value[i];
      pn->grad[i] += g * (pv - yy) / (pv * (S(1) - pv));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// shape manipulation

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  auto out = Tensor<S>::from_data(std::move(new_shape), x.data());
  detail::record(out, {x}, [xn = x.node()](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
  });
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x, const std::vector<std::size_t>& perm) {
  check_shape(perm.size() == x.rank(), "transpose: permutation rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    detail::check_axis(p, x.rank());
    if (seen[p]) throw ConfigError("transpose: repeated axis in permutation");
    seen[p] = true;
  }
  const std::size_t r = x.rank();
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.dim(perm[i]);
  std::vector<std::size_t> in_strides(r, 1), out_strides(r, 1);
  for (std::size_t i = r; i-- > 1;)
    in_strides[i - 1] = in_strides[i] * x.dim(i);
  for (std::size_t i = r; i-- > 1;) out_strides[i - 1] = out_strides[i] * os[i];
  std::vector<S> v(x.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
    v[flat] = x.data()[src];
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  auto out = Tensor<S>::from_data(os, std::move(v));
  detail::record(out, {x},
                 [xn = x.node(), perm, os, in_strides](TensorNode<S>& o) {
    xn->ensure_grad();
    const std::size_t r = perm.size();
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < o.grad.size(); ++flat) {
      std::size_t src = 0;
      for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
      xn->grad[src] += o.grad[flat];
      for (std::size_t i = r; i-- > 0;) {
        if (++idx[i] < os[i]) break;
        idx[i] = 0;
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  detail::check_axis(axis, parts[0].rank());
  const Shape& s0 = parts[0].shape();
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    check_shape(p.rank() == s0.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i)
      check_shape(i == axis || p.dim(i) == s0[i],
                  "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                      shape_str(s0) + " on axis " + std::to_string(i));
    total_axis += p.dim(axis);
  }
  Shape os = s0;
  os[axis] = total_axis;
  std::size_t outer, n0, inner;
  detail::axis_split(s0, axis, outer, n0, inner);
  std::vector<S> v(numel(os));
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t np = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(p.ptr() + o * np * inner, p.ptr() + (o + 1) * np * inner,
                v.data() + (o * total_axis + off) * inner);
    off += np;
  }
  auto out = Tensor<S>::from_data(os, std::move(v));
  if (autograd::grad_enabled()) {
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (any) {
      std::vector<std::shared_ptr<TensorNode<S>>> nodes;
      std::vector<std::size_t> sizes;
      for (const auto& p : parts) {
        nodes.push_back(p.node());
        sizes.push_back(p.dim(axis));
        out.node()->parents.push_back(p.node());
      }
      out.node()->requires_grad = true;
      out.node()->backprop = [nodes, sizes, outer, inner,
                              total_axis](TensorNode<S>& o) {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
          const auto& n = nodes[pi];
          const std::size_t np = sizes[pi];
          if (n->requires_grad) {
            n->ensure_grad();
            for (std::size_t ou = 0; ou < outer; ++ou) {
              const S* gp = o.grad.data() + (ou * total_axis + off) * inner;
              S* dst = n->grad.data() + ou * np * inner;
              for (std::size_t i = 0; i < np * inner; ++i) dst[i] += gp[i];
            }
          }
          off += np;
        }
      };
    }
  }
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, std::size_t axis, std::size_t start,
                std::size_t len) {
  detail::check_axis(axis, x.rank());
  if (start + len > x.dim(axis)) {
    throw IndexError("slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of range for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  Shape os = x.shape();
  os[axis] = len;
  std::vector<S> v(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(x.ptr() + (o * n + start) * inner,
              x.ptr() + (o * n + start + len) * inner,
              v.data() + o * len * inner);
  auto out = Tensor<S>::from_data(os, std::move(v));
  detail::record(out, {x},
                 [xn = x.node(), outer, n, inner, start, len](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t ou = 0; ou < outer; ++ou) {
      const S* gp = o.grad.data() + ou * len * inner;
      S* dst = xn->grad.data() + (ou * n + start) * inner;
      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += gp[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// fused ops for the contrastive objective

template <typename S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x, S eps = S(1e-8)) {
  check_shape(x.rank() == 2, "l2_normalize_rows: need [N,E], got " +
                                 shape_str(x.shape()));
  const std::size_t N = x.dim(0), E = x.dim(1);
  std::vector<S> v(x.size());
  std::vector<S> inv_norm(N);
  for (std::size_t r = 0; r < N; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < E; ++j) {
      const double a = x.data()[r * E + j];
      s += a * a;
    }
    const S invn = static_cast<S>(1.0 / std::sqrt(s + eps));
    inv_norm[r] = invn;
    for (std::size_t j = 0; j < E; ++j) v[r * E + j] = x.data()[r * E + j] * invn;
  }
  auto out = Tensor<S>::from_data(x.shape(), std::move(v));
  detail::record(out, {x}, [xn = x.node(), inv_norm, N, E](TensorNode<S>& o) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < N; ++r) {
      double dot = 0;
      for (std::size_t j = 0; j < E; ++j)
        dot += o.grad[r * E + j] * o.value[r * E + j];
      for (std::size_t j = 0; j < E; ++j)
        xn->grad[r * E + j] += inv_norm[r] * (o.grad[r * E + j] -
                                              o.value[r * E + j] *
                                                  static_cast<S>(dot));
    }
  });
  return out;
}

// Mean negative log-softmax of the target column per row; the standard
// cross-entropy head, fused for stability.
template <typename S>
Tensor<S> cross_entropy_with_indices(const Tensor<S>& logits,
                                     const std::vector<std::size_t>& targets) {
  check_shape(logits.rank() == 2, "cross_entropy: need [N,K] logits, got " +
                                      shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (targets.size() != N)
    throw ShapeError("cross_entropy: target count " +
                     std::to_string(targets.size()) + " vs rows " +
                     std::to_string(N));
  std::vector<S> softmaxed(N * K);
  double loss = 0;
  for (std::size_t r = 0; r < N; ++r) {
    if (targets[r] >= K) throw IndexError("cross_entropy: target out of range");
    const S* lp = logits.ptr() + r * K;
    S mx = lp[0];
    for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, lp[j]);
    double sum = 0;
    for (std::size_t j = 0; j < K; ++j) {
      const double e = std::exp(static_cast<double>(lp[j] - mx));
      softmaxed[r * K + j] = static_cast<S>(e);
      sum += e;
    }
    for (std::size_t j = 0; j < K; ++j)
      softmaxed[r * K + j] = static_cast<S>(softmaxed[r * K + j] / sum);
    loss -= std::log(static_cast<double>(softmaxed[r * K + targets[r]]) +
                     1e-300);
  }
  auto out = Tensor<S>::scalar(static_cast<S>(loss / N));
  detail::record(out, {logits},
                 [ln = logits.node(), softmaxed, targets, N, K](TensorNode<S>& o) {
    ln->ensure_grad();
    const S g = o.grad[0] / static_cast<S>(N);
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t j = 0; j < K; ++j) {
        S d = softmaxed[r * K + j];
        if (j == targets[r]) d -= S(1);
        ln->grad[r * K + j] += g * d;
      }
  });
  return out;
}

}  // namespace ops
}  // namespace tsdiff
