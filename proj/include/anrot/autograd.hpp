#pragma once

// Tape-based reverse-mode differentiation over Tensor<T>. A forward pass
// records one node per op; Tape::backward walks the nodes in reverse and
// accumulates gradients into every node that needs one.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "anrot/errors.hpp"
#include "anrot/tensor.hpp"
#include "anrot/variational.hpp"

namespace anrot::ad {

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Var constant(Tensor<T> v) { return push(std::move(v), false, {}); }
  Var variable(Tensor<T> v) { return push(std::move(v), true, {}); }

  /// Record an op output. It needs a gradient iff any input does.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (Var v : inputs)
      if (v.valid()) needs = needs || nodes_.at(v.id).needs_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }
  Var record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (Var v : inputs)
      if (v.valid()) needs = needs || nodes_.at(v.id).needs_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool needs_grad(Var v) const { return v.valid() && node(v).needs_grad; }

  /// Gradient of the last backward() target w.r.t. `v`; zeros if unreached.
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor<T>(n.value.dims(), T(0));
    return n.grad;
  }

  /// Accumulation buffer, allocated on first use.
  Tensor<T>& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.dims(), T(0));
    return n.grad;
  }
  const Tensor<T>& value_at(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad_at(std::size_t id) const { return nodes_[id].needs_grad; }
  // Grad buffer of an input, or nullptr when that input takes no gradient.
  T* grad_ptr(Var v) {
    if (!v.valid() || !nodes_[v.id].needs_grad) return nullptr;
    return grad_ref(v.id).data().data();
  }

  void backward(Var loss, T seed = T(1)) {
    require(loss.valid() && loss.id < nodes_.size(),
            "backward: loss was not recorded on this tape");
    require(nodes_[loss.id].value.size() == 1, "backward: loss must be a scalar");
    require(!backward_done_, "backward: already run on this tape");
    backward_done_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    grad_ref(loss.id)[0] += seed;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const {
    require(v.valid() && v.id < nodes_.size(), "Tape: variable not recorded on this tape");
    return nodes_[v.id];
  }

  Var push(Tensor<T> v, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, needs, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references across push_back
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// elementwise

template <class T, class F, class DF>
Var unary(Tape<T>& t, Var x, F f, DF df) {
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(xv.dims());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return t.record(std::move(y), {x}, [x, df](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& xv = tp.value_at(x.id);
    const Tensor<T>& yv = tp.value_at(self);
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
  });
}

template <class T>
Var relu(Tape<T>& t, Var x) {
  return unary(
      t, x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var leaky_relu(Tape<T>& t, Var x, T alpha) {
  return unary(
      t, x, [alpha](T v) { return v > T(0) ? v : alpha * v; },
      [alpha](T v, T) { return v > T(0) ? T(1) : alpha; });
}

template <class T>
Var sigmoid(Tape<T>& t, Var x) {
  return unary(
      t, x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// exp(x) + offset
template <class T>
Var exp_plus(Tape<T>& t, Var x, T offset) {
  return unary(
      t, x, [offset](T v) { return std::exp(v) + offset; },
      [offset](T, T y) { return y - offset; });
}

template <class T>
Var square(Tape<T>& t, Var x) {
  return unary(
      t, x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Var scale(Tape<T>& t, Var x, T c) {
  return unary(
      t, x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b, T b_coeff = T(1)) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  require(av.dims() == bv.dims(), "add: shape mismatch " + dims_string(av.dims()) + " vs " +
                                      dims_string(bv.dims()));
  Tensor<T> y(av.dims());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + b_coeff * bv[i];
  return t.record(std::move(y), {a, b}, [a, b, b_coeff](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    if (T* ga = tp.grad_ptr(a))
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    if (T* gb = tp.grad_ptr(b))
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += b_coeff * gy[i];
  });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
  return add(t, a, b, T(-1));
}

template <class T>
Var mul(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  require(av.dims() == bv.dims(), "mul: shape mismatch");
  Tensor<T> y(av.dims());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  return t.record(std::move(y), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    const Tensor<T>& av = tp.value_at(a.id);
    const Tensor<T>& bv = tp.value_at(b.id);
    if (T* ga = tp.grad_ptr(a))
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
    if (T* gb = tp.grad_ptr(b))
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
  });
}

template <class T>
Var reshape(Tape<T>& t, Var x, std::vector<int> dims) {
  Tensor<T> y = t.value(x).reshaped(std::move(dims));
  return t.record(std::move(y), {x}, [x](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

template <class T>
Var sum(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  T acc = 0;
  for (T v : xv.data()) acc += v;
  return t.record(Tensor<T>({1}, std::vector<T>{acc}), {x}, [x](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad_ref(self)[0];
    const std::size_t n = tp.value_at(x.id).size();
    T* gx = tp.grad_ptr(x);
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

/// Scalar sum_i w_i * s_i over scalar inputs.
template <class T>
Var weighted_sum(Tape<T>& t, std::vector<Var> terms, std::vector<T> weights) {
  require(terms.size() == weights.size() && !terms.empty(), "weighted_sum: arity");
  T acc = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(t.value(terms[i]).size() == 1, "weighted_sum: scalar terms expected");
    acc += weights[i] * t.value(terms[i])[0];
  }
  return t.record(Tensor<T>({1}, std::vector<T>{acc}), terms,
                  [terms, weights](Tape<T>& tp, std::size_t self) {
                    const T g = tp.grad_ref(self)[0];
                    for (std::size_t i = 0; i < terms.size(); ++i)
                      if (T* gi = tp.grad_ptr(terms[i])) gi[0] += weights[i] * g;
                  });
}

// ---------------------------------------------------------------------------
// convolution and pooling

namespace detail {

template <class T>
void im2col(const Tensor<T>& x, int k, int pad, int Ho, int Wo, std::vector<T>& col) {
  const int B = x.batch(), C = x.channels(), H = x.height(), W = x.width();
  const std::size_t N = static_cast<std::size_t>(B) * Ho * Wo;
  col.assign(static_cast<std::size_t>(C) * k * k * N, T(0));
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.data() + (static_cast<std::size_t>((c * k + ky) * k + kx)) * N;
        for (int b = 0; b < B; ++b)
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy + ky - pad;
            if (iy < 0 || iy >= H) continue;
            T* dst = row + (static_cast<std::size_t>(b) * Ho + oy) * Wo;
            const T* src = &x.at(b, c, iy, 0);
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox + kx - pad;
              if (ix >= 0 && ix < W) dst[ox] = src[ix];
            }
          }
      }
}

template <class T>
void col2im(const std::vector<T>& col, int k, int pad, int Ho, int Wo, T* gx, int B, int C, int H,
            int W) {
  const std::size_t N = static_cast<std::size_t>(B) * Ho * Wo;
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col.data() + (static_cast<std::size_t>((c * k + ky) * k + kx)) * N;
        for (int b = 0; b < B; ++b)
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const T* src = row + (static_cast<std::size_t>(b) * Ho + oy) * Wo;
            T* dst = gx + ((static_cast<std::size_t>(b) * C + c) * H + iy) * W;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox + kx - pad;
              if (ix >= 0 && ix < W) dst[ix] += src[ox];
            }
          }
      }
}

}  // namespace detail

/// Stride-1 convolution. x (B,C,H,W), w (O,C,k,k), optional bias (O).
template <class T>
Var conv2d(Tape<T>& t, Var x, Var w, Var bias, int pad) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(w);
  require(xv.rank() == 4 && wv.rank() == 4, "conv2d: rank-4 input and kernel expected");
  require(wv.dim(1) == xv.channels(), "conv2d: kernel expects " + std::to_string(wv.dim(1)) +
                                          " channels, input has " +
                                          std::to_string(xv.channels()));
  require(wv.dim(2) == wv.dim(3), "conv2d: square kernels only");
  const int B = xv.batch(), C = xv.channels(), H = xv.height(), W = xv.width();
  const int O = wv.dim(0), k = wv.dim(2);
  const int Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d: kernel larger than padded input");
  if (bias.valid()) require(t.value(bias).size() == static_cast<std::size_t>(O), "conv2d: bias");

  const int K = C * k * k;
  const int P = Ho * Wo;
  const int N = B * P;
  std::vector<T> col;
  detail::im2col(xv, k, pad, Ho, Wo, col);
  std::vector<T> out(static_cast<std::size_t>(O) * N);
  gemm(O, N, K, wv.data().data(), col.data(), out.data(), false);

  Tensor<T> y({B, O, Ho, Wo});
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o) {
      const T bo = bias.valid() ? t.value(bias)[static_cast<std::size_t>(o)] : T(0);
      const T* src = out.data() + static_cast<std::size_t>(o) * N + static_cast<std::size_t>(b) * P;
      T* dst = &y.at(b, o, 0, 0);
      for (int p = 0; p < P; ++p) dst[p] = src[p] + bo;
    }

  return t.record(std::move(y), {x, w, bias}, [=](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& xv = tp.value_at(x.id);
    const Tensor<T>& wv = tp.value_at(w.id);
    const Tensor<T>& gy = tp.grad_ref(self);
    std::vector<T> gout(static_cast<std::size_t>(O) * N);
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < O; ++o) {
        const T* src = &gy.at(b, o, 0, 0);
        T* dst = gout.data() + static_cast<std::size_t>(o) * N + static_cast<std::size_t>(b) * P;
        std::copy(src, src + P, dst);
      }
    if (T* gb = tp.grad_ptr(bias))
      for (int o = 0; o < O; ++o) {
        T acc = 0;
        const T* row = gout.data() + static_cast<std::size_t>(o) * N;
        for (int n = 0; n < N; ++n) acc += row[n];
        gb[o] += acc;
      }
    const bool need_w = tp.needs_grad(w), need_x = tp.needs_grad(x);
    if (!need_w && !need_x) return;
    std::vector<T> col;
    detail::im2col(xv, k, pad, Ho, Wo, col);
    if (need_w) {
      std::vector<T> colT(col.size());
      transpose(K, N, col.data(), colT.data());
      gemm(O, K, N, gout.data(), colT.data(), tp.grad_ptr(w), true);
    }
    if (need_x) {
      std::vector<T> wT(wv.size());
      transpose(O, K, wv.data().data(), wT.data());
      std::vector<T> gcol(static_cast<std::size_t>(K) * N);
      gemm(K, N, O, wT.data(), gout.data(), gcol.data(), false);
      detail::col2im(gcol, k, pad, Ho, Wo, tp.grad_ptr(x), B, C, H, W);
    }
  });
}

/// Per-channel affine map y = x * scale[c] + shift[c].
template <class T>
Var scale_shift(Tape<T>& t, Var x, Var s, Var sh) {
  const Tensor<T>& xv = t.value(x);
  require(xv.rank() == 4, "scale_shift: rank-4 input expected");
  const int B = xv.batch(), C = xv.channels(), P = xv.height() * xv.width();
  require(t.value(s).size() == static_cast<std::size_t>(C) &&
              t.value(sh).size() == static_cast<std::size_t>(C),
          "scale_shift: parameter size must equal channel count");
  Tensor<T> y(xv.dims());
  const Tensor<T>& sv = t.value(s);
  const Tensor<T>& hv = t.value(sh);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* src = &xv.at(b, c, 0, 0);
      T* dst = &y.at(b, c, 0, 0);
      for (int p = 0; p < P; ++p) dst[p] = src[p] * sv[c] + hv[c];
    }
  return t.record(std::move(y), {x, s, sh}, [=](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& xv = tp.value_at(x.id);
    const Tensor<T>& sv = tp.value_at(s.id);
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    T* gs = tp.grad_ptr(s);
    T* gh = tp.grad_ptr(sh);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const std::size_t off = xv.offset(b, c, 0, 0);
        T acc_s = 0, acc_h = 0;
        for (int p = 0; p < P; ++p) {
          const T g = gy[off + p];
          if (gx) gx[off + p] += g * sv[c];
          acc_s += g * xv[off + p];
          acc_h += g;
        }
        if (gs) gs[c] += acc_s;
        if (gh) gh[c] += acc_h;
      }
  });
}

/// 2x2 max-pool, stride 2, floor semantics.
template <class T>
Var maxpool2(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  require(xv.rank() == 4 && xv.height() >= 2 && xv.width() >= 2,
          "maxpool2: input must be rank 4 with H, W >= 2");
  const int B = xv.batch(), C = xv.channels(), Ho = xv.height() / 2, Wo = xv.width() / 2;
  Tensor<T> y({B, C, Ho, Wo});
  std::vector<std::size_t> arg(y.size());
  std::size_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++o) {
          std::size_t best = xv.offset(b, c, 2 * oy, 2 * ox);
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t i = xv.offset(b, c, 2 * oy + dy, 2 * ox + dx);
              if (xv[i] > xv[best]) best = i;
            }
          arg[o] = best;
          y[o] = xv[best];
        }
  return t.record(std::move(y), {x}, [x, arg = std::move(arg)](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[arg[i]] += gy[i];
  });
}

/// Spatial average (B,C,H,W) -> (B,C).
template <class T>
Var global_avg_pool(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  require(xv.rank() == 4, "global_avg_pool: rank-4 input expected");
  const int B = xv.batch(), C = xv.channels(), P = xv.height() * xv.width();
  Tensor<T> y({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* src = &xv.at(b, c, 0, 0);
      T acc = 0;
      for (int p = 0; p < P; ++p) acc += src[p];
      y[static_cast<std::size_t>(b) * C + c] = acc / T(P);
    }
  return t.record(std::move(y), {x}, [x, P](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    for (std::size_t i = 0; i < gy.size(); ++i)
      for (int p = 0; p < P; ++p) gx[i * P + p] += gy[i] / T(P);
  });
}

/// Spatial maximum (B,C,H,W) -> (B,C).
template <class T>
Var global_max_pool(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  require(xv.rank() == 4, "global_max_pool: rank-4 input expected");
  const int B = xv.batch(), C = xv.channels(), P = xv.height() * xv.width();
  Tensor<T> y({B, C});
  std::vector<std::size_t> arg(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::size_t best = i * P;
    for (int p = 1; p < P; ++p)
      if (xv[i * P + p] > xv[best]) best = i * P + p;
    arg[i] = best;
    y[i] = xv[best];
  }
  (void)B;
  (void)C;
  return t.record(std::move(y), {x}, [x, arg = std::move(arg)](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[arg[i]] += gy[i];
  });
}

/// Channel-wise mean (B,C,H,W) -> (B,1,H,W).
template <class T>
Var channel_mean(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  require(xv.rank() == 4, "channel_mean: rank-4 input expected");
  const int B = xv.batch(), C = xv.channels(), P = xv.height() * xv.width();
  Tensor<T> y({B, 1, xv.height(), xv.width()});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* src = &xv.at(b, c, 0, 0);
      T* dst = &y.at(b, 0, 0, 0);
      for (int p = 0; p < P; ++p) dst[p] += src[p];
    }
  for (auto& v : y.storage()) v /= T(C);
  return t.record(std::move(y), {x}, [x, B, C, P](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < P; ++p)
          gx[(static_cast<std::size_t>(b) * C + c) * P + p] +=
              gy[static_cast<std::size_t>(b) * P + p] / T(C);
  });
}

/// Channel-wise maximum (B,C,H,W) -> (B,1,H,W).
template <class T>
Var channel_max(Tape<T>& t, Var x) {
  const Tensor<T>& xv = t.value(x);
  require(xv.rank() == 4, "channel_max: rank-4 input expected");
  const int B = xv.batch(), C = xv.channels(), P = xv.height() * xv.width();
  Tensor<T> y({B, 1, xv.height(), xv.width()});
  std::vector<std::size_t> arg(y.size());
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < P; ++p) {
      std::size_t best = static_cast<std::size_t>(b) * C * P + p;
      for (int c = 1; c < C; ++c) {
        const std::size_t i = (static_cast<std::size_t>(b) * C + c) * P + p;
        if (xv[i] > xv[best]) best = i;
      }
      const std::size_t o = static_cast<std::size_t>(b) * P + p;
      arg[o] = best;
      y[o] = xv[best];
    }
  return t.record(std::move(y), {x}, [x, arg = std::move(arg)](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[arg[i]] += gy[i];
  });
}

template <class T>
Var concat_channels(Tape<T>& t, Var a, Var b) {
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  require(av.rank() == 4 && bv.rank() == 4 && av.batch() == bv.batch() &&
              av.height() == bv.height() && av.width() == bv.width(),
          "concat_channels: shape mismatch");
  const int B = av.batch(), Ca = av.channels(), Cb = bv.channels();
  const int P = av.height() * av.width();
  Tensor<T> y({B, Ca + Cb, av.height(), av.width()});
  for (int bb = 0; bb < B; ++bb) {
    std::copy_n(&av.at(bb, 0, 0, 0), Ca * P, &y.at(bb, 0, 0, 0));
    std::copy_n(&bv.at(bb, 0, 0, 0), Cb * P, &y.at(bb, Ca, 0, 0));
  }
  return t.record(std::move(y), {a, b}, [=](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    T* ga = tp.grad_ptr(a);
    T* gb = tp.grad_ptr(b);
    for (int bb = 0; bb < B; ++bb) {
      const std::size_t base = static_cast<std::size_t>(bb) * (Ca + Cb) * P;
      if (ga)
        for (int i = 0; i < Ca * P; ++i) ga[static_cast<std::size_t>(bb) * Ca * P + i] += gy[base + i];
      if (gb)
        for (int i = 0; i < Cb * P; ++i)
          gb[static_cast<std::size_t>(bb) * Cb * P + i] += gy[base + Ca * P + i];
    }
  });
}

/// y = x W^T + b for x (B,F), W (O,F), b (O).
template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var bias) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(w);
  require(xv.rank() == 2 && wv.rank() == 2 && wv.dim(1) == xv.dim(1),
          "linear: expected x (B,F) and W (O,F); got " + dims_string(xv.dims()) + " and " +
              dims_string(wv.dims()));
  const int B = xv.dim(0), F = xv.dim(1), O = wv.dim(0);
  std::vector<T> wT(wv.size());
  transpose(O, F, wv.data().data(), wT.data());
  Tensor<T> y({B, O});
  gemm(B, O, F, xv.data().data(), wT.data(), y.data().data(), false);
  if (bias.valid()) {
    const Tensor<T>& bv = t.value(bias);
    require(bv.size() == static_cast<std::size_t>(O), "linear: bias size");
    for (int i = 0; i < B; ++i)
      for (int o = 0; o < O; ++o) y[static_cast<std::size_t>(i) * O + o] += bv[o];
  }
  return t.record(std::move(y), {x, w, bias}, [=](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& xv = tp.value_at(x.id);
    const Tensor<T>& wv = tp.value_at(w.id);
    const Tensor<T>& gy = tp.grad_ref(self);
    if (T* gx = tp.grad_ptr(x)) gemm(B, F, O, gy.data().data(), wv.data().data(), gx, true);
    if (T* gw = tp.grad_ptr(w)) {
      std::vector<T> gyT(gy.size());
      transpose(B, O, gy.data().data(), gyT.data());
      gemm(O, F, B, gyT.data(), xv.data().data(), gw, true);
    }
    if (T* gb = tp.grad_ptr(bias))
      for (int i = 0; i < B; ++i)
        for (int o = 0; o < O; ++o) gb[o] += gy[static_cast<std::size_t>(i) * O + o];
  });
}

/// x (B,C,H,W) scaled by a per-(b,c) gate g (B,C).
template <class T>
Var gate_channels(Tape<T>& t, Var x, Var g) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& gv = t.value(g);
  require(xv.rank() == 4 && gv.rank() == 2 && gv.dim(0) == xv.batch() &&
              gv.dim(1) == xv.channels(),
          "gate_channels: gate must be (B,C)");
  const std::size_t BC = gv.size();
  const int P = xv.height() * xv.width();
  Tensor<T> y(xv.dims());
  for (std::size_t i = 0; i < BC; ++i)
    for (int p = 0; p < P; ++p) y[i * P + p] = xv[i * P + p] * gv[i];
  return t.record(std::move(y), {x, g}, [=](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& xv = tp.value_at(x.id);
    const Tensor<T>& gv = tp.value_at(g.id);
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    T* gg = tp.grad_ptr(g);
    for (std::size_t i = 0; i < BC; ++i) {
      T acc = 0;
      for (int p = 0; p < P; ++p) {
        if (gx) gx[i * P + p] += gy[i * P + p] * gv[i];
        acc += gy[i * P + p] * xv[i * P + p];
      }
      if (gg) gg[i] += acc;
    }
  });
}

/// x (B,C,H,W) scaled by a per-(b,h,w) map s (B,1,H,W).
template <class T>
Var gate_spatial(Tape<T>& t, Var x, Var s) {
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& sv = t.value(s);
  require(xv.rank() == 4 && sv.rank() == 4 && sv.batch() == xv.batch() && sv.channels() == 1 &&
              sv.height() == xv.height() && sv.width() == xv.width(),
          "gate_spatial: map must be (B,1,H,W)");
  const int B = xv.batch(), C = xv.channels(), P = xv.height() * xv.width();
  Tensor<T> y(xv.dims());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < P; ++p) {
        const std::size_t i = (static_cast<std::size_t>(b) * C + c) * P + p;
        y[i] = xv[i] * sv[static_cast<std::size_t>(b) * P + p];
      }
  return t.record(std::move(y), {x, s}, [=](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& xv = tp.value_at(x.id);
    const Tensor<T>& sv = tp.value_at(s.id);
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    T* gs = tp.grad_ptr(s);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < P; ++p) {
          const std::size_t i = (static_cast<std::size_t>(b) * C + c) * P + p;
          const std::size_t j = static_cast<std::size_t>(b) * P + p;
          if (gx) gx[i] += gy[i] * sv[j];
          if (gs) gs[j] += gy[i] * xv[i];
        }
  });
}

/// Nearest-neighbour resize to (Ho, Wo).
template <class T>
Var resize_nearest(Tape<T>& t, Var x, int Ho, int Wo) {
  const Tensor<T>& xv = t.value(x);
  require(xv.rank() == 4 && Ho >= 1 && Wo >= 1, "resize_nearest: bad shape");
  const int B = xv.batch(), C = xv.channels(), H = xv.height(), W = xv.width();
  Tensor<T> y({B, C, Ho, Wo});
  std::vector<std::size_t> src(y.size());
  std::size_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox, ++o) {
          const int iy = oy * H / Ho, ix = ox * W / Wo;
          src[o] = xv.offset(b, c, iy, ix);
          y[o] = xv[src[o]];
        }
  return t.record(std::move(y), {x}, [x, src = std::move(src)](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gx = tp.grad_ptr(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[src[i]] += gy[i];
  });
}

/// Rows (R,F) -> (R2,F) via a constant mixing matrix A (R2 x R).
template <class T>
Var mix_rows(Tape<T>& t, Var x, std::vector<T> A, int out_rows) {
  const Tensor<T>& xv = t.value(x);
  require(xv.rank() == 2, "mix_rows: rank-2 input expected");
  const int R = xv.dim(0), F = xv.dim(1);
  require(A.size() == static_cast<std::size_t>(out_rows) * R, "mix_rows: matrix size");
  Tensor<T> y({out_rows, F});
  gemm(out_rows, F, R, A.data(), xv.data().data(), y.data().data(), false);
  return t.record(std::move(y), {x}, [x, A = std::move(A), out_rows, R, F](Tape<T>& tp,
                                                                          std::size_t self) {
    const Tensor<T>& gy = tp.grad_ref(self);
    std::vector<T> AT(A.size());
    transpose(out_rows, R, A.data(), AT.data());
    gemm(R, F, out_rows, AT.data(), gy.data().data(), tp.grad_ptr(x), true);
  });
}

/// z = mu + sqrt(var) * noise, noise held constant.
template <class T>
Var reparameterize(Tape<T>& t, Var mu, Var var, Tensor<T> noise) {
  const Tensor<T>& mv = t.value(mu);
  const Tensor<T>& vv = t.value(var);
  require(mv.dims() == vv.dims() && mv.dims() == noise.dims(),
          "reparameterize: mean, var and noise shapes must agree");
  Tensor<T> z(mv.dims());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mv[i] + std::sqrt(vv[i]) * noise[i];
  return t.record(std::move(z), {mu, var},
                  [mu, var, noise = std::move(noise)](Tape<T>& tp, std::size_t self) {
                    const Tensor<T>& gz = tp.grad_ref(self);
                    const Tensor<T>& vv = tp.value_at(var.id);
                    if (T* gm = tp.grad_ptr(mu))
                      for (std::size_t i = 0; i < gz.size(); ++i) gm[i] += gz[i];
                    if (T* gv = tp.grad_ptr(var))
                      for (std::size_t i = 0; i < gz.size(); ++i)
                        gv[i] += gz[i] * noise[i] / (T(2) * std::sqrt(vv[i]));
                  });
}

// ---------------------------------------------------------------------------
// distribution distances and losses

enum class PairMetric { HellingerSq, KL };

/// For each (i, j) in `pairs`: D(A_i, B_j) where A = (mean_a, var_a) rows and
/// B = (mean_b, var_b) rows, all (rows, d). KL is D_KL(A_i || B_j).
template <class T>
Var pair_distances(Tape<T>& t, Var mean_a, Var var_a, Var mean_b, Var var_b,
                   std::vector<std::pair<int, int>> pairs, PairMetric metric) {
  const Tensor<T>& ma = t.value(mean_a);
  const Tensor<T>& va = t.value(var_a);
  const Tensor<T>& mb = t.value(mean_b);
  const Tensor<T>& vb = t.value(var_b);
  require(ma.rank() == 2 && ma.dims() == va.dims() && mb.rank() == 2 && mb.dims() == vb.dims() &&
              ma.dim(1) == mb.dim(1),
          "pair_distances: mean/var shapes disagree");
  require(!pairs.empty(), "pair_distances: no pairs");
  const int d = ma.dim(1);
  for (auto [i, j] : pairs)
    require(i >= 0 && i < ma.dim(0) && j >= 0 && j < mb.dim(0), "pair_distances: index range");

  Tensor<T> y({static_cast<int>(pairs.size())});
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const std::size_t a = static_cast<std::size_t>(pairs[k].first) * d;
    const std::size_t b = static_cast<std::size_t>(pairs[k].second) * d;
    T acc = 0;
    for (int e = 0; e < d; ++e) {
      const T v1 = va[a + e], v2 = vb[b + e], dm = ma[a + e] - mb[b + e];
      if (metric == PairMetric::HellingerSq) {
        const T s = T(0.5) * (v1 + v2);
        acc += T(0.25) * std::log(v1) + T(0.25) * std::log(v2) - T(0.5) * std::log(s) -
               T(0.125) * dm * dm / s;
      } else {
        acc += T(0.5) * (std::log(v2 / v1) + (v1 + dm * dm) / v2 - T(1));
      }
    }
    y[k] = metric == PairMetric::HellingerSq ? T(1) - std::exp(acc) : acc;
  }

  return t.record(std::move(y), {mean_a, var_a, mean_b, var_b},
                  [=, pairs = std::move(pairs)](Tape<T>& tp, std::size_t self) {
    const Tensor<T>& ma = tp.value_at(mean_a.id);
    const Tensor<T>& va = tp.value_at(var_a.id);
    const Tensor<T>& mb = tp.value_at(mean_b.id);
    const Tensor<T>& vb = tp.value_at(var_b.id);
    const Tensor<T>& yv = tp.value_at(self);
    const Tensor<T>& gy = tp.grad_ref(self);
    T* gma = tp.grad_ptr(mean_a);
    T* gva = tp.grad_ptr(var_a);
    T* gmb = tp.grad_ptr(mean_b);
    T* gvb = tp.grad_ptr(var_b);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const std::size_t a = static_cast<std::size_t>(pairs[k].first) * d;
      const std::size_t b = static_cast<std::size_t>(pairs[k].second) * d;
      for (int e = 0; e < d; ++e) {
        const T v1 = va[a + e], v2 = vb[b + e], dm = ma[a + e] - mb[b + e];
        T d_m1, d_v1, d_v2;
        if (metric == PairMetric::HellingerSq) {
          // D^2 = 1 - BC, dD^2 = -BC * d ln BC
          const T bc = T(1) - yv[k];
          const T s = T(0.5) * (v1 + v2);
          const T q = dm * dm / (T(16) * s * s);
          d_m1 = -bc * (-T(0.25) * dm / s);
          d_v1 = -bc * (T(0.25) / v1 - T(0.25) / s + q);
          d_v2 = -bc * (T(0.25) / v2 - T(0.25) / s + q);
        } else {
          d_m1 = dm / v2;
          d_v1 = T(0.5) * (-T(1) / v1 + T(1) / v2);
          d_v2 = T(0.5) * (T(1) / v2 - (v1 + dm * dm) / (v2 * v2));
        }
        const T g = gy[k];
        if (gma) gma[a + e] += g * d_m1;
        if (gmb) gmb[b + e] -= g * d_m1;
        if (gva) gva[a + e] += g * d_v1;
        if (gvb) gvb[b + e] += g * d_v2;
      }
    }
  });
}

/// Mean over active rows of -log softmax(logits)[label]. logits (R,N).
template <class T>
Var softmax_xent(Tape<T>& t, Var logits, std::vector<int> labels, std::vector<bool> active = {}) {
  const Tensor<T>& lv = t.value(logits);
  require(lv.rank() == 2, "softmax_xent: logits must be (rows, classes)");
  const int R = lv.dim(0), N = lv.dim(1);
  require(labels.size() == static_cast<std::size_t>(R), "softmax_xent: label count");
  if (active.empty()) active.assign(R, true);
  require(active.size() == labels.size(), "softmax_xent: mask size");
  int count = 0;
  T acc = 0;
  std::vector<T> prob(lv.size());
  for (int r = 0; r < R; ++r) {
    const T* row = lv.data().data() + static_cast<std::size_t>(r) * N;
    const T mx = *std::max_element(row, row + N);
    T z = 0;
    for (int c = 0; c < N; ++c) z += std::exp(row[c] - mx);
    for (int c = 0; c < N; ++c) prob[static_cast<std::size_t>(r) * N + c] = std::exp(row[c] - mx) / z;
    if (!active[r]) continue;
    require(labels[r] >= 0 && labels[r] < N, "softmax_xent: label out of range");
    acc += -(row[labels[r]] - mx - std::log(z));
    ++count;
  }
  const T value = count ? acc / T(count) : T(0);
  return t.record(Tensor<T>({1}, std::vector<T>{value}), {logits},
                  [=, labels = std::move(labels), active = std::move(active),
                   prob = std::move(prob)](Tape<T>& tp, std::size_t self) {
                    if (!count) return;
                    const T g = tp.grad_ref(self)[0] / T(count);
                    T* gl = tp.grad_ptr(logits);
                    for (int r = 0; r < R; ++r) {
                      if (!active[r]) continue;
                      for (int c = 0; c < N; ++c)
                        gl[static_cast<std::size_t>(r) * N + c] +=
                            g * (prob[static_cast<std::size_t>(r) * N + c] -
                                 (c == labels[r] ? T(1) : T(0)));
                    }
                  });
}

/// mean |a - target| with target held constant.
template <class T>
Var l1_mean(Tape<T>& t, Var a, Tensor<T> target) {
  const Tensor<T>& av = t.value(a);
  require(av.dims() == target.dims(), "l1_mean: shape mismatch " + dims_string(av.dims()) +
                                          " vs " + dims_string(target.dims()));
  T acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(av[i] - target[i]);
  const T n = T(av.size());
  return t.record(Tensor<T>({1}, std::vector<T>{acc / n}), {a},
                  [a, n, target = std::move(target)](Tape<T>& tp, std::size_t self) {
                    const T g = tp.grad_ref(self)[0] / n;
                    const Tensor<T>& av = tp.value_at(a.id);
                    T* ga = tp.grad_ptr(a);
                    for (std::size_t i = 0; i < av.size(); ++i) {
                      const T diff = av[i] - target[i];
                      ga[i] += diff > T(0) ? g : (diff < T(0) ? -g : T(0));
                    }
                  });
}

/// Mean over rows of the summed per-dimension prior penalty; mean, var (B,d).
template <class T>
Var prior_penalty(Tape<T>& t, Var mean, Var var, PenaltyKind kind) {
  const Tensor<T>& mv = t.value(mean);
  const Tensor<T>& vv = t.value(var);
  require(mv.rank() == 2 && mv.dims() == vv.dims(), "prior_penalty: shapes");
  const T rows = T(mv.dim(0));
  T acc = 0;
  for (std::size_t i = 0; i < mv.size(); ++i)
    acc += T(::anrot::detail::penalty_term(kind.kind, kind.lambda, double(mv[i]), double(vv[i])).value);
  return t.record(Tensor<T>({1}, std::vector<T>{acc / rows}), {mean, var},
                  [=](Tape<T>& tp, std::size_t self) {
                    const T g = tp.grad_ref(self)[0] / rows;
                    const Tensor<T>& mv = tp.value_at(mean.id);
                    const Tensor<T>& vv = tp.value_at(var.id);
                    T* gm = tp.grad_ptr(mean);
                    T* gv = tp.grad_ptr(var);
                    for (std::size_t i = 0; i < mv.size(); ++i) {
                      const auto term = ::anrot::detail::penalty_term(kind.kind, kind.lambda,
                                                                      double(mv[i]), double(vv[i]));
                      if (gm) gm[i] += g * T(term.d_mean);
                      if (gv) gv[i] += g * T(term.d_var);
                    }
                  });
}

}  // namespace anrot::ad
