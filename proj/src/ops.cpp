// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "mipcnet/errors.hpp"

namespace mipcnet::ag {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ValidationError("axis out of range");
  return axis;
}

// Strides of a row-major shape.
std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  }
  return st;
}

struct Broadcast {
  Shape out;
  std::vector<int64_t> stride_a, stride_b;  // per out axis, 0 where broadcast
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(rank, 1);
  bc.stride_a.assign(rank, 0);
  bc.stride_b.assign(rank, 0);
  auto sa = strides_of(a), sb = strides_of(b);
  for (size_t i = 0; i < rank; ++i) {
    const int64_t ia = static_cast<int64_t>(i) - static_cast<int64_t>(rank - a.size());
    const int64_t ib = static_cast<int64_t>(i) - static_cast<int64_t>(rank - b.size());
    const int64_t da = ia >= 0 ? a[static_cast<size_t>(ia)] : 1;
    const int64_t db = ib >= 0 ? b[static_cast<size_t>(ib)] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ValidationError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[i] = std::max(da, db);
    if (ia >= 0 && da != 1) bc.stride_a[i] = sa[static_cast<size_t>(ia)];
    if (ib >= 0 && db != 1) bc.stride_b[i] = sb[static_cast<size_t>(ib)];
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const size_t rank = bc.out.size();
  const int64_t total = shape_numel(bc.out);
  if (total == 0) return;
  std::vector<int64_t> idx(rank, 0);
  int64_t ia = 0, ib = 0;
  const int64_t inner = rank ? bc.out[rank - 1] : 1;
  const int64_t inner_sa = rank ? bc.stride_a[rank - 1] : 0;
  const int64_t inner_sb = rank ? bc.stride_b[rank - 1] : 0;
  for (int64_t o = 0; o < total; o += inner) {
    for (int64_t j = 0; j < inner; ++j) fn(o + j, ia + j * inner_sa, ib + j * inner_sb);
    // advance the odometer over all but the last axis
    for (int d = static_cast<int>(rank) - 2; d >= 0; --d) {
      const auto du = static_cast<size_t>(d);
      ++idx[du];
      ia += bc.stride_a[du];
      ib += bc.stride_b[du];
      if (idx[du] < bc.out[du]) break;
      ia -= bc.stride_a[du] * bc.out[du];
      ib -= bc.stride_b[du] * bc.out[du];
      idx[du] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() == bv.shape()) {
    Tensor<T> out(av.shape());
    const T* pa = av.data();
    const T* pb = bv.data();
    T* po = out.data();
    const int64_t n = out.numel();
    switch (op) {
      case BinOp::kAdd: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinOp::kSub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinOp::kMul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    }
    return make_result<T>(std::move(out), {a.node(), b.node()}, [op](Node<T>& self) {
      auto& pa_node = *self.parents[0];
      auto& pb_node = *self.parents[1];
      const Tensor<T>& g = self.grad;
      if (pa_node.requires_grad) {
        if (op == BinOp::kMul) {
          Tensor<T> ga(g.shape());
          for (int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * pb_node.value[i];
          pa_node.accumulate(std::move(ga));
        } else {
          pa_node.accumulate(g);
        }
      }
      if (pb_node.requires_grad) {
        Tensor<T> gb(g.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
          gb[i] = op == BinOp::kMul ? g[i] * pa_node.value[i] : (op == BinOp::kSub ? -g[i] : g[i]);
        }
        pb_node.accumulate(std::move(gb));
      }
    });
  }
  auto bc = std::make_shared<Broadcast>(broadcast_shapes(av.shape(), bv.shape()));
  Tensor<T> out(bc->out);
  const T* pa = av.data();
  const T* pb = bv.data();
  T* po = out.data();
  for_each_broadcast(*bc, [&](int64_t o, int64_t i, int64_t j) {
    switch (op) {
      case BinOp::kAdd: po[o] = pa[i] + pb[j]; break;
      case BinOp::kSub: po[o] = pa[i] - pb[j]; break;
      case BinOp::kMul: po[o] = pa[i] * pb[j]; break;
    }
  });
  return make_result<T>(std::move(out), {a.node(), b.node()}, [op, bc](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    const T* g = self.grad.data();
    Tensor<T> ga, gb;
    if (na.requires_grad) ga = Tensor<T>(na.value.shape());
    if (nb.requires_grad) gb = Tensor<T>(nb.value.shape());
    const T* va = na.value.data();
    const T* vb = nb.value.data();
    for_each_broadcast(*bc, [&](int64_t o, int64_t i, int64_t j) {
      if (!ga.empty()) ga[i] += op == BinOp::kMul ? g[o] * vb[j] : g[o];
      if (!gb.empty()) gb[j] += op == BinOp::kMul ? g[o] * va[i] : (op == BinOp::kSub ? -g[o] : g[o]);
    });
    if (!ga.empty()) na.accumulate(std::move(ga));
    if (!gb.empty()) nb.accumulate(std::move(gb));
  });
}

template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  return make_result<T>(std::move(out), {x.node()}, [df](Node<T>& self) {
    auto& nx = *self.parents[0];
    Tensor<T> gx(nx.value.shape());
    for (int64_t i = 0; i < gx.numel(); ++i) gx[i] = self.grad[i] * df(nx.value[i], self.value[i]);
    nx.accumulate(std::move(gx));
  });
}

// (outer, axis, inner) decomposition of a shape around one axis.
struct AxisSplit {
  int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit sp;
  for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
  sp.len = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

template <typename T>
void im2col(const T* img, int64_t channels, int64_t h, int64_t w, int k, int stride, int pad, int64_t out_h,
            int64_t out_w, T* cols) {
  const int64_t spatial = out_h * out_w;
  for (int64_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * spatial;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * out_w, row + (oy + 1) * out_w, T(0));
            continue;
          }
          const T* src = img + (c * h + iy) * w;
          T* dst = row + oy * out_w;
          if (stride == 1) {
            // valid ox satisfy 0 <= ox - pad + kx < w
            const int64_t lo = std::clamp<int64_t>(pad - kx, 0, out_w);
            const int64_t hi = std::clamp<int64_t>(w + pad - kx, lo, out_w);
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo - pad + kx, src + hi - pad + kx, dst + lo);
            std::fill(dst + hi, dst + out_w, T(0));
            continue;
          }
          for (int64_t ox = 0; ox < out_w; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int64_t channels, int64_t h, int64_t w, int k, int stride, int pad, int64_t out_h,
            int64_t out_w, T* img) {
  const int64_t spatial = out_h * out_w;
  for (int64_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * spatial;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (c * h + iy) * w + kx - pad;
          const T* src = row + oy * out_w;
          const int64_t lo = std::max<int64_t>(0, (pad - kx + stride - 1) / stride);
          const int64_t last = w - 1 + pad - kx;
          const int64_t hi = last < 0 ? 0 : std::min<int64_t>(out_w, last / stride + 1);
          if (stride == 1) {
            for (int64_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int64_t ox = lo; ox < hi; ++ox) dst[ox * stride] += src[ox];
          }
        }
      }
    }
  }
}

struct BilinearTap {
  int64_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<BilinearTap> bilinear_taps(int64_t in, int64_t out) {
  std::vector<BilinearTap> taps(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

void require_rank(const Shape& s, size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ValidationError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kAdd);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kSub);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kMul);
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary(a, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(
      x,
      [](T v) {
        // split by sign to avoid exp overflow
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary(
      x, [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc), {x.node()}, [](Node<T>& self) {
    auto& nx = *self.parents[0];
    nx.accumulate(Tensor<T>(nx.value.shape(), self.grad[0]));
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const auto n = static_cast<T>(x.value().numel());
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc / n), {x.node()}, [n](Node<T>& self) {
    auto& nx = *self.parents[0];
    nx.accumulate(Tensor<T>(nx.value.shape(), self.grad[0] / n));
  });
}

template <typename T>
Var<T> mean_axis(const Var<T>& x, int axis) {
  axis = normalize_axis(axis, x.value().rank());
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = 1;
  Tensor<T> out(out_shape);
  const T* px = x.value().data();
  const T len = static_cast<T>(sp.len);
  const T inv = T(1) / len;
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      // Shifted by the first element: exact for constant slices.
      const T ref = px[o * sp.len * sp.inner + i];
      T acc = 0;
      for (int64_t a = 0; a < sp.len; ++a) acc += px[(o * sp.len + a) * sp.inner + i] - ref;
      out[o * sp.inner + i] = ref + acc / len;
    }
  }
  return make_result<T>(std::move(out), {x.node()}, [sp, inv](Node<T>& self) {
    auto& nx = *self.parents[0];
    Tensor<T> gx(nx.value.shape());
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        const T g = self.grad[o * sp.inner + i] * inv;
        for (int64_t a = 0; a < sp.len; ++a) gx[(o * sp.len + a) * sp.inner + i] = g;
      }
    }
    nx.accumulate(std::move(gx));
  });
}

template <typename T>
Var<T> max_axis(const Var<T>& x, int axis) {
  axis = normalize_axis(axis, x.value().rank());
  const auto sp = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = 1;
  Tensor<T> out(out_shape);
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
  const T* px = x.value().data();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      int64_t best = (o * sp.len) * sp.inner + i;
      for (int64_t a = 1; a < sp.len; ++a) {
        const int64_t idx = (o * sp.len + a) * sp.inner + i;
        if (px[idx] > px[best]) best = idx;
      }
      out[o * sp.inner + i] = px[best];
      (*argmax)[static_cast<size_t>(o * sp.inner + i)] = best;
    }
  }
  return make_result<T>(std::move(out), {x.node()}, [argmax](Node<T>& self) {
    auto& nx = *self.parents[0];
    Tensor<T> gx(nx.value.shape());
    for (size_t k = 0; k < argmax->size(); ++k) gx[(*argmax)[k]] += self.grad[static_cast<int64_t>(k)];
    nx.accumulate(std::move(gx));
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x.node()}, [](Node<T>& self) {
    auto& nx = *self.parents[0];
    nx.accumulate(self.grad.reshaped(nx.value.shape()));
  });
}

namespace {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
  const Shape& in = x.shape();
  const size_t rank = in.size();
  Shape out_shape(rank);
  const auto in_strides = strides_of(in);
  std::vector<int64_t> src_stride(rank);
  for (size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[static_cast<size_t>(perm[i])];
    src_stride[i] = in_strides[static_cast<size_t>(perm[i])];
  }
  Tensor<T> out(out_shape);
  if (out.numel() == 0) return out;
  std::vector<int64_t> idx(rank, 0);
  int64_t src = 0;
  const T* px = x.data();
  T* po = out.data();
  const int64_t inner = out_shape[rank - 1];
  const int64_t inner_stride = src_stride[rank - 1];
  for (int64_t o = 0; o < out.numel(); o += inner) {
    for (int64_t j = 0; j < inner; ++j) po[o + j] = px[src + j * inner_stride];
    for (int d = static_cast<int>(rank) - 2; d >= 0; --d) {
      const auto du = static_cast<size_t>(d);
      ++idx[du];
      src += src_stride[du];
      if (idx[du] < out_shape[du]) break;
      src -= src_stride[du] * out_shape[du];
      idx[du] = 0;
    }
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm) {
  const size_t rank = x.shape().size();
  if (perm.size() != rank) throw ValidationError("permute: rank mismatch");
  std::vector<int> inverse(rank);
  std::vector<bool> seen(rank, false);
  for (size_t i = 0; i < rank; ++i) {
    const int p = perm[i];
    if (p < 0 || p >= static_cast<int>(rank) || seen[static_cast<size_t>(p)]) {
      throw ValidationError("permute: invalid permutation");
    }
    seen[static_cast<size_t>(p)] = true;
    inverse[static_cast<size_t>(p)] = static_cast<int>(i);
  }
  return make_result<T>(permute_tensor(x.value(), perm), {x.node()}, [inverse](Node<T>& self) {
    self.parents[0]->accumulate(permute_tensor(self.grad, inverse));
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw ValidationError("concat of zero tensors");
  const Shape& ref = xs.front().shape();
  axis = normalize_axis(axis, static_cast<int>(ref.size()));
  Shape out_shape = ref;
  int64_t total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == ref.size();
    for (size_t i = 0; ok && i < s.size(); ++i) ok = static_cast<int>(i) == axis || s[i] == ref[i];
    if (!ok) throw ValidationError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s));
    total += s[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = total;
  const auto sp = split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<int64_t> offsets;
  int64_t offset = 0;
  for (const auto& x : xs) {
    offsets.push_back(offset);
    const int64_t len = x.dim(axis);
    const T* px = x.value().data();
    for (int64_t o = 0; o < sp.outer; ++o) {
      std::copy(px + o * len * sp.inner, px + (o + 1) * len * sp.inner,
                out.data() + (o * total + offset) * sp.inner);
    }
    offset += len;
  }
  std::vector<NodePtr<T>> parents;
  for (const auto& x : xs) parents.push_back(x.node());
  return make_result<T>(std::move(out), std::move(parents), [sp, offsets, axis, total](Node<T>& self) {
    for (size_t k = 0; k < self.parents.size(); ++k) {
      auto& nx = *self.parents[k];
      if (!nx.requires_grad) continue;
      const int64_t len = nx.value.dim(axis);
      Tensor<T> gx(nx.value.shape());
      for (int64_t o = 0; o < sp.outer; ++o) {
        const T* src = self.grad.data() + (o * total + offsets[k]) * sp.inner;
        std::copy(src, src + len * sp.inner, gx.data() + o * len * sp.inner);
      }
      nx.accumulate(std::move(gx));
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int padding) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  const int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t cout = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    throw ValidationError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                          shape_str(x.shape()));
  }
  if (bias.defined() && (bias.value().rank() != 1 || bias.dim(0) != cout)) {
    throw ValidationError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  const int64_t out_h = (h + 2 * padding - k) / stride + 1;
  const int64_t out_w = (w + 2 * padding - k) / stride + 1;
  if (out_h <= 0 || out_w <= 0) throw ValidationError("conv2d: input " + shape_str(x.shape()) + " too small");
  const int64_t patch = cin * k * k;
  const int64_t spatial = out_h * out_w;
  const bool direct = k == 1 && stride == 1 && padding == 0;

  Tensor<T> out({batch, cout, out_h, out_w});
  CMapRM<T> wmat(weight.value().data(), cout, patch);
  AlignedVector<T> cols(direct ? 0 : static_cast<size_t>(patch * spatial));
  for (int64_t b = 0; b < batch; ++b) {
    const T* img = x.value().data() + b * cin * h * w;
    const T* colp = img;
    if (!direct) {
      im2col(img, cin, h, w, k, stride, padding, out_h, out_w, cols.data());
      colp = cols.data();
    }
    MapRM<T> omat(out.data() + b * cout * spatial, cout, spatial);
    omat.noalias() = wmat * CMapRM<T>(colp, patch, spatial);
    if (bias.defined()) {
      for (int64_t c = 0; c < cout; ++c) omat.row(c).array() += bias.value()[c];
    }
  }

  std::vector<NodePtr<T>> parents{x.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return make_result<T>(std::move(out), std::move(parents), [=](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    Tensor<T> gx, gw, gb;
    if (nx.requires_grad) gx = Tensor<T>(nx.value.shape());
    if (nw.requires_grad) gw = Tensor<T>(nw.value.shape());
    const bool has_bias = self.parents.size() > 2 && self.parents[2]->requires_grad;
    if (has_bias) gb = Tensor<T>({cout});
    CMapRM<T> wm(nw.value.data(), cout, patch);
    AlignedVector<T> colbuf(direct ? 0 : static_cast<size_t>(patch * spatial));
    MatRM<T> dcols;
    for (int64_t b = 0; b < batch; ++b) {
      CMapRM<T> gy(self.grad.data() + b * cout * spatial, cout, spatial);
      const T* img = nx.value.data() + b * cin * h * w;
      if (!gw.empty()) {
        const T* colp = img;
        if (!direct) {
          im2col(img, cin, h, w, k, stride, padding, out_h, out_w, colbuf.data());
          colp = colbuf.data();
        }
        MapRM<T>(gw.data(), cout, patch).noalias() += gy * CMapRM<T>(colp, patch, spatial).transpose();
      }
      if (!gx.empty()) {
        if (direct) {
          MapRM<T>(gx.data() + b * cin * h * w, patch, spatial).noalias() += wm.transpose() * gy;
        } else {
          dcols.noalias() = wm.transpose() * gy;
          col2im(dcols.data(), cin, h, w, k, stride, padding, out_h, out_w, gx.data() + b * cin * h * w);
        }
      }
      if (!gb.empty()) {
        for (int64_t c = 0; c < cout; ++c) gb[c] += gy.row(c).sum();
      }
    }
    if (!gx.empty()) nx.accumulate(std::move(gx));
    if (!gw.empty()) nw.accumulate(std::move(gw));
    if (!gb.empty()) self.parents[2]->accumulate(std::move(gb));
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps) {
  require_rank(x.shape(), 4, "batch_norm input");
  const int64_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  const int64_t count = batch * hw;
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(channels));
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  for (int64_t c = 0; c < channels; ++c) {
    T mu, var;
    if (training) {
      T acc = 0;
      for (int64_t b = 0; b < batch; ++b) {
        const T* p = px + (b * channels + c) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += p[i];
      }
      mu = acc / static_cast<T>(count);
      T sq = 0;
      for (int64_t b = 0; b < batch; ++b) {
        const T* p = px + (b * channels + c) * hw;
        for (int64_t i = 0; i < hw; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<T>(count);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(c)] = is;
    const T g = gamma.value()[c];
    const T bt = beta.value()[c];
    for (int64_t b = 0; b < batch; ++b) {
      const int64_t base = (b * channels + c) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        const T xh = (px[base + i] - mu) * is;
        (*xhat)[base + i] = xh;
        out[base + i] = xh * g + bt;
      }
    }
  }
  return make_result<T>(
      std::move(out), {x.node(), gamma.node(), beta.node()},
      [=](Node<T>& self) {
        auto& nx = *self.parents[0];
        auto& ng = *self.parents[1];
        auto& nb = *self.parents[2];
        Tensor<T> gx, gg, gbeta;
        if (nx.requires_grad) gx = Tensor<T>(nx.value.shape());
        if (ng.requires_grad) gg = Tensor<T>({channels});
        if (nb.requires_grad) gbeta = Tensor<T>({channels});
        const T* gy = self.grad.data();
        for (int64_t c = 0; c < channels; ++c) {
          T sum_g = 0, sum_gx = 0;
          for (int64_t b = 0; b < batch; ++b) {
            const int64_t base = (b * channels + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              sum_g += gy[base + i];
              sum_gx += gy[base + i] * (*xhat)[base + i];
            }
          }
          if (!gg.empty()) gg[c] = sum_gx;
          if (!gbeta.empty()) gbeta[c] = sum_g;
          if (gx.empty()) continue;
          const T gam = ng.value[c];
          const T is = (*inv_std)[static_cast<size_t>(c)];
          for (int64_t b = 0; b < batch; ++b) {
            const int64_t base = (b * channels + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              if (training) {
                const auto n = static_cast<T>(count);
                gx[base + i] = gam * is * (gy[base + i] - sum_g / n - (*xhat)[base + i] * sum_gx / n);
              } else {
                gx[base + i] = gam * is * gy[base + i];
              }
            }
          }
        }
        if (!gx.empty()) nx.accumulate(std::move(gx));
        if (!gg.empty()) ng.accumulate(std::move(gg));
        if (!gbeta.empty()) nb.accumulate(std::move(gbeta));
      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(weight.shape(), 2, "linear weight");
  const int64_t in = weight.dim(1), out_f = weight.dim(0);
  if (x.shape().back() != in) {
    throw ValidationError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  const int64_t rows = x.value().numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor<T> out(out_shape);
  MapRM<T> om(out.data(), rows, out_f);
  om.noalias() = CMapRM<T>(x.value().data(), rows, in) * CMapRM<T>(weight.value().data(), out_f, in).transpose();
  if (bias.defined()) {
    om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data(), out_f);
  }
  std::vector<NodePtr<T>> parents{x.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return make_result<T>(std::move(out), std::move(parents), [=](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    CMapRM<T> gy(self.grad.data(), rows, out_f);
    if (nx.requires_grad) {
      Tensor<T> gx(nx.value.shape());
      MapRM<T>(gx.data(), rows, in).noalias() = gy * CMapRM<T>(nw.value.data(), out_f, in);
      nx.accumulate(std::move(gx));
    }
    if (nw.requires_grad) {
      Tensor<T> gw(nw.value.shape());
      MapRM<T>(gw.data(), out_f, in).noalias() = gy.transpose() * CMapRM<T>(nx.value.data(), rows, in);
      nw.accumulate(std::move(gw));
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      Tensor<T> gb({out_f});
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), out_f) = gy.colwise().sum();
      self.parents[2]->accumulate(std::move(gb));
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const int64_t d = x.shape().back();
  const int64_t rows = x.value().numel() / d;
  if (gamma.value().numel() != d || beta.value().numel() != d) throw ValidationError("layer_norm: affine size");
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = px + r * d;
    T mu = 0;
    for (int64_t i = 0; i < d; ++i) mu += p[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int64_t i = 0; i < d; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    for (int64_t i = 0; i < d; ++i) {
      const T xh = (p[i] - mu) * is;
      (*xhat)[r * d + i] = xh;
      out[r * d + i] = xh * gamma.value()[i] + beta.value()[i];
    }
  }
  return make_result<T>(std::move(out), {x.node(), gamma.node(), beta.node()}, [=](Node<T>& self) {
    auto& nx = *self.parents[0];
    auto& ng = *self.parents[1];
    auto& nb = *self.parents[2];
    Tensor<T> gx, gg, gbeta;
    if (nx.requires_grad) gx = Tensor<T>(nx.value.shape());
    if (ng.requires_grad) gg = Tensor<T>({d});
    if (nb.requires_grad) gbeta = Tensor<T>({d});
    const T* gy = self.grad.data();
    AlignedVector<T> gxh(static_cast<size_t>(d));
    for (int64_t r = 0; r < rows; ++r) {
      T s1 = 0, s2 = 0;
      for (int64_t i = 0; i < d; ++i) {
        const T g = gy[r * d + i];
        const T xh = (*xhat)[r * d + i];
        if (!gg.empty()) gg[i] += g * xh;
        if (!gbeta.empty()) gbeta[i] += g;
        gxh[static_cast<size_t>(i)] = g * ng.value[i];
        s1 += gxh[static_cast<size_t>(i)];
        s2 += gxh[static_cast<size_t>(i)] * xh;
      }
      if (gx.empty()) continue;
      const T is = (*inv_std)[static_cast<size_t>(r)];
      const auto n = static_cast<T>(d);
      for (int64_t i = 0; i < d; ++i) {
        gx[r * d + i] = is * (gxh[static_cast<size_t>(i)] - s1 / n - (*xhat)[r * d + i] * s2 / n);
      }
    }
    if (!gx.empty()) nx.accumulate(std::move(gx));
    if (!gg.empty()) ng.accumulate(std::move(gg));
    if (!gbeta.empty()) nb.accumulate(std::move(gbeta));
  });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_a, bool transpose_b) {
  require_rank(a.shape(), 3, "bmm lhs");
  require_rank(b.shape(), 3, "bmm rhs");
  const int64_t batch = a.dim(0);
  if (b.dim(0) != batch) throw ValidationError("bmm: batch mismatch");
  const int64_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bcn = b.dim(2);
  const int64_t m = transpose_a ? ac : ar;
  const int64_t k = transpose_a ? ar : ac;
  const int64_t kb = transpose_b ? bcn : br;
  const int64_t n = transpose_b ? br : bcn;
  if (k != kb) {
    throw ValidationError("bmm: inner dimensions differ for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> out({batch, m, n});
  for (int64_t i = 0; i < batch; ++i) {
    CMapRM<T> am(a.value().data() + i * ar * ac, ar, ac);
    CMapRM<T> bm(b.value().data() + i * br * bcn, br, bcn);
    MapRM<T> om(out.data() + i * m * n, m, n);
    if (!transpose_a && !transpose_b) om.noalias() = am * bm;
    else if (transpose_a && !transpose_b) om.noalias() = am.transpose() * bm;
    else if (!transpose_a && transpose_b) om.noalias() = am * bm.transpose();
    else om.noalias() = am.transpose() * bm.transpose();
  }
  return make_result<T>(std::move(out), {a.node(), b.node()}, [=](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    Tensor<T> ga, gb;
    if (na.requires_grad) ga = Tensor<T>(na.value.shape());
    if (nb.requires_grad) gb = Tensor<T>(nb.value.shape());
    for (int64_t i = 0; i < batch; ++i) {
      CMapRM<T> gy(self.grad.data() + i * m * n, m, n);
      CMapRM<T> am(na.value.data() + i * ar * ac, ar, ac);
      CMapRM<T> bm(nb.value.data() + i * br * bcn, br, bcn);
      if (!ga.empty()) {
        MapRM<T> gam(ga.data() + i * ar * ac, ar, ac);
        // d op(A) = G op(B)^T
        if (!transpose_a) {
          if (!transpose_b) gam.noalias() = gy * bm.transpose();
          else gam.noalias() = gy * bm;
        } else {
          if (!transpose_b) gam.noalias() = bm * gy.transpose();
          else gam.noalias() = bm.transpose() * gy.transpose();
        }
      }
      if (!gb.empty()) {
        MapRM<T> gbm(gb.data() + i * br * bcn, br, bcn);
        // d op(B) = op(A)^T G
        if (!transpose_b) {
          if (!transpose_a) gbm.noalias() = am.transpose() * gy;
          else gbm.noalias() = am * gy;
        } else {
          if (!transpose_a) gbm.noalias() = gy.transpose() * am;
          else gbm.noalias() = gy.transpose() * am.transpose();
        }
      }
    }
    if (!ga.empty()) na.accumulate(std::move(ga));
    if (!gb.empty()) nb.accumulate(std::move(gb));
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  axis = normalize_axis(axis, x.value().rank());
  const auto sp = split_at(x.shape(), axis);
  Tensor<T> out(x.shape());
  const T* px = x.value().data();
  using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
  if (sp.inner == 1) {
    for (int64_t o = 0; o < sp.outer; ++o) {
      Eigen::Map<const Row> in(px + o * sp.len, sp.len);
      Eigen::Map<Row> y(out.data() + o * sp.len, sp.len);
      y = (in - in.maxCoeff()).exp();
      y /= y.sum();
    }
  }
  for (int64_t o = 0; sp.inner != 1 && o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * sp.len * sp.inner + i;
      T mx = px[base];
      for (int64_t a = 1; a < sp.len; ++a) mx = std::max(mx, px[base + a * sp.inner]);
      T acc = 0;
      for (int64_t a = 0; a < sp.len; ++a) {
        const T e = std::exp(px[base + a * sp.inner] - mx);
        out[base + a * sp.inner] = e;
        acc += e;
      }
      const T inv = T(1) / acc;
      for (int64_t a = 0; a < sp.len; ++a) out[base + a * sp.inner] *= inv;
    }
  }
  return make_result<T>(std::move(out), {x.node()}, [sp](Node<T>& self) {
    auto& nx = *self.parents[0];
    Tensor<T> gx(nx.value.shape());
    const T* y = self.value.data();
    const T* g = self.grad.data();
    if (sp.inner == 1) {
      for (int64_t o = 0; o < sp.outer; ++o) {
        Eigen::Map<const Row> yr(y + o * sp.len, sp.len);
        Eigen::Map<const Row> gr(g + o * sp.len, sp.len);
        Eigen::Map<Row>(gx.data() + o * sp.len, sp.len) = yr * (gr - (gr * yr).sum());
      }
      nx.accumulate(std::move(gx));
      return;
    }
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        const int64_t base = o * sp.len * sp.inner + i;
        T dot = 0;
        for (int64_t a = 0; a < sp.len; ++a) dot += g[base + a * sp.inner] * y[base + a * sp.inner];
        for (int64_t a = 0; a < sp.len; ++a) {
          const int64_t idx = base + a * sp.inner;
          gx[idx] = y[idx] * (g[idx] - dot);
        }
      }
    }
    nx.accumulate(std::move(gx));
  });
}

template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int64_t out_h, int64_t out_w) {
  require_rank(x.shape(), 4, "resize_bilinear input");
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ty = std::make_shared<std::vector<BilinearTap>>(bilinear_taps(h, out_h));
  auto tx = std::make_shared<std::vector<BilinearTap>>(bilinear_taps(w, out_w));
  Tensor<T> out({x.dim(0), x.dim(1), out_h, out_w});
  const T* px = x.value().data();
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = px + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const auto& a = (*ty)[static_cast<size_t>(oy)];
      const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const auto& bx = (*tx)[static_cast<size_t>(ox)];
        const T wx1 = static_cast<T>(bx.w1), wx0 = T(1) - wx1;
        dst[oy * out_w + ox] = wy0 * (wx0 * src[a.i0 * w + bx.i0] + wx1 * src[a.i0 * w + bx.i1]) +
                               wy1 * (wx0 * src[a.i1 * w + bx.i0] + wx1 * src[a.i1 * w + bx.i1]);
      }
    }
  }
  return make_result<T>(std::move(out), {x.node()}, [=](Node<T>& self) {
    auto& nx = *self.parents[0];
    Tensor<T> gx(nx.value.shape());
    for (int64_t p = 0; p < planes; ++p) {
      const T* g = self.grad.data() + p * out_h * out_w;
      T* dst = gx.data() + p * h * w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const auto& a = (*ty)[static_cast<size_t>(oy)];
        const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const auto& bx = (*tx)[static_cast<size_t>(ox)];
          const T wx1 = static_cast<T>(bx.w1), wx0 = T(1) - wx1;
          const T gv = g[oy * out_w + ox];
          dst[a.i0 * w + bx.i0] += gv * wy0 * wx0;
          dst[a.i0 * w + bx.i1] += gv * wy0 * wx1;
          dst[a.i1 * w + bx.i0] += gv * wy1 * wx0;
          dst[a.i1 * w + bx.i1] += gv * wy1 * wx1;
        }
      }
    }
    nx.accumulate(std::move(gx));
  });
}

#define MIPCNET_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                       \
  template Var<T> scale(const Var<T>&, T);                                                                 \
  template Var<T> relu(const Var<T>&);                                                                     \
  template Var<T> sigmoid(const Var<T>&);                                                                  \
  template Var<T> gelu(const Var<T>&);                                                                     \
  template Var<T> sum(const Var<T>&);                                                                      \
  template Var<T> mean(const Var<T>&);                                                                     \
  template Var<T> mean_axis(const Var<T>&, int);                                                           \
  template Var<T> max_axis(const Var<T>&, int);                                                            \
  template Var<T> reshape(const Var<T>&, Shape);                                                           \
  template Var<T> permute(const Var<T>&, const std::vector<int>&);                                         \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                           \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>&, Tensor<T>&, bool, T, \
                             T);                                                                           \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                     \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                              \
  template Var<T> bmm(const Var<T>&, const Var<T>&, bool, bool);                                           \
  template Var<T> softmax(const Var<T>&, int);                                                             \
  template Var<T> resize_bilinear(const Var<T>&, int64_t, int64_t);

MIPCNET_INSTANTIATE_OPS(float)
MIPCNET_INSTANTIATE_OPS(double)

}  // namespace mipcnet::ag
