#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "qsr/autodiff/tensor.hpp"

namespace qsr::ad {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Low-side padding for a same-shape convolution with kernel extent k. Odd
// kernels pad symmetrically; even kernels put the extra tap on the high side.
constexpr std::ptrdiff_t pad_low(std::size_t k) { return static_cast<std::ptrdiff_t>((k - 1) / 2); }

// Unfolds planes [z0, z1) of one (C, D, H, W) sample into a
// (C k^3, (z1 - z0) H W) column matrix.
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t d, std::size_t h, std::size_t w, std::size_t k, std::size_t z0,
            std::size_t z1, T* col) {
  const std::ptrdiff_t pl = pad_low(k);
  const std::size_t s = d * h * w, cs = (z1 - z0) * h * w;
  const auto W = static_cast<std::ptrdiff_t>(w);
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw, ++row) {
          T* out = col + row * cs;
          const T* src = x + ci * s;
          const std::ptrdiff_t od = static_cast<std::ptrdiff_t>(kd) - pl;
          const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(kh) - pl;
          const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(kw) - pl;
          const std::ptrdiff_t w0 = std::max<std::ptrdiff_t>(0, -ow);
          const std::ptrdiff_t w1 = std::max(w0, std::min<std::ptrdiff_t>(W, W - ow));
          for (std::size_t zd = z0; zd < z1; ++zd) {
            const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(zd) + od;
            for (std::size_t zh = 0; zh < h; ++zh) {
              T* o = out + ((zd - z0) * h + zh) * w;
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(zh) + oh;
              if (id < 0 || id >= static_cast<std::ptrdiff_t>(d) || ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) {
                std::fill(o, o + w, T(0));
                continue;
              }
              const T* in = src + (static_cast<std::size_t>(id) * h + static_cast<std::size_t>(ih)) * w;
              std::fill(o, o + w0, T(0));
              std::copy(in + w0 + ow, in + w1 + ow, o + w0);
              std::fill(o + w1, o + w, T(0));
            }
          }
        }
}

// Adjoint of im2col: accumulates column gradients back onto the sample.
template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t d, std::size_t h, std::size_t w, std::size_t k,
                std::size_t z0, std::size_t z1, T* x) {
  const std::ptrdiff_t pl = pad_low(k);
  const std::size_t s = d * h * w, cs = (z1 - z0) * h * w;
  const auto W = static_cast<std::ptrdiff_t>(w);
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw, ++row) {
          const T* in = col + row * cs;
          T* dst = x + ci * s;
          const std::ptrdiff_t od = static_cast<std::ptrdiff_t>(kd) - pl;
          const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(kh) - pl;
          const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(kw) - pl;
          const std::ptrdiff_t w0 = std::max<std::ptrdiff_t>(0, -ow);
          const std::ptrdiff_t w1 = std::min<std::ptrdiff_t>(W, W - ow);
          for (std::size_t zd = z0; zd < z1; ++zd) {
            const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(zd) + od;
            if (id < 0 || id >= static_cast<std::ptrdiff_t>(d)) continue;
            for (std::size_t zh = 0; zh < h; ++zh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(zh) + oh;
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
              const T* g = in + ((zd - z0) * h + zh) * w;
              T* o = dst + (static_cast<std::size_t>(id) * h + static_cast<std::size_t>(ih)) * w;
              for (std::ptrdiff_t zw = w0; zw < w1; ++zw) o[zw + ow] += g[zw];
            }
          }
        }
}

// Planes per column block, sized so one block of the unfolded input stays
// cache resident.
constexpr std::size_t conv_slab(std::size_t kk, std::size_t plane) {
  const std::size_t target = 32768;  // floats
  const std::size_t per = kk * plane;
  return per >= target ? 1 : target / per;
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, DF df) {
  std::vector<T> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor<T>::from_op(x.shape(), std::move(out), op, {x.node()}, [df](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(px.value[i], self.value[i]);
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

// Same-shape 3D convolution, stride 1, on (N, Cin, D, H, W) with kernel
// (Cout, Cin, k, k, k) and optional bias (Cout). k = 2 pads one voxel on the
// high side of each axis, k = 3 pads one on both sides.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias = {}) {
  using namespace detail;
  require(x.rank() == 5, "conv3d: input must be (N,C,D,H,W), got " + shape_str(x.shape()));
  require(kernel.rank() == 5, "conv3d: kernel must be (Cout,Cin,k,k,k), got " + shape_str(kernel.shape()));
  const std::size_t n = x.dim(0), cin = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  require(kernel.dim(1) == cin, "conv3d: channel mismatch, input has " + std::to_string(cin) +
                                    " channels but kernel expects " + std::to_string(kernel.dim(1)));
  require(kernel.dim(3) == k && kernel.dim(4) == k, "conv3d: kernel must be cubic");
  require(k >= 1 && d >= k && h >= k && w >= k, "conv3d: spatial extent smaller than kernel");
  if (bias.defined()) require(bias.rank() == 1 && bias.dim(0) == cout, "conv3d: bias must be (Cout)");

  const std::size_t s = d * h * w, plane = h * w;
  const std::size_t kk = cin * k * k * k;
  const std::size_t slab = std::min(d, conv_slab(kk, plane));
  using Strided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  using CStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  std::vector<T> out(n * cout * s);
  {
    CMapMat<T> wm(kernel.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kk));
    std::vector<T> col(k == 1 ? 0 : kk * slab * plane);
    for (std::size_t i = 0; i < n; ++i) {
      const T* xi = x.data().data() + i * cin * s;
      T* oi = out.data() + i * cout * s;
      if (k == 1) {
        CMapMat<T> cm(xi, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(s));
        MapMat<T> om(oi, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(s));
        om.noalias() = wm * cm;
      } else {
        for (std::size_t z0 = 0; z0 < d; z0 += slab) {
          const std::size_t z1 = std::min(d, z0 + slab), cs = (z1 - z0) * plane;
          im2col(xi, cin, d, h, w, k, z0, z1, col.data());
          CMapMat<T> cm(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(cs));
          Strided om(oi + z0 * plane, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cs),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(s)));
          om.noalias() = wm * cm;
        }
      }
      if (bias.defined())
        for (std::size_t c = 0; c < cout; ++c) {
          T* r = oi + c * s;
          const T b = bias.data()[c];
          for (std::size_t v = 0; v < s; ++v) r[v] += b;
        }
    }
  }
  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), kernel.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return Tensor<T>::from_op(
      {n, cout, d, h, w}, std::move(out), "conv3d", std::move(parents),
      [n, cin, d, h, w, cout, k, s, kk, plane, slab](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        Node<T>* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        CMapMat<T> wm(pk.value.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kk));
        T* dk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        T* db = (pb && pb->requires_grad) ? pb->grad_buffer().data() : nullptr;
        T* dx = px.requires_grad ? px.grad_buffer().data() : nullptr;
        std::vector<T> col(k == 1 || !dk ? 0 : kk * slab * plane);
        std::vector<T> dcol(k == 1 || !dx ? 0 : kk * slab * plane);
        for (std::size_t i = 0; i < n; ++i) {
          const T* gi = self.grad.data() + i * cout * s;
          const T* xi = px.value.data() + i * cin * s;
          if (db)
            for (std::size_t c = 0; c < cout; ++c) {
              const T* r = gi + c * s;
              T acc = 0;
              for (std::size_t v = 0; v < s; ++v) acc += r[v];
              db[c] += acc;
            }
          if (k == 1) {
            CMapMat<T> gy(gi, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(s));
            if (dk) {
              CMapMat<T> cm(xi, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(s));
              MapMat<T> gk(dk, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kk));
              gk.noalias() += gy * cm.transpose();
            }
            if (dx) {
              MapMat<T> gx(dx + i * cin * s, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(s));
              gx.noalias() += wm.transpose() * gy;
            }
            continue;
          }
          for (std::size_t z0 = 0; z0 < d; z0 += slab) {
            const std::size_t z1 = std::min(d, z0 + slab), cs = (z1 - z0) * plane;
            CStrided gy(gi + z0 * plane, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cs),
                        Eigen::OuterStride<>(static_cast<Eigen::Index>(s)));
            if (dk) {
              im2col(xi, cin, d, h, w, k, z0, z1, col.data());
              CMapMat<T> cm(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(cs));
              MapMat<T> gk(dk, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kk));
              gk.noalias() += gy * cm.transpose();
            }
            if (dx) {
              MapMat<T> gc(dcol.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(cs));
              gc.noalias() = wm.transpose() * gy;
              col2im_add(dcol.data(), cin, d, h, w, k, z0, z1, dx + i * cin * s);
            }
          }
        }
      });
}

// 1D convolution along the folded q-axis. Input (N q, C, D, H, W) with the
// q-samples of each item contiguous; kernel (Cout, C, k), odd k, zero padded
// at sequence ends; bias (Cout).
template <typename T>
Tensor<T> qconv1d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t q) {
  using namespace detail;
  require(x.rank() == 5, "qconv1d: input must be (Nq,C,D,H,W)");
  require(q > 0 && x.dim(0) % q == 0, "qconv1d: batch extent not divisible by q");
  require(kernel.rank() == 3 && kernel.dim(1) == x.dim(1), "qconv1d: kernel must be (Cout,C,k)");
  const std::size_t k = kernel.dim(2);
  require(k % 2 == 1, "qconv1d: kernel extent must be odd");
  const std::size_t groups = x.dim(0) / q, cin = x.dim(1), cout = kernel.dim(0);
  const std::size_t s = x.dim(2) * x.dim(3) * x.dim(4);
  require(bias.rank() == 1 && bias.dim(0) == cout, "qconv1d: bias must be (Cout)");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<T> out(groups * q * cout * s);
  const auto& xv = x.data();
  const auto& kv = kernel.data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t t = 0; t < q; ++t) {
      T* o = out.data() + (g * q + t) * cout * s;
      for (std::size_t co = 0; co < cout; ++co) std::fill(o + co * s, o + (co + 1) * s, bias.data()[co]);
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(q)) continue;
        const T* xi = xv.data() + (g * q + static_cast<std::size_t>(src)) * cin * s;
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T wv = kv[(co * cin + ci) * k + j];
            const T* a = xi + ci * s;
            T* b = o + co * s;
            for (std::size_t v = 0; v < s; ++v) b[v] += wv * a[v];
          }
      }
    }
  return Tensor<T>::from_op(
      Shape{x.dim(0), cout, x.dim(2), x.dim(3), x.dim(4)}, std::move(out), "qconv1d",
      {x.node(), kernel.node(), bias.node()}, [groups, q, cin, cout, s, k, half](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pb = *self.parents[2];
        T* dx = px.requires_grad ? px.grad_buffer().data() : nullptr;
        T* dk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        T* db = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t t = 0; t < q; ++t) {
            const T* go = self.grad.data() + (g * q + t) * cout * s;
            if (db)
              for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t v = 0; v < s; ++v) db[co] += go[co * s + v];
            for (std::size_t j = 0; j < k; ++j) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - half;
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(q)) continue;
              const std::size_t base = (g * q + static_cast<std::size_t>(src)) * cin * s;
              for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const std::size_t widx = (co * cin + ci) * k + j;
                  const T* gb = go + co * s;
                  if (dk) {
                    const T* a = px.value.data() + base + ci * s;
                    T acc = 0;
                    for (std::size_t v = 0; v < s; ++v) acc += gb[v] * a[v];
                    dk[widx] += acc;
                  }
                  if (dx) {
                    const T wv = pk.value[widx];
                    T* a = dx + base + ci * s;
                    for (std::size_t v = 0; v < s; ++v) a[v] += wv * gb[v];
                  }
                }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node<T>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& n = *self.parents[p];
      if (!n.requires_grad) continue;
      auto& g = n.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node<T>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& n = *self.parents[p];
      if (!n.requires_grad) continue;
      auto& g = n.grad_buffer();
      const T sign = p == 0 ? T(1) : T(-1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    if (na.requires_grad) {
      auto& g = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return detail::sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// x * sigmoid(x)
template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
  return detail::unary(
      x, "swish", [](T v) { return v * detail::sigmoid_scalar(v); },
      [](T v, T) {
        const T s = detail::sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

// Subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Normalization

// Per (sample, channel) normalization over the spatial axes, then a
// per-channel affine map.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-3)) {
  using namespace detail;
  require(x.rank() >= 3, "instance_norm: expected (N,C,spatial...)");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.numel() / (n * c);
  require(s >= 2, "instance_norm: spatial volume must be >= 2 voxels");
  require(gain.numel() == c && bias.numel() == c, "instance_norm: gain/bias must have C entries");
  std::vector<T> mean(n * c), inv_std(n * c), out(x.numel());
  const auto& xv = x.data();
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const T* a = xv.data() + nc * s;
    T m = 0;
    for (std::size_t v = 0; v < s; ++v) m += a[v];
    m /= static_cast<T>(s);
    T var = 0;
    for (std::size_t v = 0; v < s; ++v) var += (a[v] - m) * (a[v] - m);
    var /= static_cast<T>(s);
    mean[nc] = m;
    inv_std[nc] = T(1) / std::sqrt(var + eps);
    const T gn = gain.data()[nc % c], bs = bias.data()[nc % c];
    T* o = out.data() + nc * s;
    for (std::size_t v = 0; v < s; ++v) o[v] = gn * (a[v] - m) * inv_std[nc] + bs;
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), "instance_norm", {x.node(), gain.node(), bias.node()},
      [n, c, s, mean = std::move(mean), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        T* dx = px.requires_grad ? px.grad_buffer().data() : nullptr;
        T* dg = pg.requires_grad ? pg.grad_buffer().data() : nullptr;
        T* db = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
        for (std::size_t nc = 0; nc < n * c; ++nc) {
          const T* a = px.value.data() + nc * s;
          const T* gy = self.grad.data() + nc * s;
          const T gn = pg.value[nc % c];
          T sum_g = 0, sum_gx = 0;
          for (std::size_t v = 0; v < s; ++v) {
            const T xhat = (a[v] - mean[nc]) * inv_std[nc];
            sum_g += gy[v];
            sum_gx += gy[v] * xhat;
          }
          if (dg) dg[nc % c] += sum_gx;
          if (db) db[nc % c] += sum_g;
          if (dx) {
            const T scale = gn * inv_std[nc] / static_cast<T>(s);
            T* o = dx + nc * s;
            for (std::size_t v = 0; v < s; ++v) {
              const T xhat = (a[v] - mean[nc]) * inv_std[nc];
              o[v] += scale * (static_cast<T>(s) * gy[v] - sum_g - xhat * sum_gx);
            }
          }
        }
      });
}

template <typename T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;
  bool initialized = false;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels) : mean(channels, T(0)), var(channels, T(1)) {}
};

enum class NormMode { train, infer };

// Per-channel normalization over (N, spatial). Train mode uses batch
// statistics and folds them into the running estimates:
// running = (1 - momentum) * running + momentum * batch.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, BatchNormStats<T>& stats,
                     NormMode mode, T momentum = T(0.1), T eps = T(1e-3)) {
  using namespace detail;
  require(x.rank() >= 2, "batch_norm: expected (N,C,...)");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.numel() / (n * c);
  require(gain.numel() == c && bias.numel() == c, "batch_norm: gain/bias must have C entries");
  if (stats.mean.size() != c) {
    if (stats.initialized) throw ShapeError("batch_norm: running statistics sized for a different channel count");
    stats = BatchNormStats<T>(c);
  }
  const auto& xv = x.data();
  std::vector<T> mean(c), inv_std(c), out(x.numel());
  if (mode == NormMode::train) {
    require(n * s >= 2, "batch_norm: training needs at least 2 values per channel");
    const T count = static_cast<T>(n * s);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T m = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* a = xv.data() + (i * c + ch) * s;
        for (std::size_t v = 0; v < s; ++v) m += a[v];
      }
      m /= count;
      T var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* a = xv.data() + (i * c + ch) * s;
        for (std::size_t v = 0; v < s; ++v) var += (a[v] - m) * (a[v] - m);
      }
      var /= count;
      mean[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      stats.mean[ch] = (T(1) - momentum) * stats.mean[ch] + momentum * m;
      stats.var[ch] = (T(1) - momentum) * stats.var[ch] + momentum * var;
    }
    stats.initialized = true;
  } else {
    if (!stats.initialized) throw StateError("batch_norm: inference requested before running statistics exist");
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.var[ch] + eps);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* a = xv.data() + (i * c + ch) * s;
      T* o = out.data() + (i * c + ch) * s;
      const T gn = gain.data()[ch] * inv_std[ch], bs = bias.data()[ch];
      for (std::size_t v = 0; v < s; ++v) o[v] = gn * (a[v] - mean[ch]) + bs;
    }
  const bool batch_stats = mode == NormMode::train;
  return Tensor<T>::from_op(
      x.shape(), std::move(out), "batch_norm", {x.node(), gain.node(), bias.node()},
      [n, c, s, batch_stats, mean = std::move(mean), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        T* dx = px.requires_grad ? px.grad_buffer().data() : nullptr;
        T* dg = pg.requires_grad ? pg.grad_buffer().data() : nullptr;
        T* db = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
        const T count = static_cast<T>(n * s);
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_g = 0, sum_gx = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const T* a = px.value.data() + (i * c + ch) * s;
            const T* gy = self.grad.data() + (i * c + ch) * s;
            for (std::size_t v = 0; v < s; ++v) {
              sum_g += gy[v];
              sum_gx += gy[v] * (a[v] - mean[ch]) * inv_std[ch];
            }
          }
          if (dg) dg[ch] += sum_gx;
          if (db) db[ch] += sum_g;
          if (!dx) continue;
          const T gn = pg.value[ch] * inv_std[ch];
          for (std::size_t i = 0; i < n; ++i) {
            const T* a = px.value.data() + (i * c + ch) * s;
            const T* gy = self.grad.data() + (i * c + ch) * s;
            T* o = dx + (i * c + ch) * s;
            if (batch_stats) {
              for (std::size_t v = 0; v < s; ++v) {
                const T xhat = (a[v] - mean[ch]) * inv_std[ch];
                o[v] += gn / count * (count * gy[v] - sum_g - xhat * sum_gx);
              }
            } else {
              for (std::size_t v = 0; v < s; ++v) o[v] += gn * gy[v];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.numel(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out = x.data();
  return Tensor<T>::from_op(std::move(shape), std::move(out), "reshape", {x.node()}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  detail::require(axis < ref.size(), "concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t a = 0; a < ref.size(); ++a)
      if (a != axis)
        detail::require(p.dim(a) == ref[a], "concat: shapes " + shape_str(ref) + " and " + shape_str(p.shape()) +
                                                " disagree off the concat axis");
    total += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= ref[a];
  for (std::size_t a = axis + 1; a < ref.size(); ++a) inner *= ref[a];
  Shape shape = ref;
  shape[axis] = total;
  std::vector<T> out(numel(shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * block, block, out.data() + o * total * inner + offset);
    widths.push_back(block);
    offset += block;
  }
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  return Tensor<T>::from_op(std::move(shape), std::move(out), "concat", std::move(parents),
                            [outer, row = total * inner, widths = std::move(widths)](Node<T>& self) {
                              std::size_t off = 0;
                              for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                                auto& n = *self.parents[pi];
                                if (n.requires_grad) {
                                  auto& g = n.grad_buffer();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t v = 0; v < widths[pi]; ++v)
                                      g[o * widths[pi] + v] += self.grad[o * row + off + v];
                                }
                                off += widths[pi];
                              }
                            });
}

// Contiguous range [start, start + length) along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::require(axis < x.rank() && start + length <= x.dim(axis), "slice: range out of bounds");
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  Shape shape = x.shape();
  shape[axis] = length;
  const std::size_t row = x.dim(axis) * inner, block = length * inner, off = start * inner;
  std::vector<T> out(outer * block);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data().data() + o * row + off, block, out.data() + o * block);
  return Tensor<T>::from_op(std::move(shape), std::move(out), "slice", {x.node()},
                            [outer, row, block, off](Node<T>& self) {
                              auto& g = self.parents[0]->grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t v = 0; v < block; ++v) g[o * row + off + v] += self.grad[o * block + v];
                            });
}

// Rows of the leading axis, in the given order (repeats allowed).
template <typename T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  detail::require(x.rank() >= 1, "gather: scalar input");
  const std::size_t inner = x.numel() / x.dim(0);
  for (auto r : rows) detail::require(r < x.dim(0), "gather: row index out of range");
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<T> out(rows.size() * inner);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().data() + rows[i] * inner, inner, out.data() + i * inner);
  return Tensor<T>::from_op(std::move(shape), std::move(out), "gather", {x.node()}, [rows, inner](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t v = 0; v < inner; ++v) g[rows[i] * inner + v] += self.grad[i * inner + v];
  });
}

// (N, C) -> (N, C, D, H, W) with every voxel holding the row.
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& v, std::size_t d, std::size_t h, std::size_t w) {
  detail::require(v.rank() == 2, "broadcast_spatial: expected (N,C), got " + shape_str(v.shape()));
  const std::size_t n = v.dim(0), c = v.dim(1), s = d * h * w;
  std::vector<T> out(n * c * s);
  for (std::size_t i = 0; i < n * c; ++i) std::fill_n(out.data() + i * s, s, v.data()[i]);
  return Tensor<T>::from_op({n, c, d, h, w}, std::move(out), "broadcast_spatial", {v.node()}, [n, c, s](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n * c; ++i) {
      T acc = 0;
      for (std::size_t k = 0; k < s; ++k) acc += self.grad[i * s + k];
      g[i] += acc;
    }
  });
}

// Mean over consecutive groups of the leading axis: (N g, ...) -> (N, ...).
template <typename T>
Tensor<T> mean_groups(const Tensor<T>& x, std::size_t group) {
  detail::require(group > 0 && x.dim(0) % group == 0, "mean_groups: leading extent not divisible by group");
  const std::size_t n = x.dim(0) / group, inner = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = n;
  std::vector<T> out(n * inner, T(0));
  const T scale = T(1) / static_cast<T>(group);
  for (std::size_t i = 0; i < n; ++i) {
    T* o = out.data() + i * inner;
    for (std::size_t t = 0; t < group; ++t) {
      const T* a = x.data().data() + (i * group + t) * inner;
      for (std::size_t v = 0; v < inner; ++v) o[v] += a[v];
    }
    for (std::size_t v = 0; v < inner; ++v) o[v] *= scale;
  }
  return Tensor<T>::from_op(std::move(shape), std::move(out), "mean_groups", {x.node()},
                            [n, group, inner, scale](Node<T>& self) {
                              auto& g = self.parents[0]->grad_buffer();
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t t = 0; t < group; ++t)
                                  for (std::size_t v = 0; v < inner; ++v)
                                    g[(i * group + t) * inner + v] += scale * self.grad[i * inner + v];
                            });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return Tensor<T>::from_op({}, {acc}, "sum", {x.node()}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  const T scale = T(1) / static_cast<T>(x.numel());
  return Tensor<T>::from_op({}, {acc * scale}, "mean", {x.node()}, [scale](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0] * scale;
  });
}

// Mean absolute error; the subgradient at a tie is 0.
template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred, target, "mae_loss");
  T acc = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) acc += std::abs(pred.data()[i] - target.data()[i]);
  const T scale = T(1) / static_cast<T>(pred.numel());
  return Tensor<T>::from_op({}, {acc * scale}, "mae_loss", {pred.node(), target.node()}, [scale](Node<T>& self) {
    auto& pp = *self.parents[0];
    auto& pt = *self.parents[1];
    const T g0 = self.grad[0] * scale;
    for (int which = 0; which < 2; ++which) {
      auto& n = which == 0 ? pp : pt;
      if (!n.requires_grad) continue;
      auto& g = n.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T diff = pp.value[i] - pt.value[i];
        const T sgn = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
        g[i] += (which == 0 ? g0 : -g0) * sgn;
      }
    }
  });
}

}  // namespace qsr::ad
