#include "learngene/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace lg {

using detail::make_result;
using detail::Node;

namespace {

// Gradient buffer of input `i`, or nullptr when that input is constant.
float* grad_of(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? in.grad.data() : nullptr;
}

void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (float* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (float* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = self.inputs[0]->data;
    const auto& y = self.inputs[1]->data;
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (float* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor;
  return make_result("scale", x.shape(), std::move(out), {x}, [factor](Node& self) {
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor square(const Tensor& x) {
  std::vector<float> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * v[i];
  return make_result("square", x.shape(), std::move(out), {x}, [](Node& self) {
    const auto& v = self.inputs[0]->data;
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += 2.0f * v[i] * self.grad[i];
    }
  });
}

Tensor add_broadcast(const Tensor& x, const Tensor& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  require(bs.size() <= xs.size() && std::equal(bs.rbegin(), bs.rend(), xs.rbegin()),
          "add_broadcast: " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
  const std::size_t inner = b.numel();
  const std::size_t outer = x.numel() / inner;
  std::vector<float> out(x.numel());
  auto xv = x.data(), bv = b.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xv[o * inner + i] + bv[i];
  return make_result("add_broadcast", xs, std::move(out), {x, b}, [outer, inner](Node& self) {
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (float* g = grad_of(self, 1)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[o * inner + i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_result("sum", {}, {static_cast<float>(acc)}, {x}, [](Node& self) {
    if (float* g = grad_of(self, 0)) {
      const float up = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) g[i] += up;
    }
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean: empty tensor");
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  return make_result("mean", {}, {static_cast<float>(acc / n)}, {x}, [n](Node& self) {
    if (float* g = grad_of(self, 0)) {
      const float up = static_cast<float>(self.grad[0] / n);
      for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) g[i] += up;
    }
  });
}

Tensor row_mean(const Tensor& x) {
  require(x.rank() >= 1 && x.numel() > 0, "row_mean: need a non-empty tensor with a batch axis");
  const std::size_t rows = x.dim(0);
  const std::size_t cols = x.numel() / rows;
  std::vector<float> out(rows);
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += v[r * cols + c];
    out[r] = static_cast<float>(acc / static_cast<double>(cols));
  }
  return make_result("row_mean", {rows}, std::move(out), {x}, [rows, cols](Node& self) {
    if (float* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const float up = self.grad[r] / static_cast<float>(cols);
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += up;
      }
    }
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "mean_axis: axis out of range");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  require(n > 0, "mean_axis: empty axis");
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  std::vector<double> acc(outer * inner, 0.0);
  auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) acc[o * inner + i] += v[(o * n + k) * inner + i];
  std::vector<float> out(outer * inner);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(n));
  return make_result("mean_axis", std::move(out_shape), std::move(out), {x}, [outer, inner, n](Node& self) {
    if (float* g = grad_of(self, 0)) {
      const float inv = 1.0f / static_cast<float>(n);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < inner; ++i) g[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
    }
  });
}

namespace {

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T
void gemm_nt(const float* g, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float* brow = b + p * n;
      float acc = 0.0f;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * g[m,n]
void gemm_tn(const float* a, const float* g, float* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      float* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n, 0.0f);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const float* av = self.inputs[0]->data.data();
    const float* bv = self.inputs[1]->data.data();
    if (float* g = grad_of(self, 0)) gemm_nt(self.grad.data(), bv, g, m, k, n);
    if (float* g = grad_of(self, 1)) gemm_tn(av, self.grad.data(), g, m, k, n);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<float> out(batch * m * n, 0.0f);
  for (std::size_t t = 0; t < batch; ++t)
    gemm_nn(a.data().data() + t * m * k, b.data().data() + t * k * n, out.data() + t * m * n, m, k, n);
  return make_result("bmm", {batch, m, n}, std::move(out), {a, b}, [batch, m, k, n](Node& self) {
    const float* av = self.inputs[0]->data.data();
    const float* bv = self.inputs[1]->data.data();
    float* ga = grad_of(self, 0);
    float* gb = grad_of(self, 1);
    for (std::size_t t = 0; t < batch; ++t) {
      const float* gt = self.grad.data() + t * m * n;
      if (ga) gemm_nt(gt, bv + t * k * n, ga + t * m * k, m, k, n);
      if (gb) gemm_tn(av + t * m * k, gt, gb + t * k * n, m, k, n);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(weight.rank() == 2 && x.rank() >= 1 && x.shape().back() == weight.dim(1),
          "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
  const std::size_t in = weight.dim(1), outd = weight.dim(0);
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == outd), "linear: bias shape mismatch");
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  std::vector<float> out(rows * outd, 0.0f);
  // out = x * W^T, W row-major [out, in]
  gemm_nt(x.data().data(), weight.data().data(), out.data(), rows, outd, in);
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < outd; ++j) out[r * outd + j] += bv[j];
  }
  std::vector<Tensor> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result("linear", std::move(out_shape), std::move(out), std::move(inputs),
                     [rows, in, outd, has_bias](Node& self) {
                       const float* xv = self.inputs[0]->data.data();
                       const float* wv = self.inputs[1]->data.data();
                       const float* g = self.grad.data();
                       if (float* gx = grad_of(self, 0)) gemm_nn(g, wv, gx, rows, outd, in);
                       if (float* gw = grad_of(self, 1)) gemm_tn(g, xv, gw, rows, outd, in);
                       if (has_bias) {
                         if (float* gb = grad_of(self, 2)) {
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
                         }
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

namespace {

// Flat source index for every destination index of a permutation.
std::vector<std::size_t> permutation_index(const Shape& src, const std::vector<std::size_t>& order) {
  const std::size_t rank = src.size();
  std::vector<std::size_t> src_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) src_stride[i - 1] = src_stride[i] * src[i];
  Shape dst(rank);
  for (std::size_t i = 0; i < rank; ++i) dst[i] = src[order[i]];
  const std::size_t n = shape_numel(src);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < rank; ++i) s += idx[i] * src_stride[order[i]];
    map[flat] = s;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < dst[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  require(order.size() == x.rank(), "permute: order rank mismatch");
  std::vector<bool> seen(order.size(), false);
  for (auto o : order) {
    require(o < order.size() && !seen[o], "permute: invalid axis order");
    seen[o] = true;
  }
  Shape dst(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) dst[i] = x.dim(order[i]);
  auto map = permutation_index(x.shape(), order);
  std::vector<float> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[map[i]];
  return make_result("permute", std::move(dst), std::move(out), {x}, [map = std::move(map)](Node& self) {
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[map[i]] += self.grad[i];
    }
  });
}

Tensor softmax(const Tensor& x) {
  require(x.rank() >= 1 && x.numel() > 0, "softmax: empty tensor");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  std::vector<float> out(x.numel());
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = v.data() + r * cols;
    float* o = out.data() + r * cols;
    const float mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] = static_cast<float>(o[c] / total);
  }
  auto saved = out;
  return make_result("softmax", x.shape(), std::move(out), {x},
                     [rows, cols, y = std::move(saved)](Node& self) {
                       if (float* g = grad_of(self, 0)) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           const float* yr = y.data() + r * cols;
                           const float* gr = self.grad.data() + r * cols;
                           double dot = 0.0;
                           for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
                           for (std::size_t c = 0; c < cols; ++c)
                             g[r * cols + c] += yr[c] * (gr[c] - static_cast<float>(dot));
                         }
                       }
                     });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0f ? v[i] : 0.0f;
  return make_result("relu", x.shape(), std::move(out), {x}, [](Node& self) {
    const auto& v = self.inputs[0]->data;
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (v[i] > 0.0f) g[i] += self.grad[i];
    }
  });
}

Tensor relu6(const Tensor& x) {
  std::vector<float> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(v[i], 0.0f), 6.0f);
  return make_result("relu6", x.shape(), std::move(out), {x}, [](Node& self) {
    const auto& v = self.inputs[0]->data;
    if (float* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (v[i] > 0.0f && v[i] < 6.0f) g[i] += self.grad[i];
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require(x.rank() >= 1, "layer_norm: rank-0 input");
  const std::size_t d = x.shape().back();
  require(gamma.shape() == Shape{d} && beta.shape() == Shape{d}, "layer_norm: affine shape mismatch");
  const std::size_t rows = x.numel() / d;
  std::vector<float> out(x.numel()), xhat(x.numel()), inv_std(rows);
  auto v = x.data();
  auto gv = gamma.data(), bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = v.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const float h = static_cast<float>(in[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const auto& gv = self.inputs[1]->data;
                       float* gx = grad_of(self, 0);
                       float* gg = grad_of(self, 1);
                       float* gb = grad_of(self, 2);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const float* up = self.grad.data() + r * d;
                         const float* h = xhat.data() + r * d;
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dh = static_cast<double>(up[j]) * gv[j];
                           s1 += dh;
                           s2 += dh * h[j];
                           if (gg) gg[j] += up[j] * h[j];
                           if (gb) gb[j] += up[j];
                         }
                         if (gx) {
                           const double n = static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dh = static_cast<double>(up[j]) * gv[j];
                             gx[r * d + j] += static_cast<float>(inv_std[r] * (dh - s1 / n - h[j] * s2 / n));
                           }
                         }
                       }
                     });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, float momentum, float eps) {
  require(x.rank() == 2 || x.rank() == 4, "batch_norm: expected [B,C] or [B,C,H,W]");
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const Shape cshape{channels};
  require(gamma.shape() == cshape && beta.shape() == cshape && running_mean.shape() == cshape &&
              running_var.shape() == cshape,
          "batch_norm: per-channel parameter shape mismatch");
  const double count = static_cast<double>(batch * spatial);
  auto v = x.data();
  std::vector<float> mu(channels), inv_std(channels);
  if (training) {
    require(batch * spatial > 1, "batch_norm: training needs more than one value per channel");
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < spatial; ++p) s += v[(b * channels + c) * spatial + p];
      const double m = s / count;
      double q = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < spatial; ++p) {
          const double dlt = v[(b * channels + c) * spatial + p] - m;
          q += dlt * dlt;
        }
      const double var = q / count;
      mu[c] = static_cast<float>(m);
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + eps));
      const double unbiased = q / std::max(1.0, count - 1.0);
      rm[c] = static_cast<float>(momentum * rm[c] + (1.0 - momentum) * m);
      rv[c] = static_cast<float>(momentum * rv[c] + (1.0 - momentum) * unbiased);
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = rm[c];
      inv_std[c] = 1.0f / std::sqrt(rv[c] + eps);
    }
  }
  auto gv = gamma.data(), bv = beta.data();
  std::vector<float> out(x.numel()), xhat(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < spatial; ++p) {
        const std::size_t i = (b * channels + c) * spatial + p;
        xhat[i] = (v[i] - mu[c]) * inv_std[c];
        out[i] = xhat[i] * gv[c] + bv[c];
      }
  return make_result(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [batch, channels, spatial, count, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gv = self.inputs[1]->data;
        float* gx = grad_of(self, 0);
        float* gg = grad_of(self, 1);
        float* gb = grad_of(self, 2);
        for (std::size_t c = 0; c < channels; ++c) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < spatial; ++p) {
              const std::size_t i = (b * channels + c) * spatial + p;
              s1 += self.grad[i];
              s2 += static_cast<double>(self.grad[i]) * xhat[i];
            }
          if (gg) gg[c] += static_cast<float>(s2);
          if (gb) gb[c] += static_cast<float>(s1);
          if (!gx) continue;
          const double scale_c = static_cast<double>(gv[c]) * inv_std[c];
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < spatial; ++p) {
              const std::size_t i = (b * channels + c) * spatial + p;
              if (training) {
                gx[i] += static_cast<float>(scale_c * (self.grad[i] - s1 / count - xhat[i] * s2 / count));
              } else {
                gx[i] += static_cast<float>(scale_c * self.grad[i]);
              }
            }
        }
      });
}

namespace {

struct ConvDims {
  std::size_t batch, in_ch, height, width, out_ch, kernel, pad;
};

// Accumulates one (kernel offset) shifted copy; the valid output range keeps
// the input index inside [0, extent).
inline void shifted_range(std::size_t extent, std::size_t k, std::size_t pad, std::size_t& lo, std::size_t& hi) {
  // input = out + k - pad must lie in [0, extent)
  lo = k < pad ? pad - k : 0;
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(extent) + static_cast<std::ptrdiff_t>(pad) -
                             static_cast<std::ptrdiff_t>(k);
  hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(top, 0, static_cast<std::ptrdiff_t>(extent)));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t pad) {
  require(x.rank() == 4 && weight.rank() == 4 && weight.dim(1) == x.dim(1) && weight.dim(2) == weight.dim(3),
          "conv2d: incompatible input " + shape_str(x.shape()) + " and weight " + shape_str(weight.shape()));
  const ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), pad};
  require(2 * pad + 1 == d.kernel, "conv2d: only same-size (pad = (k-1)/2) convolutions are supported");
  require(!bias.defined() || bias.shape() == Shape{d.out_ch}, "conv2d: bias shape mismatch");
  const std::size_t hw = d.height * d.width;
  std::vector<float> out(d.batch * d.out_ch * hw, 0.0f);
  const float* xv = x.data().data();
  const float* wv = weight.data().data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t o = 0; o < d.out_ch; ++o) {
      float* op = out.data() + (b * d.out_ch + o) * hw;
      if (bias.defined()) std::fill(op, op + hw, bias.data()[o]);
      for (std::size_t c = 0; c < d.in_ch; ++c) {
        const float* ip = xv + (b * d.in_ch + c) * hw;
        for (std::size_t ky = 0; ky < d.kernel; ++ky) {
          std::size_t y0, y1;
          shifted_range(d.height, ky, pad, y0, y1);
          for (std::size_t kx = 0; kx < d.kernel; ++kx) {
            std::size_t x0, x1;
            shifted_range(d.width, kx, pad, x0, x1);
            const float w = wv[((o * d.in_ch + c) * d.kernel + ky) * d.kernel + kx];
            for (std::size_t yy = y0; yy < y1; ++yy) {
              const float* irow = ip + (yy + ky - pad) * d.width;
              float* orow = op + yy * d.width;
              for (std::size_t xx = x0; xx < x1; ++xx) orow[xx] += w * irow[xx + kx - pad];
            }
          }
        }
      }
    }
  std::vector<Tensor> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_result("conv2d", {d.batch, d.out_ch, d.height, d.width}, std::move(out), std::move(inputs),
                     [d, hw, has_bias](Node& self) {
                       const float* xv = self.inputs[0]->data.data();
                       const float* wv = self.inputs[1]->data.data();
                       float* gx = grad_of(self, 0);
                       float* gw = grad_of(self, 1);
                       float* gb = has_bias ? grad_of(self, 2) : nullptr;
                       for (std::size_t b = 0; b < d.batch; ++b)
                         for (std::size_t o = 0; o < d.out_ch; ++o) {
                           const float* gp = self.grad.data() + (b * d.out_ch + o) * hw;
                           if (gb) {
                             double s = 0.0;
                             for (std::size_t i = 0; i < hw; ++i) s += gp[i];
                             gb[o] += static_cast<float>(s);
                           }
                           for (std::size_t c = 0; c < d.in_ch; ++c) {
                             const std::size_t in_off = (b * d.in_ch + c) * hw;
                             for (std::size_t ky = 0; ky < d.kernel; ++ky) {
                               std::size_t y0, y1;
                               shifted_range(d.height, ky, d.pad, y0, y1);
                               for (std::size_t kx = 0; kx < d.kernel; ++kx) {
                                 std::size_t x0, x1;
                                 shifted_range(d.width, kx, d.pad, x0, x1);
                                 const std::size_t widx = ((o * d.in_ch + c) * d.kernel + ky) * d.kernel + kx;
                                 const float w = wv[widx];
                                 float acc = 0.0f;
                                 for (std::size_t yy = y0; yy < y1; ++yy) {
                                   const std::size_t row = in_off + (yy + ky - d.pad) * d.width;
                                   const float* grow = gp + yy * d.width;
                                   if (gx) {
                                     float* gxr = gx + row;
                                     for (std::size_t xx = x0; xx < x1; ++xx) gxr[xx + kx - d.pad] += w * grow[xx];
                                   }
                                   if (gw) {
                                     const float* xr = xv + row;
                                     for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * xr[xx + kx - d.pad];
                                   }
                                 }
                                 if (gw) gw[widx] += acc;
                               }
                             }
                           }
                         }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2, "cross_entropy: logits must be [B,C]");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  require(classes >= 2, "cross_entropy: need at least two classes");
  require(batch > 0 && labels.size() == batch, "cross_entropy: label count mismatch");
  std::vector<int> y(labels.begin(), labels.end());
  for (int label : y) {
    require(label >= 0 && static_cast<std::size_t>(label) < classes,
            "cross_entropy: label " + std::to_string(label) + " out of range");
  }
  auto v = logits.data();
  std::vector<float> probs(batch * classes);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const float* row = v.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[y[b]];
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = static_cast<float>(std::exp(row[c] - lse));
  }
  const float loss = static_cast<float>(total / static_cast<double>(batch));
  return make_result("cross_entropy", {}, {loss}, {logits},
                     [batch, classes, y = std::move(y), probs = std::move(probs)](Node& self) {
                       if (float* g = grad_of(self, 0)) {
                         const float up = self.grad[0] / static_cast<float>(batch);
                         for (std::size_t b = 0; b < batch; ++b)
                           for (std::size_t c = 0; c < classes; ++c) {
                             const float target = static_cast<int>(c) == y[b] ? 1.0f : 0.0f;
                             g[b * classes + c] += up * (probs[b * classes + c] - target);
                           }
                       }
                     });
}

}  // namespace lg
