#include "quadgate/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace qg {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

bool want_grad(const Tensor& a) { return Tape::active().recording() && a.requires_grad(); }
bool want_grad(const Tensor& a, const Tensor& b) {
  return Tape::active().recording() && (a.requires_grad() || b.requires_grad());
}

Tensor make_output(std::vector<int> shape, bool rg) {
  return Tensor::zeros(std::move(shape), rg);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw dim_error(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) +
                    " vs " + shape_str(b.shape()));
  }
}

// Unary elementwise helper: fwd(x) and dfdx(x, y) evaluated per element.
template <typename F, typename D>
Tensor unary_elementwise(const Tensor& x, F fwd, D dfdx) {
  Tensor out = make_output(x.shape(), want_grad(x));
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  if (out.requires_grad()) {
    Tape::active().push([x, out, dfdx]() mutable {
      if (!out.has_grad()) return;
      auto& gx = x.ensure_grad();
      const auto& go = out.grad();
      const auto& xv = x.values();
      const auto& ov = out.values();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * dfdx(xv[i], ov[i]);
    });
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw dim_error("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                    " vs " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_output({m, n}, want_grad(a, b));
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data(), m, k) * ConstMatMap(b.data(), k, n);
  if (out.requires_grad()) {
    Tape::active().push([a, b, out, m, k, n]() mutable {
      if (!out.has_grad()) return;
      ConstMatMap g(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MatMap(a.ensure_grad().data(), m, k).noalias() +=
            g * ConstMatMap(b.data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatMap(b.ensure_grad().data(), k, n).noalias() +=
            ConstMatMap(a.data(), m, k).transpose() * g;
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw dim_error("transpose2d: need rank 2, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = make_output({n, m}, want_grad(a));
  const double* av = a.data();
  double* ov = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  if (out.requires_grad()) {
    Tape::active().push([a, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto& ga = a.ensure_grad();
      const auto& go = out.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = make_output(a.shape(), want_grad(a, b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    Tape::active().push([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = make_output(a.shape(), want_grad(a, b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (out.requires_grad()) {
    Tape::active().push([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = make_output(a.shape(), want_grad(a, b));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (out.requires_grad()) {
    Tape::active().push([a, b, out]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (a.requires_grad()) {
        auto& ga = a.ensure_grad();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.ensure_grad();
        const auto& av = a.values();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_elementwise(
      a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_elementwise(
      a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw dim_error("add_rowwise: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const int n = x.dim(0), d = x.dim(1);
  Tensor out = make_output(x.shape(), want_grad(x, bias));
  const double* xv = x.data();
  const double* bv = bias.data();
  double* ov = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) ov[i * d + j] = xv[i * d + j] + bv[j];
  if (out.requires_grad()) {
    Tape::active().push([x, bias, out, n, d]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (x.requires_grad()) {
        auto& gx = x.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (bias.requires_grad()) {
        auto& gb = bias.ensure_grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) gb[j] += go[static_cast<std::size_t>(i) * d + j];
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0)) {
    throw dim_error("add_channel_bias: " + shape_str(x.shape()) + " + " +
                    shape_str(bias.shape()));
  }
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out = make_output(x.shape(), want_grad(x, bias));
  const double* xv = x.data();
  const double* bv = bias.data();
  double* ov = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) ov[ch * hw + i] = xv[ch * hw + i] + bv[ch];
  if (out.requires_grad()) {
    Tape::active().push([x, bias, out, c, hw]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      if (x.requires_grad()) {
        auto& gx = x.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (bias.requires_grad()) {
        auto& gb = bias.ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < hw; ++i) gb[ch] += go[static_cast<std::size_t>(ch) * hw + i];
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(const Tensor& x) {
  return unary_elementwise(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs_val(const Tensor& x) {
  return unary_elementwise(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) < 1) {
    throw dim_error("softmax_lastdim: empty last dim in " + shape_str(x.shape()));
  }
  const int d = x.dim(x.rank() - 1);
  const int slices = x.size() / d;
  Tensor out = make_output(x.shape(), want_grad(x));
  const double* xv = x.data();
  double* ov = out.data();
  for (int s = 0; s < slices; ++s) {
    const double* row = xv + static_cast<std::size_t>(s) * d;
    double* orow = ov + static_cast<std::size_t>(s) * d;
    double mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < d; ++j) orow[j] /= sum;
  }
  if (out.requires_grad()) {
    Tape::active().push([x, out, d, slices]() mutable {
      if (!out.has_grad()) return;
      auto& gx = x.ensure_grad();
      const auto& go = out.grad();
      const auto& ov = out.values();
      for (int s = 0; s < slices; ++s) {
        const std::size_t off = static_cast<std::size_t>(s) * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += go[off + j] * ov[off + j];
        for (int j = 0; j < d; ++j) gx[off + j] += ov[off + j] * (go[off + j] - dot);
      }
    });
  }
  return out;
}

Tensor layernorm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps) {
  const int d = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d) {
    throw dim_error("layernorm_lastdim: scale/shift " + shape_str(gamma.shape()) + "/" +
                    shape_str(beta.shape()) + " do not match last dim of " +
                    shape_str(x.shape()));
  }
  const int slices = x.size() / d;
  bool rg = Tape::active().recording() &&
            (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  Tensor out = make_output(x.shape(), rg);
  // Normalized values and per-slice inverse stddev are needed by backward.
  auto xhat = std::make_shared<std::vector<double>>(x.values().size());
  auto inv_std = std::make_shared<std::vector<double>>(slices);
  const double* xv = x.data();
  const double* gv = gamma.data();
  const double* bv = beta.data();
  double* ov = out.data();
  for (int s = 0; s < slices; ++s) {
    const std::size_t off = static_cast<std::size_t>(s) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xv[off + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = xv[off + j] - mean;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[s] = is;
    for (int j = 0; j < d; ++j) {
      double xh = (xv[off + j] - mean) * is;
      (*xhat)[off + j] = xh;
      ov[off + j] = xh * gv[j] + bv[j];
    }
  }
  if (out.requires_grad()) {
    Tape::active().push([x, gamma, beta, out, xhat, inv_std, d, slices]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      const auto& gv = gamma.values();
      for (int s = 0; s < slices; ++s) {
        const std::size_t off = static_cast<std::size_t>(s) * d;
        if (gamma.requires_grad()) {
          auto& gg = gamma.ensure_grad();
          for (int j = 0; j < d; ++j) gg[j] += go[off + j] * (*xhat)[off + j];
        }
        if (beta.requires_grad()) {
          auto& gb = beta.ensure_grad();
          for (int j = 0; j < d; ++j) gb[j] += go[off + j];
        }
        if (x.requires_grad()) {
          auto& gx = x.ensure_grad();
          double sum_gy = 0.0, sum_gyx = 0.0;
          for (int j = 0; j < d; ++j) {
            double gy = go[off + j] * gv[j];
            sum_gy += gy;
            sum_gyx += gy * (*xhat)[off + j];
          }
          const double is = (*inv_std)[s];
          for (int j = 0; j < d; ++j) {
            double gy = go[off + j] * gv[j];
            gx[off + j] += is * (gy - sum_gy / d - (*xhat)[off + j] * sum_gyx / d);
          }
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = make_output({1}, want_grad(x));
  double s = 0.0;
  for (double v : x.values()) s += v;
  out.values()[0] = s;
  if (out.requires_grad()) {
    Tape::active().push([x, out]() mutable {
      if (!out.has_grad()) return;
      auto& gx = x.ensure_grad();
      const double g = out.grad()[0];
      for (double& v : gx) v += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  const double inv_n = 1.0 / x.size();
  Tensor out = make_output({1}, want_grad(x));
  double s = 0.0;
  for (double v : x.values()) s += v;
  out.values()[0] = s * inv_n;
  if (out.requires_grad()) {
    Tape::active().push([x, out, inv_n]() mutable {
      if (!out.has_grad()) return;
      auto& gx = x.ensure_grad();
      const double g = out.grad()[0] * inv_n;
      for (double& v : gx) v += g;
    });
  }
  return out;
}

Tensor mean_spatial(const Tensor& x) {
  if (x.rank() != 3) throw dim_error("mean_spatial: need [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  const double inv = 1.0 / hw;
  Tensor out = make_output({c}, want_grad(x));
  const double* xv = x.data();
  double* ov = out.data();
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int i = 0; i < hw; ++i) s += xv[ch * hw + i];
    ov[ch] = s * inv;
  }
  if (out.requires_grad()) {
    Tape::active().push([x, out, c, hw, inv]() mutable {
      if (!out.has_grad()) return;
      auto& gx = x.ensure_grad();
      const auto& go = out.grad();
      for (int ch = 0; ch < c; ++ch) {
        const double g = go[ch] * inv;
        for (int i = 0; i < hw; ++i) gx[static_cast<std::size_t>(ch) * hw + i] += g;
      }
    });
  }
  return out;
}

namespace {

// Row-major view of a tensor around `axis`: outer x axis_len x inner.
struct AxisView {
  int outer, axis_len, inner;
};

AxisView axis_view(const std::vector<int>& shape, int axis) {
  AxisView v{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    v.inner *= shape[i];
  return v;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw contract_error("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw dim_error("concat: axis out of range");
  std::vector<int> out_shape = parts[0].shape();
  int total_axis = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw dim_error("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.dim(i) != parts[0].dim(i)) {
        throw dim_error("concat: non-axis dims disagree: " + shape_str(parts[0].shape()) +
                        " vs " + shape_str(p.shape()));
      }
    }
    total_axis += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;

  bool rg = false;
  if (Tape::active().recording()) {
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
  }
  Tensor out = make_output(out_shape, rg);
  const AxisView ov = axis_view(out_shape, axis);
  double* od = out.data();
  int axis_off = 0;
  for (const Tensor& p : parts) {
    const AxisView pv = axis_view(p.shape(), axis);
    const double* pd = p.data();
    for (int o = 0; o < pv.outer; ++o) {
      const std::size_t src = static_cast<std::size_t>(o) * pv.axis_len * pv.inner;
      const std::size_t dst =
          (static_cast<std::size_t>(o) * ov.axis_len + axis_off) * ov.inner;
      std::copy(pd + src, pd + src + static_cast<std::size_t>(pv.axis_len) * pv.inner,
                od + dst);
    }
    axis_off += pv.axis_len;
  }
  if (out.requires_grad()) {
    Tape::active().push([parts, out, axis]() mutable {
      if (!out.has_grad()) return;
      const AxisView ov = axis_view(out.shape(), axis);
      const auto& go = out.grad();
      int axis_off = 0;
      for (const Tensor& p : parts) {
        const AxisView pv = axis_view(p.shape(), axis);
        if (p.requires_grad()) {
          auto& gp = p.ensure_grad();
          for (int o = 0; o < pv.outer; ++o) {
            const std::size_t src =
                (static_cast<std::size_t>(o) * ov.axis_len + axis_off) * ov.inner;
            const std::size_t dst = static_cast<std::size_t>(o) * pv.axis_len * pv.inner;
            const std::size_t len = static_cast<std::size_t>(pv.axis_len) * pv.inner;
            for (std::size_t i = 0; i < len; ++i) gp[dst + i] += go[src + i];
          }
        }
        axis_off += pv.axis_len;
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  if (axis < 0 || axis >= x.rank()) throw dim_error("slice: axis out of range");
  if (start < 0 || length <= 0 || start + length > x.dim(axis)) {
    throw dim_error("slice: range [" + std::to_string(start) + "," +
                    std::to_string(start + length) + ") out of bounds for " +
                    shape_str(x.shape()));
  }
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  Tensor out = make_output(out_shape, want_grad(x));
  const AxisView xv = axis_view(x.shape(), axis);
  const double* xd = x.data();
  double* od = out.data();
  for (int o = 0; o < xv.outer; ++o) {
    const std::size_t src = (static_cast<std::size_t>(o) * xv.axis_len + start) * xv.inner;
    const std::size_t dst = static_cast<std::size_t>(o) * length * xv.inner;
    std::copy(xd + src, xd + src + static_cast<std::size_t>(length) * xv.inner, od + dst);
  }
  if (out.requires_grad()) {
    Tape::active().push([x, out, axis, start, length]() mutable {
      if (!out.has_grad()) return;
      const AxisView xv = axis_view(x.shape(), axis);
      auto& gx = x.ensure_grad();
      const auto& go = out.grad();
      for (int o = 0; o < xv.outer; ++o) {
        const std::size_t dst =
            (static_cast<std::size_t>(o) * xv.axis_len + start) * xv.inner;
        const std::size_t src = static_cast<std::size_t>(o) * length * xv.inner;
        const std::size_t len = static_cast<std::size_t>(length) * xv.inner;
        for (std::size_t i = 0; i < len; ++i) gx[dst + i] += go[src + i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(std::max(d, 0));
  if (shape.empty() || n != x.values().size()) {
    throw dim_error("reshape: cannot view " + shape_str(x.shape()) + " as " +
                    shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), x.values(), want_grad(x));
  if (out.requires_grad()) {
    Tape::active().push([x, out]() mutable {
      if (!out.has_grad()) return;
      auto& gx = x.ensure_grad();
      const auto& go = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride) {
  if (x.rank() != 3 || kernel.rank() != 4) {
    throw dim_error("conv2d: need [C,H,W] and [Co,Ci,kh,kw], got " + shape_str(x.shape()) +
                    " and " + shape_str(kernel.shape()));
  }
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != ci) {
    throw dim_error("conv2d: channel mismatch: " + shape_str(x.shape()) + " vs " +
                    shape_str(kernel.shape()));
  }
  if (kh > h || kw > w) {
    throw dim_error("conv2d: kernel " + shape_str(kernel.shape()) + " larger than input " +
                    shape_str(x.shape()));
  }
  if (stride < 1) throw contract_error("conv2d: stride must be >= 1");
  const int oh = (h - kh) / stride + 1;
  const int ow = (w - kw) / stride + 1;
  Tensor out = make_output({co, oh, ow}, want_grad(x, kernel));
  const double* xv = x.data();
  const double* kv = kernel.data();
  double* ov = out.data();
  for (int o = 0; o < co; ++o) {
    for (int yy = 0; yy < oh; ++yy) {
      for (int xx = 0; xx < ow; ++xx) {
        double acc = 0.0;
        for (int c = 0; c < ci; ++c) {
          const double* xc = xv + (static_cast<std::size_t>(c) * h + yy * stride) * w;
          const double* kc = kv + ((static_cast<std::size_t>(o) * ci + c) * kh) * kw;
          for (int i = 0; i < kh; ++i) {
            const double* xr = xc + static_cast<std::size_t>(i) * w + xx * stride;
            const double* kr = kc + static_cast<std::size_t>(i) * kw;
            for (int j = 0; j < kw; ++j) acc += xr[j] * kr[j];
          }
        }
        ov[(static_cast<std::size_t>(o) * oh + yy) * ow + xx] = acc;
      }
    }
  }
  if (out.requires_grad()) {
    Tape::active().push([x, kernel, out, stride, ci, h, w, co, kh, kw, oh, ow]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      const bool gx_on = x.requires_grad();
      const bool gk_on = kernel.requires_grad();
      auto* gx = gx_on ? &x.ensure_grad() : nullptr;
      auto* gk = gk_on ? &kernel.ensure_grad() : nullptr;
      const auto& xv = x.values();
      const auto& kv = kernel.values();
      for (int o = 0; o < co; ++o) {
        for (int yy = 0; yy < oh; ++yy) {
          for (int xx = 0; xx < ow; ++xx) {
            const double g = go[(static_cast<std::size_t>(o) * oh + yy) * ow + xx];
            if (g == 0.0) continue;
            for (int c = 0; c < ci; ++c) {
              for (int i = 0; i < kh; ++i) {
                const std::size_t xrow =
                    (static_cast<std::size_t>(c) * h + yy * stride + i) * w + xx * stride;
                const std::size_t krow =
                    ((static_cast<std::size_t>(o) * ci + c) * kh + i) * kw;
                for (int j = 0; j < kw; ++j) {
                  if (gx_on) (*gx)[xrow + j] += g * kv[krow + j];
                  if (gk_on) (*gk)[krow + j] += g * xv[xrow + j];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor image_to_tokens(const Tensor& x) {
  if (x.rank() != 3) throw dim_error("image_to_tokens: need [C,H,W], got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int n = h * w;
  Tensor out = make_output({n, c}, want_grad(x));
  const double* xv = x.data();
  double* ov = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < n; ++p) ov[static_cast<std::size_t>(p) * c + ch] = xv[static_cast<std::size_t>(ch) * n + p];
  if (out.requires_grad()) {
    Tape::active().push([x, out, c, n]() mutable {
      if (!out.has_grad()) return;
      auto& gx = x.ensure_grad();
      const auto& go = out.grad();
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < n; ++p)
          gx[static_cast<std::size_t>(ch) * n + p] += go[static_cast<std::size_t>(p) * c + ch];
    });
  }
  return out;
}

Tensor tokens_to_image(const Tensor& t, int h, int w) {
  if (t.rank() != 2 || t.dim(0) != h * w) {
    throw dim_error("tokens_to_image: " + shape_str(t.shape()) + " does not match " +
                    std::to_string(h) + "x" + std::to_string(w));
  }
  const int n = h * w, c = t.dim(1);
  Tensor out = make_output({c, h, w}, want_grad(t));
  const double* tv = t.data();
  double* ov = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < n; ++p) ov[static_cast<std::size_t>(ch) * n + p] = tv[static_cast<std::size_t>(p) * c + ch];
  if (out.requires_grad()) {
    Tape::active().push([t, out, c, n]() mutable {
      if (!out.has_grad()) return;
      auto& gt = t.ensure_grad();
      const auto& go = out.grad();
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < n; ++p)
          gt[static_cast<std::size_t>(p) * c + ch] += go[static_cast<std::size_t>(ch) * n + p];
    });
  }
  return out;
}

Tensor scale_by_map(const Tensor& x, const Tensor& coeff) {
  if (x.rank() != 3 || coeff.rank() != 3 || coeff.dim(0) != 1 || coeff.dim(1) != x.dim(1) ||
      coeff.dim(2) != x.dim(2)) {
    throw dim_error("scale_by_map: " + shape_str(x.shape()) + " * " +
                    shape_str(coeff.shape()));
  }
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out = make_output(x.shape(), want_grad(x, coeff));
  const double* xv = x.data();
  const double* mv = coeff.data();
  double* ov = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) ov[static_cast<std::size_t>(ch) * hw + i] = xv[static_cast<std::size_t>(ch) * hw + i] * mv[i];
  if (out.requires_grad()) {
    Tape::active().push([x, coeff, out, c, hw]() mutable {
      if (!out.has_grad()) return;
      const auto& go = out.grad();
      const auto& xv = x.values();
      const auto& mv = coeff.values();
      if (x.requires_grad()) {
        auto& gx = x.ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < hw; ++i)
            gx[static_cast<std::size_t>(ch) * hw + i] += go[static_cast<std::size_t>(ch) * hw + i] * mv[i];
      }
      if (coeff.requires_grad()) {
        auto& gm = coeff.ensure_grad();
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < hw; ++i)
            gm[i] += go[static_cast<std::size_t>(ch) * hw + i] * xv[static_cast<std::size_t>(ch) * hw + i];
      }
    });
  }
  return out;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double step) {
  if (step <= 0.0) throw contract_error("finite_diff_check: step must be positive");
  const bool prev_rg = x.requires_grad();
  x.set_requires_grad(true);
  x.drop_grad();

  std::vector<double> analytic;
  {
    TapeScope scope;
    Tensor y = f(x);
    if (y.size() != 1) throw contract_error("finite_diff_check: f must be scalar-valued");
    backward(y);
    analytic = x.has_grad() ? x.grad() : std::vector<double>(x.values().size(), 0.0);
  }
  x.drop_grad();

  double max_err = 0.0;
  {
    TapeScope scope;
    NoGradGuard ng;
    auto& xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double saved = xv[i];
      xv[i] = saved + step;
      const double fp = f(x).item();
      xv[i] = saved - step;
      const double fm = f(x).item();
      xv[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        max_err = std::numeric_limits<double>::infinity();
        break;
      }
      const double central = (fp - fm) / (2.0 * step);
      const double denom = std::max({std::fabs(analytic[i]), std::fabs(central), 1e-12});
      max_err = std::max(max_err, std::fabs(analytic[i] - central) / denom);
    }
  }
  x.set_requires_grad(prev_rg);
  return max_err;
}

}  // namespace qg
