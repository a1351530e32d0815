#pragma once

#include <functional>
#include <vector>

#include "quadgate/tensor.hpp"

namespace qg {

// All operations run forward immediately and, when the active tape is
// recording and an input requires gradients, append their backward rule.
// Shapes are validated up front; violations throw dim_error naming the
// offending shapes.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
Tensor transpose2d(const Tensor& a);              // [m,n] -> [n,m]

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_rowwise(const Tensor& x, const Tensor& bias);      // [n,d] + [d]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias); // [C,H,W] + [C]

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact Gaussian-CDF form
Tensor sigmoid(const Tensor& x);
Tensor abs_val(const Tensor& x);  // subgradient 0 at 0

Tensor softmax_lastdim(const Tensor& x);
Tensor layernorm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5);

Tensor sum_all(const Tensor& x);   // -> [1]
Tensor mean_all(const Tensor& x);  // -> [1]
Tensor mean_spatial(const Tensor& x);  // [C,H,W] -> [C]

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor reshape(const Tensor& x, std::vector<int> shape);

// x [C_in,H,W], kernel [C_out,C_in,kh,kw], valid padding.
// Output spatial dims: floor((H-kh)/stride)+1 by floor((W-kw)/stride)+1.
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride);

Tensor image_to_tokens(const Tensor& x);              // [C,H,W] -> [H*W, C]
Tensor tokens_to_image(const Tensor& t, int h, int w);  // [h*w, C] -> [C,h,w]

// Per-position scaling of a feature map by a single-channel coefficient map:
// [C,H,W] * [1,H,W], broadcast over channels.
Tensor scale_by_map(const Tensor& x, const Tensor& coeff);

// Central-difference gradient check for a scalar-valued tensor function.
// Returns the maximum over coordinates of
//   |analytic - central| / max(|analytic|, |central|, 1e-12).
// A non-finite f(x) is reported as +infinity. x is restored on return.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double step);

}  // namespace qg
