#include "dcct/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <limits>
#include <numbers>

#include "dcct/errors.hpp"

namespace dcct::ops {

namespace {

// Gradient buffer of parent `i`, or nullptr when it does not need one.
Tensor* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

const Tensor& parent_value(Node& self, std::size_t i) { return self.parents[i]->value; }

void require_matrix(const Var& x, const char* what) {
  if (x.shape().size() != 2) throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_str(x.shape()));
}

void require_same(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

int group_count(int rows, int group, const char* what) {
  if (group <= 0 || rows % group != 0) {
    throw ShapeError(std::string(what) + ": " + std::to_string(rows) + " rows not divisible into groups of " +
                     std::to_string(group));
  }
  return rows / group;
}

}  // namespace

Var constant(Tensor value) { return Var(std::move(value), false); }

Var detach(const Var& x) { return Var(x.value(), false); }

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = parent_grad(n, k)) {
        for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
    if (Tensor* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = parent_value(n, 0);
    const Tensor& bv = parent_value(n, 1);
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * bv[i];
    }
    if (Tensor* g = parent_grad(n, 1)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  return make_result(std::move(out), {a}, [s](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += s * n.grad[i];
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v += s;
  return make_result(std::move(out), {a}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
  });
}

Var one_minus(const Var& a) { return add_scalar(scale(a, -1.0), 1.0); }

Var add_row_vector(const Var& x, const Var& bias) {
  require_matrix(x, "add_row_vector");
  const int rows = x.rows();
  const int cols = x.cols();
  if (bias.numel() != static_cast<std::size_t>(cols)) {
    throw ShapeError("add_row_vector: bias " + shape_str(bias.shape()) + " vs matrix " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) out.at(r, c) += bias.value()[c];
  }
  return make_result(std::move(out), {x, bias}, [rows, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
    if (Tensor* g = parent_grad(n, 1)) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) (*g)[c] += n.grad.at(r, c);
      }
    }
  });
}

Var add_tiled(const Var& x, const Var& table) {
  require_matrix(x, "add_tiled");
  require_matrix(table, "add_tiled");
  const int period = table.rows();
  const int cols = x.cols();
  if (table.cols() != cols) throw ShapeError("add_tiled: column mismatch " + shape_str(x.shape()) + " vs " + shape_str(table.shape()));
  group_count(x.rows(), period, "add_tiled");
  Tensor out = x.value();
  for (int r = 0; r < x.rows(); ++r) {
    for (int c = 0; c < cols; ++c) out.at(r, c) += table.value().at(r % period, c);
  }
  return make_result(std::move(out), {x, table}, [period, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[i];
    }
    if (Tensor* g = parent_grad(n, 1)) {
      for (int r = 0; r < n.grad.rows(); ++r) {
        for (int c = 0; c < cols; ++c) g->at(r % period, c) += n.grad.at(r, c);
      }
    }
  });
}

Var repeat_rows(const Var& x, int times) {
  require_matrix(x, "repeat_rows");
  if (times <= 0) throw ShapeError("repeat_rows: times must be positive");
  const int rows = x.rows();
  const int cols = x.cols();
  Tensor out({rows * times, cols});
  for (int r = 0; r < rows * times; ++r) {
    const auto src = x.value().row(r / times);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return make_result(std::move(out), {x}, [times, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (int r = 0; r < n.grad.rows(); ++r) {
        for (int c = 0; c < cols; ++c) g->at(r / times, c) += n.grad.at(r, c);
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const int m = a.rows();
  const int k = a.cols();
  const int nn = b.cols();
  if (b.rows() != k) throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  Tensor out({m, nn});
  gemm_nn(m, nn, k, a.value().data.data(), b.value().data.data(), out.data.data());
  return make_result(std::move(out), {a, b}, [m, k, nn](Node& n) {
    const Tensor& av = parent_value(n, 0);
    const Tensor& bv = parent_value(n, 1);
    if (Tensor* g = parent_grad(n, 0)) gemm_nt(m, k, nn, n.grad.data.data(), bv.data.data(), g->data.data());
    if (Tensor* g = parent_grad(n, 1)) gemm_tn(k, nn, m, av.data.data(), n.grad.data.data(), g->data.data());
  });
}

Var linear(const Var& x, const Var& weight, const Var* bias) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  const int rows = x.rows();
  const int in = x.cols();
  const int out_dim = weight.rows();
  if (weight.cols() != in) {
    throw ShapeError("linear: input width " + std::to_string(in) + " does not match weight " + shape_str(weight.shape()));
  }
  if (bias && bias->numel() != static_cast<std::size_t>(out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  Tensor out({rows, out_dim});
  if (bias) {
    for (int r = 0; r < rows; ++r) {
      std::copy(bias->value().data.begin(), bias->value().data.end(), out.row(r).begin());
    }
  }
  gemm_nt(rows, out_dim, in, x.value().data.data(), weight.value().data.data(), out.data.data());
  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return make_result(std::move(out), parents, [rows, in, out_dim](Node& n) {
    const Tensor& xv = parent_value(n, 0);
    const Tensor& wv = parent_value(n, 1);
    if (Tensor* g = parent_grad(n, 0)) gemm_nn(rows, in, out_dim, n.grad.data.data(), wv.data.data(), g->data.data());
    if (Tensor* g = parent_grad(n, 1)) gemm_tn(out_dim, in, rows, n.grad.data.data(), xv.data.data(), g->data.data());
    if (n.parents.size() > 2) {
      if (Tensor* g = parent_grad(n, 2)) {
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < out_dim; ++c) (*g)[c] += n.grad.at(r, c);
        }
      }
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  const bool tracking = kink_tracking();
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const bool on = out[i] > 0.0;
    if (!on) out[i] = 0.0;
    if (tracking) {
      bits = (bits << 1) | (on ? 1u : 0u);
      if ((i & 63) == 63) {
        kink_record(bits);
        bits = 0;
      }
    }
  }
  if (tracking) kink_record(bits);
  return make_result(std::move(out), {x}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      const Tensor& xv = parent_value(n, 0);
      for (std::size_t i = 0; i < g->numel(); ++i) {
        if (xv[i] > 0.0) (*g)[i] += n.grad[i];
      }
    }
  });
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return make_result(std::move(out), {x}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      const Tensor& xv = parent_value(n, 0);
      const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < g->numel(); ++i) {
        const double v = xv[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        (*g)[i] += n.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return make_result(std::move(out), {x}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) {
        const double y = n.value[i];
        (*g)[i] += n.grad[i] * y * (1.0 - y);
      }
    }
  });
}

Var softmax_rows(const Var& x) {
  require_matrix(x, "softmax_rows");
  const int rows = x.rows();
  const int cols = x.cols();
  Tensor out = x.value();
  for (int r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : row) v /= s;
  }
  return make_result(std::move(out), {x}, [rows, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (int r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += n.grad.at(r, c) * n.value.at(r, c);
        for (int c = 0; c < cols; ++c) g->at(r, c) += n.value.at(r, c) * (n.grad.at(r, c) - dot);
      }
    }
  });
}

namespace {

// Normalized activations and per-slice inverse std, kept for backward.
struct NormStats {
  std::vector<double> xhat;
  std::vector<double> inv_std;
};

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_matrix(x, "layer_norm");
  const int rows = x.rows();
  const int cols = x.cols();
  if (gamma.numel() != static_cast<std::size_t>(cols) || beta.numel() != static_cast<std::size_t>(cols)) {
    throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(cols));
  }
  auto stats = std::make_shared<NormStats>();
  stats->xhat.resize(x.numel());
  stats->inv_std.resize(rows);
  Tensor out({rows, cols});
  for (int r = 0; r < rows; ++r) {
    const auto row = x.value().row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= cols;
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= cols;
    const double inv = 1.0 / std::sqrt(var + eps);
    stats->inv_std[r] = inv;
    for (int c = 0; c < cols; ++c) {
      const double xh = (row[c] - mu) * inv;
      stats->xhat[static_cast<std::size_t>(r) * cols + c] = xh;
      out.at(r, c) = gamma.value()[c] * xh + beta.value()[c];
    }
  }
  return make_result(std::move(out), {x, gamma, beta}, [rows, cols, stats](Node& n) {
    const Tensor& gv = parent_value(n, 1);
    Tensor* gx = parent_grad(n, 0);
    Tensor* gg = parent_grad(n, 1);
    Tensor* gb = parent_grad(n, 2);
    std::vector<double> dxhat(cols);
    for (int r = 0; r < rows; ++r) {
      const double* xh = stats->xhat.data() + static_cast<std::size_t>(r) * cols;
      double mean_d = 0.0;
      double mean_dx = 0.0;
      for (int c = 0; c < cols; ++c) {
        const double dy = n.grad.at(r, c);
        if (gg) (*gg)[c] += dy * xh[c];
        if (gb) (*gb)[c] += dy;
        dxhat[c] = dy * gv[c];
        mean_d += dxhat[c];
        mean_dx += dxhat[c] * xh[c];
      }
      if (!gx) continue;
      mean_d /= cols;
      mean_dx /= cols;
      for (int c = 0; c < cols; ++c) gx->at(r, c) += stats->inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  if (x.shape().size() != 4) throw ShapeError("group_norm: expected [N,C,H,W], got " + shape_str(x.shape()));
  const int batch = x.shape()[0];
  const int channels = x.shape()[1];
  const int plane = x.shape()[2] * x.shape()[3];
  if (groups <= 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible by " + std::to_string(groups) + " groups");
  }
  if (gamma.numel() != static_cast<std::size_t>(channels) || beta.numel() != static_cast<std::size_t>(channels)) {
    throw ShapeError("group_norm: affine parameters do not match channel count");
  }
  const int per_group = channels / groups;
  const std::size_t span = static_cast<std::size_t>(per_group) * plane;
  auto stats = std::make_shared<NormStats>();
  stats->xhat.resize(x.numel());
  stats->inv_std.resize(static_cast<std::size_t>(batch) * groups);
  Tensor out(x.shape());
  const double* xv = x.value().data.data();
  for (int b = 0; b < batch; ++b) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(b) * channels + static_cast<std::size_t>(g) * per_group) * plane;
      double mu = 0.0;
      for (std::size_t i = 0; i < span; ++i) mu += xv[base + i];
      mu /= static_cast<double>(span);
      double var = 0.0;
      for (std::size_t i = 0; i < span; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
      var /= static_cast<double>(span);
      const double inv = 1.0 / std::sqrt(var + eps);
      stats->inv_std[static_cast<std::size_t>(b) * groups + g] = inv;
      for (std::size_t i = 0; i < span; ++i) {
        const int c = g * per_group + static_cast<int>(i / plane);
        const double xh = (xv[base + i] - mu) * inv;
        stats->xhat[base + i] = xh;
        out[base + i] = gamma.value()[c] * xh + beta.value()[c];
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta}, [=](Node& n) {
    const Tensor& gv = parent_value(n, 1);
    Tensor* gx = parent_grad(n, 0);
    Tensor* gg = parent_grad(n, 1);
    Tensor* gb = parent_grad(n, 2);
    std::vector<double> dxhat(span);
    for (int b = 0; b < batch; ++b) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t base = (static_cast<std::size_t>(b) * channels + static_cast<std::size_t>(g) * per_group) * plane;
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t i = 0; i < span; ++i) {
          const int c = g * per_group + static_cast<int>(i / plane);
          const double dy = n.grad[base + i];
          const double xh = stats->xhat[base + i];
          if (gg) (*gg)[c] += dy * xh;
          if (gb) (*gb)[c] += dy;
          dxhat[i] = dy * gv[c];
          mean_d += dxhat[i];
          mean_dx += dxhat[i] * xh;
        }
        if (!gx) continue;
        mean_d /= static_cast<double>(span);
        mean_dx /= static_cast<double>(span);
        const double inv = stats->inv_std[static_cast<std::size_t>(b) * groups + g];
        for (std::size_t i = 0; i < span; ++i) {
          (*gx)[base + i] += inv * (dxhat[i] - mean_d - stats->xhat[base + i] * mean_dx);
        }
      }
    }
  });
}

Var conv2d(const Var& x, const Var& weight, int stride, int pad) {
  if (x.shape().size() != 4) throw ShapeError("conv2d: expected input [N,C,H,W], got " + shape_str(x.shape()));
  if (weight.shape().size() != 4 || weight.shape()[2] != weight.shape()[3]) {
    throw ShapeError("conv2d: expected square kernel [Co,Ci,k,k], got " + shape_str(weight.shape()));
  }
  const int batch = x.shape()[0];
  const int cin = x.shape()[1];
  const int h = x.shape()[2];
  const int w = x.shape()[3];
  const int cout = weight.shape()[0];
  const int k = weight.shape()[2];
  if (weight.shape()[1] != cin) {
    throw ShapeError("conv2d: input channels " + std::to_string(cin) + " vs kernel " + shape_str(weight.shape()));
  }
  if (stride <= 0 || pad < 0) throw ShapeError("conv2d: invalid stride/padding");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  const int ck = cin * k * k;
  const int spatial = ho * wo;
  const std::size_t col_size = static_cast<std::size_t>(ck) * spatial;

  auto cols = std::make_shared<std::vector<double>>(col_size * batch, 0.0);
  Tensor out({batch, cout, ho, wo});
  const double* xv = x.value().data.data();
  for (int b = 0; b < batch; ++b) {
    double* col = cols->data() + col_size * b;
    for (int c = 0; c < cin; ++c) {
      const double* plane = xv + (static_cast<std::size_t>(b) * cin + c) * h * w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double* dst = col + static_cast<std::size_t>((c * k + ky) * k + kx) * spatial;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              dst[oy * wo + ox] = plane[iy * w + ix];
            }
          }
        }
      }
    }
    gemm_nn(cout, spatial, ck, weight.value().data.data(), col,
            out.data.data() + static_cast<std::size_t>(b) * cout * spatial);
  }
  return make_result(std::move(out), {x, weight}, [=](Node& n) {
    const Tensor& wv = parent_value(n, 1);
    Tensor* gx = parent_grad(n, 0);
    Tensor* gw = parent_grad(n, 1);
    std::vector<double> dcol(gx ? col_size : 0);
    for (int b = 0; b < batch; ++b) {
      const double* dout = n.grad.data.data() + static_cast<std::size_t>(b) * cout * spatial;
      const double* col = cols->data() + col_size * b;
      if (gw) gemm_nt(cout, ck, spatial, dout, col, gw->data.data());
      if (!gx) continue;
      std::fill(dcol.begin(), dcol.end(), 0.0);
      gemm_tn(ck, spatial, cout, wv.data.data(), dout, dcol.data());
      double* gxb = gx->data.data() + static_cast<std::size_t>(b) * cin * h * w;
      for (int c = 0; c < cin; ++c) {
        double* plane = gxb + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const double* src = dcol.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * spatial;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                plane[iy * w + ix] += src[oy * wo + ox];
              }
            }
          }
        }
      }
    }
  });
}

Var nchw_to_rows(const Var& x) {
  if (x.shape().size() != 4) throw ShapeError("nchw_to_rows: expected [N,C,H,W], got " + shape_str(x.shape()));
  const int batch = x.shape()[0];
  const int channels = x.shape()[1];
  const int plane = x.shape()[2] * x.shape()[3];
  Tensor out({batch * plane, channels});
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const double* src = x.value().data.data() + (static_cast<std::size_t>(b) * channels + c) * plane;
      for (int p = 0; p < plane; ++p) out.at(b * plane + p, c) = src[p];
    }
  }
  return make_result(std::move(out), {x}, [batch, channels, plane](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < channels; ++c) {
          double* dst = g->data.data() + (static_cast<std::size_t>(b) * channels + c) * plane;
          for (int p = 0; p < plane; ++p) dst[p] += n.grad.at(b * plane + p, c);
        }
      }
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int rows = a.rows();
  const int ca = a.cols();
  const int cb = b.cols();
  Tensor out({rows, ca + cb});
  for (int r = 0; r < rows; ++r) {
    std::copy(a.value().row(r).begin(), a.value().row(r).end(), out.row(r).begin());
    std::copy(b.value().row(r).begin(), b.value().row(r).end(), out.row(r).begin() + ca);
  }
  return make_result(std::move(out), {a, b}, [rows, ca, cb](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < ca; ++c) g->at(r, c) += n.grad.at(r, c);
      }
    }
    if (Tensor* g = parent_grad(n, 1)) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cb; ++c) g->at(r, c) += n.grad.at(r, ca + c);
      }
    }
  });
}

Var slice_cols(const Var& x, int start, int width) {
  require_matrix(x, "slice_cols");
  if (start < 0 || width <= 0 || start + width > x.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + width) +
                     ") outside " + shape_str(x.shape()));
  }
  const int rows = x.rows();
  Tensor out({rows, width});
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < width; ++c) out.at(r, c) = x.value().at(r, start + c);
  }
  return make_result(std::move(out), {x}, [rows, start, width](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < width; ++c) g->at(r, start + c) += n.grad.at(r, c);
      }
    }
  });
}

Var group_mean_rows(const Var& x, int group) {
  require_matrix(x, "group_mean_rows");
  const int count = group_count(x.rows(), group, "group_mean_rows");
  const int cols = x.cols();
  Tensor out({count, cols});
  for (int r = 0; r < x.rows(); ++r) {
    for (int c = 0; c < cols; ++c) out.at(r / group, c) += x.value().at(r, c);
  }
  for (double& v : out.data) v /= group;
  return make_result(std::move(out), {x}, [group, cols](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      const double inv = 1.0 / group;
      for (int r = 0; r < g->rows(); ++r) {
        for (int c = 0; c < cols; ++c) g->at(r, c) += n.grad.at(r / group, c) * inv;
      }
    }
  });
}

Var group_rowdot(const Var& keys, const Var& query, int group) {
  require_matrix(keys, "group_rowdot");
  require_matrix(query, "group_rowdot");
  const int count = group_count(keys.rows(), group, "group_rowdot");
  const int d = keys.cols();
  if (query.rows() != count || query.cols() != d) {
    throw ShapeError("group_rowdot: projected query " + shape_str(query.shape()) + " does not match keys " +
                     shape_str(keys.shape()) + " in groups of " + std::to_string(group));
  }
  Tensor out({count, group});
  for (int s = 0; s < count; ++s) {
    const auto q = query.value().row(s);
    for (int p = 0; p < group; ++p) {
      const auto kr = keys.value().row(s * group + p);
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += kr[c] * q[c];
      out.at(s, p) = acc;
    }
  }
  return make_result(std::move(out), {keys, query}, [count, group, d](Node& n) {
    const Tensor& kv = parent_value(n, 0);
    const Tensor& qv = parent_value(n, 1);
    Tensor* gk = parent_grad(n, 0);
    Tensor* gq = parent_grad(n, 1);
    for (int s = 0; s < count; ++s) {
      for (int p = 0; p < group; ++p) {
        const double dy = n.grad.at(s, p);
        const int r = s * group + p;
        for (int c = 0; c < d; ++c) {
          if (gk) gk->at(r, c) += dy * qv.at(s, c);
          if (gq) gq->at(s, c) += dy * kv.at(r, c);
        }
      }
    }
  });
}

Var group_weighted_sum(const Var& weights, const Var& values, int group) {
  require_matrix(weights, "group_weighted_sum");
  require_matrix(values, "group_weighted_sum");
  const int count = group_count(values.rows(), group, "group_weighted_sum");
  if (weights.rows() != count || weights.cols() != group) {
    throw ShapeError("group_weighted_sum: attention " + shape_str(weights.shape()) + " does not cover grid of " +
                     std::to_string(group) + " positions for " + shape_str(values.shape()));
  }
  const int cols = values.cols();
  Tensor out({count, cols});
  for (int s = 0; s < count; ++s) {
    for (int p = 0; p < group; ++p) {
      const double a = weights.value().at(s, p);
      const auto vr = values.value().row(s * group + p);
      for (int c = 0; c < cols; ++c) out.at(s, c) += a * vr[c];
    }
  }
  return make_result(std::move(out), {weights, values}, [count, group, cols](Node& n) {
    const Tensor& av = parent_value(n, 0);
    const Tensor& vv = parent_value(n, 1);
    Tensor* ga = parent_grad(n, 0);
    Tensor* gv = parent_grad(n, 1);
    for (int s = 0; s < count; ++s) {
      for (int p = 0; p < group; ++p) {
        const int r = s * group + p;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) {
          const double dy = n.grad.at(s, c);
          acc += dy * vv.at(r, c);
          if (gv) gv->at(r, c) += av.at(s, p) * dy;
        }
        if (ga) ga->at(s, p) += acc;
      }
    }
  });
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, int tokens, int heads, double scale,
                         std::vector<double>* probs_out) {
  require_matrix(q, "multi_head_attention");
  require_same(q, k, "multi_head_attention");
  require_same(q, v, "multi_head_attention");
  const int groups = group_count(q.rows(), tokens, "multi_head_attention");
  const int width = q.cols();
  if (heads <= 0 || width % heads != 0) {
    throw ShapeError("multi_head_attention: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const int d = width / heads;
  const std::size_t block = static_cast<std::size_t>(tokens) * tokens;
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(groups) * heads * block);
  Tensor out({q.rows(), width});
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  std::vector<double> logits(tokens);
  std::vector<int> order(tokens);
  for (int g = 0; g < groups; ++g) {
    for (int h = 0; h < heads; ++h) {
      double* pb = probs->data() + (static_cast<std::size_t>(g) * heads + h) * block;
      for (int i = 0; i < tokens; ++i) {
        const double* qi = &qv.at(g * tokens + i, h * d);
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < tokens; ++j) {
          const double* kj = &kv.at(g * tokens + j, h * d);
          double s = 0.0;
          for (int c = 0; c < d; ++c) s += qi[c] * kj[c];
          logits[j] = s * scale;
          mx = std::max(mx, logits[j]);
        }
        // Reduce over keys in a canonical order (by logit, then value row) so
        // that permuting the tokens permutes the output bit-for-bit.
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
          if (logits[a] != logits[b]) return logits[a] < logits[b];
          const double* va = &vv.at(g * tokens + a, h * d);
          const double* vb = &vv.at(g * tokens + b, h * d);
          return std::lexicographical_compare(va, va + d, vb, vb + d);
        });
        double total = 0.0;
        for (int j : order) {
          logits[j] = std::exp(logits[j] - mx);
          total += logits[j];
        }
        double* zi = &out.at(g * tokens + i, h * d);
        for (int j : order) {
          const double p = logits[j] / total;
          pb[i * tokens + j] = p;
          const double* vj = &vv.at(g * tokens + j, h * d);
          for (int c = 0; c < d; ++c) zi[c] += p * vj[c];
        }
      }
    }
  }
  if (probs_out) *probs_out = *probs;
  return make_result(std::move(out), {q, k, v}, [=](Node& n) {
    const Tensor& qv2 = parent_value(n, 0);
    const Tensor& kv2 = parent_value(n, 1);
    const Tensor& vv2 = parent_value(n, 2);
    Tensor* gq = parent_grad(n, 0);
    Tensor* gk = parent_grad(n, 1);
    Tensor* gv = parent_grad(n, 2);
    std::vector<double> dp(tokens);
    for (int g = 0; g < groups; ++g) {
      for (int h = 0; h < heads; ++h) {
        const double* pb = probs->data() + (static_cast<std::size_t>(g) * heads + h) * block;
        for (int i = 0; i < tokens; ++i) {
          const double* dzi = &n.grad.at(g * tokens + i, h * d);
          double dot = 0.0;
          for (int j = 0; j < tokens; ++j) {
            const double* vj = &vv2.at(g * tokens + j, h * d);
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += dzi[c] * vj[c];
            dp[j] = s;
            dot += s * pb[i * tokens + j];
            if (gv) {
              double* gvj = &gv->at(g * tokens + j, h * d);
              const double p = pb[i * tokens + j];
              for (int c = 0; c < d; ++c) gvj[c] += p * dzi[c];
            }
          }
          for (int j = 0; j < tokens; ++j) {
            const double ds = pb[i * tokens + j] * (dp[j] - dot) * scale;
            if (ds == 0.0) continue;
            const double* qi = &qv2.at(g * tokens + i, h * d);
            const double* kj = &kv2.at(g * tokens + j, h * d);
            if (gq) {
              double* gqi = &gq->at(g * tokens + i, h * d);
              for (int c = 0; c < d; ++c) gqi[c] += ds * kj[c];
            }
            if (gk) {
              double* gkj = &gk->at(g * tokens + j, h * d);
              for (int c = 0; c < d; ++c) gkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return make_result(Tensor({1}, {s}), {x}, [](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (double& v : g->data) v += n.grad[0];
    }
  });
}

Var mean(const Var& x) {
  if (x.numel() == 0) throw ArgumentError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  if (weights.numel() != x.numel()) throw ShapeError("weighted_sum: weight count does not match tensor " + shape_str(x.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += weights[i] * x.value()[i];
  return make_result(Tensor({1}, {s}), {x}, [weights](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      for (std::size_t i = 0; i < g->numel(); ++i) (*g)[i] += n.grad[0] * weights[i];
    }
  });
}

namespace {

void log_softmax_row(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

}  // namespace

Var cross_entropy(const Var& logits, const std::vector<int>& labels, double smoothing) {
  require_matrix(logits, "cross_entropy");
  const int rows = logits.rows();
  const int classes = logits.cols();
  if (static_cast<int>(labels.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  if (rows == 0) throw ArgumentError("cross_entropy: empty batch");
  for (int label : labels) {
    if (label < 0 || label >= classes) {
      throw ArgumentError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw ArgumentError("cross_entropy: smoothing must lie in [0, 1)");
  auto logp = std::make_shared<Tensor>(Shape{rows, classes});
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    log_softmax_row(logits.value().row(r), logp->row(r));
    double row_loss = -(1.0 - smoothing) * logp->at(r, labels[r]);
    if (smoothing > 0.0) {
      double s = 0.0;
      for (int c = 0; c < classes; ++c) s += logp->at(r, c);
      row_loss -= smoothing * s / classes;
    }
    total += row_loss;
  }
  return make_result(Tensor({1}, {total / rows}), {logits}, [=](Node& n) {
    if (Tensor* g = parent_grad(n, 0)) {
      const double upstream = n.grad[0] / rows;
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < classes; ++c) {
          double target = smoothing / classes;
          if (c == labels[r]) target += 1.0 - smoothing;
          g->at(r, c) += upstream * (std::exp(logp->at(r, c)) - target);
        }
      }
    }
  });
}

Var kl_divergence(const Var& student_logits, const Tensor& teacher_probs, KlDirection direction) {
  require_matrix(student_logits, "kl_divergence");
  if (teacher_probs.shape != student_logits.shape()) {
    throw ShapeError("kl_divergence: teacher " + shape_str(teacher_probs.shape) + " vs student " + shape_str(student_logits.shape()));
  }
  const int rows = student_logits.rows();
  const int classes = student_logits.cols();
  auto logp = std::make_shared<Tensor>(Shape{rows, classes});
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    log_softmax_row(student_logits.value().row(r), logp->row(r));
    for (int c = 0; c < classes; ++c) {
      const double ps = std::exp(logp->at(r, c));
      const double pt = teacher_probs.at(r, c);
      const double lt = pt > 0.0 ? std::log(pt) : -std::numeric_limits<double>::infinity();
      if (direction == KlDirection::StudentTeacher) {
        if (ps > 0.0) total += ps * (logp->at(r, c) - lt);
      } else {
        if (pt > 0.0) total += pt * (lt - logp->at(r, c));
      }
    }
  }
  return make_result(Tensor({1}, {total}), {student_logits}, [=](Node& n) {
    Tensor* g = parent_grad(n, 0);
    if (!g) return;
    const double up = n.grad[0];
    for (int r = 0; r < rows; ++r) {
      if (direction == KlDirection::StudentTeacher) {
        // d/dz KL(p||q) = p * (log p - log q - KL_row)
        double row_kl = 0.0;
        for (int c = 0; c < classes; ++c) {
          const double ps = std::exp(logp->at(r, c));
          row_kl += ps * (logp->at(r, c) - std::log(teacher_probs.at(r, c)));
        }
        for (int c = 0; c < classes; ++c) {
          const double ps = std::exp(logp->at(r, c));
          g->at(r, c) += up * ps * (logp->at(r, c) - std::log(teacher_probs.at(r, c)) - row_kl);
        }
      } else {
        double mass = 0.0;
        for (int c = 0; c < classes; ++c) mass += teacher_probs.at(r, c);
        for (int c = 0; c < classes; ++c) {
          g->at(r, c) += up * (std::exp(logp->at(r, c)) * mass - teacher_probs.at(r, c));
        }
      }
    }
  });
}

Var batch_hard_triplet(const Var& features, const std::vector<int>& labels, double margin) {
  require_matrix(features, "batch_hard_triplet");
  const int count = features.rows();
  const int dim = features.cols();
  if (static_cast<int>(labels.size()) != count) {
    throw ShapeError("batch_hard_triplet: " + std::to_string(labels.size()) + " labels for " + std::to_string(count) + " features");
  }
  for (int i = 0; i < count; ++i) {
    int same = 0;
    int other = 0;
    for (int j = 0; j < count; ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? same : other)++;
    }
    if (same == 0) throw ArgumentError("batch_hard_triplet: identity " + std::to_string(labels[i]) + " has a single sample");
    if (other == 0) throw ArgumentError("batch_hard_triplet: batch contains a single identity");
  }
  const Tensor& f = features.value();
  std::vector<double> dist(static_cast<std::size_t>(count) * count, 0.0);
  for (int i = 0; i < count; ++i) {
    for (int j = i + 1; j < count; ++j) {
      double s = 0.0;
      for (int c = 0; c < dim; ++c) {
        const double diff = f.at(i, c) - f.at(j, c);
        s += diff * diff;
      }
      dist[i * count + j] = dist[j * count + i] = std::sqrt(s);
    }
  }
  struct Mined {
    int pos;
    int neg;
    bool active;
  };
  auto mined = std::make_shared<std::vector<Mined>>(count);
  double total = 0.0;
  for (int i = 0; i < count; ++i) {
    int pos = -1;
    int neg = -1;
    for (int j = 0; j < count; ++j) {
      if (j == i) continue;
      const double dij = dist[i * count + j];
      if (labels[j] == labels[i]) {
        if (pos < 0 || dij > dist[i * count + pos]) pos = j;
      } else if (neg < 0 || dij < dist[i * count + neg]) {
        neg = j;
      }
    }
    const double hinge = dist[i * count + pos] - dist[i * count + neg] + margin;
    const bool active = hinge > 0.0;
    (*mined)[i] = {pos, neg, active};
    if (active) total += hinge;
    kink_record((static_cast<std::uint64_t>(pos) << 33) ^ (static_cast<std::uint64_t>(neg) << 1) ^ (active ? 1u : 0u));
  }
  auto distances = std::make_shared<std::vector<double>>(std::move(dist));
  return make_result(Tensor({1}, {total / count}), {features}, [=](Node& n) {
    Tensor* g = parent_grad(n, 0);
    if (!g) return;
    const Tensor& fv = parent_value(n, 0);
    const double up = n.grad[0] / count;
    // d||fi - fj|| / dfi = (fi - fj) / ||fi - fj||; zero at coincident points.
    auto push = [&](int i, int j, double coeff) {
      const double d = (*distances)[i * count + j];
      if (d == 0.0) return;
      for (int c = 0; c < dim; ++c) {
        const double u = (fv.at(i, c) - fv.at(j, c)) / d * coeff;
        g->at(i, c) += u;
        g->at(j, c) -= u;
      }
    };
    for (int i = 0; i < count; ++i) {
      const Mined& m = (*mined)[i];
      if (!m.active) continue;
      push(i, m.pos, up);
      push(i, m.neg, -up);
    }
  });
}

}  // namespace dcct::ops
