#include "fsdv/nn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include <Eigen/Core>

namespace fsdv::nn {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (!g_grad_enabled) return n;
  for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a->value.shape() != b->value.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a->value.shape()) + " vs " +
                     shape_string(b->value.shape()));
  }
}

template <typename T>
void im2col(const T* img, int channels, int height, int width, int k, T* col) {
  const int pad = k / 2;
  const int hw = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        const T* src = img + static_cast<std::size_t>(c) * hw;
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          T* dst = row + y * width;
          if (sy < 0 || sy >= height) {
            std::fill(dst, dst + width, T(0));
            continue;
          }
          const T* srow = src + sy * width;
          const int x_begin = std::max(0, pad - kx);
          const int x_end = std::min(width, width + pad - kx);
          for (int x = 0; x < x_begin; ++x) dst[x] = T(0);
          for (int x = x_begin; x < x_end; ++x) dst[x] = srow[x + kx - pad];
          for (int x = x_end; x < width; ++x) dst[x] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int channels, int height, int width, int k, T* img) {
  const int pad = k / 2;
  const int hw = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        T* dst = img + static_cast<std::size_t>(c) * hw;
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          const T* src = row + y * width;
          T* drow = dst + sy * width;
          const int x_begin = std::max(0, pad - kx);
          const int x_end = std::min(width, width + pad - kx);
          for (int x = x_begin; x < x_end; ++x) drow[x + kx - pad] += src[x];
        }
      }
    }
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

template <typename T>
void backward(const Var<T>& root) {
  require(root->value.size() == 1, "backward: root must be a scalar");
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_ref()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

// --- convolutional ---------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  require(xs.size() == 4 && ws.size() == 4, "conv2d: expected 4-d input and weight");
  require(ws[1] == xs[1], "conv2d: channel mismatch");
  require(ws[2] == ws[3] && ws[2] % 2 == 1, "conv2d: kernel must be odd square");
  require(b->value.size() == static_cast<std::size_t>(ws[0]), "conv2d: bias size");
  const int n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const int o = ws[0], k = ws[2];
  const int kk = c * k * k, hw = h * wd;
  const bool keep = g_grad_enabled && (x->requires_grad || w->requires_grad || b->requires_grad);

  Tensor<T> out({n, o, h, wd});
  AlignedVector<T> cols(static_cast<std::size_t>(keep ? n : 1) * kk * hw);
  CMatMap<T> wm(w->value.data(), o, kk);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(b->value.data(), o);
  for (int i = 0; i < n; ++i) {
    T* col = cols.data() + (keep ? static_cast<std::size_t>(i) * kk * hw : 0);
    im2col(x->value.data() + static_cast<std::size_t>(i) * c * hw, c, h, wd, k, col);
    MatMap<T> om(out.data() + static_cast<std::size_t>(i) * o * hw, o, hw);
    om.noalias() = wm * CMatMap<T>(col, kk, hw);
    om.colwise() += bv;
  }
  auto node = make_node<T>(std::move(out), {x, w, b});
  if (!node->requires_grad) return node;
  node->backward = [cols = std::move(cols), n, c, h, wd, o, k, kk, hw](Node<T>& self) {
    auto& xp = self.parents[0];
    auto& wp = self.parents[1];
    auto& bp = self.parents[2];
    const T* gy = self.grad.data();
    CMatMap<T> wm(wp->value.data(), o, kk);
    RowMat<T> dcol;
    for (int i = 0; i < n; ++i) {
      CMatMap<T> g(gy + static_cast<std::size_t>(i) * o * hw, o, hw);
      CMatMap<T> col(cols.data() + static_cast<std::size_t>(i) * kk * hw, kk, hw);
      if (wp->requires_grad) {
        MatMap<T>(wp->grad_ref().data(), o, kk).noalias() += g * col.transpose();
      }
      if (bp->requires_grad) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bp->grad_ref().data(), o) +=
            g.rowwise().sum();
      }
      if (xp->requires_grad) {
        dcol.noalias() = wm.transpose() * g;
        col2im(dcol.data(), c, h, wd, k,
               xp->grad_ref().data() + static_cast<std::size_t>(i) * c * hw);
      }
    }
  };
  return node;
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  int groups, double eps) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "group_norm: expected [N,C,H,W]");
  const int n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  require(groups > 0 && c % groups == 0, "group_norm: channels not divisible");
  require(gamma->value.size() == static_cast<std::size_t>(c) &&
              beta->value.size() == static_cast<std::size_t>(c),
          "group_norm: affine size");
  const int cg = c / groups;
  const std::size_t m = static_cast<std::size_t>(cg) * hw;

  Tensor<T> out(xs);
  Tensor<T> xhat(xs);
  std::vector<double> inv_std(static_cast<std::size_t>(n) * groups);
  const T* xv = x->value.data();
  for (int i = 0; i < n; ++i) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + g * cg) * hw;
      double mean = 0.0;
      for (std::size_t j = 0; j < m; ++j) mean += xv[off + j];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double d = xv[off + j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(i) * groups + g] = is;
      for (int cc = 0; cc < cg; ++cc) {
        const int ch = g * cg + cc;
        const double ga = gamma->value[ch], be = beta->value[ch];
        for (int j = 0; j < hw; ++j) {
          const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + j;
          const double xh = (xv[idx] - mean) * is;
          xhat[idx] = static_cast<T>(xh);
          out[idx] = static_cast<T>(ga * xh + be);
        }
      }
    }
  }
  auto node = make_node<T>(std::move(out), {x, gamma, beta});
  if (!node->requires_grad) return node;
  node->backward = [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c,
                    hw, groups, cg, m](Node<T>& self) {
    auto& xp = self.parents[0];
    auto& gp = self.parents[1];
    auto& bp = self.parents[2];
    const T* gy = self.grad.data();
    for (int i = 0; i < n; ++i) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t off = (static_cast<std::size_t>(i) * c + g * cg) * hw;
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int cc = 0; cc < cg; ++cc) {
          const int ch = g * cg + cc;
          const double ga = gp->value[ch];
          double dga = 0.0, dbe = 0.0;
          for (int j = 0; j < hw; ++j) {
            const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + j;
            const double dy = gy[idx];
            dga += dy * xhat[idx];
            dbe += dy;
            const double dxh = dy * ga;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat[idx];
          }
          if (gp->requires_grad) gp->grad_ref()[ch] += static_cast<T>(dga);
          if (bp->requires_grad) bp->grad_ref()[ch] += static_cast<T>(dbe);
        }
        if (!xp->requires_grad) continue;
        const double is = inv_std[static_cast<std::size_t>(i) * groups + g];
        const double md = static_cast<double>(m);
        T* gx = xp->grad_ref().data();
        for (int cc = 0; cc < cg; ++cc) {
          const double ga = gp->value[g * cg + cc];
          for (int j = 0; j < hw; ++j) {
            const std::size_t idx = off + static_cast<std::size_t>(cc) * hw + j;
            const double dxh = gy[idx] * ga;
            gx[idx] += static_cast<T>(
                is / md * (md * dxh - sum_dxh - xhat[idx] * sum_dxh_xh));
          }
        }
      }
    }
  };
  return node;
}

template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "max_pool2: expected [N,C,H,W]");
  require(xs[2] % 2 == 0 && xs[3] % 2 == 0, "max_pool2: odd spatial size");
  const int nc = xs[0] * xs[1], h = xs[2], w = xs[3];
  const int oh = h / 2, ow = w / 2;
  Tensor<T> out({xs[0], xs[1], oh, ow});
  std::vector<int> arg(out.size());
  const T* xv = x->value.data();
  for (int p = 0; p < nc; ++p) {
    const T* src = xv + static_cast<std::size_t>(p) * h * w;
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        int best = (2 * y) * w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (2 * y + dy) * w + 2 * xx + dx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(p) * oh + y) * ow + xx;
        out[o] = src[best];
        arg[o] = best;
      }
    }
  }
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [arg = std::move(arg), h, w, oh, ow](Node<T>& self) {
    T* gx = self.parents[0]->grad_ref().data();
    const std::size_t per = static_cast<std::size_t>(oh) * ow;
    for (std::size_t o = 0; o < arg.size(); ++o) {
      const std::size_t p = o / per;
      gx[p * h * w + arg[o]] += self.grad[o];
    }
  };
  return node;
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "global_avg_pool: expected [N,C,H,W]");
  const int nc = xs[0] * xs[1], hw = xs[2] * xs[3];
  Tensor<T> out({xs[0], xs[1]});
  for (int p = 0; p < nc; ++p) {
    double s = 0.0;
    const T* src = x->value.data() + static_cast<std::size_t>(p) * hw;
    for (int j = 0; j < hw; ++j) s += src[j];
    out[p] = static_cast<T>(s / hw);
  }
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [nc, hw](Node<T>& self) {
    T* gx = self.parents[0]->grad_ref().data();
    for (int p = 0; p < nc; ++p) {
      const T g = self.grad[p] / static_cast<T>(hw);
      T* dst = gx + static_cast<std::size_t>(p) * hw;
      for (int j = 0; j < hw; ++j) dst[j] += g;
    }
  };
  return node;
}

namespace {

struct BilinearTap {
  int idx[4];
  double wt[4];
};

// Returns false when the point falls outside the map's support.
bool bilinear_tap(double fy, double fx, int h, int w, BilinearTap& tap) {
  if (fy < -1.0 || fy > h || fx < -1.0 || fx > w) return false;
  fy = std::max(fy, 0.0);
  fx = std::max(fx, 0.0);
  int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  int y1, x1;
  if (y0 >= h - 1) {
    y0 = y1 = h - 1;
    fy = y0;
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= w - 1) {
    x0 = x1 = w - 1;
    fx = x0;
  } else {
    x1 = x0 + 1;
  }
  const double ly = fy - y0, lx = fx - x0, hy = 1.0 - ly, hx = 1.0 - lx;
  tap.idx[0] = y0 * w + x0;
  tap.idx[1] = y0 * w + x1;
  tap.idx[2] = y1 * w + x0;
  tap.idx[3] = y1 * w + x1;
  tap.wt[0] = hy * hx;
  tap.wt[1] = hy * lx;
  tap.wt[2] = ly * hx;
  tap.wt[3] = ly * lx;
  return true;
}

}  // namespace

template <typename T>
Var<T> roi_align(const Var<T>& fm, std::span<const RoiRef> rois, int pool,
                 double stride) {
  const auto& fs = fm->value.shape();
  require(fs.size() == 4, "roi_align: expected [N,C,h,w]");
  require(pool >= 1 && stride > 0.0, "roi_align: bad pool/stride");
  const int c = fs[1], h = fs[2], w = fs[3];
  const int r = static_cast<int>(rois.size());
  const int pp = pool * pool;
  Tensor<T> out({r, c * pp});
  // One tap per (roi, bin); invalid taps carry a batch index of -1.
  std::vector<BilinearTap> taps(static_cast<std::size_t>(r) * pp);
  std::vector<int> batch(static_cast<std::size_t>(r) * pp, -1);
  for (int i = 0; i < r; ++i) {
    const auto& roi = rois[i];
    require(roi.batch_index >= 0 && roi.batch_index < fs[0], "roi_align: batch index");
    const double bw = roi.box.width() / pool, bh = roi.box.height() / pool;
    for (int py = 0; py < pool; ++py) {
      for (int px = 0; px < pool; ++px) {
        const double iy = roi.box.y1 + (py + 0.5) * bh;
        const double ix = roi.box.x1 + (px + 0.5) * bw;
        const std::size_t t = static_cast<std::size_t>(i) * pp + py * pool + px;
        if (bilinear_tap(iy / stride - 0.5, ix / stride - 0.5, h, w, taps[t])) {
          batch[t] = roi.batch_index;
        }
      }
    }
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < r; ++i) {
    for (int b = 0; b < pp; ++b) {
      const std::size_t t = static_cast<std::size_t>(i) * pp + b;
      if (batch[t] < 0) continue;
      const auto& tap = taps[t];
      const T* base = fm->value.data() + static_cast<std::size_t>(batch[t]) * c * plane;
      for (int ch = 0; ch < c; ++ch) {
        const T* src = base + ch * plane;
        double v = 0.0;
        for (int q = 0; q < 4; ++q) v += tap.wt[q] * src[tap.idx[q]];
        out[static_cast<std::size_t>(i) * c * pp + ch * pp + b] = static_cast<T>(v);
      }
    }
  }
  auto node = make_node<T>(std::move(out), {fm});
  if (!node->requires_grad) return node;
  node->backward = [taps = std::move(taps), batch = std::move(batch), r, c, pp,
                    plane](Node<T>& self) {
    T* gfm = self.parents[0]->grad_ref().data();
    for (int i = 0; i < r; ++i) {
      for (int b = 0; b < pp; ++b) {
        const std::size_t t = static_cast<std::size_t>(i) * pp + b;
        if (batch[t] < 0) continue;
        const auto& tap = taps[t];
        T* base = gfm + static_cast<std::size_t>(batch[t]) * c * plane;
        for (int ch = 0; ch < c; ++ch) {
          const T g = self.grad[static_cast<std::size_t>(i) * c * pp + ch * pp + b];
          T* dst = base + ch * plane;
          for (int q = 0; q < 4; ++q) dst[tap.idx[q]] += static_cast<T>(tap.wt[q] * g);
        }
      }
    }
  };
  return node;
}

// --- dense -----------------------------------------------------------------

template <typename T>
Var<T> linear_impl(const Var<T>& x, const Var<T>& w, const Var<T>& b, bool per_row) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  require(xs.size() == 2 && ws.size() == 2, "linear: expected 2-d input and weight");
  if (xs[1] != ws[1]) {
    throw ShapeError("linear: input width " + std::to_string(xs[1]) +
                     " does not match weight " + shape_string(ws));
  }
  require(b->value.size() == static_cast<std::size_t>(ws[0]), "linear: bias size");
  const int n = xs[0], in = xs[1], o = ws[0];
  Tensor<T> out({n, o});
  MatMap<T> om(out.data(), n, o);
  CMatMap<T> xm(x->value.data(), n, in);
  CMatMap<T> wm(w->value.data(), o, in);
  if (per_row) {
    for (int i = 0; i < n; ++i) om.row(i).noalias() = xm.row(i) * wm.transpose();
  } else {
    om.noalias() = xm * wm.transpose();
  }
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value.data(), o);
  auto node = make_node<T>(std::move(out), {x, w, b});
  if (!node->requires_grad) return node;
  node->backward = [n, in, o](Node<T>& self) {
    auto& xp = self.parents[0];
    auto& wp = self.parents[1];
    auto& bp = self.parents[2];
    CMatMap<T> g(self.grad.data(), n, o);
    if (xp->requires_grad) {
      MatMap<T>(xp->grad_ref().data(), n, in).noalias() +=
          g * CMatMap<T>(wp->value.data(), o, in);
    }
    if (wp->requires_grad) {
      MatMap<T>(wp->grad_ref().data(), o, in).noalias() +=
          g.transpose() * CMatMap<T>(xp->value.data(), n, in);
    }
    if (bp->requires_grad) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bp->grad_ref().data(), o) +=
          g.colwise().sum();
    }
  };
  return node;
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return linear_impl(x, w, b, false);
}

template <typename T>
Var<T> linear_rows(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return linear_impl(x, w, b, true);
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::max(x->value[i], T(0));
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [](Node<T>& self) {
    auto& xp = self.parents[0];
    T* gx = xp->grad_ref().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (xp->value[i] > T(0)) gx[i] += self.grad[i];
    }
  };
  return node;
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x->value[i]);
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [](Node<T>& self) {
    T* gx = self.parents[0]->grad_ref().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.value[i];
      gx[i] += self.grad[i] * (T(1) - y * y);
    }
  };
  return node;
}

template <typename T>
Var<T> scale(const Var<T>& x, double s) {
  Tensor<T> out(x->value.shape());
  const T st = static_cast<T>(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] * st;
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [st](Node<T>& self) {
    T* gx = self.parents[0]->grad_ref().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * st;
  };
  return node;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  same_shape(a, b, "add");
  Tensor<T> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  auto node = make_node<T>(std::move(out), {a, b});
  if (!node->requires_grad) return node;
  node->backward = [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      T* g = p->grad_ref().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  };
  return node;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  same_shape(a, b, "sub");
  Tensor<T> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  auto node = make_node<T>(std::move(out), {a, b});
  if (!node->requires_grad) return node;
  node->backward = [](Node<T>& self) {
    auto& ap = self.parents[0];
    auto& bp = self.parents[1];
    if (ap->requires_grad) {
      T* g = ap->grad_ref().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (bp->requires_grad) {
      T* g = bp->grad_ref().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  };
  return node;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  same_shape(a, b, "mul");
  Tensor<T> out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  auto node = make_node<T>(std::move(out), {a, b});
  if (!node->requires_grad) return node;
  node->backward = [](Node<T>& self) {
    auto& ap = self.parents[0];
    auto& bp = self.parents[1];
    if (ap->requires_grad) {
      T* g = ap->grad_ref().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * bp->value[i];
      }
    }
    if (bp->requires_grad) {
      T* g = bp->grad_ref().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * ap->value[i];
      }
    }
  };
  return node;
}

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int> shape) {
  Tensor<T> out = x->value;
  out.reshape(std::move(shape));
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [](Node<T>& self) {
    T* g = self.parents[0]->grad_ref().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  };
  return node;
}

template <typename T>
Var<T> index_rows(const Var<T>& x, std::span<const int> index) {
  const auto& xs = x->value.shape();
  require(xs.size() == 2, "index_rows: expected [N,D]");
  const int n = xs[0], d = xs[1];
  const int m = static_cast<int>(index.size());
  Tensor<T> out({m, d});
  for (int i = 0; i < m; ++i) {
    if (index[i] < 0 || index[i] >= n) throw IndexError("index_rows: row out of range");
    std::copy_n(x->value.data() + static_cast<std::size_t>(index[i]) * d, d,
                out.data() + static_cast<std::size_t>(i) * d);
  }
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [idx = std::vector<int>(index.begin(), index.end()), d](Node<T>& self) {
    T* g = self.parents[0]->grad_ref().data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = self.grad.data() + i * d;
      T* dst = g + static_cast<std::size_t>(idx[i]) * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  return node;
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int n = parts[0]->value.dim(0);
  std::vector<int> widths;
  int total = 0;
  for (const auto& p : parts) {
    require(p->value.ndim() == 2 && p->value.dim(0) == n, "concat_cols: row mismatch");
    widths.push_back(p->value.dim(1));
    total += widths.back();
  }
  Tensor<T> out({n, total});
  int col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int wk = widths[k];
    for (int i = 0; i < n; ++i) {
      std::copy_n(parts[k]->value.data() + static_cast<std::size_t>(i) * wk, wk,
                  out.data() + static_cast<std::size_t>(i) * total + col);
    }
    col += wk;
  }
  auto node = make_node<T>(std::move(out),
                           std::vector<Var<T>>(parts.begin(), parts.end()));
  if (!node->requires_grad) return node;
  node->backward = [widths = std::move(widths), n, total](Node<T>& self) {
    int col = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      const int wk = widths[k];
      auto& p = self.parents[k];
      if (p->requires_grad) {
        T* g = p->grad_ref().data();
        for (int i = 0; i < n; ++i) {
          const T* src = self.grad.data() + static_cast<std::size_t>(i) * total + col;
          T* dst = g + static_cast<std::size_t>(i) * wk;
          for (int j = 0; j < wk; ++j) dst[j] += src[j];
        }
      }
      col += wk;
    }
  };
  return node;
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int d = parts[0]->value.dim(1);
  int total = 0;
  std::vector<int> rows;
  for (const auto& p : parts) {
    require(p->value.ndim() == 2 && p->value.dim(1) == d, "concat_rows: width mismatch");
    rows.push_back(p->value.dim(0));
    total += rows.back();
  }
  Tensor<T> out({total, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.values().begin(), p->value.values().end(), out.data() + off);
    off += p->value.size();
  }
  auto node = make_node<T>(std::move(out),
                           std::vector<Var<T>>(parts.begin(), parts.end()));
  if (!node->requires_grad) return node;
  node->backward = [](Node<T>& self) {
    std::size_t off = 0;
    for (auto& p : self.parents) {
      const std::size_t sz = p->value.size();
      if (p->requires_grad) {
        T* g = p->grad_ref().data();
        for (std::size_t j = 0; j < sz; ++j) g[j] += self.grad[off + j];
      }
      off += sz;
    }
  };
  return node;
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, int begin, int end) {
  const auto& xs = x->value.shape();
  require(xs.size() == 2 && 0 <= begin && begin < end && end <= xs[1],
          "slice_cols: bad range");
  const int n = xs[0], d = xs[1], w = end - begin;
  Tensor<T> out({n, w});
  for (int i = 0; i < n; ++i) {
    std::copy_n(x->value.data() + static_cast<std::size_t>(i) * d + begin, w,
                out.data() + static_cast<std::size_t>(i) * w);
  }
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [n, d, w, begin](Node<T>& self) {
    T* g = self.parents[0]->grad_ref().data();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < w; ++j) {
        g[static_cast<std::size_t>(i) * d + begin + j] +=
            self.grad[static_cast<std::size_t>(i) * w + j];
      }
    }
  };
  return node;
}

template <typename T>
Var<T> max_rows(const Var<T>& x) {
  const auto& xs = x->value.shape();
  require(xs.size() == 2 && xs[0] >= 1, "max_rows: expected non-empty [N,D]");
  const int n = xs[0], d = xs[1];
  Tensor<T> out({1, d});
  std::vector<int> arg(d, 0);
  for (int j = 0; j < d; ++j) {
    T best = x->value[j];
    for (int i = 1; i < n; ++i) {
      const T v = x->value[static_cast<std::size_t>(i) * d + j];
      if (v > best) {
        best = v;
        arg[j] = i;
      }
    }
    out[j] = best;
  }
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [arg = std::move(arg), d](Node<T>& self) {
    T* g = self.parents[0]->grad_ref().data();
    for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(arg[j]) * d + j] += self.grad[j];
  };
  return node;
}

template <typename T>
Var<T> mean_rows(const Var<T>& x) {
  const auto& xs = x->value.shape();
  require(xs.size() == 2 && xs[0] >= 1, "mean_rows: expected non-empty [N,D]");
  const int n = xs[0], d = xs[1];
  Tensor<T> out({1, d});
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x->value[static_cast<std::size_t>(i) * d + j];
    out[j] = static_cast<T>(s / n);
  }
  auto node = make_node<T>(std::move(out), {x});
  if (!node->requires_grad) return node;
  node->backward = [n, d](Node<T>& self) {
    T* g = self.parents[0]->grad_ref().data();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) {
        g[static_cast<std::size_t>(i) * d + j] += self.grad[j] / static_cast<T>(n);
      }
    }
  };
  return node;
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double s = 0.0;
  for (T v : x->value.values()) s += v;
  auto node = make_node<T>(Tensor<T>({1}, static_cast<T>(s)), {x});
  if (!node->requires_grad) return node;
  node->backward = [](Node<T>& self) {
    auto& g = self.parents[0]->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  };
  return node;
}

// --- losses ----------------------------------------------------------------

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> target,
                             std::span<const double> weight,
                             std::span<const int> allowed) {
  const auto& ls = logits->value.shape();
  require(ls.size() == 2, "softmax_cross_entropy: expected [N,K]");
  const int n = ls[0], k = ls[1];
  require(target.size() == static_cast<std::size_t>(n) &&
              weight.size() == static_cast<std::size_t>(n),
          "softmax_cross_entropy: target/weight size");
  std::vector<int> cols;
  if (allowed.empty()) {
    cols.resize(k);
    std::iota(cols.begin(), cols.end(), 0);
  } else {
    cols.assign(allowed.begin(), allowed.end());
  }
  // Probabilities over the allowed columns, kept for backward.
  std::vector<double> prob(static_cast<std::size_t>(n) * cols.size());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const T* row = logits->value.data() + static_cast<std::size_t>(i) * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (int c : cols) mx = std::max(mx, static_cast<double>(row[c]));
    double z = 0.0;
    for (int c : cols) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    bool found = false;
    for (std::size_t j = 0; j < cols.size(); ++j) {
      prob[static_cast<std::size_t>(i) * cols.size() + j] = std::exp(row[cols[j]] - lse);
      if (cols[j] == target[i]) found = true;
    }
    if (!found) throw IndexError("softmax_cross_entropy: target not in allowed columns");
    if (weight[i] != 0.0) total += weight[i] * (lse - row[target[i]]);
  }
  auto node = make_node<T>(Tensor<T>({1}, static_cast<T>(total)), {logits});
  if (!node->requires_grad) return node;
  node->backward = [prob = std::move(prob), cols = std::move(cols),
                    tgt = std::vector<int>(target.begin(), target.end()),
                    wt = std::vector<double>(weight.begin(), weight.end()), n,
                    k](Node<T>& self) {
    T* g = self.parents[0]->grad_ref().data();
    const double gs = self.grad[0];
    for (int i = 0; i < n; ++i) {
      if (wt[i] == 0.0) continue;
      const double s = gs * wt[i];
      for (std::size_t j = 0; j < cols.size(); ++j) {
        const double p = prob[static_cast<std::size_t>(i) * cols.size() + j];
        g[static_cast<std::size_t>(i) * k + cols[j]] +=
            static_cast<T>(s * (p - (cols[j] == tgt[i] ? 1.0 : 0.0)));
      }
    }
  };
  return node;
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, std::span<const double> target,
                       std::span<const double> weight) {
  const std::size_t n = logits->value.size();
  require(target.size() == n && weight.size() == n, "bce_with_logits: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weight[i] == 0.0) continue;
    const double x = logits->value[i];
    // log(1 + exp(-|x|)) + max(x, 0) - x * t
    total += weight[i] * (std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * target[i]);
  }
  auto node = make_node<T>(Tensor<T>({1}, static_cast<T>(total)), {logits});
  if (!node->requires_grad) return node;
  node->backward = [tgt = std::vector<double>(target.begin(), target.end()),
                    wt = std::vector<double>(weight.begin(), weight.end())](Node<T>& self) {
    auto& lp = self.parents[0];
    T* g = lp->grad_ref().data();
    const double gs = self.grad[0];
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      if (wt[i] == 0.0) continue;
      const double x = lp->value[i];
      const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += static_cast<T>(gs * wt[i] * (sig - tgt[i]));
    }
  };
  return node;
}

template <typename T>
Var<T> smooth_l1_loss(const Var<T>& pred, const Tensor<T>& target,
                      std::span<const double> weight, double beta) {
  require(pred->value.shape() == target.shape(), "smooth_l1_loss: shape mismatch");
  require(beta > 0.0, "smooth_l1_loss: beta must be positive");
  const std::size_t total_n = pred->value.size();
  const std::size_t rows = pred->value.ndim() >= 1 ? pred->value.dim(0) : 1;
  const std::size_t per = rows ? total_n / rows : 0;
  require(weight.size() == total_n || weight.size() == rows, "smooth_l1_loss: weight size");
  const bool per_element = weight.size() == total_n;
  auto w_at = [&](std::size_t i) { return per_element ? weight[i] : weight[i / per]; };
  double total = 0.0;
  std::vector<double> dloss(total_n);
  for (std::size_t i = 0; i < total_n; ++i) {
    const double wi = w_at(i);
    if (wi == 0.0) continue;
    const double d = static_cast<double>(pred->value[i]) - target[i];
    const double ad = std::abs(d);
    total += wi * (ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta);
    dloss[i] = wi * (ad < beta ? d / beta : (d > 0 ? 1.0 : -1.0));
  }
  auto node = make_node<T>(Tensor<T>({1}, static_cast<T>(total)), {pred});
  if (!node->requires_grad) return node;
  node->backward = [dloss = std::move(dloss)](Node<T>& self) {
    T* g = self.parents[0]->grad_ref().data();
    const double gs = self.grad[0];
    for (std::size_t i = 0; i < dloss.size(); ++i) g[i] += static_cast<T>(gs * dloss[i]);
  };
  return node;
}

#define FSDV_INSTANTIATE(T)                                                        \
  template Var<T> constant<T>(Tensor<T>);                                          \
  template Var<T> parameter<T>(Tensor<T>);                                         \
  template void backward<T>(const Var<T>&);                                        \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&);          \
  template Var<T> group_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, int,  \
                                double);                                           \
  template Var<T> max_pool2<T>(const Var<T>&);                                     \
  template Var<T> global_avg_pool<T>(const Var<T>&);                               \
  template Var<T> roi_align<T>(const Var<T>&, std::span<const RoiRef>, int, double); \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);          \
  template Var<T> linear_rows<T>(const Var<T>&, const Var<T>&, const Var<T>&);     \
  template Var<T> relu<T>(const Var<T>&);                                          \
  template Var<T> tanh<T>(const Var<T>&);                                          \
  template Var<T> scale<T>(const Var<T>&, double);                                 \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                            \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                            \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                            \
  template Var<T> reshape<T>(const Var<T>&, std::vector<int>);                     \
  template Var<T> index_rows<T>(const Var<T>&, std::span<const int>);              \
  template Var<T> concat_cols<T>(std::span<const Var<T>>);                         \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                         \
  template Var<T> slice_cols<T>(const Var<T>&, int, int);                          \
  template Var<T> max_rows<T>(const Var<T>&);                                      \
  template Var<T> mean_rows<T>(const Var<T>&);                                     \
  template Var<T> sum<T>(const Var<T>&);                                           \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const int>,    \
                                           std::span<const double>,                \
                                           std::span<const int>);                  \
  template Var<T> bce_with_logits<T>(const Var<T>&, std::span<const double>,       \
                                     std::span<const double>);                     \
  template Var<T> smooth_l1_loss<T>(const Var<T>&, const Tensor<T>&,               \
                                    std::span<const double>, double);

FSDV_INSTANTIATE(float)
FSDV_INSTANTIATE(double)

#undef FSDV_INSTANTIATE

}  // namespace fsdv::nn
