#pragma once

// Tape-free reverse-mode autodiff over tensors. Every op returns a node that
// owns its parents and a backward closure; backward() walks the graph in
// reverse topological order. Ops are instantiated for float (training) and
// double (gradient checks).

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fsdv/geometry.hpp"
#include "fsdv/nn/tensor.hpp"

namespace fsdv::nn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_ref() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

/// While alive on a thread, ops on that thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

template <typename T>
Var<T> constant(Tensor<T> value);

template <typename T>
Var<T> parameter(Tensor<T> value);

/// Seeds d(root)/d(root) = 1 for a one-element root and accumulates into
/// every reachable node with requires_grad.
template <typename T>
void backward(const Var<T>& root);

// --- convolutional ---------------------------------------------------------

/// x [N,C,H,W], w [O,C,k,k], b [O]; stride 1, zero padding k/2.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// Per-sample group normalization with affine gamma/beta [C].
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  int groups, double eps = 1e-5);

/// 2x2 max pooling, stride 2. H and W must be even.
template <typename T>
Var<T> max_pool2(const Var<T>& x);

/// [N,C,H,W] -> [N,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

struct RoiRef {
  int batch_index = 0;
  geom::BoundingBox box;  // image pixels
};

/// Bilinear sampling of one point per bin at the bin center on a P x P grid.
/// fm [N,C,h,w] with cell j centered at (j + 0.5) * stride image pixels.
/// Output [R, C*P*P] laid out channel-major.
template <typename T>
Var<T> roi_align(const Var<T>& fm, std::span<const RoiRef> rois, int pool,
                 double stride);

// --- dense -----------------------------------------------------------------

/// x [N,In], w [Out,In], b [Out] -> [N,Out]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// Same as linear, but each output row is bitwise a function of its input
/// row alone (no cross-row blocking).
template <typename T>
Var<T> linear_rows(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> tanh(const Var<T>& x);

template <typename T>
Var<T> scale(const Var<T>& x, double s);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int> shape);

/// Rows of x [N,D] gathered by index -> [M,D].
template <typename T>
Var<T> index_rows(const Var<T>& x, std::span<const int> index);

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts);

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts);

template <typename T>
Var<T> slice_cols(const Var<T>& x, int begin, int end);

/// [N,D] -> [1,D] coordinatewise max; ties resolve to the first row.
template <typename T>
Var<T> max_rows(const Var<T>& x);

/// [N,D] -> [1,D]
template <typename T>
Var<T> mean_rows(const Var<T>& x);

/// Sum of all elements -> [1].
template <typename T>
Var<T> sum(const Var<T>& x);

// --- losses (all return a [1] scalar) --------------------------------------

/// sum_i weight_i * CE(logits_i, target_i). When `allowed` is non-empty only
/// those columns take part in the softmax.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> target,
                             std::span<const double> weight,
                             std::span<const int> allowed = {});

/// sum_i weight_i * BCE(sigmoid(logit_i), target_i); logits [N] or [N,1].
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, std::span<const double> target,
                       std::span<const double> weight);

/// sum_ij weight_ij * smooth_l1(pred_ij - target_ij); weight may be
/// per-row (size N) or per-element (size N*M).
template <typename T>
Var<T> smooth_l1_loss(const Var<T>& pred, const Tensor<T>& target,
                      std::span<const double> weight, double beta = 1.0);

}  // namespace fsdv::nn
