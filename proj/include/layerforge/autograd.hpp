#pragma once

// Minimal reverse-mode autodiff over float tensors.
//
// A Var is a shared node holding a value, a lazily allocated gradient and a
// closure that pushes its gradient into its parents. Graphs are built only
// when some input requires a gradient and recording is enabled; otherwise
// ops return bare constants and nothing is retained.

#include <functional>
#include <memory>
#include <vector>

#include "layerforge/tensor.hpp"

namespace layerforge::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(const Tensor& grad)> backward_fn;

  // Zero-initialized on first use.
  Tensor& grad_buffer();
  bool has_grad() const { return !grad.empty(); }
};

bool grad_enabled();

// Disables graph construction in its scope (sampling, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Generic node constructor for custom ops. The closure is dropped when no
// parent needs a gradient.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(const Tensor& grad)> backward_fn);

// Seeds d(root)/d(root) = 1 for a scalar root and runs every closure once in
// reverse topological order.
void backward(const Var& root);

Var detach(const Var& x);

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var silu(const Var& x);

// x[N, in] * w[in, out] + b[out]; b may be null.
Var linear(const Var& x, const Var& w, const Var& b);

// x[N, C, H, W] + v[N, C] broadcast over space.
Var add_channel_vector(const Var& x, const Var& v);

// w[Cout, Cin, k, k], b[Cout] (may be null).
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);

// Nearest-neighbour 2x upsampling of [N, C, H, W].
Var upsample2x(const Var& x);

// Concatenate [N, C1, ...] and [N, C2, ...] along channels.
Var concat_channels(const Var& a, const Var& b);

// Rows along the leading dimension.
Var take_rows(const Var& x, const std::vector<int>& index);
Var concat_rows(const std::vector<Var>& parts);

// table[V, D] looked up at ids -> [ids.size(), D].
Var embedding(const Var& table, const std::vector<int>& ids);

// sum_i weight[i] * (pred[i] - target[i])^2 as a scalar; target and weight are constants.
Var weighted_square_error(const Var& pred, const Tensor& target, const Tensor& weight);

Var sum(const Var& x);

}  // namespace layerforge::ag
