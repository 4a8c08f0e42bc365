#include "layerforge/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "layerforge/errors.hpp"
#include "layerforge/kernels.hpp"

namespace layerforge::ag {

namespace {

thread_local bool g_grad_enabled = true;

constexpr std::size_t kParallelMin = 1 << 15;

bool needs(const Var& v) { return v && v->requires_grad; }

void require_same(const Var& a, const Var& b, const char* op) {
  if (a->value.shape() != b->value.shape())
    throw DimensionError(std::string(op) + ": shape " + shape_string(a->value.shape()) + " vs " +
                         shape_string(b->value.shape()));
}

void require_rank(const Var& x, int rank, const char* op) {
  if (x->value.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x->value.shape()));
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape());
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Tensor value) {
  auto n = constant(std::move(value));
  n->requires_grad = true;
  return n;
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(const Tensor& grad)> backward_fn) {
  auto n = constant(std::move(value));
  if (!g_grad_enabled) return n;
  bool any = false;
  for (const auto& p : parents) any = any || needs(p);
  if (!any) return n;
  n->requires_grad = true;
  n->parents = std::move(parents);
  n->backward_fn = std::move(backward_fn);
  return n;
}

void backward(const Var& root) {
  if (root->value.size() != 1) throw DimensionError("backward needs a scalar root");
  if (!root->requires_grad) return;
  // Iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(n->grad);
  }
}

Var detach(const Var& x) { return constant(x->value); }

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor y = a->value;
  y.add_(b->value);
  return make_node(std::move(y), {a, b}, [a, b](const Tensor& g) {
    if (needs(a)) a->grad_buffer().add_(g);
    if (needs(b)) b->grad_buffer().add_(g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor y = a->value;
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) y[i] -= b->value[i];
  return make_node(std::move(y), {a, b}, [a, b](const Tensor& g) {
    if (needs(a)) a->grad_buffer().add_(g);
    if (needs(b)) {
      Tensor& gb = b->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor y = a->value;
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) y[i] *= b->value[i];
  return make_node(std::move(y), {a, b}, [a, b](const Tensor& g) {
    if (needs(a)) {
      Tensor& ga = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b->value[i];
    }
    if (needs(b)) {
      Tensor& gb = b->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, float s) {
  Tensor y = a->value;
  y.scale_(s);
  return make_node(std::move(y), {a}, [a, s](const Tensor& g) {
    Tensor& ga = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var silu(const Var& x) {
  const std::size_t n = x->value.size();
  Tensor y(x->value.shape());
  const float* xv = x->value.data();
  float* yv = y.data();
#pragma omp parallel for schedule(static) if (n > kParallelMin)
  for (std::size_t i = 0; i < n; ++i) yv[i] = xv[i] / (1.0f + std::exp(-xv[i]));
  return make_node(std::move(y), {x}, [x](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    const float* xv = x->value.data();
    const std::size_t n = g.size();
#pragma omp parallel for schedule(static) if (n > kParallelMin)
    for (std::size_t i = 0; i < n; ++i) {
      const float s = 1.0f / (1.0f + std::exp(-xv[i]));
      gx[i] += g[i] * s * (1.0f + xv[i] * (1.0f - s));
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  using kernels::Trans;
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const int n = x->value.dim(0), in = x->value.dim(1), out = w->value.dim(1);
  if (w->value.dim(0) != in) throw DimensionError("linear: weight rows " + std::to_string(w->value.dim(0)) + " != " + std::to_string(in));
  if (b && (b->value.rank() != 1 || b->value.dim(0) != out)) throw DimensionError("linear: bias length mismatch");
  Tensor y({n, out});
  if (b)
    for (int r = 0; r < n; ++r) std::copy(b->value.data(), b->value.data() + out, y.data() + static_cast<std::size_t>(r) * out);
  kernels::gemm<float>(Trans::No, Trans::No, n, out, in, 1.0f, x->value.data(), in, w->value.data(), out, b ? 1.0f : 0.0f,
                       y.data(), out);
  return make_node(std::move(y), {x, w, b}, [x, w, b, n, in, out](const Tensor& g) {
    if (needs(x))
      kernels::gemm<float>(Trans::No, Trans::Yes, n, in, out, 1.0f, g.data(), out, w->value.data(), out, 1.0f,
                           x->grad_buffer().data(), in);
    if (needs(w))
      kernels::gemm<float>(Trans::Yes, Trans::No, in, out, n, 1.0f, x->value.data(), in, g.data(), out, 1.0f,
                           w->grad_buffer().data(), out);
    if (needs(b)) {
      Tensor& gb = b->grad_buffer();
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < out; ++c) gb[c] += g[static_cast<std::size_t>(r) * out + c];
    }
  });
}

Var add_channel_vector(const Var& x, const Var& v) {
  require_rank(x, 4, "add_channel_vector");
  const int n = x->value.dim(0), c = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
  if (v->value.shape() != Shape{n, c}) throw DimensionError("add_channel_vector: vector must be [N, C]");
  Tensor y = x->value;
  for (int i = 0; i < n * c; ++i) {
    float* p = y.data() + static_cast<std::size_t>(i) * hw;
    const float s = v->value[i];
    for (int j = 0; j < hw; ++j) p[j] += s;
  }
  return make_node(std::move(y), {x, v}, [x, v, n, c, hw](const Tensor& g) {
    if (needs(x)) x->grad_buffer().add_(g);
    if (needs(v)) {
      Tensor& gv = v->grad_buffer();
      for (int i = 0; i < n * c; ++i) {
        const float* p = g.data() + static_cast<std::size_t>(i) * hw;
        float s = 0.0f;
        for (int j = 0; j < hw; ++j) s += p[j];
        gv[i] += s;
      }
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  kernels::ConvGeometry geo;
  geo.batch = x->value.dim(0);
  geo.in_channels = x->value.dim(1);
  geo.height = x->value.dim(2);
  geo.width = x->value.dim(3);
  geo.out_channels = w->value.dim(0);
  geo.kernel = w->value.dim(2);
  geo.stride = stride;
  geo.pad = pad;
  if (w->value.dim(1) != geo.in_channels || w->value.dim(3) != geo.kernel)
    throw DimensionError("conv2d: weight " + shape_string(w->value.shape()) + " does not fit input " +
                         shape_string(x->value.shape()));
  if (b && b->value.size() != static_cast<std::size_t>(geo.out_channels)) throw DimensionError("conv2d: bias length mismatch");
  Tensor y({geo.batch, geo.out_channels, geo.out_height(), geo.out_width()});
  kernels::conv2d_forward(geo, x->value.data(), w->value.data(), b ? b->value.data() : nullptr, y.data());
  return make_node(std::move(y), {x, w, b}, [x, w, b, geo](const Tensor& g) {
    kernels::conv2d_backward(geo, x->value.data(), w->value.data(), g.data(),
                             needs(x) ? x->grad_buffer().data() : nullptr, needs(w) ? w->grad_buffer().data() : nullptr,
                             needs(b) ? b->grad_buffer().data() : nullptr);
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
  const Shape& s = x->value.shape();
  if (s.size() < 2) throw DimensionError("group_norm: need at least [N, C]");
  const int n = s[0], c = s[1];
  const int hw = static_cast<int>(x->value.size() / (static_cast<std::size_t>(n) * c));
  if (groups < 1 || c % groups != 0) throw DimensionError("group_norm: channels not divisible by groups");
  if (gamma->value.size() != static_cast<std::size_t>(c) || beta->value.size() != static_cast<std::size_t>(c))
    throw DimensionError("group_norm: affine parameters must have C entries");
  Tensor y(s);
  auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n) * groups);
  auto rstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n) * groups);
  kernels::group_norm_forward(n, c, hw, groups, x->value.data(), gamma->value.data(), beta->value.data(), eps, y.data(),
                              mean->data(), rstd->data());
  return make_node(std::move(y), {x, gamma, beta}, [x, gamma, beta, n, c, hw, groups, mean, rstd](const Tensor& g) {
    Tensor scratch;
    float* dx = nullptr;
    if (needs(x)) dx = x->grad_buffer().data();
    float* dg = needs(gamma) ? gamma->grad_buffer().data() : nullptr;
    float* db = needs(beta) ? beta->grad_buffer().data() : nullptr;
    // The kernel wants every output pointer; park unneeded ones in scratch.
    Tensor dg_tmp, db_tmp;
    if (!dx) {
      scratch = Tensor(x->value.shape());
      dx = scratch.data();
    }
    if (!dg) {
      dg_tmp = Tensor({c});
      dg = dg_tmp.data();
    }
    if (!db) {
      db_tmp = Tensor({c});
      db = db_tmp.data();
    }
    kernels::group_norm_backward(n, c, hw, groups, x->value.data(), gamma->value.data(), mean->data(), rstd->data(),
                                 g.data(), dx, dg, db);
  });
}

Var upsample2x(const Var& x) {
  require_rank(x, 4, "upsample2x");
  const int nc = x->value.dim(0) * x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  Tensor y({x->value.dim(0), x->value.dim(1), 2 * h, 2 * w});
  for (int i = 0; i < nc; ++i) {
    const float* src = x->value.data() + static_cast<std::size_t>(i) * h * w;
    float* dst = y.data() + static_cast<std::size_t>(i) * 4 * h * w;
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx) dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
  }
  return make_node(std::move(y), {x}, [x, nc, h, w](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    for (int i = 0; i < nc; ++i) {
      const float* src = g.data() + static_cast<std::size_t>(i) * 4 * h * w;
      float* dst = gx.data() + static_cast<std::size_t>(i) * h * w;
      for (int yy = 0; yy < 2 * h; ++yy)
        for (int xx = 0; xx < 2 * w; ++xx) dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || sa[0] != sb[0] || !std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2))
    throw DimensionError("concat_channels: " + shape_string(sa) + " vs " + shape_string(sb));
  const int n = sa[0];
  const std::size_t ba = a->value.size() / n, bb = b->value.size() / n;
  Shape so = sa;
  so[1] += sb[1];
  Tensor y(so);
  for (int i = 0; i < n; ++i) {
    std::copy_n(a->value.data() + i * ba, ba, y.data() + i * (ba + bb));
    std::copy_n(b->value.data() + i * bb, bb, y.data() + i * (ba + bb) + ba);
  }
  return make_node(std::move(y), {a, b}, [a, b, n, ba, bb](const Tensor& g) {
    for (int i = 0; i < n; ++i) {
      const float* src = g.data() + i * (ba + bb);
      if (needs(a)) {
        float* d = a->grad_buffer().data() + i * ba;
        for (std::size_t j = 0; j < ba; ++j) d[j] += src[j];
      }
      if (needs(b)) {
        float* d = b->grad_buffer().data() + i * bb;
        for (std::size_t j = 0; j < bb; ++j) d[j] += src[ba + j];
      }
    }
  });
}

Var take_rows(const Var& x, const std::vector<int>& index) {
  const Shape& s = x->value.shape();
  if (s.empty()) throw DimensionError("take_rows: scalar input");
  const std::size_t row = x->value.size() / s[0];
  Shape so = s;
  so[0] = static_cast<int>(index.size());
  Tensor y(so);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= s[0]) throw DimensionError("take_rows: index out of range");
    std::copy_n(x->value.data() + index[i] * row, row, y.data() + i * row);
  }
  return make_node(std::move(y), {x}, [x, index, row](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) {
      float* d = gx.data() + index[i] * row;
      const float* src = g.data() + i * row;
      for (std::size_t j = 0; j < row; ++j) d[j] += src[j];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape so = parts[0]->value.shape();
  so[0] = 0;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    if (s.size() != so.size() || !std::equal(s.begin() + 1, s.end(), so.begin() + 1))
      throw DimensionError("concat_rows: trailing shape mismatch");
    so[0] += s[0];
  }
  Tensor y(so);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p->value.data(), p->value.size(), y.data() + off);
    off += p->value.size();
  }
  return make_node(std::move(y), parts, [parts](const Tensor& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (needs(p)) {
        float* d = p->grad_buffer().data();
        for (std::size_t j = 0; j < p->value.size(); ++j) d[j] += g[off + j];
      }
      off += p->value.size();
    }
  });
}

Var embedding(const Var& table, const std::vector<int>& ids) {
  require_rank(table, 2, "embedding");
  const int vocab = table->value.dim(0), d = table->value.dim(1);
  Tensor y({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) throw ValidationError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary");
    std::copy_n(table->value.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
  }
  return make_node(std::move(y), {table}, [table, ids, d](const Tensor& g) {
    Tensor& gt = table->grad_buffer();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < d; ++j) gt[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
  });
}

Var weighted_square_error(const Var& pred, const Tensor& target, const Tensor& weight) {
  if (pred->value.shape() != target.shape() || target.shape() != weight.shape())
    throw DimensionError("weighted_square_error: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double e = static_cast<double>(pred->value[i]) - target[i];
    s += weight[i] * e * e;
  }
  return make_node(Tensor({1}, {static_cast<float>(s)}), {pred}, [pred, target, weight](const Tensor& g) {
    Tensor& gp = pred->grad_buffer();
    const float g0 = g[0];
    for (std::size_t i = 0; i < target.size(); ++i) gp[i] += g0 * 2.0f * weight[i] * (pred->value[i] - target[i]);
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (float v : x->value.values()) s += v;
  return make_node(Tensor({1}, {static_cast<float>(s)}), {x}, [x](const Tensor& g) {
    Tensor& gx = x->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

}  // namespace layerforge::ag
