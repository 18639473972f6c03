#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "arcmdl/tensor.hpp"

namespace arcmdl {

// Reverse-mode tape. Nodes are appended in forward order, so walking the
// node list backwards is a valid topological order. A tape is confined to a
// single solve step on a single thread.
template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const;
  const Tensor<T>& grad() const;
  const Shape& shape() const { return value().shape; }
  int64_t numel() const { return value().numel(); }
};

template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::function<void(Tape&)> backward;
  };

  Tape() { nodes_.reserve(16384); }

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, false, nullptr});
    return Var<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  Var<T> make(Tensor<T> value, bool requires_grad, std::function<void(Tape&)> backward) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, false, std::move(backward)});
    return Var<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  Node& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }

  Tensor<T>& grad_buffer(int32_t id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_ready) {
      n.grad = Tensor<T>(n.value.shape);
      n.grad_ready = true;
    }
    return n.grad;
  }

  bool wants_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  void zero_grads() {
    for (Node& n : nodes_) {
      n.grad = Tensor<T>{};
      n.grad_ready = false;
    }
  }

  // Accumulates adjoints into every node reachable from `root`.
  void backward(const Var<T>& root) {
    check(root.tape == this, "backward: var from another tape");
    check(node(root.id).value.numel() == 1, "backward: root must be scalar");
    grad_buffer(root.id).data[0] = T(1);
    for (int32_t i = static_cast<int32_t>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad_ready && n.backward) n.backward(*this);
    }
  }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->node(id).value;
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
  return tape->node(id).grad;
}

namespace ad {

template <typename T>
void accumulate(Tape<T>& tp, int32_t id, const Tensor<T>& g) {
  if (!tp.wants_grad(id) && !tp.node(id).backward) return;
  Tensor<T>& buf = tp.grad_buffer(id);
  for (size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += g.data[i];
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  check(av.shape == bv.shape, "add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out;
  out.shape = av.shape;
  out.data.resize(av.data.size());
  for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t aid = a.id, bid = b.id, yid = y.id;
  tp.node(yid).backward = [aid, bid, yid](Tape<T>& t) {
    const Tensor<T>& g = t.node(yid).grad;
    accumulate(t, aid, g);
    accumulate(t, bid, g);
  };
  return y;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  check(av.shape == bv.shape, "sub: shape mismatch");
  Tensor<T> out;
  out.shape = av.shape;
  out.data.resize(av.data.size());
  for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = av.data[i] - bv.data[i];
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t aid = a.id, bid = b.id, yid = y.id;
  tp.node(yid).backward = [aid, bid, yid](Tape<T>& t) {
    const Tensor<T>& g = t.node(yid).grad;
    accumulate(t, aid, g);
    if (!t.wants_grad(bid) && !t.node(bid).backward) return;
    Tensor<T>& gb = t.grad_buffer(bid);
    for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] -= g.data[i];
  };
  return y;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  check(av.shape == bv.shape, "mul: shape mismatch");
  Tensor<T> out;
  out.shape = av.shape;
  out.data.resize(av.data.size());
  for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t aid = a.id, bid = b.id, yid = y.id;
  tp.node(yid).backward = [aid, bid, yid](Tape<T>& t) {
    const Tensor<T>& g = t.node(yid).grad;
    const Tensor<T>& av2 = t.node(aid).value;
    const Tensor<T>& bv2 = t.node(bid).value;
    if (t.wants_grad(aid) || t.node(aid).backward) {
      Tensor<T>& ga = t.grad_buffer(aid);
      for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[i] * bv2.data[i];
    }
    if (t.wants_grad(bid) || t.node(bid).backward) {
      Tensor<T>& gb = t.grad_buffer(bid);
      for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] += g.data[i] * av2.data[i];
    }
  };
  return y;
}

// y = k*x + c, scalars k and c.
template <typename T>
Var<T> affine(Var<T> x, double k, double c) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  for (size_t i = 0; i < xv.data.size(); ++i)
    out.data[i] = static_cast<T>(k) * xv.data[i] + static_cast<T>(c);
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, k](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += static_cast<T>(k) * g.data[i];
  };
  return y;
}

template <typename T>
Var<T> scale(Var<T> x, double k) {
  return affine(x, k, 0.0);
}

#define ARCMDL_UNARY(NAME, FWD, BWD)                                              \
  template <typename T>                                                           \
  Var<T> NAME(Var<T> x) {                                                         \
    Tape<T>& tp = *x.tape;                                                        \
    const Tensor<T>& xv = x.value();                                              \
    Tensor<T> out;                                                                \
    out.shape = xv.shape;                                                         \
    out.data.resize(xv.data.size());                                              \
    for (size_t i = 0; i < xv.data.size(); ++i) {                                 \
      const T xi = xv.data[i];                                                    \
      out.data[i] = FWD;                                                          \
    }                                                                             \
    Var<T> y = tp.make(std::move(out), true, nullptr);                            \
    const int32_t xid = x.id, yid = y.id;                                         \
    tp.node(yid).backward = [xid, yid](Tape<T>& t) {                              \
      if (!t.wants_grad(xid) && !t.node(xid).backward) return;                    \
      const Tensor<T>& g = t.node(yid).grad;                                      \
      const Tensor<T>& xv2 = t.node(xid).value;                                   \
      const Tensor<T>& yv2 = t.node(yid).value;                                   \
      (void)xv2;                                                                  \
      (void)yv2;                                                                  \
      Tensor<T>& gx = t.grad_buffer(xid);                                         \
      for (size_t i = 0; i < gx.data.size(); ++i) {                               \
        const T xi = xv2.data[i];                                                 \
        const T yi = yv2.data[i];                                                 \
        (void)xi;                                                                 \
        (void)yi;                                                                 \
        gx.data[i] += g.data[i] * (BWD);                                          \
      }                                                                           \
    };                                                                            \
    return y;                                                                     \
  }

ARCMDL_UNARY(exp, std::exp(xi), yi)
ARCMDL_UNARY(log, std::log(xi), T(1) / xi)
ARCMDL_UNARY(sqrt, std::sqrt(xi), T(0.5) / yi)
ARCMDL_UNARY(reciprocal, T(1) / xi, -yi * yi)
ARCMDL_UNARY(sigmoid, T(1) / (T(1) + std::exp(-xi)), yi * (T(1) - yi))

#undef ARCMDL_UNARY

template <typename T>
Var<T> silu(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  for (size_t i = 0; i < xv.data.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-xv.data[i]));
    out.data[i] = xv.data[i] * s;
  }
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    const Tensor<T>& xv2 = t.node(xid).value;
    Tensor<T>& gx = t.grad_buffer(xid);
    for (size_t i = 0; i < gx.data.size(); ++i) {
      const T xi = xv2.data[i];
      const T s = T(1) / (T(1) + std::exp(-xi));
      gx.data[i] += g.data[i] * s * (T(1) + xi * (T(1) - s));
    }
  };
  return y;
}

// ---------------------------------------------------------------- reductions

inline AxisList sorted_axes(AxisList axes) {
  std::sort(axes.begin(), axes.end());
  return axes;
}

template <typename T>
Var<T> sum_reduce(Var<T> x, AxisList axes) {
  Tape<T>& tp = *x.tape;
  axes = sorted_axes(std::move(axes));
  const Tensor<T>& xv = x.value();
  AxisReducer red(xv.shape, axes);
  Tensor<T> out(drop_axes(xv.shape, axes));
  red.for_each([&](int64_t i, int64_t o) { out[o] += xv[i]; });
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, red](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    red.for_each([&](int64_t i, int64_t o) { gx[i] += g[o]; });
  };
  return y;
}

template <typename T>
Var<T> mean_reduce(Var<T> x, AxisList axes) {
  Tape<T>& tp = *x.tape;
  axes = sorted_axes(std::move(axes));
  const Tensor<T>& xv = x.value();
  AxisReducer red(xv.shape, axes);
  Tensor<T> out(drop_axes(xv.shape, axes));
  const int64_t k = red.group_size;
  if (k > 0) {
    red.for_each([&](int64_t i, int64_t o) { out[o] += xv[i]; });
    for (auto& v : out.data) v /= static_cast<T>(k);
  }
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, red, k](Tape<T>& t) {
    if (k == 0) return;
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    const T inv = T(1) / static_cast<T>(k);
    red.for_each([&](int64_t i, int64_t o) { gx[i] += g[o] * inv; });
  };
  return y;
}

// Gradient is routed to the first maximal element in canonical index order.
template <typename T>
Var<T> max_reduce(Var<T> x, AxisList axes) {
  Tape<T>& tp = *x.tape;
  axes = sorted_axes(std::move(axes));
  const Tensor<T>& xv = x.value();
  AxisReducer red(xv.shape, axes);
  Tensor<T> out(drop_axes(xv.shape, axes), std::numeric_limits<T>::lowest());
  std::vector<int64_t> argmax(static_cast<size_t>(out.numel()), -1);
  red.for_each([&](int64_t i, int64_t o) {
    if (argmax[static_cast<size_t>(o)] < 0 || xv[i] > out[o]) {
      out[o] = xv[i];
      argmax[static_cast<size_t>(o)] = i;
    }
  });
  if (red.group_size == 0)
    for (auto& v : out.data) v = T(0);
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, argmax](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    for (int64_t o = 0; o < g.numel(); ++o)
      if (argmax[static_cast<size_t>(o)] >= 0) gx[argmax[static_cast<size_t>(o)]] += g[o];
  };
  return y;
}

template <typename T>
Var<T> min_reduce(Var<T> x, AxisList axes) {
  return scale(max_reduce(scale(x, -1.0), std::move(axes)), -1.0);
}

template <typename T>
Var<T> logsumexp(Var<T> x, AxisList axes) {
  Tape<T>& tp = *x.tape;
  axes = sorted_axes(std::move(axes));
  const Tensor<T>& xv = x.value();
  AxisReducer red(xv.shape, axes);
  const Shape out_shape = drop_axes(xv.shape, axes);
  Tensor<T> mx(out_shape, std::numeric_limits<T>::lowest());
  red.for_each([&](int64_t i, int64_t o) {
    if (xv[i] > mx[o]) mx[o] = xv[i];
  });
  Tensor<T> out(out_shape);
  red.for_each([&](int64_t i, int64_t o) { out[o] += std::exp(xv[i] - mx[o]); });
  for (int64_t o = 0; o < out.numel(); ++o) out[o] = mx[o] + std::log(out[o]);
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, red](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    const Tensor<T>& yv = t.node(yid).value;
    const Tensor<T>& xv2 = t.node(xid).value;
    Tensor<T>& gx = t.grad_buffer(xid);
    red.for_each([&](int64_t i, int64_t o) { gx[i] += g[o] * std::exp(xv2[i] - yv[o]); });
  };
  return y;
}

template <typename T>
Var<T> softmax(Var<T> x, AxisList axes) {
  Tape<T>& tp = *x.tape;
  axes = sorted_axes(std::move(axes));
  check(!axes.empty(), "softmax: empty axis set");
  const Tensor<T>& xv = x.value();
  AxisReducer red(xv.shape, axes);
  const Shape group_shape = drop_axes(xv.shape, axes);
  Tensor<T> mx(group_shape, std::numeric_limits<T>::lowest());
  red.for_each([&](int64_t i, int64_t o) {
    if (xv[i] > mx[o]) mx[o] = xv[i];
  });
  Tensor<T> denom(group_shape);
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  red.for_each([&](int64_t i, int64_t o) {
    out[i] = std::exp(xv[i] - mx[o]);
    denom[o] += out[i];
  });
  red.for_each([&](int64_t i, int64_t o) { out[i] /= denom[o]; });
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, red, group_shape](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    const Tensor<T>& yv = t.node(yid).value;
    Tensor<T> dot(group_shape);
    red.for_each([&](int64_t i, int64_t o) { dot[o] += g[i] * yv[i]; });
    Tensor<T>& gx = t.grad_buffer(xid);
    red.for_each([&](int64_t i, int64_t o) { gx[i] += yv[i] * (g[i] - dot[o]); });
  };
  return y;
}

// --------------------------------------------------------------- axis scans

struct LineWalk {
  int64_t len = 0, inner = 1, outer = 1;
  explicit LineWalk(const Shape& shape, int axis) {
    len = shape[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  }
  int64_t start(int64_t o, int64_t in) const { return o * len * inner + in; }
};

template <typename T>
Var<T> cumsum(Var<T> x, int axis, bool reverse = false) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  LineWalk w(xv.shape, axis);
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  for (int64_t o = 0; o < w.outer; ++o)
    for (int64_t in = 0; in < w.inner; ++in) {
      const int64_t s = w.start(o, in);
      T run = T(0);
      for (int64_t k = 0; k < w.len; ++k) {
        const int64_t kk = reverse ? w.len - 1 - k : k;
        run += xv[s + kk * w.inner];
        out[s + kk * w.inner] = run;
      }
    }
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, w, reverse](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    for (int64_t o = 0; o < w.outer; ++o)
      for (int64_t in = 0; in < w.inner; ++in) {
        const int64_t s = w.start(o, in);
        T run = T(0);
        for (int64_t k = 0; k < w.len; ++k) {
          const int64_t kk = reverse ? k : w.len - 1 - k;  // opposite scan
          run += g[s + kk * w.inner];
          gx[s + kk * w.inner] += run;
        }
      }
  };
  return y;
}

// Running max along `axis`. With reverse=true the scan starts from the far
// end. Ties route the gradient to the earliest element in scan order.
template <typename T>
Var<T> cummax(Var<T> x, int axis, bool reverse = false) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  LineWalk w(xv.shape, axis);
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  std::vector<int64_t> arg(xv.data.size());
  for (int64_t o = 0; o < w.outer; ++o)
    for (int64_t in = 0; in < w.inner; ++in) {
      const int64_t s = w.start(o, in);
      T run = std::numeric_limits<T>::lowest();
      int64_t amax = -1;
      for (int64_t k = 0; k < w.len; ++k) {
        const int64_t kk = reverse ? w.len - 1 - k : k;
        const int64_t idx = s + kk * w.inner;
        if (amax < 0 || xv[idx] > run) {
          run = xv[idx];
          amax = idx;
        }
        out[idx] = run;
        arg[static_cast<size_t>(idx)] = amax;
      }
    }
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  auto arg_shared = std::make_shared<std::vector<int64_t>>(std::move(arg));
  tp.node(yid).backward = [xid, yid, arg_shared](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    for (int64_t i = 0; i < g.numel(); ++i) gx[(*arg_shared)[static_cast<size_t>(i)]] += g[i];
  };
  return y;
}

// Shift by one along `axis` with zero fill. toward_end=true means
// out[k] = in[k-1] (contents move to higher indices).
template <typename T>
Var<T> shift1(Var<T> x, int axis, bool toward_end) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  LineWalk w(xv.shape, axis);
  Tensor<T> out(xv.shape);
  for (int64_t o = 0; o < w.outer; ++o)
    for (int64_t in = 0; in < w.inner; ++in) {
      const int64_t s = w.start(o, in);
      for (int64_t k = 0; k < w.len; ++k) {
        const int64_t src = toward_end ? k - 1 : k + 1;
        if (src >= 0 && src < w.len) out[s + k * w.inner] = xv[s + src * w.inner];
      }
    }
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, w, toward_end](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    for (int64_t o = 0; o < w.outer; ++o)
      for (int64_t in = 0; in < w.inner; ++in) {
        const int64_t s = w.start(o, in);
        for (int64_t k = 0; k < w.len; ++k) {
          const int64_t src = toward_end ? k - 1 : k + 1;
          if (src >= 0 && src < w.len) gx[s + src * w.inner] += g[s + k * w.inner];
        }
      }
  };
  return y;
}

// ------------------------------------------------------- shape manipulation

template <typename T>
Var<T> reshape(Var<T> x, Shape new_shape) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  check(shape_numel(new_shape) == xv.numel(), "reshape: numel mismatch");
  Tensor<T> out;
  out.shape = std::move(new_shape);
  out.data = xv.data;
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += g.data[i];
  };
  return y;
}

// Insert broadcast axes: `inserted` lists (output axis position, extent) in
// ascending position order. The adjoint sums over the inserted axes.
template <typename T>
Var<T> broadcast_insert(Var<T> x, std::vector<std::pair<int, int64_t>> inserted) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  const Shape out_shape = insert_axes(xv.shape, inserted);
  AxisList axes;
  for (const auto& [pos, extent] : inserted) axes.push_back(pos);
  AxisReducer red(out_shape, axes);  // maps out flat -> x flat
  Tensor<T> out(out_shape);
  red.for_each([&](int64_t i, int64_t o) { out[i] = xv[o]; });
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, red](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    red.for_each([&](int64_t i, int64_t o) { gx[o] += g[i]; });
  };
  return y;
}

template <typename T>
Var<T> concat(std::vector<Var<T>> parts, int axis) {
  check(!parts.empty(), "concat: no parts");
  Tape<T>& tp = *parts[0].tape;
  const Shape& ref = parts[0].value().shape;
  int64_t total = 0;
  for (const Var<T>& p : parts) {
    const Shape& s = p.value().shape;
    check(s.size() == ref.size(), "concat: rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis) check(s[i] == ref[i], "concat: shape mismatch");
    total += s[static_cast<size_t>(axis)];
  }
  Shape out_shape = ref;
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor<T> out(out_shape);
  LineWalk wo(out_shape, axis);
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Var<T>& p : parts) {
    offsets.push_back(off);
    const Tensor<T>& pv = p.value();
    LineWalk wp(pv.shape, axis);
    for (int64_t o = 0; o < wp.outer; ++o)
      for (int64_t k = 0; k < wp.len; ++k)
        for (int64_t in = 0; in < wp.inner; ++in)
          out[wo.start(o, in) + (off + k) * wo.inner] = pv[wp.start(o, in) + k * wp.inner];
    off += wp.len;
  }
  Var<T> y = tp.make(std::move(out), true, nullptr);
  std::vector<int32_t> ids;
  for (const Var<T>& p : parts) ids.push_back(p.id);
  const int32_t yid = y.id;
  tp.node(yid).backward = [ids, offsets, yid, axis](Tape<T>& t) {
    const Tensor<T>& g = t.node(yid).grad;
    LineWalk wo(g.shape, axis);
    for (size_t pi = 0; pi < ids.size(); ++pi) {
      const int32_t xid = ids[pi];
      if (!t.wants_grad(xid) && !t.node(xid).backward) continue;
      Tensor<T>& gx = t.grad_buffer(xid);
      LineWalk wp(gx.shape, axis);
      const int64_t off = offsets[pi];
      for (int64_t o = 0; o < wp.outer; ++o)
        for (int64_t k = 0; k < wp.len; ++k)
          for (int64_t in = 0; in < wp.inner; ++in)
            gx[wp.start(o, in) + k * wp.inner] += g[wo.start(o, in) + (off + k) * wo.inner];
    }
  };
  return y;
}

// Contiguous sub-range along one axis (keeps the axis).
template <typename T>
Var<T> narrow(Var<T> x, int axis, int64_t start, int64_t len) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  check(start >= 0 && start + len <= xv.shape[static_cast<size_t>(axis)], "narrow: range out of bounds");
  LineWalk w(xv.shape, axis);
  Shape out_shape = xv.shape;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor<T> out(out_shape);
  for (int64_t o = 0; o < w.outer; ++o)
    for (int64_t k = 0; k < len; ++k)
      for (int64_t in = 0; in < w.inner; ++in)
        out[(o * len + k) * w.inner + in] = xv[w.start(o, in) + (start + k) * w.inner];
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, w, start, len](Tape<T>& t) {
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    Tensor<T>& gx = t.grad_buffer(xid);
    for (int64_t o = 0; o < w.outer; ++o)
      for (int64_t k = 0; k < len; ++k)
        for (int64_t in = 0; in < w.inner; ++in)
          gx[w.start(o, in) + (start + k) * w.inner] += g[(o * len + k) * w.inner + in];
  };
  return y;
}

// ------------------------------------------------------------- linear layer

// y[..., j] = sum_i x[..., i] * w[i, j] + b[j]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = b.value();
  check(wv.rank() == 2, "linear: weight must be rank 2");
  check(xv.rank() >= 1, "linear: input must have a channel axis");
  const int64_t cin = xv.shape.back();
  const int64_t cout = wv.shape[1];
  check(wv.shape[0] == cin, "linear: fan-in mismatch");
  check(bv.rank() == 1 && bv.shape[0] == cout, "linear: bias mismatch");
  Shape out_shape = xv.shape;
  out_shape.back() = cout;
  Tensor<T> out(out_shape);
  int64_t rows2 = 1;
  for (size_t i = 0; i + 1 < xv.shape.size(); ++i) rows2 *= xv.shape[i];
  for (int64_t m = 0; m < rows2; ++m) {
    for (int64_t j = 0; j < cout; ++j) {
      T acc = bv[j];
      for (int64_t i = 0; i < cin; ++i) acc += xv[m * cin + i] * wv[i * cout + j];
      out[m * cout + j] = acc;
    }
  }
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, wid = w.id, bid = b.id, yid = y.id;
  tp.node(yid).backward = [xid, wid, bid, yid, cin, cout, rows2](Tape<T>& t) {
    const Tensor<T>& g = t.node(yid).grad;
    const Tensor<T>& xv2 = t.node(xid).value;
    const Tensor<T>& wv2 = t.node(wid).value;
    if (t.wants_grad(xid) || t.node(xid).backward) {
      Tensor<T>& gx = t.grad_buffer(xid);
      for (int64_t m = 0; m < rows2; ++m)
        for (int64_t i = 0; i < cin; ++i) {
          T acc = T(0);
          for (int64_t j = 0; j < cout; ++j) acc += g[m * cout + j] * wv2[i * cout + j];
          gx[m * cin + i] += acc;
        }
    }
    if (t.wants_grad(wid) || t.node(wid).backward) {
      Tensor<T>& gw = t.grad_buffer(wid);
      for (int64_t m = 0; m < rows2; ++m)
        for (int64_t i = 0; i < cin; ++i) {
          const T xv_mi = xv2[m * cin + i];
          for (int64_t j = 0; j < cout; ++j) gw[i * cout + j] += xv_mi * g[m * cout + j];
        }
    }
    if (t.wants_grad(bid) || t.node(bid).backward) {
      Tensor<T>& gb = t.grad_buffer(bid);
      for (int64_t m = 0; m < rows2; ++m)
        for (int64_t j = 0; j < cout; ++j) gb[j] += g[m * cout + j];
    }
  };
  return y;
}

// ---------------------------------------------------------------- composites

// Mean 0, variance 1 over `axes` (population variance, eps inside the sqrt).
// Fused forward and backward.
template <typename T>
Var<T> normalize(Var<T> x, AxisList axes, double eps = 1e-8) {
  Tape<T>& tp = *x.tape;
  axes = sorted_axes(std::move(axes));
  const Tensor<T>& xv = x.value();
  AxisReducer red(xv.shape, axes);
  const Shape group_shape = drop_axes(xv.shape, axes);
  const int64_t k = red.group_size;
  Tensor<T> out;
  out.shape = xv.shape;
  out.data.resize(xv.data.size());
  auto inv_std = std::make_shared<Tensor<T>>(group_shape);
  if (k > 0) {
    Tensor<T> mean(group_shape);
    red.for_each([&](int64_t i, int64_t o) { mean[o] += xv[i]; });
    for (auto& v : mean.data) v /= static_cast<T>(k);
    Tensor<T>& inv = *inv_std;
    red.for_each([&](int64_t i, int64_t o) {
      const T d = xv[i] - mean[o];
      inv[o] += d * d;
    });
    for (int64_t o = 0; o < inv.numel(); ++o)
      inv[o] = T(1) / std::sqrt(inv[o] / static_cast<T>(k) + static_cast<T>(eps));
    red.for_each([&](int64_t i, int64_t o) { out[i] = (xv[i] - mean[o]) * inv[o]; });
  }
  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, yid = y.id;
  tp.node(yid).backward = [xid, yid, red, group_shape, k, inv_std](Tape<T>& t) {
    if (k == 0) return;
    if (!t.wants_grad(xid) && !t.node(xid).backward) return;
    const Tensor<T>& g = t.node(yid).grad;
    const Tensor<T>& yv = t.node(yid).value;  // yv is x-hat
    Tensor<T> gsum(group_shape), gdot(group_shape);
    red.for_each([&](int64_t i, int64_t o) {
      gsum[o] += g[i];
      gdot[o] += g[i] * yv[i];
    });
    const T invk = T(1) / static_cast<T>(k);
    Tensor<T>& gx = t.grad_buffer(xid);
    const Tensor<T>& inv = *inv_std;
    red.for_each([&](int64_t i, int64_t o) {
      gx[i] += inv[o] * (g[i] - gsum[o] * invk - yv[i] * gdot[o] * invk);
    });
  };
  return y;
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  AxisList axes(x.value().rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum_reduce(x, axes);
}

template <typename T>
Var<T> logsumexp_all(Var<T> x) {
  AxisList axes(x.value().rank());
  std::iota(axes.begin(), axes.end(), 0);
  return logsumexp(x, axes);
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

}  // namespace ad
}  // namespace arcmdl
