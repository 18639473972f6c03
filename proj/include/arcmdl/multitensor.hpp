#pragma once

#include <array>
#include <functional>
#include <numeric>
#include <vector>

#include "arcmdl/keys.hpp"
#include "arcmdl/rng.hpp"
#include "arcmdl/tape.hpp"
#include "arcmdl/tensor.hpp"

namespace arcmdl {

// One dense tensor per legal shape key, axes in canonical order with channel
// last. Immutable by convention once built.
template <typename T>
struct MultiTensor {
  DimSizes dims;
  std::array<Tensor<T>, kNumKeys> entries;

  Tensor<T>& operator[](int key_index) { return entries[static_cast<size_t>(key_index)]; }
  const Tensor<T>& operator[](int key_index) const { return entries[static_cast<size_t>(key_index)]; }
};

// Tape-tracked counterpart used inside a forward pass.
template <typename T>
struct MultiVar {
  DimSizes dims;
  std::array<Var<T>, kNumKeys> entries;

  Var<T>& operator[](int key_index) { return entries[static_cast<size_t>(key_index)]; }
  const Var<T>& operator[](int key_index) const { return entries[static_cast<size_t>(key_index)]; }
};

template <typename T>
MultiTensor<T> zeros_like(const MultiTensor<T>& x) {
  MultiTensor<T> out;
  out.dims = x.dims;
  for (int k = 0; k < kNumKeys; ++k) out[k] = Tensor<T>(x[k].shape);
  return out;
}

// Residual-width multitensor of zeros for the given dims.
template <typename T>
MultiTensor<T> make_residual_zeros(const DimSizes& dims) {
  const KeySpace& ks = KeySpace::instance();
  MultiTensor<T> out;
  out.dims = dims;
  for (int k = 0; k < kNumKeys; ++k)
    out[k] = Tensor<T>(dims.tensor_shape(ks.key(k), ks.key(k).residual_width()));
  return out;
}

template <typename T, typename Fn>
MultiTensor<T> elementwise_map(const MultiTensor<T>& x, Fn fn) {
  MultiTensor<T> out;
  out.dims = x.dims;
  for (int k = 0; k < kNumKeys; ++k) {
    out[k].shape = x[k].shape;
    out[k].data.resize(x[k].data.size());
    for (size_t i = 0; i < x[k].data.size(); ++i) out[k].data[i] = fn(x[k].data[i]);
  }
  return out;
}

template <typename T, typename Fn>
MultiTensor<T> zip(const MultiTensor<T>& a, const MultiTensor<T>& b, Fn fn) {
  MultiTensor<T> out;
  out.dims = a.dims;
  for (int k = 0; k < kNumKeys; ++k) {
    check(a[k].shape == b[k].shape, "zip: shape mismatch at key " + KeySpace::instance().key(k).str());
    out[k].shape = a[k].shape;
    out[k].data.resize(a[k].data.size());
    for (size_t i = 0; i < a[k].data.size(); ++i) out[k].data[i] = fn(a[k].data[i], b[k].data[i]);
  }
  return out;
}

// ------------------------------------------------------------------ symmetry

// Square symmetry, canonical form: mirror x first (when flip), then `rot`
// counter-clockwise quarter turns.
struct D4Element {
  int rot = 0;   // 0..3
  bool flip = false;

  bool swaps_axes() const { return rot % 2 == 1; }

  // Direction index action (compass indices 0..7 = E,NE,N,NW,W,SW,S,SE).
  int dir(int d) const {
    if (flip) d = (4 - d + 8) % 8;
    return (d + 2 * rot) % 8;
  }
  int dir_inv(int d) const {
    int a = (d - 2 * rot % 8 + 16) % 8;
    return flip ? (4 - a + 8) % 8 : a;
  }

  static D4Element compose(const D4Element& g2, const D4Element& g1) {  // g2 after g1
    D4Element out;
    out.flip = g1.flip != g2.flip;
    const int r1 = g2.flip ? (4 - g1.rot) % 4 : g1.rot;
    out.rot = (g2.rot + r1) % 4;
    return out;
  }

  D4Element inverse() const {
    D4Element out;
    out.flip = flip;
    out.rot = flip ? rot : (4 - rot) % 4;
    return out;
  }
};

// Source-coordinate map for a D4 element: each output spatial coordinate
// pulls from exactly one input coordinate, possibly reversed.
struct SpatialMap {
  // ysrc/xsrc: 0 = sourced from output y, 1 = sourced from output x.
  int ysrc = 0, xsrc = 1;
  bool yrev = false, xrev = false;

  bool swaps_axes() const { return ysrc == 1; }

  static SpatialMap identity() { return SpatialMap{}; }
  static SpatialMap mirror_x() { return SpatialMap{0, 1, false, true}; }
  static SpatialMap rot_ccw() { return SpatialMap{1, 0, false, true}; }

  // a applied first, then b: src(c) = b(a(c)).
  static SpatialMap chain(const SpatialMap& a, const SpatialMap& b) {
    SpatialMap out;
    out.ysrc = b.ysrc == 0 ? a.ysrc : a.xsrc;
    out.yrev = b.yrev != (b.ysrc == 0 ? a.yrev : a.xrev);
    out.xsrc = b.xsrc == 0 ? a.ysrc : a.xsrc;
    out.xrev = b.xrev != (b.xsrc == 0 ? a.yrev : a.xrev);
    return out;
  }

  static SpatialMap of(const D4Element& g) {
    SpatialMap m = identity();
    // Source lookups run outermost-first: rotations, then the mirror.
    for (int i = 0; i < g.rot; ++i) m = chain(m, rot_ccw());
    if (g.flip) m = chain(m, mirror_x());
    return m;
  }

  // Source (y, x) for output (yo, xo); hin/win are input extents.
  void source(int64_t yo, int64_t xo, int64_t hin, int64_t win, int64_t* y, int64_t* x) const {
    const int64_t ry = ysrc == 0 ? yo : xo;
    const int64_t rx = xsrc == 0 ? yo : xo;
    *y = yrev ? hin - 1 - ry : ry;
    *x = xrev ? win - 1 - rx : rx;
  }
};

struct SymmetryElement {
  std::vector<int> example_perm;  // source lookup: out[e] = in[example_perm[e]]
  std::vector<int> color_perm;
  D4Element d4;

  static SymmetryElement identity(int64_t n_example, int64_t n_colors) {
    SymmetryElement g;
    g.example_perm.resize(static_cast<size_t>(n_example));
    std::iota(g.example_perm.begin(), g.example_perm.end(), 0);
    g.color_perm.resize(static_cast<size_t>(n_colors));
    std::iota(g.color_perm.begin(), g.color_perm.end(), 0);
    return g;
  }

  static std::vector<int> random_perm(int64_t n, Rng& rng) {
    std::vector<int> p(static_cast<size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(p[static_cast<size_t>(i)], p[rng.below(static_cast<uint64_t>(i + 1))]);
    return p;
  }

  static SymmetryElement random(int64_t n_example, int64_t n_colors, Rng& rng) {
    SymmetryElement g;
    g.example_perm = random_perm(n_example, rng);
    g.color_perm = random_perm(n_colors, rng);
    g.d4.rot = static_cast<int>(rng.below(4));
    g.d4.flip = rng.below(2) != 0;
    return g;
  }

  static SymmetryElement compose(const SymmetryElement& g2, const SymmetryElement& g1) {
    SymmetryElement out;
    out.example_perm.resize(g1.example_perm.size());
    for (size_t i = 0; i < out.example_perm.size(); ++i)
      out.example_perm[i] = g1.example_perm[static_cast<size_t>(g2.example_perm[i])];
    out.color_perm.resize(g1.color_perm.size());
    for (size_t i = 0; i < out.color_perm.size(); ++i)
      out.color_perm[i] = g1.color_perm[static_cast<size_t>(g2.color_perm[i])];
    out.d4 = D4Element::compose(g2.d4, g1.d4);
    return out;
  }

  SymmetryElement inverse() const {
    SymmetryElement out;
    out.example_perm.resize(example_perm.size());
    for (size_t i = 0; i < example_perm.size(); ++i)
      out.example_perm[static_cast<size_t>(example_perm[i])] = static_cast<int>(i);
    out.color_perm.resize(color_perm.size());
    for (size_t i = 0; i < color_perm.size(); ++i)
      out.color_perm[static_cast<size_t>(color_perm[i])] = static_cast<int>(i);
    out.d4 = d4.inverse();
    return out;
  }
};

// Transform a single keyed tensor. Pure index permutation; no arithmetic.
// When the element swaps axes, the result belongs to the mirrored key and
// transposed dims.
template <typename T>
Tensor<T> apply_symmetry_tensor(const ShapeKey& key, const Tensor<T>& x, const DimSizes& dims,
                                const SymmetryElement& g, bool has_channel = true) {
  const SpatialMap sm = SpatialMap::of(g.d4);
  const bool swap = sm.swaps_axes();
  const ShapeKey out_key = swap ? key.mirrored() : key;
  DimSizes out_dims = dims;
  if (swap) std::swap(out_dims.height, out_dims.width);

  const int64_t channels = has_channel ? x.shape.back() : 1;
  Shape out_shape = out_dims.tensor_shape(out_key, channels);
  if (!has_channel) out_shape.pop_back();
  Tensor<T> out(out_shape);
  if (out.numel() == 0) return out;

  const int oe = out_key.axis_of(kExample), oc = out_key.axis_of(kColor),
            od = out_key.axis_of(kDirection), oh = out_key.axis_of(kHeight),
            ow = out_key.axis_of(kWidth);
  const int ie = key.axis_of(kExample), ic = key.axis_of(kColor), id = key.axis_of(kDirection),
            ih = key.axis_of(kHeight), iw = key.axis_of(kWidth);

  std::array<int, 8> dir_src{};
  for (int d = 0; d < 8; ++d) dir_src[static_cast<size_t>(d)] = g.d4.dir_inv(d);

  const auto out_strides = out.strides();
  const auto in_strides = x.strides();
  const int out_rank = out.rank();
  std::vector<int64_t> coord(static_cast<size_t>(out_rank), 0);
  const int in_rank = x.rank();
  std::vector<int64_t> src(static_cast<size_t>(in_rank), 0);

  for (int64_t flat = 0; flat < out.numel(); ++flat) {
    int64_t rem = flat;
    for (int i = 0; i < out_rank; ++i) {
      coord[static_cast<size_t>(i)] = rem / out_strides[static_cast<size_t>(i)];
      rem %= out_strides[static_cast<size_t>(i)];
    }
    // channel passes through
    if (has_channel) src[static_cast<size_t>(in_rank - 1)] = coord[static_cast<size_t>(out_rank - 1)];
    if (ie >= 0) src[static_cast<size_t>(ie)] = g.example_perm[static_cast<size_t>(coord[static_cast<size_t>(oe)])];
    if (ic >= 0) src[static_cast<size_t>(ic)] = g.color_perm[static_cast<size_t>(coord[static_cast<size_t>(oc)])];
    if (id >= 0) src[static_cast<size_t>(id)] = dir_src[static_cast<size_t>(coord[static_cast<size_t>(od)])];

    if (key.height() && key.width()) {
      int64_t sy = 0, sx = 0;
      sm.source(coord[static_cast<size_t>(oh)], coord[static_cast<size_t>(ow)], dims.height, dims.width, &sy, &sx);
      src[static_cast<size_t>(ih)] = sy;
      src[static_cast<size_t>(iw)] = sx;
    } else if (key.height()) {
      // Output index lives on the axis the input row coordinate sources from.
      const int64_t uo = swap ? coord[static_cast<size_t>(ow)] : coord[static_cast<size_t>(oh)];
      src[static_cast<size_t>(ih)] = sm.yrev ? dims.height - 1 - uo : uo;
    } else if (key.width()) {
      const int64_t uo = swap ? coord[static_cast<size_t>(oh)] : coord[static_cast<size_t>(ow)];
      src[static_cast<size_t>(iw)] = sm.xrev ? dims.width - 1 - uo : uo;
    }

    int64_t in_flat = 0;
    for (int i = 0; i < in_rank; ++i) in_flat += src[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(i)];
    out[flat] = x[in_flat];
  }
  return out;
}

template <typename T>
MultiTensor<T> apply_symmetry(const MultiTensor<T>& x, const SymmetryElement& g) {
  const KeySpace& ks = KeySpace::instance();
  const bool swap = SpatialMap::of(g.d4).swaps_axes();
  MultiTensor<T> out;
  out.dims = x.dims;
  if (swap) std::swap(out.dims.height, out.dims.width);
  for (int k = 0; k < kNumKeys; ++k) {
    const ShapeKey& key = ks.key(k);
    const ShapeKey out_key = swap ? key.mirrored() : key;
    out[ks.index_of(out_key)] = apply_symmetry_tensor(key, x[k], x.dims, g);
  }
  return out;
}

}  // namespace arcmdl
