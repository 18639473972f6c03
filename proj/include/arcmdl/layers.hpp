#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "arcmdl/keys.hpp"
#include "arcmdl/multitensor.hpp"
#include "arcmdl/puzzle.hpp"
#include "arcmdl/tape.hpp"
#include "arcmdl/weights.hpp"

namespace arcmdl {

// Compass directions, index 0..7 counter-clockwise from East.
inline constexpr int kDirDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
inline constexpr int kDirDy[8] = {0, -1, -1, -1, 0, 1, 1, 1};

// Message coefficient by direction index difference: 1 for 0/180 degrees,
// 0.2 for 45/135, 0.4 for 90.
inline double dir_comm_coeff(int delta) {
  switch (((delta % 8) + 8) % 8) {
    case 0:
    case 4: return 1.0;
    case 2:
    case 6: return 0.4;
    default: return 0.2;
  }
}

// Weight-tying class of a (target, source) direction pair: the folded index
// difference. Rotations preserve the difference and reflections negate it,
// so tying on the folded value keeps the layer equivariant and treats all
// eight slices symmetrically.
inline int dir_comm_orbit(int target, int source) {
  const int delta = ((source - target) % 8 + 8) % 8;
  return std::min(delta, 8 - delta);  // 0..4
}

// Logsumexp tempering coefficient: 0.1 rising exponentially to 1 over the
// first 100 steps.
inline double recon_schedule(int64_t step) {
  const double f = std::min<int64_t>(step, 100) / 100.0;
  return std::pow(0.1, 1.0 - f);
}

inline AxisList non_channel_axes(const Shape& s) {
  AxisList axes(s.size() > 0 ? s.size() - 1 : 0);
  for (size_t i = 0; i + 1 < s.size(); ++i) axes[i] = static_cast<int>(i);
  return axes;
}

// Closed-form AWGN calibration: noise variance (before unit-variance
// rescaling) that makes 0.5*ln(1+1/sigma^2) equal the per-element capacity.
inline double noise_variance_for_capacity(double nats) {
  return 1.0 / std::expm1(2.0 * nats);
}

// Post-decode gate: sigmoid of the log SNR implied by a per-element capacity.
// Approaches 0 for vanishing capacity, 0.5 at SNR 1, and 1 as capacity grows.
inline double decode_gate_for_capacity(double nats) {
  const double log_snr = 2.0 * nats + std::log1p(-std::exp(-2.0 * nats));
  return 1.0 / (1.0 + std::exp(-log_snr));
}

// ------------------------------------------------------------------ context

template <typename T>
struct NetContext {
  Tape<T>* tape = nullptr;
  const std::vector<Var<T>>* leaves = nullptr;
  DimSizes dims;
  Tensor<T> mask_row;  // [E, H]
  Tensor<T> mask_col;  // [E, W]
  Tensor<T> mask_pix;  // [E, H, W], row AND col

  void finish_masks() {
    mask_pix = Tensor<T>(Shape{dims.n_example, dims.height, dims.width});
    for (int64_t e = 0; e < dims.n_example; ++e)
      for (int64_t y = 0; y < dims.height; ++y)
        for (int64_t x = 0; x < dims.width; ++x)
          mask_pix[(e * dims.height + y) * dims.width + x] =
              mask_row[e * dims.height + y] * mask_col[e * dims.width + x];
  }

  Var<T> leaf(int idx) const { return (*leaves)[static_cast<size_t>(idx)]; }

  Var<T> apply_linear(Var<T> x, const LinearRef& ref) const {
    return ad::linear(x, leaf(ref.w), leaf(ref.b));
  }
};

template <typename T>
void set_full_masks(NetContext<T>& ctx) {
  ctx.mask_row = Tensor<T>(Shape{ctx.dims.n_example, ctx.dims.height}, T(1));
  ctx.mask_col = Tensor<T>(Shape{ctx.dims.n_example, ctx.dims.width}, T(1));
  ctx.finish_masks();
}

template <typename T>
void set_masks_from_shape_info(NetContext<T>& ctx, const ShapeInfo& info) {
  ctx.mask_row = Tensor<T>(Shape{ctx.dims.n_example, ctx.dims.height});
  ctx.mask_col = Tensor<T>(Shape{ctx.dims.n_example, ctx.dims.width});
  for (int64_t e = 0; e < ctx.dims.n_example; ++e) {
    const SideMask m = info.combined_mask(static_cast<int>(e));
    for (int64_t y = 0; y < ctx.dims.height; ++y)
      ctx.mask_row[e * ctx.dims.height + y] = static_cast<T>(m.rows[static_cast<size_t>(y)]);
    for (int64_t x = 0; x < ctx.dims.width; ++x)
      ctx.mask_col[e * ctx.dims.width + x] = static_cast<T>(m.cols[static_cast<size_t>(x)]);
  }
  ctx.finish_masks();
}

namespace detail {

inline AxisList axes_except(const Shape& target, std::initializer_list<int> keep) {
  AxisList drop;
  for (int i = 0; i < static_cast<int>(target.size()); ++i) {
    bool kept = false;
    for (int k : keep) kept = kept || k == i;
    if (!kept) drop.push_back(i);
  }
  return drop;
}

// Broadcast a per-(example, coord) mask into `target`: axis `e_axis` indexes
// examples and `k_axis` the masked coordinate; all other axes replicate.
template <typename T>
Tensor<T> broadcast_2d(const Tensor<T>& m, const Shape& target, int e_axis, int k_axis) {
  Tensor<T> out(target);
  if (out.numel() == 0) return out;
  AxisReducer red(target, axes_except(target, {e_axis, k_axis}));
  red.for_each([&](int64_t i, int64_t o) { out[i] = m[o]; });
  return out;
}

// Broadcast a per-example vector into `target`.
template <typename T>
Tensor<T> broadcast_1d(const Tensor<T>& v, const Shape& target, int e_axis) {
  Tensor<T> out(target);
  if (out.numel() == 0) return out;
  AxisReducer red(target, axes_except(target, {e_axis}));
  red.for_each([&](int64_t i, int64_t o) { out[i] = v[o]; });
  return out;
}

// Pixel mask (row AND col) broadcast into `target`.
template <typename T>
Tensor<T> broadcast_pixel_mask(const NetContext<T>& ctx, const Shape& target, int e_axis, int h_axis,
                               int w_axis) {
  Tensor<T> out(target);
  if (out.numel() == 0) return out;
  AxisReducer red(target, axes_except(target, {e_axis, h_axis, w_axis}));
  red.for_each([&](int64_t i, int64_t o) { out[i] = ctx.mask_pix[o]; });
  return out;
}

template <typename T>
Tensor<T> mask_axis_sums(const Tensor<T>& m) {  // [E, K] -> [E]
  Tensor<T> out(Shape{m.shape[0]});
  for (int64_t e = 0; e < m.shape[0]; ++e) {
    T s = T(0);
    for (int64_t k = 0; k < m.shape[1]; ++k) s += m[e * m.shape[1] + k];
    out[e] = s;
  }
  return out;
}

}  // namespace detail

// Mean over `dim` with geometric axes weighted by the shape masks. The key
// describes the axis layout of x (channel last).
template <typename T>
Var<T> masked_mean_over_dim(const NetContext<T>& ctx, Var<T> x, const ShapeKey& key, Dim dim) {
  Tape<T>& tp = *ctx.tape;
  const int axis = key.axis_of(dim);
  check(axis >= 0, "masked_mean_over_dim: axis not present");
  if (dim != kHeight && dim != kWidth) return ad::mean_reduce(x, {axis});

  const Tensor<T>& mask2d = dim == kHeight ? ctx.mask_row : ctx.mask_col;
  const int e_axis = key.axis_of(kExample);
  check(e_axis >= 0, "masked_mean_over_dim: geometric axis without example axis");
  Var<T> mb = tp.constant(detail::broadcast_2d(mask2d, x.shape(), e_axis, axis));
  Var<T> summed = ad::sum_reduce(ad::mul(x, mb), {axis});

  Tensor<T> counts = detail::mask_axis_sums(mask2d);
  for (auto& v : counts.data) v = T(1) / v;
  // After reduction the example axis keeps its position (it precedes h/w).
  Var<T> recip = tp.constant(detail::broadcast_1d(counts, summed.shape(), e_axis));
  return ad::mul(summed, recip);
}

template <typename T>
Var<T> prenorm(Var<T> x) {
  return ad::normalize(x, non_channel_axes(x.shape()));
}

template <typename T>
Var<T> bcast_scalar(Tape<T>& tp, Var<T> scalar, const Shape& target) {
  (void)tp;
  Var<T> flat = ad::reshape(scalar, Shape{});
  std::vector<std::pair<int, int64_t>> ins;
  for (size_t i = 0; i < target.size(); ++i) ins.push_back({static_cast<int>(i), target[i]});
  return ad::broadcast_insert(flat, ins);
}

// ------------------------------------------------------------ decode layer

template <typename T>
struct DecodeOut {
  MultiVar<T> z;
  std::array<Var<T>, kNumKeys> kl_per_key;
  Var<T> kl_total;
};

// Draw the per-step standard-normal noise for every key, canonical order.
template <typename T>
MultiTensor<T> sample_decode_noise(const DimSizes& dims, Rng& rng) {
  const KeySpace& ks = KeySpace::instance();
  MultiTensor<T> noise;
  noise.dims = dims;
  for (int k = 0; k < kNumKeys; ++k) {
    noise[k] = Tensor<T>(dims.tensor_shape(ks.key(k), kDecodeChannels));
    for (auto& v : noise[k].data) v = static_cast<T>(rng.gaussian());
  }
  return noise;
}

// The decoding layer. Normalizes the learned means, adds AWGN calibrated so
// the per-tensor information content matches the target capacity (with
// per-element adjustments renormalized in log space), rescales to unit
// variance, reports the Gaussian KL to N(0,1), gates by the sigmoid of the
// key's mean log SNR, and projects channel 4 up to the residual width.
template <typename T>
DecodeOut<T> decode_latent(const NetContext<T>& ctx, const NetworkWeights<T>& w,
                           const MultiTensor<T>& noise) {
  const KeySpace& ks = KeySpace::instance();
  Tape<T>& tp = *ctx.tape;
  DecodeOut<T> out;
  out.z.dims = ctx.dims;
  Var<T> total;
  for (int k = 0; k < kNumKeys; ++k) {
    const ShapeKey& key = ks.key(k);
    Var<T> means = ctx.leaf(w.latent_means[static_cast<size_t>(k)]);
    const int64_t n = means.numel();
    if (n == 0) {
      out.z[k] = tp.constant(Tensor<T>(ctx.dims.tensor_shape(key, key.residual_width())));
      out.kl_per_key[static_cast<size_t>(k)] = tp.constant(Tensor<T>::scalar(T(0)));
      continue;
    }
    Var<T> adjust = ctx.leaf(w.latent_adjust[static_cast<size_t>(k)]);
    Var<T> theta = ctx.leaf(w.latent_capacity[static_cast<size_t>(k)]);

    Var<T> m_hat = prenorm(means);

    // Total capacity 0.5 + exp(10*theta) nats, spread over elements;
    // adjustments act additively in log space and are renormalized so the
    // mean per-element capacity is exact.
    Var<T> cap_total = ad::affine(ad::exp(ad::scale(theta, 10.0)), 1.0, 0.5);
    Var<T> log_mean_cap = ad::log(ad::scale(cap_total, 1.0 / static_cast<double>(n)));
    Var<T> adj_lse = ad::affine(ad::logsumexp_all(adjust), 1.0, -std::log(static_cast<double>(n)));
    Var<T> log_cap_el =
        ad::add(ad::sub(adjust, bcast_scalar(tp, adj_lse, means.shape())),
                bcast_scalar(tp, log_mean_cap, means.shape()));
    Var<T> cap_el = ad::exp(log_cap_el);

    // Post-rescaling noise std is exp(-c); signal gain sqrt(1 - exp(-2c)).
    Var<T> s = ad::exp(ad::scale(cap_el, -1.0));
    Var<T> s2 = ad::mul(s, s);
    Var<T> g2 = ad::affine(s2, -1.0, 1.0);
    Var<T> g = ad::sqrt(g2);

    Var<T> noise_v = tp.constant(noise[k]);
    Var<T> z_pre = ad::add(ad::mul(g, m_hat), ad::mul(s, noise_v));

    // KL(N(g*m, s^2) || N(0,1)) summed over elements.
    Var<T> gm = ad::mul(g, m_hat);
    Var<T> kl_el = ad::add(ad::affine(ad::add(ad::mul(gm, gm), s2), 0.5, -0.5), cap_el);
    Var<T> kl = ad::sum_all(kl_el);
    out.kl_per_key[static_cast<size_t>(k)] = kl;
    total = total.valid() ? ad::add(total, kl) : kl;

    // Gate: sigmoid of the log of the mean SNR, one scalar per key.
    // log snr_i = 2c + log(1 - exp(-2c)), averaged stably in log space.
    Var<T> log_snr = ad::add(ad::scale(cap_el, 2.0), ad::log(g2));
    Var<T> gate = ad::sigmoid(
        ad::affine(ad::logsumexp_all(log_snr), 1.0, -std::log(static_cast<double>(n))));
    Var<T> z_gated = ad::mul(z_pre, bcast_scalar(tp, gate, means.shape()));

    out.z[k] = ctx.apply_linear(z_gated, w.decode_proj[static_cast<size_t>(k)]);
  }
  out.kl_total = total.valid() ? total : tp.constant(Tensor<T>::scalar(T(0)));
  return out;
}

// --------------------------------------------------- multitensor communication

// Up messages (16 ch) flow to superset keys by broadcasting; down messages
// (8 ch) flow to subset keys by mask-weighted means. Received messages are
// summed per key, normalized, and written back through per-key projections.
template <typename T>
MultiVar<T> multitensor_communicate(const NetContext<T>& ctx, const MultiVar<T>& x,
                                    const typename NetworkWeights<T>::Block& blk) {
  const KeySpace& ks = KeySpace::instance();
  MultiVar<T> out = x;

  std::array<Var<T>, kNumKeys> up_msg, down_msg;
  for (int k = 0; k < kNumKeys; ++k) {
    up_msg[static_cast<size_t>(k)] = ctx.apply_linear(x[k], blk.comm_read_up[static_cast<size_t>(k)]);
    down_msg[static_cast<size_t>(k)] =
        ctx.apply_linear(x[k], blk.comm_read_down[static_cast<size_t>(k)]);
  }

  for (int t = 0; t < kNumKeys; ++t) {
    const ShapeKey& tkey = ks.key(t);
    Var<T> up_sum, down_sum;
    for (int s = 0; s < kNumKeys; ++s) {
      const ShapeKey& skey = ks.key(s);
      if (skey.subset_of(tkey)) {
        // Broadcast up: insert the axes the source lacks.
        std::vector<std::pair<int, int64_t>> ins;
        for (int d = 0; d < kNumDims; ++d)
          if (tkey.has[d] && !skey.has[d])
            ins.push_back({tkey.axis_of(static_cast<Dim>(d)), ctx.dims.extent(static_cast<Dim>(d))});
        Var<T> msg = ins.empty() ? up_msg[static_cast<size_t>(s)]
                                 : ad::broadcast_insert(up_msg[static_cast<size_t>(s)], ins);
        up_sum = up_sum.valid() ? ad::add(up_sum, msg) : msg;
      }
      if (tkey.subset_of(skey)) {
        // Reduce down: masked mean over the axes the target lacks, widest
        // dimension first so axis positions stay valid.
        Var<T> msg = down_msg[static_cast<size_t>(s)];
        ShapeKey cur = skey;
        for (int d = kNumDims - 1; d >= 0; --d) {
          if (!skey.has[d] || tkey.has[d]) continue;
          msg = masked_mean_over_dim(ctx, msg, cur, static_cast<Dim>(d));
          cur.has[static_cast<size_t>(d)] = false;
        }
        down_sum = down_sum.valid() ? ad::add(down_sum, msg) : msg;
      }
    }
    Var<T> upd = ctx.apply_linear(prenorm(up_sum), blk.comm_write_up[static_cast<size_t>(t)]);
    upd = ad::add(upd, ctx.apply_linear(prenorm(down_sum), blk.comm_write_down[static_cast<size_t>(t)]));
    out[t] = ad::add(x[t], upd);
  }
  return out;
}

// ------------------------------------------------------------- softmax layer

// For every key containing the example axis: softmax over each axis subset
// that includes example, concatenated on the channel axis.
template <typename T>
MultiVar<T> softmax_layer(const NetContext<T>& ctx, const MultiVar<T>& x,
                          const typename NetworkWeights<T>::Block& blk) {
  const KeySpace& ks = KeySpace::instance();
  MultiVar<T> out = x;
  for (int k = 0; k < kNumKeys; ++k) {
    const ShapeKey& key = ks.key(k);
    if (softmax_subset_count(key) == 0) continue;
    if (x[k].numel() == 0) continue;
    Var<T> r = ctx.apply_linear(prenorm(x[k]), blk.softmax_read[static_cast<size_t>(k)]);
    const int rank = key.rank();
    std::vector<Var<T>> parts;
    // Example sits at axis 0 whenever present; enumerate subsets that keep
    // bit 0 set, ascending, so channel layout is stable.
    for (int m = 1; m < (1 << rank); ++m) {
      if (!(m & 1)) continue;
      AxisList axes;
      for (int a = 0; a < rank; ++a)
        if (m & (1 << a)) axes.push_back(a);
      parts.push_back(ad::softmax(r, axes));
    }
    Var<T> cat = ad::concat(parts, key.channel_axis());
    out[k] = ad::add(x[k], ctx.apply_linear(cat, blk.softmax_write[static_cast<size_t>(k)]));
  }
  return out;
}

// --------------------------------------------------- directional shift/cummax

namespace detail {

// Scan one direction slice: cardinal scans apply a single pass, diagonals
// compose the two cardinal passes.
template <typename T>
Var<T> scan_cummax(Var<T> x, int dir, int h_axis, int w_axis) {
  const int dx = kDirDx[dir], dy = kDirDy[dir];
  Var<T> y = x;
  if (dx != 0) y = ad::cummax(y, w_axis, dx < 0);
  if (dy != 0) y = ad::cummax(y, h_axis, dy < 0);
  return y;
}

template <typename T>
Var<T> scan_shift(Var<T> x, int dir, int h_axis, int w_axis) {
  const int dx = kDirDx[dir], dy = kDirDy[dir];
  Var<T> y = x;
  if (dx != 0) y = ad::shift1(y, w_axis, dx > 0);
  if (dy != 0) y = ad::shift1(y, h_axis, dy > 0);
  return y;
}

}  // namespace detail

// Directional cummax (rescaled to [-1,1] first, masked cells excluded) or
// directional shift (zero fill). Applies only to the two keys carrying
// direction, height and width. Half the channels scan the opposite way.
template <typename T>
MultiVar<T> directional_scan_layer(const NetContext<T>& ctx, const MultiVar<T>& x,
                                   const typename NetworkWeights<T>::Block& blk, bool is_cummax) {
  const KeySpace& ks = KeySpace::instance();
  Tape<T>& tp = *ctx.tape;
  MultiVar<T> out = x;
  for (int k = 0; k < kNumKeys; ++k) {
    const ShapeKey& key = ks.key(k);
    if (!is_dir_scan_key(key)) continue;
    if (x[k].numel() == 0) continue;
    const auto& read = is_cummax ? blk.cummax_read[static_cast<size_t>(k)]
                                 : blk.shift_read[static_cast<size_t>(k)];
    const auto& write = is_cummax ? blk.cummax_write[static_cast<size_t>(k)]
                                  : blk.shift_write[static_cast<size_t>(k)];
    Var<T> r = ctx.apply_linear(prenorm(x[k]), read);
    const int e_axis = key.axis_of(kExample);
    const int d_axis = key.axis_of(kDirection);
    const int h_axis = key.axis_of(kHeight);
    const int w_axis = key.axis_of(kWidth);
    const int ch_axis = key.channel_axis();

    Shape slice_shape = r.shape();
    slice_shape[static_cast<size_t>(d_axis)] = 1;
    slice_shape[static_cast<size_t>(ch_axis)] = 2;
    Var<T> mask = tp.constant(detail::broadcast_pixel_mask(ctx, slice_shape, e_axis, h_axis, w_axis));
    Var<T> inv_mask = ad::affine(mask, -1.0, 1.0);

    std::vector<Var<T>> dir_parts;
    for (int d = 0; d < kNumDirections; ++d) {
      Var<T> sl = ad::narrow(r, d_axis, d, 1);
      std::vector<Var<T>> halves;
      for (int half = 0; half < 2; ++half) {
        Var<T> hc = ad::narrow(sl, ch_axis, half * 2, 2);
        const int dir = half == 0 ? d : (d + 4) % 8;
        Var<T> scanned;
        if (is_cummax) {
          // Rescale the valid cells of each slice to [-1, 1].
          Var<T> masked_lo = ad::add(ad::mul(hc, mask), ad::scale(inv_mask, -1e30));
          Var<T> masked_hi = ad::add(ad::mul(hc, mask), ad::scale(inv_mask, 1e30));
          Var<T> mx = ad::max_reduce(masked_lo, {h_axis, w_axis});
          Var<T> mn = ad::min_reduce(masked_hi, {h_axis, w_axis});
          std::vector<std::pair<int, int64_t>> ins = {{h_axis, r.shape()[static_cast<size_t>(h_axis)]},
                                                      {w_axis, r.shape()[static_cast<size_t>(w_axis)]}};
          Var<T> span = ad::broadcast_insert(ad::affine(ad::sub(mx, mn), 1.0, 1e-8), ins);
          Var<T> mid = ad::broadcast_insert(ad::add(mx, mn), ins);
          Var<T> scaled = ad::mul(ad::sub(ad::scale(hc, 2.0), mid), ad::reciprocal(span));
          scaled = ad::add(ad::mul(scaled, mask), ad::scale(inv_mask, -1e30));
          scanned = detail::scan_cummax(scaled, dir, h_axis, w_axis);
        } else {
          scanned = detail::scan_shift(ad::mul(hc, mask), dir, h_axis, w_axis);
        }
        halves.push_back(ad::mul(scanned, mask));
      }
      dir_parts.push_back(ad::concat(halves, ch_axis));
    }
    Var<T> y = ad::concat(dir_parts, d_axis);
    out[k] = ad::add(x[k], ctx.apply_linear(y, write));
  }
  return out;
}

// --------------------------------------------------- directional communication

namespace detail {

// Fused direction mixing: every target slice t accumulates, over sources s,
// coeff(s-t) * x[.., s, .., :] @ maps[orbit(t, s)]. One tape node.
template <typename T>
Var<T> dir_mix(Var<T> x, Var<T> maps, int d_axis) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& mv = maps.value();
  const int cc = kDirCommChannels;
  check(xv.shape[static_cast<size_t>(d_axis)] == kNumDirections, "dir_mix: direction axis size");
  check(xv.shape.back() == cc, "dir_mix: channel width");
  check(mv.shape == Shape({kNumDirOrbits, cc, cc}), "dir_mix: maps shape");

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < d_axis; ++i) outer *= xv.shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(d_axis) + 1; i + 1 < xv.shape.size(); ++i)
    inner *= xv.shape[i];

  // Flattened tied tables: per (t,s), the coefficient-scaled 2x2 map.
  std::array<double, 64> coeff{};
  std::array<int, 64> orbit{};
  for (int t = 0; t < 8; ++t)
    for (int s = 0; s < 8; ++s) {
      coeff[static_cast<size_t>(t * 8 + s)] = dir_comm_coeff(s - t);
      orbit[static_cast<size_t>(t * 8 + s)] = dir_comm_orbit(t, s);
    }

  Tensor<T> out(xv.shape);
  auto idx = [=](int64_t p, int d, int64_t q) { return ((p * 8 + d) * inner + q) * cc; };
  for (int64_t p = 0; p < outer; ++p)
    for (int t = 0; t < 8; ++t)
      for (int64_t q = 0; q < inner; ++q) {
        T acc0 = T(0), acc1 = T(0);
        for (int s = 0; s < 8; ++s) {
          const T* w = &mv[orbit[static_cast<size_t>(t * 8 + s)] * cc * cc];
          const T k = static_cast<T>(coeff[static_cast<size_t>(t * 8 + s)]);
          const T x0 = xv[idx(p, s, q)], x1 = xv[idx(p, s, q) + 1];
          acc0 += k * (x0 * w[0] + x1 * w[2]);
          acc1 += k * (x0 * w[1] + x1 * w[3]);
        }
        out[idx(p, t, q)] = acc0;
        out[idx(p, t, q) + 1] = acc1;
      }

  Var<T> y = tp.make(std::move(out), true, nullptr);
  const int32_t xid = x.id, mid = maps.id, yid = y.id;
  tp.node(yid).backward = [xid, mid, yid, outer, inner, coeff, orbit, idx, cc](Tape<T>& t) {
    const Tensor<T>& g = t.node(yid).grad;
    const Tensor<T>& xv2 = t.node(xid).value;
    const Tensor<T>& mv2 = t.node(mid).value;
    const bool want_x = t.wants_grad(xid) || t.node(xid).backward;
    const bool want_m = t.wants_grad(mid) || t.node(mid).backward;
    Tensor<T>* gx = want_x ? &t.grad_buffer(xid) : nullptr;
    Tensor<T>* gm = want_m ? &t.grad_buffer(mid) : nullptr;
    for (int64_t p = 0; p < outer; ++p)
      for (int tt = 0; tt < 8; ++tt)
        for (int64_t q = 0; q < inner; ++q) {
          const T g0 = g[idx(p, tt, q)], g1 = g[idx(p, tt, q) + 1];
          for (int s = 0; s < 8; ++s) {
            const int o = orbit[static_cast<size_t>(tt * 8 + s)];
            const T k = static_cast<T>(coeff[static_cast<size_t>(tt * 8 + s)]);
            const T* w = &mv2[o * cc * cc];
            const T x0 = xv2[idx(p, s, q)], x1 = xv2[idx(p, s, q) + 1];
            if (gx != nullptr) {
              (*gx)[idx(p, s, q)] += k * (g0 * w[0] + g1 * w[1]);
              (*gx)[idx(p, s, q) + 1] += k * (g0 * w[2] + g1 * w[3]);
            }
            if (gm != nullptr) {
              (*gm)[o * cc * cc + 0] += k * x0 * g0;
              (*gm)[o * cc * cc + 1] += k * x0 * g1;
              (*gm)[o * cc * cc + 2] += k * x1 * g0;
              (*gm)[o * cc * cc + 3] += k * x1 * g1;
            }
          }
        }
  };
  return y;
}

}  // namespace detail

// Every direction slice receives one linear message from each of the eight
// slices, through orbit-tied 2x2 maps scaled by the angle coefficient.
template <typename T>
MultiVar<T> directional_communicate(const NetContext<T>& ctx, const MultiVar<T>& x,
                                    const typename NetworkWeights<T>::Block& blk) {
  const KeySpace& ks = KeySpace::instance();
  Tape<T>& tp = *ctx.tape;
  MultiVar<T> out = x;
  Var<T> maps = ctx.leaf(blk.dircomm_maps);

  for (int k = 0; k < kNumKeys; ++k) {
    const ShapeKey& key = ks.key(k);
    if (!key.direction()) continue;
    if (x[k].numel() == 0) continue;
    Var<T> r = ctx.apply_linear(prenorm(x[k]), blk.dircomm_read[static_cast<size_t>(k)]);
    Var<T> y = detail::dir_mix(r, maps, key.axis_of(kDirection));
    Var<T> upd = ctx.apply_linear(y, blk.dircomm_write[static_cast<size_t>(k)]);
    if (key.height() && key.width()) {
      Var<T> mask = tp.constant(detail::broadcast_pixel_mask(
          ctx, upd.shape(), key.axis_of(kExample), key.axis_of(kHeight), key.axis_of(kWidth)));
      upd = ad::mul(upd, mask);
    }
    out[k] = ad::add(x[k], upd);
  }
  return out;
}

// -------------------------------------------------------------- pointwise etc.

template <typename T>
MultiVar<T> nonlinear_layer(const NetContext<T>& ctx, const MultiVar<T>& x,
                            const typename NetworkWeights<T>::Block& blk) {
  MultiVar<T> out = x;
  for (int k = 0; k < kNumKeys; ++k) {
    if (x[k].numel() == 0) continue;
    Var<T> r = ctx.apply_linear(prenorm(x[k]), blk.nonlin_read[static_cast<size_t>(k)]);
    out[k] = ad::add(x[k], ctx.apply_linear(ad::silu(r), blk.nonlin_write[static_cast<size_t>(k)]));
  }
  return out;
}

// Standalone normalization over all non-channel axes, per key.
template <typename T>
MultiVar<T> normalize_layer(const MultiVar<T>& x) {
  MultiVar<T> out = x;
  for (int k = 0; k < kNumKeys; ++k) {
    if (x[k].numel() == 0) continue;
    out[k] = prenorm(x[k]);
  }
  return out;
}

// ------------------------------------------------------------------- forward

enum class LayerKind { kCommunicate, kSoftmax, kDirShift, kDirCummax, kDirComm, kNonlinear };

inline std::vector<LayerKind> default_block_order() {
  return {LayerKind::kCommunicate, LayerKind::kSoftmax,  LayerKind::kDirShift,
          LayerKind::kDirCummax,   LayerKind::kDirComm,  LayerKind::kNonlinear};
}

// Residual forward pass: four identically structured blocks of pre-normed
// read/write sublayers. With all write projections zeroed the output equals
// the input residual exactly.
template <typename T>
MultiVar<T> forward_network(const NetContext<T>& ctx, const NetworkWeights<T>& w,
                            const MultiVar<T>& z, const std::vector<LayerKind>& order) {
  MultiVar<T> x = z;
  for (int b = 0; b < kNumBlocks; ++b) {
    const auto& blk = w.blocks[static_cast<size_t>(b)];
    for (LayerKind kind : order) {
      switch (kind) {
        case LayerKind::kCommunicate: x = multitensor_communicate(ctx, x, blk); break;
        case LayerKind::kSoftmax: x = softmax_layer(ctx, x, blk); break;
        case LayerKind::kDirShift: x = directional_scan_layer(ctx, x, blk, false); break;
        case LayerKind::kDirCummax: x = directional_scan_layer(ctx, x, blk, true); break;
        case LayerKind::kDirComm: x = directional_communicate(ctx, x, blk); break;
        case LayerKind::kNonlinear: x = nonlinear_layer(ctx, x, blk); break;
      }
    }
  }
  return x;
}

// ------------------------------------------------------------------- heads

template <typename T>
struct HeadOutput {
  Var<T> color_logits;  // [E, n_colors+1, H, W, 2] with a zero black plane
  Var<T> row_scores;    // [E, H, 2], already scaled by coeff^2
  Var<T> col_scores;    // [E, W, 2]
};

template <typename T>
HeadOutput<T> linear_heads(const NetContext<T>& ctx, const NetworkWeights<T>& w,
                           const MultiVar<T>& x, int64_t step) {
  const KeySpace& ks = KeySpace::instance();
  Tape<T>& tp = *ctx.tape;
  ShapeKey color_key;
  color_key.has = {true, true, false, true, true};
  ShapeKey row_key;
  row_key.has = {true, false, false, true, false};
  ShapeKey col_key;
  col_key.has = {true, false, false, false, true};

  HeadOutput<T> h;
  // Color head: bias is amplified 100x at use.
  {
    Var<T> in = prenorm(x[ks.index_of(color_key)]);
    Var<T> logits =
        ad::linear(in, ctx.leaf(w.head_color.w), ad::scale(ctx.leaf(w.head_color.b), 100.0));
    Tensor<T> black(Shape{ctx.dims.n_example, 1, ctx.dims.height, ctx.dims.width, 2});
    h.color_logits = ad::concat(std::vector<Var<T>>{logits, tp.constant(std::move(black))}, 1);
  }
  const double c = recon_schedule(step);
  {
    Var<T> rs = ctx.apply_linear(prenorm(x[ks.index_of(row_key)]), w.head_shape);
    h.row_scores = ad::scale(rs, c * c);
    Var<T> cs = ctx.apply_linear(prenorm(x[ks.index_of(col_key)]), w.head_shape);
    h.col_scores = ad::scale(cs, c * c);
  }
  return h;
}

// ------------------------------------------------------------ reconstruction

// log-weight table over origin-anchored slices: entry (h-1, w-1) holds
// inside-sum minus outside-sum of the row and column scores.
template <typename T>
Var<T> slice_logweight_table(Var<T> row_vec, Var<T> col_vec) {
  const int64_t hh = row_vec.shape()[0];
  const int64_t ww = col_vec.shape()[0];
  Var<T> rsum = ad::sum_reduce(row_vec, {0});
  Var<T> csum = ad::sum_reduce(col_vec, {0});
  Var<T> rterm = ad::sub(ad::scale(ad::cumsum(row_vec, 0), 2.0),
                         ad::broadcast_insert(rsum, {{0, hh}}));
  Var<T> cterm = ad::sub(ad::scale(ad::cumsum(col_vec, 0), 2.0),
                         ad::broadcast_insert(csum, {{0, ww}}));
  return ad::add(ad::broadcast_insert(rterm, {{1, ww}}), ad::broadcast_insert(cterm, {{0, hh}}));
}

// (1/c) * logsumexp(c * l) over the candidate terms.
template <typename T>
Var<T> tempered_logsumexp(std::vector<Var<T>> terms, double coeff) {
  std::vector<Var<T>> scaled;
  scaled.reserve(terms.size());
  for (Var<T>& t : terms) scaled.push_back(ad::reshape(ad::scale(t, coeff), Shape{1}));
  return ad::scale(ad::logsumexp_all(ad::concat(scaled, 0)), 1.0 / coeff);
}

// Negative log-likelihood of all known grids: slice placement (unless the
// shape is forced) plus per-pixel color terms under the appended-black
// softmax.
template <typename T>
Var<T> reconstruction_loss(const NetContext<T>& ctx, const HeadOutput<T>& h, const Puzzle& p,
                           const ColorMap& cm, const ShapeInfo& info, int64_t step) {
  Tape<T>& tp = *ctx.tape;
  const double coeff = recon_schedule(step);
  const int64_t canvas_h = ctx.dims.height, canvas_w = ctx.dims.width;
  Var<T> total;

  for (int i = 0; i < p.n_example(); ++i) {
    for (int side = 0; side < 2; ++side) {
      const Grid* grid = nullptr;
      if (side == kInputSide) grid = &p.pairs[static_cast<size_t>(i)].input;
      else if (p.pairs[static_cast<size_t>(i)].output.has_value())
        grid = &*p.pairs[static_cast<size_t>(i)].output;
      if (grid == nullptr) continue;

      const bool forced = side == kOutputSide && info.output_forced(i);
      Var<T> grid_ll;

      // Slice term.
      if (!forced) {
        Var<T> rv = ad::reshape(
            ad::narrow(ad::narrow(h.row_scores, 0, i, 1), 2, side, 1), Shape{canvas_h});
        Var<T> cv = ad::reshape(
            ad::narrow(ad::narrow(h.col_scores, 0, i, 1), 2, side, 1), Shape{canvas_w});
        Var<T> table = slice_logweight_table(rv, cv);
        Var<T> log_z = ad::logsumexp_all(table);
        Tensor<T> pick(Shape{canvas_h, canvas_w});
        pick[(grid->h - 1) * canvas_w + (grid->w - 1)] = T(1);
        Var<T> lw = ad::sum_all(ad::mul(table, tp.constant(std::move(pick))));
        grid_ll = ad::sub(lw, log_z);
      }

      // Color term: sum of per-pixel log-softmax at the target colors.
      {
        Var<T> logits = ad::narrow(ad::narrow(h.color_logits, 0, i, 1), 4, side, 1);
        Var<T> lse = ad::logsumexp(logits, {1});
        Var<T> logp = ad::sub(logits, ad::broadcast_insert(lse, {{1, logits.shape()[1]}}));
        Tensor<T> target(logits.shape());
        for (int y = 0; y < grid->h; ++y)
          for (int x = 0; x < grid->w; ++x) {
            const uint8_t code = grid->at(y, x);
            const int idx = code == 0 ? cm.black_index() : cm.index_of[code];
            check(idx >= 0, "reconstruction_loss: color not in map");
            target[((idx * canvas_h) + y) * canvas_w + x] = T(1);
          }
        Var<T> color_ll = ad::sum_all(ad::mul(logp, tp.constant(std::move(target))));
        grid_ll = grid_ll.valid() ? ad::add(grid_ll, color_ll) : color_ll;
      }

      // A single origin-anchored slice reproduces the target; the tempered
      // logsumexp is kept for parity with the multi-candidate form.
      Var<T> tll = tempered_logsumexp(std::vector<Var<T>>{grid_ll}, coeff);
      total = total.valid() ? ad::add(total, tll) : tll;
    }
  }
  check(total.valid(), "reconstruction_loss: no known grids");
  return ad::scale(total, -1.0);
}

}  // namespace arcmdl
