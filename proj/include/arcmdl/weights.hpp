#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcmdl/keys.hpp"
#include "arcmdl/multitensor.hpp"
#include "arcmdl/rng.hpp"
#include "arcmdl/tape.hpp"
#include "arcmdl/tensor.hpp"

namespace arcmdl {

struct NonFiniteGradient : std::runtime_error {
  explicit NonFiniteGradient(const std::string& what) : std::runtime_error(what) {}
};

// Flat registry of all learnable tensors. The registration order is the
// canonical parameter order used for leaves, gradients and Adam state.
template <typename T>
struct ParamStore {
  struct Item {
    std::string name;
    Tensor<T> value;
    Tensor<T> m, v;  // Adam moments
    bool latent = false;
  };
  std::vector<Item> items;
  int64_t adam_t = 0;

  int add(std::string name, Tensor<T> init, bool latent = false) {
    Item it;
    it.name = std::move(name);
    it.m = Tensor<T>(init.shape);
    it.v = Tensor<T>(init.shape);
    it.value = std::move(init);
    it.latent = latent;
    items.push_back(std::move(it));
    return static_cast<int>(items.size() - 1);
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const Item& it : items) n += it.value.numel();
    return n;
  }

  // Learnable scalars excluding the per-puzzle latent side (means, capacity
  // adjustments, target capacities). This is the architecture's parameter
  // count and must not depend on grid size.
  int64_t network_scalar_count() const {
    int64_t n = 0;
    for (const Item& it : items)
      if (!it.latent) n += it.value.numel();
    return n;
  }

  std::vector<Var<T>> make_leaves(Tape<T>& tape) const {
    std::vector<Var<T>> leaves;
    leaves.reserve(items.size());
    for (const Item& it : items) leaves.push_back(tape.leaf(it.value, true));
    return leaves;
  }
};

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
};

// Standard bias-corrected Adam over every item in the store. Throws
// NonFiniteGradient before touching any state if a gradient is non-finite.
// Null gradients mean "all zero" (parameter not touched by the loss).
template <typename T>
void adam_step(ParamStore<T>& store, const std::vector<const Tensor<T>*>& grads,
               const AdamConfig& cfg) {
  check(grads.size() == store.items.size(), "adam_step: gradient count mismatch");
  for (size_t p = 0; p < grads.size(); ++p) {
    if (grads[p] == nullptr) continue;
    check(grads[p]->shape == store.items[p].value.shape, "adam_step: gradient shape mismatch");
    if (!grads[p]->all_finite())
      throw NonFiniteGradient("non-finite gradient in " + store.items[p].name);
  }
  store.adam_t += 1;
  const double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(store.adam_t));
  const double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(store.adam_t));
  for (size_t p = 0; p < grads.size(); ++p) {
    auto& it = store.items[p];
    for (size_t i = 0; i < it.value.data.size(); ++i) {
      const double g = grads[p] == nullptr ? 0.0 : static_cast<double>(grads[p]->data[i]);
      const double m = cfg.beta1 * static_cast<double>(it.m.data[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(it.v.data[i]) + (1.0 - cfg.beta2) * g * g;
      it.m.data[i] = static_cast<T>(m);
      it.v.data[i] = static_cast<T>(v);
      const double mhat = m / b1t;
      const double vhat = v / b2t;
      it.value.data[i] = static_cast<T>(static_cast<double>(it.value.data[i]) -
                                        cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

// ------------------------------------------------------------ weight layout

struct LinearRef {
  int w = -1, b = -1;
  bool valid() const { return w >= 0; }
};

template <typename T>
struct NetworkWeights {
  // Latent side (the distribution being fitted, one set per key).
  std::array<int, kNumKeys> latent_means{};
  std::array<int, kNumKeys> latent_adjust{};
  std::array<int, kNumKeys> latent_capacity{};
  std::array<LinearRef, kNumKeys> decode_proj{};

  struct Block {
    std::array<LinearRef, kNumKeys> comm_read_up{}, comm_write_up{};
    std::array<LinearRef, kNumKeys> comm_read_down{}, comm_write_down{};
    std::array<LinearRef, kNumKeys> softmax_read{}, softmax_write{};
    std::array<LinearRef, kNumKeys> shift_read{}, shift_write{};
    std::array<LinearRef, kNumKeys> cummax_read{}, cummax_write{};
    std::array<LinearRef, kNumKeys> dircomm_read{}, dircomm_write{};
    int dircomm_maps = -1;  // [10, 2, 2] orbit-tied direction-pair maps
    std::array<LinearRef, kNumKeys> nonlin_read{}, nonlin_write{};
  };
  std::array<Block, 4> blocks;

  LinearRef head_color;  // (example,color,height,width) residual -> 2 sides
  LinearRef head_shape;  // (example,height)/(example,width) residual -> 2, tied
};

inline constexpr int kDecodeChannels = 4;
inline constexpr int kCommUpChannels = 16;
inline constexpr int kCommDownChannels = 8;
inline constexpr int kSoftmaxChannels = 2;
inline constexpr int kDirScanChannels = 4;
inline constexpr int kDirCommChannels = 2;
inline constexpr int kNonlinChannels = 16;
inline constexpr int kNumDirOrbits = 5;
inline constexpr int kNumBlocks = 4;

// Number of softmax axis subsets for a key: all subsets of its axes that
// contain the example axis.
inline int softmax_subset_count(const ShapeKey& k) {
  if (!k.example()) return 0;
  return 1 << (k.rank() - 1);
}

inline bool is_dir_scan_key(const ShapeKey& k) {
  return k.direction() && k.height() && k.width();
}

namespace detail {

template <typename T>
Tensor<T> xavier(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  Tensor<T> t(shape);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data) v = static_cast<T>(rng.gaussian() * std);
  return t;
}

template <typename T>
LinearRef add_linear(ParamStore<T>& store, const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
  LinearRef ref;
  ref.w = store.add(name + ".w", xavier<T>(Shape{cin, cout}, cin, cout, rng));
  ref.b = store.add(name + ".b", Tensor<T>(Shape{cout}));
  return ref;
}

// Registers one linear per tie-representative key and aliases mirror keys.
template <typename T, typename Filter>
void add_tied_linears(ParamStore<T>& store, const std::string& name, Filter include,
                      std::function<int64_t(const ShapeKey&)> cin,
                      std::function<int64_t(const ShapeKey&)> cout, Rng& rng,
                      std::array<LinearRef, kNumKeys>& out) {
  const KeySpace& ks = KeySpace::instance();
  for (int k = 0; k < kNumKeys; ++k) {
    const ShapeKey& key = ks.key(k);
    if (!include(key)) continue;
    if (key.tie_representative() != key) continue;  // aliased below
    out[static_cast<size_t>(k)] = add_linear(store, name + key.str(), cin(key), cout(key), rng);
  }
  for (int k = 0; k < kNumKeys; ++k) {
    const ShapeKey& key = ks.key(k);
    if (!include(key)) continue;
    if (key.tie_representative() != key)
      out[static_cast<size_t>(k)] = out[static_cast<size_t>(ks.index_of(key.tie_representative()))];
  }
}

}  // namespace detail

inline double capacity_theta_init() { return std::log(1e4) / 10.0; }

template <typename T>
NetworkWeights<T> init_network(ParamStore<T>& store, const DimSizes& dims, Rng& rng) {
  const KeySpace& ks = KeySpace::instance();
  NetworkWeights<T> w;

  for (int k = 0; k < kNumKeys; ++k) {
    const ShapeKey& key = ks.key(k);
    const Shape latent_shape = dims.tensor_shape(key, kDecodeChannels);
    Tensor<T> means(latent_shape);
    for (auto& v : means.data) v = static_cast<T>(rng.gaussian() * 1e-2);
    w.latent_means[static_cast<size_t>(k)] = store.add("latent.means" + key.str(), std::move(means), true);
    w.latent_adjust[static_cast<size_t>(k)] =
        store.add("latent.adjust" + key.str(), Tensor<T>(latent_shape), true);
    w.latent_capacity[static_cast<size_t>(k)] = store.add(
        "latent.capacity" + key.str(), Tensor<T>::scalar(static_cast<T>(capacity_theta_init())), true);
  }

  auto all_keys = [](const ShapeKey&) { return true; };
  auto res = [](const ShapeKey& k) { return static_cast<int64_t>(k.residual_width()); };

  detail::add_tied_linears<T>(store, "decode.proj", all_keys,
                              [](const ShapeKey&) { return int64_t{kDecodeChannels}; }, res, rng,
                              w.decode_proj);

  for (int b = 0; b < kNumBlocks; ++b) {
    auto& blk = w.blocks[static_cast<size_t>(b)];
    const std::string pre = "block" + std::to_string(b) + ".";
    detail::add_tied_linears<T>(store, pre + "comm.read_up", all_keys, res,
                                [](const ShapeKey&) { return int64_t{kCommUpChannels}; }, rng,
                                blk.comm_read_up);
    detail::add_tied_linears<T>(store, pre + "comm.write_up", all_keys,
                                [](const ShapeKey&) { return int64_t{kCommUpChannels}; }, res, rng,
                                blk.comm_write_up);
    detail::add_tied_linears<T>(store, pre + "comm.read_down", all_keys, res,
                                [](const ShapeKey&) { return int64_t{kCommDownChannels}; }, rng,
                                blk.comm_read_down);
    detail::add_tied_linears<T>(store, pre + "comm.write_down", all_keys,
                                [](const ShapeKey&) { return int64_t{kCommDownChannels}; }, res, rng,
                                blk.comm_write_down);

    // Softmax reads/writes are deliberately left untied across the
    // height-only/width-only pair (the outputs index different axis subsets).
    for (int k = 0; k < kNumKeys; ++k) {
      const ShapeKey& key = ks.key(k);
      const int nsub = softmax_subset_count(key);
      if (nsub == 0) continue;
      blk.softmax_read[static_cast<size_t>(k)] =
          detail::add_linear(store, pre + "softmax.read" + key.str(), res(key), kSoftmaxChannels, rng);
      blk.softmax_write[static_cast<size_t>(k)] = detail::add_linear(
          store, pre + "softmax.write" + key.str(), int64_t{kSoftmaxChannels} * nsub, res(key), rng);
    }

    for (int k = 0; k < kNumKeys; ++k) {
      const ShapeKey& key = ks.key(k);
      if (!is_dir_scan_key(key)) continue;
      blk.shift_read[static_cast<size_t>(k)] =
          detail::add_linear(store, pre + "shift.read" + key.str(), res(key), kDirScanChannels, rng);
      blk.shift_write[static_cast<size_t>(k)] =
          detail::add_linear(store, pre + "shift.write" + key.str(), kDirScanChannels, res(key), rng);
      blk.cummax_read[static_cast<size_t>(k)] =
          detail::add_linear(store, pre + "cummax.read" + key.str(), res(key), kDirScanChannels, rng);
      blk.cummax_write[static_cast<size_t>(k)] =
          detail::add_linear(store, pre + "cummax.write" + key.str(), kDirScanChannels, res(key), rng);
    }

    auto dir_keys = [](const ShapeKey& k) { return k.direction(); };
    detail::add_tied_linears<T>(store, pre + "dircomm.read", dir_keys, res,
                                [](const ShapeKey&) { return int64_t{kDirCommChannels}; }, rng,
                                blk.dircomm_read);
    detail::add_tied_linears<T>(store, pre + "dircomm.write", dir_keys,
                                [](const ShapeKey&) { return int64_t{kDirCommChannels}; }, res, rng,
                                blk.dircomm_write);
    blk.dircomm_maps = store.add(
        pre + "dircomm.maps",
        detail::xavier<T>(Shape{kNumDirOrbits, kDirCommChannels, kDirCommChannels}, kDirCommChannels,
                          kDirCommChannels, rng));

    detail::add_tied_linears<T>(store, pre + "nonlin.read", all_keys, res,
                                [](const ShapeKey&) { return int64_t{kNonlinChannels}; }, rng,
                                blk.nonlin_read);
    detail::add_tied_linears<T>(store, pre + "nonlin.write", all_keys,
                                [](const ShapeKey&) { return int64_t{kNonlinChannels}; }, res, rng,
                                blk.nonlin_write);
  }

  // Color head: the input and output columns start identical so that
  // output prediction defaults to copying the input.
  {
    Tensor<T> cw(Shape{16, 2});
    const double std = std::sqrt(2.0 / (16.0 + 2.0));
    for (int64_t i = 0; i < 16; ++i) {
      const T v = static_cast<T>(rng.gaussian() * std);
      cw[i * 2 + 0] = v;
      cw[i * 2 + 1] = v;
    }
    w.head_color.w = store.add("head.color.w", std::move(cw));
    w.head_color.b = store.add("head.color.b", Tensor<T>(Shape{2}));
  }
  w.head_shape = detail::add_linear(store, "head.shape", int64_t{16}, int64_t{2}, rng);

  return w;
}

}  // namespace arcmdl
