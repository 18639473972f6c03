#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "arcmdl/tensor.hpp"

namespace arcmdl {

// Non-channel dimensions of a multitensor, in canonical axis order. The
// channel axis is always present and always last.
enum Dim : int { kExample = 0, kColor = 1, kDirection = 2, kHeight = 3, kWidth = 4 };
inline constexpr int kNumDims = 5;
inline constexpr int kNumDirections = 8;

struct ShapeKey {
  std::array<bool, kNumDims> has{};

  bool example() const { return has[kExample]; }
  bool color() const { return has[kColor]; }
  bool direction() const { return has[kDirection]; }
  bool height() const { return has[kHeight]; }
  bool width() const { return has[kWidth]; }

  int mask() const {
    int m = 0;
    for (int i = 0; i < kNumDims; ++i)
      if (has[i]) m |= 1 << i;
    return m;
  }

  static ShapeKey from_mask(int m) {
    ShapeKey k;
    for (int i = 0; i < kNumDims; ++i) k.has[i] = (m >> i) & 1;
    return k;
  }

  // Legality: (1) at least one non-example dimension; (2) height or width
  // requires example.
  bool legal() const {
    const bool non_example = color() || direction() || height() || width();
    if (!non_example) return false;
    if ((height() || width()) && !example()) return false;
    return true;
  }

  int rank() const {  // non-channel axes
    int r = 0;
    for (bool b : has) r += b ? 1 : 0;
    return r;
  }

  // Position of `dim` among this key's axes, or -1 when absent.
  int axis_of(Dim dim) const {
    if (!has[dim]) return -1;
    int pos = 0;
    for (int i = 0; i < dim; ++i)
      if (has[i]) ++pos;
    return pos;
  }

  int channel_axis() const { return rank(); }

  // Residual stream channel width: 8 when the direction axis is present,
  // else 16.
  int residual_width() const { return direction() ? 8 : 16; }

  bool subset_of(const ShapeKey& other) const {
    for (int i = 0; i < kNumDims; ++i)
      if (has[i] && !other.has[i]) return false;
    return true;
  }

  ShapeKey mirrored() const {  // swap height and width flags
    ShapeKey k = *this;
    std::swap(k.has[kHeight], k.has[kWidth]);
    return k;
  }

  // Representative for height/width weight tying: a width-only key shares
  // weights with its height-only mirror.
  ShapeKey tie_representative() const {
    if (width() && !height()) return mirrored();
    return *this;
  }

  bool operator==(const ShapeKey& o) const { return has == o.has; }
  bool operator!=(const ShapeKey& o) const { return !(*this == o); }
  bool operator<(const ShapeKey& o) const { return mask() < o.mask(); }

  std::string str() const {
    static const char* names[kNumDims] = {"example", "color", "direction", "height", "width"};
    std::string s = "(";
    bool first = true;
    for (int i = 0; i < kNumDims; ++i)
      if (has[i]) {
        if (!first) s += ",";
        s += names[i];
        first = false;
      }
    s += ")";
    return s;
  }
};

inline std::vector<ShapeKey> enumerate_legal_shapes() {
  std::vector<ShapeKey> keys;
  for (int m = 0; m < (1 << kNumDims); ++m) {
    ShapeKey k = ShapeKey::from_mask(m);
    if (k.legal()) keys.push_back(k);
  }
  return keys;
}

inline constexpr int kNumKeys = 18;

// Canonical key ordering shared by every module (trace columns, weight
// layout, iteration order).
class KeySpace {
 public:
  static const KeySpace& instance() {
    static const KeySpace ks;
    return ks;
  }

  const std::vector<ShapeKey>& keys() const { return keys_; }
  const ShapeKey& key(int i) const { return keys_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(keys_.size()); }

  int index_of(const ShapeKey& k) const {
    const int i = index_by_mask_[static_cast<size_t>(k.mask())];
    check(i >= 0, "index_of: illegal key " + k.str());
    return i;
  }

 private:
  KeySpace() : index_by_mask_(32, -1) {
    keys_ = enumerate_legal_shapes();
    for (size_t i = 0; i < keys_.size(); ++i)
      index_by_mask_[static_cast<size_t>(keys_[i].mask())] = static_cast<int>(i);
  }
  std::vector<ShapeKey> keys_;
  std::vector<int> index_by_mask_;
};

// Per-puzzle extents of the five non-channel dimensions.
struct DimSizes {
  int64_t n_example = 0;
  int64_t n_colors = 0;
  int64_t n_directions = kNumDirections;
  int64_t height = 0;
  int64_t width = 0;

  int64_t extent(Dim d) const {
    switch (d) {
      case kExample: return n_example;
      case kColor: return n_colors;
      case kDirection: return n_directions;
      case kHeight: return height;
      case kWidth: return width;
    }
    return 0;
  }

  Shape tensor_shape(const ShapeKey& k, int64_t channels) const {
    Shape s;
    for (int i = 0; i < kNumDims; ++i)
      if (k.has[i]) s.push_back(extent(static_cast<Dim>(i)));
    s.push_back(channels);
    return s;
  }
};

}  // namespace arcmdl
