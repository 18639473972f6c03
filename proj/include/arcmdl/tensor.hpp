#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace arcmdl {

using Shape = std::vector<int64_t>;
using AxisList = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Rank 0 is a scalar (numel 1). Zero-size axes are
// allowed and simply carry no data.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), T(0)) {}
  Tensor(Shape s, T fill) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

  static Tensor scalar(T v) {
    Tensor t{Shape{}};
    t.data[0] = v;
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  std::vector<int64_t> strides() const {
    std::vector<int64_t> st(shape.size(), 1);
    for (int i = rank() - 2; i >= 0; --i) st[i] = st[i + 1] * shape[i + 1];
    return st;
  }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  T& at(const std::vector<int64_t>& idx) {
    return data[static_cast<size_t>(flat_index(idx))];
  }
  const T& at(const std::vector<int64_t>& idx) const {
    return data[static_cast<size_t>(flat_index(idx))];
  }

  int64_t flat_index(const std::vector<int64_t>& idx) const {
    int64_t off = 0, stride = 1;
    for (int i = rank() - 1; i >= 0; --i) {
      off += idx[static_cast<size_t>(i)] * stride;
      stride *= shape[static_cast<size_t>(i)];
    }
    return off;
  }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

// Map a flat index in `shape` to the flat index of the reduced tensor that
// drops `axes` (sorted ascending). Used by reductions and broadcasts.
struct AxisReducer {
  Shape in_shape;
  std::vector<int64_t> in_strides;
  std::vector<int64_t> out_stride_of_axis;  // 0 for reduced axes
  int64_t out_numel = 1;
  int64_t group_size = 1;  // product of reduced extents

  AxisReducer(const Shape& shape, const AxisList& axes_sorted) : in_shape(shape) {
    const int r = static_cast<int>(shape.size());
    in_strides.assign(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * shape[static_cast<size_t>(i + 1)];
    std::vector<bool> reduced(static_cast<size_t>(r), false);
    for (int a : axes_sorted) {
      check(a >= 0 && a < r, "reduce axis out of range");
      reduced[static_cast<size_t>(a)] = true;
      group_size *= shape[static_cast<size_t>(a)];
    }
    Shape out_shape;
    for (int i = 0; i < r; ++i)
      if (!reduced[static_cast<size_t>(i)]) out_shape.push_back(shape[static_cast<size_t>(i)]);
    out_numel = shape_numel(out_shape);
    std::vector<int64_t> out_strides(out_shape.size(), 1);
    for (int i = static_cast<int>(out_shape.size()) - 2; i >= 0; --i)
      out_strides[static_cast<size_t>(i)] = out_strides[static_cast<size_t>(i + 1)] * out_shape[static_cast<size_t>(i + 1)];
    out_stride_of_axis.assign(static_cast<size_t>(r), 0);
    int j = 0;
    for (int i = 0; i < r; ++i) {
      if (!reduced[static_cast<size_t>(i)]) out_stride_of_axis[static_cast<size_t>(i)] = out_strides[static_cast<size_t>(j++)];
    }
  }

  int64_t out_index(int64_t flat_in) const {
    int64_t out = 0;
    for (size_t i = 0; i < in_shape.size(); ++i) {
      const int64_t coord = (flat_in / in_strides[i]) % in_shape[i];
      out += coord * out_stride_of_axis[i];
    }
    return out;
  }

  // Calls fn(flat_in, flat_out) for every input element in row-major order,
  // tracking the output offset incrementally (no per-element division).
  template <typename Fn>
  void for_each(Fn&& fn) const {
    const int r = static_cast<int>(in_shape.size());
    const int64_t n = shape_numel(in_shape);
    if (n == 0) return;
    std::vector<int64_t> coord(static_cast<size_t>(r), 0);
    int64_t out = 0;
    for (int64_t i = 0; i < n; ++i) {
      fn(i, out);
      for (int a = r - 1; a >= 0; --a) {
        if (++coord[static_cast<size_t>(a)] < in_shape[static_cast<size_t>(a)]) {
          out += out_stride_of_axis[static_cast<size_t>(a)];
          break;
        }
        out -= out_stride_of_axis[static_cast<size_t>(a)] * (in_shape[static_cast<size_t>(a)] - 1);
        coord[static_cast<size_t>(a)] = 0;
      }
    }
  }
};

inline Shape drop_axes(const Shape& s, const AxisList& axes_sorted) {
  Shape out;
  size_t k = 0;
  for (int i = 0; i < static_cast<int>(s.size()); ++i) {
    if (k < axes_sorted.size() && axes_sorted[k] == i) {
      ++k;
      continue;
    }
    out.push_back(s[static_cast<size_t>(i)]);
  }
  return out;
}

inline Shape insert_axes(const Shape& s, const std::vector<std::pair<int, int64_t>>& where) {
  // `where` holds (position in output, extent), positions ascending.
  Shape out = s;
  for (const auto& [pos, extent] : where) out.insert(out.begin() + pos, extent);
  return out;
}

}  // namespace arcmdl
