#include <doctest.h>

#include <set>

#include "arcmdl/multitensor.hpp"

using namespace arcmdl;

namespace {

DimSizes test_dims(int64_t e = 3, int64_t c = 2, int64_t h = 4, int64_t w = 4) {
  DimSizes d;
  d.n_example = e;
  d.n_colors = c;
  d.height = h;
  d.width = w;
  return d;
}

MultiTensor<double> random_mt(const DimSizes& dims, Rng& rng, int channels = 3) {
  const KeySpace& ks = KeySpace::instance();
  MultiTensor<double> x;
  x.dims = dims;
  for (int k = 0; k < kNumKeys; ++k) {
    x[k] = Tensor<double>(dims.tensor_shape(ks.key(k), channels));
    for (auto& v : x[k].data) v = rng.gaussian();
  }
  return x;
}

bool equal_mt(const MultiTensor<double>& a, const MultiTensor<double>& b) {
  for (int k = 0; k < kNumKeys; ++k) {
    if (a[k].shape != b[k].shape) return false;
    if (a[k].data != b[k].data) return false;  // exact: index permutation only
  }
  return true;
}

}  // namespace

TEST_CASE("exactly 18 legal shape keys, matching the brute-force filter") {
  const auto keys = enumerate_legal_shapes();
  CHECK(keys.size() == 18);

  std::set<int> brute;
  for (int m = 0; m < 32; ++m) {
    const ShapeKey k = ShapeKey::from_mask(m);
    const bool rule1 = k.color() || k.direction() || k.height() || k.width();
    const bool rule2 = !(k.height() || k.width()) || k.example();
    if (rule1 && rule2) brute.insert(m);
  }
  std::set<int> enumerated;
  for (const ShapeKey& k : keys) enumerated.insert(k.mask());
  CHECK(brute == enumerated);
}

TEST_CASE("height alone is illegal; example+color is legal") {
  ShapeKey h;
  h.has = {false, false, false, true, false};
  CHECK(!h.legal());
  ShapeKey ec;
  ec.has = {true, true, false, false, false};
  CHECK(ec.legal());
}

TEST_CASE("canonical key order is stable") {
  const auto a = enumerate_legal_shapes();
  const auto b = enumerate_legal_shapes();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  // and KeySpace indexes agree with it
  const KeySpace& ks = KeySpace::instance();
  for (size_t i = 0; i < a.size(); ++i) CHECK(ks.index_of(a[i]) == static_cast<int>(i));
}

TEST_CASE("residual widths: 8 with direction, 16 without") {
  const KeySpace& ks = KeySpace::instance();
  for (int k = 0; k < kNumKeys; ++k)
    CHECK(ks.key(k).residual_width() == (ks.key(k).direction() ? 8 : 16));
}

TEST_CASE("identity symmetry leaves a multitensor unchanged") {
  Rng rng(1);
  const DimSizes dims = test_dims();
  const MultiTensor<double> x = random_mt(dims, rng);
  const SymmetryElement id = SymmetryElement::identity(dims.n_example, dims.n_colors);
  CHECK(equal_mt(apply_symmetry(x, id), x));
}

TEST_CASE("applying g then g^-1 restores the input exactly") {
  Rng rng(2);
  const DimSizes dims = test_dims();
  for (int trial = 0; trial < 20; ++trial) {
    const MultiTensor<double> x = random_mt(dims, rng);
    const SymmetryElement g = SymmetryElement::random(dims.n_example, dims.n_colors, rng);
    CHECK(equal_mt(apply_symmetry(apply_symmetry(x, g), g.inverse()), x));
  }
}

TEST_CASE("group action: g2(g1 x) equals (g2 compose g1) x") {
  Rng rng(3);
  const DimSizes dims = test_dims();
  for (int trial = 0; trial < 20; ++trial) {
    const MultiTensor<double> x = random_mt(dims, rng);
    const SymmetryElement g1 = SymmetryElement::random(dims.n_example, dims.n_colors, rng);
    const SymmetryElement g2 = SymmetryElement::random(dims.n_example, dims.n_colors, rng);
    const MultiTensor<double> lhs = apply_symmetry(apply_symmetry(x, g1), g2);
    const MultiTensor<double> rhs = apply_symmetry(x, SymmetryElement::compose(g2, g1));
    CHECK(equal_mt(lhs, rhs));
  }
}

TEST_CASE("two quarter turns equal a half turn") {
  Rng rng(4);
  const DimSizes dims = test_dims(2, 1, 5, 5);
  const MultiTensor<double> x = random_mt(dims, rng);
  SymmetryElement rot90 = SymmetryElement::identity(dims.n_example, dims.n_colors);
  rot90.d4.rot = 1;
  SymmetryElement rot180 = SymmetryElement::identity(dims.n_example, dims.n_colors);
  rot180.d4.rot = 2;
  CHECK(equal_mt(apply_symmetry(apply_symmetry(x, rot90), rot90), apply_symmetry(x, rot180)));
}

TEST_CASE("direction permutation matches the compass convention") {
  // E index 0; a quarter turn counter-clockwise sends E to N (index 2).
  D4Element r;
  r.rot = 1;
  CHECK(r.dir(0) == 2);
  CHECK(r.dir(2) == 4);
  // mirror across the vertical axis swaps E and W, fixes N and S
  D4Element f;
  f.flip = true;
  CHECK(f.dir(0) == 4);
  CHECK(f.dir(2) == 2);
  CHECK(f.dir(6) == 6);
  for (int d = 0; d < 8; ++d) {
    CHECK(r.dir_inv(r.dir(d)) == d);
    CHECK(f.dir_inv(f.dir(d)) == d);
  }
}

TEST_CASE("zeros_like then add restores x; map twice composes") {
  Rng rng(5);
  const DimSizes dims = test_dims(2, 2, 3, 3);
  const MultiTensor<double> x = random_mt(dims, rng);
  const MultiTensor<double> z = zeros_like(x);
  const MultiTensor<double> sum = zip(x, z, [](double a, double b) { return a + b; });
  CHECK(equal_mt(sum, x));

  const auto twice = elementwise_map(elementwise_map(x, [](double v) { return v * 2; }),
                                     [](double v) { return v * 2; });
  const auto four = elementwise_map(x, [](double v) { return v * 4; });
  CHECK(equal_mt(twice, four));
}

TEST_CASE("zip(+) commutes with apply_symmetry") {
  Rng rng(6);
  const DimSizes dims = test_dims();
  for (int trial = 0; trial < 10; ++trial) {
    const MultiTensor<double> a = random_mt(dims, rng);
    const MultiTensor<double> b = random_mt(dims, rng);
    const SymmetryElement g = SymmetryElement::random(dims.n_example, dims.n_colors, rng);
    const auto lhs = apply_symmetry(zip(a, b, [](double u, double v) { return u + v; }), g);
    const auto rhs = zip(apply_symmetry(a, g), apply_symmetry(b, g),
                         [](double u, double v) { return u + v; });
    CHECK(equal_mt(lhs, rhs));
  }
}
