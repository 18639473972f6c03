#include <doctest.h>

#include <cmath>

#include "arcmdl/layers.hpp"
#include "arcmdl/weights.hpp"
#include "support/toys.hpp"

using namespace arcmdl;
using D = double;

namespace {

struct HeadFixture {
  Puzzle puzzle;
  ShapeInfo info;
  ColorMap cm;
  DimSizes dims;
  ParamStore<D> store;
  NetworkWeights<D> weights;

  explicit HeadFixture(Puzzle p, uint64_t seed = 1) : puzzle(std::move(p)) {
    info = infer_shape_rules(puzzle);
    cm = build_color_map(puzzle);
    dims.n_example = puzzle.n_example();
    dims.n_colors = cm.n_colors();
    dims.height = info.canvas_h;
    dims.width = info.canvas_w;
    Rng rng(seed);
    weights = init_network(store, dims, rng);
  }

  NetContext<D> context(Tape<D>& tape, std::vector<Var<D>>& leaves) {
    leaves = store.make_leaves(tape);
    NetContext<D> ctx;
    ctx.tape = &tape;
    ctx.leaves = &leaves;
    ctx.dims = dims;
    set_masks_from_shape_info(ctx, info);
    return ctx;
  }

  MultiVar<D> random_input(Tape<D>& tape, uint64_t seed) {
    Rng rng(seed);
    const KeySpace& ks = KeySpace::instance();
    MultiVar<D> x;
    x.dims = dims;
    for (int k = 0; k < kNumKeys; ++k) {
      Tensor<D> t(dims.tensor_shape(ks.key(k), ks.key(k).residual_width()));
      for (auto& v : t.data) v = rng.gaussian();
      x[k] = tape.constant(t);
    }
    return x;
  }
};

}  // namespace

TEST_CASE("black logit plane is exactly zero") {
  HeadFixture fx(toys::identity_puzzle());
  Tape<D> tape;
  std::vector<Var<D>> leaves;
  NetContext<D> ctx = fx.context(tape, leaves);
  MultiVar<D> x = fx.random_input(tape, 5);
  const HeadOutput<D> h = linear_heads(ctx, fx.weights, x, 500);
  const Tensor<D>& logits = h.color_logits.value();
  const int64_t n_classes = logits.shape[1];
  CHECK(n_classes == fx.cm.n_colors() + 1);
  const int64_t black = fx.cm.black_index();
  const int64_t hh = fx.dims.height, ww = fx.dims.width;
  for (int64_t e = 0; e < fx.dims.n_example; ++e)
    for (int64_t y = 0; y < hh; ++y)
      for (int64_t x2 = 0; x2 < ww; ++x2)
        for (int64_t s = 0; s < 2; ++s)
          CHECK(logits[(((e * n_classes + black) * hh + y) * ww + x2) * 2 + s] == 0.0);
}

TEST_CASE("color head bias is amplified 100x at use") {
  HeadFixture fx(toys::identity_puzzle());
  // zero every network weight, then set the color bias to one
  for (auto& item : fx.store.items)
    if (!item.latent)
      for (auto& v : item.value.data) v = 0.0;
  fx.store.items[(size_t)fx.weights.head_color.b].value[0] = 1.0;  // input side
  fx.store.items[(size_t)fx.weights.head_color.b].value[1] = 0.25;

  Tape<D> tape;
  std::vector<Var<D>> leaves;
  NetContext<D> ctx = fx.context(tape, leaves);
  MultiVar<D> x = fx.random_input(tape, 6);
  const HeadOutput<D> h = linear_heads(ctx, fx.weights, x, 500);
  const Tensor<D>& logits = h.color_logits.value();
  const int64_t n_classes = logits.shape[1];
  // every non-black logit equals 100 * bias of its side
  CHECK(logits[0 * 2 + 0] == doctest::Approx(100.0));
  CHECK(logits[0 * 2 + 1] == doctest::Approx(25.0));
  // the black plane is still zero
  const int64_t hh = fx.dims.height, ww = fx.dims.width;
  CHECK(logits[(((0 * n_classes + fx.cm.black_index()) * hh) * ww) * 2 + 0] == 0.0);
}

TEST_CASE("tempered logsumexp: two identical candidates add ln 2 at c=1") {
  Tape<D> tape;
  const double L = -3.7;
  Var<D> a = tape.constant(Tensor<D>::scalar(L));
  Var<D> b = tape.constant(Tensor<D>::scalar(L));
  const double total = tempered_logsumexp(std::vector<Var<D>>{a, b}, 1.0).value()[0];
  CHECK(total == doctest::Approx(L + std::log(2.0)).epsilon(1e-12));
  // single candidate: identity at any coefficient
  const double single = tempered_logsumexp(std::vector<Var<D>>{a}, 0.31).value()[0];
  CHECK(single == doctest::Approx(L).epsilon(1e-12));
}

TEST_CASE("reconstruction schedule rises exponentially from 0.1 to 1") {
  CHECK(recon_schedule(0) == doctest::Approx(0.1));
  CHECK(recon_schedule(50) == doctest::Approx(std::sqrt(0.1)));
  CHECK(recon_schedule(100) == doctest::Approx(1.0));
  CHECK(recon_schedule(5000) == doctest::Approx(1.0));
  for (int64_t t = 1; t <= 100; ++t) CHECK(recon_schedule(t) > recon_schedule(t - 1));
}

TEST_CASE("slice log-weight table matches brute force") {
  Tape<D> tape;
  Rng rng(7);
  const int64_t H = 5, W = 4;
  Tensor<D> r(Shape{H}), c(Shape{W});
  for (auto& v : r.data) v = rng.gaussian();
  for (auto& v : c.data) v = rng.gaussian();
  const Tensor<D> table =
      slice_logweight_table(tape.constant(r), tape.constant(c)).value();
  for (int64_t h = 1; h <= H; ++h)
    for (int64_t w = 1; w <= W; ++w) {
      double expect = 0;
      for (int64_t y = 0; y < H; ++y) expect += (y < h ? 1 : -1) * r[y];
      for (int64_t x = 0; x < W; ++x) expect += (x < w ? 1 : -1) * c[x];
      CHECK(table[(h - 1) * W + (w - 1)] == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("forced shapes contribute zero slice nats: 1x1 two-class grid costs ln 2") {
  // One demonstration pair and one test pair of 1x1 grids using one color.
  Puzzle p;
  Grid g(1, 1);
  g.at(0, 0) = 7;
  PuzzlePair a;
  a.input = g;
  a.output = g;
  p.pairs = {a};
  p.n_demo = 1;
  PuzzlePair t;
  t.input = g;
  p.pairs.push_back(t);
  p.hidden_test_outputs.push_back(std::nullopt);

  HeadFixture fx(p);
  REQUIRE(fx.info.rule1);  // shapes forced everywhere
  // zero weights -> all logits zero -> each known grid costs ln(2) (color 7 vs black)
  for (auto& item : fx.store.items)
    if (!item.latent)
      for (auto& v : item.value.data) v = 0.0;
  Tape<D> tape;
  std::vector<Var<D>> leaves;
  NetContext<D> ctx = fx.context(tape, leaves);
  MultiVar<D> x = fx.random_input(tape, 9);
  const HeadOutput<D> h = linear_heads(ctx, fx.weights, x, 500);
  const double loss = reconstruction_loss(ctx, h, p, fx.cm, fx.info, 500).value()[0];
  // three known grids: demo input, demo output, test input
  CHECK(loss == doctest::Approx(3 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("unforced known grids pay the slice log-probability") {
  // No shape rule: outputs vary relative to inputs and to each other.
  Puzzle p;
  auto mk = [](int h, int w, uint8_t col) {
    Grid g(h, w);
    for (auto& c : g.cells) c = col;
    return g;
  };
  PuzzlePair a;
  a.input = mk(2, 2, 1);
  a.output = mk(1, 2, 1);
  PuzzlePair b;
  b.input = mk(2, 2, 1);
  b.output = mk(2, 1, 1);
  p.pairs = {a, b};
  p.n_demo = 2;
  PuzzlePair t;
  t.input = mk(2, 2, 1);
  p.pairs.push_back(t);
  p.hidden_test_outputs.push_back(std::nullopt);

  HeadFixture fx(p);
  REQUIRE(!fx.info.rule1);
  REQUIRE(!fx.info.rule3);
  for (auto& item : fx.store.items)
    if (!item.latent)
      for (auto& v : item.value.data) v = 0.0;
  Tape<D> tape;
  std::vector<Var<D>> leaves;
  NetContext<D> ctx = fx.context(tape, leaves);
  MultiVar<D> x = fx.random_input(tape, 10);
  const HeadOutput<D> h = linear_heads(ctx, fx.weights, x, 500);
  const double loss = reconstruction_loss(ctx, h, p, fx.cm, fx.info, 500).value()[0];
  // Zero scores: the slice distribution is uniform over 2x2 candidate
  // shapes (ln 4 per grid); colors cost ln 2 per covered pixel. Grids:
  // inputs 3x(4 px), outputs 2 px + 2 px.
  const double expect = 5 * std::log(4.0) + (3 * 4 + 2 + 2) * std::log(2.0);
  CHECK(loss == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("reconstruction loss is differentiable: finite differences on a 2x2 toy") {
  Puzzle p;
  Grid gin(2, 2);
  gin.cells = {1, 0, 2, 1};
  Grid gout(2, 2);
  gout.cells = {2, 1, 0, 0};
  PuzzlePair a;
  a.input = gin;
  a.output = gout;
  p.pairs = {a};
  p.n_demo = 1;
  PuzzlePair t;
  t.input = gout;
  p.pairs.push_back(t);
  p.hidden_test_outputs.push_back(std::nullopt);

  const ShapeInfo info = infer_shape_rules(p);
  const ColorMap cm = build_color_map(p);
  const int64_t E = 2, C = cm.n_colors(), H = 2, W = 2;

  Rng rng(11);
  Tensor<D> logits0(Shape{E, C, H, W, 2});
  for (auto& v : logits0.data) v = rng.gaussian();
  Tensor<D> rows0(Shape{E, H, 2}), cols0(Shape{E, W, 2});
  for (auto& v : rows0.data) v = rng.gaussian();
  for (auto& v : cols0.data) v = rng.gaussian();

  auto eval = [&](const Tensor<D>& lg, const Tensor<D>& rs, const Tensor<D>& cs, bool backward,
                  Tensor<D>* glg, Tensor<D>* grs, Tensor<D>* gcs) {
    Tape<D> tape;
    NetContext<D> ctx;
    ctx.tape = &tape;
    ctx.dims = DimSizes{E, C, kNumDirections, H, W};
    set_masks_from_shape_info(ctx, info);
    Var<D> lgv = tape.leaf(lg), rsv = tape.leaf(rs), csv = tape.leaf(cs);
    HeadOutput<D> h;
    Tensor<D> black(Shape{E, 1, H, W, 2});
    h.color_logits = ad::concat(std::vector<Var<D>>{lgv, tape.constant(black)}, 1);
    h.row_scores = rsv;
    h.col_scores = csv;
    Var<D> loss = reconstruction_loss(ctx, h, p, cm, info, 37);
    if (backward) {
      tape.backward(loss);
      *glg = tape.node(lgv.id).grad;
      *grs = tape.node(rsv.id).grad;
      *gcs = tape.node(csv.id).grad;
    }
    return loss.value()[0];
  };

  Tensor<D> glg, grs, gcs;
  eval(logits0, rows0, cols0, true, &glg, &grs, &gcs);
  const double h = 1e-5;
  auto check_grad = [&](Tensor<D>& base, const Tensor<D>& analytic, int which) {
    for (int64_t i = 0; i < base.numel(); ++i) {
      Tensor<D> plus = base, minus = base;
      plus[i] += h;
      minus[i] -= h;
      double fp, fm;
      if (which == 0) {
        fp = eval(plus, rows0, cols0, false, nullptr, nullptr, nullptr);
        fm = eval(minus, rows0, cols0, false, nullptr, nullptr, nullptr);
      } else if (which == 1) {
        fp = eval(logits0, plus, cols0, false, nullptr, nullptr, nullptr);
        fm = eval(logits0, minus, cols0, false, nullptr, nullptr, nullptr);
      } else {
        fp = eval(logits0, rows0, plus, false, nullptr, nullptr, nullptr);
        fm = eval(logits0, rows0, minus, false, nullptr, nullptr, nullptr);
      }
      const double fd = (fp - fm) / (2 * h);
      const double an = analytic.numel() ? analytic[i] : 0.0;
      CHECK(std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}) < 1e-4);
    }
  };
  check_grad(logits0, glg, 0);
  check_grad(rows0, grs, 1);
  check_grad(cols0, gcs, 2);
}

TEST_CASE("head shape maps are tied across the row and column keys") {
  HeadFixture fx(toys::identity_puzzle());
  // With tied weights, feeding the same vector through both heads must give
  // the same scores; verified structurally by shared parameter indices.
  CHECK(fx.weights.head_shape.w >= 0);
  const KeySpace& ks = KeySpace::instance();
  ShapeKey eh;
  eh.has = {true, false, false, true, false};
  ShapeKey ew;
  ew.has = {true, false, false, false, true};
  CHECK(ks.index_of(eh) != ks.index_of(ew));
  // one parameter set serves both reads inside linear_heads
}
