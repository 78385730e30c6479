#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "advnmt/gradcheck.hpp"
#include "advnmt/params.hpp"
#include "advnmt/rng.hpp"
#include "advnmt/tape.hpp"
#include "advnmt/tensor.hpp"

using namespace advnmt;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double range = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-range, range);
  return t;
}

// FD wrapper for a scalar tape expression over a single named parameter set
double fd_check(ParameterStore& store, const std::function<Var(Tape&)>& expr) {
  store.zero_grads();
  {
    Tape tape;
    tape.backward(expr(tape));
  }
  auto value = [&]() {
    Tape tape(false);
    return tape.value(expr(tape)).at(0);
  };
  GradCheckReport rep = finite_diff_check(store, value);
  store.zero_grads();
  return rep.max_rel_error;
}

}  // namespace

TEST_CASE("matmul identity and hand-computed product", "[tensor]") {
  Tape tape;
  Tensor id3 = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) id3.at(i, i) = 1.0;
  Rng rng(7);
  Tensor m = random_tensor({3, 3}, rng);
  Var out = tape.matmul(tape.leaf(id3), tape.leaf(m));
  REQUIRE(tape.value(out).data == m.data);

  Var prod = tape.matmul(tape.leaf(Tensor({2, 2}, {1, 2, 3, 4})), tape.leaf(Tensor({2, 1}, {1, 1})));
  CHECK(tape.value(prod).at(0, 0) == 3.0);
  CHECK(tape.value(prod).at(1, 0) == 7.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes", "[tensor]") {
  Tape tape;
  Var a = tape.leaf(Tensor::zeros({2, 3}));
  Var b = tape.leaf(Tensor::zeros({4, 5}));
  REQUIRE_THROWS_WITH(tape.matmul(a, b), Catch::Matchers::ContainsSubstring("(2x3)") &&
                                             Catch::Matchers::ContainsSubstring("(4x5)"));
}

TEST_CASE("matmul gradient of sum(A*B) matches finite differences", "[tensor]") {
  Rng rng(11);
  ParameterStore store;
  store.add("a", random_tensor({3, 4}, rng));
  store.add("b", random_tensor({4, 2}, rng));
  const double err = fd_check(store, [&](Tape& t) {
    return t.sum(t.matmul(t.param(store, "a"), t.param(store, "b")));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("sigmoid values and derivative at zero", "[tensor]") {
  Tape tape;
  Var x = tape.leaf(Tensor({3}, {0.0, -40.0, 40.0}));
  Var y = tape.sigmoid(x);
  CHECK(tape.value(y).at(0) == 0.5);
  CHECK(tape.value(y).at(1) > 0.0);
  CHECK(tape.value(y).at(1) < 1e-6);
  CHECK(tape.value(y).at(2) < 1.0);

  ParameterStore store;
  store.add("x", Tensor({1}, {0.0}));
  Tape t2;
  Var s = t2.sigmoid(t2.param(store, "x"));
  t2.backward(t2.sum(s));
  CHECK(store.grad("x").at(0) == Catch::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax symmetry, closed form and shift invariance", "[tensor]") {
  Tape tape;
  Var u = tape.softmax(tape.leaf(Tensor({4}, {1.5, 1.5, 1.5, 1.5})));
  for (int i = 0; i < 4; ++i) CHECK(tape.value(u).at(i) == Catch::Approx(0.25).margin(1e-15));

  Var two = tape.softmax(tape.leaf(Tensor({2}, {0.0, std::log(2.0)})));
  CHECK(tape.value(two).at(0) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(tape.value(two).at(1) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));

  Rng rng(3);
  Tensor logits = random_tensor({6}, rng, 4.0);
  Tensor shifted = logits;
  for (double& v : shifted.data) v += 123.456;
  Var p1 = tape.softmax(tape.leaf(logits));
  Var p2 = tape.softmax(tape.leaf(shifted));
  double sum = 0.0;
  for (int i = 0; i < 6; ++i) {
    CHECK(std::fabs(tape.value(p1).at(i) - tape.value(p2).at(i)) < 1e-12);
    sum += tape.value(p1).at(i);
  }
  CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("softmax normalizes along the requested 2D axis", "[tensor]") {
  Tape tape;
  Rng rng(5);
  Var m = tape.leaf(random_tensor({3, 4}, rng, 2.0));
  Var rows = tape.softmax(m, 1);
  for (int i = 0; i < 3; ++i) {
    double s = 0.0;
    for (int j = 0; j < 4; ++j) s += tape.value(rows).at(i, j);
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
  Var cols = tape.softmax(m, 0);
  for (int j = 0; j < 4; ++j) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += tape.value(cols).at(i, j);
    CHECK(std::fabs(s - 1.0) < 1e-12);
  }
  REQUIRE_THROWS_AS(tape.softmax(m, 2), std::invalid_argument);
}

TEST_CASE("conv2d_3x3 zero weights give 0.5 everywhere and center tap drives 1x1 input", "[tensor]") {
  Tape tape;
  Var img = tape.leaf(Tensor({2, 3, 3}, std::vector<double>(18, 1.0)));
  Var w0 = tape.leaf(Tensor::zeros({4, 2, 3, 3}));
  Var b0 = tape.leaf(Tensor::zeros({4}));
  Var out = tape.conv2d_3x3(img, w0, b0);
  REQUIRE(tape.value(out).shape == Shape{4, 3, 3});
  for (double v : tape.value(out).data) CHECK(v == 0.5);

  // 1x1 spatial input: zero padding means only the center weight contributes
  Tensor w = Tensor::zeros({1, 1, 3, 3});
  for (int u = 0; u < 3; ++u)
    for (int v = 0; v < 3; ++v) w.at(0, 0, u, v) = 10.0 * u + v;
  Tensor x({1, 1, 1}, {2.0});
  Tape t2;
  Var o = t2.conv2d_3x3(t2.leaf(x), t2.leaf(w), t2.leaf(Tensor::zeros({1})));
  const double center = w.at(0, 0, 1, 1);
  CHECK(t2.value(o).at(0, 0, 0) == Catch::Approx(Tape::stable_sigmoid(center * 2.0)).epsilon(1e-15));
}

TEST_CASE("conv2d_3x3 rejects channel mismatch", "[tensor]") {
  Tape tape;
  Var img = tape.leaf(Tensor::zeros({2, 4, 4}));
  Var w = tape.leaf(Tensor::zeros({3, 5, 3, 3}));
  Var b = tape.leaf(Tensor::zeros({3}));
  REQUIRE_THROWS_AS(tape.conv2d_3x3(img, w, b), std::invalid_argument);
}

TEST_CASE("conv2d_3x3 gradients match finite differences", "[tensor]") {
  Rng rng(23);
  ParameterStore store;
  store.add("img", random_tensor({2, 2, 4, 4}, rng));
  store.add("w", random_tensor({3, 2, 3, 3}, rng));
  store.add("b", random_tensor({3}, rng));
  const double err = fd_check(store, [&](Tape& t) {
    return t.sum(t.conv2d_3x3(t.param(store, "img"), t.param(store, "w"), t.param(store, "b")));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("maxpool_2x2 window maxima, constant maps and odd-size padding", "[tensor]") {
  Tape tape;
  Var win = tape.maxpool_2x2(tape.leaf(Tensor({1, 2, 2}, {1, 2, 3, 4})));
  CHECK(tape.value(win).at(0, 0, 0) == 4.0);

  Var constant = tape.maxpool_2x2(tape.leaf(Tensor::full({1, 4, 4}, 3.5)));
  REQUIRE(tape.value(constant).shape == Shape{1, 2, 2});
  for (double v : tape.value(constant).data) CHECK(v == 3.5);

  // 3x3 input behaves as padded with -inf to 4x4: output 2x2, border windows
  // reduce to the in-bounds cells
  Tensor odd = Tensor::zeros({1, 3, 3});
  for (int i = 0; i < 9; ++i) odd.data[static_cast<std::size_t>(i)] = i;  // row-major 0..8
  Var pooled = tape.maxpool_2x2(tape.leaf(odd));
  REQUIRE(tape.value(pooled).shape == Shape{1, 2, 2});
  CHECK(tape.value(pooled).at(0, 0, 0) == 4.0);
  CHECK(tape.value(pooled).at(0, 0, 1) == 5.0);
  CHECK(tape.value(pooled).at(0, 1, 0) == 7.0);
  CHECK(tape.value(pooled).at(0, 1, 1) == 8.0);
}

TEST_CASE("maxpool backward routes gradient to the first max in row-major order", "[tensor]") {
  ParameterStore store;
  store.add("x", Tensor({1, 2, 2}, {7.0, 7.0, 1.0, 0.0}));
  Tape tape;
  Var out = tape.maxpool_2x2(tape.param(store, "x"));
  tape.backward(tape.sum(out));
  CHECK(store.grad("x").data == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("bce_loss closed forms and clamp behavior", "[tensor]") {
  Tape tape;
  Var half = tape.bce(tape.leaf(Tensor({1}, {0.5})), {1.0});
  CHECK(tape.value(half).at(0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));

  Var confident = tape.bce(tape.leaf(Tensor({1}, {1.0 - 1e-12})), {1.0});
  CHECK(tape.value(confident).at(0) >= 0.0);
  CHECK(tape.value(confident).at(0) < 1e-6);

  // a prediction clamped at 1 - eps with label 0 costs ln(1/eps), finite
  Var wrong = tape.bce(tape.leaf(Tensor({1}, {1.0})), {0.0});
  CHECK(std::isfinite(tape.value(wrong).at(0)));
  CHECK(tape.value(wrong).at(0) == Catch::Approx(-std::log(Tape::kProbEps)).epsilon(1e-6));
}

TEST_CASE("batch_norm train statistics, inverse transform and eval determinism", "[tensor]") {
  ParameterStore store;
  store.add("gamma", Tensor({1}, {1.0}));
  store.add("beta", Tensor({1}, {0.0}));
  Tensor rm = Tensor::zeros({1});
  Tensor rv = Tensor::full({1}, 1.0);

  const double a = 1.75;
  Tape tape;
  Var x = tape.leaf(Tensor({2, 1}, {-a, a}));
  Var y = tape.batch_norm(x, tape.param(store, "gamma"), tape.param(store, "beta"), rm, rv, true);
  CHECK(tape.value(y).at(0, 0) == Catch::Approx(-1.0).epsilon(1e-5));
  CHECK(tape.value(y).at(1, 0) == Catch::Approx(1.0).epsilon(1e-5));

  // shift=batch mean, scale=batch sigma reproduces the input
  Rng rng(9);
  Tensor batch = random_tensor({4, 1}, rng, 2.0);
  double mu = 0.0;
  for (double v : batch.data) mu += v;
  mu /= 4.0;
  double var = 0.0;
  for (double v : batch.data) var += (v - mu) * (v - mu);
  var /= 4.0;
  ParameterStore inv;
  inv.add("gamma", Tensor({1}, {std::sqrt(var + Tape::kBnEps)}));
  inv.add("beta", Tensor({1}, {mu}));
  Tape t2;
  Var y2 = t2.batch_norm(t2.leaf(batch), t2.param(inv, "gamma"), t2.param(inv, "beta"), rm, rv, true,
                         /*update_running=*/false);
  for (int i = 0; i < 4; ++i) CHECK(t2.value(y2).at(i, 0) == Catch::Approx(batch.at(i, 0)).epsilon(1e-9));

  // eval mode depends only on the running stats
  Tensor rm2 = Tensor({1}, {0.3});
  Tensor rv2 = Tensor({1}, {2.0});
  Tape t3;
  Var in3 = t3.leaf(Tensor({1, 1}, {0.9}));
  Var e1 = t3.batch_norm(in3, t3.param(store, "gamma"), t3.param(store, "beta"), rm2, rv2, false);
  Var e2 = t3.batch_norm(in3, t3.param(store, "gamma"), t3.param(store, "beta"), rm2, rv2, false);
  CHECK(t3.value(e1).at(0, 0) == t3.value(e2).at(0, 0));
}

TEST_CASE("batch_norm rejects a train-mode batch of one", "[tensor]") {
  ParameterStore store;
  store.add("gamma", Tensor({2}, {1.0, 1.0}));
  store.add("beta", Tensor::zeros({2}));
  Tensor rm = Tensor::zeros({2});
  Tensor rv = Tensor::full({2}, 1.0);
  Tape tape;
  Var x = tape.leaf(Tensor::zeros({1, 2}));
  REQUIRE_THROWS_AS(tape.batch_norm(x, tape.param(store, "gamma"), tape.param(store, "beta"), rm, rv, true),
                    std::invalid_argument);
}

TEST_CASE("batch_norm gradients match finite differences in both modes", "[tensor]") {
  Rng rng(31);
  ParameterStore store;
  store.add("x", random_tensor({3, 2, 2, 2}, rng));
  store.add("gamma", random_tensor({2}, rng));
  store.add("beta", random_tensor({2}, rng));
  Tensor rm = random_tensor({2}, rng, 0.5);
  Tensor rv = Tensor({2}, {1.3, 0.8});
  // project onto random weights: summing normalized outputs would make the
  // loss constant in x and the check vacuous
  const Tensor probe = random_tensor({3, 2, 2, 2}, rng);
  for (bool train : {true, false}) {
    const double err = fd_check(store, [&](Tape& t) {
      Var y = t.batch_norm(t.param(store, "x"), t.param(store, "gamma"), t.param(store, "beta"), rm, rv, train,
                           /*update_running=*/false);
      return t.sum(t.mul(y, t.leaf(probe)));
    });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("shared subexpressions accumulate gradients", "[tensor]") {
  // f(x) = g(x) + g(x) must differentiate to 2 * grad g
  Rng rng(13);
  ParameterStore store;
  store.add("x", random_tensor({4}, rng));
  Tape t1;
  {
    Var x = t1.param(store, "x");
    Var gx = t1.tanh(x);
    t1.backward(t1.sum(t1.add(gx, gx)));
  }
  Tensor doubled = store.grad("x");
  store.zero_grads();
  Tape t2;
  {
    Var x = t2.param(store, "x");
    t2.backward(t2.sum(t2.tanh(x)));
  }
  for (int i = 0; i < 4; ++i)
    CHECK(doubled.at(i) == Catch::Approx(2.0 * store.grad("x").at(i)).epsilon(1e-12));
  store.zero_grads();
}

TEST_CASE("random composite graphs pass the finite-difference property", "[tensor]") {
  // a few assorted shapes through mixed ops
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Rng rng(seed);
    ParameterStore store;
    store.add("w", random_tensor({3, 5}, rng));
    store.add("v", random_tensor({3}, rng));
    store.add("x", random_tensor({5}, rng));
    const double err = fd_check(store, [&](Tape& t) {
      Var h = t.tanh(t.matmul(t.param(store, "w"), t.param(store, "x")));
      Var s = t.softmax(t.mul(h, t.sigmoid(t.param(store, "v"))));
      return t.log(t.pick(s, 1));
    });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("sgd_step arithmetic, clipping and zero-gradient behavior", "[optim][tensor]") {
  ParameterStore store;
  store.add("theta", Tensor({1}, {1.0}));

  // zero gradient: parameters unchanged
  sgd_step(store, 0.1, 10.0);
  CHECK(store.value("theta").at(0) == 1.0);

  // theta=1, grad=0.5, lr=0.1, clip=10 -> 0.95
  store.grad("theta").at(0) = 0.5;
  sgd_step(store, 0.1, 10.0);
  CHECK(store.value("theta").at(0) == Catch::Approx(0.95).epsilon(1e-15));
  CHECK(store.grad("theta").at(0) == 0.0);  // zeroed afterwards

  // gradient norm 5 against clip 1 scales by 1/5
  ParameterStore clip_store;
  clip_store.add("a", Tensor({2}, {0.0, 0.0}));
  clip_store.grad("a") = Tensor({2}, {3.0, 4.0});  // norm 5
  sgd_step(clip_store, 1.0, 1.0);
  CHECK(clip_store.value("a").at(0) == Catch::Approx(-3.0 / 5.0).epsilon(1e-12));
  CHECK(clip_store.value("a").at(1) == Catch::Approx(-4.0 / 5.0).epsilon(1e-12));

  // clip=inf changes each parameter by exactly -lr * grad
  ParameterStore free_store;
  free_store.add("a", Tensor({2}, {1.0, -2.0}));
  free_store.grad("a") = Tensor({2}, {100.0, -50.0});
  sgd_step(free_store, 0.01, std::numeric_limits<double>::infinity());
  CHECK(free_store.value("a").at(0) == Catch::Approx(0.0).margin(1e-15));
  CHECK(free_store.value("a").at(1) == Catch::Approx(-1.5).epsilon(1e-12));
}

TEST_CASE("sgd_step aborts on NaN gradients naming the parameter", "[optim][tensor]") {
  ParameterStore store;
  store.add("enc.w", Tensor({1}, {1.0}));
  store.grad("enc.w").at(0) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_WITH(sgd_step(store, 0.1, 1.0), Catch::Matchers::ContainsSubstring("enc.w"));
}

TEST_CASE("nesterov_step degenerate and descent behavior", "[optim][tensor]") {
  // zero gradient, zero velocity: no change
  ParameterStore store;
  store.add("a", Tensor({1}, {2.0}));
  nesterov_step(store, 0.1, 0.9);
  CHECK(store.value("a").at(0) == 2.0);

  // momentum 0 reduces to plain SGD
  ParameterStore plain;
  plain.add("a", Tensor({1}, {1.0}));
  plain.grad("a").at(0) = 0.5;
  nesterov_step(plain, 0.1, 0.0);
  CHECK(plain.value("a").at(0) == Catch::Approx(0.95).epsilon(1e-15));

  // two steps on f(theta) = theta^2 decrease f monotonically at small lr
  ParameterStore quad;
  quad.add("theta", Tensor({1}, {1.0}));
  double f_prev = 1.0;
  for (int step = 0; step < 2; ++step) {
    const double theta = quad.value("theta").at(0);
    quad.grad("theta").at(0) = 2.0 * theta;
    nesterov_step(quad, 0.05, 0.9);
    const double f = quad.value("theta").at(0) * quad.value("theta").at(0);
    CHECK(f < f_prev);
    f_prev = f;
  }
}

TEST_CASE("checkpoint containers round-trip values byte-exactly", "[tensor][checkpoint]") {
  Rng rng(77);
  Checkpoint c;
  c.meta = "kind=test\nanswer=42\n";
  c.arrays.emplace("alpha", random_tensor({3, 4}, rng));
  c.arrays.emplace("beta", random_tensor({7}, rng));
  const std::string path = "ckpt_roundtrip_test.bin";
  c.save(path);
  Checkpoint back = Checkpoint::load(path);
  CHECK(back.meta_value("answer") == "42");
  CHECK(back.require("alpha") == c.require("alpha"));
  CHECK(back.require("beta") == c.require("beta"));
  std::remove(path.c_str());
}
