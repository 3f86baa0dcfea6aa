#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "dart/adam.hpp"
#include "dart/layers.hpp"
#include "dart/ops.hpp"
#include "dart/rng.hpp"
#include "dart/tape.hpp"
#include "dart/tensor.hpp"

using namespace dart;
using Catch::Approx;

TEST_CASE("tensor shape bookkeeping") {
  Tensor<float> t = Tensor<float>::zeros({2, 3});
  REQUIRE(t.size() == 6);
  t.at(1, 2) = 5.0f;
  REQUIRE(t.data[5] == 5.0f);
  REQUIRE_THROWS_AS(numel({2, 0}), ShapeError);
  REQUIRE_THROWS_AS((Tensor<float>{{2, 2}, {1.0f, 2.0f}}), ShapeError);
  Tensor<float> nan_t = Tensor<float>::zeros({2});
  nan_t[0] = std::nanf("");
  REQUIRE_FALSE(nan_t.all_finite());
}

TEST_CASE("rng streams are deterministic and replayable") {
  RngStream a(7, "env"), b(7, "env"), c(7, "policy");
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  REQUIRE(a.next_u64() != c.next_u64());

  RngStream d(11, "x");
  std::vector<double> first;
  for (int i = 0; i < 10; ++i) first.push_back(d.uniform());
  auto snap = d.counter();
  std::vector<double> tail;
  for (int i = 0; i < 10; ++i) tail.push_back(d.uniform());
  d.set_counter(snap);
  for (int i = 0; i < 10; ++i) REQUIRE(d.uniform() == tail[static_cast<std::size_t>(i)]);

  RngStream e(3, "u");
  for (int i = 0; i < 1000; ++i) {
    double u = e.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    double z = e.truncated_normal(0.02);
    REQUIRE(std::abs(z) <= 0.04 + 1e-12);
  }
  // Box-Muller consumes a fixed number of draws regardless of the values,
  // so normal() keeps streams aligned.
  RngStream f1(5, "n"), f2(5, "n");
  (void)f1.normal();
  (void)f2.normal();
  REQUIRE(f1.counter() == f2.counter());

  double probs[] = {0.2, 0.3, 0.5};
  RngStream g(9, "cat");
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < 3000; ++i) ++counts[g.categorical(std::span<const double>(probs, 3))];
  REQUIRE(counts[0] > 400);
  REQUIRE(counts[2] > counts[0]);
}

TEST_CASE("softmax uniform case") {
  Tape<float> tp;
  Var x = tp.constant(Tensor<float>{{1, 3}, {1.0f, 1.0f, 1.0f}});
  Var y = ops::softmax_rows(tp, x);
  for (int j = 0; j < 3; ++j) REQUIRE(tp.val(y)[j] == Approx(1.0f / 3.0f));
}

TEST_CASE("layernorm normalizes each row before the affine") {
  Tape<float> tp;
  RngStream rng(1, "ln");
  Tensor<float> x = uniform_init<float>({4, 8}, rng, -2.0f, 2.0f);
  LayerNorm<float> ln("ln", 8);
  ParamSet<float> ps;
  ln.register_params(ps);
  Var y = ln.forward(tp, tp.constant(x));
  for (int i = 0; i < 4; ++i) {
    float mu = 0, var = 0;
    for (int j = 0; j < 8; ++j) mu += tp.val(y).at(i, j);
    mu /= 8;
    for (int j = 0; j < 8; ++j) var += (tp.val(y).at(i, j) - mu) * (tp.val(y).at(i, j) - mu);
    var /= 8;
    REQUIRE(mu == Approx(0.0f).margin(1e-5));
    REQUIRE(var == Approx(1.0f).margin(1e-3));
  }
}

TEST_CASE("cross entropy uniform case is ln 2") {
  Tape<float> tp;
  Var logits = tp.constant(Tensor<float>{{1, 2}, {0.0f, 0.0f}});
  Var loss = ops::cross_entropy_rows(tp, logits, {0});
  REQUIRE(tp.val(loss)[0] == Approx(std::log(2.0f)));
}

TEST_CASE("cross entropy gradient equals softmax minus onehot") {
  Param<float> logits("l", Tensor<float>{{2, 3}, {0.3f, -1.0f, 0.7f, 2.0f, 0.1f, -0.5f}});
  Tape<float> tp;
  Var lv = tp.leaf(logits);
  Var loss = ops::cross_entropy_rows(tp, lv, {2, 0});
  tp.backward(loss);

  Tape<float> ref;
  Var sm = ops::softmax_rows(ref, ref.constant(logits.value));
  int targets[2] = {2, 0};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      float expect = (ref.val(sm).at(i, j) - (j == targets[i] ? 1.0f : 0.0f)) / 2.0f;
      REQUIRE(logits.grad.at(i, j) == Approx(expect).margin(1e-6));
    }
}

TEST_CASE("d(x^2)/dx at 3 is 6") {
  Param<float> x("x", Tensor<float>::scalar(3.0f));
  Tape<float> tp;
  Var xv = tp.leaf(x);
  tp.backward(ops::mul(tp, xv, xv));
  REQUIRE(x.grad[0] == Approx(6.0f));
}

TEST_CASE("backward rejects bad losses") {
  Tape<float> tp;
  Var vec = tp.constant(Tensor<float>{{2}, {1.0f, 2.0f}});
  REQUIRE_THROWS_AS(tp.backward(vec), ContractError);  // detached
  Param<float> p("p", Tensor<float>{{2}, {1.0f, 2.0f}});
  Var leaf = tp.leaf(p);
  REQUIRE_THROWS_AS(tp.backward(leaf), ContractError);  // not scalar
}

TEST_CASE("non-finite forward output raises") {
  Tape<float> tp;
  Var x = tp.constant(Tensor<float>{{1}, {100.0f}});
  Var big = ops::scale(tp, x, 1e30f);
  REQUIRE_THROWS_AS(ops::mul(tp, big, big), NumericError);
}

TEST_CASE("shape mismatch names the op") {
  Tape<float> tp;
  Var a = tp.constant(Tensor<float>::zeros({2, 3}));
  Var b = tp.constant(Tensor<float>::zeros({3, 2}));
  try {
    ops::add(tp, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("add") != std::string::npos);
    REQUIRE(msg.find("[2,3]") != std::string::npos);
    REQUIRE(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("gradient accumulation is additive across backwards") {
  RngStream rng(2, "lin");
  Linear<float> lin("lin", 4, 3, rng);
  ParamSet<float> ps;
  lin.register_params(ps);
  Tensor<float> x = uniform_init<float>({2, 4}, rng, -1.0f, 1.0f);

  auto run = [&](bool sum_both) {
    ps.zero_grad();
    Tape<float> tp;
    Var xv = tp.constant(x);
    Var y = lin.forward(tp, xv);
    Var l1 = ops::mean_all(tp, y);
    Var l2 = ops::mse_loss(tp, y, Tensor<float>::zeros({2, 3}));
    if (sum_both) {
      tp.backward(ops::add(tp, l1, l2));
    } else {
      tp.backward(l1);
      tp.backward(l2);
    }
    return lin.w.grad;
  };
  Tensor<float> g_sum = run(true);
  Tensor<float> g_sep = run(false);
  for (std::int64_t i = 0; i < g_sum.size(); ++i) REQUIRE(g_sum[i] == Approx(g_sep[i]).margin(1e-6));
}

TEST_CASE("masked softmax puts exact zeros on masked keys") {
  Tape<float> tp;
  RngStream rng(4, "m");
  Var x = tp.constant(uniform_init<float>({5, 5}, rng, -2.0f, 2.0f));
  Var causal = ops::causal_softmax_rows(tp, x);
  for (int i = 0; i < 5; ++i) {
    float row_sum = 0;
    for (int j = 0; j < 5; ++j) {
      if (j > i) REQUIRE(tp.val(causal).at(i, j) == 0.0f);
      row_sum += tp.val(causal).at(i, j);
    }
    REQUIRE(row_sum == Approx(1.0f));
  }
  Var km = ops::keymask_softmax_rows(tp, x, {1, 0, 1, 1, 0});
  for (int i = 0; i < 5; ++i) {
    REQUIRE(tp.val(km).at(i, 1) == 0.0f);
    REQUIRE(tp.val(km).at(i, 4) == 0.0f);
  }
  REQUIRE_THROWS_AS(ops::keymask_softmax_rows(tp, x, {0, 0, 0, 0, 0}), ContractError);
}

TEST_CASE("straight-through passes values forward and gradients back unchanged") {
  Param<float> x("x", Tensor<float>{{2}, {0.3f, -0.8f}});
  Tensor<float> q{{2}, {1.0f, -1.0f}};
  Tape<float> tp;
  Var xv = tp.leaf(x);
  Var st = ops::straight_through(tp, xv, q);
  REQUIRE(tp.val(st)[0] == 1.0f);
  REQUIRE(tp.val(st)[1] == -1.0f);
  Var loss = ops::sum_all(tp, ops::mul(tp, st, tp.constant(Tensor<float>{{2}, {2.0f, 5.0f}})));
  tp.backward(loss);
  REQUIRE(x.grad[0] == Approx(2.0f));
  REQUIRE(x.grad[1] == Approx(5.0f));
}

TEST_CASE("detach blocks gradient flow") {
  Param<float> x("x", Tensor<float>::scalar(2.0f));
  Tape<float> tp;
  Var xv = tp.leaf(x);
  Var d = ops::detach(tp, xv);
  Var loss = ops::mul(tp, xv, d);  // x * sg(x): gradient should be sg(x) = 2, not 2x = 4
  tp.backward(loss);
  REQUIRE(x.grad[0] == Approx(2.0f));
}

TEST_CASE("adam hand-checked first step") {
  Param<float> p("p", Tensor<float>::scalar(1.0f));
  ParamSet<float> ps;
  ps.add(p);
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  cfg.clip_norm = 0.0;
  Adam<float> opt(ps, cfg);
  p.grad[0] = 1.0f;
  opt.step();
  // mhat = 1, vhat = 1 at t=1, so delta = -0.1 / (1 + 1e-8)
  REQUIRE(p.value[0] == Approx(1.0f - 0.1f / (1.0f + 1e-8f)).epsilon(1e-6));
  REQUIRE(opt.t() == 1);
}

TEST_CASE("adam leaves params alone under zero grads") {
  Param<float> p("p", Tensor<float>{{3}, {1.0f, -2.0f, 0.5f}});
  ParamSet<float> ps;
  ps.add(p);
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  Adam<float> opt(ps, cfg);
  Tensor<float> before = p.value;
  for (int i = 0; i < 5; ++i) opt.step();
  for (int i = 0; i < 3; ++i) REQUIRE(p.value[i] == before[i]);
}

TEST_CASE("identical params with identical grads stay identical") {
  Param<float> a("a", Tensor<float>::scalar(0.7f)), b("b", Tensor<float>::scalar(0.7f));
  ParamSet<float> ps;
  ps.add(a);
  ps.add(b);
  Adam<float> opt(ps, AdamConfig{});
  RngStream rng(13, "g");
  for (int i = 0; i < 50; ++i) {
    float g = static_cast<float>(rng.normal());
    a.grad[0] = g;
    b.grad[0] = g;
    opt.step();
    REQUIRE(a.value[0] == b.value[0]);
  }
}

TEST_CASE("grad clipping rescales to the requested global norm") {
  Param<float> p("p", Tensor<float>::zeros({2}));
  ParamSet<float> ps;
  ps.add(p);
  Adam<float> opt(ps, AdamConfig{});
  p.grad[0] = 3.0f;
  p.grad[1] = 4.0f;
  double norm = opt.clip_grad_norm(1.0);
  REQUIRE(norm == Approx(5.0));
  REQUIRE(std::sqrt(p.grad[0] * p.grad[0] + p.grad[1] * p.grad[1]) == Approx(1.0f));
  p.grad[0] = std::numeric_limits<float>::infinity();
  REQUIRE_THROWS_AS(opt.clip_grad_norm(1.0), NumericError);
}

TEST_CASE("dropout is inverted at train time and identity when p=0") {
  RngStream rng(21, "drop");
  Tape<float> tp;
  Var x = tp.constant(Tensor<float>::full({1000}, 1.0f));
  Var same = ops::dropout(tp, x, 0.0, rng);
  REQUIRE(same.id == x.id);
  Var y = ops::dropout(tp, x, 0.5, rng);
  double mean = 0;
  int zeros = 0;
  for (std::int64_t i = 0; i < 1000; ++i) {
    float v = tp.val(y)[i];
    REQUIRE((v == 0.0f || v == 2.0f));
    if (v == 0.0f) ++zeros;
    mean += v;
  }
  REQUIRE(mean / 1000 == Approx(1.0).margin(0.15));
  REQUIRE(zeros > 350);
}
