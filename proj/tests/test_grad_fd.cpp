// Central finite differences in 64-bit as the reference for every analytic
// gradient. h = 1e-3, inputs in [-2, 2], dims <= 8.
#include <catch2/catch_amalgamated.hpp>
#include <functional>

#include "dart/layers.hpp"
#include "dart/ops.hpp"

using namespace dart;
using D = double;
using LossFn = std::function<Var(Tape<D>&, const std::vector<Var>&)>;

namespace {

void check_gradients(const std::string& name, std::vector<Tensor<D>> inputs, const LossFn& f) {
  std::vector<Param<D>> params;
  params.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back(name + std::to_string(i), inputs[i]);

  auto eval = [&]() {
    Tape<D> tp;
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(tp.leaf(p));
    return tp.val(f(tp, vars))[0];
  };

  Tape<D> tp;
  std::vector<Var> vars;
  for (auto& p : params) vars.push_back(tp.leaf(p));
  Var loss = f(tp, vars);
  REQUIRE(tp.val(loss).size() == 1);
  tp.backward(loss);

  const double h = 1e-3;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param<D>& p = params[pi];
    for (std::int64_t j = 0; j < p.value.size(); ++j) {
      const double orig = p.value[j];
      p.value[j] = orig + h;
      const double fp = eval();
      p.value[j] = orig - h;
      const double fm = eval();
      p.value[j] = orig;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = p.grad[j];
      const double err = std::abs(num - ana) / std::max({1.0, std::abs(num), std::abs(ana)});
      INFO(name << ": input " << pi << " element " << j << " analytic " << ana << " fd " << num);
      REQUIRE(err < 1e-4);
    }
  }
}

Tensor<D> rand_t(const Shape& s, RngStream& rng, double lo = -2.0, double hi = 2.0) {
  return uniform_init<D>(s, rng, lo, hi);
}

// Contract a non-scalar output against a fixed random cotangent.
Var project(Tape<D>& tp, Var out, std::uint64_t seed) {
  RngStream r(seed, "cotangent");
  Tensor<D> c = uniform_init<D>(tp.val(out).shape, r, -1.0, 1.0);
  return ops::sum_all(tp, ops::mul(tp, out, tp.constant(c)));
}

void nudge_from_zero(Tensor<D>& t, double margin = 0.05) {
  for (auto& v : t.data)
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
}

Shape rand_mat(RngStream& rng) { return {1 + rng.uniform_int(8), 1 + rng.uniform_int(8)}; }

}  // namespace

TEST_CASE("fd: elementwise and broadcast ops") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "fd_elem");
    Shape s = rand_mat(rng);
    check_gradients("add", {rand_t(s, rng), rand_t(s, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::add(tp, v[0], v[1]), seed); });
    check_gradients("sub", {rand_t(s, rng), rand_t(s, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::sub(tp, v[0], v[1]), seed); });
    check_gradients("mul", {rand_t(s, rng), rand_t(s, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::mul(tp, v[0], v[1]), seed); });
    check_gradients("scale", {rand_t(s, rng)}, [seed](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::scale(tp, v[0], -1.7), seed);
    });
    check_gradients("add_scalar", {rand_t(s, rng)}, [seed](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::add_scalar(tp, v[0], 0.9), seed);
    });
    check_gradients("add_rowvec", {rand_t(s, rng), rand_t({s[1]}, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::add_rowvec(tp, v[0], v[1]), seed);
                    });
  }
}

TEST_CASE("fd: activations") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "fd_act");
    Shape s = rand_mat(rng);
    Tensor<D> x = rand_t(s, rng);
    nudge_from_zero(x);
    check_gradients("relu", {x},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::relu(tp, v[0]), seed); });
    check_gradients("sigmoid", {rand_t(s, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::sigmoid(tp, v[0]), seed); });
    check_gradients("swish", {rand_t(s, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::swish(tp, v[0]), seed); });
    check_gradients("gelu", {rand_t(s, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::gelu(tp, v[0]), seed); });
    check_gradients("exp", {rand_t(s, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::exp(tp, v[0]), seed); });
  }
}

TEST_CASE("fd: matmul family") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "fd_mm");
    int m = 1 + rng.uniform_int(8), k = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    check_gradients("matmul", {rand_t({m, k}, rng), rand_t({k, n}, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) { return project(tp, ops::matmul(tp, v[0], v[1]), seed); });
    check_gradients("matmul_nt", {rand_t({m, k}, rng), rand_t({n, k}, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::matmul_nt(tp, v[0], v[1]), seed);
                    });
    check_gradients("matmul_tn", {rand_t({k, m}, rng), rand_t({k, n}, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::matmul_tn(tp, v[0], v[1]), seed);
                    });
  }
}

TEST_CASE("fd: normalization and softmax family") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "fd_norm");
    int m = 1 + rng.uniform_int(6), n = 2 + rng.uniform_int(6);
    check_gradients("layernorm", {rand_t({m, n}, rng), rand_t({n}, rng, 0.5, 1.5), rand_t({n}, rng, -0.5, 0.5)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::layernorm(tp, v[0], v[1], v[2]), seed);
                    });
    check_gradients("softmax_rows", {rand_t({m, n}, rng)}, [seed](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::softmax_rows(tp, v[0]), seed);
    });
    check_gradients("log_softmax_rows", {rand_t({m, n}, rng)}, [seed](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::log_softmax_rows(tp, v[0]), seed);
    });
    int sq = 2 + rng.uniform_int(6);
    check_gradients("causal_softmax_rows", {rand_t({sq, sq}, rng)}, [seed](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::causal_softmax_rows(tp, v[0]), seed);
    });
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(n));
    for (auto& kbit : keep) kbit = rng.uniform() < 0.6 ? 1 : 0;
    keep[0] = 1;
    check_gradients("keymask_softmax_rows", {rand_t({m, n}, rng)}, [seed, keep](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::keymask_softmax_rows(tp, v[0], keep), seed);
    });
    std::vector<int> targets;
    for (int i = 0; i < m; ++i) targets.push_back(rng.uniform_int(n));
    check_gradients("cross_entropy_rows", {rand_t({m, n}, rng)}, [targets](Tape<D>& tp, const std::vector<Var>& v) {
      return ops::cross_entropy_rows(tp, v[0], targets);
    });
  }
}

TEST_CASE("fd: reductions and losses") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "fd_red");
    Shape s = rand_mat(rng);
    check_gradients("sum_all", {rand_t(s, rng)},
                    [](Tape<D>& tp, const std::vector<Var>& v) { return ops::sum_all(tp, v[0]); });
    check_gradients("mean_all", {rand_t(s, rng)},
                    [](Tape<D>& tp, const std::vector<Var>& v) { return ops::mean_all(tp, v[0]); });
    Tensor<D> target = rand_t(s, rng);
    check_gradients("mse_loss", {rand_t(s, rng)},
                    [target](Tape<D>& tp, const std::vector<Var>& v) { return ops::mse_loss(tp, v[0], target); });
    Tensor<D> pred = rand_t(s, rng);
    for (std::int64_t i = 0; i < pred.size(); ++i)
      if (std::abs(pred[i] - target[i]) < 0.05) pred[i] += 0.1;
    check_gradients("l1_loss", {pred},
                    [target](Tape<D>& tp, const std::vector<Var>& v) { return ops::l1_loss(tp, v[0], target); });
  }
}

TEST_CASE("fd: structural ops") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "fd_struct");
    int m = 2 + rng.uniform_int(6), n = 2 + rng.uniform_int(6);
    check_gradients("reshape", {rand_t({m, n}, rng)}, [seed, m, n](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::reshape(tp, v[0], {n * m}), seed);
    });
    int r0 = rng.uniform_int(m), r1 = r0 + 1 + rng.uniform_int(m - r0);
    check_gradients("slice_rows", {rand_t({m, n}, rng)}, [seed, r0, r1](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::slice_rows(tp, v[0], r0, r1), seed);
    });
    int c0 = rng.uniform_int(n), c1 = c0 + 1 + rng.uniform_int(n - c0);
    check_gradients("slice_cols", {rand_t({m, n}, rng)}, [seed, c0, c1](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::slice_cols(tp, v[0], c0, c1), seed);
    });
    check_gradients("concat_rows", {rand_t({m, n}, rng), rand_t({2, n}, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::concat_rows(tp, {v[0], v[1]}), seed);
                    });
    check_gradients("concat_cols", {rand_t({m, n}, rng), rand_t({m, 3}, rng)},
                    [seed](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::concat_cols(tp, {v[0], v[1]}), seed);
                    });
    std::vector<int> rows;
    for (int i = 0; i < 5; ++i) rows.push_back(rng.uniform_int(m));
    check_gradients("gather_rows", {rand_t({m, n}, rng)}, [seed, rows](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::gather_rows(tp, v[0], rows), seed);
    });
    std::int64_t idx = rng.uniform_int(m * n);
    check_gradients("pick", {rand_t({m, n}, rng)},
                    [idx](Tape<D>& tp, const std::vector<Var>& v) { return ops::pick(tp, v[0], idx); });
  }
}

TEST_CASE("fd: embeddings and dropout") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "fd_emb");
    int vocab = 3 + rng.uniform_int(5), d = 2 + rng.uniform_int(6);
    std::vector<int> ids;
    for (int i = 0; i < 6; ++i) ids.push_back(rng.uniform_int(vocab));
    check_gradients("embedding", {rand_t({vocab, d}, rng)}, [seed, ids](Tape<D>& tp, const std::vector<Var>& v) {
      return project(tp, ops::embedding(tp, v[0], ids), seed);
    });
    std::vector<std::uint8_t> sel;
    std::vector<int> ids2;
    int vb = 2 + rng.uniform_int(4);
    for (int i = 0; i < 6; ++i) {
      sel.push_back(static_cast<std::uint8_t>(rng.uniform_int(2)));
      ids2.push_back(rng.uniform_int(sel.back() ? vb : vocab));
    }
    check_gradients("dual_embedding", {rand_t({vocab, d}, rng), rand_t({vb, d}, rng)},
                    [seed, sel, ids2](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::dual_embedding(tp, v[0], v[1], sel, ids2), seed);
                    });
    Shape s = rand_mat(rng);
    check_gradients("dropout", {rand_t(s, rng)}, [seed](Tape<D>& tp, const std::vector<Var>& v) {
      RngStream drop(seed, "mask");  // fresh per eval, so the mask is frozen
      return project(tp, ops::dropout(tp, v[0], 0.3, drop), seed);
    });
  }
}

TEST_CASE("fd: convolutions") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, "fd_conv");
    int cin = 1 + rng.uniform_int(3), cout = 1 + rng.uniform_int(3);
    int hw = 4 + rng.uniform_int(3), k = 2 + rng.uniform_int(2);
    int stride = 1 + rng.uniform_int(2), pad = rng.uniform_int(2);
    check_gradients("conv2d",
                    {rand_t({cin, hw, hw}, rng), rand_t({cout, cin, k, k}, rng), rand_t({cout}, rng)},
                    [seed, stride, pad](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::conv2d(tp, v[0], v[1], v[2], stride, pad), seed);
                    });
    int h2 = 2 + rng.uniform_int(3);
    check_gradients("conv2d_transpose",
                    {rand_t({cin, h2, h2}, rng), rand_t({cin, cout, k, k}, rng), rand_t({cout}, rng)},
                    [seed, stride](Tape<D>& tp, const std::vector<Var>& v) {
                      return project(tp, ops::conv2d_transpose(tp, v[0], v[1], v[2], stride, 0), seed);
                    });
  }
}

TEST_CASE("fd: composite transformer block") {
  RngStream rng(42, "fd_block");
  const int dim = 8, heads = 2, len = 5;
  TransformerBlock<D> block("blk", dim, heads, dim * 2, Activation::gelu, rng);
  ParamSet<D> ps;
  block.register_params(ps);
  Tensor<D> x = rand_t({len, dim}, rng, -1.0, 1.0);

  Tape<D> tp;
  Var out = block.forward(tp, tp.constant(x), AttnMask::causal(), 0.0, 0.0, nullptr);
  Var loss = project(tp, out, 42);
  tp.backward(loss);

  auto eval = [&]() {
    Tape<D> t2;
    Var o = block.forward(t2, t2.constant(x), AttnMask::causal(), 0.0, 0.0, nullptr);
    return t2.val(project(t2, o, 42))[0];
  };
  const double h = 1e-3;
  // Spot-check a slice of each parameter rather than every element.
  for (auto* p : ps) {
    const std::int64_t step = std::max<std::int64_t>(1, p->value.size() / 7);
    for (std::int64_t j = 0; j < p->value.size(); j += step) {
      const double orig = p->value[j];
      p->value[j] = orig + h;
      const double fp = eval();
      p->value[j] = orig - h;
      const double fm = eval();
      p->value[j] = orig;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = p->grad[j];
      const double err = std::abs(num - ana) / std::max({1.0, std::abs(num), std::abs(ana)});
      INFO(p->name << " element " << j);
      REQUIRE(err < 1e-4);
    }
  }
}
