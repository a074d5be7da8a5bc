#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "tagcot/serialize.hpp"
#include "tagcot/tensor.hpp"

#include <sstream>

using namespace tagcot;

namespace {

// Independent oracle: naive triple-loop matrix product.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c = Tensor::zeros(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t j = 0; j < n; ++j) {
        c.at(i, j) += a.at(i, p) * b.at(p, j);
      }
    }
  }
  return c;
}

// Independent oracle: gelu(x) = x * P(Z <= x) via midpoint quadrature of the
// standard normal density over [-12, x].
double gelu_quadrature_oracle(double x) {
  const double lo = -12.0;
  const int steps = 2'000'000;
  const double h = (x - lo) / steps;
  double cdf = 0.0;
  for (int i = 0; i < steps; ++i) {
    const double t = lo + (i + 0.5) * h;
    cdf += std::exp(-0.5 * t * t);
  }
  cdf *= h * 0.3989422804014327;
  return x * cdf;
}

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, sd);
}

}  // namespace

TEST_CASE("matmul identity and hand-checked products") {
  Tape t;
  auto i2 = t.constant({2, 2}, {1, 0, 0, 1});
  auto prod = t.matmul(i2, i2);
  CHECK(t.values(prod)[0] == 1.0);
  CHECK(t.values(prod)[1] == 0.0);
  CHECK(t.values(prod)[2] == 0.0);
  CHECK(t.values(prod)[3] == 1.0);

  auto a = t.constant({2, 2}, {1, 2, 3, 4});
  auto b = t.constant({2, 1}, {0, 1});
  auto c = t.matmul(a, b);
  CHECK(t.values(c)[0] == 2.0);
  CHECK(t.values(c)[1] == 4.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Tensor a = random_tensor({3, 4}, 11);
  Tensor b = random_tensor({4, 2}, 12);
  Tape t;
  auto c = t.matmul(t.constant(a), t.constant(b));
  Tensor expect = matmul_oracle(a, b);
  for (std::size_t i = 0; i < expect.size(); ++i) {
    CHECK(t.values(c)[i] == doctest::Approx(expect.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape t;
  auto a = t.constant(Tensor::zeros(2, 3));
  auto b = t.constant(Tensor::zeros(2, 3));
  CHECK_THROWS_WITH_AS(t.matmul(a, b),
                       "matmul: inner dimensions differ: [2 3] vs [2 3]", DimensionError);
}

TEST_CASE("elementwise examples") {
  Tape t;
  auto z = t.constant({1}, {0.0});
  CHECK(t.values(t.sigmoid(z))[0] == 0.5);

  auto neg3 = t.constant({1}, {-3.0});
  CHECK(t.values(t.relu(neg3))[0] == 0.0);

  auto one = t.constant({1}, {1.0});
  const double got = t.values(t.gelu(one))[0];
  CHECK(got == doctest::Approx(gelu_quadrature_oracle(1.0)).epsilon(1e-6));
}

TEST_CASE("elementwise dispatch surface") {
  Tape t;
  Var ins[2] = {t.constant({1, 3}, {1, 2, 3}), t.constant({1, 3}, {4, 5, 6})};
  auto sum = elementwise(t, ElemOp::kAdd, std::span<const Var>(ins, 2));
  CHECK(t.values(sum)[2] == 9.0);
  Var scalar_and_mat[2] = {t.scalar(2.0), t.constant({1, 3}, {1, 2, 3})};
  auto prod = elementwise(t, ElemOp::kMul, std::span<const Var>(scalar_and_mat, 2));
  CHECK(t.values(prod)[1] == 4.0);
  CHECK_THROWS_AS(t.add(t.constant({1, 3}, {1, 2, 3}), t.constant({1, 2}, {1, 2})),
                  DimensionError);
}

TEST_CASE("sigmoid stays strictly inside (0,1)") {
  Tape t;
  auto big = t.constant({1, 2}, {800.0, -800.0});
  auto p = t.sigmoid(big);
  CHECK(t.values(p)[0] < 1.0);
  CHECK(t.values(p)[0] > 0.0);
  CHECK(t.values(p)[1] > 0.0);
  CHECK(t.values(p)[1] < 1.0);
}

TEST_CASE("softmax rows: symmetry, overflow stability, direct formula") {
  Tape t;
  auto a = t.constant({1, 2}, {0.0, 0.0});
  auto sa = t.softmax_rows(a);
  CHECK(t.values(sa)[0] == 0.5);
  CHECK(t.values(sa)[1] == 0.5);

  auto b = t.constant({1, 2}, {1000.0, 1000.0});
  auto sb = t.softmax_rows(b);
  CHECK(t.values(sb)[0] == 0.5);
  CHECK(t.values(sb)[1] == 0.5);

  auto c = t.constant({1, 3}, {1.0, 2.0, 3.0});
  auto sc = t.softmax_rows(c);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(t.values(sc)[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(t.values(sc)[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));
  CHECK(t.values(sc)[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one within 1e-12 on random input") {
  Tensor x = random_tensor({5, 7}, 21, 3.0);
  Tape t;
  auto s = t.softmax_rows(t.constant(x));
  for (std::size_t i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 7; ++j) sum += t.values(s)[i * 7 + j];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("backward: sum gives all-ones gradient; off-path leaves get zeros") {
  Tensor x = random_tensor({3, 2}, 31);
  x.requires_grad = true;
  Tensor unused = random_tensor({2, 2}, 32);
  unused.requires_grad = true;
  Tape t;
  auto xv = t.leaf(x);
  t.leaf(unused);  // never used by the loss
  auto loss = t.sum_all(xv);
  t.backward(loss);
  REQUIRE(x.grad.size() == x.size());
  for (double g : x.grad) CHECK(g == 1.0);
  REQUIRE(unused.grad.size() == unused.size());
  for (double g : unused.grad) CHECK(g == 0.0);
}

TEST_CASE("backward: sigmoid(w.x) at w=0 gives grad 0.25*x") {
  Tensor w = Tensor::zeros(1, 4);
  w.requires_grad = true;
  Tensor x = random_tensor({4, 1}, 33);
  Tape t;
  auto s = t.sigmoid(t.matmul(t.leaf(w), t.constant_ref(x)));
  t.backward(t.sum_all(s));
  REQUIRE(w.grad.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(w.grad[i] == doctest::Approx(0.25 * x.values[i]).epsilon(1e-12));
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape t;
  auto a = t.constant({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(t.backward(a), ContractError);
}

TEST_CASE("backward idempotent across repeated passes after zero_grad") {
  Tensor w = random_tensor({4, 4}, 41);
  w.requires_grad = true;
  Tensor x = random_tensor({1, 4}, 42);

  auto run = [&]() {
    Tape t;
    auto h = t.tanh_(t.matmul(t.constant_ref(x), t.leaf(w)));
    t.backward(t.sum_all(t.mul(h, h)));
    return w.grad;
  };
  w.zero_grad();
  auto g1 = run();
  w.zero_grad();
  auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) {
    CHECK(std::memcmp(&g1[i], &g2[i], sizeof(double)) == 0);
  }
}

TEST_CASE("finite differences: x^2 at 3") {
  Tensor x = Tensor::scalar(3.0);
  auto sq = [](Tape& t, Var v) { return t.sum_all(t.mul(v, v)); };
  CHECK(finite_diff_check(sq, x, 1e-4) < 1e-6);
}

TEST_CASE("finite differences on a three-layer composition") {
  // relu/tanh/gelu chain with matmuls; checks every primitive's chain rule.
  Tensor w1 = random_tensor({5, 6}, 51, 0.5);
  Tensor w2 = random_tensor({6, 4}, 52, 0.5);
  Tensor w3 = random_tensor({4, 1}, 53, 0.5);
  Tensor x = random_tensor({2, 5}, 54);

  auto network = [&](Tape& t, Var in) {
    auto h1 = t.tanh_(t.matmul(in, t.constant_ref(w1)));
    auto h2 = t.gelu(t.matmul(h1, t.constant_ref(w2)));
    auto h3 = t.sigmoid(t.matmul(h2, t.constant_ref(w3)));
    return t.sum_all(h3);
  };
  CHECK(finite_diff_check(network, x, 1e-4) < 1e-4);

  // same composition, differentiated with respect to a weight instead
  auto by_weight = [&](Tape& t, Var wv) {
    auto h1 = t.tanh_(t.matmul(t.constant_ref(x), t.constant_ref(w1)));
    auto h2 = t.gelu(t.matmul(h1, wv));
    auto h3 = t.sigmoid(t.matmul(h2, t.constant_ref(w3)));
    return t.sum_all(h3);
  };
  CHECK(finite_diff_check(by_weight, w2, 1e-4) < 1e-4);
}

TEST_CASE("finite differences across remaining op set") {
  Tensor x = random_tensor({3, 4}, 61, 0.7);

  auto softmax_path = [](Tape& t, Var v) {
    auto s = t.softmax_rows(v);
    return t.sum_all(t.mul(s, s));
  };
  CHECK(finite_diff_check(softmax_path, x, 1e-4) < 1e-4);

  auto logsoftmax_path = [](Tape& t, Var v) {
    auto s = t.log_softmax_rows(v);
    return t.mean_all(t.mul(s, s));
  };
  CHECK(finite_diff_check(logsoftmax_path, x, 1e-4) < 1e-4);

  Tensor gain = random_tensor({1, 4}, 62, 0.3);
  Tensor bias = random_tensor({1, 4}, 63, 0.3);
  auto ln_path = [&](Tape& t, Var v) {
    auto y = t.layer_norm_rows(v, t.constant_ref(gain), t.constant_ref(bias));
    return t.sum_all(t.mul(y, y));
  };
  CHECK(finite_diff_check(ln_path, x, 1e-4) < 1e-4);
  auto ln_gain_path = [&](Tape& t, Var gv) {
    auto y = t.layer_norm_rows(t.constant_ref(x), gv, t.constant_ref(bias));
    return t.sum_all(t.mul(y, y));
  };
  CHECK(finite_diff_check(ln_gain_path, gain, 1e-4) < 1e-4);

  std::vector<int> ids = {2, 0, 2, 1};
  auto lookup_path = [&](Tape& t, Var table) {
    auto rows = t.embedding_lookup(table, ids);
    return t.sum_all(t.mul(rows, rows));
  };
  CHECK(finite_diff_check(lookup_path, x, 1e-4) < 1e-4);

  std::vector<int> cols = {1, 3, 0};
  auto pick_path = [&](Tape& t, Var v) {
    auto picked = t.pick_per_row(v, cols);
    return t.sum_all(t.exp_(picked));
  };
  CHECK(finite_diff_check(pick_path, x, 1e-4) < 1e-4);

  auto mixed_path = [&](Tape& t, Var v) {
    auto tr = t.transpose(v);                       // 4x3
    auto left = t.slice_cols(tr, 0, 2);             // 4x2
    auto right = t.slice_cols(tr, 1, 2);            // 4x2
    Var parts[2] = {left, right};
    auto cat = t.concat_cols(std::span<const Var>(parts, 2));  // 4x4
    Var stacked[2] = {cat, cat};
    auto rows = t.concat_rows(std::span<const Var>(stacked, 2));  // 8x4
    auto m = t.mean_rows(rows);                                   // 1x4
    auto c = t.clamp(m, -0.4, 0.4);
    return t.sum_all(t.mul(c, t.relu(m)));
  };
  CHECK(finite_diff_check(mixed_path, x, 1e-4) < 1e-4);

  Tensor pos = random_tensor({2, 3}, 64, 0.2);
  for (auto& v : pos.values) v = std::abs(v) + 0.5;
  auto log_path = [](Tape& t, Var v) { return t.sum_all(t.log_(v)); };
  CHECK(finite_diff_check(log_path, pos, 1e-4) < 1e-4);

  // causal attention pair: masked softmax feeding the prefix-ordered product
  Tensor sq = random_tensor({4, 4}, 65, 0.9);
  Tensor vals4 = random_tensor({4, 2}, 66, 0.7);
  auto causal_path = [&](Tape& t, Var v) {
    auto probs = t.softmax_rows_causal(v);
    auto out = t.causal_attend(probs, t.constant_ref(vals4));
    return t.sum_all(t.mul(out, out));
  };
  CHECK(finite_diff_check(causal_path, sq, 1e-4) < 1e-4);
  auto causal_v_path = [&](Tape& t, Var v) {
    auto probs = t.softmax_rows_causal(t.constant_ref(sq));
    auto out = t.causal_attend(probs, v);
    return t.sum_all(t.mul(out, out));
  };
  CHECK(finite_diff_check(causal_v_path, vals4, 1e-4) < 1e-4);
}

TEST_CASE("causal softmax masks strictly above the diagonal") {
  Tensor x = random_tensor({3, 3}, 67, 2.0);
  Tape t;
  auto p = t.softmax_rows_causal(t.constant(x));
  CHECK(t.values(p)[0 * 3 + 1] == 0.0);
  CHECK(t.values(p)[0 * 3 + 2] == 0.0);
  CHECK(t.values(p)[1 * 3 + 2] == 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) sum += t.values(p)[i * 3 + j];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("finite_diff_check validates eps range") {
  Tensor x = Tensor::scalar(1.0);
  auto f = [](Tape& t, Var v) { return t.sum_all(v); };
  CHECK_THROWS_AS(finite_diff_check(f, x, 1e-2), ContractError);
  CHECK_THROWS_AS(finite_diff_check(f, x, 1e-7), ContractError);
}

TEST_CASE("byte budget triggers BatchMemoryError") {
  Tape t;
  t.set_byte_budget(1024);
  auto a = t.constant(Tensor::zeros(8, 8));  // 512 bytes
  CHECK_THROWS_AS(t.matmul(a, t.constant(Tensor::zeros(8, 8))), BatchMemoryError);
}

TEST_CASE("tensor serialization round trip") {
  Tensor t = random_tensor({3, 5}, 71);
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  const std::string blob = os.str();
  // u32 rank + 2 dims + 15 doubles
  CHECK(blob.size() == 4 + 8 + 15 * 8);
  std::istringstream is(blob, std::ios::binary);
  Tensor back = read_tensor(is);
  CHECK(back.shape == t.shape);
  CHECK(back.values == t.values);
  CHECK(tensor_checksum(back) == tensor_checksum(t));
}

TEST_CASE("property: gradients of random op graphs match finite differences") {
  for (std::uint64_t seed = 100; seed < 106; ++seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn({2, 3}, rng, 0.8);
    Tensor w = Tensor::randn({3, 3}, rng, 0.8);
    const int variant = static_cast<int>(rng.below(3));
    auto f = [&](Tape& t, Var v) {
      auto h = t.matmul(v, t.constant_ref(w));
      switch (variant) {
        case 0:
          h = t.gelu(h);
          break;
        case 1:
          h = t.softmax_rows(h);
          break;
        default:
          h = t.tanh_(t.add(h, t.scalar(0.3)));
          break;
      }
      return t.mean_all(t.mul(h, h));
    };
    CHECK(finite_diff_check(f, x, 1e-4) < 1e-4);
  }
}
