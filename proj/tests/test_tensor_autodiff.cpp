#include <doctest.h>

#include "icre/autodiff.hpp"
#include "icre/nn.hpp"
#include "icre/rng.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace icre;
using namespace icre::testutil;

namespace {

Var leafv(Tape& t, Tensor* p) { return t.leaf(p, true); }

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  t.at2(1, 2) = 5.0;
  CHECK(t[5] == 5.0);
  CHECK_THROWS(t.reshaped({4}));
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(1);
  Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 5}, rng);
  Tape tape;
  Var r = ad::matmul(leafv(tape, &a), leafv(tape, &b));
  Tensor expect = oracle::matmul(a, b);
  for (int64_t i = 0; i < expect.numel(); ++i)
    CHECK(r.val()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("conv2d matches direct-loop oracle (stride/pad/dilation)") {
  Rng rng(2);
  for (auto [stride, pad, dil] : std::vector<std::tuple<int, int, int>>{
           {1, 1, 1}, {2, 1, 1}, {1, 2, 2}, {1, 3, 3}}) {
    Tensor x = rand_tensor({2, 3, 7, 5}, rng);
    Tensor w = rand_tensor({4, 3, 3, 3}, rng);
    Tensor b = rand_tensor({4}, rng);
    ad::Conv2dSpec spec{stride, stride, pad, pad, dil, dil, 1};
    Tape tape;
    Var r = ad::conv2d(leafv(tape, &x), leafv(tape, &w), leafv(tape, &b), spec);
    Tensor expect = oracle::conv2d(x, w, b, spec);
    REQUIRE(r.val().shape() == expect.shape());
    for (int64_t i = 0; i < expect.numel(); ++i)
      CHECK(r.val()[i] == doctest::Approx(expect[i]).epsilon(1e-10));
  }
}

TEST_CASE("depthwise conv2d matches oracle") {
  Rng rng(3);
  Tensor x = rand_tensor({2, 5, 4, 4}, rng);
  Tensor w = rand_tensor({5, 1, 3, 3}, rng);
  Tensor b = rand_tensor({5}, rng);
  ad::Conv2dSpec spec{1, 1, 1, 1, 1, 1, 5};
  Tape tape;
  Var r = ad::conv2d(leafv(tape, &x), leafv(tape, &w), leafv(tape, &b), spec);
  Tensor expect = oracle::conv2d(x, w, b, spec);
  for (int64_t i = 0; i < expect.numel(); ++i)
    CHECK(r.val()[i] == doctest::Approx(expect[i]).epsilon(1e-10));
}

TEST_CASE("elementwise op gradients") {
  Rng rng(4);
  Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
  Tensor r = rand_tensor({3, 4}, rng);
  auto check = [&](const std::function<Var(Tape&, Var, Var)>& op) {
    return gradcheck({&a, &b}, [&](Tape& t) {
      return ad::frob_inner(op(t, leafv(t, &a), leafv(t, &b)), r);
    });
  };
  CHECK(check([](Tape&, Var x, Var y) { return ad::add(x, y); }) < 1e-6);
  CHECK(check([](Tape&, Var x, Var y) { return ad::sub(x, y); }) < 1e-6);
  CHECK(check([](Tape&, Var x, Var y) { return ad::mul(x, y); }) < 1e-6);
  CHECK(check([](Tape&, Var x, Var) { return ad::scale(x, -2.5); }) < 1e-6);
  CHECK(check([](Tape&, Var x, Var) { return ad::gelu(x); }) < 1e-6);
  CHECK(check([](Tape&, Var x, Var) { return ad::sigmoid(x); }) < 1e-6);
}

TEST_CASE("relu/clamp/pow gradients away from kinks") {
  Rng rng(5);
  Tensor a({2, 3}, {0.5, -0.7, 1.2, -0.1, 0.9, 2.0});
  Tensor r = rand_tensor({2, 3}, rng);
  CHECK(gradcheck({&a}, [&](Tape& t) {
          return ad::frob_inner(ad::relu(leafv(t, &a)), r);
        }) < 1e-6);
  CHECK(gradcheck({&a}, [&](Tape& t) {
          return ad::frob_inner(ad::clamp_min(leafv(t, &a), 0.2), r);
        }) < 1e-6);
  Tensor pos({2, 2}, {0.4, 1.3, 2.2, 0.8});
  Tensor r2 = rand_tensor({2, 2}, rng);
  CHECK(gradcheck({&pos}, [&](Tape& t) {
          return ad::frob_inner(ad::pow_scalar(leafv(t, &pos), 3.0), r2);
        }) < 1e-6);
}

TEST_CASE("bias and lastdim broadcast gradients") {
  Rng rng(6);
  Tensor x = rand_tensor({2, 3, 4}, rng), v = rand_tensor({4}, rng);
  Tensor r = rand_tensor({2, 3, 4}, rng);
  CHECK(gradcheck({&x, &v}, [&](Tape& t) {
          return ad::frob_inner(ad::add_bias(leafv(t, &x), leafv(t, &v)), r);
        }) < 1e-6);
  CHECK(gradcheck({&x, &v}, [&](Tape& t) {
          return ad::frob_inner(ad::mul_lastdim(leafv(t, &x), leafv(t, &v)), r);
        }) < 1e-6);
}

TEST_CASE("linear / matmul / bmm gradients") {
  Rng rng(7);
  Tensor x = rand_tensor({2, 3, 4}, rng), w = rand_tensor({4, 5}, rng), b = rand_tensor({5}, rng);
  Tensor r = rand_tensor({2, 3, 5}, rng);
  CHECK(gradcheck({&x, &w, &b}, [&](Tape& t) {
          return ad::frob_inner(ad::linear(leafv(t, &x), leafv(t, &w), leafv(t, &b)), r);
        }) < 1e-6);

  Tensor a2 = rand_tensor({3, 4}, rng), b2 = rand_tensor({4, 2}, rng);
  Tensor r2 = rand_tensor({3, 2}, rng);
  CHECK(gradcheck({&a2, &b2}, [&](Tape& t) {
          return ad::frob_inner(ad::matmul(leafv(t, &a2), leafv(t, &b2)), r2);
        }) < 1e-6);

  Tensor a3 = rand_tensor({2, 3, 4}, rng), b3 = rand_tensor({2, 4, 5}, rng);
  Tensor r3 = rand_tensor({2, 3, 5}, rng);
  CHECK(gradcheck({&a3, &b3}, [&](Tape& t) {
          return ad::frob_inner(ad::bmm(leafv(t, &a3), leafv(t, &b3)), r3);
        }) < 1e-6);

  Tensor a4 = rand_tensor({2, 3, 4}, rng), b4 = rand_tensor({2, 5, 4}, rng);
  Tensor r4 = rand_tensor({2, 3, 5}, rng);
  CHECK(gradcheck({&a4, &b4}, [&](Tape& t) {
          return ad::frob_inner(ad::bmm_nt(leafv(t, &a4), leafv(t, &b4)), r4);
        }) < 1e-6);
}

TEST_CASE("conv2d and maxpool gradients") {
  Rng rng(8);
  Tensor x = rand_tensor({2, 3, 6, 5}, rng);
  Tensor w = rand_tensor({4, 3, 3, 3}, rng);
  Tensor b = rand_tensor({4}, rng);
  Tensor r = rand_tensor({2, 4, 3, 3}, rng);
  ad::Conv2dSpec spec{2, 2, 1, 1, 1, 1, 1};
  CHECK(gradcheck({&x, &w, &b}, [&](Tape& t) {
          return ad::frob_inner(
              ad::conv2d(leafv(t, &x), leafv(t, &w), leafv(t, &b), spec), r);
        }) < 1e-6);

  Tensor wd = rand_tensor({3, 1, 3, 3}, rng);
  Tensor bd = rand_tensor({3}, rng);
  ad::Conv2dSpec dspec{1, 1, 1, 1, 1, 1, 3};
  Tensor rd = rand_tensor({2, 3, 6, 5}, rng);
  CHECK(gradcheck({&x, &wd, &bd}, [&](Tape& t) {
          return ad::frob_inner(
              ad::conv2d(leafv(t, &x), leafv(t, &wd), leafv(t, &bd), dspec), rd);
        }) < 1e-6);

  Tensor rp = rand_tensor({2, 3, 3, 3}, rng);
  CHECK(gradcheck({&x}, [&](Tape& t) {
          return ad::frob_inner(ad::maxpool2d(leafv(t, &x), 3, 2, 1), rp);
        }) < 1e-6);
}

TEST_CASE("dilated conv keeps spatial size with matching padding") {
  Rng rng(9);
  Tensor x = rand_tensor({1, 2, 5, 5}, rng);
  for (int dil : {1, 2, 3}) {
    Tensor w = rand_tensor({1, 2, 3, 3}, rng);
    ad::Conv2dSpec spec{1, 1, dil, dil, dil, dil, 1};
    Tape tape;
    Var r = ad::conv2d(tape.leaf(&x, false), tape.leaf(&w, false), Var{}, spec);
    CHECK(r.val().shape() == std::vector<int64_t>{1, 1, 5, 5});
  }
}

TEST_CASE("batchnorm: train stats, eval identity, gradients") {
  Rng rng(10);
  Tensor x = rand_tensor({6, 3}, rng, -2.0, 2.0);
  nn::BatchNorm bn;
  bn.init(3, true);

  {
    Tape t;
    Var y = bn.forward(t, t.leaf(&x, false), /*train=*/true, /*update_stats=*/false);
    for (int64_t c = 0; c < 3; ++c) {
      double m = 0.0;
      for (int64_t n = 0; n < 6; ++n) m += y.val().at2(n, c);
      CHECK(std::abs(m / 6.0) < 1e-10);
    }
  }
  // eval with running mean 0, var 1, scale 1 -> identity
  {
    Tape t;
    Var y = bn.forward(t, t.leaf(&x, false), /*train=*/false);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(y.val()[i] == doctest::Approx(x[i]).epsilon(1e-5));
  }
  // batch of one in training mode is an error
  {
    Tensor one = rand_tensor({1, 3}, rng);
    Tape t;
    CHECK_THROWS(bn.forward(t, t.leaf(&one, false), true, false));
  }

  Tensor r = rand_tensor({6, 3}, rng);
  CHECK(gradcheck({&x, &bn.gamma, &bn.beta}, [&](Tape& t) {
          return ad::frob_inner(bn.forward(t, leafv(t, &x), true, false), r);
        }) < 1e-5);

  Tensor x4 = rand_tensor({2, 3, 4, 4}, rng);
  nn::BatchNorm bn4;
  bn4.init(3, true);
  Tensor r4 = rand_tensor({2, 3, 4, 4}, rng);
  CHECK(gradcheck({&x4, &bn4.gamma, &bn4.beta}, [&](Tape& t) {
          return ad::frob_inner(bn4.forward(t, leafv(t, &x4), true, false), r4);
        }) < 1e-5);
}

TEST_CASE("layernorm matches oracle and gradients pass") {
  Rng rng(11);
  Tensor x = rand_tensor({2, 3, 5}, rng);
  nn::LayerNorm ln;
  ln.init(5);
  rand_fill(ln.gamma, rng, 0.5, 1.5);
  rand_fill(ln.beta, rng, -0.5, 0.5);
  {
    Tape t;
    Var y = ln.forward(t, t.leaf(&x, false));
    Tensor expect = oracle::layernorm(x, ln.gamma, ln.beta, ln.eps);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(y.val()[i] == doctest::Approx(expect[i]).epsilon(1e-10));
  }
  Tensor r = rand_tensor({2, 3, 5}, rng);
  CHECK(gradcheck({&x, &ln.gamma, &ln.beta}, [&](Tape& t) {
          return ad::frob_inner(ln.forward(t, leafv(t, &x)), r);
        }) < 1e-5);
}

TEST_CASE("softmax rows sum to one and gradients pass") {
  Rng rng(12);
  Tensor x = rand_tensor({3, 4, 5}, rng, -3.0, 3.0);
  {
    Tape t;
    Var y = ad::softmax_lastdim(t.leaf(&x, false));
    for (int64_t r = 0; r < 12; ++r) {
      double s = 0.0;
      for (int64_t j = 0; j < 5; ++j) s += y.val()[r * 5 + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  Tensor r = rand_tensor({3, 4, 5}, rng);
  CHECK(gradcheck({&x}, [&](Tape& t) {
          return ad::frob_inner(ad::softmax_lastdim(leafv(t, &x)), r);
        }) < 1e-6);

  Tensor x4 = rand_tensor({2, 3, 2, 2}, rng, -3.0, 3.0);
  Tensor r4 = rand_tensor({2, 3, 2, 2}, rng);
  CHECK(gradcheck({&x4}, [&](Tape& t) {
          return ad::frob_inner(ad::softmax_dim1(leafv(t, &x4)), r4);
        }) < 1e-6);
}

TEST_CASE("shaping ops are bijective with exact gradients") {
  Rng rng(13);
  Tensor x = rand_tensor({2, 3, 2, 4}, rng);
  {
    Tape t;
    Var tok = ad::nchw_to_tokens(t.leaf(&x, false));
    CHECK(tok.val().shape() == std::vector<int64_t>{2, 8, 3});
    // raster order: pixel (0,1) is token index 1
    CHECK(tok.val().at3(0, 1, 0) == x.at4(0, 0, 0, 1));
    Var back = ad::tokens_to_nchw(tok, 2, 4);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.val()[i] == x[i]);
  }
  Tensor r = rand_tensor({2, 8, 3}, rng);
  CHECK(gradcheck({&x}, [&](Tape& t) {
          return ad::frob_inner(ad::nchw_to_tokens(leafv(t, &x)), r);
        }) < 1e-6);

  Tensor tk = rand_tensor({2, 4, 6}, rng);
  Tensor rh = rand_tensor({4, 4, 3}, rng);
  CHECK(gradcheck({&tk}, [&](Tape& t) {
          return ad::frob_inner(ad::split_heads(leafv(t, &tk), 2), rh);
        }) < 1e-6);
  {
    Tape t;
    Var s = ad::split_heads(t.leaf(&tk, false), 2);
    Var m = ad::merge_heads(s, 2);
    for (int64_t i = 0; i < tk.numel(); ++i) CHECK(m.val()[i] == tk[i]);
  }
}

TEST_CASE("concat/slice/index_select/merge_rows gradients") {
  Rng rng(14);
  Tensor a = rand_tensor({2, 1, 3, 3}, rng), b = rand_tensor({2, 2, 3, 3}, rng);
  Tensor r = rand_tensor({2, 3, 3, 3}, rng);
  CHECK(gradcheck({&a, &b}, [&](Tape& t) {
          return ad::frob_inner(ad::concat_dim1({leafv(t, &a), leafv(t, &b)}), r);
        }) < 1e-6);
  Tensor rs = rand_tensor({2, 1, 3, 3}, rng);
  CHECK(gradcheck({&b}, [&](Tape& t) {
          return ad::frob_inner(ad::slice_dim1(leafv(t, &b), 1, 1), rs);
        }) < 1e-6);

  Tensor x = rand_tensor({4, 3}, rng);
  Tensor ri = rand_tensor({2, 3}, rng);
  CHECK(gradcheck({&x}, [&](Tape& t) {
          return ad::frob_inner(ad::index_select0(leafv(t, &x), {2, 0}), ri);
        }) < 1e-6);

  Tensor xa = rand_tensor({2, 3}, rng), xb = rand_tensor({2, 3}, rng);
  Tensor rm = rand_tensor({4, 3}, rng);
  CHECK(gradcheck({&xa, &xb}, [&](Tape& t) {
          return ad::frob_inner(
              ad::merge_rows0(leafv(t, &xa), leafv(t, &xb), {0, 2}, {1, 3}), rm);
        }) < 1e-6);
  {
    // merge is the exact inverse of the split
    Tape t;
    Tensor x6 = rand_tensor({4, 2}, rng);
    Var v = t.leaf(&x6, false);
    Var va = ad::index_select0(v, {1, 3});
    Var vb = ad::index_select0(v, {0, 2});
    Var m = ad::merge_rows0(va, vb, {1, 3}, {0, 2});
    for (int64_t i = 0; i < x6.numel(); ++i) CHECK(m.val()[i] == x6[i]);
  }
}

TEST_CASE("reductions and broadcast gradients") {
  Rng rng(15);
  Tensor x = rand_tensor({2, 3, 2, 2}, rng);
  Tensor r = rand_tensor({2, 3}, rng);
  CHECK(gradcheck({&x}, [&](Tape& t) {
          return ad::frob_inner(ad::spatial_mean(leafv(t, &x)), r);
        }) < 1e-6);
  Tensor r1 = rand_tensor({2, 1, 2, 2}, rng);
  CHECK(gradcheck({&x}, [&](Tape& t) {
          return ad::frob_inner(ad::channel_max(leafv(t, &x)), r1);
        }) < 1e-6);
  CHECK(gradcheck({&x}, [&](Tape& t) {
          return ad::frob_inner(ad::channel_mean(leafv(t, &x)), r1);
        }) < 1e-6);
  Tensor m = rand_tensor({2, 1, 2, 2}, rng);
  Tensor rb = rand_tensor({2, 3, 2, 2}, rng);
  CHECK(gradcheck({&x, &m}, [&](Tape& t) {
          return ad::frob_inner(ad::mul_channel_broadcast(leafv(t, &x), leafv(t, &m)), rb);
        }) < 1e-6);
  CHECK(gradcheck({&x}, [&](Tape& t) { return ad::mean_all(leafv(t, &x)); }) < 1e-6);
}

TEST_CASE("cross entropy: uniform logits give ln(P), gradient passes") {
  Tensor logits = Tensor::zeros({2, 4});
  std::vector<int> labels{1, 3};
  {
    Tape t;
    Var l = ad::cross_entropy(t.leaf(&logits, false), labels);
    CHECK(l.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  Rng rng(16);
  Tensor lg = rand_tensor({3, 5}, rng, -2.0, 2.0);
  std::vector<int> lb{4, 0, 2};
  CHECK(gradcheck({&lg}, [&](Tape& t) {
          return ad::cross_entropy(leafv(t, &lg), lb);
        }) < 1e-6);
  Tape t;
  CHECK_THROWS(ad::cross_entropy(t.leaf(&lg, false), std::vector<int>{5, 0, 2}));
}

TEST_CASE("unused parameters get zero grads, reused leaves are cached") {
  Rng rng(17);
  Tensor a = rand_tensor({2, 2}, rng), unused = rand_tensor({2, 2}, rng);
  Tape t;
  Var va = t.leaf(&a, true);
  Var va2 = t.leaf(&a, true);
  CHECK(va.id == va2.id);
  Var s = ad::sum_all(ad::mul(va, va2));  // d/da (sum a*a) = 2a
  t.backward(s);
  Tensor g = t.grad_of(&a);
  for (int64_t i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(2.0 * a[i]));
  Tensor gu = t.grad_of(&unused);
  for (int64_t i = 0; i < 4; ++i) CHECK(gu[i] == 0.0);
}
