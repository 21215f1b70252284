#include "doctest.h"

#include "sagecc/core/autodiff.hpp"
#include "sagecc/core/errors.hpp"
#include "sagecc/core/image.hpp"
#include "sagecc/core/nn.hpp"
#include "sagecc/core/positional.hpp"
#include "support.hpp"

#include <filesystem>
#include <fstream>

using namespace sagecc;
using sagecc::testing::grad_check;
using sagecc::testing::random_matrix;

TEST_CASE("elementwise and reduction ops match finite differences") {
  nn::Rng rng(1);
  nn::ParameterStore store;
  Parameter& a = store.create("a", random_matrix(3, 4, rng));
  Parameter& b = store.create("b", random_matrix(3, 4, rng));
  Parameter& row = store.create("row", random_matrix(1, 4, rng));
  Parameter& col = store.create("col", random_matrix(3, 1, rng));
  Parameter& s = store.create("s", random_matrix(1, 1, rng));
  auto loss = [&](ad::Tape& t) {
    ad::Var x = ad::mul(t.parameter(a), t.parameter(b));
    x = ad::add_row(x, t.parameter(row));
    x = ad::mul_col(x, t.parameter(col));
    x = ad::mul_scalar(x, t.parameter(s));
    x = ad::sub(x, ad::abs(t.parameter(b)));
    x = ad::softmax_rows(x);
    const ad::Var parts[] = {x, ad::log_softmax_rows(t.parameter(a))};
    ad::Var y = ad::hconcat(parts);
    y = ad::matmul(y, ad::transpose(y));
    return ad::mean_all(ad::mul(y, y));
  };
  const auto r = grad_check(store, loss);
  CHECK_MESSAGE(r.max_rel_error < 1e-6, r.worst);
}

TEST_CASE("layer norm, batch norm and slicing gradients") {
  nn::Rng rng(2);
  nn::ParameterStore store;
  Parameter& x = store.create("x", random_matrix(5, 6, rng));
  Parameter& g = store.create("g", random_matrix(1, 6, rng));
  Parameter& be = store.create("b", random_matrix(1, 6, rng));
  auto loss = [&](ad::Tape& t) {
    ad::Var ln = ad::layer_norm_rows(t.parameter(x), t.parameter(g), t.parameter(be), 1e-5);
    ad::Var bn = ad::batch_norm_train(t.parameter(x), t.parameter(g), t.parameter(be), 1e-5,
                                      nullptr, nullptr);
    const int ids[] = {4, 0, 4};
    const ad::Var parts[] = {ad::slice_rows(ln, 1, 3), ad::gather_rows(bn, ids)};
    ad::Var y = ad::vconcat(parts);
    y = ad::slice_cols(y, 2, 3);
    y = ad::relu(y);
    return ad::sum_all(ad::mul(ad::mean_rows(y), ad::mean_rows(y)));
  };
  const auto r = grad_check(store, loss);
  CHECK_MESSAGE(r.max_rel_error < 1e-6, r.worst);
}

TEST_CASE("row cosine and im2col gradients") {
  nn::Rng rng(3);
  nn::ParameterStore store;
  Parameter& a = store.create("a", random_matrix(16, 3, rng));
  Parameter& b = store.create("b", random_matrix(16, 3, rng));
  auto loss = [&](ad::Tape& t) {
    ad::Var c = ad::row_cosine(t.parameter(a), t.parameter(b), 1e-8);
    int oh = 0, ow = 0;
    ad::Var cols = ad::im2col(t.parameter(a), 4, 4, 3, 2, 1, &oh, &ow);
    return ad::add(ad::sum_all(ad::mul(c, c)), ad::mean_all(ad::mul(cols, cols)));
  };
  const auto r = grad_check(store, loss);
  CHECK_MESSAGE(r.max_rel_error < 1e-6, r.worst);
}

TEST_CASE("conv2d matches a direct convolution") {
  nn::Rng rng(4);
  nn::ParameterStore store;
  nn::Conv2d conv(store, "c", 2, 3, 3, 2, 1, rng);
  store.at("c.bias").value = random_matrix(1, 3, rng);
  const int h = 5, w = 4;
  const Matrix x = random_matrix(h * w, 2, rng);
  ad::Tape t;
  int oh = 0, ow = 0;
  const Matrix y = conv(t, t.constant(x), h, w, &oh, &ow).value();
  REQUIRE(oh == 3);
  REQUIRE(ow == 2);
  const Matrix& W = store.at("c.weight").value;
  const Matrix& B = store.at("c.bias").value;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int co = 0; co < 3; ++co) {
        double acc = B(0, co);
        for (int ky = 0; ky < 3; ++ky) {
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            for (int ci = 0; ci < 2; ++ci) acc += x(iy * w + ix, ci) * W((ky * 3 + kx) * 2 + ci, co);
          }
        }
        CHECK(y(oy * ow + ox, co) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("layer norm output has zero mean and unit variance") {
  nn::Rng rng(5);
  nn::ParameterStore store;
  nn::LayerNorm ln(store, "ln", 32);
  ad::Tape t;
  const Matrix y = ln(t, t.constant(random_matrix(4, 32, rng, 3.0))).value();
  for (Index i = 0; i < y.rows(); ++i) {
    const double mean = y.row(i).mean();
    const double var = (y.row(i).array() - mean).square().mean();
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("causal attention ignores future tokens") {
  nn::Rng rng(6);
  nn::ParameterStore store;
  nn::MultiHeadAttention mha(store, "m", 8, 8, 8, 2, rng);
  Matrix x = random_matrix(5, 8, rng);
  ad::Tape t1;
  const Matrix y1 = mha(t1, t1.constant(x), t1.constant(x), nullptr, true).value();
  x.row(4) = random_matrix(1, 8, rng);
  ad::Tape t2;
  const Matrix y2 = mha(t2, t2.constant(x), t2.constant(x), nullptr, true).value();
  CHECK(y1.topRows(4) == y2.topRows(4));
  CHECK(y1.row(4) != y2.row(4));
}

TEST_CASE("adam first step moves each weight by lr against the gradient sign") {
  nn::ParameterStore store;
  Parameter& p = store.create("p", Matrix::Zero(1, 3));
  p.grad = (Matrix(1, 3) << 2.0, -0.5, 0.0).finished();
  nn::Adam opt(0.1);
  opt.step({&p});
  CHECK(p.value(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(p.value(0, 1) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(p.value(0, 2) == 0.0);
}

TEST_CASE("gradient clipping rescales to the global norm") {
  nn::ParameterStore store;
  Parameter& a = store.create("a", Matrix::Zero(1, 2));
  Parameter& b = store.create("b", Matrix::Zero(1, 1));
  a.grad = (Matrix(1, 2) << 3.0, 0.0).finished();
  b.grad = (Matrix(1, 1) << 4.0).finished();
  const double before = nn::clip_grad_norm({&a, &b}, 1.0);
  CHECK(before == doctest::Approx(5.0));
  CHECK(nn::grad_norm({&a, &b}) == doctest::Approx(1.0));
  CHECK(a.grad(0, 0) == doctest::Approx(0.6));
}

TEST_CASE("sinusoid positions") {
  const RowVector p0 = sinusoid<double>(0.0, 6);
  CHECK(p0(0) == 0.0);
  CHECK(p0(1) == 1.0);
  const RowVector p = sinusoid<double>(3.0, 4);
  CHECK(p(2) == doctest::Approx(std::sin(3.0 / 100.0)));
  CHECK(p(3) == doctest::Approx(std::cos(3.0 / 100.0)));
  const Matrix grid = sinusoid_2d<double>(2, 3, 8);
  CHECK(grid.rows() == 6);
  CHECK(grid.row(4).head(4) == sinusoid<double>(1.0, 4));
  CHECK(grid.row(4).tail(4) == sinusoid<double>(1.0, 4));
}

TEST_CASE("png round trip and read errors") {
  Image img(3, 5);
  for (size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 7);
  const auto dir = std::filesystem::temp_directory_path() / "sagecc_png_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "x.png").string();
  write_png(path, img);
  CHECK(read_png(path) == img);
  CHECK_THROWS_AS(read_png((dir / "missing.png").string()), InputError);
  {
    std::ofstream(dir / "bad.png") << "not a png";
  }
  CHECK_THROWS_AS(read_png((dir / "bad.png").string()), InputError);
  const Grid<double> g = to_grid(img);
  CHECK(g.height == 3);
  CHECK(g.data.rows() == 15);
  CHECK(g.data.maxCoeff() <= 0.5);
  CHECK(g.data.minCoeff() >= -0.5);
}
