#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fhvae/io.hpp"
#include "fhvae/seqnet.hpp"
#include "testutil.hpp"

using namespace fhvae;
using net::ParamStore;

TEST_CASE("lstm_step: zero parameters give zero state") {
  ParamStore<double> p;
  net::LstmRef r = net::add_lstm(p, "lstm", 3, 4);
  std::vector<double> x = {1.0, -2.0, 0.5}, h0(4, 0.0), c0(4, 0.0), h(4), c(4);
  net::lstm_step<double>(p, r, x, h0, c0, h, c);
  for (double v : h) CHECK(v == 0.0);
  for (double v : c) CHECK(v == 0.0);
}

TEST_CASE("lstm_step: saturated forget gate preserves the cell") {
  ParamStore<double> p;
  net::LstmRef r = net::add_lstm(p, "lstm", 2, 3);
  for (int j = 0; j < 3; ++j) p[r.b].at(0, 3 + j) = 100.0;  // forget block
  std::vector<double> x = {0.3, -0.7}, h0(3, 0.0), c0 = {0.2, -1.5, 3.0}, h(3), c(3);
  net::lstm_step<double>(p, r, x, h0, c0, h, c);
  for (int j = 0; j < 3; ++j) CHECK(c[j] == doctest::Approx(c0[j]).epsilon(1e-6));
}

TEST_CASE("lstm_step: output sizes follow hidden_size") {
  ParamStore<float> p;
  net::LstmRef r = net::add_lstm(p, "lstm", 64, 128);
  std::vector<float> x(64, 0.1f), h0(128, 0.0f), c0(128, 0.0f), h(128), c(128);
  net::lstm_step<float>(p, r, x, h0, c0, h, c);
  CHECK(h.size() == 128);
  CHECK(c.size() == 128);
  // |h| <= 1 element-wise: logistic and tanh bounds
  net::xavier_init(p, 17);
  Rng rng(18);
  test::fill_normal(x.data(), x.size(), rng);
  test::fill_normal(c0.data(), c0.size(), rng);
  test::fill_uniform(h0.data(), h0.size(), rng, -1.0, 1.0);
  net::lstm_step<float>(p, r, x, h0, c0, h, c);
  for (float v : h) CHECK(std::abs(v) <= 1.0f);
}

TEST_CASE("lstm_step: shape mismatch raises") {
  ParamStore<double> p;
  net::LstmRef r = net::add_lstm(p, "lstm", 3, 4);
  std::vector<double> x(2), h0(4), c0(4), h(4), c(4);
  CHECK_THROWS_AS((net::lstm_step<double>(p, r, x, h0, c0, h, c)), DimensionError);
}

TEST_CASE("stacked_forward: concat width, zero case, determinism") {
  ParamStore<float> p;
  std::vector<net::LstmRef> layers{net::add_lstm(p, "l0", 64, 128),
                                   net::add_lstm(p, "l1", 128, 128)};
  Mat<float> x(32, 64);
  Rng rng(5);
  test::fill_normal(x.data(), x.size(), rng);
  auto out = net::stacked_forward(p, layers, x);
  CHECK(out.last_concat.size() == 256);
  CHECK(out.top.rows() == 32);
  CHECK(out.top.cols() == 128);
  for (float v : out.last_concat) CHECK(v == 0.0f);  // zero params propagate zeros

  net::xavier_init(p, 11);
  auto a = net::stacked_forward(p, layers, x);
  auto b = net::stacked_forward(p, layers, x);
  CHECK(a.top == b.top);
  CHECK(a.last_concat == b.last_concat);

  Mat<float> empty(0, 64);
  CHECK_THROWS_AS(net::stacked_forward(p, layers, empty), DimensionError);
}

TEST_CASE("affine: degenerate weights and shapes") {
  ParamStore<double> p;
  net::AffineRef r = net::add_affine(p, "head", 3, 3);
  for (int j = 0; j < 3; ++j) p[r.b].at(0, j) = j + 1.0;
  std::vector<double> v = {0.5, -1.0, 2.0};
  auto out = net::affine<double>(p, r, v);
  CHECK(out == std::vector<double>{1.0, 2.0, 3.0});  // W = 0 returns b

  for (int j = 0; j < 3; ++j) {
    p[r.b].at(0, j) = 0.0;
    p[r.w].at(j, j) = 1.0;
  }
  out = net::affine<double>(p, r, v);
  for (int j = 0; j < 3; ++j) CHECK(out[j] == doctest::Approx(v[j]));

  ParamStore<float> q;
  net::AffineRef wide = net::add_affine(q, "head", 256, 32);
  std::vector<float> in(256, 0.25f);
  CHECK(net::affine<float>(q, wide, in).size() == 32);
}

TEST_CASE("xavier_init: deterministic, zero tables and biases, bounded weights") {
  auto build = [](ParamStore<float>& p) {
    net::add_lstm(p, "l0", 8, 16);
    net::add_affine(p, "head", 32, 4);
    p.add("mu1_table", 10, 4, net::ParamKind::table);
    p.add("mu2_table", 6, 4, net::ParamKind::table);
  };
  ParamStore<float> a, b;
  build(a);
  build(b);
  net::xavier_init(a, 77);
  net::xavier_init(b, 77);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Mat<float>& m = a[i];
    if (a.kind(i) != net::ParamKind::weight) {
      for (std::size_t j = 0; j < m.size(); ++j) CHECK(m.data()[j] == 0.0f);
    } else {
      float s = static_cast<float>(std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols())));
      for (std::size_t j = 0; j < m.size(); ++j) {
        CHECK(std::isfinite(m.data()[j]));
        CHECK(std::abs(m.data()[j]) <= s);
      }
    }
  }
  ParamStore<float> c;
  build(c);
  net::xavier_init(c, 78);
  CHECK_FALSE(a[0] == c[0]);
}

namespace {

// 0.5 * (sum of squared top outputs + sum of squared concat entries) for a
// fixed input; exercises per-step and last-step gradient seeding together.
struct StackLoss final : net::DifferentiableLoss<double> {
  std::vector<net::LstmRef> layers;
  Mat<double> input0, input1;  // two-step sequence, each B x D

  double value(const ParamStore<double>& p) const override {
    net::StackCache<double> cache;
    std::vector<const Mat<double>*> xs = {&input0, &input1};
    net::stack_forward(p, layers, std::span<const Mat<double>* const>(xs), cache);
    double acc = 0;
    const auto& top = cache.hidden.back();
    for (const auto& h : top)
      for (std::size_t i = 0; i < h.size(); ++i) acc += h.data()[i] * h.data()[i];
    Mat<double> concat = net::last_step_concat(cache);
    for (std::size_t i = 0; i < concat.size(); ++i) acc += concat.data()[i] * concat.data()[i];
    return 0.5 * acc;
  }

  void add_gradients(const ParamStore<double>& p, ParamStore<double>& g) const override {
    net::StackCache<double> cache;
    std::vector<const Mat<double>*> xs = {&input0, &input1};
    net::stack_forward(p, layers, std::span<const Mat<double>* const>(xs), cache);
    std::vector<Mat<double>> d_top;
    for (const auto& h : cache.hidden.back()) d_top.push_back(h);
    Mat<double> d_concat = net::last_step_concat(cache);
    net::stack_backward<double>(p, layers, cache, &d_top, &d_concat, g, nullptr);
  }
};

}  // namespace

TEST_CASE("stack backward matches finite differences") {
  ParamStore<double> p;
  StackLoss loss;
  loss.layers = {net::add_lstm(p, "l0", 3, 4), net::add_lstm(p, "l1", 4, 5)};
  Rng rng(13);
  for (std::size_t i = 0; i < p.size(); ++i)
    test::fill_uniform(p[i].data(), p[i].size(), rng, -0.5, 0.5);
  loss.input0.resize(2, 3);
  loss.input1.resize(2, 3);
  test::fill_normal(loss.input0.data(), loss.input0.size(), rng);
  test::fill_normal(loss.input1.data(), loss.input1.size(), rng);
  CHECK(test::gradient_check<double>(loss, p) < 1e-6);
}

TEST_CASE("batched stack matches the single-vector reference path") {
  ParamStore<float> p;
  std::vector<net::LstmRef> layers{net::add_lstm(p, "l0", 5, 6), net::add_lstm(p, "l1", 6, 7)};
  net::xavier_init(p, 3);
  Mat<float> x(9, 5);
  Rng rng(4);
  test::fill_normal(x.data(), x.size(), rng);
  auto single = net::stacked_forward(p, layers, x);

  std::vector<Mat<float>> steps(9, Mat<float>(1, 5));
  for (int t = 0; t < 9; ++t)
    for (int d = 0; d < 5; ++d) steps[t].at(0, d) = x.at(t, d);
  std::vector<const Mat<float>*> xs(9);
  for (int t = 0; t < 9; ++t) xs[t] = &steps[t];
  net::StackCache<float> cache;
  net::stack_forward(p, layers, std::span<const Mat<float>* const>(xs), cache);
  Mat<float> concat = net::last_step_concat(cache);
  REQUIRE(concat.cols() == single.last_concat.size());
  for (std::size_t j = 0; j < concat.cols(); ++j)
    CHECK(concat.at(0, j) == doctest::Approx(single.last_concat[j]).epsilon(1e-5));
  for (int t = 0; t < 9; ++t)
    for (int j = 0; j < 7; ++j)
      CHECK(cache.hidden.back()[t].at(0, j) == doctest::Approx(single.top.at(t, j)).epsilon(1e-5));
}

namespace {

struct SumSquares final : net::DifferentiableLoss<double> {
  double value(const ParamStore<double>& p) const override {
    double acc = 0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += kern::sumsq(p[i].data(), p[i].size());
    return acc;
  }
  void add_gradients(const ParamStore<double>& p, ParamStore<double>& g) const override {
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = 0; j < p[i].size(); ++j) g[i].data()[j] += 2.0 * p[i].data()[j];
  }
};

struct FirstArrayOnly final : net::DifferentiableLoss<double> {
  double value(const ParamStore<double>& p) const override {
    return kern::sumsq(p[0].data(), p[0].size());
  }
  void add_gradients(const ParamStore<double>& p, ParamStore<double>& g) const override {
    for (std::size_t j = 0; j < p[0].size(); ++j) g[0].data()[j] += 2.0 * p[0].data()[j];
  }
};

}  // namespace

TEST_CASE("compute_gradients: analytic toy losses") {
  ParamStore<double> p;
  p.add("a", 2, 3, net::ParamKind::weight);
  p.add("b", 1, 4, net::ParamKind::weight);
  Rng rng(21);
  for (std::size_t i = 0; i < p.size(); ++i)
    test::fill_normal(p[i].data(), p[i].size(), rng);

  SumSquares sq;
  auto g = net::compute_gradients<double>(sq, p);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < p[i].size(); ++j)
      CHECK(g[i].data()[j] == doctest::Approx(2.0 * p[i].data()[j]));
  CHECK(test::gradient_check<double>(sq, p) < 1e-9);

  FirstArrayOnly partial;
  auto g2 = net::compute_gradients<double>(partial, p);
  for (std::size_t j = 0; j < p[1].size(); ++j) CHECK(g2[1].data()[j] == 0.0);

  p[0].at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(net::compute_gradients<double>(sq, p), NumericError);
}

TEST_CASE("checkpoint round trip preserves names, shapes and bytes") {
  ParamStore<float> p;
  net::add_lstm(p, "enc.l0", 4, 6);
  net::add_affine(p, "head", 12, 3);
  p.add("mu2_table", 5, 3, net::ParamKind::table);
  net::xavier_init(p, 9);
  p[p.find("mu2_table")].at(2, 1) = 0.125f;

  auto path = std::filesystem::temp_directory_path() / "fhvae_test_ckpt.bin";
  io::save_checkpoint(p, path);
  ParamStore<float> q = p.zeros_like();
  io::load_checkpoint(path, q);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == q[i]);

  ParamStore<float> wrong;
  net::add_lstm(wrong, "enc.l0", 4, 6);
  CHECK_THROWS_AS(io::load_checkpoint(path, wrong), DataError);
  std::filesystem::remove(path);
}
