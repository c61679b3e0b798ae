#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fhvae/objective.hpp"
#include "fhvae/rng.hpp"
#include "testutil.hpp"

using namespace fhvae;
using obj::HyperConfig;
using obj::Stage;

TEST_CASE("kl_diag_gaussian: frozen closed-form cases") {
  // identical distributions
  std::vector<double> mean(8, 0.0), logvar(8, std::log(0.25)), p_mean(8, 0.0);
  CHECK(obj::kl_diag_gaussian<double>(mean, logvar, p_mean, 0.25) ==
        doctest::Approx(0.0).epsilon(1e-12));

  // dim 1: q = N(0.5, 0.25), p = N(0, 0.25) -> 0.5
  std::vector<double> m1{0.5}, lv1{std::log(0.25)}, pm1{0.0};
  CHECK(obj::kl_diag_gaussian<double>(m1, lv1, pm1, 0.25) == doctest::Approx(0.5).epsilon(1e-12));

  // dim 32: q = N(0, I), p = N(0, 0.25 I)
  std::vector<double> m32(32, 0.0), lv32(32, 0.0);
  double expected = 32.0 * (0.5 * std::log(0.25) + 1.0 / 0.5 - 0.5);
  CHECK(obj::kl_diag_gaussian<double>(m32, lv32, {}, 0.25) ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(25.82).epsilon(1e-3));
}

TEST_CASE("kl_diag_gaussian: non-negative, zero only at equality") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    int dim = 1 + static_cast<int>(rng.below(8));
    std::vector<double> mean(dim), logvar(dim), p_mean(dim);
    test::fill_normal(mean.data(), dim, rng);
    test::fill_uniform(logvar.data(), dim, rng, -2.0, 2.0);
    test::fill_normal(p_mean.data(), dim, rng);
    double p_var = 0.1 + 3.0 * rng.uniform();
    double kl = obj::kl_diag_gaussian<double>(mean, logvar, p_mean, p_var);
    CHECK(kl >= -1e-12);
  }
  std::vector<double> mean{0.3, -0.7}, logvar{std::log(0.5), std::log(0.5)};
  CHECK(obj::kl_diag_gaussian<double>(mean, logvar, mean, 0.5) ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("kl_diag_gaussian: invalid prior variance") {
  std::vector<double> m{0.0}, lv{0.0};
  CHECK_THROWS_AS(obj::kl_diag_gaussian<double>(m, lv, {}, 0.0), ConfigError);
}

TEST_CASE("log_gaussian_prior: frozen values and monotonicity") {
  std::vector<double> zero(32, 0.0);
  double at_zero = obj::log_gaussian_prior<double>(zero, 1.0);
  CHECK(at_zero == doctest::Approx(-16.0 * obj::kLog2Pi).epsilon(1e-12));
  CHECK(at_zero == doctest::Approx(-29.4060).epsilon(1e-4));

  std::vector<double> mu(32, 0.0);
  mu[0] = 2.0;  // ||mu||^2 = 4
  CHECK(obj::log_gaussian_prior<double>(mu, 1.0) == doctest::Approx(at_zero - 2.0).epsilon(1e-12));

  double prev = at_zero;
  for (double r2 : {0.5, 1.0, 2.0, 5.0}) {
    std::vector<double> v(32, 0.0);
    v[0] = std::sqrt(r2);
    double lp = obj::log_gaussian_prior<double>(v, 1.0);
    CHECK(lp < prev);
    prev = lp;
  }
}

TEST_CASE("discriminative_log_prob: symmetry, dominance, single candidate") {
  Mat<double> table(3, 2);
  table.at(0, 0) = 1.0;
  table.at(1, 0) = -1.0;
  table.at(2, 0) = 10.0;
  std::vector<double> z{0.0, 0.0};
  std::vector<int> two{0, 1};
  CHECK(obj::discriminative_log_prob<double>(z, table, 0, 0.25, two) ==
        doctest::Approx(std::log(0.5)).epsilon(1e-12));

  // z exactly on the row, competitor at squared distance 10
  Mat<double> t2(2, 1);
  t2.at(0, 0) = 0.0;
  t2.at(1, 0) = std::sqrt(10.0);
  std::vector<double> z2{0.0};
  double lp = obj::discriminative_log_prob<double>(z2, t2, 0, 0.25, std::vector<int>{0, 1});
  CHECK(lp == doctest::Approx(-std::log1p(std::exp(-20.0))).epsilon(1e-9));
  CHECK(std::abs(lp) < 3e-9);

  std::vector<int> one{2};
  CHECK(obj::discriminative_log_prob<double>(z, table, 2, 0.25, one) == doctest::Approx(0.0));

  CHECK_THROWS_AS(obj::discriminative_log_prob<double>(z, table, 2, 0.25, two), DataError);
}

TEST_CASE("discriminative_log_prob: softmax normalizes and is shift invariant") {
  Rng rng(17);
  Mat<double> table(6, 4);
  test::fill_normal(table.data(), table.size(), rng);
  std::vector<double> z(4);
  test::fill_normal(z.data(), 4, rng);
  std::vector<int> cands{0, 1, 2, 3, 4, 5};
  double total = 0;
  for (int row : cands)
    total += std::exp(obj::discriminative_log_prob<double>(z, table, row, 0.25, cands));
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));

  // rigid translation of table and z leaves the distribution unchanged
  Mat<double> shifted = table;
  std::vector<double> zs = z;
  for (std::size_t r = 0; r < shifted.rows(); ++r)
    for (std::size_t c = 0; c < shifted.cols(); ++c) shifted.at(r, c) += 3.25;
  for (auto& v : zs) v += 3.25;
  for (int row : cands)
    CHECK(obj::discriminative_log_prob<double>(zs, shifted, row, 0.25, cands) ==
          doctest::Approx(obj::discriminative_log_prob<double>(z, table, row, 0.25, cands))
              .epsilon(1e-9));
}

TEST_CASE("segment_bound: frozen composite values") {
  HyperConfig h;
  std::vector<double> mu_zero(32, 0.0);
  // spec-sheet arithmetic on the component values
  double bound = obj::segment_bound<double>(-1881.967, 0.0, 0.0, mu_zero, mu_zero, 128, 4, h,
                                            Stage::two);
  CHECK(bound == doctest::Approx(-1889.55).epsilon(1e-4));
  double stage1 = obj::segment_bound<double>(-1881.967, 0.0, 0.0, mu_zero, mu_zero, 128, 4, h,
                                             Stage::one);
  CHECK(stage1 == doctest::Approx(-1882.197).epsilon(1e-5));
  // additivity in recon
  double shifted = obj::segment_bound<double>(-1881.967 + 5.0, 0.0, 0.0, mu_zero, mu_zero, 128,
                                              4, h, Stage::two);
  CHECK(shifted == doctest::Approx(bound + 5.0).epsilon(1e-10));
  CHECK_THROWS_AS(obj::segment_bound<double>(0, 0, 0, mu_zero, mu_zero, 0, 4, h, Stage::one),
                  DataError);
}

TEST_CASE("discriminative_bound: alpha weighting") {
  HyperConfig h;
  h.alpha_z1 = 0;
  h.alpha_z2 = 0;
  CHECK(obj::discriminative_bound<double>(-5.5, -0.7, -0.7, h) == doctest::Approx(-5.5));
  h.alpha_z1 = 10000;
  h.alpha_z2 = 100;
  double v = obj::discriminative_bound<double>(-1889.55, -0.6931, -0.6931, h);
  CHECK(v == doctest::Approx(-1889.55 - 0.6931 * 10100).epsilon(1e-9));
  CHECK(v == doctest::Approx(-8889.9).epsilon(1e-4));
}

TEST_CASE("loss breakdown invariants hold per segment") {
  HyperConfig h;
  h.alpha_z1 = 10000;
  h.alpha_z2 = 100;
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    double recon = -2000.0 + 100.0 * rng.normal();
    double klz1 = std::abs(rng.normal());
    double klz2 = std::abs(rng.normal());
    double lpm1 = -30.0 + rng.normal();
    double lpm2 = -30.0 + rng.normal();
    double d1 = -std::abs(rng.normal());
    double d2 = -std::abs(rng.normal());
    int n_i = 1 + static_cast<int>(rng.below(200));
    int s_l = 1 + static_cast<int>(rng.below(10));
    for (Stage stage : {Stage::one, Stage::two}) {
      auto b = obj::make_loss_breakdown(recon, klz1, klz2, lpm1, lpm2, d1, d2, n_i, s_l, h, stage);
      CHECK(b.bound == doctest::Approx(b.recon - b.kl_z1 - b.kl_z2 + b.log_p_mu2 / n_i +
                                       b.log_p_mu1 / s_l)
                           .epsilon(1e-12));
      CHECK(b.total ==
            doctest::Approx(b.bound + h.alpha_z1 * b.disc_z1 + h.alpha_z2 * b.disc_z2)
                .epsilon(1e-12));
      if (stage == Stage::one) {
        CHECK(b.log_p_mu1 == 0.0);
        CHECK(b.disc_z1 == 0.0);
      }
    }
  }
}
