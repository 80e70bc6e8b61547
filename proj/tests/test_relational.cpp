#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "relational_oracle.hpp"
#include "serkd/gradcheck.hpp"
#include "serkd/relational.hpp"
#include "test_util.hpp"

using namespace serkd;
using serkd::testing::uniform;

namespace {

const AngleLossPlan kNaive{AngleStrategy::naive_loop, 1, std::size_t{1} << 30};
const AngleLossPlan kVectorized{AngleStrategy::vectorized, 1, std::size_t{1} << 30};
AngleLossPlan tiled(std::size_t tile) { return {AngleStrategy::tiled, tile, std::size_t{1} << 30}; }

// Relative difference with the same 1e-6 floor finite_diff_check uses, so
// losses that are zero up to roundoff compare sensibly.
double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("huber branches and continuity") {
  CHECK(huber(1.5, 1.0) == doctest::Approx(0.125).epsilon(1e-15));
  CHECK(huber(3.0, 1.0) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(huber(2.0, 1.0) == 0.5);
  CHECK(0.5 * 1.0 * 1.0 == 1.0 - 0.5);
}

TEST_CASE("psi_distance") {
  Eigen::Vector2d a(0, 0), b(3, 4);
  CHECK(psi_distance(a, b, 5.0) == 1.0);
  CHECK(psi_distance(a, a, 5.0) == 0.0);
  const double alpha = 3.7;
  CHECK(psi_distance(alpha * a, alpha * b, alpha * 5.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(psi_distance(a, b, 0.0), ContractError);
}

TEST_CASE("psi_angle") {
  Eigen::Vector2d i(1, 0), j(0, 0), k(0, 1);
  CHECK(std::abs(psi_angle(i, j, k)) <= 1e-15);
  CHECK(psi_angle(Eigen::Vector2d(-2, 1), Eigen::Vector2d(0, 1), Eigen::Vector2d(5, 1)) == -1.0);
  CHECK(psi_angle(i, i, k) == 0.0);
}

TEST_CASE("batch_pairwise_dist hand example") {
  auto d = batch_pairwise_dist(Tensor::from({1, 2, 2}, {0, 0, 3, 4}));
  CHECK(d.at({0, 0, 0}) == 0.0);
  CHECK(d.at({0, 1, 1}) == 0.0);
  CHECK(d.at({0, 0, 1}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(d.at({0, 1, 0}) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("batch_pairwise_dist rejects coincident batches") {
  CHECK_THROWS_AS(batch_pairwise_dist(Tensor::full({2, 4, 3}, 0.7)), DegenerateBatchError);
  CHECK_THROWS_AS(batch_pairwise_dist(Tensor::full({1, 1, 3}, 0.7)), ContractError);
}

TEST_CASE("batch_pairwise_dist matches the two-loop oracle") {
  std::mt19937_64 rng(11);
  auto feat = uniform({2, 5, 3}, rng);
  auto got = batch_pairwise_dist(feat);
  auto want = oracle::normalized_distances(feat);
  for (std::size_t q = 0; q < want.size(); ++q) CHECK(std::abs(got.values()[q] - want[q]) <= 1e-10);

  for (std::size_t b = 0; b < 2; ++b) {
    double total = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        CHECK(got.at({b, i, j}) == got.at({b, j, i}));
        total += got.at({b, i, j});
      }
    CHECK(std::abs(total / 20.0 - 1.0) <= 1e-9);
  }
}

TEST_CASE("loss_rd_sp examples") {
  std::mt19937_64 rng(12);
  auto t = uniform({2, 6, 4}, rng);
  CHECK(loss_rd_sp(t, t).item() == 0.0);
  for (double alpha : {0.5, 2.0}) CHECK(std::abs(loss_rd_sp(t * alpha, t).item()) <= 1e-12);

  auto s = uniform({1, 3, 4}, rng);
  auto tt = uniform({1, 3, 5}, rng);
  CHECK(std::abs(loss_rd_sp(s, tt).item() - oracle::distance_loss(s, tt)) <= 1e-10);
}

TEST_CASE("angle_tensor entries") {
  std::mt19937_64 rng(13);
  auto feat = uniform({1, 4, 3}, rng);
  auto a = angle_tensor(feat);
  CHECK(a.shape() == Shape{1, 4, 4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      if (i == j) continue;
      CHECK(a.at({0, i, j, j}) == doctest::Approx(1.0).epsilon(1e-14));
      CHECK(a.at({0, i, i, j}) == 0.0);
      CHECK(a.at({0, i, j, i}) == 0.0);
    }

  auto line = angle_tensor(Tensor::from({1, 3, 2}, {0, 0, 1, 1, 2, 2}));
  CHECK(line.at({0, 1, 0, 2}) == doctest::Approx(-1.0).epsilon(1e-15));

  auto random = uniform({2, 4, 5}, rng);
  auto r = angle_tensor(random);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t k = 0; k < 4; ++k) {
          const double want = psi_angle(oracle::row(random, b, j), oracle::row(random, b, i), oracle::row(random, b, k));
          CHECK(std::abs(r.at({b, i, j, k}) - want) <= 1e-10);
        }

  CHECK_THROWS_AS(angle_tensor(uniform({4, 16, 8}, rng), {}, 1024), PlanError);
}

TEST_CASE("loss_ra_sp examples") {
  std::mt19937_64 rng(14);
  auto t = uniform({2, 5, 4}, rng);
  for (const auto& plan : {kNaive, kVectorized, tiled(2)}) {
    CAPTURE(to_string(plan.strategy));
    CHECK(loss_ra_sp(t, t, plan).item() == 0.0);
    auto shifted = uniform({1, 1, 4}, rng, -5, 5);
    std::vector<double> offset;
    for (std::size_t q = 0; q < t.numel(); ++q) offset.push_back(shifted.values()[q % 4]);
    auto moved = t * 2.5 + Tensor::from(t.shape(), offset);
    CHECK(std::abs(loss_ra_sp(moved, t, plan).item()) <= 1e-12);
  }

  auto s = uniform({1, 5, 3}, rng);
  auto tt = uniform({1, 5, 3}, rng);
  const double naive = loss_ra_sp(s, tt, kNaive).item();
  CHECK(rel_diff(naive, loss_ra_sp(s, tt, kVectorized).item()) <= 1e-9);
  CHECK(rel_diff(naive, loss_ra_sp(s, tt, tiled(2)).item()) <= 1e-9);
  CHECK(rel_diff(naive, oracle::angle_loss(s, tt)) <= 1e-9);
}

TEST_CASE("angle strategies reject bad plans") {
  std::mt19937_64 rng(15);
  auto s = uniform({2, 6, 3}, rng);
  CHECK_THROWS_AS(loss_ra_sp(s, s, AngleLossPlan{AngleStrategy::tiled, 0, 1 << 20}), PlanError);
  CHECK_THROWS_AS(loss_ra_sp(s, s, AngleLossPlan{AngleStrategy::vectorized, 1, 256}), PlanError);
  CHECK_NOTHROW(loss_ra_sp(s, s, AngleLossPlan{AngleStrategy::tiled, 100, 256}));
  CHECK_THROWS_AS(loss_ra_sp(s, uniform({2, 5, 3}, rng)), DimensionError);
}

TEST_CASE("sample-level losses") {
  std::mt19937_64 rng(16);
  auto e = uniform({4, 3}, rng);
  CHECK(loss_rd_samples(e, e).item() == 0.0);
  CHECK(loss_ra_samples(e, e).item() == 0.0);

  // Hand-set triangle against a stretched copy.
  auto s = Tensor::from({3, 2}, {0, 0, 1, 0, 0, 1});
  auto t = Tensor::from({3, 2}, {0, 0, 2, 0, 0, 1});
  std::vector<Eigen::Vector2d> sp{{0, 0}, {1, 0}, {0, 1}}, tp{{0, 0}, {2, 0}, {0, 1}};
  auto mean_dist = [](const std::vector<Eigen::Vector2d>& p) {
    double total = 0.0;
    for (auto& a : p)
      for (auto& b : p) total += (a - b).norm();
    return total / 6.0;
  };
  const double nu_s = mean_dist(sp), nu_t = mean_dist(tp);
  double rd = 0.0, ra = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      rd += huber(psi_distance(sp[i], sp[j], nu_s), psi_distance(tp[i], tp[j], nu_t));
      for (int k = 0; k < 3; ++k) ra += huber(psi_angle(sp[j], sp[i], sp[k]), psi_angle(tp[j], tp[i], tp[k]));
    }
  CHECK(std::abs(loss_rd_samples(s, t).item() - rd / 9.0) <= 1e-12);
  CHECK(std::abs(loss_ra_samples(s, t).item() - ra / 27.0) <= 1e-12);

  auto other = uniform({4, 3}, rng);
  auto c = uniform({1, 3}, rng, -3, 3);
  std::vector<double> shift;
  for (std::size_t q = 0; q < 12; ++q) shift.push_back(c.values()[q % 3]);
  auto moved = e + Tensor::from({4, 3}, shift);
  CHECK(std::abs(loss_rd_samples(moved, other).item() - loss_rd_samples(e, other).item()) <= 1e-12);
  CHECK(std::abs(loss_ra_samples(moved, other).item() - loss_ra_samples(e, other).item()) <= 1e-12);

  CHECK_THROWS_AS(loss_rd_samples(uniform({1, 3}, rng), uniform({1, 3}, rng)), ContractError);
  CHECK_THROWS_AS(loss_ra_samples(uniform({2, 3}, rng), uniform({2, 3}, rng)), ContractError);
}

TEST_CASE("angle memory model") {
  CHECK(angle_memory_model(1, 2, 1, 8) == 128);
  CHECK(angle_memory_model(128, 49, 768, 2) == 974229760);
  CHECK(angle_memory_model(128, 196, 768, 2) == 17033347072);
  CHECK(std::abs(974229760.0 / 0.95e9 - 1.0) <= 0.05);
  CHECK(std::abs(17033347072.0 / 17.73e9 - 1.0) <= 0.05);
  CHECK(format_gb(974229760) == "0.974 GB");
  CHECK_THROWS_AS(angle_memory_model(0, 2, 1, 8), ContractError);
  CHECK_THROWS_AS(angle_memory_model(std::size_t{1} << 40, std::size_t{1} << 20, 1, 8), ContractError);
}

TEST_CASE("relational losses pass the gradient check and leave the teacher untouched") {
  std::mt19937_64 rng(17);
  auto s = uniform({2, 5, 3}, rng);
  auto t = uniform({2, 5, 4}, rng);
  const double h = 1e-5;
  CHECK(finite_diff_check([&](const Tensor& x) { return loss_rd_sp(x, t); }, s, h).max_relative_error <= 1e-4);
  for (const auto& plan : {kNaive, kVectorized, tiled(2)}) {
    CAPTURE(to_string(plan.strategy));
    CHECK(finite_diff_check([&](const Tensor& x) { return loss_ra_sp(x, t, plan); }, s, h).max_relative_error <= 1e-4);
  }

  auto student = s.clone(true);
  auto teacher = t.clone(true);
  (loss_rd_sp(student, teacher) + loss_ra_sp(student, teacher, tiled(3)) + loss_ra_sp(student, teacher, kNaive) +
   loss_ra_sp(student, teacher, kVectorized))
      .backward();
  CHECK(student.has_grad());
  CHECK_FALSE(teacher.has_grad());
}

TEST_CASE("strategy equivalence on random instances") {
  std::mt19937_64 rng(18);
  std::uniform_int_distribution<std::size_t> b_dist(1, 4), l_dist(2, 8), c_dist(1, 16);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t B = b_dist(rng), L = l_dist(rng), C = c_dist(rng);
    auto s = uniform({B, L, C}, rng);
    auto t = uniform({B, L, C}, rng);
    const std::size_t tile = std::uniform_int_distribution<std::size_t>(1, L)(rng);
    const double naive = loss_ra_sp(s, t, kNaive).item();
    CAPTURE(B);
    CAPTURE(L);
    CAPTURE(C);
    CHECK(rel_diff(naive, loss_ra_sp(s, t, kVectorized).item()) <= 1e-9);
    CHECK(rel_diff(naive, loss_ra_sp(s, t, tiled(tile)).item()) <= 1e-9);
  }
}

TEST_CASE("invariance properties") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t B = 2, L = 6, C = 4;
    auto s = uniform({B, L, C}, rng);
    auto t = uniform({B, L, C}, rng);
    const double rd = loss_rd_sp(s, t).item();
    const double ra = loss_ra_sp(s, t).item();
    for (double alpha : {0.5, 2.0, 10.0}) CHECK(std::abs(loss_rd_sp(s * alpha, t).item() - rd) <= 1e-9);

    const Eigen::MatrixXd rot = oracle::random_rotation(C, rng);
    auto moved = oracle::similarity(s, rot, 1.7, 3.0 * oracle::row(uniform({1, 1, C}, rng), 0, 0));
    CHECK(std::abs(loss_ra_sp(moved, t).item() - ra) <= 1e-9);

    std::vector<std::size_t> perm(L);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto ps = gather(s, 1, perm);
    auto pt = gather(t, 1, perm);
    CHECK(std::abs(loss_rd_sp(ps, pt).item() - rd) <= 1e-12);
    CHECK(std::abs(loss_ra_sp(ps, pt).item() - ra) <= 1e-12);
  }
}

TEST_CASE("tiled strategy keeps auxiliary memory small") {
  std::mt19937_64 rng(20);
  auto s = uniform({2, 32, 16}, rng);
  auto t = uniform({2, 32, 16}, rng);
  auto measure = [&](const AngleLossPlan& plan, double& value) {
    auto leaf = s.clone(true);
    memory::PeakScope scope;
    auto loss = loss_ra_sp(leaf, t, plan);
    value = loss.item();
    loss.backward();
    return scope.peak_above_baseline();
  };
  double v_vec = 0.0, v_tiled = 0.0;
  const auto vec_peak = measure(kVectorized, v_vec);
  const auto tiled_peak = measure(tiled(2), v_tiled);
  CHECK(rel_diff(v_vec, v_tiled) <= 1e-9);
  CHECK(static_cast<double>(tiled_peak) <= 0.25 * static_cast<double>(vec_peak));
}
