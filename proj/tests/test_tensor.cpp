#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>

#include "serkd/gradcheck.hpp"
#include "serkd/io.hpp"
#include "serkd/ops.hpp"
#include "test_util.hpp"

using namespace serkd;
using serkd::testing::uniform;

TEST_CASE("matmul shape algebra") {
  auto a = Tensor::full({2, 3}, 1.0);
  auto b = Tensor::full({3, 4}, 2.0);
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 4});
  for (double v : c.values()) CHECK(v == 6.0);

  auto batched = matmul(Tensor::full({5, 2, 3}, 1.0), Tensor::full({5, 3, 4}, 1.0));
  CHECK(batched.shape() == Shape{5, 2, 4});
  CHECK_THROWS_AS(matmul(a, Tensor::full({4, 3}, 1.0)), DimensionError);
}

TEST_CASE("binary shape mismatch names both shapes") {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(3, 2)") != std::string::npos);
  }
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(1);
  auto x = uniform({3, 4, 5}, rng, -5, 5);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto s = sum(softmax(x, axis), {axis});
    for (double v : s.values()) CHECK(std::abs(v - 1.0) <= 1e-12);
  }
}

TEST_CASE("avg pool of a constant field") {
  auto x = Tensor::full({1, 4, 4, 1}, 3.25);
  auto y = avg_pool2d(x, 2, 2, 2, 2);
  CHECK(y.shape() == Shape{1, 2, 2, 1});
  for (double v : y.values()) CHECK(v == 3.25);
}

TEST_CASE("max pool breaks ties toward the lowest flat index") {
  auto x = Tensor::from({1, 2, 2, 1}, {1.0, 1.0, 1.0, 0.0}, true);
  auto y = max_pool2d(x, 2, 2, 2, 2);
  sum_all(y).backward();
  CHECK(testing::to_vector(x.clone(false)) == std::vector<double>{1, 1, 1, 0});
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("backward of sum of squares") {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  sum_all(x * x).backward();
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2, 4, 6});
}

TEST_CASE("detach blocks gradient") {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  auto y = Tensor::from({3}, {4, 5, 6}, true);
  sum_all(detach(x) * y).backward();
  CHECK_FALSE(x.has_grad());
  CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{1, 2, 3});
}

TEST_CASE("detach is value transparent") {
  std::mt19937_64 rng(2);
  auto x = uniform({4, 3}, rng);
  auto d = detach(x);
  CHECK_FALSE(d.requires_grad());
  CHECK(testing::to_vector(d) == testing::to_vector(x));
  CHECK(testing::to_vector(softmax(d, 1)) == testing::to_vector(softmax(x, 1)));
}

TEST_CASE("mean of softmax has zero gradient") {
  std::mt19937_64 rng(3);
  auto x = uniform({7}, rng, -3, 3, true);
  mean_all(softmax(x, 0)).backward();
  for (double g : x.grad()) CHECK(std::abs(g) <= 1e-12);
}

TEST_CASE("backward requires a scalar root") {
  auto x = Tensor::zeros({2}, true);
  CHECK_THROWS_AS((x * x).backward(), ContractError);
}

TEST_CASE("gradient accumulates over shared consumers") {
  std::mt19937_64 rng(4);
  auto base = uniform({2, 3}, rng);
  auto f1 = [](const Tensor& x) { return sum_all(exp(x)); };
  auto f2 = [](const Tensor& x) { return sum_all(x * x * 3.0); };

  auto a = base.clone(true);
  f1(a).backward();
  auto b = base.clone(true);
  f2(b).backward();
  auto both = base.clone(true);
  (f1(both) + f2(both)).backward();
  for (std::size_t i = 0; i < base.numel(); ++i) {
    CHECK(both.grad()[i] == doctest::Approx(a.grad()[i] + b.grad()[i]).epsilon(1e-14));
  }
}

TEST_CASE("computation record is topological and visits each node once") {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = x * x;
  auto z = sum_all(y + y * x);
  const auto record = record_of(z);
  REQUIRE(!record.entries.empty());
  for (std::size_t i = 0; i < record.entries.size(); ++i) {
    for (auto in : record.entries[i].inputs) CHECK(in < i);
  }
  CHECK(std::string(record.entries.front().op) == "leaf");
  CHECK(record.entries.size() == 5);  // x, y, y*x, y + y*x, sum
}

TEST_CASE("finite_diff_check examples") {
  std::mt19937_64 rng(5);
  auto x = uniform({6}, rng);
  auto squares = finite_diff_check([](const Tensor& t) { return sum_all(t * t); }, x, 1e-4);
  CHECK(squares.max_relative_error <= 1e-6);

  auto target = uniform({6}, rng, -3, 3);
  auto hub = finite_diff_check([&](const Tensor& t) { return mean_all(huber(t - target)); }, x, 1e-4);
  CHECK(hub.max_relative_error <= 1e-4);

  auto w = uniform({6}, rng);
  auto linear = finite_diff_check([&](const Tensor& t) { return sum_all(t * w); }, x, 1e-4);
  CHECK(linear.max_relative_error <= 1e-10);

  CHECK_THROWS_AS(finite_diff_check([](const Tensor& t) { return sum_all(log(t, 0.0)); },
                                    Tensor::zeros({2}), 1e-4),
                  NumericalError);
}

namespace {

// Random inputs in [-2, 2] kept at least `margin` away from the listed kinks.
Tensor away_from(std::mt19937_64& rng, const Shape& shape, std::vector<double> kinks, double margin,
                 double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(element_count(shape));
  for (auto& x : v) {
    bool ok = false;
    while (!ok) {
      x = dist(rng);
      ok = true;
      for (double k : kinks) ok = ok && std::abs(x - k) >= margin;
    }
  }
  return Tensor::from(shape, v);
}

void check_primitive(const char* name, const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
  CAPTURE(name);
  const auto r = finite_diff_check(f, x, 1e-4);
  CHECK(r.max_relative_error <= 1e-4);
}

}  // namespace

TEST_CASE("every primitive passes the finite difference check") {
  std::mt19937_64 rng(6);
  const double h = 1e-4;
  auto x = uniform({2, 3, 4}, rng, -2, 2);
  auto w = uniform({2, 3, 4}, rng, -2, 2);
  auto positive = uniform({2, 3, 4}, rng, 0.5, 2);
  auto mat = uniform({4, 5}, rng, -2, 2);
  auto probe = uniform({2, 3, 5}, rng, -1, 1);
  auto probe4 = uniform({2, 3, 4}, rng, -1, 1);

  check_primitive("add", [&](const Tensor& t) { return sum_all((t + w) * probe4); }, x);
  check_primitive("sub", [&](const Tensor& t) { return sum_all((w - t) * probe4); }, x);
  check_primitive("mul", [&](const Tensor& t) { return sum_all(t * w * probe4); }, x);
  check_primitive("scale", [&](const Tensor& t) { return sum_all((t * 2.5) * probe4); }, x);
  check_primitive("matmul lhs", [&](const Tensor& t) { return sum_all(matmul(t, mat) * probe); }, x);
  check_primitive("matmul rhs", [&](const Tensor& t) { return sum_all(matmul(x, t) * probe); }, mat);
  auto rhs_b = uniform({2, 4, 3}, rng, -2, 2);
  auto probe_b = uniform({2, 3, 3}, rng, -1, 1);
  check_primitive("batched matmul", [&](const Tensor& t) { return sum_all(matmul(t, rhs_b) * probe_b); }, x);
  check_primitive("batched matmul rhs", [&](const Tensor& t) { return sum_all(matmul(x, t) * probe_b); }, rhs_b);
  check_primitive("transpose", [&](const Tensor& t) { return sum_all(transpose(t) * transpose(probe4)); }, x);
  check_primitive("permute", [&](const Tensor& t) { return sum_all(permute(t, {2, 0, 1}) * permute(probe4, {2, 0, 1})); }, x);
  check_primitive("reshape", [&](const Tensor& t) { return sum_all(reshape(t, {6, 4}) * reshape(probe4, {6, 4})); }, x);
  const std::size_t idx[] = {2, 0, 2};
  check_primitive("gather", [&](const Tensor& t) { return sum_all(gather(t, 1, idx) * w); }, x);
  check_primitive("slice", [&](const Tensor& t) { return sum_all(slice(t, 2, 1, 3) * slice(w, 2, 0, 2)); }, x);
  check_primitive("concat", [&](const Tensor& t) { return sum_all(concat({t, t * t}, 1) * concat({w, probe4}, 1)); }, x);
  check_primitive("exp", [&](const Tensor& t) { return sum_all(exp(t) * probe4); }, x);
  check_primitive("log", [&](const Tensor& t) { return sum_all(log(t) * probe4); }, positive);
  check_primitive("sqrt", [&](const Tensor& t) { return sum_all(sqrt(t) * probe4); }, positive);
  check_primitive("pow", [&](const Tensor& t) { return sum_all(pow(t, -1.5) * probe4); }, positive);
  check_primitive("clamp_min", [&](const Tensor& t) { return sum_all(clamp_min(t, 0.3) * probe4); },
                  away_from(rng, {2, 3, 4}, {0.3}, 10 * h));
  check_primitive("gelu", [&](const Tensor& t) { return sum_all(gelu(t) * probe4); }, x);
  check_primitive("huber", [&](const Tensor& t) { return sum_all(huber(t) * probe4); },
                  away_from(rng, {2, 3, 4}, {-1.0, 1.0}, 10 * h));
  check_primitive("sum axes", [&](const Tensor& t) { return sum_all(sum(t, {0, 2}) * sum(probe4, {0, 2})); }, x);
  check_primitive("mean", [&](const Tensor& t) { return sum_all(mean(t, {1}, true) * mean(probe4, {1}, true)); }, x);
  check_primitive("softmax", [&](const Tensor& t) { return sum_all(softmax(t, 1) * probe4); }, x);
  check_primitive("log_softmax", [&](const Tensor& t) { return sum_all(log_softmax(t, 2) * probe4); }, x);

  auto img = uniform({2, 4, 4, 3}, rng, -2, 2);
  auto pool_probe = uniform({2, 2, 2, 3}, rng, -1, 1);
  check_primitive("avg_pool2d", [&](const Tensor& t) { return sum_all(avg_pool2d(t, 2, 2, 2, 2) * pool_probe); }, img);
  // Distinct values spaced well beyond 10h keep max-pool off its ties.
  std::vector<double> spaced(96);
  for (std::size_t i = 0; i < spaced.size(); ++i) spaced[i] = -2.0 + 4.0 * static_cast<double>((i * 37) % 96) / 96.0;
  check_primitive("max_pool2d", [&](const Tensor& t) { return sum_all(max_pool2d(t, 2, 2, 2, 2) * pool_probe); },
                  Tensor::from({2, 4, 4, 3}, spaced));
  auto kernel = uniform({3, 3, 3, 2}, rng, -1, 1);
  auto conv_probe = uniform({2, 2, 2, 2}, rng, -1, 1);
  check_primitive("conv2d input", [&](const Tensor& t) { return sum_all(conv2d(t, kernel, 2, 1) * conv_probe); }, img);
  check_primitive("conv2d weight", [&](const Tensor& t) { return sum_all(conv2d(img, t, 2, 1) * conv_probe); }, kernel);

  auto gamma = uniform({4}, rng, 0.5, 1.5);
  auto beta = uniform({4}, rng, -0.5, 0.5);
  check_primitive("layer_norm x", [&](const Tensor& t) { return sum_all(layer_norm(t, gamma, beta) * probe4); }, x);
  check_primitive("layer_norm gamma", [&](const Tensor& t) { return sum_all(layer_norm(x, t, beta) * probe4); }, gamma);
  check_primitive("layer_norm beta", [&](const Tensor& t) { return sum_all(layer_norm(x, gamma, t) * probe4); }, beta);
  check_primitive("bias_add", [&](const Tensor& t) { return sum_all(bias_add(x, t) * probe4); }, beta);
}

TEST_CASE("SRKD header is bit-exact") {
  std::ostringstream os;
  io::write_tensor(os, Tensor::from({1, 2}, {1.0, -2.0}));
  const std::string bytes = os.str();
  REQUIRE(bytes.size() == 4 + 3 + 2 * 4 + 2 * 8);
  CHECK(bytes.substr(0, 4) == "SRKD");
  CHECK(bytes[4] == 0x01);
  CHECK(bytes[5] == 0x01);
  CHECK(bytes[6] == 0x02);
  CHECK(bytes.substr(7, 8) == std::string("\x01\x00\x00\x00\x02\x00\x00\x00", 8));
  double first = 0.0;
  std::memcpy(&first, bytes.data() + 15, 8);
  CHECK(first == 1.0);
}

TEST_CASE("SRKD round trip is bit-exact on random shapes") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> rank_dist(0, 4), dim_dist(1, 5);
  for (int trial = 0; trial < 25; ++trial) {
    Shape shape(rank_dist(rng));
    for (auto& d : shape) d = dim_dist(rng);
    auto t = serkd::testing::normal(shape, rng, 1e3);
    std::stringstream ss;
    io::write_tensor(ss, t);
    auto back = io::read_tensor(ss);
    CHECK(back.shape() == shape);
    CHECK(std::memcmp(back.values().data(), t.values().data(), t.numel() * sizeof(double)) == 0);
  }
}

TEST_CASE("SRKD rejects malformed streams") {
  std::stringstream bad("SRKX\x01\x01\x00");
  CHECK_THROWS_AS(io::read_tensor(bad), FormatError);
  std::ostringstream os;
  io::write_tensor(os, Tensor::from({3}, {1, 2, 3}));
  std::stringstream truncated(os.str().substr(0, os.str().size() - 3));
  CHECK_THROWS_AS(io::read_tensor(truncated), FormatError);
}

TEST_CASE("archives keep lexicographic order") {
  io::NamedTensors entries{{"b.weight", Tensor::from({2}, {1, 2})}, {"a.bias", Tensor::scalar(3.0)}};
  std::stringstream ss;
  io::write_archive(ss, entries);
  const std::string bytes = ss.str();
  CHECK(bytes.find("a.bias") < bytes.find("b.weight"));
  auto back = io::read_archive(ss);
  CHECK(back.size() == 2);
  CHECK(back.at("a.bias").item() == 3.0);
}

TEST_CASE("allocation counter tracks tensor storage") {
  memory::PeakScope scope;
  {
    auto big = Tensor::zeros({1000});
    CHECK(scope.peak_above_baseline() >= 8000);
  }
  CHECK(memory::current_bytes() <= memory::peak_bytes());
}
