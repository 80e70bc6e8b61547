// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "relational_oracle.hpp"
#include "serkd/distill.hpp"
#include "serkd/harness.hpp"
#include "serkd/models.hpp"
#include "serkd/ops.hpp"
#include "serkd/relational.hpp"
#include "serkd/superpixel.hpp"
#include "superpixel_oracle.hpp"
#include "test_util.hpp"

using namespace serkd;
using serkd::testing::uniform;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(const char* id, bool pass, const std::string& detail) {
  std::cout << id << " " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
  if (!pass) ++failures;
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

double cpu_seconds(std::clock_t since) { return static_cast<double>(std::clock() - since) / CLOCKS_PER_SEC; }

std::string fmt(const char* pattern, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ac1() {
  const auto t0 = std::clock();
  const auto rows = run_gradcheck_suite(7);
  const double secs = cpu_seconds(t0);
  bool ok = secs < 120.0;
  double worst = 0, worst_e2e = 0;
  for (const auto& r : rows) {
    ok = ok && r.pass() && (r.tolerance <= 1e-4 || r.name.rfind("L_dis", 0) == 0);
    (r.tolerance > 1e-4 ? worst_e2e : worst) = std::max(r.tolerance > 1e-4 ? worst_e2e : worst, r.max_relative_error);
  }
  report("AC1", ok,
         std::to_string(rows.size()) + " gradient checks, worst loss " + fmt("%.2e", worst) + " (tol 1e-4), end-to-end " +
             fmt("%.2e", worst_e2e) + " (tol 1e-3), " + fmt("%.2f", secs) + " CPU s");
}

void ac2() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> bd(1, 4), ld(2, 8), cd(1, 16);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = bd(rng), L = ld(rng), C = cd(rng);
    const auto s = uniform({B, L, C}, rng), t = uniform({B, L, C}, rng);
    const std::size_t tile = std::uniform_int_distribution<std::size_t>(1, L)(rng);
    const double rd_ref = oracle::distance_loss(s, t), ra_ref = oracle::angle_loss(s, t);
    worst = std::max(worst, rel_diff(rd_ref, loss_rd_sp(s, t).item()));
    for (auto strategy : {AngleStrategy::naive_loop, AngleStrategy::vectorized, AngleStrategy::tiled}) {
      AngleLossPlan plan;
      plan.strategy = strategy;
      plan.tile = tile;
      worst = std::max(worst, rel_diff(ra_ref, loss_ra_sp(s, t, plan).item()));
    }
  }
  report("AC2", worst <= 1e-9, "50 instances, worst relative gap to the triple-loop oracle " + fmt("%.2e", worst));
}

void ac3() {
  const double small = static_cast<double>(angle_memory_model(128, 49, 768, 2)) / 1e9;
  const double large = static_cast<double>(angle_memory_model(128, 196, 768, 2)) / 1e9;
  const double e_small = std::abs(small - 0.95) / 0.95, e_large = std::abs(large - 17.73) / 17.73;
  report("AC3", e_small <= 0.05 && e_large <= 0.05,
         fmt("L=49: %.3f GB vs 0.95 (%.1f%%)", small, 100 * e_small) +
             fmt(", L=196: %.3f GB vs 17.73 (%.1f%%)", large, 100 * e_large));
}

void ac4() {
  std::mt19937_64 rng(404);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t B = 2, L = 7, C = 5;
    const auto s = uniform({B, L, C}, rng), t = uniform({B, L, C}, rng);
    const double rd = loss_rd_sp(s, t).item(), ra = loss_ra_sp(s, t).item();
    for (double alpha : {0.5, 2.0, 10.0}) worst = std::max(worst, std::abs(loss_rd_sp(s * alpha, t).item() - rd));

    const auto moved = oracle::similarity(s, oracle::random_rotation(C, rng), 2.5,
                                          4.0 * oracle::row(uniform({1, 1, C}, rng), 0, 0));
    worst = std::max(worst, std::abs(loss_ra_sp(moved, t).item() - ra));

    std::vector<std::size_t> perm(L);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto ps = gather(s, 1, perm), pt = gather(t, 1, perm);
    worst = std::max(worst, std::abs(loss_rd_sp(ps, pt).item() - rd));
    worst = std::max(worst, std::abs(loss_ra_sp(ps, pt).item() - ra));
  }

  // Zero at identity: the teacher as its own student, every clustering.
  ToyViTConfig cfg = ToyViTConfig::teacher();
  cfg.image_size = 16;
  cfg.depth = 1;
  cfg.distillation_token = true;
  auto params = init_vit(cfg, rng);
  const auto out = vit_forward(cfg, params, uniform({3, 16, 16, 3}, rng));
  double zero = 0;
  for (auto clustering : {Clustering::direct, Clustering::max_pool, Clustering::avg_pool, Clustering::superpixel}) {
    DistillConfig dc;
    dc.clustering = clustering;
    DistillInputs in{out.cls_logits, out.dist_logits, out.dist_logits, {0, 1, 2}, {out.visual}, {out.visual}, {}};
    const auto r = total_loss(in, dc).report;
    zero = std::max({zero, std::abs(r.kd), std::abs(r.feat), std::abs(r.rd_sp), std::abs(r.ra_sp)});
  }
  zero = std::max(zero, loss_rd_samples(out.cls_logits, out.cls_logits).item());
  zero = std::max(zero, loss_ra_samples(out.cls_logits, out.cls_logits).item());
  report("AC4", worst <= 1e-9 && zero <= 1e-9,
         "scale, similarity and permutation gap " + fmt("%.2e", worst) + ", largest term at identity " + fmt("%.2e", zero));
}

void ac5() {
  std::mt19937_64 rng(505);
  double norm_gap = 0, hull_breach = 0;
  std::size_t rbf_out_of_range = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto tokens = uniform({2, 64, 6}, rng, -3, 3);
    const auto grid = TokenGrid::make(tokens, 8, 8, TokenSource::vit_tokens);
    for (auto kernel : {AssociationKernel::attention, AssociationKernel::rbf}) {
      const auto state = sample_superpixels(grid, 2, 2, 1 + trial % 3, kernel);
      if (kernel == AssociationKernel::rbf) {
        // RBF weights are not row-normalised; each admissible entry lies in (0, 1].
        const auto mask = neighborhood_mask(state.geometry);
        for (std::size_t q = 0; q < state.Q.numel(); ++q) {
          const double v = state.Q.values()[q];
          if (mask[q % mask.size()] > 0 && !(v > 0 && v <= 1)) rbf_out_of_range++;
        }
        continue;
      }
      for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t i = 0; i < 64; ++i) {
          double row = 0;
          for (std::size_t j = 0; j < 16; ++j) row += state.Q.at({b, i, j});
          norm_gap = std::max(norm_gap, std::abs(row - 1));
        }
        for (std::size_t j = 0; j < 16; ++j) {
          double col = 0;
          for (std::size_t i = 0; i < 64; ++i) col += state.Q_hat.at({b, i, j});
          norm_gap = std::max(norm_gap, std::abs(col - 1));
        }
      }
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t j = 0; j < 16; ++j)
          for (std::size_t c = 0; c < 6; ++c) {
            double lo = 1e300, hi = -1e300;
            for (std::size_t i = 0; i < 64; ++i) {
              const auto nb = neighborhood(i, state.geometry);
              if (std::find(nb.begin(), nb.end(), j) == nb.end()) continue;
              lo = std::min(lo, tokens.at({b, i, c}));
              hi = std::max(hi, tokens.at({b, i, c}));
            }
            const double v = state.S.at({b, j, c});
            hull_breach = std::max({hull_breach, lo - v, v - hi});
          }
    }
  }

  std::normal_distribution<double> noise(0.0, 0.05);
  std::size_t agree = 0, total = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const oracle::Grid og{1, 4, 8, 3, 4, 4};
    std::vector<double> T(og.L() * og.C);
    for (std::size_t i = 0; i < og.L(); ++i)
      for (std::size_t c = 0; c < og.C; ++c) T[i * og.C + c] = ((i % og.cols) < 4 ? -1.0 : 1.0) + noise(rng);
    const auto grid = TokenGrid::make(Tensor::from({1, og.L(), og.C}, T), og.rows, og.cols, TokenSource::cnn_tokens);
    const auto assign = hard_assignments(associate_rbf(grid, init_superpixels(grid, 4, 4)));
    const auto S0 = oracle::block_means(og, T);
    for (std::size_t i = 0; i < og.L(); ++i) {
      double d[2] = {0, 0};
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t c = 0; c < og.C; ++c) d[j] += std::pow(T[i * og.C + c] - S0[j * og.C + c], 2);
      agree += assign[i] == (d[1] < d[0] ? 1u : 0u);
      ++total;
    }
  }
  report("AC5", norm_gap <= 1e-9 && hull_breach <= 1e-12 && rbf_out_of_range == 0 && agree == total,
         "attention row/column sum gap " + fmt("%.2e", norm_gap) + ", rbf weights outside (0, 1]: " +
             std::to_string(rbf_out_of_range) + ", hull breach " + fmt("%.2e", std::max(0.0, hull_breach)) +
             ", rbf nearest-centre " + std::to_string(agree) + "/" + std::to_string(total));
}

void ac6() {
  BenchSpec spec;  // B = 8, L = 64, C = 64
  const auto bench = bench_angle(spec);
  const BenchRow* vec = nullptr;
  const BenchRow* tiled = nullptr;
  for (const auto& r : bench.rows) {
    if (r.strategy == "vectorized") vec = &r;
    if (r.strategy == "tiled") tiled = &r;
  }
  const bool ran = vec && tiled && vec->ran && tiled->ran;
  const double ratio = ran ? static_cast<double>(tiled->peak_bytes) / static_cast<double>(vec->peak_bytes) : 1.0;
  const double gap = ran ? rel_diff(vec->loss, tiled->loss) : 1.0;
  report("AC6", ran && ratio <= 0.25 && gap <= 1e-9,
         "tiled peak " + std::to_string(ran ? tiled->peak_bytes : 0) + " B vs vectorized " +
             std::to_string(ran ? vec->peak_bytes : 0) + " B (" + fmt("%.1f%%", 100 * ratio) + "), loss gap " +
             fmt("%.1e", gap));
}

void ac7_ac8(const fs::path& root) {
  fs::remove_all(root);
  const RunConfig cfg;

  const auto t0 = std::clock();
  const auto teacher = train_teacher(cfg, root / "teacher");
  const double teacher_cpu = cpu_seconds(t0);
  const fs::path ckpt = root / "teacher" / "teacher.ckpt";

  const auto run = distill(cfg, ckpt, root / "distill");
  const auto rows = compare_methods(cfg, ckpt, root / "compare");
  const bool identical = slurp(root / "distill" / "metrics.log") == slurp(root / "compare" / "serkd" / "metrics.log") &&
                         !slurp(root / "distill" / "metrics.log").empty();
  const double ratio = run.final_total / run.initial_total;
  const bool report_written = rows.size() == 3 && fs::exists(root / "compare" / "comparison.txt");
  report("AC7",
         teacher.val_accuracy >= 0.95 && teacher_cpu <= 300 && cfg.student_train.epochs == 10 && ratio <= 0.5 &&
             identical && report_written,
         fmt("teacher val acc %.4f in %.1f CPU s", teacher.val_accuracy, teacher_cpu) +
             fmt(", L_dis %.4f -> %.4f (x%.3f)", run.initial_total, run.final_total, ratio) +
             ", metrics log " + (identical ? "byte-identical" : "DIFFERS") + " across two runs, comparison " +
             (report_written ? "written" : "MISSING"));

  // Theta only exists on the CNN path, so the audit also covers a short
  // strided-conv CNN distillation.
  RunConfig cnn;
  cnn.family = ModelFamily::cnn;
  cnn.distill.tokenizer = TokenizerKind::strided_conv;
  cnn.teacher_train.epochs = 2;
  cnn.student_train.epochs = 2;
  train_teacher(cnn, root / "cnn_teacher");
  const auto cnn_run = distill(cnn, root / "cnn_teacher" / "teacher.ckpt", root / "cnn_distill");
  bool compare_ok = true;
  for (const auto& r : rows) compare_ok = compare_ok && std::isfinite(r.final_total);
  report("AC8",
         run.teacher_unchanged && run.teacher_isolated && cnn_run.teacher_unchanged && cnn_run.teacher_isolated &&
             compare_ok,
         std::string("vit teacher ") + (run.teacher_unchanged ? "bit-identical" : "CHANGED") + " and " +
             (run.teacher_isolated ? "gradient-free" : "LEAKING") + ", cnn teacher " +
             (cnn_run.teacher_unchanged ? "bit-identical" : "CHANGED") + ", theta " +
             (cnn_run.teacher_isolated ? "free of teacher-path gradient" : "LEAKING"));
}

}  // namespace

int main() {
  const auto wall = std::chrono::steady_clock::now();
  auto guard = [](const char* id, void (*fn)()) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, false, std::string("threw: ") + e.what());
    }
  };
  guard("AC1", ac1);
  guard("AC2", ac2);
  guard("AC3", ac3);
  guard("AC4", ac4);
  guard("AC5", ac5);
  guard("AC6", ac6);
  try {
    ac7_ac8(fs::temp_directory_path() / "serkd_acceptance");
  } catch (const std::exception& e) {
    report("AC7", false, std::string("threw: ") + e.what());
    report("AC8", false, "not reached");
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall).count();
  std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail") << " ("
            << fmt("%.0f", secs) << " s)" << std::endl;
  return failures == 0 ? 0 : 1;
}
