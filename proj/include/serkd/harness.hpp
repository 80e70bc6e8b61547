#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "serkd/config.hpp"
#include "serkd/data.hpp"
#include "serkd/models.hpp"

namespace serkd {

namespace fs = std::filesystem;

/// Classification accuracy of a teacher on `images`.
double teacher_accuracy(const RunConfig& cfg, const ParameterSet& teacher, const ImageSet& images);

/// Validation accuracy of a two-layer MLP on flattened pixels trained for a
/// few epochs; a witness that the synthetic classes are separable.
double separability_witness(const SyntheticData& data, std::uint64_t seed, std::size_t epochs = 15);

struct TeacherRun {
  ParameterSet params;
  std::vector<double> epoch_val_accuracy;
  double val_accuracy = 0;
  double seconds = 0;
};

/// Trains the teacher with the classification loss only. Writes
/// config.resolved, teacher_metrics.log and teacher.ckpt under `out`.
TeacherRun train_teacher(const RunConfig& cfg, const fs::path& out, std::ostream* progress = nullptr);

ParameterSet load_checkpoint(const fs::path& path);
void save_checkpoint(const fs::path& path, const ParameterSet& params);

struct DistillRun {
  ParameterSet student;  // including projections and tokenizer kernels
  double initial_total = 0;       // L_dis at step 0
  double final_total = 0;         // mean L_dis over the last epoch
  std::vector<double> epoch_val_accuracy;
  double val_accuracy = 0;
  bool teacher_unchanged = false;  // bit-identical to the checkpoint after training
  bool teacher_isolated = false;   // no gradient reached teacher parameters or, via the teacher path, theta
  double seconds = 0;
};

/// The full distillation loop. Writes config.resolved, metrics.log and
/// student.ckpt under `out`.
DistillRun distill(const RunConfig& cfg, const fs::path& teacher_checkpoint, const fs::path& out,
                   std::ostream* progress = nullptr);

struct ComparisonRow {
  std::string method;
  double val_accuracy;
  double initial_total;
  double final_total;
};

/// SeRKD with the configured clustering, the lambda_D = lambda_A = 0
/// baseline, and average-pool clustering, each in its own subdirectory.
/// Writes comparison.txt under `out`.
std::vector<ComparisonRow> compare_methods(const RunConfig& cfg, const fs::path& teacher_checkpoint,
                                           const fs::path& out, std::ostream* progress = nullptr);

// ---------------------------------------------------------------------------
// Verification subcommands.

struct GradcheckRow {
  std::string name;
  double max_relative_error;
  double tolerance;
  bool pass() const { return max_relative_error <= tolerance; }
};

std::vector<GradcheckRow> run_gradcheck_suite(std::uint64_t seed);
std::string format_gradcheck(const std::vector<GradcheckRow>& rows);

struct BenchSpec {
  std::size_t batch = 8, tokens = 64, channels = 64, bytes = 8;
  std::size_t tile = 8;
  std::size_t budget_bytes = std::size_t{1} << 30;
  /// Strategies whose B L^3 C work exceeds this are not executed.
  double max_work = 2e9;
  std::uint64_t seed = 7;
};

struct BenchRow {
  std::string strategy;
  bool ran = false;
  std::string skip_reason;
  double seconds = 0;
  std::size_t peak_bytes = 0;  // measured, float64
  double loss = 0;
};

struct BenchReport {
  BenchSpec spec;
  std::size_t modeled_bytes = 0;             // at spec.bytes per element
  std::optional<double> reported_gb;         // published figure for this shape, if any
  std::vector<BenchRow> rows;
};

BenchReport bench_angle(const BenchSpec& spec);
std::string format_bench(const BenchReport& report);

struct DumpSpec {
  enum class Source { pixels, teacher } source = Source::pixels;
  std::optional<double> constant;  // constant image instead of a dataset sample
  std::size_t image_index = 0;     // validation image otherwise
  std::size_t patch = 4;           // pixel source: tokens are patch means
  fs::path teacher_checkpoint;
};

struct DumpResult {
  SuperpixelState state;
  std::vector<std::uint32_t> assignments;
};

/// Writes Q.srkd, Q_hat.srkd, S.srkd and assignments.srkd under `out`.
DumpResult dump_superpixels(const RunConfig& cfg, const DumpSpec& spec, const fs::path& out);

}  // namespace serkd
