#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "serkd/config.hpp"
#include "serkd/data.hpp"
#include "serkd/errors.hpp"
#include "serkd/harness.hpp"
#include "serkd/io.hpp"
#include "serkd/relational.hpp"

namespace fs = std::filesystem;
using namespace serkd;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/default";
  std::vector<std::string> overrides;

  RunConfig load() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_config(config);
    for (const auto& kv : overrides) apply_override(cfg, kv);
    if (seed) cfg.seed = *seed;
    cfg.finalize();
    return cfg;
  }
};

void write_image_set(const fs::path& dir, const std::string& stem, const ImageSet& set) {
  std::vector<std::size_t> all(set.count());
  std::iota(all.begin(), all.end(), 0);
  io::save_tensor(dir / (stem + "_images.srkd"), set.batch(all));
  std::vector<std::uint32_t> labels(set.labels.begin(), set.labels.end());
  io::save_indices(dir / (stem + "_labels.srkd"), {labels.size()}, labels);
}

int gen_data(const Globals& g) {
  const auto cfg = g.load();
  const fs::path out = g.out;
  fs::create_directories(out);
  const auto data = gen_synthetic(cfg.data, cfg.seed);
  write_image_set(out, "train", data.train);
  write_image_set(out, "val", data.val);
  std::ofstream(out / "config.resolved") << cfg.resolved();
  std::cout << "train " << data.train.count() << " images, val " << data.val.count() << " images, "
            << cfg.data.classes << " classes, " << cfg.data.image_size << "x" << cfg.data.image_size << "\n";
  std::cout << "MLP separability witness: val accuracy " << separability_witness(data, cfg.seed) << "\n";
  return 0;
}

int train_teacher_cmd(const Globals& g) {
  const auto run = train_teacher(g.load(), g.out, &std::cout);
  std::cout << "teacher val accuracy " << run.val_accuracy << " in " << run.seconds << " s\n";
  std::cout << "checkpoint " << (fs::path(g.out) / "teacher.ckpt").string() << "\n";
  return 0;
}

int distill_cmd(const Globals& g, const std::string& teacher, bool compare) {
  const auto cfg = g.load();
  if (compare) {
    for (const auto& row : compare_methods(cfg, teacher, g.out, &std::cout)) {
      std::cout << row.method << ": val_acc " << row.val_accuracy << ", L_dis " << row.initial_total << " -> "
                << row.final_total << "\n";
    }
    std::cout << "report " << (fs::path(g.out) / "comparison.txt").string() << "\n";
    return 0;
  }
  const auto run = distill(cfg, teacher, g.out, &std::cout);
  std::cout << "L_dis " << run.initial_total << " -> " << run.final_total << " (ratio "
            << run.final_total / run.initial_total << "), student val accuracy " << run.val_accuracy << ", "
            << run.seconds << " s\n";
  std::cout << "teacher unchanged: " << (run.teacher_unchanged ? "yes" : "NO")
            << ", teacher isolated: " << (run.teacher_isolated ? "yes" : "NO") << "\n";
  return run.teacher_unchanged && run.teacher_isolated ? 0 : 1;
}

int gradcheck_cmd(const Globals& g) {
  const auto rows = run_gradcheck_suite(g.seed.value_or(7));
  std::cout << format_gradcheck(rows);
  bool ok = true;
  for (const auto& r : rows) ok = ok && r.pass();
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantics-based relation knowledge distillation toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "overrides the config seed");
  app.add_option("--out", g.out, "artifact directory");
  app.add_option("--set", g.overrides, "key=value override, repeatable");

  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset as SRKD tensors");
  auto* teacher = app.add_subcommand("train-teacher", "train the teacher with cross-entropy only");

  auto* dist = app.add_subcommand("distill", "train the student against a frozen teacher");
  std::string teacher_ckpt;
  bool compare = false;
  dist->add_option("--teacher", teacher_ckpt, "teacher checkpoint")->required()->check(CLI::ExistingFile);
  dist->add_flag("--compare", compare, "also run the baseline and pooled-clustering variants");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every loss");

  auto* bench = app.add_subcommand("bench-angle", "time the angle-loss strategies and report memory");
  BenchSpec bs;
  std::size_t budget_mb = bs.budget_bytes >> 20;
  bench->add_option("--batch", bs.batch)->capture_default_str();
  bench->add_option("--tokens", bs.tokens)->capture_default_str();
  bench->add_option("--channels", bs.channels)->capture_default_str();
  bench->add_option("--bytes", bs.bytes, "bytes per element for the memory model")->capture_default_str();
  bench->add_option("--tile", bs.tile)->capture_default_str();
  bench->add_option("--budget-mb", budget_mb, "skip materialising strategies above this")->capture_default_str();
  bench->add_option("--max-work", bs.max_work, "skip strategies whose B*L^3*C exceeds this")->capture_default_str();

  auto* dump = app.add_subcommand("dump-superpixels", "write Q, Q_hat, S and hard assignments for one image");
  DumpSpec ds;
  std::string source = "pixels", dump_teacher;
  std::optional<double> constant;
  dump->add_option("--source", source, "pixels or teacher")->check(CLI::IsMember({"pixels", "teacher"}));
  dump->add_option("--constant", constant, "use a constant image with this value");
  dump->add_option("--image-index", ds.image_index, "validation image")->capture_default_str();
  dump->add_option("--teacher", dump_teacher, "teacher checkpoint for --source teacher");
  dump->add_option("--patch", ds.patch, "pixel source patch size")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return gen_data(g);
    if (*teacher) return train_teacher_cmd(g);
    if (*dist) return distill_cmd(g, teacher_ckpt, compare);
    if (*grad) return gradcheck_cmd(g);
    if (*bench) {
      bs.budget_bytes = budget_mb << 20;
      if (g.seed) bs.seed = *g.seed;
      const auto report = bench_angle(bs);
      std::cout << format_bench(report);
      if (report.reported_gb) {
        const double rel = std::abs(static_cast<double>(report.modeled_bytes) / 1e9 - *report.reported_gb) /
                           *report.reported_gb;
        if (rel > 0.05) return 1;
      }
      return 0;
    }
    if (*dump) {
      ds.source = source == "teacher" ? DumpSpec::Source::teacher : DumpSpec::Source::pixels;
      ds.constant = constant;
      ds.teacher_checkpoint = dump_teacher;
      if (ds.source == DumpSpec::Source::teacher && dump_teacher.empty()) {
        throw ConfigError("--source teacher needs --teacher");
      }
      const auto result = dump_superpixels(g.load(), ds, g.out);
      const auto& Q = result.state.Q;
      std::cout << "Q " << to_string(Q.shape()) << ", S " << to_string(result.state.S.shape()) << " written to "
                << g.out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
