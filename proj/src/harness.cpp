#include "serkd/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>

#include "serkd/distill.hpp"
#include "serkd/errors.hpp"
#include "serkd/gradcheck.hpp"
#include "serkd/io.hpp"
#include "serkd/memory.hpp"
#include "serkd/ops.hpp"
#include "serkd/optim.hpp"
#include "serkd/relational.hpp"

namespace serkd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

std::ofstream open_log(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  return out;
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::size_t count_correct(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t K = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) hits += argmax_row(logits.values().subspan(b * K, K)) == labels[b];
  return hits;
}

std::vector<Tensor> trainable(const ParameterSet& params) {
  std::vector<Tensor> out;
  for (const auto& [name, p] : params) out.push_back(p);
  return out;
}

std::string tokenizer_key(std::size_t stage) { return "tokenizer.stage" + std::to_string(stage) + ".theta"; }

constexpr std::size_t kEvalChunk = 64;

// ---------------------------------------------------------------------------
// One forward pass of either family, reduced to what the objective needs.

struct Forward {
  Tensor cls_logits;
  Tensor kd_logits;
  Tensor prediction;
  std::vector<Tensor> stage_maps;  // CNN only
  TokenGrid visual;                // ViT only
};

Forward teacher_pass(const RunConfig& cfg, const ParameterSet& p, const Tensor& images) {
  Forward f;
  if (cfg.family == ModelFamily::vit) {
    auto out = vit_forward(cfg.vit_teacher, p, images);
    f.cls_logits = f.kd_logits = out.cls_logits;
    f.prediction = predict(out);
    f.visual = out.visual;
  } else {
    auto out = cnn_forward(cfg.cnn_teacher, p, images);
    f.cls_logits = f.kd_logits = f.prediction = out.logits;
    f.stage_maps = out.stages;
  }
  return f;
}

const ToyViTConfig& student_vit(const RunConfig& cfg) { return cfg.vit_student; }

Forward student_pass(const RunConfig& cfg, const ParameterSet& p, const Tensor& images) {
  Forward f;
  if (cfg.family == ModelFamily::vit) {
    auto out = vit_forward(student_vit(cfg), p, images);
    f.cls_logits = out.cls_logits;
    f.kd_logits = out.dist_logits.defined() ? out.dist_logits : out.cls_logits;
    f.prediction = predict(out);
    f.visual = out.visual;
  } else {
    auto out = cnn_forward(cfg.cnn_student, p, images);
    f.cls_logits = f.kd_logits = f.prediction = out.logits;
    f.stage_maps = out.stages;
  }
  return f;
}

ParameterSet init_teacher(const RunConfig& cfg) {
  auto rng = derived_rng(cfg.seed, streams::teacher_init);
  return cfg.family == ModelFamily::vit ? init_vit(cfg.vit_teacher, rng) : init_cnn(cfg.cnn_teacher, rng);
}

double accuracy_of(const ImageSet& images, const std::function<Tensor(const Tensor&)>& predict_fn) {
  if (images.count() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < images.count(); start += kEvalChunk) {
    std::vector<std::size_t> idx(std::min(kEvalChunk, images.count() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = images.batch_labels(idx);
    hits += count_correct(predict_fn(images.batch(idx)), labels);
  }
  return static_cast<double>(hits) / static_cast<double>(images.count());
}

bool bit_identical(const ParameterSet& a, const ParameterSet& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end() || it->second.shape() != t.shape()) return false;
    if (std::memcmp(t.values().data(), it->second.values().data(), t.numel() * sizeof(double)) != 0) return false;
  }
  return true;
}

void check_compatible(const ParameterSet& expected, const ParameterSet& loaded) {
  for (const auto& [name, t] : expected) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw ConfigError("teacher checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ConfigError("teacher checkpoint parameter '" + name + "' has shape " + to_string(it->second.shape()) +
                        ", the configured teacher expects " + to_string(t.shape()));
    }
  }
  if (loaded.size() != expected.size()) throw ConfigError("teacher checkpoint holds extra parameters");
}

// Teacher outputs over the whole training set, computed once: the teacher is
// frozen and sees no augmentation, so every epoch would recompute the same
// values.
struct TeacherCache {
  Tensor logits;               // (N, K)
  std::vector<Tensor> stages;  // ViT: visual tokens (N, L, C); CNN: stage maps
  std::size_t rows = 0, cols = 0;
};

TeacherCache cache_teacher(const RunConfig& cfg, const ParameterSet& teacher, const ImageSet& images) {
  std::vector<Tensor> logits;
  std::vector<std::vector<Tensor>> stages;
  TeacherCache cache;
  for (std::size_t start = 0; start < images.count(); start += kEvalChunk) {
    std::vector<std::size_t> idx(std::min(kEvalChunk, images.count() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto f = teacher_pass(cfg, teacher, images.batch(idx));
    logits.push_back(f.cls_logits);
    std::vector<Tensor> s = cfg.family == ModelFamily::vit ? std::vector<Tensor>{f.visual.tokens} : f.stage_maps;
    if (cfg.family == ModelFamily::vit) cache.rows = f.visual.rows, cache.cols = f.visual.cols;
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (stages.size() <= k) stages.emplace_back();
      stages[k].push_back(s[k]);
    }
  }
  cache.logits = concat(logits, 0);
  for (const auto& parts : stages) cache.stages.push_back(concat(parts, 0));
  return cache;
}

// Student parameters plus the distillation-only trainables: an L_F projection
// when widths differ (ViT) and one strided-conv kernel per CNN stage.
ParameterSet init_student(const RunConfig& cfg, const ParameterSet& teacher) {
  auto rng = derived_rng(cfg.seed, streams::student_init);
  ParameterSet p;
  if (cfg.student_from_teacher) {
    p = clone_parameters(teacher, true);
  } else if (cfg.family == ModelFamily::vit) {
    p = init_vit(cfg.vit_student, rng);
  } else {
    p = init_cnn(cfg.cnn_student, rng);
  }
  if (cfg.family == ModelFamily::vit) {
    if (cfg.vit_student.dim != cfg.vit_teacher.dim) {
      std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.vit_student.dim)));
      std::vector<double> w(cfg.vit_student.dim * cfg.vit_teacher.dim);
      for (auto& x : w) x = dist(rng);
      p["projection.stage0"] = Tensor::from({cfg.vit_student.dim, cfg.vit_teacher.dim}, w, true);
    }
  } else if (cfg.distill.tokenizer == TokenizerKind::strided_conv) {
    for (std::size_t s = 0; s < 3; ++s) {
      const auto stride = stage_plan(s + 1);
      p[tokenizer_key(s)] =
          TokenizerSpec::make(TokenizerKind::strided_conv, stride, stride, cfg.cnn_student.stage_width(s)).theta;
    }
  }
  return p;
}

std::vector<TokenizerSpec> stage_tokenizers(const RunConfig& cfg, const ParameterSet& student) {
  std::vector<TokenizerSpec> specs;
  for (std::size_t s = 0; s < 3; ++s) {
    const auto stride = stage_plan(s + 1);
    if (cfg.distill.tokenizer == TokenizerKind::strided_conv) {
      TokenizerSpec spec;
      spec.kind = TokenizerKind::strided_conv;
      spec.window_h = spec.window_w = stride;
      spec.theta = student.at(tokenizer_key(s));
      specs.push_back(spec);
    } else {
      specs.push_back(TokenizerSpec::make(cfg.distill.tokenizer, stride, stride));
    }
  }
  return specs;
}

// Student and teacher token stages for one batch.
void add_stages(const RunConfig& cfg, const Forward& student, const std::vector<Tensor>& teacher_stages,
                std::size_t rows, std::size_t cols, const std::vector<TokenizerSpec>& specs, ParamFlow student_flow,
                DistillInputs& in) {
  if (cfg.family == ModelFamily::vit) {
    in.student_grids.push_back(student.visual);
    in.teacher_grids.push_back(TokenGrid::make(teacher_stages[0], rows, cols, TokenSource::vit_tokens));
    return;
  }
  for (std::size_t s = 0; s < 3; ++s) {
    in.student_grids.push_back(tokenize(student.stage_maps[s], specs[s], student_flow));
    in.teacher_grids.push_back(tokenize(teacher_stages[s], specs[s], ParamFlow::detached));
  }
}

std::vector<Tensor> projections_of(const ParameterSet& student) {
  auto it = student.find("projection.stage0");
  if (it == student.end()) return {};
  return {it->second};
}

void preflight_angle_budget(const RunConfig& cfg) {
  if (cfg.distill.angle.strategy == AngleStrategy::tiled) return;
  std::size_t tokens = 0, channels = 0;
  if (cfg.family == ModelFamily::vit) {
    tokens = cfg.vit_student.visual_tokens();
    channels = std::max(cfg.vit_student.dim, cfg.vit_teacher.dim);
  } else {
    const std::size_t side = cfg.cnn_student.stage_side(2);
    tokens = side * side;
    channels = cfg.cnn_student.stage_width(2);
  }
  if (cfg.distill.clustering != Clustering::direct) tokens /= cfg.distill.cell_rows * cfg.distill.cell_cols;
  const auto modeled = angle_memory_model(cfg.student_train.batch_size, tokens, channels, sizeof(double));
  if (modeled > cfg.distill.angle.memory_budget_bytes) {
    throw PlanError("angle loss over " + std::to_string(tokens) + " relation tokens needs about " +
                    format_gb(modeled) + ", above the configured budget of " +
                    format_gb(cfg.distill.angle.memory_budget_bytes) +
                    "; set distill.angle_strategy = tiled (or reduce the batch size)");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& path, const ParameterSet& params) {
  io::NamedTensors entries(params.begin(), params.end());
  io::save_archive(path.string(), entries);
}

ParameterSet load_checkpoint(const fs::path& path) {
  auto entries = io::load_archive(path.string());
  return ParameterSet(entries.begin(), entries.end());
}

double teacher_accuracy(const RunConfig& cfg, const ParameterSet& teacher, const ImageSet& images) {
  return accuracy_of(images, [&](const Tensor& x) { return teacher_pass(cfg, teacher, x).prediction; });
}

double separability_witness(const SyntheticData& data, std::uint64_t seed, std::size_t epochs) {
  auto rng = derived_rng(seed, streams::witness);
  const std::size_t D = data.train.image_elements(), H = 32, K = 1 + *std::max_element(data.train.labels.begin(),
                                                                                        data.train.labels.end());
  std::normal_distribution<double> n1(0.0, std::sqrt(2.0 / static_cast<double>(D)));
  std::normal_distribution<double> n2(0.0, std::sqrt(1.0 / static_cast<double>(H)));
  std::vector<double> w1(D * H), w2(H * K);
  for (auto& x : w1) x = n1(rng);
  for (auto& x : w2) x = n2(rng);
  ParameterSet p{{"fc1.weight", Tensor::from({D, H}, w1, true)},
                 {"fc1.bias", Tensor::zeros({H}, true)},
                 {"fc2.weight", Tensor::from({H, K}, w2, true)},
                 {"fc2.bias", Tensor::zeros({K}, true)}};
  auto mlp = [&](const Tensor& images) {
    auto x = reshape(images, {images.dim(0), D});
    auto h = relu(bias_add(matmul(x, p.at("fc1.weight")), p.at("fc1.bias")));
    return bias_add(matmul(h, p.at("fc2.weight")), p.at("fc2.bias"));
  };
  const OptimizerSpec spec{1e-3, 0.0, true, epochs, 32};
  const std::size_t per_epoch = (data.train.count() + spec.batch_size - 1) / spec.batch_size;
  RmsProp opt(trainable(p), spec, per_epoch * epochs);
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& idx : epoch_batches(data.train.count(), spec.batch_size, rng)) {
      loss_cls(mlp(data.train.batch(idx)), data.train.batch_labels(idx)).backward();
      opt.step();
    }
  }
  return accuracy_of(data.val, [&](const Tensor& x) { return mlp(x); });
}

TeacherRun train_teacher(const RunConfig& cfg_in, const fs::path& out, std::ostream* progress) {
  RunConfig cfg = cfg_in;
  cfg.finalize();
  const auto t0 = Clock::now();
  fs::create_directories(out);
  write_text(out / "config.resolved", cfg.resolved());
  auto log = open_log(out / "teacher_metrics.log");

  const auto data = gen_synthetic(cfg.data, cfg.seed);
  TeacherRun run;
  run.params = init_teacher(cfg);
  const auto& spec = cfg.teacher_train;
  const std::size_t per_epoch = (data.train.count() + spec.batch_size - 1) / spec.batch_size;
  RmsProp opt(trainable(run.params), spec, per_epoch * spec.epochs);
  auto shuffle = derived_rng(cfg.seed, streams::teacher_shuffle);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    double sum = 0;
    std::size_t batches = 0;
    for (const auto& idx : epoch_batches(data.train.count(), spec.batch_size, shuffle)) {
      auto f = teacher_pass(cfg, run.params, data.train.batch(idx));
      auto loss = loss_cls(f.cls_logits, data.train.batch_labels(idx));
      const double v = loss.item();
      if (!std::isfinite(v)) throw NumericalError("non-finite teacher loss at step " + std::to_string(step));
      loss.backward();
      opt.step();
      log << "step=" << step << " cls=" << fmt9(v) << "\n";
      sum += v;
      ++batches;
      ++step;
    }
    const double acc = teacher_accuracy(cfg, run.params, data.val);
    run.epoch_val_accuracy.push_back(acc);
    log << "epoch=" << epoch << " val_acc=" << fmt9(acc) << " mean_cls=" << fmt9(sum / batches) << "\n";
    if (progress) *progress << "teacher epoch " << epoch << "/" << spec.epochs << "  val_acc " << fmt9(acc) << "\n";
  }
  run.val_accuracy = spec.epochs == 0 ? teacher_accuracy(cfg, run.params, data.val) : run.epoch_val_accuracy.back();
  if (spec.epochs == 0) log << "epoch=0 val_acc=" << fmt9(run.val_accuracy) << "\n";
  save_checkpoint(out / "teacher.ckpt", run.params);
  run.seconds = seconds_since(t0);
  return run;
}

DistillRun distill(const RunConfig& cfg_in, const fs::path& teacher_checkpoint, const fs::path& out,
                   std::ostream* progress) {
  RunConfig cfg = cfg_in;
  if (cfg.student_from_teacher) {
    cfg.vit_student.dim = cfg.vit_teacher.dim;
    cfg.vit_student.depth = cfg.vit_teacher.depth;
    cfg.vit_student.distillation_token = false;
    cfg.cnn_student.blocks_per_stage = cfg.cnn_teacher.blocks_per_stage;
  }
  cfg.finalize();
  preflight_angle_budget(cfg);
  const auto t0 = Clock::now();
  fs::create_directories(out);
  write_text(out / "config.resolved", cfg.resolved());
  auto log = open_log(out / "metrics.log");

  const auto data = gen_synthetic(cfg.data, cfg.seed);
  const ParameterSet loaded = load_checkpoint(teacher_checkpoint);
  check_compatible(init_teacher(cfg), loaded);
  const ParameterSet teacher = clone_parameters(loaded, false);
  const auto cache = cache_teacher(cfg, teacher, data.train);

  DistillRun run;
  run.student = init_student(cfg, teacher);
  const auto specs = stage_tokenizers(cfg, run.student);
  const auto projections = projections_of(run.student);
  const auto& spec = cfg.student_train;
  const std::size_t per_epoch = (data.train.count() + spec.batch_size - 1) / spec.batch_size;
  RmsProp opt(trainable(run.student), spec, per_epoch * spec.epochs);
  auto shuffle = derived_rng(cfg.seed, streams::student_shuffle);

  auto evaluate = [&] {
    return accuracy_of(data.val, [&](const Tensor& x) { return student_pass(cfg, run.student, x).prediction; });
  };

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= spec.epochs; ++epoch) {
    double sum = 0;
    std::size_t batches = 0;
    for (const auto& idx : epoch_batches(data.train.count(), spec.batch_size, shuffle)) {
      auto s = student_pass(cfg, run.student, data.train.batch(idx));
      DistillInputs in;
      in.student_cls_logits = s.cls_logits;
      in.student_kd_logits = s.kd_logits;
      in.teacher_logits = gather(cache.logits, 0, idx);
      in.labels = data.train.batch_labels(idx);
      in.projections = projections;
      std::vector<Tensor> t_stages;
      for (const auto& c : cache.stages) t_stages.push_back(gather(c, 0, idx));
      add_stages(cfg, s, t_stages, cache.rows, cache.cols, specs, ParamFlow::trainable, in);

      Objective obj;
      try {
        obj = total_loss(in, cfg.distill);
      } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(step) + ": " + e.what());
      }
      if (step == 0) run.initial_total = obj.report.total;
      log << obj.report.to_line(step) << "\n";
      obj.total.backward();
      opt.step();
      sum += obj.report.total;
      ++batches;
      ++step;
    }
    const double acc = evaluate();
    run.epoch_val_accuracy.push_back(acc);
    run.final_total = sum / static_cast<double>(batches);
    log << "epoch=" << epoch << " val_acc=" << fmt9(acc) << " mean_total=" << fmt9(run.final_total) << "\n";
    if (progress) {
      *progress << "distill epoch " << epoch << "/" << spec.epochs << "  L_dis " << fmt9(run.final_total)
                << "  val_acc " << fmt9(acc) << "\n";
    }
  }
  run.val_accuracy = run.epoch_val_accuracy.empty() ? evaluate() : run.epoch_val_accuracy.back();

  // Isolation audit on one batch: a live copy of the teacher runs uncached and
  // the student path is cut from theta, so any gradient reaching either the
  // teacher parameters or theta has come through the teacher branch.
  {
    const auto live = clone_parameters(teacher, true);
    std::vector<std::size_t> idx(std::min<std::size_t>(spec.batch_size, data.train.count()));
    std::iota(idx.begin(), idx.end(), 0);
    const auto images = data.train.batch(idx);
    auto t = teacher_pass(cfg, live, images);
    auto s = student_pass(cfg, run.student, images);
    DistillInputs in{s.cls_logits, s.kd_logits, t.kd_logits, data.train.batch_labels(idx), {}, {}, projections};
    std::vector<Tensor> t_stages = cfg.family == ModelFamily::vit ? std::vector<Tensor>{t.visual.tokens} : t.stage_maps;
    add_stages(cfg, s, t_stages, t.visual.rows, t.visual.cols, specs, ParamFlow::detached, in);
    total_loss(in, cfg.distill).total.backward();
    bool isolated = true;
    for (const auto& [name, p] : live) isolated = isolated && !p.has_grad();
    for (const auto& sp : specs) isolated = isolated && !(sp.theta.defined() && sp.theta.has_grad());
    run.teacher_isolated = isolated;
    for (auto& [name, p] : run.student) p.zero_grad();
  }
  run.teacher_unchanged = bit_identical(teacher, load_checkpoint(teacher_checkpoint));

  save_checkpoint(out / "student.ckpt", run.student);
  run.seconds = seconds_since(t0);
  return run;
}

std::vector<ComparisonRow> compare_methods(const RunConfig& cfg, const fs::path& teacher_checkpoint,
                                           const fs::path& out, std::ostream* progress) {
  struct Variant {
    std::string label, dir;
    RunConfig cfg;
  };
  std::vector<Variant> variants;
  variants.push_back({"serkd (" + to_string(cfg.distill.clustering) + ")", "serkd", cfg});
  RunConfig baseline = cfg;
  baseline.distill.lambda_rd = baseline.distill.lambda_ra = 0.0;
  variants.push_back({"baseline (lambda_D = lambda_A = 0)", "baseline", baseline});
  RunConfig pooled = cfg;
  pooled.distill.clustering =
      cfg.distill.clustering == Clustering::avg_pool ? Clustering::max_pool : Clustering::avg_pool;
  variants.push_back({"serkd (" + to_string(pooled.distill.clustering) + ")", to_string(pooled.distill.clustering),
                      pooled});

  std::vector<ComparisonRow> rows;
  for (const auto& v : variants) {
    if (progress) *progress << "== " << v.label << "\n";
    auto r = distill(v.cfg, teacher_checkpoint, out / v.dir, progress);
    rows.push_back({v.label, r.val_accuracy, r.initial_total, r.final_total});
  }
  std::string text = "method                                val_acc     L_dis(step 0)  L_dis(last epoch)\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-36s  %-10.4f  %-13.6f  %.6f\n", r.method.c_str(), r.val_accuracy,
                  r.initial_total, r.final_total);
    text += buf;
  }
  text += "ordering is informational at this scale\n";
  fs::create_directories(out);
  write_text(out / "comparison.txt", text);
  return rows;
}

// ---------------------------------------------------------------------------

std::vector<GradcheckRow> run_gradcheck_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(element_count(shape));
    for (auto& x : v) x = d(rng);
    return Tensor::from(std::move(shape), v);
  };
  constexpr double h = 1e-5, tol_e2e = 1e-3;
  std::vector<GradcheckRow> rows;
  auto row = [&](std::string name, const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                 double tolerance = 1e-4) {
    rows.push_back({std::move(name), finite_diff_check(f, x, h).max_relative_error, tolerance});
  };

  const auto s = uniform({2, 6, 5}, -1, 1), t = uniform({2, 6, 7}, -1, 1);
  row("loss_rd_sp", [&](const Tensor& x) { return loss_rd_sp(x, t); }, s);
  for (auto strategy : {AngleStrategy::naive_loop, AngleStrategy::vectorized, AngleStrategy::tiled}) {
    AngleLossPlan plan;
    plan.strategy = strategy;
    plan.tile = 4;
    row("loss_ra_sp [" + to_string(strategy) + "]", [&, plan](const Tensor& x) { return loss_ra_sp(x, t, plan); }, s);
  }
  const auto es = uniform({6, 5}, -1, 1), et = uniform({6, 4}, -1, 1);
  row("loss_rd_samples", [&](const Tensor& x) { return loss_rd_samples(x, et); }, es);
  row("loss_ra_samples", [&](const Tensor& x) { return loss_ra_samples(x, et); }, es);

  const auto ls = uniform({4, 5}, -2, 2), lt = uniform({4, 5}, -2, 2);
  row("loss_kd", [&](const Tensor& x) { return loss_kd(x, lt, 2.0); }, ls);
  const auto fs_ = uniform({2, 4, 3}, -1, 1), ft = uniform({2, 4, 5}, -1, 1), proj = uniform({3, 5}, -1, 1);
  row("loss_feat", [&](const Tensor& x) { return loss_feat(x, ft, proj); }, fs_);
  row("loss_feat [projection]", [&](const Tensor& p) { return loss_feat(fs_, ft, p); }, proj);
  const std::vector<std::size_t> labels{0, 4, 2, 1};
  row("loss_cls", [&](const Tensor& x) { return loss_cls(x, labels); }, ls);

  const auto tokens = uniform({2, 16, 4}, -1, 1), probe = uniform({2, 4, 4}, -1, 1);
  for (std::size_t T : {1, 2}) {
    row("superpixel attention [T=" + std::to_string(T) + "]",
        [&, T](const Tensor& x) {
          auto grid = TokenGrid::make(x, 4, 4, TokenSource::vit_tokens);
          return sum_all(sample_superpixels(grid, 2, 2, T, AssociationKernel::attention).S * probe);
        },
        tokens);
  }

  // End to end: L_dis of a small ViT pair against 32 sampled student
  // coordinates, the projection included.
  {
    ToyViTConfig tc = ToyViTConfig::teacher(), sc = ToyViTConfig::student();
    tc.image_size = sc.image_size = 16;
    tc.depth = 2;
    auto teacher = clone_parameters(init_vit(tc, rng), false);
    auto student = init_vit(sc, rng);
    student["projection.stage0"] = uniform({sc.dim, tc.dim}, -0.2, 0.2).clone(true);
    const auto images = uniform({2, 16, 16, 3}, -1, 1);
    const std::vector<std::size_t> y{1, 3};
    std::vector<Tensor> params;
    for (const auto& [name, p] : student) params.push_back(p);
    std::vector<ParamCoordinate> coords;
    for (int i = 0; i < 32; ++i) {
      const std::size_t which = rng() % params.size();
      coords.push_back({which, static_cast<std::size_t>(rng() % params[which].numel())});
    }
    auto f = [&] {
      auto so = vit_forward(sc, student, images);
      auto to = vit_forward(tc, teacher, images);
      DistillInputs in{so.cls_logits, so.dist_logits, to.cls_logits, y, {so.visual}, {to.visual},
                       {student.at("projection.stage0")}};
      return total_loss(in, DistillConfig{}).total;
    };
    rows.push_back({"L_dis end-to-end [32 sampled]", finite_diff_check(f, params, coords, h).max_relative_error,
                    tol_e2e});
  }
  return rows;
}

std::string format_gradcheck(const std::vector<GradcheckRow>& rows) {
  std::string out = "check                               max rel err   tolerance  result\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-34s  %-12.3e  %-9.0e  %s\n", r.name.c_str(), r.max_relative_error, r.tolerance,
                  r.pass() ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

BenchReport bench_angle(const BenchSpec& spec) {
  BenchReport report;
  report.spec = spec;
  report.modeled_bytes = angle_memory_model(spec.batch, spec.tokens, spec.channels, spec.bytes);
  if (spec.batch == 128 && spec.channels == 768 && spec.bytes == 2) {
    if (spec.tokens == 49) report.reported_gb = 0.95;
    if (spec.tokens == 196) report.reported_gb = 17.73;
  }
  const double work = static_cast<double>(spec.batch) * std::pow(static_cast<double>(spec.tokens), 3) *
                      static_cast<double>(spec.channels);
  const auto fp64_model = angle_memory_model(spec.batch, spec.tokens, spec.channels, sizeof(double));

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a(spec.batch * spec.tokens * spec.channels), b(a.size());
  for (auto& x : a) x = n(rng);
  for (auto& x : b) x = n(rng);

  for (auto strategy : {AngleStrategy::naive_loop, AngleStrategy::vectorized, AngleStrategy::tiled}) {
    BenchRow row;
    row.strategy = to_string(strategy);
    if (strategy != AngleStrategy::tiled && fp64_model > spec.budget_bytes) {
      row.skip_reason = "modeled " + format_gb(fp64_model) + " exceeds the " + format_gb(spec.budget_bytes) + " budget";
    } else if (work > spec.max_work) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "B*L^3*C = %.3g exceeds the work limit %.3g", work, spec.max_work);
      row.skip_reason = buf;
    } else {
      const auto student = Tensor::from({spec.batch, spec.tokens, spec.channels}, a, true);
      const auto teacher = Tensor::from({spec.batch, spec.tokens, spec.channels}, b);
      AngleLossPlan plan{strategy, spec.tile, spec.budget_bytes};
      const auto t0 = Clock::now();
      memory::PeakScope scope;
      {
        auto loss = loss_ra_sp(student, teacher, plan);
        row.loss = loss.item();
        loss.backward();
      }
      row.peak_bytes = scope.peak_above_baseline();
      row.seconds = seconds_since(t0);
      row.ran = true;
    }
    report.rows.push_back(row);
  }
  return report;
}

std::string format_bench(const BenchReport& r) {
  const auto& s = r.spec;
  std::string out = "angle loss  B=" + std::to_string(s.batch) + " L=" + std::to_string(s.tokens) +
                    " C=" + std::to_string(s.channels) + " bytes/element=" + std::to_string(s.bytes) + "\n";
  out += "modeled footprint of the materialised computation: " + format_gb(r.modeled_bytes) + " (" +
         std::to_string(r.modeled_bytes) + " bytes)";
  if (r.reported_gb) {
    const double rel = (static_cast<double>(r.modeled_bytes) / 1e9 - *r.reported_gb) / *r.reported_gb;
    char buf[96];
    std::snprintf(buf, sizeof buf, "; reported %.2f GB, %+.1f%%", *r.reported_gb, 100.0 * rel);
    out += buf;
  }
  out += "\nstrategy    B     L     C     seconds     modeled bytes   measured peak bytes (fp64)  loss\n";
  for (const auto& row : r.rows) {
    char buf[256];
    const int n = std::snprintf(buf, sizeof buf, "%-10s  %-4zu  %-4zu  %-4zu  ", row.strategy.c_str(), s.batch,
                                s.tokens, s.channels);
    if (row.ran) {
      std::snprintf(buf + n, sizeof buf - n, "%-10.4f  %-14zu  %-26zu  %.12g\n", row.seconds, r.modeled_bytes,
                    row.peak_bytes, row.loss);
    } else {
      std::snprintf(buf + n, sizeof buf - n, "skipped: %s\n", row.skip_reason.c_str());
    }
    out += buf;
  }
  return out;
}

DumpResult dump_superpixels(const RunConfig& cfg_in, const DumpSpec& spec, const fs::path& out) {
  RunConfig cfg = cfg_in;
  cfg.finalize();
  const std::size_t S = cfg.data.image_size;
  Tensor image;
  if (spec.constant) {
    image = Tensor::full({1, S, S, 3}, *spec.constant);
  } else {
    const auto data = gen_synthetic(cfg.data, cfg.seed);
    const std::size_t idx[] = {spec.image_index};
    if (spec.image_index >= data.val.count()) throw ConfigError("image index beyond the validation set");
    image = data.val.batch(idx);
  }

  TokenGrid grid;
  if (spec.source == DumpSpec::Source::pixels) {
    if (spec.patch == 0 || S % spec.patch != 0) throw ConfigError("patch size must divide the image size");
    auto pooled = avg_pool2d(image, spec.patch, spec.patch, spec.patch, spec.patch);
    const std::size_t side = S / spec.patch;
    grid = TokenGrid::make(reshape(pooled, {1, side * side, 3}), side, side, TokenSource::cnn_tokens);
  } else {
    if (cfg.family != ModelFamily::vit) throw ConfigError("teacher-token dumps need model.family = vit");
    auto teacher = load_checkpoint(spec.teacher_checkpoint);
    check_compatible(init_teacher(cfg), teacher);
    grid = vit_forward(cfg.vit_teacher, teacher, image).visual;
  }

  DumpResult result;
  result.state = sample_superpixels(grid, cfg.distill.cell_rows, cfg.distill.cell_cols, cfg.distill.iterations,
                                    cfg.distill.kernel);
  result.assignments = hard_assignments(result.state);

  fs::create_directories(out);
  io::save_tensor((out / "Q.srkd").string(), result.state.Q);
  if (result.state.Q_hat.defined()) io::save_tensor((out / "Q_hat.srkd").string(), result.state.Q_hat);
  io::save_tensor((out / "S.srkd").string(), result.state.S);
  io::save_indices((out / "assignments.srkd").string(), {grid.batch(), grid.length()}, result.assignments);
  write_text(out / "config.resolved", cfg.resolved());
  return result;
}

}  // namespace serkd
