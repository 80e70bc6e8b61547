#include "serkd/distill.hpp"

#include <cmath>
#include <cstdio>

#include "serkd/errors.hpp"
#include "serkd/ops.hpp"

namespace serkd {

namespace {

void require_finite(const Tensor& t, const char* what) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericalError(std::string(what) + " contains non-finite values");
  }
}

void require_logits(const Tensor& s, const Tensor& t, const char* op) {
  if (s.rank() != 2 || s.shape() != t.shape()) {
    throw DimensionError(std::string(op) + ": logits must share shape (B, K), got " + to_string(s.shape()) +
                         " and " + to_string(t.shape()));
  }
}

}  // namespace

std::string to_string(Clustering c) {
  switch (c) {
    case Clustering::direct: return "direct";
    case Clustering::max_pool: return "max-pool";
    case Clustering::avg_pool: return "avg-pool";
    case Clustering::superpixel: return "superpixel";
  }
  return "?";
}

Clustering parse_clustering(const std::string& name) {
  if (name == "direct") return Clustering::direct;
  if (name == "max-pool") return Clustering::max_pool;
  if (name == "avg-pool") return Clustering::avg_pool;
  if (name == "superpixel") return Clustering::superpixel;
  throw ConfigError("unknown clustering '" + name + "' (expected direct, max-pool, avg-pool or superpixel)");
}

void DistillConfig::validate() const {
  if (!(tau > 0)) throw ConfigError("distill.tau must be positive");
  for (double l : {lambda_kd, lambda_feat, lambda_rd, lambda_ra}) {
    if (!(l >= 0)) throw ConfigError("loss weights must be non-negative");
  }
  if (cell_rows == 0 || cell_cols == 0) throw ConfigError("superpixel grid factors must be positive");
  if (iterations == 0) throw ConfigError("superpixel iteration count must be at least 1");
  potential.validate();
}

Tensor loss_kd(const Tensor& student_logits, const Tensor& teacher_logits, double tau) {
  if (!(tau > 0)) throw ContractError("loss_kd: temperature must be positive");
  require_logits(student_logits, teacher_logits, "loss_kd");
  require_finite(student_logits, "student logits");
  require_finite(teacher_logits, "teacher logits");
  const auto t = detach(teacher_logits) / tau;
  const auto log_p = log_softmax(t, 1);
  const auto p = exp(log_p);
  const auto log_q = log_softmax(student_logits / tau, 1);
  return sum_all(p * (log_p - log_q)) / static_cast<double>(student_logits.dim(0));
}

Tensor loss_feat(const Tensor& student_tokens, const Tensor& teacher_tokens, const Tensor& projection) {
  const Tensor s = projection.defined() ? matmul(student_tokens, projection) : student_tokens;
  if (s.shape() != teacher_tokens.shape()) {
    throw DimensionError("loss_feat: projected student tokens " + to_string(s.shape()) + " vs teacher tokens " +
                         to_string(teacher_tokens.shape()));
  }
  const auto d = s - detach(teacher_tokens);
  return mean_all(d * d);
}

Tensor loss_cls(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("loss_cls: logits " + to_string(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  }
  const std::size_t K = logits.dim(1);
  std::vector<double> onehot(logits.numel(), 0.0);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= K) {
      throw ContractError("loss_cls: label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(K) + ")");
    }
    onehot[b * K + labels[b]] = 1.0;
  }
  return -sum_all(log_softmax(logits, 1) * Tensor::from(logits.shape(), onehot)) /
         static_cast<double>(labels.size());
}

Tensor relation_tokens(const TokenGrid& grid, const DistillConfig& cfg) {
  const std::size_t B = grid.batch(), C = grid.channels();
  switch (cfg.clustering) {
    case Clustering::direct: return grid.tokens;
    case Clustering::max_pool:
    case Clustering::avg_pool: {
      const auto geom = SuperpixelGeometry::make(grid.rows, grid.cols, cfg.cell_rows, cfg.cell_cols);
      auto image = reshape(grid.tokens, {B, grid.rows, grid.cols, C});
      auto pooled = cfg.clustering == Clustering::max_pool
                        ? max_pool2d(image, cfg.cell_rows, cfg.cell_cols, cfg.cell_rows, cfg.cell_cols)
                        : avg_pool2d(image, cfg.cell_rows, cfg.cell_cols, cfg.cell_rows, cfg.cell_cols);
      return reshape(pooled, {B, geom.superpixels(), C});
    }
    case Clustering::superpixel:
      return sample_superpixels(grid, cfg.cell_rows, cfg.cell_cols, cfg.iterations, cfg.kernel).S;
  }
  throw ContractError("relation_tokens: unknown clustering");
}

std::string LossReport::to_line(std::size_t step) const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "step=%zu cls=%.9g kd=%.9g feat=%.9g rd_sp=%.9g ra_sp=%.9g total=%.9g", step, cls,
                kd, feat, rd_sp, ra_sp, total);
  return buf;
}

Objective total_loss(const DistillInputs& in, const DistillConfig& cfg) {
  cfg.validate();
  if (in.student_grids.size() != in.teacher_grids.size() || in.student_grids.empty()) {
    throw DimensionError("total_loss: need matching, non-empty student and teacher token stages");
  }
  if (!in.projections.empty() && in.projections.size() != in.student_grids.size()) {
    throw DimensionError("total_loss: one projection per stage expected");
  }

  const auto cls = loss_cls(in.student_cls_logits, in.labels);
  const auto kd = loss_kd(in.student_kd_logits, in.teacher_logits, cfg.tau);
  Tensor feat, rd, ra;
  for (std::size_t s = 0; s < in.student_grids.size(); ++s) {
    const auto& sg = in.student_grids[s];
    TokenGrid tg = in.teacher_grids[s];
    tg.tokens = detach(tg.tokens);
    const Tensor proj = in.projections.empty() ? Tensor() : in.projections[s];
    const auto f = loss_feat(sg.tokens, tg.tokens, proj);

    const auto s_rel = relation_tokens(sg, cfg);
    const auto t_rel = relation_tokens(tg, cfg);
    const auto d = loss_rd_sp(s_rel, t_rel, cfg.potential);
    const auto a = loss_ra_sp(s_rel, t_rel, cfg.angle, cfg.potential);
    feat = feat.defined() ? feat + f : f;
    rd = rd.defined() ? rd + d : d;
    ra = ra.defined() ? ra + a : a;
  }

  Objective out;
  out.total = cls + kd * cfg.lambda_kd + feat * cfg.lambda_feat + rd * cfg.lambda_rd + ra * cfg.lambda_ra;
  out.report = {cls.item(), kd.item(), feat.item(), rd.item(), ra.item(), out.total.item()};
  for (double v : {out.report.cls, out.report.kd, out.report.feat, out.report.rd_sp, out.report.ra_sp}) {
    if (!std::isfinite(v)) throw NumericalError("total_loss: non-finite loss term");
  }
  return out;
}

}  // namespace serkd
