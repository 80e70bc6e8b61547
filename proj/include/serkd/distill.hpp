#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "serkd/relational.hpp"
#include "serkd/superpixel.hpp"
#include "serkd/tensor.hpp"
#include "serkd/tokenizer.hpp"

namespace serkd {

/// How relation tokens are built from a model's visual tokens.
enum class Clustering { direct, max_pool, avg_pool, superpixel };

std::string to_string(Clustering c);
Clustering parse_clustering(const std::string& name);

struct DistillConfig {
  double tau = 1.0;
  double lambda_kd = 1.0;
  double lambda_feat = 1.0;
  double lambda_rd = 0.5;
  double lambda_ra = 1.0;
  Clustering clustering = Clustering::superpixel;
  AssociationKernel kernel = AssociationKernel::attention;
  TokenizerKind tokenizer = TokenizerKind::avg_pool;  // CNN feature maps only
  std::size_t cell_rows = 2, cell_cols = 2;           // H_t, W_t
  std::size_t iterations = 1;                         // T
  AngleLossPlan angle;
  PotentialConfig potential;

  void validate() const;
};

/// Mean over the batch of KL(softmax(teacher / tau) || softmax(student / tau)).
Tensor loss_kd(const Tensor& student_logits, const Tensor& teacher_logits, double tau);

/// Mean squared error between projected student tokens (B, L, C_s) and
/// teacher tokens (B, L, C_t). An undefined projection is the identity.
Tensor loss_feat(const Tensor& student_tokens, const Tensor& teacher_tokens, const Tensor& projection = {});

/// Mean cross-entropy of the true class.
Tensor loss_cls(const Tensor& logits, std::span<const std::size_t> labels);

/// Relation tokens (B, M, C) of one token grid under the configured
/// clustering.
Tensor relation_tokens(const TokenGrid& grid, const DistillConfig& cfg);

struct LossReport {
  double cls = 0, kd = 0, feat = 0, rd_sp = 0, ra_sp = 0, total = 0;

  /// "step=N cls=... kd=... feat=... rd_sp=... ra_sp=... total=..." with
  /// nine significant digits.
  std::string to_line(std::size_t step) const;
};

/// Everything one objective evaluation consumes. Token grids come in
/// matching student/teacher pairs, one per feature stage; stage terms are
/// summed with equal weight.
struct DistillInputs {
  Tensor student_cls_logits;
  Tensor student_kd_logits;  // distillation head; the class head when the student has none
  Tensor teacher_logits;
  std::vector<std::size_t> labels;
  std::vector<TokenGrid> student_grids;
  std::vector<TokenGrid> teacher_grids;
  std::vector<Tensor> projections;  // per stage; empty or undefined entries mean identity
};

struct Objective {
  LossReport report;
  Tensor total;
};

Objective total_loss(const DistillInputs& inputs, const DistillConfig& cfg);

}  // namespace serkd
