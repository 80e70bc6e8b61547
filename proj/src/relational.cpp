#include "serkd/relational.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <vector>

namespace serkd {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;
using detail::Node;

struct TokenDims {
  std::size_t batch, tokens, channels;
};

TokenDims token_dims(const Tensor& t, const char* op) {
  if (t.rank() != 3) throw DimensionError(std::string(op) + " expects (B, L, C), got " + serkd::to_string(t.shape()));
  return {t.dim(0), t.dim(1), t.dim(2)};
}

void require_pairable(const Tensor& student, const Tensor& teacher, const char* op) {
  const auto s = token_dims(student, op);
  const auto t = token_dims(teacher, op);
  if (s.batch != t.batch || s.tokens != t.tokens) {
    throw DimensionError(std::string(op) + ": student " + serkd::to_string(student.shape()) + " and teacher " +
                         serkd::to_string(teacher.shape()) + " differ in B or L");
  }
  if (s.tokens < 2) throw ContractError(std::string(op) + " needs at least two tokens");
}

double huber_derivative(double r, double delta) {
  if (std::abs(r) <= delta) return r;
  return r > 0.0 ? delta : -delta;
}

// Unit difference e = v / max(|v|, eps) written into `out`; returns the
// denominator actually used.
double unit_difference(const double* a, const double* b, std::size_t c, double eps, double* out) {
  double sq = 0.0;
  for (std::size_t q = 0; q < c; ++q) {
    out[q] = a[q] - b[q];
    sq += out[q] * out[q];
  }
  const double n = std::max(std::sqrt(sq), eps);
  for (std::size_t q = 0; q < c; ++q) out[q] /= n;
  return n;
}

// Pullback of e = v / max(|v|, eps) for one difference vector.
void unit_difference_backward(const double* e, const double* de, double denom, double eps, std::size_t c,
                              double* dv) {
  if (denom > eps) {
    double proj = 0.0;
    for (std::size_t q = 0; q < c; ++q) proj += e[q] * de[q];
    for (std::size_t q = 0; q < c; ++q) dv[q] = (de[q] - e[q] * proj) / denom;
  } else {
    for (std::size_t q = 0; q < c; ++q) dv[q] = de[q] / eps;
  }
}

void check_angle_budget(const TokenDims& d, std::size_t budget, const char* strategy) {
  const std::size_t modelled = angle_memory_model(d.batch, d.tokens, d.channels, sizeof(double));
  if (modelled > budget) {
    throw PlanError(std::string("angle loss (") + strategy + ") needs about " + format_gb(modelled) +
                    " for B=" + std::to_string(d.batch) + " L=" + std::to_string(d.tokens) +
                    " C=" + std::to_string(d.channels) + ", over the " + format_gb(budget) +
                    " budget; use the tiled strategy");
  }
}

// Difference rows e(i, j) for every i in [i0, i1) of batch b, laid out
// ((i - i0) * L + j) * C, with their denominators.
void fill_unit_rows(const double* x, const TokenDims& d, std::size_t b, std::size_t i0, std::size_t i1, double eps,
                    double* rows, double* denoms) {
  const double* xb = x + b * d.tokens * d.channels;
  for (std::size_t i = i0; i < i1; ++i) {
    for (std::size_t j = 0; j < d.tokens; ++j) {
      const std::size_t r = (i - i0) * d.tokens + j;
      denoms[r] = unit_difference(xb + i * d.channels, xb + j * d.channels, d.channels, eps, rows + r * d.channels);
    }
  }
}

struct AngleKernelArgs {
  TokenDims dims;  // student geometry
  std::size_t teacher_channels;
  std::size_t tile;
  TokenDims teacher_dims() const { return {dims.batch, dims.tokens, teacher_channels}; }
  double delta;
  double eps;
};

// Sum over every (b, i, j, k) of huber(angle_s - angle_t), vertex rows
// processed `tile` at a time; partial sums reduced in tile order.
double tiled_angle_sum(const double* xs, const double* xt, const AngleKernelArgs& a) {
  const auto& d = a.dims;
  const auto td = a.teacher_dims();
  const std::size_t L = d.tokens;
  Buffer es(a.tile * L * d.channels), et(a.tile * L * td.channels);
  Buffer ns(a.tile * L), nt(a.tile * L);
  Buffer as(L * L), at(L * L);
  std::vector<double> partials;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t i0 = 0; i0 < L; i0 += a.tile) {
      const std::size_t i1 = std::min(L, i0 + a.tile);
      fill_unit_rows(xs, d, b, i0, i1, a.eps, es.data(), ns.data());
      fill_unit_rows(xt, td, b, i0, i1, a.eps, et.data(), nt.data());
      double partial = 0.0;
      for (std::size_t i = i0; i < i1; ++i) {
        ConstMat Es(es.data() + (i - i0) * L * d.channels, L, d.channels);
        ConstMat Et(et.data() + (i - i0) * L * td.channels, L, td.channels);
        MutMat As(as.data(), L, L), At(at.data(), L, L);
        As.noalias() = Es * Es.transpose();
        At.noalias() = Et * Et.transpose();
        for (std::size_t q = 0; q < L * L; ++q) partial += huber(as[q], at[q], a.delta);
      }
      partials.push_back(partial);
    }
  }
  return std::accumulate(partials.begin(), partials.end(), 0.0);
}

void tiled_angle_backward(const double* xs, const double* xt, const AngleKernelArgs& a, double scale,
                          double* grad) {
  const auto& d = a.dims;
  const std::size_t L = d.tokens;
  const std::size_t C = d.channels;
  const auto td = a.teacher_dims();
  Buffer es(a.tile * L * C), et(a.tile * L * td.channels);
  Buffer ns(a.tile * L), nt(a.tile * L);
  Buffer as(L * L), at(L * L), g(L * L), de(L * C), dv(C);
  for (std::size_t b = 0; b < d.batch; ++b) {
    double* gb = grad + b * L * C;
    for (std::size_t i0 = 0; i0 < L; i0 += a.tile) {
      const std::size_t i1 = std::min(L, i0 + a.tile);
      fill_unit_rows(xs, d, b, i0, i1, a.eps, es.data(), ns.data());
      fill_unit_rows(xt, td, b, i0, i1, a.eps, et.data(), nt.data());
      for (std::size_t i = i0; i < i1; ++i) {
        const double* es_i = es.data() + (i - i0) * L * C;
        ConstMat Es(es_i, L, C);
        ConstMat Et(et.data() + (i - i0) * L * td.channels, L, td.channels);
        MutMat As(as.data(), L, L), At(at.data(), L, L), G(g.data(), L, L);
        As.noalias() = Es * Es.transpose();
        At.noalias() = Et * Et.transpose();
        for (std::size_t q = 0; q < L * L; ++q) g[q] = scale * huber_derivative(as[q] - at[q], a.delta);
        // The angle block is symmetric in (j, k), so each unit row collects
        // gradient through both of its slots.
        MutMat(de.data(), L, C).noalias() = (G + G.transpose()) * Es;
        for (std::size_t j = 0; j < L; ++j) {
          unit_difference_backward(es_i + j * C, de.data() + j * C, ns[(i - i0) * L + j], a.eps, C, dv.data());
          for (std::size_t q = 0; q < C; ++q) {
            gb[i * C + q] += dv[q];
            gb[j * C + q] -= dv[q];
          }
        }
      }
    }
  }
}

double naive_angle_sum(const double* xs, const double* xt, const AngleKernelArgs& a) {
  const auto& d = a.dims;
  const std::size_t L = d.tokens, C = d.channels, CT = a.teacher_channels;
  std::vector<double> sij(C), sik(C), tij(CT), tik(CT);
  double total = 0.0;
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* sb = xs + b * L * C;
    const double* tb = xt + b * L * CT;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t k = 0; k < L; ++k) {
          unit_difference(sb + i * C, sb + j * C, C, a.eps, sij.data());
          unit_difference(sb + i * C, sb + k * C, C, a.eps, sik.data());
          unit_difference(tb + i * CT, tb + j * CT, CT, a.eps, tij.data());
          unit_difference(tb + i * CT, tb + k * CT, CT, a.eps, tik.data());
          double s = 0.0, t = 0.0;
          for (std::size_t q = 0; q < C; ++q) s += sij[q] * sik[q];
          for (std::size_t q = 0; q < CT; ++q) t += tij[q] * tik[q];
          total += huber(s, t, a.delta);
        }
  }
  return total;
}

void naive_angle_backward(const double* xs, const double* xt, const AngleKernelArgs& a, double scale,
                          double* grad) {
  const auto& d = a.dims;
  const std::size_t L = d.tokens, C = d.channels, CT = a.teacher_channels;
  Buffer e(L * L * C), de(L * L * C), denom(L * L);
  std::vector<double> tij(CT), tik(CT), dv(C);
  for (std::size_t b = 0; b < d.batch; ++b) {
    const double* sb = xs + b * L * C;
    const double* tb = xt + b * L * CT;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        denom[i * L + j] = unit_difference(sb + i * C, sb + j * C, C, a.eps, e.data() + (i * L + j) * C);
    std::fill(de.begin(), de.end(), 0.0);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t k = 0; k < L; ++k) {
          const double* e_ij = e.data() + (i * L + j) * C;
          const double* e_ik = e.data() + (i * L + k) * C;
          unit_difference(tb + i * CT, tb + j * CT, CT, a.eps, tij.data());
          unit_difference(tb + i * CT, tb + k * CT, CT, a.eps, tik.data());
          double s = 0.0, t = 0.0;
          for (std::size_t q = 0; q < C; ++q) s += e_ij[q] * e_ik[q];
          for (std::size_t q = 0; q < CT; ++q) t += tij[q] * tik[q];
          const double g = scale * huber_derivative(s - t, a.delta);
          double* de_ij = de.data() + (i * L + j) * C;
          double* de_ik = de.data() + (i * L + k) * C;
          for (std::size_t q = 0; q < C; ++q) {
            de_ij[q] += g * e_ik[q];
            de_ik[q] += g * e_ij[q];
          }
        }
    double* gb = grad + b * L * C;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        const std::size_t r = i * L + j;
        unit_difference_backward(e.data() + r * C, de.data() + r * C, denom[r], a.eps, C, dv.data());
        for (std::size_t q = 0; q < C; ++q) {
          gb[i * C + q] += dv[q];
          gb[j * C + q] -= dv[q];
        }
      }
  }
}

using AngleSum = double (*)(const double*, const double*, const AngleKernelArgs&);
using AngleBackward = void (*)(const double*, const double*, const AngleKernelArgs&, double, double*);

// Fused loss node: the teacher enters as a constant, the student is the
// only differentiable input.
Tensor fused_angle_loss(const Tensor& student, const Tensor& teacher, const AngleKernelArgs& args, AngleSum forward,
                        AngleBackward backward, const char* op) {
  const Tensor frozen = detach(teacher);
  const double count = static_cast<double>(args.dims.batch) * std::pow(static_cast<double>(args.dims.tokens), 3);
  const double total = forward(student.values().data(), frozen.values().data(), args);
  Buffer value{total / count};
  return make_result({}, std::move(value), {student, frozen}, op, [args, count, backward](Node& self) {
    Node& s = *self.inputs[0];
    if (!s.requires_grad) return;
    backward(s.value.data(), self.inputs[1]->value.data(), args, self.grad[0] / count, s.grad_buffer().data());
  });
}

}  // namespace

void PotentialConfig::validate() const {
  if (!(huber_threshold > 0.0)) throw ConfigError("huber threshold must be positive");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
}

std::string to_string(AngleStrategy s) {
  switch (s) {
    case AngleStrategy::naive_loop: return "naive-loop";
    case AngleStrategy::vectorized: return "vectorized";
    case AngleStrategy::tiled: return "tiled";
  }
  return "unknown";
}

AngleStrategy parse_angle_strategy(const std::string& name) {
  if (name == "naive-loop") return AngleStrategy::naive_loop;
  if (name == "vectorized") return AngleStrategy::vectorized;
  if (name == "tiled") return AngleStrategy::tiled;
  throw ConfigError("unknown angle strategy '" + name + "' (naive-loop | vectorized | tiled)");
}

Tensor batch_pairwise_dist(const Tensor& feat, const PotentialConfig& cfg) {
  cfg.validate();
  const auto d = token_dims(feat, "batch_pairwise_dist");
  if (d.tokens < 2) throw ContractError("batch_pairwise_dist needs L >= 2");
  const std::size_t L = d.tokens;

  const Tensor sq = sum(feat * feat, {2}, true);   // (B, L, 1)
  const Tensor sq_rows = expand(sq, 2, L);         // |x_i|^2 at [b, i, j]
  const Tensor sq_cols = transpose(sq_rows);       // |x_j|^2 at [b, i, j]
  const Tensor prod = matmul(feat, transpose(feat));
  const Tensor raw = sq_rows + sq_cols - prod * 2.0;
  Tensor dist = sqrt(clamp_min(raw, cfg.eps));

  std::vector<double> off_diagonal(d.batch * L * L, 1.0);
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t i = 0; i < L; ++i) off_diagonal[(b * L + i) * L + i] = 0.0;
  dist = dist * Tensor::from({d.batch, L, L}, off_diagonal);

  // Entries that only survive through the clamp count as coincident points.
  const auto rv = raw.values();
  for (std::size_t b = 0; b < d.batch; ++b) {
    double true_sum = 0.0;
    for (std::size_t q = 0; q < L * L; ++q) {
      const double r = rv[b * L * L + q];
      if (off_diagonal[b * L * L + q] > 0.0 && r > cfg.eps) true_sum += std::sqrt(r);
    }
    if (true_sum / static_cast<double>(L * (L - 1)) < cfg.eps) {
      throw DegenerateBatchError("batch " + std::to_string(b) +
                                 ": all tokens coincide, pairwise-distance normalizer is zero");
    }
  }

  const Tensor normalizer = sum(dist, {1, 2}, true) / static_cast<double>(L * (L - 1));  // (B, 1, 1)
  const Tensor inv = expand(expand(pow(normalizer, -1.0), 1, L), 2, L);
  return dist * inv;
}

Tensor loss_rd_sp(const Tensor& student, const Tensor& teacher, const PotentialConfig& cfg) {
  require_pairable(student, teacher, "loss_rd_sp");
  const Tensor t = batch_pairwise_dist(detach(teacher), cfg);
  const Tensor s = batch_pairwise_dist(student, cfg);
  return mean_all(huber(s - t, cfg.huber_threshold));
}

Tensor angle_tensor(const Tensor& feat, const PotentialConfig& cfg, std::size_t memory_budget_bytes) {
  cfg.validate();
  const auto d = token_dims(feat, "angle_tensor");
  if (d.tokens < 2) throw ContractError("angle_tensor needs L >= 2");
  check_angle_budget(d, memory_budget_bytes, "vectorized");
  const std::size_t L = d.tokens;

  std::vector<std::size_t> vertex(L * L), other(L * L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      vertex[i * L + j] = i;
      other[i * L + j] = j;
    }
  const Tensor diff = gather(feat, 1, vertex) - gather(feat, 1, other);  // (B, L*L, C)
  const Tensor norm = sqrt(sum(diff * diff, {2}, true), cfg.eps * cfg.eps);
  const Tensor unit = diff * expand(pow(norm, -1.0), 2, d.channels);
  const Tensor rows = reshape(unit, {d.batch * L, L, d.channels});
  return reshape(matmul(rows, transpose(rows)), {d.batch, L, L, L});
}

Tensor loss_ra_sp(const Tensor& student, const Tensor& teacher, const AngleLossPlan& plan,
                  const PotentialConfig& cfg) {
  cfg.validate();
  require_pairable(student, teacher, "loss_ra_sp");
  const auto sd = token_dims(student, "loss_ra_sp");
  const auto td = token_dims(teacher, "loss_ra_sp");
  switch (plan.strategy) {
    case AngleStrategy::vectorized: {
      const Tensor t_angle = angle_tensor(detach(teacher), cfg, plan.memory_budget_bytes);
      const Tensor s_angle = angle_tensor(student, cfg, plan.memory_budget_bytes);
      return mean_all(huber(s_angle - t_angle, cfg.huber_threshold));
    }
    case AngleStrategy::naive_loop: {
      check_angle_budget(sd, plan.memory_budget_bytes, "naive-loop");
      const AngleKernelArgs args{sd, td.channels, sd.tokens, cfg.huber_threshold, cfg.eps};
      return fused_angle_loss(student, teacher, args, naive_angle_sum, naive_angle_backward, "angle_naive");
    }
    case AngleStrategy::tiled: {
      if (plan.tile == 0) throw PlanError("tile size must be at least 1");
      const AngleKernelArgs args{sd, td.channels, std::min(plan.tile, sd.tokens), cfg.huber_threshold, cfg.eps};
      return fused_angle_loss(student, teacher, args, tiled_angle_sum, tiled_angle_backward, "angle_tiled");
    }
  }
  throw ContractError("unknown angle strategy");
}

Tensor loss_rd_samples(const Tensor& student, const Tensor& teacher, const PotentialConfig& cfg) {
  if (student.rank() != 2 || teacher.rank() != 2) throw DimensionError("sample losses expect (B, C) embeddings");
  if (student.dim(0) < 2) throw ContractError("distance-wise sample loss needs B >= 2");
  return loss_rd_sp(reshape(student, {1, student.dim(0), student.dim(1)}),
                    reshape(teacher, {1, teacher.dim(0), teacher.dim(1)}), cfg);
}

Tensor loss_ra_samples(const Tensor& student, const Tensor& teacher, const AngleLossPlan& plan,
                       const PotentialConfig& cfg) {
  if (student.rank() != 2 || teacher.rank() != 2) throw DimensionError("sample losses expect (B, C) embeddings");
  if (student.dim(0) < 3) throw ContractError("angle-wise sample loss needs B >= 3");
  return loss_ra_sp(reshape(student, {1, student.dim(0), student.dim(1)}),
                    reshape(teacher, {1, teacher.dim(0), teacher.dim(1)}), plan, cfg);
}

std::size_t angle_memory_model(std::size_t batch, std::size_t tokens, std::size_t channels,
                               std::size_t bytes_per_element) {
  if (batch == 0 || tokens == 0 || channels == 0 || bytes_per_element == 0) {
    throw ContractError("angle_memory_model arguments must be positive");
  }
  auto mul = [](std::size_t a, std::size_t b) {
    std::size_t r = 0;
    if (__builtin_mul_overflow(a, b, &r)) throw ContractError("angle_memory_model overflow");
    return r;
  };
  const std::size_t l2 = mul(tokens, tokens);
  const std::size_t diffs = mul(mul(mul(mul(2, batch), l2), channels), bytes_per_element);
  const std::size_t angles = mul(mul(mul(batch, l2), tokens), bytes_per_element);
  std::size_t total = 0;
  if (__builtin_add_overflow(diffs, angles, &total)) throw ContractError("angle_memory_model overflow");
  return total;
}

std::string format_gb(std::size_t bytes) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f GB", static_cast<double>(bytes) / 1e9);
  return buf;
}

}  // namespace serkd
