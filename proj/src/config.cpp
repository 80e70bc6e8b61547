#include "serkd/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "serkd/errors.hpp"

namespace serkd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// One table row per key; the macro keeps each row on one line.
#define SERKD_FIELD(KEY, EXPR, PARSE) \
  Field { KEY, [](const RunConfig& c) { return fmt(c.EXPR); }, [](RunConfig& c, const std::string& v) { c.EXPR = PARSE(KEY, v); } }

std::string family_name(ModelFamily f) { return f == ModelFamily::vit ? "vit" : "cnn"; }

ModelFamily parse_family(const std::string& key, const std::string& v) {
  if (v == "vit") return ModelFamily::vit;
  if (v == "cnn") return ModelFamily::cnn;
  throw ConfigError(key + ": expected vit or cnn, got '" + v + "'");
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) { c.seed = to_size("seed", v); }},
      SERKD_FIELD("data.classes", data.classes, to_size),
      SERKD_FIELD("data.samples_per_class", data.samples_per_class, to_size),
      SERKD_FIELD("data.image_size", data.image_size, to_size),
      SERKD_FIELD("data.blobs_per_class", data.blobs_per_class, to_size),
      SERKD_FIELD("data.blob_sigma", data.blob_sigma, to_double),
      SERKD_FIELD("data.noise", data.noise, to_double),
      SERKD_FIELD("data.val_fraction", data.val_fraction, to_double),
      Field{"model.family", [](const RunConfig& c) { return family_name(c.family); },
            [](RunConfig& c, const std::string& v) { c.family = parse_family("model.family", v); }},
      SERKD_FIELD("vit.patch", vit_student.patch, to_size),
      SERKD_FIELD("vit.mlp_ratio", vit_student.mlp_ratio, to_size),
      SERKD_FIELD("teacher.dim", vit_teacher.dim, to_size),
      SERKD_FIELD("teacher.depth", vit_teacher.depth, to_size),
      SERKD_FIELD("student.dim", vit_student.dim, to_size),
      SERKD_FIELD("student.depth", vit_student.depth, to_size),
      SERKD_FIELD("student.distillation_token", vit_student.distillation_token, to_bool),
      SERKD_FIELD("student.init_from_teacher", student_from_teacher, to_bool),
      SERKD_FIELD("cnn.base_width", cnn_student.base_width, to_size),
      SERKD_FIELD("cnn.teacher_blocks", cnn_teacher.blocks_per_stage, to_size),
      SERKD_FIELD("cnn.student_blocks", cnn_student.blocks_per_stage, to_size),
      SERKD_FIELD("distill.tau", distill.tau, to_double),
      SERKD_FIELD("distill.lambda_kd", distill.lambda_kd, to_double),
      SERKD_FIELD("distill.lambda_feat", distill.lambda_feat, to_double),
      SERKD_FIELD("distill.lambda_rd", distill.lambda_rd, to_double),
      SERKD_FIELD("distill.lambda_ra", distill.lambda_ra, to_double),
      Field{"distill.clustering", [](const RunConfig& c) { return to_string(c.distill.clustering); },
            [](RunConfig& c, const std::string& v) { c.distill.clustering = parse_clustering(v); }},
      Field{"distill.kernel", [](const RunConfig& c) { return to_string(c.distill.kernel); },
            [](RunConfig& c, const std::string& v) { c.distill.kernel = parse_association_kernel(v); }},
      Field{"distill.tokenizer", [](const RunConfig& c) { return to_string(c.distill.tokenizer); },
            [](RunConfig& c, const std::string& v) { c.distill.tokenizer = parse_tokenizer_kind(v); }},
      SERKD_FIELD("distill.cell_rows", distill.cell_rows, to_size),
      SERKD_FIELD("distill.cell_cols", distill.cell_cols, to_size),
      SERKD_FIELD("distill.iterations", distill.iterations, to_size),
      SERKD_FIELD("distill.huber_delta", distill.potential.huber_threshold, to_double),
      Field{"distill.angle_strategy", [](const RunConfig& c) { return to_string(c.distill.angle.strategy); },
            [](RunConfig& c, const std::string& v) { c.distill.angle.strategy = parse_angle_strategy(v); }},
      SERKD_FIELD("distill.angle_tile", distill.angle.tile, to_size),
      Field{"distill.angle_budget_mb", [](const RunConfig& c) { return fmt(c.distill.angle.memory_budget_bytes >> 20); },
            [](RunConfig& c, const std::string& v) {
              c.distill.angle.memory_budget_bytes = to_size("distill.angle_budget_mb", v) << 20;
            }},
      SERKD_FIELD("teacher_train.lr", teacher_train.lr, to_double),
      SERKD_FIELD("teacher_train.weight_decay", teacher_train.weight_decay, to_double),
      SERKD_FIELD("teacher_train.cosine", teacher_train.cosine, to_bool),
      SERKD_FIELD("teacher_train.epochs", teacher_train.epochs, to_size),
      SERKD_FIELD("teacher_train.batch_size", teacher_train.batch_size, to_size),
      SERKD_FIELD("student_train.lr", student_train.lr, to_double),
      SERKD_FIELD("student_train.weight_decay", student_train.weight_decay, to_double),
      SERKD_FIELD("student_train.cosine", student_train.cosine, to_bool),
      SERKD_FIELD("student_train.epochs", student_train.epochs, to_size),
      SERKD_FIELD("student_train.batch_size", student_train.batch_size, to_size),
  };
  return table;
}

#undef SERKD_FIELD

}  // namespace

void DatasetSpec::validate() const {
  if (classes < 2) throw ConfigError("data.classes must be at least 2");
  if (samples_per_class < 2) throw ConfigError("data.samples_per_class must be at least 2");
  if (blobs_per_class == 0) throw ConfigError("data.blobs_per_class must be positive");
  if (!(blob_sigma > 0)) throw ConfigError("data.blob_sigma must be positive");
  if (!(2.0 * blob_sigma < static_cast<double>(image_size))) {
    throw ConfigError("blob off-canvas: sigma " + fmt(blob_sigma) + " does not fit a " + std::to_string(image_size) +
                      "-pixel image");
  }
  if (!(noise >= 0)) throw ConfigError("data.noise must be non-negative");
  if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("data.val_fraction must lie in (0, 1)");
}

void OptimizerSpec::validate(const char* section) const {
  const std::string s(section);
  if (!(lr > 0)) throw ConfigError(s + ".lr must be positive");
  if (!(weight_decay >= 0)) throw ConfigError(s + ".weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError(s + ".batch_size must be positive");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

void RunConfig::finalize() {
  data.validate();
  for (ToyViTConfig* v : {&vit_teacher, &vit_student}) {
    v->image_size = data.image_size;
    v->classes = data.classes;
    v->patch = vit_student.patch;
    v->mlp_ratio = vit_student.mlp_ratio;
  }
  vit_teacher.distillation_token = false;
  for (ToyCNNConfig* c : {&cnn_teacher, &cnn_student}) {
    c->image_size = data.image_size;
    c->classes = data.classes;
    c->base_width = cnn_student.base_width;
  }
  if (family == ModelFamily::vit) {
    vit_teacher.validate();
    vit_student.validate();
  } else {
    cnn_teacher.validate();
    cnn_student.validate();
  }
  distill.validate();
  teacher_train.validate("teacher_train");
  student_train.validate("student_train");
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

RunConfig parse_config(std::istream& in, RunConfig base) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + t + "'");
    }
    try {
      base.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, std::move(base));
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  cfg.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

}  // namespace serkd
