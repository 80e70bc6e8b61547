#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>

#include "serkd/distill.hpp"
#include "serkd/models.hpp"

namespace serkd {

struct DatasetSpec {
  std::size_t classes = 4;
  std::size_t samples_per_class = 128;
  std::size_t image_size = 32;
  std::size_t blobs_per_class = 3;
  double blob_sigma = 3.0;
  double noise = 0.35;
  double val_fraction = 0.25;

  void validate() const;
};

struct OptimizerSpec {
  double lr = 1e-3;
  double weight_decay = 0.05;
  bool cosine = true;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;

  void validate(const char* section) const;
};

enum class ModelFamily { vit, cnn };

/// Everything a run needs. Seeds for data, initialisation and shuffling are
/// all derived from `seed`.
struct RunConfig {
  std::uint64_t seed = 7;
  DatasetSpec data;
  ModelFamily family = ModelFamily::vit;
  ToyViTConfig vit_teacher = ToyViTConfig::teacher();
  ToyViTConfig vit_student = ToyViTConfig::student();
  ToyCNNConfig cnn_teacher = ToyCNNConfig::teacher();
  ToyCNNConfig cnn_student = ToyCNNConfig::student();
  /// Start the student from the teacher checkpoint; needs identical
  /// architectures (a ViT student then has no distillation token).
  bool student_from_teacher = false;
  DistillConfig distill;
  OptimizerSpec teacher_train{2e-3, 0.05, true, 10, 32};
  OptimizerSpec student_train{2e-3, 0.05, true, 10, 32};

  /// Applies one "key = value" assignment; unknown keys and malformed values
  /// raise ConfigError.
  void set(const std::string& key, const std::string& value);

  /// Propagates shared settings (image size, class count) into the model
  /// configs and validates everything.
  void finalize();

  /// Every key in a fixed order, one "key = value" per line.
  std::string resolved() const;
};

/// Parses flat "key = value" lines on top of the defaults. Blank lines and
/// lines starting with '#' are ignored.
RunConfig parse_config(std::istream& in, RunConfig base = {});
RunConfig load_config(const std::string& path, RunConfig base = {});

/// Applies "key=value" (as given to --set).
void apply_override(RunConfig& cfg, const std::string& assignment);

}  // namespace serkd
