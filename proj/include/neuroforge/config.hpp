#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "neuroforge/diffusion.hpp"
#include "neuroforge/errors.hpp"
#include "neuroforge/io.hpp"
#include "neuroforge/nn/unet.hpp"
#include "neuroforge/phantom.hpp"
#include "neuroforge/remodel.hpp"

// JSON pipeline configuration. Every section and key is optional; unknown keys
// are rejected so that typos do not silently fall back to defaults.

namespace neuroforge {

namespace fs = std::filesystem;

struct PathsConfig {
  // Empty paths fall back to the artifacts earlier commands write into out_dir.
  fs::path image, labels, mito;
  fs::path out_dir = "out";
  fs::path library, checkpoint, pairs;
  fs::path gt, pred;
  fs::path real_features, gen_features;
  std::vector<fs::path> real_images, gen_images;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::Linear;
  int steps = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;

  DiffusionSchedule make() const { return DiffusionSchedule::make(steps, kind, beta_start, beta_end); }
};

struct TrainingConfig {
  long iterations = 500;
  double learning_rate = 1e-3;
  int batch_size = 1;
  Shape3 patch_shape{8, 32, 32};
  std::uint64_t seed = 0;
  long checkpoint_every = 0;  // 0 writes only the final checkpoint
  double lambda_vlb = 1e-3;
  double grad_clip = 1.0;  // global gradient norm bound, 0 disables
  /// Reuse one (crop, t, noise) draw for every iteration.
  bool fixed_sample = false;
};

struct AugmentationConfig {
  double ratio = 1.0;  // generated : real
  int pairs = 4;
};

struct PhantomSection {
  Shape3 shape{8, 64, 64};
  PhantomConfig params;
};

struct EvaluateConfig {
  bool ignore_zero_gt = true;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  PathsConfig paths;
  ScheduleConfig schedule;
  nn::UNetConfig unet;
  RemodelConfig remodel;
  TrainingConfig training;
  AugmentationConfig augmentation;
  PhantomSection phantom;
  EvaluateConfig evaluate;

  void validate() const {
    unet.validate();
    remodel.validate();
    (void)schedule.make();
    if (training.iterations < 0) throw UsageError("training.iterations must be >= 0");
    if (!(training.learning_rate > 0.0)) throw UsageError("training.learning_rate must be > 0");
    if (training.batch_size < 1) throw UsageError("training.batch_size must be >= 1");
    if (training.checkpoint_every < 0) throw UsageError("training.checkpoint_every must be >= 0");
    if (!(training.lambda_vlb >= 0.0)) throw UsageError("training.lambda_vlb must be >= 0");
    if (!(training.grad_clip >= 0.0)) throw UsageError("training.grad_clip must be >= 0");
    const auto p = training.patch_shape;
    if (p.d < 1 || p.h < 1 || p.w < 1) throw UsageError("training.patch_shape must be positive");
    try {
      unet.check_input(p);
    } catch (const DataError& e) {
      throw UsageError(std::string("training.patch_shape: ") + e.what());
    }
    if (!(augmentation.ratio > 0.0)) throw UsageError("augmentation.ratio must be > 0");
    if (augmentation.pairs < 1) throw UsageError("augmentation.pairs must be >= 1");
  }

  fs::path image_path() const { return pick(paths.image, "image"); }
  fs::path labels_path() const { return pick(paths.labels, "neurons"); }
  fs::path mito_path() const { return pick(paths.mito, "mito"); }
  fs::path library_path() const { return pick(paths.library, "signatures.siglib"); }
  fs::path checkpoint_path() const { return pick(paths.checkpoint, "checkpoint.ckpt"); }
  fs::path pairs_path() const { return pick(paths.pairs, "remodel/pairs.json"); }

 private:
  fs::path pick(const fs::path& p, const char* fallback) const { return p.empty() ? paths.out_dir / fallback : p; }
};

namespace detail {

inline void check_keys(const io::json& j, const std::string& section, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw UsageError("config: '" + section + "' must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw UsageError("config: unknown key '" + (section.empty() ? k : section + "." + k) + "'");
}

template <typename T>
void read(const io::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline Shape3 read_shape(const io::json& j) {
  const auto a = j.get<std::array<int, 3>>();
  return {a[0], a[1], a[2]};
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

}  // namespace detail

/// Parses a config document. Relative paths are resolved against `base_dir`.
inline PipelineConfig parse_config(const io::json& j, const fs::path& base_dir = ".") {
  using detail::check_keys;
  using detail::read;
  PipelineConfig c;
  try {
    check_keys(j, "", {"seed", "paths", "schedule", "unet", "remodel", "training", "augmentation", "phantom", "evaluate"});
    read(j, "seed", c.seed);

    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      check_keys(p, "paths", {"image", "labels", "mito", "out_dir", "library", "checkpoint", "pairs", "gt", "pred",
                              "real_features", "gen_features", "real_images", "gen_images"});
      auto path = [&](const char* key, fs::path& out) {
        if (p.contains(key)) out = detail::resolve(base_dir, p.at(key).get<std::string>());
      };
      auto list = [&](const char* key, std::vector<fs::path>& out) {
        if (!p.contains(key)) return;
        for (const auto& s : p.at(key).get<std::vector<std::string>>()) out.push_back(detail::resolve(base_dir, s));
      };
      path("image", c.paths.image);
      path("labels", c.paths.labels);
      path("mito", c.paths.mito);
      c.paths.out_dir = base_dir / c.paths.out_dir;
      path("out_dir", c.paths.out_dir);
      path("library", c.paths.library);
      path("checkpoint", c.paths.checkpoint);
      path("pairs", c.paths.pairs);
      path("gt", c.paths.gt);
      path("pred", c.paths.pred);
      path("real_features", c.paths.real_features);
      path("gen_features", c.paths.gen_features);
      list("real_images", c.paths.real_images);
      list("gen_images", c.paths.gen_images);
    } else {
      c.paths.out_dir = base_dir / c.paths.out_dir;
    }

    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      check_keys(s, "schedule", {"kind", "steps", "beta_start", "beta_end"});
      if (s.contains("kind")) c.schedule.kind = parse_schedule_kind(s.at("kind").get<std::string>());
      read(s, "steps", c.schedule.steps);
      read(s, "beta_start", c.schedule.beta_start);
      read(s, "beta_end", c.schedule.beta_end);
    }

    if (j.contains("unet")) {
      const auto& u = j.at("unet");
      check_keys(u, "unet", {"levels", "base_channels", "down_factor", "cond_embed_channels", "cond_embed_downsample",
                             "rgm_state_dim", "learned_variance", "bidirectional_scan"});
      read(u, "levels", c.unet.levels);
      read(u, "base_channels", c.unet.base_channels);
      read(u, "down_factor", c.unet.down_factor);
      read(u, "cond_embed_channels", c.unet.cond_embed_channels);
      read(u, "cond_embed_downsample", c.unet.cond_embed_downsample);
      read(u, "rgm_state_dim", c.unet.rgm_state_dim);
      read(u, "learned_variance", c.unet.learned_variance);
      read(u, "bidirectional_scan", c.unet.bidirectional_scan);
    }

    if (j.contains("remodel")) {
      const auto& r = j.at("remodel");
      check_keys(r, "remodel", {"elastic_alpha", "elastic_sigma", "top_volume_fraction", "axis_ratio_range", "margin",
                                "max_attempts", "mito_target"});
      read(r, "elastic_alpha", c.remodel.elastic_alpha);
      read(r, "elastic_sigma", c.remodel.elastic_sigma);
      read(r, "top_volume_fraction", c.remodel.top_volume_fraction);
      read(r, "axis_ratio_range", c.remodel.axis_ratio_range);
      read(r, "margin", c.remodel.margin);
      read(r, "max_attempts", c.remodel.max_attempts);
      read(r, "mito_target", c.remodel.mito_target);
    }

    if (j.contains("training")) {
      const auto& t = j.at("training");
      check_keys(t, "training", {"iterations", "learning_rate", "batch_size", "patch_shape", "seed", "checkpoint_every",
                                 "lambda_vlb", "grad_clip", "fixed_sample"});
      read(t, "iterations", c.training.iterations);
      read(t, "learning_rate", c.training.learning_rate);
      read(t, "batch_size", c.training.batch_size);
      if (t.contains("patch_shape")) c.training.patch_shape = detail::read_shape(t.at("patch_shape"));
      read(t, "seed", c.training.seed);
      read(t, "checkpoint_every", c.training.checkpoint_every);
      read(t, "lambda_vlb", c.training.lambda_vlb);
      read(t, "grad_clip", c.training.grad_clip);
      read(t, "fixed_sample", c.training.fixed_sample);
    }

    if (j.contains("augmentation")) {
      const auto& a = j.at("augmentation");
      check_keys(a, "augmentation", {"ratio", "pairs"});
      read(a, "ratio", c.augmentation.ratio);
      read(a, "pairs", c.augmentation.pairs);
    }

    if (j.contains("phantom")) {
      const auto& p = j.at("phantom");
      check_keys(p, "phantom", {"shape", "cell_spacing", "mito_count", "noise_sigma"});
      if (p.contains("shape")) c.phantom.shape = detail::read_shape(p.at("shape"));
      read(p, "cell_spacing", c.phantom.params.cell_spacing);
      read(p, "mito_count", c.phantom.params.mito_count);
      read(p, "noise_sigma", c.phantom.params.noise_sigma);
    }

    if (j.contains("evaluate")) {
      const auto& e = j.at("evaluate");
      check_keys(e, "evaluate", {"ignore_zero_gt"});
      read(e, "ignore_zero_gt", c.evaluate.ignore_zero_gt);
    }
  } catch (const io::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  io::json j;
  try {
    j = io::read_json(path);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  return parse_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

}  // namespace neuroforge
