#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "neuroforge/checkpoint.hpp"
#include "neuroforge/config.hpp"
#include "neuroforge/diffusion.hpp"
#include "neuroforge/io.hpp"
#include "neuroforge/metrics.hpp"
#include "neuroforge/nn/unet.hpp"
#include "neuroforge/phantom.hpp"
#include "neuroforge/remodel.hpp"

// The six pipeline commands. Each reads its inputs from the config, writes its
// artifacts under paths.out_dir and returns a summary; the CLI only prints.

namespace neuroforge {

// Stream indices for seeds derived per command.
inline constexpr std::uint64_t kTrainDataStream = 1;
inline constexpr std::uint64_t kSynthStreamBase = 1ull << 32;

// ---------------------------------------------------------------------------
// phantom

struct PhantomOutputs {
  fs::path image, neurons, mito;
};

inline PhantomOutputs cmd_phantom(const PipelineConfig& cfg) {
  const auto ph = make_phantom(cfg.seed, cfg.phantom.shape, cfg.phantom.params);
  const auto& d = cfg.paths.out_dir;
  PhantomOutputs out{d / "image", d / "neurons", d / "mito"};
  io::save_volume(out.image, ph.image);
  io::save_volume(out.neurons, ph.neurons);
  io::save_volume(out.mito, ph.mito);
  return out;
}

// ---------------------------------------------------------------------------
// build-signatures

struct LibrarySummary {
  fs::path path;
  std::size_t count = 0;
  std::size_t min_volume = 0, max_volume = 0;
  double mean_volume = 0.0;
};

inline LibrarySummary cmd_build_signatures(const PipelineConfig& cfg) {
  const auto mito = io::load_labels(cfg.mito_path());
  const auto lib = build_signature_library(mito, io::container_base(cfg.mito_path()).filename().string());
  LibrarySummary s{cfg.paths.library.empty() ? cfg.paths.out_dir / "signatures.siglib" : cfg.paths.library};
  save_signature_library(s.path, lib);
  s.count = lib.size();
  s.min_volume = std::numeric_limits<std::size_t>::max();
  for (const auto& sig : lib) {
    s.min_volume = std::min(s.min_volume, sig.volume);
    s.max_volume = std::max(s.max_volume, sig.volume);
    s.mean_volume += static_cast<double>(sig.volume) / static_cast<double>(lib.size());
  }
  return s;
}

// ---------------------------------------------------------------------------
// train

/// Training data: normalized intensities and the matching condition.
struct TrainingData {
  Volume x0;
  ConditionVolume cond;
  double lo = 0.0, hi = 1.0;
};

inline TrainingData load_training_data(const PipelineConfig& cfg) {
  const auto image = io::load_as<float>(cfg.image_path());
  const auto neurons = io::load_labels(cfg.labels_path());
  const auto mito = io::load_labels(cfg.mito_path());
  if (!(image.shape() == neurons.shape()))
    throw DataError("image " + image.shape().str() + " and labels " + neurons.shape().str() + " differ in shape");
  const auto [mn, mx] = std::minmax_element(image.data().begin(), image.data().end());
  if (!(*mx > *mn)) throw DataError("training image has constant intensity");
  TrainingData d;
  d.lo = *mn;
  d.hi = *mx;
  d.x0 = normalize_intensity(image, d.lo, d.hi);
  d.cond = make_condition(neurons, mito);
  return d;
}

/// Adam on uniformly drawn crops. Returns the per-iteration loss series.
/// `on_iteration(it, loss)` runs after each optimizer step.
inline std::vector<double> train_model(nn::UNet<float>& net, const TrainingData& data, const DiffusionSchedule& sched,
                                       const TrainingConfig& tc,
                                       const std::function<void(long, double)>& on_iteration = {}) {
  const auto s = data.x0.shape();
  const auto p = tc.patch_shape;
  if (p.d > s.d || p.h > s.h || p.w > s.w)
    throw DataError("patch " + p.str() + " larger than training volume " + s.str());
  net.config().check_input(p);
  Rng rng = Rng::derive(tc.seed, kTrainDataStream);
  auto draw_origin = [&] {
    return std::array<int, 3>{static_cast<int>(rng.uniform_int(0, s.d - p.d)),
                              static_cast<int>(rng.uniform_int(0, s.h - p.h)),
                              static_cast<int>(rng.uniform_int(0, s.w - p.w))};
  };

  struct Sample {
    Volume x0;
    ConditionVolume c;
    int t;
    Volume eps;
  };
  std::optional<Sample> fixed;
  if (tc.fixed_sample) {
    const auto o = draw_origin();
    const int t = static_cast<int>(rng.uniform_int(1, sched.steps()));
    auto eps = gaussian_grid<float>(p, rng);
    fixed = Sample{crop(data.x0, o, p), crop(data.cond, o, p), t, std::move(eps)};
  }

  nn::Adam<float> opt(tc.learning_rate);
  net.set_training(true);
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(tc.iterations));
  for (long it = 1; it <= tc.iterations; ++it) {
    net.params().zero_grad();
    double total = 0.0;
    for (int b = 0; b < tc.batch_size; ++b) {
      if (fixed) {
        total += training_loss_at(net, fixed->x0, fixed->c, fixed->t, fixed->eps, sched, true, tc.lambda_vlb).loss;
      } else {
        const auto o = draw_origin();
        total += training_loss(net, crop(data.x0, o, p), crop(data.cond, o, p), rng, sched, true, tc.lambda_vlb).loss;
      }
    }
    if (tc.batch_size > 1)
      for (auto& prm : net.params())
        for (auto& g : prm.grad) g /= static_cast<float>(tc.batch_size);
    if (tc.grad_clip > 0.0) nn::clip_grad_norm(net.params(), tc.grad_clip);
    opt.step(net.params());
    losses.push_back(total / tc.batch_size);
    if (on_iteration) on_iteration(it, losses.back());
  }
  net.set_training(false);
  net.release();
  return losses;
}

struct TrainSummary {
  fs::path checkpoint, loss_log;
  std::vector<double> losses;
};

inline std::string format_loss_log(const std::vector<double>& losses) {
  std::string s;
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu %.17g\n", i + 1, losses[i]);
    s += buf;
  }
  return s;
}

inline TrainSummary cmd_train(const PipelineConfig& cfg) {
  const auto data = load_training_data(cfg);
  const auto sched = cfg.schedule.make();
  nn::UNet<float> net(cfg.unet, cfg.training.seed);
  const auto& d = cfg.paths.out_dir;
  const long every = cfg.training.checkpoint_every;
  TrainSummary out{cfg.paths.checkpoint.empty() ? d / "checkpoint.ckpt" : cfg.paths.checkpoint, d / "loss.log", {}};
  out.losses = train_model(net, data, sched, cfg.training, [&](long it, double) {
    if (every > 0 && it % every == 0 && it != cfg.training.iterations) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_%06ld.ckpt", it);
      save_checkpoint(d / name, net, sched, data.lo, data.hi, it);
    }
  });
  save_checkpoint(out.checkpoint, net, sched, data.lo, data.hi, cfg.training.iterations);
  io::write_text(out.loss_log, format_loss_log(out.losses));
  return out;
}

// ---------------------------------------------------------------------------
// remodel

struct RemodelPair {
  fs::path condition, labels;
  std::uint64_t seed = 0;
  PlacementReport report;
};

struct RemodelSummary {
  fs::path index;
  std::vector<RemodelPair> pairs;
  int requested = 0, placed = 0;
  long attempts = 0;
};

inline io::json report_json(const PlacementReport& r) {
  return {{"requested", r.requested},
          {"placed", r.placed},
          {"attempts", r.attempts},
          {"attempts_per_request", r.attempts_per_request}};
}

/// Writes augmentation.pairs remodeled (condition, labels) pairs. Pair i uses
/// the seed derived from (seed, i).
inline RemodelSummary cmd_remodel(const PipelineConfig& cfg) {
  const auto neurons = io::load_labels(cfg.labels_path());
  const auto mito = io::load_labels(cfg.mito_path());
  const auto cond = make_condition(neurons, mito);
  const auto library = load_signature_library(cfg.library_path());
  const auto index = cfg.pairs_path();
  const auto dir = index.parent_path();
  RemodelSummary s{index, {}, 0, 0, 0};
  io::json list = io::json::array();
  for (int i = 0; i < cfg.augmentation.pairs; ++i) {
    const auto seed = Rng::derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    Rng rng(seed);
    const auto r = remodel(cond, neurons, library, cfg.remodel, rng);
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair_%03d", i);
    RemodelPair p{dir / (std::string(stem) + "_condition"), dir / (std::string(stem) + "_labels"), seed, r.report};
    io::save_condition(p.condition, r.cond);
    io::save_volume(p.labels, r.labels);
    list.push_back({{"condition", p.condition.filename().string()},
                    {"labels", p.labels.filename().string()},
                    {"seed", seed},
                    {"report", report_json(r.report)}});
    s.requested += r.report.requested;
    s.placed += r.report.placed;
    s.attempts += r.report.attempts;
    s.pairs.push_back(std::move(p));
  }
  const io::json doc = {{"seed", cfg.seed},
                        {"pairs", list},
                        {"report", {{"requested", s.requested}, {"placed", s.placed}, {"attempts", s.attempts}}}};
  io::write_text(index, doc.dump(2) + "\n");
  return s;
}

// ---------------------------------------------------------------------------
// synthesize

struct SynthesisSummary {
  fs::path manifest;
  std::vector<fs::path> images;
  std::string checkpoint_hash;
};

inline void check_checkpoint_matches(const Checkpoint& ck, const PipelineConfig& cfg) {
  if (!(ck.model->config() == cfg.unet))
    throw DataError("checkpoint U-Net " + unet_config_json(ck.model->config()).dump() + " does not match config " +
                    unet_config_json(cfg.unet).dump());
  const auto want = cfg.schedule.make();
  if (schedule_json(ck.schedule) != schedule_json(want))
    throw DataError("checkpoint schedule " + schedule_json(ck.schedule).dump() + " does not match config " +
                    schedule_json(want).dump());
}

/// Samples one volume for a condition and maps it back to intensities.
inline Volume synthesize_volume(Checkpoint& ck, const ConditionVolume& c, std::uint64_t seed) {
  ck.model->config().check_input(c.shape());
  ck.model->set_training(false);
  Rng rng(seed);
  const auto x = sample<float>(c, *ck.model, ck.schedule, rng, c.boundary.resolution(), true);
  return denormalize_intensity(x, ck.intensity_lo, ck.intensity_hi);
}

inline SynthesisSummary cmd_synthesize(const PipelineConfig& cfg) {
  const auto ckpt_path = cfg.checkpoint_path();
  auto ck = load_checkpoint(ckpt_path);
  check_checkpoint_matches(ck, cfg);
  const auto index_path = cfg.pairs_path();
  const auto index = io::read_json(index_path);
  const auto src = index_path.parent_path();
  const auto dir = cfg.paths.out_dir / "synth";
  SynthesisSummary s{dir / "manifest.tsv", {}, io::file_hash(ckpt_path)};

  std::string manifest = "# image\tlabels\tseed\tcheckpoint\n";
  char line[64];
  std::snprintf(line, sizeof line, "# ratio %.6g\n", cfg.augmentation.ratio);
  manifest += line;
  try {
    const auto& pairs = index.at("pairs");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto cond = io::load_condition(src / pairs[i].at("condition").get<std::string>());
      const auto labels_path = src / pairs[i].at("labels").get<std::string>();
      const auto labels_shape = io::read_descriptor(labels_path).shape;
      if (!(labels_shape == cond.shape()))
        throw DataError(labels_path.string() + ": label shape " + labels_shape.str() + " differs from condition " +
                        cond.shape().str());
      const auto seed = Rng::derive_seed(cfg.seed, kSynthStreamBase + i);
      const auto img = synthesize_volume(ck, cond, seed);
      char stem[32];
      std::snprintf(stem, sizeof stem, "image_%03zu", i);
      const auto out = dir / stem;
      io::save_volume(out, img);
      s.images.push_back(out);
      const auto rel_labels = fs::relative(fs::absolute(labels_path), fs::absolute(dir));
      manifest += std::string(stem) + "\t" + rel_labels.generic_string() + "\t" + std::to_string(seed) + "\t" +
                  s.checkpoint_hash + "\n";
    }
  } catch (const io::json::exception& e) {
    throw DataError(index_path.string() + ": malformed pair index: " + e.what());
  }
  io::write_text(s.manifest, manifest);
  return s;
}

// ---------------------------------------------------------------------------
// evaluate

inline std::vector<std::vector<double>> features_of(const std::vector<fs::path>& images) {
  std::vector<std::vector<double>> all;
  for (const auto& p : images) {
    auto f = tile_features(io::load_as<float>(p));
    all.insert(all.end(), f.begin(), f.end());
  }
  return all;
}

/// Segmentation metrics when gt/pred are given; Frechet distance when feature
/// files or image lists are given. Fields absent from the inputs are omitted.
inline io::json evaluate_report(const PipelineConfig& cfg) {
  const auto& p = cfg.paths;
  io::json r = io::json::object();
  if (!p.gt.empty() || !p.pred.empty()) {
    if (p.gt.empty() || p.pred.empty()) throw UsageError("evaluate needs both paths.gt and paths.pred");
    const auto t = contingency(io::load_labels(p.gt), io::load_labels(p.pred), cfg.evaluate.ignore_zero_gt);
    const auto vi = variation_of_information(t);
    const auto ar = adapted_rand_error(t);
    r["vi_total"] = vi.total;
    r["vi_split"] = vi.split;
    r["vi_merge"] = vi.merge;
    r["arand"] = ar.error;
    r["precision"] = ar.precision;
    r["recall"] = ar.recall;
  }
  const bool files = !p.real_features.empty() || !p.gen_features.empty();
  const bool images = !p.real_images.empty() || !p.gen_images.empty();
  if (files && images) throw UsageError("evaluate takes either feature files or image lists, not both");
  if (files) {
    if (p.real_features.empty() || p.gen_features.empty())
      throw UsageError("evaluate needs both paths.real_features and paths.gen_features");
    r["frechet"] = frechet_distance(fit_gaussian(load_features(p.real_features)),
                                    fit_gaussian(load_features(p.gen_features)));
  } else if (images) {
    if (p.real_images.empty() || p.gen_images.empty())
      throw UsageError("evaluate needs both paths.real_images and paths.gen_images");
    r["frechet"] = frechet_distance(fit_gaussian(features_of(p.real_images)), fit_gaussian(features_of(p.gen_images)));
  }
  if (r.empty()) throw UsageError("evaluate: no inputs (set paths.gt/pred or feature/image paths)");
  return r;
}

inline fs::path cmd_evaluate(const PipelineConfig& cfg, io::json* report = nullptr) {
  const auto r = evaluate_report(cfg);
  const auto path = cfg.paths.out_dir / "evaluation.json";
  io::write_text(path, r.dump(2) + "\n");
  if (report) *report = r;
  return path;
}

}  // namespace neuroforge
