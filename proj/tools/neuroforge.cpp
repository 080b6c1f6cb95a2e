#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "neuroforge/pipeline.hpp"

namespace nf = neuroforge;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

void apply_thread_cap() {
  const char* env = std::getenv("NEUROFORGE_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end || n < 1) throw nf::UsageError(std::string("NEUROFORGE_THREADS must be a positive integer, got '") + env + "'");
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#endif
  Eigen::setNbThreads(static_cast<int>(n));
}

int run(const std::string& cmd, nf::PipelineConfig& cfg) {
  if (cmd == "phantom") {
    const auto o = nf::cmd_phantom(cfg);
    std::printf("phantom %s written to %s\n", cfg.phantom.shape.str().c_str(), o.image.parent_path().string().c_str());
  } else if (cmd == "build-signatures") {
    const auto s = nf::cmd_build_signatures(cfg);
    std::printf("signatures: %zu (volume min %zu, mean %.1f, max %zu) -> %s\n", s.count, s.min_volume, s.mean_volume,
                s.max_volume, s.path.string().c_str());
  } else if (cmd == "train") {
    const auto s = nf::cmd_train(cfg);
    if (s.losses.empty()) {
      std::printf("0 iterations; initial checkpoint -> %s\n", s.checkpoint.string().c_str());
    } else {
      std::printf("%zu iterations, loss %.6g -> %.6g; checkpoint -> %s\n", s.losses.size(), s.losses.front(),
                  s.losses.back(), s.checkpoint.string().c_str());
    }
  } else if (cmd == "remodel") {
    const auto s = nf::cmd_remodel(cfg);
    for (std::size_t i = 0; i < s.pairs.size(); ++i) {
      const auto& r = s.pairs[i].report;
      std::printf("pair %zu: requested %d placed %d attempts %ld\n", i, r.requested, r.placed, r.attempts);
    }
    std::printf("report: requested %d placed %d attempts %ld -> %s\n", s.requested, s.placed, s.attempts,
                s.index.string().c_str());
  } else if (cmd == "synthesize") {
    const auto s = nf::cmd_synthesize(cfg);
    std::printf("%zu volumes synthesized; manifest -> %s\n", s.images.size(), s.manifest.string().c_str());
  } else if (cmd == "evaluate") {
    nf::io::json r;
    const auto path = nf::cmd_evaluate(cfg, &r);
    std::printf("%s\n", r.dump(2).c_str());
    std::printf("report -> %s\n", path.string().c_str());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NEUROFORGE: diffusion-based augmentation for EM neuron segmentation"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  for (const char* name : {"phantom", "build-signatures", "train", "remodel", "synthesize", "evaluate"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "pipeline configuration (JSON)")->required();
    sub->add_option("--seed", seed, "overrides the configured seeds");
    sub->add_option("--out", out_dir, "overrides paths.out_dir");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  const auto* sub = app.get_subcommands().front();

  try {
    apply_thread_cap();
    auto cfg = nf::load_config(config_path);
    if (sub->count("--seed")) {
      cfg.seed = seed;
      cfg.training.seed = seed;
    }
    if (sub->count("--out")) cfg.paths.out_dir = out_dir;
    std::filesystem::create_directories(cfg.paths.out_dir);
    return run(cmd, cfg);
  } catch (const nf::UsageError& e) {
    std::fprintf(stderr, "neuroforge %s: usage error: %s\n", cmd.c_str(), e.what());
    return kUsage;
  } catch (const nf::NumericalError& e) {
    std::fprintf(stderr, "neuroforge %s: numerical failure: %s\n", cmd.c_str(), e.what());
    return kNumerical;
  } catch (const nf::DataError& e) {
    std::fprintf(stderr, "neuroforge %s: data error: %s\n", cmd.c_str(), e.what());
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "neuroforge %s: data error: %s\n", cmd.c_str(), e.what());
    return kData;
  } catch (const nf::io::json::exception& e) {
    std::fprintf(stderr, "neuroforge %s: data error: %s\n", cmd.c_str(), e.what());
    return kData;
  }
}
