#pragma once

#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "neuroforge/diffusion.hpp"
#include "neuroforge/io.hpp"
#include "neuroforge/nn/unet.hpp"

namespace neuroforge {

inline constexpr const char* kCheckpointMagic = "NEUROFORGE-CKPT-1";

inline io::json unet_config_json(const nn::UNetConfig& c) {
  return {{"levels", c.levels},
          {"base_channels", c.base_channels},
          {"down_factor", c.down_factor},
          {"cond_embed_channels", c.cond_embed_channels},
          {"cond_embed_downsample", c.cond_embed_downsample},
          {"rgm_state_dim", c.rgm_state_dim},
          {"learned_variance", c.learned_variance},
          {"bidirectional_scan", c.bidirectional_scan}};
}

inline nn::UNetConfig unet_config_from_json(const io::json& j) {
  nn::UNetConfig c;
  c.levels = j.at("levels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.down_factor = j.at("down_factor").get<std::array<int, 3>>();
  c.cond_embed_channels = j.at("cond_embed_channels").get<int>();
  c.cond_embed_downsample = j.at("cond_embed_downsample").get<int>();
  c.rgm_state_dim = j.at("rgm_state_dim").get<int>();
  c.learned_variance = j.at("learned_variance").get<bool>();
  c.bidirectional_scan = j.at("bidirectional_scan").get<bool>();
  return c;
}

inline io::json schedule_json(const DiffusionSchedule& s) {
  return {{"kind", schedule_kind_name(s.kind())},
          {"steps", s.steps()},
          {"beta_start", s.beta_start()},
          {"beta_end", s.beta_end()}};
}

inline DiffusionSchedule schedule_from_json(const io::json& j) {
  return DiffusionSchedule::make(j.at("steps").get<int>(), parse_schedule_kind(j.at("kind").get<std::string>()),
                                 j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

/// Everything needed to sample from a trained model.
struct Checkpoint {
  std::unique_ptr<nn::UNet<float>> model;
  DiffusionSchedule schedule;
  double intensity_lo = 0.0, intensity_hi = 1.0;
  long iteration = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, nn::UNet<float>& model, const DiffusionSchedule& sched,
                            double lo, double hi, long iteration) {
  io::json params = io::json::array();
  std::vector<char> payload;
  for (const auto& p : model.params()) {
    params.push_back({{"name", p.name}, {"shape", p.shape}, {"dtype", "f32"}});
    const auto* b = reinterpret_cast<const char*>(p.value.data());
    payload.insert(payload.end(), b, b + p.count() * sizeof(float));
  }
  const io::json desc = {{"unet", unet_config_json(model.config())},
                         {"schedule", schedule_json(sched)},
                         {"intensity_range", {lo, hi}},
                         {"iteration", iteration},
                         {"params", params}};
  io::write_framed(path, kCheckpointMagic, desc, payload);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto f = io::read_framed(path, kCheckpointMagic);
  Checkpoint ck;
  try {
    const auto& d = f.descriptor;
    ck.schedule = schedule_from_json(d.at("schedule"));
    const auto range = d.at("intensity_range").get<std::array<double, 2>>();
    ck.intensity_lo = range[0];
    ck.intensity_hi = range[1];
    ck.iteration = d.at("iteration").get<long>();
    ck.model = std::make_unique<nn::UNet<float>>(unet_config_from_json(d.at("unet")), 0);
    auto& store = ck.model->params();
    const auto& list = d.at("params");
    if (list.size() != store.size())
      throw DataError(path.string() + ": parameter count " + std::to_string(list.size()) +
                      " does not match architecture (" + std::to_string(store.size()) + ")");
    std::size_t off = 0;
    for (const auto& e : list) {
      const auto name = e.at("name").get<std::string>();
      if (!store.contains(name)) throw DataError(path.string() + ": unknown parameter '" + name + "'");
      auto& p = store[store.id(name)];
      if (e.at("shape").get<std::vector<int>>() != p.shape || e.at("dtype").get<std::string>() != "f32")
        throw DataError(path.string() + ": shape or dtype mismatch for '" + name + "'");
      const std::size_t n = p.count() * sizeof(float);
      if (off + n > f.payload.size()) throw DataError(path.string() + ": truncated payload");
      std::memcpy(p.value.data(), f.payload.data() + off, n);
      off += n;
    }
    if (off != f.payload.size()) throw DataError(path.string() + ": trailing payload bytes");
  } catch (const io::json::exception& e) {
    throw DataError(path.string() + ": malformed checkpoint descriptor: " + e.what());
  } catch (const UsageError& e) {
    throw DataError(path.string() + ": invalid checkpoint: " + e.what());
  }
  return ck;
}

}  // namespace neuroforge
