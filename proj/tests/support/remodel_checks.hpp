#pragma once

// Brute-force checks of the remodeling contracts on one seeded phantom.

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "neuroforge/morphology.hpp"
#include "neuroforge/phantom.hpp"
#include "neuroforge/remodel.hpp"

namespace neuroforge::testing {

struct RemodelCheck {
  std::vector<std::string> violations;
  int placed = 0;
  bool ok() const { return violations.empty(); }
};

inline bool is_binary(const BinaryGrid& g) {
  for (auto v : g.data())
    if (v > 1) return false;
  return true;
}

/// True if some voxel of `mask` in slice z lies within Chebyshev radius r of (y, x).
inline bool near_in_slice(const BinaryGrid& mask, int z, int y, int x, int r) {
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (mask.contains(z, y + dy, x + dx) && mask(z, y + dy, x + dx)) return true;
  return false;
}

inline RemodelCheck check_remodel_on_phantom(std::uint64_t seed, const RemodelConfig& cfg,
                                             Shape3 shape = {8, 64, 64}) {
  RemodelCheck out;
  auto fail = [&](const std::string& s) { out.violations.push_back("seed " + std::to_string(seed) + ": " + s); };
  const auto ph = make_phantom(seed, shape);
  const auto cond = make_condition(ph.neurons, ph.mito);
  const auto lib = build_signature_library(ph.mito);

  // Deformation alone.
  Rng r1(seed);
  const auto [dcond, dlabels] = selective_elastic_deform(cond, ph.neurons, cfg, r1);
  if (!(dcond.mito == cond.mito)) fail("mito channel changed by deformation");
  if (!is_binary(dcond.boundary)) fail("deformed boundary not binary");
  const int band = static_cast<int>(std::ceil(cfg.elastic_alpha)) + 1;
  const auto s = shape;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (dcond.boundary(z, y, x) != cond.boundary(z, y, x) && !near_in_slice(cond.boundary, z, y, x, band))
          fail("boundary change outside displacement band");

  // Full remodel, twice.
  Rng r2(seed), r3(seed);
  const auto a = remodel(cond, ph.neurons, lib, cfg, r2);
  const auto b = remodel(cond, ph.neurons, lib, cfg, r3);
  if (!(a.cond.boundary == b.cond.boundary) || !(a.cond.mito == b.cond.mito) || !(a.labels == b.labels))
    fail("same seed gave different outputs");
  if (!is_binary(a.cond.boundary) || !is_binary(a.cond.mito)) fail("output condition not binary");
  const std::set<std::uint32_t> ids_in(ph.neurons.data().begin(), ph.neurons.data().end());
  for (auto v : a.labels.data())
    if (!ids_in.count(v)) {
      fail("output label id " + std::to_string(v) + " not in input");
      break;
    }
  for (auto n : a.report.attempts_per_request)
    if (n > cfg.max_attempts) fail("attempt budget exceeded");

  // Newly placed mitochondria.
  BinaryGrid added(s, 0);
  for (std::size_t i = 0; i < added.size(); ++i) {
    if (cond.mito[i] && !a.cond.mito[i]) fail("existing mitochondrion removed");
    added[i] = a.cond.mito[i] && !dcond.mito[i] ? 1 : 0;
  }
  LabelVolume comp;
  connected_components(added, comp, Connectivity::Full26);
  std::vector<std::array<int, 3>> membrane;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (a.cond.boundary(z, y, x)) membrane.push_back({z, y, x});
  std::map<std::uint32_t, std::set<std::uint32_t>> hosts;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (!added(z, y, x)) continue;
        hosts[comp(z, y, x)].insert(a.labels(z, y, x));
        for (const auto& m : membrane) {
          const int d = std::max({std::abs(m[0] - z), std::abs(m[1] - y), std::abs(m[2] - x)});
          if (d < cfg.margin) {
            fail("placed voxel closer than margin to a membrane");
            goto next_voxel;
          }
        }
      next_voxel:;
      }
  for (const auto& [c, h] : hosts)
    if (h.size() != 1 || h.count(0)) fail("placed mitochondrion spans " + std::to_string(h.size()) + " instances");
  out.placed = a.report.placed;
  return out;
}

}  // namespace neuroforge::testing
