#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <vector>

#include "neuroforge/errors.hpp"
#include "neuroforge/rng.hpp"
#include "neuroforge/volume.hpp"

namespace neuroforge {

/// Synthetic EM-like volume with its neuron and mitochondrion instances.
struct Phantom {
  Volume image;
  LabelVolume neurons;
  LabelVolume mito;
};

struct PhantomConfig {
  /// Mean lateral cell spacing in voxels.
  double cell_spacing = 20.0;
  int mito_count = 4;
  double membrane_intensity = 0.2;
  double cytoplasm_intensity = 0.65;
  double mito_intensity = 0.4;
  double noise_sigma = 0.04;
  Resolution resolution{29.0, 6.0};
};

/// Seeded Voronoi-like neuron partition whose cell centres drift slowly with
/// depth, dark membranes along lateral label interfaces, and a few ellipsoidal
/// mitochondria in the largest cells.
inline Phantom make_phantom(std::uint64_t seed, Shape3 s, const PhantomConfig& cfg = {}) {
  if (s.d < 4 || s.h < 32 || s.w < 32) throw UsageError("phantom shape must be at least 4x32x32, got " + s.str());
  Rng rng(seed);
  const int n = std::max(4, static_cast<int>(std::lround(s.h * s.w / (cfg.cell_spacing * cfg.cell_spacing))));
  struct Seed {
    double y, x, vy, vx;
  };
  std::vector<Seed> seeds;
  for (int i = 0; i < n; ++i)
    seeds.push_back({rng.uniform(0, s.h), rng.uniform(0, s.w), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)});

  Phantom p{Volume(s, 0.f, cfg.resolution), LabelVolume(s, 0u, cfg.resolution), LabelVolume(s, 0u, cfg.resolution)};
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        double best = 1e300;
        std::uint32_t id = 0;
        for (int i = 0; i < n; ++i) {
          const double dy = y - (seeds[i].y + seeds[i].vy * z), dx = x - (seeds[i].x + seeds[i].vx * z);
          const double d = dy * dy + dx * dx;
          if (d < best) {
            best = d;
            id = static_cast<std::uint32_t>(i + 1);
          }
        }
        p.neurons(z, y, x) = id;
      }
  const auto membrane = extract_boundaries(p.neurons, BoundaryMode::LateralOnly);

  // Mitochondria: ellipsoids at random interior points of the largest cells,
  // shrunk until they sit strictly inside the cell and off the membrane.
  std::map<std::uint32_t, std::size_t> vols;
  for (auto id : p.neurons.data()) ++vols[id];
  std::vector<std::pair<std::size_t, std::uint32_t>> order;
  for (const auto& [id, v] : vols) order.push_back({v, id});
  std::sort(order.begin(), order.end(), std::greater<>());
  std::uint32_t next = 0;
  const int zc = s.d / 2;
  for (std::size_t k = 0; k < order.size() && static_cast<int>(next) < cfg.mito_count; ++k) {
    const auto id = order[k].second;
    std::vector<std::array<int, 2>> interior;
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x)
        if (p.neurons(zc, y, x) == id && !membrane(zc, y, x)) interior.push_back({y, x});
    if (interior.empty()) continue;
    const auto centre = interior[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(interior.size()) - 1))];
    const double cy = centre[0], cx = centre[1];
    const double theta = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
    double a = rng.uniform(4.0, 6.5), b = rng.uniform(2.0, 3.0);
    const double c = rng.uniform(1.0, std::max(1.0, s.d / 4.0));
    for (; a >= 2.0; a *= 0.8, b = std::max(1.5, b * 0.9)) {
      std::vector<std::array<int, 3>> vox;
      bool inside = true;
      for (int z = 0; z < s.d && inside; ++z)
        for (int y = 0; y < s.h && inside; ++y)
          for (int x = 0; x < s.w && inside; ++x) {
            const double dx = x - cx, dy = y - cy, dz = (z - zc) / c;
            const double u = dx * std::cos(theta) + dy * std::sin(theta);
            const double v = -dx * std::sin(theta) + dy * std::cos(theta);
            if (u * u / (a * a) + v * v / (b * b) + dz * dz > 1.0) continue;
            if (p.neurons(z, y, x) != id || membrane(z, y, x)) inside = false;
            vox.push_back({z, y, x});
          }
      if (inside && vox.size() >= 6) {
        ++next;
        for (const auto& q : vox) p.mito(q[0], q[1], q[2]) = next;
        break;
      }
    }
  }

  std::map<std::uint32_t, double> offset;
  for (const auto& [id, v] : vols) offset[id] = rng.uniform(-0.05, 0.05);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        double v = cfg.cytoplasm_intensity + offset[p.neurons(z, y, x)];
        if (p.mito(z, y, x)) v = cfg.mito_intensity;
        if (membrane(z, y, x)) v = cfg.membrane_intensity;
        v += cfg.noise_sigma * rng.normal();
        p.image(z, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return p;
}

}  // namespace neuroforge
