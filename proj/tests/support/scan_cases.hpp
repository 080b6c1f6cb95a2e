#pragma once

#include <cmath>
#include <vector>

#include "neuroforge/nn/ssm.hpp"
#include "neuroforge/rng.hpp"

namespace neuroforge::testing {

/// Random scan inputs in the ranges the block produces: delta in
/// [1e-3, 0.5], A in [-N-1, -0.5].
template <typename T>
nn::ScanInputs<T> random_scan(int L, int C, int N, Rng& rng) {
  nn::ScanInputs<T> in;
  in.L = L;
  in.C = C;
  in.N = N;
  auto fill = [&](std::vector<T>& v, std::size_t n, double lo, double hi) {
    v.resize(n);
    for (auto& e : v) e = static_cast<T>(rng.uniform(lo, hi));
  };
  const auto lc = static_cast<std::size_t>(L) * C;
  const auto ln = static_cast<std::size_t>(L) * N;
  fill(in.x, lc, -1, 1);
  fill(in.delta, lc, 1e-3, 0.5);
  fill(in.A, static_cast<std::size_t>(C) * N, -(N + 1.0), -0.5);
  fill(in.B, ln, -1, 1);
  fill(in.Cm, ln, -1, 1);
  fill(in.dskip, static_cast<std::size_t>(C), -1, 1);
  return in;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace neuroforge::testing
