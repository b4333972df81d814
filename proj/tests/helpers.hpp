#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "medicat/random.hpp"
#include "medicat/tensor.hpp"

namespace testutil {

inline std::vector<double> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  medicat::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

inline medicat::Tensor<double> rand_tensor(medicat::Shape shape, std::uint64_t seed, bool grad = false,
                                           double scale = 1.0) {
  const auto n = medicat::shape_numel(shape);
  return medicat::Tensor<double>::from(std::move(shape), randn(n, seed, scale), grad);
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename A, typename B>
bool bitwise_equal(const A& a, const B& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh empty directory under the working directory.
inline std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::current_path() / "scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
