#include "medicat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "medicat/objectives.hpp"
#include "medicat/random.hpp"
#include "medicat/vit.hpp"

namespace medicat {

template <typename Real>
double gradcheck_error(const ScalarFn<Real>& f, const std::vector<Tensor<Real>>& inputs, double step) {
  for (auto t : inputs) t.zero_grad();
  backward(f(inputs), std::span<const Tensor<Real>>(inputs));

  double worst = 0.0;
  for (auto t : inputs) {
    const std::vector<Real> analytic(t.grad().begin(), t.grad().end());
    auto x = t.mutable_values();
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Real orig = x[i];
      x[i] = orig + static_cast<Real>(step);
      const double up = static_cast<double>(f(inputs).item());
      x[i] = orig - static_cast<Real>(step);
      const double down = static_cast<double>(f(inputs).item());
      x[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = static_cast<double>(analytic[i]);
      diff = std::max(diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
    if (scale > 0.0) worst = std::max(worst, diff / scale);
  }
  return worst;
}

template <typename Real>
Tensor<Real> weighted_sum(const Tensor<Real>& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> w(y.numel());
  for (auto& v : w) v = static_cast<Real>(rng.normal());
  return sum(mul(y, Tensor<Real>::from(y.shape(), std::move(w))));
}

namespace {

using T = Tensor<double>;
using Inputs = std::vector<T>;

T randn(Rng& rng, Shape shape, double scale = 1.0, double shift = 0.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = shift + scale * rng.normal();
  return T::from(std::move(shape), std::move(v), true);
}

std::vector<int> random_labels(Rng& rng, std::size_t n, std::size_t classes) {
  std::vector<int> out(n);
  for (auto& l : out) l = static_cast<int>(rng.below(classes));
  return out;
}

// Builds the inputs and the scalar function for one seed.
using Case = std::function<std::pair<Inputs, ScalarFn<double>>(Rng&)>;

struct Suite {
  std::string name;
  Case make;
};

std::vector<Suite> suite() {
  std::vector<Suite> s;

  s.push_back({"matmul", [](Rng& r) {
                 const auto ws = r.next_u64();
                 return std::pair{Inputs{randn(r, {3, 4}), randn(r, {4, 5})},
                                  ScalarFn<double>([ws](const Inputs& x) { return weighted_sum(matmul(x[0], x[1]), ws); })};
               }});
  s.push_back({"elementwise", [](Rng& r) {
                 const auto ws = r.next_u64();
                 return std::pair{Inputs{randn(r, {4, 3}), randn(r, {4, 3}), randn(r, {3})},
                                  ScalarFn<double>([ws](const Inputs& x) {
                                    auto y = mul(add(x[0], x[1]), sub(x[0], scale(x[1], 0.7)));
                                    return weighted_sum(add_bias(y, x[2]), ws);
                                  })};
               }});
  s.push_back({"softmax", [](Rng& r) {
                 const auto ws = r.next_u64();
                 return std::pair{Inputs{randn(r, {4, 6}, 2.0)}, ScalarFn<double>([ws](const Inputs& x) {
                                    return add(weighted_sum(softmax(x[0], -1), ws), weighted_sum(softmax(x[0], 0), ws + 1));
                                  })};
               }});
  s.push_back({"layer_norm", [](Rng& r) {
                 const auto ws = r.next_u64();
                 return std::pair{Inputs{randn(r, {5, 8}, 1.5, 0.3), randn(r, {8}, 0.2, 1.0), randn(r, {8}, 0.2)},
                                  ScalarFn<double>([ws](const Inputs& x) { return weighted_sum(layer_norm(x[0], x[1], x[2]), ws); })};
               }});
  s.push_back({"gelu", [](Rng& r) {
                 const auto ws = r.next_u64();
                 return std::pair{Inputs{randn(r, {4, 5}, 2.0)},
                                  ScalarFn<double>([ws](const Inputs& x) { return weighted_sum(gelu(x[0]), ws); })};
               }});
  s.push_back({"mean", [](Rng& r) {
                 const auto ws = r.next_u64();
                 return std::pair{Inputs{randn(r, {3, 4, 5})}, ScalarFn<double>([ws](const Inputs& x) {
                                    return add(add(weighted_sum(mean(x[0], 1), ws), weighted_sum(mean(x[0], 0), ws + 1)),
                                               weighted_sum(mean(x[0], -1), ws + 2));
                                  })};
               }});
  s.push_back({"indexing", [](Rng& r) {
                 const auto ws = r.next_u64();
                 return std::pair{Inputs{randn(r, {3, 4}), randn(r, {2, 4})}, ScalarFn<double>([ws](const Inputs& x) {
                                    auto c = concat_rows(x[0], x[1]);
                                    auto g = gather_rows(c, {4, 0, 0, 2});
                                    return weighted_sum(reshape(transpose(g), {2, 8}), ws);
                                  })};
               }});
  s.push_back({"self_attention", [](Rng& r) {
                 const auto ws = r.next_u64();
                 // batch 2, 3 tokens, 2 heads of width 2
                 return std::pair{Inputs{randn(r, {6, 12})},
                                  ScalarFn<double>([ws](const Inputs& x) { return weighted_sum(self_attention(x[0], 2, 3, 2), ws); })};
               }});
  s.push_back({"patchify", [](Rng& r) {
                 const auto ws = r.next_u64();
                 ViTConfig cfg;
                 cfg.image_side = 4;
                 cfg.patch_side = 2;
                 cfg.channels = 2;
                 return std::pair{Inputs{randn(r, {2, 2, 4, 4})},
                                  ScalarFn<double>([ws, cfg](const Inputs& x) { return weighted_sum(patchify(x[0], cfg), ws); })};
               }});
  s.push_back({"cross_entropy", [](Rng& r) {
                 auto labels = random_labels(r, 5, 4);
                 return std::pair{Inputs{randn(r, {5, 4}, 2.0)},
                                  ScalarFn<double>([labels](const Inputs& x) { return cross_entropy(x[0], labels); })};
               }});
  s.push_back({"cross_correlation", [](Rng& r) {
                 const auto ws = r.next_u64();
                 return std::pair{Inputs{randn(r, {6, 4}), randn(r, {6, 4})}, ScalarFn<double>([ws](const Inputs& x) {
                                    return weighted_sum(cross_correlation<double>({x[0], x[1]}), ws);
                                  })};
               }});
  s.push_back({"barlow_twins_loss", [](Rng& r) {
                 ContrastiveConfig cfg;
                 cfg.lambda = r.uniform(0.005, 0.5);
                 return std::pair{Inputs{randn(r, {6, 4}), randn(r, {6, 4})},
                                  ScalarFn<double>([cfg](const Inputs& x) { return barlow_twins_loss<double>({x[0], x[1]}, cfg); })};
               }});
  s.push_back({"barlow_twins_loss/printed", [](Rng& r) {
                 ContrastiveConfig cfg;
                 cfg.lambda = r.uniform(0.005, 0.5);
                 cfg.variant = CorrelationVariant::printed_diagonal;
                 return std::pair{Inputs{randn(r, {6, 4}), randn(r, {6, 4})},
                                  ScalarFn<double>([cfg](const Inputs& x) { return barlow_twins_loss<double>({x[0], x[1]}, cfg); })};
               }});
  s.push_back({"combined_loss", [](Rng& r) {
                 const double alpha = r.uniform();
                 return std::pair{Inputs{randn(r, {1}), randn(r, {1}), randn(r, {1})},
                                  ScalarFn<double>([alpha](const Inputs& x) { return combined_loss(x[0], x[1], x[2], alpha); })};
               }});
  s.push_back({"encoder", [](Rng& r) {
                 ViTConfig cfg;
                 cfg.image_side = 8;
                 cfg.patch_side = 4;
                 cfg.hidden_dim = 8;
                 cfg.num_heads = 2;
                 cfg.num_layers = 2;
                 cfg.num_classes = 3;
                 auto model = std::make_shared<VisionTransformer<double>>(cfg, r.next_u64());
                 Inputs inputs;
                 // Re-draw weights well away from the near-linear init regime.
                 for (auto& p : model->parameters()) {
                   const bool gain = p.name.ends_with("gamma");
                   for (auto& v : p.tensor.mutable_values()) v = (gain ? 1.0 : 0.0) + 0.3 * r.normal();
                   inputs.push_back(p.tensor);
                 }
                 inputs.push_back(randn(r, {2, 1, 8, 8}));
                 const auto labels = random_labels(r, 2, 3);
                 const auto ws = r.next_u64();
                 return std::pair{inputs, ScalarFn<double>([model, labels, ws](const Inputs& x) {
                                    const auto enc = model->encode(x.back());
                                    return add(cross_entropy(enc.logits, labels),
                                               weighted_sum(mean_pool_patches(enc.patch_embeddings), ws));
                                  })};
               }});
  return s;
}

}  // namespace

std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckOptions& opts) {
  std::vector<GradcheckReport> out;
  for (const auto& test : suite()) {
    GradcheckReport rep{test.name, 0.0, opts.seeds, true};
    for (std::size_t s = 0; s < opts.seeds; ++s) {
      Rng rng(derive_seed(0x6a09e667f3bcc908ULL, s));
      auto [inputs, f] = test.make(rng);
      rep.max_error = std::max(rep.max_error, gradcheck_error(f, inputs, opts.step));
    }
    rep.passed = rep.max_error <= opts.tolerance;
    out.push_back(rep);
  }
  return out;
}

std::string format_gradcheck(const std::vector<GradcheckReport>& reports) {
  std::string out;
  char buf[160];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-26s max rel err %.3e over %zu seeds  %s\n", r.op.c_str(), r.max_error,
                  r.seeds, r.passed ? "ok" : "FAIL");
    out += buf;
  }
  return out;
}

template double gradcheck_error<float>(const ScalarFn<float>&, const std::vector<Tensor<float>>&, double);
template double gradcheck_error<double>(const ScalarFn<double>&, const std::vector<Tensor<double>>&, double);
template Tensor<float> weighted_sum<float>(const Tensor<float>&, std::uint64_t);
template Tensor<double> weighted_sum<double>(const Tensor<double>&, std::uint64_t);

}  // namespace medicat
