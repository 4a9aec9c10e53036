#include "dcap/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dcap/rng.hpp"

namespace dcap::nk {
namespace {

struct Probe {
  double loss;
  std::uint64_t signature;
};

Probe evaluate(const LossBuilder& build) {
  Graph<double> g;
  g.set_track_signature(true);
  Var loss = build(g);
  const Tensor<double>& v = g.value(loss);
  if (v.size() != 1) throw ShapeError("grad_check", "loss must be scalar, got " + shape_str(v.shape()));
  if (!std::isfinite(v[0])) throw NonFiniteError("grad_check: non-finite loss");
  return {v[0], g.activation_signature()};
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& build, std::span<Parameter<double>* const> params,
                           const GradCheckOptions& opt) {
  if (!(opt.eps >= 1e-4 && opt.eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must lie in [1e-4, 1e-2]");

  for (Parameter<double>* p : params) p->zero_grad();
  std::uint64_t base_signature = 0;
  {
    Graph<double> g;
    g.set_track_signature(true);
    Var loss = build(g);
    if (g.value(loss).size() != 1) throw ShapeError("grad_check", "loss must be scalar");
    if (!std::isfinite(g.value(loss)[0])) throw NonFiniteError("grad_check: non-finite loss");
    base_signature = g.activation_signature();
    g.backward(loss);
  }

  GradCheckReport report;
  CounterRng rng(opt.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>& p = *params[pi];
    const Tensor<double> analytic = p.grad;
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords;
    CounterRng stream = rng.child(pi);
    if (n <= opt.max_coords) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      coords = stream.sample_without_replacement(n, opt.max_coords);
    }
    for (std::size_t c : coords) {
      const double orig = p.value[c];
      p.value[c] = orig + opt.eps;
      const Probe plus = evaluate(build);
      p.value[c] = orig - opt.eps;
      const Probe minus = evaluate(build);
      p.value[c] = orig;
      if (plus.signature != base_signature || minus.signature != base_signature) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (plus.loss - minus.loss) / (2.0 * opt.eps);
      const double a = analytic[c];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace dcap::nk
