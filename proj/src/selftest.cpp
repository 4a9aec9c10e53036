#include "dcap/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "dcap/backbone.hpp"
#include "dcap/errors.hpp"
#include "dcap/gradcheck.hpp"
#include "dcap/heads.hpp"
#include "dcap/objectives.hpp"
#include "dcap/ops.hpp"

namespace dcap {

using namespace nk;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kIdentityTol = 1e-6;

Tensor<double> uniform_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, CounterRng& rng) {
  std::vector<std::size_t> out(n);
  for (auto& y : out) y = rng.below(classes);
  return out;
}

CheckResult grad_result(std::string name, std::uint64_t seed, const GradCheckReport& r) {
  CheckResult c;
  c.name = std::move(name);
  c.seed = seed;
  c.value = r.max_rel_error;
  c.tolerance = kGradTol;
  c.checked = r.checked;
  c.passed = r.checked > 0 && r.max_rel_error < kGradTol;
  if (r.skipped_kinks) c.detail = std::to_string(r.skipped_kinks) + " kink coordinates skipped";
  return c;
}

CheckResult identity_result(std::string name, std::uint64_t seed, double err, std::size_t checked) {
  CheckResult c;
  c.name = std::move(name);
  c.seed = seed;
  c.value = err;
  c.tolerance = kIdentityTol;
  c.checked = checked;
  c.passed = err < kIdentityTol;
  return c;
}

template <typename F>
CheckResult guarded(const std::string& name, std::uint64_t seed, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    CheckResult c;
    c.name = name;
    c.seed = seed;
    c.value = INFINITY;
    c.tolerance = kGradTol;
    c.detail = e.what();
    return c;
  }
}

std::vector<Parameter<double>*> pointers(std::vector<Parameter<double>>& ps) {
  std::vector<Parameter<double>*> out;
  for (auto& p : ps) out.push_back(&p);
  return out;
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Toy learner: conv4 with 4 filters at 32x32 input gives d = 4, r = 2x2.
BackboneConfig toy_backbone() {
  BackboneConfig cfg;
  cfg.input_size = 32;
  cfg.filters = {4, 4, 4, 4};
  return cfg;
}

// 2-way 1-shot with two queries per class.
EpisodeInput<double> toy_episode(CounterRng rng, std::size_t base_classes) {
  EpisodeInput<double> ep;
  ep.way = 2;
  ep.support_labels = {0, 1};
  ep.query_labels = {0, 0, 1, 1};
  ep.query_base_labels = random_labels(4, base_classes, rng);
  ep.images = uniform_tensor(Shape{6, 1, 32, 32}, rng);
  return ep;
}

}  // namespace

Var random_probe(Graph<double>& g, Var x, std::uint64_t seed) {
  CounterRng rng(seed);
  return sum(g, mul(g, x, g.constant(uniform_tensor(g.value(x).shape(), rng))));
}

const std::vector<PrimitiveCase>& primitive_cases() {
  static const std::vector<std::size_t> rows{2, 0, 2, 1};
  static const std::vector<std::size_t> cols{1, 0, 2};
  static const std::vector<PrimitiveCase> cases{
      {"relu", {{3, 4}}, -1, 1, [](auto& g, auto& v) { return relu(g, v[0]); }},
      {"sigmoid", {{3, 4}}, -2, 2, [](auto& g, auto& v) { return sigmoid(g, v[0]); }},
      {"exp", {{3, 4}}, -1, 1, [](auto& g, auto& v) { return exp(g, v[0]); }},
      {"log", {{3, 4}}, 0.5, 2, [](auto& g, auto& v) { return log(g, v[0]); }},
      {"xlogx", {{3, 4}}, 0.1, 1, [](auto& g, auto& v) { return xlogx(g, v[0]); }},
      {"reciprocal", {{3, 4}}, 0.5, 2, [](auto& g, auto& v) { return reciprocal(g, v[0]); }},
      {"scale", {{3, 4}}, -1, 1, [](auto& g, auto& v) { return scale(g, v[0], -1.7); }},
      {"add_scalar", {{3, 4}}, -1, 1, [](auto& g, auto& v) { return add_scalar(g, v[0], 0.3); }},
      {"add", {{2, 3}, {2, 3}}, -1, 1, [](auto& g, auto& v) { return add(g, v[0], v[1]); }},
      {"sub", {{2, 3}, {2, 3}}, -1, 1, [](auto& g, auto& v) { return sub(g, v[0], v[1]); }},
      {"mul", {{2, 3}, {2, 3}}, -1, 1, [](auto& g, auto& v) { return mul(g, v[0], v[1]); }},
      {"sum", {{2, 3}}, -1, 1, [](auto& g, auto& v) { return scale(g, sum(g, v[0]), 1.3); }},
      {"mean", {{2, 3}}, -1, 1, [](auto& g, auto& v) { return scale(g, mean(g, v[0]), 1.3); }},
      {"sum_axis", {{2, 3, 4}}, -1, 1, [](auto& g, auto& v) { return sum_axis(g, v[0], 1); }},
      {"reshape", {{2, 6}}, -1, 1, [](auto& g, auto& v) { return reshape(g, v[0], Shape{3, 4}); }},
      {"transpose_last2", {{2, 3, 4}}, -1, 1, [](auto& g, auto& v) { return transpose_last2(g, v[0]); }},
      {"select_rows", {{3, 4}}, -1, 1, [](auto& g, auto& v) { return select_rows(g, v[0], std::span(rows)); }},
      {"gather_cols", {{3, 4}}, -1, 1, [](auto& g, auto& v) { return gather_cols(g, v[0], std::span(cols)); }},
      {"concat_channels", {{2, 2, 3, 3}, {2, 3, 3, 3}}, -1, 1,
       [](auto& g, auto& v) { return concat_channels(g, v[0], v[1]); }},
      {"expand_spatial", {{2, 3}}, -1, 1, [](auto& g, auto& v) { return expand_spatial(g, v[0], 2, 3); }},
      {"mul_rows", {{3, 2, 2}, {3}}, -1, 1, [](auto& g, auto& v) { return mul_rows(g, v[0], v[1]); }},
      {"weighted_spatial_sum", {{2, 3, 2, 2}, {2, 4}}, -1, 1,
       [](auto& g, auto& v) { return weighted_spatial_sum(g, v[0], v[1]); }},
      {"matmul", {{3, 4}, {4, 2}}, -1, 1, [](auto& g, auto& v) { return matmul(g, v[0], v[1]); }},
      {"matmul_tb", {{3, 4}, {2, 4}}, -1, 1, [](auto& g, auto& v) { return matmul(g, v[0], v[1], true); }},
      {"linear", {{3, 4}, {4, 5}, {5}}, -1, 1, [](auto& g, auto& v) { return linear(g, v[0], v[1], v[2]); }},
      {"l2_normalize_rows", {{3, 4}}, 0.2, 1, [](auto& g, auto& v) { return l2_normalize_rows(g, v[0]); }},
      {"log_softmax", {{3, 5}}, -2, 2, [](auto& g, auto& v) { return log_softmax(g, v[0], 1); }},
      {"log_softmax_axis0", {{3, 5}}, -2, 2, [](auto& g, auto& v) { return log_softmax(g, v[0], 0); }},
      {"softmax", {{3, 5}}, -2, 2, [](auto& g, auto& v) { return softmax(g, v[0], 1); }},
      {"conv2d_pad1", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, -1, 1,
       [](auto& g, auto& v) { return conv2d(g, v[0], v[1], v[2], Conv2dOptions{1, 1}); }},
      {"conv2d_stride2", {{1, 2, 6, 6}, {2, 2, 3, 3}}, -1, 1,
       [](auto& g, auto& v) { return conv2d(g, v[0], v[1], Var{}, Conv2dOptions{2, 0}); }},
      {"conv2d_1x1", {{2, 4, 3, 3}, {2, 4, 1, 1}, {2}}, -1, 1,
       [](auto& g, auto& v) { return conv2d(g, v[0], v[1], v[2]); }},
      {"batch_norm2d_train", {{3, 2, 2, 2}, {2}, {2}}, -1, 1,
       [](auto& g, auto& v) {
         BatchNormState<double> st(2);
         return batch_norm2d(g, v[0], v[1], v[2], st, true);
       }},
      {"batch_norm2d_eval", {{3, 2, 2, 2}, {2}, {2}}, -1, 1,
       [](auto& g, auto& v) {
         BatchNormState<double> st(2);
         st.running_mean[1] = 0.3;
         st.running_var[0] = 2.0;
         return batch_norm2d(g, v[0], v[1], v[2], st, false);
       }},
      {"max_pool2d", {{2, 2, 4, 4}}, -1, 1, [](auto& g, auto& v) { return max_pool2d(g, v[0], 2); }},
      {"max_pool2d_w3", {{1, 2, 7, 7}}, -1, 1, [](auto& g, auto& v) { return max_pool2d(g, v[0], 3); }},
      {"global_avg_pool", {{2, 3, 2, 2}}, -1, 1, [](auto& g, auto& v) { return global_avg_pool(g, v[0]); }},
  };
  return cases;
}

std::vector<CheckResult> primitive_gradient_checks(std::span<const std::uint64_t> seeds) {
  std::vector<CheckResult> out;
  const auto& cases = primitive_cases();
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const PrimitiveCase& pc = cases[k];
    for (std::uint64_t seed : seeds) {
      out.push_back(guarded("primitive/" + pc.name, seed, [&] {
        CounterRng rng(seed * 7919 + k);
        std::vector<Parameter<double>> params;
        for (std::size_t i = 0; i < pc.shapes.size(); ++i)
          params.emplace_back("p" + std::to_string(i), uniform_tensor(pc.shapes[i], rng, pc.lo, pc.hi));
        const auto ptrs = pointers(params);
        const GradCheckReport r = grad_check(
            [&](Graph<double>& g) {
              std::vector<Var> vs;
              for (auto& p : params) vs.push_back(g.param(p));
              return random_probe(g, pc.build(g, vs), seed + 100);
            },
            ptrs, GradCheckOptions{1e-4, 256, seed});
        return grad_result("primitive/" + pc.name, seed, r);
      }));
    }
  }
  return out;
}

std::vector<CheckResult> objective_gradient_checks(std::span<const std::uint64_t> seeds) {
  constexpr std::size_t d = 4, r = 4, classes = 3;
  std::vector<CheckResult> out;
  for (std::uint64_t seed : seeds) {
    const GradCheckOptions opt{1e-4, 256, seed};
    CounterRng root(0xd0c0 + seed);

    out.push_back(guarded("objective/ce_loss", seed, [&] {
      CounterRng rng = root.child(0);
      std::vector<Parameter<double>> ps;
      ps.emplace_back("logits", uniform_tensor(Shape{5}, rng, -2, 2));
      const SoftLabel label = smooth_label(rng.below(5), 5, rng.uniform(0.0, 0.9));
      const auto ptrs = pointers(ps);
      return grad_result("objective/ce_loss", seed,
                         grad_check([&](Graph<double>& g) { return ce_loss(g, g.param(ps[0]), label); }, ptrs, opt));
    }));

    for (bool dense : {false, true}) {
      const std::string name = dense ? "objective/pretrain_dense" : "objective/pretrain_gap";
      out.push_back(guarded(name, seed, [&] {
        CounterRng rng = root.child(dense ? 2 : 1);
        std::vector<Parameter<double>> ps;
        ps.emplace_back("maps", uniform_tensor(Shape{3, d, 2, 2}, rng));
        ps.emplace_back("weight", uniform_tensor(Shape{d, classes}, rng));
        ps.emplace_back("bias", uniform_tensor(Shape{classes}, rng));
        const auto labels = random_labels(3, classes, rng);
        const auto ptrs = pointers(ps);
        return grad_result(name, seed, grad_check(
                                           [&](Graph<double>& g) {
                                             Var m = g.param(ps[0]), w = g.param(ps[1]), b = g.param(ps[2]);
                                             return dense ? pretrain_loss_dc(g, m, std::span(labels), w, b)
                                                          : pretrain_loss_gap(g, m, std::span(labels), w, b);
                                           },
                                           ptrs, opt));
      }));
    }

    out.push_back(guarded("objective/meta_loss", seed, [&] {
      CounterRng rng = root.child(3);
      std::vector<Parameter<double>> ps;
      ps.emplace_back("support", uniform_tensor(Shape{2, d}, rng));
      ps.emplace_back("query", uniform_tensor(Shape{4, d}, rng));
      const std::vector<std::size_t> sl{0, 1}, ql{0, 1, 1, 0};
      const auto ptrs = pointers(ps);
      return grad_result("objective/meta_loss", seed,
                         grad_check(
                             [&](Graph<double>& g) {
                               Var c = centroids(g, g.param(ps[0]), std::span(sl), 2);
                               return meta_loss(g, nc_logits(g, g.param(ps[1]), c), std::span(ql));
                             },
                             ptrs, opt));
    }));

    out.push_back(guarded("objective/entropy", seed, [&] {
      CounterRng rng = root.child(4);
      std::vector<Parameter<double>> ps;
      ps.emplace_back("scores", uniform_tensor(Shape{4, r}, rng, -2, 2));
      const auto ptrs = pointers(ps);
      return grad_result(
          "objective/entropy", seed,
          grad_check([&](Graph<double>& g) { return entropy_reg(g, softmax(g, g.param(ps[0]), 1)); }, ptrs, opt));
    }));

    out.push_back(guarded("objective/global_ce", seed, [&] {
      CounterRng rng = root.child(5);
      AttentionRegressor<double> reg(d, seed + 11);
      Parameter<double> maps("maps", uniform_tensor(Shape{4, d, 2, 2}, rng));
      const Tensor<double> w = uniform_tensor(Shape{d, classes}, rng), b = uniform_tensor(Shape{classes}, rng);
      const auto labels = random_labels(4, classes, rng);
      std::vector<Parameter<double>*> ptrs = reg.parameters();
      ptrs.push_back(&maps);
      return grad_result("objective/global_ce", seed,
                         grad_check(
                             [&](Graph<double>& g) {
                               Var m = g.param(maps);
                               AttentionVars att = attention_scores(g, m, reg);
                               return meta_global_ce(g, m, att.raw, g.constant(w), g.constant(b), std::span(labels));
                             },
                             ptrs, opt));
    }));

    out.push_back(guarded("objective/episode_total", seed, [&] {
      Backbone<double> net(toy_backbone(), seed + 21);
      AttentionRegressor<double> reg(d, seed + 22);
      GlobalClassifier<double> cls(d, classes, seed + 23);
      cls.frozen = true;
      MetaModel<double> model{&net, &reg, &cls};
      const std::vector<EpisodeInput<double>> batch{toy_episode(root.child(6), classes),
                                                    toy_episode(root.child(7), classes)};
      std::vector<Parameter<double>*> ptrs = net.parameters();
      for (auto* p : reg.parameters()) ptrs.push_back(p);
      ObjectiveOptions oo;
      return grad_result("objective/episode_total", seed,
                         grad_check(
                             [&](Graph<double>& g) {
                               return total_meta_objective(g, model, std::span<const EpisodeInput<double>>(batch), oo);
                             },
                             ptrs, opt));
    }));
  }
  return out;
}

std::vector<CheckResult> identity_checks(std::span<const std::uint64_t> seeds) {
  std::vector<CheckResult> out;
  for (std::uint64_t seed : seeds) {
    CounterRng root(0x1de7 + seed);
    const std::size_t n = 3, d = 5, h = 2, w = 3, r = h * w, classes = 4;

    {
      CounterRng rng = root.child(0);
      Graph<double> g;
      Var maps = g.constant(uniform_tensor(Shape{n, d, h, w}, rng));
      Var uniform = g.constant(Tensor<double>(Shape{n, r}, 1.0 / static_cast<double>(r)));
      out.push_back(identity_result("identity/attpool_uniform_is_gap", seed,
                                    max_diff(g.value(att_pool(g, maps, uniform)), g.value(gap(g, maps))), n * d));
    }
    {
      CounterRng rng = root.child(1);
      Graph<double> g;
      Tensor<double> cents = uniform_tensor(Shape{3, d}, rng), scaled = cents;
      for (std::size_t t = 0; t < 3; ++t) {
        const double s = rng.uniform(0.1, 10.0);
        for (std::size_t k = 0; k < d; ++k) scaled[t * d + k] *= s;
      }
      Var q = g.constant(uniform_tensor(Shape{4, d}, rng));
      const double err = max_diff(g.value(nc_logits(g, q, g.constant(cents))), g.value(nc_logits(g, q, g.constant(scaled))));
      out.push_back(identity_result("identity/logits_centroid_scale", seed, err, 12));
    }
    {
      CounterRng rng = root.child(2);
      Graph<double> g;
      Var c = g.constant(uniform_tensor(Shape{5, d}, rng));
      const Tensor<double> q = uniform_tensor(Shape{20, d}, rng);
      Tensor<double> qs = q;
      for (std::size_t i = 0; i < 20; ++i) {
        const double s = rng.uniform(0.1, 10.0);
        for (std::size_t k = 0; k < d; ++k) qs[i * d + k] *= s;
      }
      const Tensor<double>& a = g.value(nc_logits(g, g.constant(q), c));
      const Tensor<double>& b = g.value(nc_logits(g, g.constant(qs), c));
      std::size_t flips = 0;
      for (std::size_t i = 0; i < 20; ++i) {
        const auto ra = a.values().subspan(i * 5, 5), rb = b.values().subspan(i * 5, 5);
        flips += std::max_element(ra.begin(), ra.end()) - ra.begin() != std::max_element(rb.begin(), rb.end()) - rb.begin();
      }
      out.push_back(identity_result("identity/argmax_query_scale", seed, static_cast<double>(flips), 20));
    }
    {
      CounterRng rng = root.child(3);
      Graph<double> g;
      const Tensor<double> desc = uniform_tensor(Shape{d}, rng);
      Tensor<double> maps(Shape{1, d, h, w});
      for (std::size_t k = 0; k < d; ++k)
        for (std::size_t j = 0; j < r; ++j) maps[k * r + j] = desc[k];
      Var wv = g.constant(uniform_tensor(Shape{d, classes}, rng)), bv = g.constant(uniform_tensor(Shape{classes}, rng));
      const Tensor<double>& rows = g.value(dense_logits(g, g.constant(maps), wv, bv));
      double err = 0;
      for (std::size_t j = 1; j < r; ++j)
        for (std::size_t c = 0; c < classes; ++c) err = std::max(err, std::abs(rows[j * classes + c] - rows[c]));
      out.push_back(identity_result("identity/dense_identical_rows", seed, err, r * classes));
    }
    {
      CounterRng rng = root.child(4);
      Graph<double> g;
      Var maps = g.constant(uniform_tensor(Shape{n, d, h, w}, rng));
      Var wv = g.constant(uniform_tensor(Shape{d, classes}, rng)), bv = g.constant(uniform_tensor(Shape{classes}, rng));
      const Tensor<double> rows = g.value(dense_logits(g, maps, wv, bv));
      const Tensor<double>& global = g.value(linear(g, gap(g, maps), wv, bv));
      double err = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < classes; ++c) {
          double m = 0;
          for (std::size_t j = 0; j < r; ++j) m += rows[(i * r + j) * classes + c];
          err = std::max(err, std::abs(m / static_cast<double>(r) - global[i * classes + c]));
        }
      out.push_back(identity_result("identity/dense_mean_is_gap_logits", seed, err, n * classes));
    }
    {
      CounterRng rng = root.child(5);
      const double lnr = std::log(static_cast<double>(r));
      Graph<double> g;
      const double uni = g.value(entropy_reg(g, g.constant(Tensor<double>(Shape{1, r}, 1.0 / r)))).item();
      Tensor<double> onehot(Shape{1, r});
      onehot[rng.below(r)] = 1.0;
      const double one = g.value(entropy_reg(g, g.constant(onehot))).item();
      double err = std::max(std::abs(uni + lnr), std::abs(one));
      std::size_t violations = 0;
      for (int t = 0; t < 200; ++t) {
        Tensor<double> a(Shape{1, r});
        double s = 0;
        for (double& v : a.values()) s += (v = rng.uniform(0.0, 1.0));
        for (double& v : a.values()) v /= s;
        const double e = g.value(entropy_reg(g, g.constant(a))).item();
        if (!(e > -lnr && e <= 0.0)) ++violations;
      }
      out.push_back(identity_result("identity/entropy_bounds", seed, err + static_cast<double>(violations), 202));
    }
    {
      CounterRng rng = root.child(6);
      double err = 0;
      for (int t = 0; t < 200; ++t) {
        const std::size_t c = 1 + rng.below(20);
        const SoftLabel s = smooth_label(rng.below(c), c, rng.uniform(0.0, 0.999));
        double total = 0;
        for (double p : s.probs) {
          if (p < 0) err = INFINITY;
          total += p;
        }
        err = std::max(err, std::abs(total - 1.0));
      }
      out.push_back(identity_result("identity/smooth_label_sums_to_one", seed, err, 200));
    }
  }
  return out;
}

std::vector<CheckResult> episode_protocol_checks(const Dataset& ds, std::uint64_t seed, std::size_t episodes) {
  std::vector<CheckResult> out;
  auto make = [&](std::string name, double value, std::size_t checked, std::string detail = {}) {
    CheckResult c;
    c.name = std::move(name);
    c.seed = seed;
    c.value = value;
    c.tolerance = 0.5;
    c.checked = checked;
    c.passed = value < 0.5;
    c.detail = std::move(detail);
    out.push_back(std::move(c));
  };

  CounterRng root(seed);
  const EpisodeShape shapes[] = {{5, 1, 15}, {5, 5, 10}};
  std::size_t bad = 0, wrong_size = 0;
  std::string first_error;
  for (std::size_t i = 0; i < episodes; ++i) {
    const EpisodeShape& shape = shapes[i % 2];
    try {
      const Episode ep = sample_episode(ds, kAllSplits[i % 3], shape, root.child(i), i);
      ep.check_invariants();
      const std::size_t expect = shape.shot == 1 ? 80 : 75;
      if (ep.support.size() + ep.queries.size() != expect) ++wrong_size;
    } catch (const std::exception& e) {
      if (first_error.empty()) first_error = e.what();
      ++bad;
    }
  }
  make("episodes/invariants", static_cast<double>(bad), episodes, first_error);
  make("episodes/image_counts", static_cast<double>(wrong_size), episodes, "5w1s15q = 80, 5w5s10q = 75");

  const EpisodeShape eval_shape{5, 1, 15};
  const std::string a = episode_manifest(consistent_eval_set(ds, Split::meta_test, eval_shape, seed, episodes, 1));
  const std::string b = episode_manifest(consistent_eval_set(ds, Split::meta_test, eval_shape, seed, episodes, 1));
  const std::string c = episode_manifest(consistent_eval_set(ds, Split::meta_test, eval_shape, seed, episodes, 4));
  make("episodes/manifest_rerun", a == b ? 0.0 : 1.0, episodes);
  make("episodes/manifest_threads_1_vs_4", a == c ? 0.0 : 1.0, episodes);
  return out;
}

bool all_passed(std::span<const CheckResult> results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

std::string format_check(const CheckResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, " seed=%llu value=%.3g tol=%.3g checked=%zu ", static_cast<unsigned long long>(r.seed),
                r.value, r.tolerance, r.checked);
  std::string s = r.name + buf + (r.passed ? "PASS" : "FAIL");
  if (!r.detail.empty()) s += " (" + r.detail + ")";
  return s;
}

}  // namespace dcap
