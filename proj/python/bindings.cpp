// Python bindings: forward ops on numpy arrays (float64), configs, datasets,
// episodes, the training pipeline and the analysis exporters.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dcap/analysis.hpp"
#include "dcap/errors.hpp"
#include "dcap/pipeline.hpp"
#include "dcap/selftest.hpp"

namespace py = pybind11;
using namespace dcap;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<double> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

py::array_t<double> gap_py(const Array& maps) {
  Graph<double> g;
  return to_array(g.value(gap(g, g.constant(to_tensor(maps)))));
}

py::array_t<double> att_pool_py(const Array& maps, const Array& alpha) {
  Graph<double> g;
  return to_array(g.value(att_pool(g, g.constant(to_tensor(maps)), g.constant(to_tensor(alpha)))));
}

py::array_t<double> centroids_py(const Array& emb, const std::vector<std::size_t>& labels, std::size_t way) {
  Graph<double> g;
  return to_array(g.value(centroids(g, g.constant(to_tensor(emb)), labels, way)));
}

py::array_t<double> nc_logits_py(const Array& queries, const Array& cents) {
  Graph<double> g;
  return to_array(g.value(nc_logits(g, g.constant(to_tensor(queries)), g.constant(to_tensor(cents)))));
}

py::array_t<double> nc_classify_tau_py(const Array& queries, const Array& cents, const std::string& sim, double tau) {
  Similarity s;
  if (sim == "cosine") s = Similarity::cosine;
  else if (sim == "neg-euclidean") s = Similarity::neg_euclidean;
  else throw ConfigError("similarity must be cosine or neg-euclidean");
  Graph<double> g;
  return to_array(g.value(nc_classify_tau(g, g.constant(to_tensor(queries)), g.constant(to_tensor(cents)), s, tau)));
}

py::array_t<double> dense_logits_py(const Array& maps, const Array& w, const Array& b) {
  Graph<double> g;
  return to_array(
      g.value(dense_logits(g, g.constant(to_tensor(maps)), g.constant(to_tensor(w)), g.constant(to_tensor(b)))));
}

double scalar(const Graph<double>& g, Var v) { return g.value(v).data()[0]; }

double ce_loss_py(const Array& logits, std::size_t y, std::size_t classes, double eps) {
  Graph<double> g;
  return scalar(g, ce_loss(g, g.constant(to_tensor(logits)), smooth_label(y, classes, eps)));
}

double pretrain_loss_py(const std::string& mode, const Array& maps, const std::vector<std::size_t>& labels,
                        const Array& w, const Array& b, double eps) {
  Graph<double> g;
  const Var m = g.constant(to_tensor(maps)), wv = g.constant(to_tensor(w)), bv = g.constant(to_tensor(b));
  if (mode == "gap") return scalar(g, pretrain_loss_gap(g, m, labels, wv, bv, eps));
  if (mode == "dc") return scalar(g, pretrain_loss_dc(g, m, labels, wv, bv, eps));
  throw ConfigError("mode must be gap or dc");
}

double meta_loss_py(const Array& logits, const std::vector<std::size_t>& labels) {
  Graph<double> g;
  return scalar(g, meta_loss(g, g.constant(to_tensor(logits)), labels));
}

double entropy_reg_py(const Array& alpha) {
  Graph<double> g;
  return scalar(g, entropy_reg(g, g.constant(to_tensor(alpha))));
}

double meta_global_ce_py(const Array& maps, const Array& raw, const Array& w, const Array& b,
                         const std::vector<std::size_t>& base_labels, bool divide_by_r) {
  Graph<double> g;
  return scalar(g, meta_global_ce(g, g.constant(to_tensor(maps)), g.constant(to_tensor(raw)), g.constant(to_tensor(w)),
                                  g.constant(to_tensor(b)), base_labels, divide_by_r));
}

FeatureMap feature_map_of(const Array& m) {
  if (m.ndim() != 3) throw nk::ShapeError("feature_map", "expected [d, h, w]");
  return FeatureMap{static_cast<std::size_t>(m.shape(0)), static_cast<std::size_t>(m.shape(1)),
                    static_cast<std::size_t>(m.shape(2)), std::vector<double>(m.data(), m.data() + m.size())};
}

py::dict check_dict(const CheckResult& r) {
  py::dict d;
  d["name"] = r.name;
  d["seed"] = r.seed;
  d["value"] = r.value;
  d["tolerance"] = r.tolerance;
  d["checked"] = r.checked;
  d["passed"] = r.passed;
  d["detail"] = r.detail;
  return d;
}

py::list checks(const std::vector<CheckResult>& rs) {
  py::list out;
  for (const CheckResult& r : rs) out.append(check_dict(r));
  return out;
}

RunConfig config_from(const std::string& text, const std::vector<std::string>& overrides) {
  RunConfig c = text.empty() ? RunConfig{} : RunConfig::parse(text);
  for (const std::string& o : overrides) c.apply_override(o);
  c.validate();
  return c;
}

ProgressFn progress_of(const std::optional<std::function<void(const std::string&)>>& fn) {
  if (!fn) return {};
  return [fn](const std::string& line) {
    py::gil_scoped_acquire gil;
    (*fn)(line);
  };
}

}  // namespace

PYBIND11_MODULE(_dcap, m) {
  m.doc() = "DCAP few-shot learning core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<nk::ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<SamplingError>(m, "SamplingError", PyExc_RuntimeError);
  py::register_exception<IngestError>(m, "IngestError", PyExc_OSError);
  py::register_exception<InvariantViolation>(m, "InvariantViolation", PyExc_RuntimeError);
  py::register_exception<DegenerateCentroidError>(m, "DegenerateCentroidError", PyExc_ArithmeticError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);

  // Forward ops.
  m.def("gap", &gap_py, py::arg("maps"), "Mean over sites: [N,d,h,w] -> [N,d].");
  m.def("att_pool", &att_pool_py, py::arg("maps"), py::arg("alpha"), "alpha-weighted descriptor sum: -> [N,d].");
  m.def("centroids", &centroids_py, py::arg("embeddings"), py::arg("labels"), py::arg("way"));
  m.def("nc_logits", &nc_logits_py, py::arg("queries"), py::arg("centroids"),
        "<f_q, c_t/||c_t||> for every query and class.");
  m.def("nc_classify_tau", &nc_classify_tau_py, py::arg("queries"), py::arg("centroids"),
        py::arg("similarity") = "cosine", py::arg("tau") = 1.0);
  m.def("dense_logits", &dense_logits_py, py::arg("maps"), py::arg("weight"), py::arg("bias"));
  m.def("smooth_label", [](std::size_t y, std::size_t classes, double eps) { return smooth_label(y, classes, eps).probs; },
        py::arg("y"), py::arg("classes"), py::arg("eps"));
  m.def("ce_loss", &ce_loss_py, py::arg("logits"), py::arg("y"), py::arg("classes"), py::arg("eps") = 0.0);
  m.def("pretrain_loss", &pretrain_loss_py, py::arg("mode"), py::arg("maps"), py::arg("labels"), py::arg("weight"),
        py::arg("bias"), py::arg("eps") = 0.1);
  m.def("meta_loss", &meta_loss_py, py::arg("logits"), py::arg("labels"));
  m.def("entropy_reg", &entropy_reg_py, py::arg("alpha"));
  m.def("meta_global_ce", &meta_global_ce_py, py::arg("maps"), py::arg("raw_attention"), py::arg("weight"),
        py::arg("bias"), py::arg("base_labels"), py::arg("divide_by_r") = false);

  // Analysis on a single [d,h,w] map.
  m.def("neighbor_consistency", [](const Array& map) { return neighbor_consistency(feature_map_of(map)); });
  m.def("descriptor_norm_stats", [](const Array& map) {
    const NormStats s = descriptor_norm_stats(feature_map_of(map));
    return py::make_tuple(s.mean, s.stddev);
  });
  m.def("cosine_matrix", [](const Array& map) {
    const SimilarityMatrix s = descriptor_cosine_matrix(feature_map_of(map));
    py::array_t<double> out({static_cast<py::ssize_t>(s.r), static_cast<py::ssize_t>(s.r)});
    std::copy(s.values.begin(), s.values.end(), out.mutable_data());
    return out;
  });

  // Self-checks.
  m.def("primitive_gradient_checks", [](const std::vector<std::uint64_t>& seeds) { return checks(primitive_gradient_checks(seeds)); });
  m.def("objective_gradient_checks", [](const std::vector<std::uint64_t>& seeds) { return checks(objective_gradient_checks(seeds)); });
  m.def("identity_checks", [](const std::vector<std::uint64_t>& seeds) { return checks(identity_checks(seeds)); });

  // Configuration.
  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init([](const std::string& text, const std::vector<std::string>& overrides) {
             return config_from(text, overrides);
           }),
           py::arg("text") = "", py::arg("overrides") = std::vector<std::string>{})
      .def("serialize", &RunConfig::serialize)
      .def("digest", &RunConfig::digest)
      .def("variant_name", &RunConfig::variant_name)
      .def("override", [](RunConfig& c, const std::string& a) { c.apply_override(a); c.validate(); })
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("threads", &RunConfig::threads)
      .def("__repr__", [](const RunConfig& c) { return "<RunConfig " + c.variant_name() + " " + c.digest() + ">"; });

  // Data and episodes.
  py::class_<Dataset>(m, "Dataset")
      .def_static("from_config", &load_dataset, py::arg("config"))
      .def_static("load_dir", &load_image_dir, py::arg("root"))
      .def("export_dir", [](const Dataset& ds, const std::string& root) { export_image_dir(ds, root); })
      .def("__len__", &Dataset::size)
      .def("digest", &Dataset::digest)
      .def("classes", [](const Dataset& ds, const std::string& split) { return ds.classes_in(parse_split(split)); })
      .def("batch", [](const Dataset& ds, const std::vector<std::size_t>& images) {
        return to_array(ds.batch<double>(images));
      });

  m.def("eval_manifest", [](const RunConfig& cfg, const Dataset& ds, const std::string& split) {
    return episode_manifest(eval_episodes(cfg, ds, parse_split(split)));
  }, py::arg("config"), py::arg("dataset"), py::arg("split") = "meta-test");
  m.def("episode_protocol_checks", [](const Dataset& ds, std::uint64_t seed, std::size_t episodes) {
    return checks(episode_protocol_checks(ds, seed, episodes));
  }, py::arg("dataset"), py::arg("seed") = 1, py::arg("episodes") = 1000);

  // Pipeline.
  py::class_<Checkpoint>(m, "Checkpoint")
      .def_static("load", &Checkpoint::load)
      .def("save", &Checkpoint::save)
      .def("to_bytes", [](const Checkpoint& c) { return py::bytes(c.to_bytes()); })
      .def_static("from_bytes", [](const py::bytes& b) { return Checkpoint::from_bytes(std::string(b)); })
      .def_property_readonly("stage", [](const Checkpoint& c) { return std::string(to_string(c.stage)); })
      .def_property_readonly("config", [](const Checkpoint& c) { return c.config; })
      .def_property_readonly("has_regressor", &Checkpoint::has_regressor)
      .def_property_readonly("history", [](const Checkpoint& c) {
        py::list out;
        for (const MetricRecord& r : c.history) out.append(py::make_tuple(r.name, r.step, r.value));
        return out;
      });

  using Progress = std::optional<std::function<void(const std::string&)>>;
  m.def("pretrain", [](const RunConfig& cfg, const Dataset& ds, const Progress& p) {
    const ProgressFn fn = progress_of(p);
    py::gil_scoped_release nogil;
    return pretrain(cfg, ds, fn);
  }, py::arg("config"), py::arg("dataset"), py::arg("progress") = py::none());
  m.def("meta_finetune", [](const RunConfig& cfg, const Dataset& ds, const Checkpoint* init, const Progress& p) {
    const ProgressFn fn = progress_of(p);
    py::gil_scoped_release nogil;
    return meta_finetune(cfg, ds, init, fn);
  }, py::arg("config"), py::arg("dataset"), py::arg("init") = nullptr, py::arg("progress") = py::none());
  m.def("evaluate", [](const Checkpoint& ck, const RunConfig& cfg, const Dataset& ds, const std::string& split) {
    const std::vector<Episode> eps = eval_episodes(cfg, ds, parse_split(split));
    EvalReport r;
    {
      py::gil_scoped_release nogil;
      r = evaluate(ck, ds, eps, cfg.threads);
    }
    py::dict d;
    d["variant"] = r.variant;
    d["mean"] = r.mean;
    d["ci"] = r.half_width;
    d["count"] = r.count;
    d["accuracies"] = r.accuracies;
    return d;
  }, py::arg("checkpoint"), py::arg("config"), py::arg("dataset"), py::arg("split") = "meta-test");
  m.def("analyze", [](const Checkpoint& ck, const Dataset& ds, std::size_t per_class) {
    Learner learner = learner_from(ck);
    const std::vector<std::size_t> images = analysis_images(ds, per_class);
    const ConsistencySummary s = summarize_consistency(feature_maps(learner, ds, images));
    py::dict d;
    d["images"] = s.images;
    d["neighbor_consistency"] = s.neighbor_consistency;
    d["norm_cv"] = s.norm_cv;
    d["per_image_consistency"] = s.per_image_consistency;
    return d;
  }, py::arg("checkpoint"), py::arg("dataset"), py::arg("per_class") = 5);
}
