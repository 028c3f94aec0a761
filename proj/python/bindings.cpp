#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fsda/evaluation.hpp"
#include "fsda/experiment.hpp"
#include "fsda/prototypes.hpp"
#include "fsda/training.hpp"

namespace py = pybind11;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using MaskArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using PrototypeDict = std::map<int, std::vector<double>>;

fsda::Tensor to_tensor(const DoubleArray& a) {
  if (a.ndim() != 3) throw py::value_error("expected an (H, W, C) array");
  fsda::Tensor t(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

py::array_t<double> from_tensor(const fsda::Tensor& t) {
  py::array_t<double> out({t.height, t.width, t.channels});
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

fsda::LabelMask to_mask(const MaskArray& a) {
  if (a.ndim() != 2) throw py::value_error("expected an (H, W) uint8 mask");
  fsda::LabelMask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

py::array_t<std::uint8_t> from_mask(const fsda::LabelMask& m) {
  py::array_t<std::uint8_t> out({m.height, m.width});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

fsda::FeatureMap to_features(const DoubleArray& a) { return fsda::FeatureMap{to_tensor(a), 1}; }

std::vector<fsda::Prototype> to_prototypes(const PrototypeDict& protos) {
  std::vector<fsda::Prototype> out;
  for (const auto& [id, v] : protos) out.push_back({id, v, 1});
  return out;
}

fsda::PrototypeBank to_bank(const PrototypeDict& protos, int dim) {
  fsda::PrototypeBank bank(dim, "python");
  for (auto& p : to_prototypes(protos)) bank.insert(std::move(p));
  return bank;
}

fsda::Episode make_episode(const DoubleArray& support_image, const MaskArray& support_mask,
                           const DoubleArray& query_image, const MaskArray& query_mask) {
  const auto remapped = fsda::remap_episode_labels(to_mask(support_mask), to_mask(query_mask));
  fsda::Episode e;
  e.support = {to_tensor(support_image), remapped.support, "support"};
  e.query = {to_tensor(query_image), remapped.query, "query"};
  e.class_set = remapped.class_set;
  return e;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Prototype-based few-shot domain-adaptive semantic segmentation";
  m.attr("__version__") = fsda::kVersion;
  m.attr("IGNORE_LABEL") = static_cast<int>(fsda::kIgnoreLabel);

  // Translators are tried newest first, so the base class goes first.
  py::register_exception<fsda::Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<fsda::EmptySupport>(m, "EmptySupport", PyExc_ValueError);
  py::register_exception<fsda::AllIgnored>(m, "AllIgnored", PyExc_ValueError);
  py::register_exception<fsda::ClassAbsent>(m, "ClassAbsent", PyExc_ValueError);

  m.def(
      "generate_synthetic_domain",
      [](const std::string& domain, int n_images, std::optional<std::uint64_t> seed) {
        fsda::SyntheticDomainSpec spec;
        if (domain == "source") {
          spec = fsda::default_source_spec();
        } else if (domain == "target") {
          spec = fsda::default_target_spec();
        } else {
          throw py::value_error("domain must be 'source' or 'target'");
        }
        if (seed) spec.seed = *seed;
        py::list out;
        for (const auto& s : fsda::generate_synthetic_domain(spec, n_images)) {
          out.append(py::make_tuple(from_tensor(s.image), from_mask(s.mask), s.name));
        }
        return out;
      },
      py::arg("domain"), py::arg("n_images"), py::arg("seed") = py::none(),
      "Renders (image, mask, name) triples of the built-in benchmark.");

  m.def(
      "construct_support_set",
      [](const std::vector<MaskArray>& masks, int k_shot, int n_class, std::uint64_t seed) {
        fsda::Dataset dataset;
        for (std::size_t i = 0; i < masks.size(); ++i) {
          fsda::LabeledSample s;
          s.mask = to_mask(masks[i]);
          s.image = fsda::Tensor(s.mask.height, s.mask.width, 3);
          s.name = std::to_string(i);
          dataset.push_back(std::move(s));
        }
        const auto support = fsda::construct_support_set(dataset, k_shot, n_class, seed);
        py::dict out;
        out["indices"] = support.indices;
        out["occurrence"] = support.occurrence;
        out["unsaturated"] = support.unsaturated();
        return out;
      },
      py::arg("masks"), py::arg("k_shot"), py::arg("n_class"), py::arg("seed"));

  m.def(
      "remap_episode_labels",
      [](const MaskArray& support, const MaskArray& query) {
        const auto r = fsda::remap_episode_labels(to_mask(support), to_mask(query));
        return py::make_tuple(from_mask(r.support), from_mask(r.query), r.class_set);
      },
      py::arg("support_mask"), py::arg("query_mask"));

  m.def(
      "masked_average_pool",
      [](const DoubleArray& features, const MaskArray& mask, int class_id) {
        return fsda::masked_average_pool(to_features(features), to_mask(mask), class_id);
      },
      py::arg("features"), py::arg("mask"), py::arg("class_id"));

  m.def(
      "extract_prototypes",
      [](const DoubleArray& features, const MaskArray& mask) {
        const auto r = fsda::extract_prototypes(to_features(features), to_mask(mask));
        PrototypeDict protos;
        for (const auto& p : r.prototypes) protos[p.class_id] = p.vector;
        return py::make_tuple(protos, r.vanished);
      },
      py::arg("features"), py::arg("mask"),
      "Returns ({class_id: vector}, vanished_class_ids).");

  m.def(
      "aggregate_bank",
      [](const std::vector<PrototypeDict>& per_image) {
        std::vector<std::vector<fsda::Prototype>> lists;
        for (const auto& d : per_image) lists.push_back(to_prototypes(d));
        const auto bank = fsda::aggregate_bank(lists);
        std::map<int, py::tuple> out;
        for (const auto& [id, p] : bank.entries()) out[id] = py::make_tuple(p.vector, p.n_contributors);
        return out;
      },
      py::arg("per_image"), "Returns {class_id: (vector, n_contributors)}.");

  m.def(
      "cosine_similarity",
      [](const std::vector<double>& a, const std::vector<double>& b, double eps) {
        if (a.size() != b.size()) throw py::value_error("vector sizes differ");
        return fsda::cosine_similarity(a, b, eps);
      },
      py::arg("a"), py::arg("b"), py::arg("epsilon") = fsda::kCosineEpsilon);

  m.def(
      "score_map",
      [](const DoubleArray& features, const PrototypeDict& protos) {
        const auto s = fsda::score_map(to_features(features), to_prototypes(protos));
        return py::make_tuple(from_tensor(s.data), s.class_order);
      },
      py::arg("features"), py::arg("prototypes"), "Returns (scores, class_order).");

  m.def(
      "prototype_softmax",
      [](const DoubleArray& scores, double temperature) {
        fsda::ScoreMap s{to_tensor(scores), {}};
        return from_tensor(fsda::prototype_softmax(s, temperature).data);
      },
      py::arg("scores"), py::arg("temperature") = 1.0);

  m.def(
      "predict_labels",
      [](const DoubleArray& scores, const std::vector<int>& class_order, int height, int width) {
        fsda::ScoreMap s{to_tensor(scores), class_order};
        if (static_cast<int>(class_order.size()) != s.data.channels) {
          throw py::value_error("class_order length must equal the score channels");
        }
        return from_mask(fsda::predict_labels(s, height, width));
      },
      py::arg("scores"), py::arg("class_order"), py::arg("height"), py::arg("width"));

  m.def(
      "cross_entropy_loss",
      [](const DoubleArray& probabilities, const MaskArray& mask) {
        return fsda::cross_entropy_loss(to_tensor(probabilities), to_mask(mask));
      },
      py::arg("probabilities"), py::arg("mask"));

  m.def("poly_lr", &fsda::poly_lr, py::arg("base_lr"), py::arg("step"), py::arg("max_steps"),
        py::arg("power") = 0.9);

  m.def(
      "miou",
      [](const py::array_t<std::uint64_t, py::array::c_style | py::array::forcecast>& confusion) {
        if (confusion.ndim() != 2 || confusion.shape(0) != confusion.shape(1)) {
          throw py::value_error("expected a square confusion matrix");
        }
        const int n = static_cast<int>(confusion.shape(0));
        fsda::ConfusionMatrix c(n);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < n; ++j) c.at(i, j) = confusion.at(i, j);
        }
        const auto report = fsda::miou(c);
        py::dict out;
        out["per_class_iou"] = report.per_class_iou;
        out["miou"] = report.miou;
        out["excluded"] = report.excluded();
        return out;
      },
      py::arg("confusion"), "Rows are ground truth, columns are predictions.");

  py::class_<fsda::Model>(m, "Model")
      .def(py::init([](std::uint64_t seed, int head_classes, bool use_frm) {
             fsda::EncoderConfig config;
             config.use_frm = use_frm;
             return fsda::Model(config, head_classes, seed);
           }),
           py::arg("seed") = 0, py::arg("head_classes") = 0, py::arg("use_frm") = true)
      .def_property_readonly("output_dim", &fsda::Model::output_dim)
      .def_property_readonly("output_stride", &fsda::Model::output_stride)
      .def_property_readonly("parameter_count", &fsda::Model::parameter_count)
      .def("encode", [](const fsda::Model& model, const DoubleArray& image) {
        return from_tensor(model.encode(to_tensor(image)).values);
      })
      .def("save", [](const fsda::Model& model, const std::string& path) { fsda::save_checkpoint(path, model); })
      .def_static("load", [](const std::string& path) { return fsda::load_checkpoint(path); })
      .def("__eq__", [](const fsda::Model& a, const fsda::Model& b) { return a == b; });

  m.def(
      "episode_loss",
      [](const fsda::Model& model, const DoubleArray& support_image, const MaskArray& support_mask,
         const DoubleArray& query_image, const MaskArray& query_mask, double alpha, double temperature) {
        fsda::TrainConfig config;
        config.alpha = alpha;
        config.temperature = temperature;
        const auto r = fsda::episode_loss(model, make_episode(support_image, support_mask, query_image, query_mask),
                                          config);
        py::dict out;
        out["loss_query"] = r.loss_query;
        out["loss_support"] = r.loss_support;
        out["loss_total"] = r.loss_total;
        out["n_way"] = r.n_way;
        return out;
      },
      py::arg("model"), py::arg("support_image"), py::arg("support_mask"), py::arg("query_image"),
      py::arg("query_mask"), py::arg("alpha") = 0.2, py::arg("temperature") = 1.0,
      "Episodic loss terms for one (support, query) pair with original labels.");

  m.def(
      "segment_image",
      [](const fsda::Model& model, const PrototypeDict& protos, const DoubleArray& image) {
        return from_mask(fsda::segment_image(model, to_bank(protos, model.output_dim()), to_tensor(image)));
      },
      py::arg("model"), py::arg("prototypes"), py::arg("image"));
}
