// SPDX-License-Identifier: Apache-2.0
//
// Python bindings: losses, view generation, embedding files, evaluation and
// the gradient check. Arrays cross the boundary as numpy float64 / uint8.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "tmkd/config.hpp"
#include "tmkd/distill.hpp"
#include "tmkd/errors.hpp"
#include "tmkd/gradcheck.hpp"
#include "tmkd/textguide.hpp"
#include "tmkd/train.hpp"
#include "tmkd/viewgen.hpp"

namespace py = pybind11;
using namespace tmkd;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64& a) {
  if (a.ndim() != 1 && a.ndim() != 2) throw DimensionError("expected a 1-D or 2-D array");
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<std::size_t>(a.shape(i)));
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> view_array(const views::ViewImage& v) {
  py::array_t<double> out({v.height, v.width, std::size_t{3}});
  std::memcpy(out.mutable_data(), v.values.data(), v.values.size() * sizeof(double));
  return out;
}

views::RgbImage to_image(const U8& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw DimensionError("expected an H x W x 3 uint8 array");
  views::RgbImage img(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::memcpy(img.pixels.data(), a.data(), img.pixels.size());
  return img;
}

py::dict table_dict(const text::EmbeddingTable& t) {
  py::dict d;
  for (const auto& [key, v] : t.entries()) d[py::str(key)] = py::array_t<float>(v.size(), v.data());
  return d;
}

text::EmbeddingTable dict_table(const py::dict& d) {
  text::EmbeddingTable t;
  bool first = true;
  for (const auto& [k, v] : d) {
    auto arr = py::array_t<float, py::array::c_style | py::array::forcecast>::ensure(v);
    if (!arr || arr.ndim() != 1) throw DimensionError("embedding values must be 1-D");
    std::vector<float> vals(arr.data(), arr.data() + arr.size());
    if (first) t = text::EmbeddingTable(vals.size());
    first = false;
    t.add(py::cast<std::string>(k), std::move(vals));
  }
  return t;
}

views::ViewKind parse_kind(const std::string& s) {
  for (auto k : text::kAllViews)
    if (views::to_string(k) == s) return k;
  throw ConfigError("unknown view '" + s + "' (rgb, edge, hf)");
}

}  // namespace

PYBIND11_MODULE(_tmkd, m) {
  m.doc() = "Text-guided multi-view knowledge distillation core";

  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<LookupError>(m, "MissingKeyError", PyExc_KeyError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  m.def(
      "feature_loss",
      [](const F64& student, const F64& teacher, double tau) {
        Tape tape;
        return distill::feature_loss(tape, to_tensor(student), to_tensor(teacher), tau).item();
      },
      py::arg("student"), py::arg("teacher"), py::arg("tau") = 2.0);
  m.def(
      "logit_loss",
      [](const F64& z_t, const F64& z_s, double tau, bool scale) {
        Tape tape;
        return distill::logit_loss(tape, to_tensor(z_t), to_tensor(z_s), tau, scale).item();
      },
      py::arg("z_t"), py::arg("z_s"), py::arg("tau") = 4.0, py::arg("scale_by_tau_sq") = false);
  m.def(
      "crd_loss",
      [](const F64& z_s, const F64& z_text, double tau) {
        Tape tape;
        return distill::crd_loss(tape, to_tensor(z_s), to_tensor(z_text), tau).item();
      },
      py::arg("z_s"), py::arg("z_text"), py::arg("tau") = 2.0);

  m.def(
      "make_views",
      [](const U8& image, double alpha_e, double alpha_hf, double canny_low, double canny_high, double sigma,
         int kernel) {
        views::ViewGenConfig cfg{canny_low, canny_high, alpha_e, alpha_hf, sigma, kernel};
        const auto mv = views::make_views(to_image(image), cfg);
        py::dict d;
        d["rgb"] = view_array(mv.rgb);
        d["edge"] = view_array(mv.edge);
        d["hf"] = view_array(mv.hf);
        return d;
      },
      py::arg("image"), py::arg("alpha_e") = 1.5, py::arg("alpha_hf") = 1.5, py::arg("canny_low") = 100.0,
      py::arg("canny_high") = 200.0, py::arg("sigma") = 1.0, py::arg("kernel") = 5);
  m.def(
      "canny",
      [](const F64& channel, double low, double high) {
        if (channel.ndim() != 2) throw DimensionError("expected a 2-D array");
        views::Channel ch(static_cast<std::size_t>(channel.shape(0)), static_cast<std::size_t>(channel.shape(1)));
        std::memcpy(ch.values.data(), channel.data(), ch.values.size() * sizeof(double));
        const auto e = views::canny_channel(ch, low, high);
        py::array_t<std::uint8_t> out({e.height, e.width});
        std::memcpy(out.mutable_data(), e.values.data(), e.values.size());
        return out;
      },
      py::arg("channel"), py::arg("low") = 100.0, py::arg("high") = 200.0);

  m.def("embedding_key", [](const std::string& cls, const std::string& view) {
    return text::embedding_key(cls, parse_kind(view));
  });
  m.def(
      "pseudo_embeddings",
      [](const std::vector<std::string>& classes, std::size_t dim, std::uint64_t seed) {
        return table_dict(text::pseudo_embeddings(classes, {}, dim, seed));
      },
      py::arg("classes"), py::arg("dim") = 64, py::arg("seed") = 0);
  m.def("parse_embeddings", [](const py::bytes& b) {
    const std::string s = b;
    return table_dict(text::parse_embeddings(
        std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
  });
  m.def("encode_embeddings", [](const py::dict& d) {
    const auto bytes = text::encode_embeddings(dict_table(d));
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });
  m.def("load_embeddings", [](const std::string& path) { return table_dict(text::load_embeddings(path)); });
  m.def("missing_keys", [](const py::dict& d, const std::vector<std::string>& classes) {
    return text::missing_keys(dict_table(d), classes);
  });

  m.def(
      "evaluate_logits",
      [](const F64& logits, const std::vector<std::size_t>& labels, std::size_t k) {
        const auto r = train::evaluate_logits(to_tensor(logits), labels, k);
        py::dict d;
        d["top1"] = r.top1;
        d["topk"] = r.topk;
        d["macro_recall"] = r.macro_recall;
        d["k"] = r.k;
        return d;
      },
      py::arg("logits"), py::arg("labels"), py::arg("k") = 5);
  m.def(
      "gradcheck",
      [](std::uint64_t seed, std::size_t trials, double tol) {
        const auto r = run_gradcheck(seed, trials, tol);
        return py::make_tuple(r.passed, format_report(r, tol));
      },
      py::arg("seed") = 0, py::arg("trials") = 20, py::arg("tol") = 1e-4);
  m.def("default_config", [] { return config::render(config::RunConfig{}); });
  m.def("resolve_config", [](const std::string& text) { return config::render(config::apply(config::parse_entries(text))); });
}
