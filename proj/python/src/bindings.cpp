#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "promptrestore/harness.hpp"
#include "promptrestore/image.hpp"
#include "promptrestore/metrics.hpp"
#include "promptrestore/pipeline.hpp"
#include "promptrestore/train.hpp"

namespace py = pybind11;
using namespace promptrestore;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

// [H, W, 3] float array in [0, 1] <-> planar Image.
Image from_array(const FloatArray& array) {
  if (array.ndim() != 3 || array.shape(2) != 3) throw InvalidArgument("expected an [H, W, 3] array");
  const auto h = static_cast<int>(array.shape(0)), w = static_cast<int>(array.shape(1));
  Image img(h, w);
  auto a = array.unchecked<3>();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img.at(c, y, x) = a(y, x, c);
  return img;
}

FloatArray to_array(const Image& img) {
  FloatArray out({img.height(), img.width(), 3});
  auto a = out.mutable_unchecked<3>();
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) a(y, x, c) = img.at(c, y, x);
  return out;
}

DegradationSpec spec_from(const py::dict& d) {
  return DegradationSpec::from_json(nlohmann::json::parse(py::module_::import("json").attr("dumps")(d).cast<std::string>()));
}

// Backbone and text encoder checkpoints loaded together for inference.
class Restorer {
 public:
  Restorer(const std::string& backbone, const std::string& text_encoder)
      : model_(load_backbone(backbone)), bundle_(load_text_encoder(text_encoder)),
        guidance_(bundle_.encoder, bundle_.corpus) {
    model_->eval();
  }

  FloatArray restore_image(const FloatArray& image, const std::string& prompt) {
    return to_array(restore(model_, guidance_, from_array(image), prompt));
  }

  std::vector<float> embed(const std::string& prompt) { return guidance_.single(prompt).values; }

  std::string category(const std::string& prompt) {
    const auto z = embed(prompt);
    return std::string(to_string(bundle_.centroids.nearest(std::vector<double>(z.begin(), z.end()))));
  }

 private:
  RestorationNet model_;
  TextEncoderBundle bundle_;
  GuidanceProvider guidance_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Prompt-guided image restoration core";
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);

  m.def("psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(from_array(a), from_array(b)); },
        py::arg("restored"), py::arg("reference"));
  m.def("ssim", [](const FloatArray& a, const FloatArray& b) { return ssim(from_array(a), from_array(b)); },
        py::arg("restored"), py::arg("reference"));
  m.def("cluster_score", &cluster_score, py::arg("embeddings"), py::arg("labels"));

  m.def(
      "degrade",
      [](const FloatArray& clean, const std::vector<py::dict>& specs, uint64_t seed) {
        std::vector<DegradationSpec> parsed;
        for (const auto& s : specs) parsed.push_back(spec_from(s));
        Rng rng(seed);
        return to_array(compose(from_array(clean), parsed, rng));
      },
      py::arg("clean"), py::arg("specs"), py::arg("seed") = 0,
      "Applies degradation specs such as {'kind': 'noise', 'sigma': 0.1} in list order.");
  m.def(
      "synthetic_images",
      [](int count, int size, uint64_t seed) {
        Rng rng(seed);
        std::vector<FloatArray> out;
        for (const auto& img : synthetic_clean_images(count, size, size, rng)) out.push_back(to_array(img));
        return out;
      },
      py::arg("count"), py::arg("size"), py::arg("seed") = 0);

  m.def(
      "generate_corpus",
      [](uint64_t seed, int per_category) {
        const auto corpus = InstructionCorpus::generate(seed, per_category);
        std::vector<std::tuple<std::string, std::string, std::string>> out;
        for (const auto& ins : corpus.instructions()) {
          out.emplace_back(ins.text, std::string(to_string(ins.category)), std::string(to_string(ins.split)));
        }
        return out;
      },
      py::arg("seed") = 0, py::arg("per_category") = 50, "(text, category, split) triples.");

  m.def(
      "preset",
      [](const std::string& name) { return BackboneConfig::preset(name).to_text(); }, py::arg("name"),
      "Backbone preset as `key = value` text.");
  m.def(
      "encoder_ladder",
      [](const std::string& config_text) {
        RestorationNet net(BackboneConfig::from_text(config_text));
        return net->encoder_ladder();
      },
      py::arg("config_text"), "(channels, blocks) per encoder level.");

  py::class_<Restorer>(m, "Restorer")
      .def(py::init<const std::string&, const std::string&>(), py::arg("backbone"), py::arg("text_encoder"))
      .def("restore", &Restorer::restore_image, py::arg("image"), py::arg("prompt"))
      .def("embed", &Restorer::embed, py::arg("prompt"))
      .def("category", &Restorer::category, py::arg("prompt"));
}
