#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "medmm/connector.hpp"
#include "medmm/error.hpp"
#include "medmm/eval.hpp"
#include "medmm/hier_encoder.hpp"
#include "medmm/image_pyramid.hpp"
#include "medmm/synth.hpp"
#include "medmm/tensor_io.hpp"

namespace py = pybind11;
using namespace medmm;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> tensor_to_numpy(const TensorF32& t) {
  std::vector<py::ssize_t> shape(t.dims().begin(), t.dims().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

TensorF32 numpy_to_tensor(const FloatArray& a) {
  std::vector<uint32_t> dims(a.shape(), a.shape() + a.ndim());
  return TensorF32(std::move(dims), std::vector<float>(a.data(), a.data() + a.size()));
}

ImageF32 numpy_to_image(const FloatArray& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("image must have shape (H, W, 3)");
  return image_from_tensor(numpy_to_tensor(a));
}

py::array_t<float> image_to_numpy(const ImageF32& img) { return tensor_to_numpy(to_tensor(img)); }

ScaleSet make_scale_set(uint32_t base, std::vector<uint32_t> scales) {
  ScaleSet s{base, std::move(scales)};
  s.validate();
  return s;
}

MlpParams<double> make_params(const Mat<double>& w1, const RowVec<double>& b1, const Mat<double>& w2,
                              const RowVec<double>& b2) {
  MlpParams<double> p{w1, b1, w2, b2};
  p.validate();
  return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-scale biomedical vision-language toolkit (C++ core)";

  py::register_exception<Error>(m, "MedmmError", PyExc_RuntimeError);

  // tensorio
  m.def("encode_mstf", [](const FloatArray& a) {
    const auto bytes = encode_mstf(numpy_to_tensor(a));
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });
  m.def("decode_mstf", [](const py::bytes& b) {
    const std::string s = b;
    return tensor_to_numpy(decode_mstf(std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size())));
  });
  m.def("load_image_rgb8", [](const std::filesystem::path& path) {
    const ImageU8 img = load_image_rgb8(path);
    py::array_t<uint8_t> out({static_cast<py::ssize_t>(img.height), static_cast<py::ssize_t>(img.width),
                              py::ssize_t{3}});
    std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
    return out;
  });

  // image_pyramid
  m.def("resize_bilinear", [](const FloatArray& img, uint32_t h, uint32_t w) {
    return image_to_numpy(resize_bilinear(numpy_to_image(img), h, w));
  }, py::arg("image"), py::arg("out_h"), py::arg("out_w"));
  m.def("prepare_square", [](const FloatArray& img, uint32_t base) {
    return image_to_numpy(prepare_square(numpy_to_image(img), base));
  }, py::arg("image"), py::arg("base") = 378);
  m.def("split_tiles", [](const FloatArray& img, uint32_t base) {
    const TileGrid g = split_tiles(numpy_to_image(img), base);
    py::list tiles;
    for (const auto& t : g.tiles) tiles.append(image_to_numpy(t));
    return py::make_tuple(g.rows, g.cols, tiles);
  }, py::arg("image"), py::arg("base") = 378);
  m.def("stitch_tiles", [](uint32_t rows, uint32_t cols, const std::vector<FloatArray>& tiles) {
    TileGrid g{rows, cols, 0, {}};
    for (const auto& t : tiles) g.tiles.push_back(numpy_to_image(t));
    if (!g.tiles.empty()) g.tile_side = g.tiles.front().height;
    return image_to_numpy(stitch_tiles(g));
  }, py::arg("rows"), py::arg("cols"), py::arg("tiles"));
  m.def("build_pyramid", [](const FloatArray& img, uint32_t base, std::vector<uint32_t> scales) {
    py::list out;
    for (const auto& level : build_pyramid(numpy_to_image(img), make_scale_set(base, std::move(scales))))
      out.append(image_to_numpy(level));
    return out;
  }, py::arg("image"), py::arg("base") = 378, py::arg("scales") = std::vector<uint32_t>{378, 756, 1134});

  // hier_encoder
  m.def("encode_multiscale",
        [](const FloatArray& img, const std::string& kind, uint32_t patch, uint32_t dim, uint64_t seed,
           uint32_t base, std::vector<uint32_t> scales, unsigned threads) {
          const EncoderSpec spec{patch, dim, parse_encoder_kind(kind), seed};
          const auto f = encode_multiscale(numpy_to_image(img), make_scale_set(base, std::move(scales)), spec,
                                           threads);
          return tensor_to_numpy(to_tensor(f));
        },
        py::arg("image"), py::arg("kind") = "PatchMean", py::arg("patch") = 14, py::arg("dim") = 3,
        py::arg("seed") = 0, py::arg("base") = 378, py::arg("scales") = std::vector<uint32_t>{378, 756, 1134},
        py::arg("threads") = 1);
  m.def("pool_to_base", [](const FloatArray& grid, uint32_t g) {
    return tensor_to_numpy(to_tensor(pool_to_base(grid_from_tensor(numpy_to_tensor(grid)), g)));
  });

  // connector (float64 math)
  m.def("gelu", [](double z) { return gelu(z); });
  m.def("mlp_forward", [](const Mat<double>& x, const Mat<double>& w1, const RowVec<double>& b1,
                          const Mat<double>& w2, const RowVec<double>& b2) {
    return mlp_forward(x, make_params(w1, b1, w2, b2));
  });
  m.def("alignment_loss", [](const Mat<double>& pred, const Mat<double>& target) {
    return alignment_loss(pred, target);
  });
  m.def("mlp_backward", [](const Mat<double>& x, const Mat<double>& target, const Mat<double>& w1,
                           const RowVec<double>& b1, const Mat<double>& w2, const RowVec<double>& b2) {
    const auto r = mlp_backward(x, target, make_params(w1, b1, w2, b2));
    py::dict d;
    d["loss"] = r.loss;
    d["w1"] = r.grads.w1;
    d["b1"] = r.grads.b1;
    d["w2"] = r.grads.w2;
    d["b2"] = r.grads.b2;
    return d;
  });
  m.def("lr_at", [](uint64_t step, uint64_t total, const std::string& stage) {
    return lr_at(step, total, TrainConfig::for_stage(parse_stage(stage)));
  }, py::arg("step"), py::arg("total_steps"), py::arg("stage") = "ConnectorPretrain");
  m.def("train_stage",
        [](const Mat<float>& x, const Mat<float>& y, uint32_t hidden, const std::string& stage, double lr,
           uint32_t batch, uint32_t epochs, uint64_t seed) {
          TrainConfig cfg = TrainConfig::for_stage(parse_stage(stage));
          cfg.learning_rate = lr;
          cfg.global_batch = batch;
          cfg.epochs = epochs;
          cfg.seed = seed;
          const auto r = train_stage(x, y, cfg, FreezeMask::for_stage(cfg.stage),
                                     init_mlp(x.cols(), hidden, y.cols(), seed));
          py::list losses;
          for (const auto& s : r.trace) losses.append(s.loss);
          py::dict d;
          d["w1"] = r.params.w1;
          d["b1"] = r.params.b1;
          d["w2"] = r.params.w2;
          d["b2"] = r.params.b2;
          d["losses"] = losses;
          return d;
        },
        py::arg("x"), py::arg("y"), py::arg("hidden"), py::arg("stage") = "ConnectorPretrain",
        py::arg("lr") = 1e-3, py::arg("batch") = 256, py::arg("epochs") = 1, py::arg("seed") = 0);

  // synth
  m.attr("SYSTEM_PROMPT") = std::string(kSystemPrompt);
  m.def("build_prompt", [](const std::string& caption, const std::vector<std::string>& mentions) {
    const Prompt p = build_prompt({"sample", "", caption, mentions}, {});
    return py::make_tuple(p.system, p.user);
  }, py::arg("caption"), py::arg("mentions") = std::vector<std::string>{});
  m.def("assign_providers", [](const std::vector<std::string>& ids, double ratio_a, uint64_t seed) {
    std::map<std::string, std::string> out;
    for (const auto& [id, slot] : assign_providers(ids, {ratio_a, seed})) out[id] = to_string(slot);
    return out;
  }, py::arg("ids"), py::arg("ratio_a") = 0.25, py::arg("seed") = 0);
  m.def("parse_conversation", [](const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& t : parse_conversation(text).turns)
      out.emplace_back(t.role == Role::Human ? "human" : "gpt", t.text);
    return out;
  });

  // eval
  m.def("normalize", [](const std::string& s) { return normalize(s); });
  m.def("open_recall", [](const std::string& pred, const std::string& answer) {
    return open_recall(pred, answer);
  }, py::arg("pred"), py::arg("answer"));
  m.def("evaluate_jsonl", [](const std::string& predictions, const std::string& dataset) {
    const auto r = evaluate(parse_predictions_jsonl(predictions), parse_vqa_jsonl(dataset));
    py::dict d;
    d["open_recall"] = r.open_recall;
    d["closed_accuracy"] = r.closed_accuracy;
    d["average"] = r.average();
    d["n_open"] = r.n_open;
    d["n_closed"] = r.n_closed;
    return d;
  }, py::arg("predictions"), py::arg("dataset"));
}
