#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "kcalnet/app.hpp"
#include "kcalnet/checkpoint.hpp"
#include "kcalnet/config.hpp"
#include "kcalnet/errors.hpp"
#include "kcalnet/layers.hpp"
#include "kcalnet/ops.hpp"
#include "kcalnet/stats.hpp"
#include "kcalnet/synth.hpp"
#include "kcalnet/verify.hpp"

namespace py = pybind11;
using namespace kcalnet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor run_op(const std::function<Var(Tape&)>& f) {
  Tape tape;
  return f(tape).value();
}

ops::Padding parse_padding(const std::string& p) {
  if (p == "same") return ops::Padding::kSame;
  if (p == "valid") return ops::Padding::kValid;
  throw ArgumentError("padding must be 'same' or 'valid', got '" + p + "'");
}

py::dict ttest_dict(const TTestResult& r) {
  py::dict d;
  d["t_stat"] = r.t_stat;
  d["p_value"] = r.p_value;
  d["df"] = r.df;
  d["mean_diff"] = r.mean_diff;
  d["sd_diff"] = r.sd_diff;
  d["alpha"] = r.alpha;
  d["reject_null"] = r.reject_null;
  return d;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["mae"] = r.mae;
  d["abs_err_std"] = r.abs_err_std;
  d["r2"] = r.r2;
  d["n"] = r.n;
  return d;
}

PredictionSet make_set(const std::vector<double>& y_true, const std::vector<double>& y_pred) {
  PredictionSet ps;
  for (std::size_t i = 0; i < y_true.size(); ++i) ps.dish_ids.push_back(std::to_string(i));
  ps.y_true = y_true;
  ps.y_pred = y_pred;
  return ps;
}

/// Model plus the vectorizer that turns dish names into token ids.
struct PyModel {
  CalorieModel model;
  std::optional<Vectorizer> vectorizer;

  Array predict(const Array& images, const std::vector<std::string>& names) const {
    const Tensor x = to_tensor(images);
    std::vector<std::size_t> ids;
    if (model.kind() == ModelKind::kMultimodal) {
      if (!vectorizer) throw ArgumentError("this multimodal model has no vocabulary");
      for (const auto& n : names) {
        const auto v = vectorizer->vectorize(n);
        ids.insert(ids.end(), v.begin(), v.end());
      }
    } else if (!names.empty()) {
      throw ArgumentError("the unimodal model does not accept dish names");
    }
    return to_array(model.predict(x, ids));
  }
};

TrainConfig config_from(const std::string& preset, const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> all{{"preset", preset}};
  all.insert(overrides.begin(), overrides.end());
  return resolve_config(nullptr, all);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Image-only and image+text calorie regressors with the paired comparison protocol.";

  static py::exception<Error> base(m, "KcalnetError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      base(e.what());
    }
  });

  m.def("conv2d", [](const Array& x, const Array& k, std::size_t stride, const std::string& padding) {
        const Tensor tx = to_tensor(x), tk = to_tensor(k);
        return to_array(run_op([&](Tape& t) { return ops::conv2d(t.constant(tx), t.constant(tk), stride, parse_padding(padding)); }));
      },
      py::arg("x"), py::arg("kernel"), py::arg("stride") = 1, py::arg("padding") = "same",
      "NHWC input, [kh, kw, Cin, Cout] kernel.");
  m.def("depthwise_conv2d", [](const Array& x, const Array& k, std::size_t stride, const std::string& padding) {
        const Tensor tx = to_tensor(x), tk = to_tensor(k);
        return to_array(run_op([&](Tape& t) {
          return ops::depthwise_conv2d(t.constant(tx), t.constant(tk), stride, parse_padding(padding));
        }));
      },
      py::arg("x"), py::arg("kernel"), py::arg("stride") = 1, py::arg("padding") = "same",
      "NHWC input, [kh, kw, C] kernel.");
  m.def("matmul", [](const Array& a, const Array& b) {
    const Tensor ta = to_tensor(a), tb = to_tensor(b);
    return to_array(run_op([&](Tape& t) { return ops::matmul(t.constant(ta), t.constant(tb)); }));
  });
  m.def("softmax", [](const Array& x, std::size_t axis) {
    const Tensor tx = to_tensor(x);
    return to_array(run_op([&](Tape& t) { return ops::softmax(t.constant(tx), axis); }));
  }, py::arg("x"), py::arg("axis"));
  m.def("dense_relu_grad", [](const Array& x, const Array& w, const Array& b) {
        // Gradient of sum(relu(x @ w + b)) with respect to x, w and b.
        Tape t;
        Parameter pw{"w", to_tensor(w)}, pb{"b", to_tensor(b)};
        Var vx = t.variable(to_tensor(x));
        Var y = ops::sum(ops::relu(ops::add(ops::matmul(vx, t.watch(pw)), t.watch(pb))));
        Gradients g = t.backward(y);
        return py::make_tuple(to_array(g.of(vx)), to_array(g.of(pw)), to_array(g.of(pb)));
      },
      "Reverse-mode gradients of sum(relu(x @ w + b)).");

  m.def("student_t_upper_tail", &student_t_upper_tail, py::arg("t"), py::arg("df"));
  m.def("paired_t_test", [](const std::vector<double>& a, const std::vector<double>& b, double alpha) {
    return ttest_dict(paired_t_test(a, b, alpha));
  }, py::arg("errors_a"), py::arg("errors_b"), py::arg("alpha") = 0.1);
  m.def("report", [](const std::vector<double>& y_true, const std::vector<double>& y_pred) {
    return report_dict(report(make_set(y_true, y_pred)));
  }, py::arg("y_true"), py::arg("y_pred"));
  m.def("compare_summary",
        [](py::dict a, py::dict b, double t_stat, double p_value, double alpha) {
          const EvalReport ra{a["mae"].cast<double>(), a["abs_err_std"].cast<double>(), a["r2"].cast<double>(),
                              a["n"].cast<std::size_t>()};
          const EvalReport rb{b["mae"].cast<double>(), b["abs_err_std"].cast<double>(), b["r2"].cast<double>(),
                              b["n"].cast<std::size_t>()};
          const Comparison c = compare(ra, rb, ttest_from_summary(t_stat, p_value, ra.n, alpha));
          py::dict d;
          d["delta_mae"] = c.delta_mae;
          d["delta_std"] = c.delta_std;
          d["delta_r2"] = c.delta_r2;
          d["verdict"] = c.verdict();
          d["ttest"] = ttest_dict(c.ttest);
          return d;
        },
        py::arg("report_a"), py::arg("report_b"), py::arg("t_stat"), py::arg("p_value"), py::arg("alpha") = 0.1,
        "Comparison of two published summaries; deltas are positive when B improves on A.");

  m.def("synth_generate",
        [](std::size_t n, std::uint64_t seed, double text_signal, std::size_t image_size) {
          SynthOptions o;
          o.n = n;
          o.seed = seed;
          o.text_signal = text_signal;
          o.image_size = image_size;
          const SynthDataset data = synth_generate(o);
          py::list records;
          for (const auto& r : data.records) {
            py::dict d;
            d["dish_id"] = r.dish_id;
            d["dish_name"] = r.dish_name;
            d["calories"] = r.calories;
            records.append(d);
          }
          py::array_t<std::uint8_t> images({n, image_size, image_size, std::size_t{3}});
          auto* dst = images.mutable_data();
          for (const auto& img : data.images) dst = std::copy(img.pixels.begin(), img.pixels.end(), dst);
          return py::make_tuple(records, images, data.areas);
        },
        py::arg("n") = 1000, py::arg("seed") = 0, py::arg("text_signal") = 0.5, py::arg("image_size") = 64,
        "Returns (records, uint8 images [n, s, s, 3], blob areas).");

  py::class_<PyModel>(m, "Model")
      .def_static("build",
                  [](const std::string& kind, const std::string& preset, std::uint64_t seed,
                     const std::map<std::string, std::string>& overrides) {
                    const TrainConfig cfg = config_from(preset, overrides);
                    return PyModel{CalorieModel::build(parse_model_kind(kind), cfg.arch, seed), std::nullopt};
                  },
                  py::arg("kind"), py::arg("preset") = "micro", py::arg("seed") = 0,
                  py::arg("overrides") = std::map<std::string, std::string>{})
      .def_static("load",
                  [](const std::filesystem::path& path) {
                    Checkpoint ck = load_checkpoint(path);
                    return PyModel{std::move(ck.model), std::move(ck.vectorizer)};
                  })
      .def_property_readonly("kind", [](const PyModel& p) { return to_string(p.model.kind()); })
      .def_property_readonly("param_count", [](const PyModel& p) { return p.model.param_count(); })
      .def_property_readonly("image_size", [](const PyModel& p) { return p.model.config().image_size; })
      .def("layer_signatures", [](const PyModel& p) { return p.model.layer_signatures(); })
      .def("predict", &PyModel::predict, py::arg("images"), py::arg("names") = std::vector<std::string>{},
           "Eval-mode kcal predictions for float images in [0, 1], shape [B, s, s, 3].");

  m.def("config", [](const std::string& preset, const std::map<std::string, std::string>& overrides) {
    return to_key_values(config_from(preset, overrides));
  }, py::arg("preset") = "micro", py::arg("overrides") = std::map<std::string, std::string>{});

  m.def("synth",
        [](const std::filesystem::path& out, std::size_t n, std::uint64_t seed, double text_signal,
           std::size_t image_size, bool force) {
          SynthArgs a;
          a.out = out;
          a.n = n;
          a.seed = seed;
          a.text_signal = text_signal;
          a.image_size = image_size;
          a.force = force;
          std::ostringstream log;
          return cmd_synth(a, log);
        },
        py::arg("out"), py::arg("n") = 1000, py::arg("seed") = 0, py::arg("text_signal") = 0.5,
        py::arg("image_size") = 64, py::arg("force") = false);
  m.def("train",
        [](const std::filesystem::path& data, const std::string& model, const std::filesystem::path& out,
           const std::map<std::string, std::string>& overrides) {
          TrainArgs a;
          a.data = data;
          a.model = parse_model_kind(model);
          a.out = out;
          a.overrides = overrides;
          std::ostringstream log;
          py::gil_scoped_release release;
          return cmd_train(a, log);
        },
        py::arg("data"), py::arg("model"), py::arg("out"),
        py::arg("overrides") = std::map<std::string, std::string>{});
  m.def("evaluate",
        [](const std::filesystem::path& checkpoint, const std::filesystem::path& data, const std::filesystem::path& out,
           const std::string& split) {
          EvalArgs a;
          a.checkpoint = checkpoint;
          a.data = data;
          a.out = out;
          a.split = split;
          std::ostringstream log;
          py::gil_scoped_release release;
          return cmd_eval(a, log);
        },
        py::arg("checkpoint"), py::arg("data"), py::arg("out"), py::arg("split") = "test");
  m.def("compare",
        [](const std::filesystem::path& a, const std::filesystem::path& b, const std::filesystem::path& out,
           double alpha) {
          CompareArgs c;
          c.eval_a = a;
          c.eval_b = b;
          c.out = out;
          c.alpha = alpha;
          std::ostringstream log;
          const Comparison r = cmd_compare(c, log);
          py::dict d;
          d["delta_mae"] = r.delta_mae;
          d["delta_std"] = r.delta_std;
          d["delta_r2"] = r.delta_r2;
          d["verdict"] = r.verdict();
          d["ttest"] = ttest_dict(r.ttest);
          d["a"] = report_dict(r.a);
          d["b"] = report_dict(r.b);
          return d;
        },
        py::arg("eval_a"), py::arg("eval_b"), py::arg("out"), py::arg("alpha") = 0.1);
  m.def("verify",
        [](const std::string& suite) {
          py::list out;
          for (const auto& r : run_verify_suite(suite)) out.append(py::make_tuple(r.name, r.pass, r.detail));
          return out;
        },
        py::arg("suite"), "List of (check, passed, detail).");
}
