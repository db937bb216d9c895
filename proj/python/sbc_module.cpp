#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cli.hpp"
#include "sbc/binio.hpp"
#include "sbc/block_structure.hpp"
#include "sbc/compressor.hpp"
#include "sbc/errors.hpp"
#include "sbc/priors.hpp"
#include "sbc/trainer.hpp"

namespace py = pybind11;
using namespace sbc;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array a(shape);
  std::copy(t.values().begin(), t.values().end(), a.mutable_data());
  return a;
}

// images: [n, d] or [n, h, w]; labels: [n]
Dataset make_dataset(const Array& images, const std::vector<int>& labels, std::size_t classes) {
  if (images.ndim() < 2) throw DimensionError("images need a leading sample axis");
  const std::size_t n = static_cast<std::size_t>(images.shape(0));
  if (n != labels.size()) throw DimensionError("images and labels disagree on the sample count");
  Dataset d;
  Shape per(images.shape() + 1, images.shape() + images.ndim());
  if (per.size() == 2) per.insert(per.begin(), 1);
  d.image_shape = per;
  d.images = Tensor({n, shape_numel(per)}, std::vector<double>(images.data(), images.data() + images.size()));
  d.labels = labels;
  d.classes = classes;
  return d;
}

py::dict history_dict(const TrainHistory& h) {
  py::dict d;
  std::vector<int> epoch;
  std::vector<double> loss, nll, kl, err;
  for (const auto& e : h.epochs) {
    epoch.push_back(e.epoch);
    loss.push_back(e.loss);
    nll.push_back(e.nll);
    kl.push_back(e.kl);
    err.push_back(e.test_error);
  }
  d["epoch"] = epoch;
  d["loss"] = loss;
  d["nll"] = nll;
  d["kl"] = kl;
  d["test_error"] = err;
  return d;
}

}  // namespace

PYBIND11_MODULE(_sbc, m) {
  m.doc() = "Structured Bayesian compression of small neural networks";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);
  py::register_exception<PruneError>(m, "PruneError", PyExc_RuntimeError);

  // priors
  m.def("kl_laplace", [](double mu, double var, double b) { return priors::kl_laplace({mu, std::log(var)}, b); },
        py::arg("mu"), py::arg("var"), py::arg("b"));
  m.def("kl_jeffreys", [](double mu, double var) { return priors::kl_jeffreys({mu, std::log(var)}); },
        py::arg("mu"), py::arg("var"));
  m.def(
      "kl_horseshoe",
      [](double mu, double var, double z_mu, double z_log_var, double l_mu, double l_log_var, double tau) {
        return priors::kl_horseshoe({mu, std::log(var)}, {{z_mu, z_log_var}, {l_mu, l_log_var}}, tau);
      },
      py::arg("mu"), py::arg("var"), py::arg("scale_mu"), py::arg("scale_log_var"), py::arg("aux_mu"),
      py::arg("aux_log_var"), py::arg("tau"));
  m.def("dirichlet_elogpi", [](const std::vector<double>& a) { return priors::dirichlet_elogpi(a); });
  m.def("mixture_responsibilities", [](const std::vector<double>& kls, const std::vector<double>& elogpi) {
    return priors::mixture_responsibilities(kls, elogpi);
  });
  m.def("mixture_kl_bound", [](const std::vector<double>& kls, const std::vector<double>& r,
                               const std::vector<double>& elogpi) { return priors::mixture_kl_bound(kls, r, elogpi); });
  m.def("prior_logpdf", [](const std::string& kind, double scale, double w) {
    return priors::prior_logpdf({priors::prior_kind_from_string(kind), scale}, w);
  });

  // blocks
  m.def(
      "block_layout",
      [](std::size_t n, std::size_t b, std::size_t s) {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (const auto& r : make_layout(n, b, s).blocks) out.emplace_back(r.offset, r.length);
        return out;
      },
      py::arg("n"), py::arg("block_size"), py::arg("stride"));
  m.def(
      "cluster_penalty",
      [](const std::vector<double>& w, std::size_t b, std::size_t s) {
        return cluster_sparsity_penalty(make_layout(w.size(), b, s), w);
      },
      py::arg("w"), py::arg("block_size"), py::arg("stride"));
  m.def(
      "skew_penalty",
      [](const std::vector<double>& w, std::size_t b, std::size_t s) {
        const auto l = make_layout(w.size(), b, s);
        return skew_penalty(block_energies(l, w));
      },
      py::arg("w"), py::arg("block_size"), py::arg("stride"));
  m.def(
      "block_recovery",
      [](std::size_t n, std::size_t b, std::size_t k, std::size_t samples, double snr_db, std::uint64_t seed,
         int steps) {
        const auto p = synth_blocksparse_snr(n, b, k, samples, snr_db, seed);
        BlockFitConfig cfg;
        cfg.block_size = b;
        cfg.stride = std::max<std::size_t>(1, b / 2);
        cfg.steps = steps;
        const auto w = fit_block_regression(p, cfg);
        const auto found = detect_blocks(w, b);
        return py::make_tuple(found, p.active_blocks, block_f1(found, p.active_blocks));
      },
      py::arg("n") = 256, py::arg("block_size") = 16, py::arg("k") = 3, py::arg("samples") = 512,
      py::arg("snr_db") = 20.0, py::arg("seed") = 1, py::arg("steps") = 4000,
      "Fits a penalised block-sparse regression; returns (found, true, F1).");

  // data
  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&make_dataset), py::arg("images"), py::arg("labels"), py::arg("classes") = 10)
      .def("__len__", &Dataset::size)
      .def_property_readonly("images", [](const Dataset& d) { return to_array(d.images); })
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("classes", &Dataset::classes)
      .def("head", &Dataset::head);
  m.def("load_mnist", &load_mnist_split, py::arg("dir"), py::arg("split"));
  m.def("synth_classification", &synth_classification, py::arg("n"), py::arg("classes"), py::arg("image_size"),
        py::arg("seed"));

  // models
  py::class_<Model>(m, "Model")
      .def_property_readonly("architecture", [](const Model& mo) { return mo.arch.name; })
      .def_property_readonly("weight_count", &Model::weight_count)
      .def_property_readonly("kept_weight_count", &Model::kept_weight_count)
      .def("predict", [](const Model& mo, const Array& x) { return to_array(predict(mo, to_tensor(x))); })
      .def("evaluate", [](const Model& mo, const Dataset& d) { return evaluate(mo, d); })
      .def("save", [](const Model& mo, const std::string& p) { save_checkpoint(mo, p); })
      .def_static("load", &load_checkpoint)
      .def("units", [](const Model& mo) { return kept_units(mo); });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("arch", &TrainConfig::arch)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("logvar_lr_scale", &TrainConfig::logvar_lr_scale)
      .def_readwrite("scale_lr_scale", &TrainConfig::scale_lr_scale)
      .def_readwrite("lambda_cluster", &TrainConfig::lambda_cluster)
      .def_readwrite("lambda_skew", &TrainConfig::lambda_skew)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("prune_epoch", &TrainConfig::prune_epoch)
      .def_readwrite("finetune", &TrainConfig::finetune)
      .def_readwrite("finetune_epochs", &TrainConfig::finetune_epochs)
      .def_readwrite("pretrain_epochs", &TrainConfig::pretrain_epochs)
      .def_readwrite("bayesian", &TrainConfig::bayesian)
      .def_property(
          "group_tau", [](const TrainConfig& c) { return c.thresholds.group_tau; },
          [](TrainConfig& c, double v) { c.thresholds.group_tau = v; })
      .def_property(
          "weight_tau", [](const TrainConfig& c) { return c.thresholds.weight_log_alpha_tau; },
          [](TrainConfig& c, double v) { c.thresholds.weight_log_alpha_tau = v; });

  m.def(
      "train",
      [](const TrainConfig& cfg, const Dataset& train_set, const Dataset* test_set) {
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(cfg, train_set, test_set);
        }
        py::dict out;
        out["history"] = history_dict(r.history);
        if (r.pre_prune) out["pre_prune"] = *r.pre_prune;
        out["model"] = std::move(r.model);
        return out;
      },
      py::arg("config"), py::arg("train"), py::arg("test") = nullptr,
      "Returns a dict with the trained model, its history and the pre-pruning snapshot when pruned.");

  // compression
  m.def(
      "prune",
      [](const Model& mo, double group_tau, double weight_tau) { return prune(mo, {group_tau, weight_tau}).model; },
      py::arg("model"), py::arg("group_tau") = -4.0, py::arg("weight_tau") = 3.0);
  m.def("assign_bits", py::overload_cast<const Model&>(&assign_bits));

  py::class_<CompressedModel>(m, "CompressedModel")
      .def_static("load", &import_compressed)
      .def("predict", [](const CompressedModel& c, const Array& x) { return to_array(sparse_forward(c, to_tensor(x))); })
      .def("kept", [](const CompressedModel& c) {
        std::vector<std::size_t> k;
        for (const auto& l : c.layers) k.push_back(l.kept());
        return k;
      });
  m.def(
      "compress",
      [](const Model& dense, const Model& pruned, const std::string& path) {
        const auto bits = assign_bits(pruned);
        const auto bytes = export_compressed(pruned, bits);
        binio::write_file(path, bytes);
        const CompressionReport rep = compression_metrics(dense, decode_compressed(bytes));
        return report_json(rep);
      },
      py::arg("dense"), py::arg("pruned"), py::arg("path"),
      "Writes the compressed model and returns the report as a JSON string.");
  m.def(
      "sweep",
      [](const Model& mo, const std::vector<double>& fractions, const Dataset& test) {
        std::vector<std::tuple<double, double, double>> out;
        for (const auto& p : sweep_curve(mo, thresholds_for_fractions(mo, fractions), test))
          out.emplace_back(p.threshold, p.kept_fraction, p.error);
        return out;
      },
      py::arg("model"), py::arg("fractions"), py::arg("test"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> all{"sbc"};
        all.insert(all.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : all) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int rc = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(rc, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line in-process; returns (exit code, stdout, stderr).");
}
