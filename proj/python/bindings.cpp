#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "fedsc/cli.hpp"
#include "fedsc/data.hpp"
#include "fedsc/error.hpp"
#include "fedsc/federation.hpp"
#include "fedsc/losses.hpp"
#include "fedsc/prototypes.hpp"
#include "fedsc/theory.hpp"

namespace py = pybind11;
using namespace fedsc;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Dataset dataset_from_numpy(const FloatArray& features, const std::vector<int>& labels, int num_classes) {
  if (features.ndim() != 2) throw Error(ErrorCode::kInvalidArgument, "features must be a 2-d array");
  const auto n = static_cast<std::size_t>(features.shape(0));
  if (n != labels.size()) throw Error(ErrorCode::kShapeMismatch, "features and labels differ in length");
  Dataset d(static_cast<std::size_t>(features.shape(1)), num_classes);
  d.features.assign(features.data(), features.data() + features.size());
  d.labels = labels;
  d.validate();
  return d;
}

py::array_t<float> dataset_features(const Dataset& d) {
  py::array_t<float> out({d.size(), d.dim});
  std::copy(d.features.begin(), d.features.end(), out.mutable_data());
  return out;
}

RelationalSet relational_from(const std::vector<Matrix>& per_class) {
  RelationalSet r;
  r.per_class = per_class;
  const std::size_t clients = per_class.empty() ? 0 : static_cast<std::size_t>(per_class.front().rows());
  r.valid.assign(per_class.size() * clients, true);
  return r;
}

ConsistentSet consistent_from(const Matrix& vectors) {
  ConsistentSet c;
  c.vectors = vectors;
  c.supported.assign(static_cast<std::size_t>(vectors.rows()), true);
  return c;
}

}  // namespace

PYBIND11_MODULE(_fedsc, m) {
  m.doc() = "FedSC federated learning simulator";

  static py::exception<Error> fedsc_error(m, "FedscError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = py::handle(fedsc_error.ptr())(e.what());
      err.attr("code") = std::string(error_name(e.code()));
      PyErr_SetObject(fedsc_error.ptr(), err.ptr());
    }
  });

  py::class_<Dataset>(m, "Dataset")
      .def(py::init(&dataset_from_numpy), py::arg("features"), py::arg("labels"), py::arg("num_classes"))
      .def_readonly("dim", &Dataset::dim)
      .def_readonly("num_classes", &Dataset::num_classes)
      .def_property_readonly("features", &dataset_features)
      .def_readonly("labels", &Dataset::labels)
      .def("class_counts", &Dataset::class_counts)
      .def("__len__", &Dataset::size)
      .def("__eq__", [](const Dataset& a, const Dataset& b) { return a == b; });

  py::class_<ClientDataset>(m, "ClientDataset")
      .def(py::init<int, Dataset>(), py::arg("client_id"), py::arg("data"))
      .def_property_readonly("client_id", &ClientDataset::client_id)
      .def_property_readonly("data", &ClientDataset::data)
      .def_property_readonly("class_counts", &ClientDataset::class_counts)
      .def("__len__", &ClientDataset::total);

  m.def("generate_gaussian_blobs", &generate_gaussian_blobs, py::arg("num_classes"), py::arg("per_class"),
        py::arg("dim"), py::arg("separation"), py::arg("seed"));
  m.def("split_per_class", &split_per_class, py::arg("dataset"), py::arg("fraction"), py::arg("seed"));
  m.def("partition_dirichlet", &partition_dirichlet, py::arg("dataset"), py::arg("num_clients"),
        py::arg("alpha"), py::arg("seed"));
  m.def("partition_biased", &partition_biased, py::arg("dataset"), py::arg("num_clients"), py::arg("seed"),
        py::arg("holdout_fraction") = 0.1);
  m.def("apply_long_tail", &apply_long_tail, py::arg("dataset"), py::arg("rho"), py::arg("seed"));
  m.def("long_tail_profile", &long_tail_profile, py::arg("n_max"), py::arg("num_classes"), py::arg("rho"));
  m.def("save_dataset", [](const Dataset& d, const std::string& path) { save_dataset(d, path); });
  m.def("load_dataset", [](const std::string& path) { return load_dataset(path); });

  py::class_<PrototypeSet>(m, "PrototypeSet")
      .def(py::init([](const Matrix& vectors, std::vector<bool> present, int owner) {
             PrototypeSet p;
             p.vectors = vectors;
             p.present = std::move(present);
             p.owner = owner;
             return p;
           }),
           py::arg("vectors"), py::arg("present"), py::arg("owner") = -1)
      .def_readonly("vectors", &PrototypeSet::vectors)
      .def_readonly("present", &PrototypeSet::present)
      .def_readonly("owner", &PrototypeSet::owner);

  m.def(
      "compute_client_prototypes",
      [](const Matrix& features, const std::vector<int>& labels, std::size_t num_classes, int owner) {
        return compute_client_prototypes(features, labels, num_classes, owner);
      },
      py::arg("features"), py::arg("labels"), py::arg("num_classes"), py::arg("owner") = -1);

  m.def(
      "build_server_prototypes",
      [](const std::vector<PrototypeSet>& clients, const std::vector<std::vector<std::size_t>>& counts,
         std::size_t neighbors) {
        const auto s = build_server_prototypes(clients, counts, neighbors);
        py::dict out;
        out["global"] = s.global.vectors;
        out["phi"] = s.angular.phi;
        out["relational"] = s.relational.per_class;
        out["discrepancy"] = s.weights.discrepancy;
        out["weights"] = s.weights.weights;
        out["consistent"] = s.consistent.vectors;
        return out;
      },
      py::arg("clients"), py::arg("class_counts"), py::arg("neighbors"));

  m.def("client_discrepancy", [](const std::vector<std::size_t>& counts) { return client_discrepancy(counts); });
  m.def("aggregation_weights", [](const std::vector<std::size_t>& samples, const std::vector<double>& disc) {
    const auto w = aggregation_weights(samples, disc);
    return py::make_tuple(w.discrepancy, w.weights);
  });

  m.def("ce_loss", [](const Vector& logits, int label) {
    const auto r = ce_loss_and_grad(logits, label);
    return py::make_tuple(r.loss, r.grad);
  });
  m.def(
      "cpdr_loss",
      [](const Vector& z, int label, const Matrix& consistent, const std::string& norm) {
        if (norm != "l1" && norm != "l2") throw Error(ErrorCode::kInvalidArgument, "norm must be l1 or l2");
        const auto r = cpdr_loss_and_grad(z, label, consistent_from(consistent),
                                          norm == "l1" ? CpdrNorm::kL1 : CpdrNorm::kL2);
        return py::make_tuple(r.loss, r.grad);
      },
      py::arg("z"), py::arg("label"), py::arg("consistent"), py::arg("norm") = "l1");
  m.def(
      "rpcl_loss",
      [](const Vector& z, int label, const std::vector<Matrix>& relational, double temperature,
         const std::optional<Matrix>& normalizers) {
        const auto r = relational_from(relational);
        SimilarityContext ctx;
        ctx.temperature = temperature;
        ctx.normalizers = normalizers ? *normalizers
                                      : Matrix::Ones(static_cast<Eigen::Index>(r.num_classes()),
                                                     static_cast<Eigen::Index>(r.num_clients()));
        const auto out = rpcl_loss_and_grad(z, label, r, ctx);
        return py::make_tuple(out.loss, out.grad);
      },
      py::arg("z"), py::arg("label"), py::arg("relational"), py::arg("temperature") = 0.05,
      py::arg("normalizers") = std::nullopt);

  py::class_<TheoryConstants>(m, "TheoryConstants")
      .def(py::init<>())
      .def_readwrite("smoothness", &TheoryConstants::smoothness)
      .def_readwrite("extractor_lipschitz", &TheoryConstants::extractor_lipschitz)
      .def_readwrite("grad_bound", &TheoryConstants::grad_bound)
      .def_readwrite("grad_variance", &TheoryConstants::grad_variance)
      .def_readwrite("num_classes", &TheoryConstants::num_classes)
      .def_readwrite("neighbors", &TheoryConstants::neighbors)
      .def_readwrite("local_epochs", &TheoryConstants::local_epochs)
      .def_readwrite("learning_rate", &TheoryConstants::learning_rate)
      .def_readwrite("target_grad_bound", &TheoryConstants::target_grad_bound)
      .def_readwrite("initial_loss", &TheoryConstants::initial_loss)
      .def_readwrite("optimal_loss", &TheoryConstants::optimal_loss)
      .def("validate", &TheoryConstants::validate);
  m.def("theorem1_bound", &theorem1_bound, py::arg("current_loss"), py::arg("constants"));
  m.def("theorem2_eta_threshold", &theorem2_eta_threshold, py::arg("constants"));
  m.def(
      "theorem3_min_rounds",
      [](const TheoryConstants& c) {
        const auto r = theorem3_min_rounds(c);
        return py::make_tuple(r.min_rounds, r.max_learning_rate);
      },
      py::arg("constants"));
  m.def("theory_report", &theory_report, py::arg("constants"), py::arg("current_loss"));

  py::enum_<Algorithm>(m, "Algorithm").value("FEDAVG", Algorithm::kFedAvg).value("FEDSC", Algorithm::kFedSC);

  py::class_<FederationConfig>(m, "FederationConfig")
      .def(py::init<>())
      .def_readwrite("rounds", &FederationConfig::rounds)
      .def_readwrite("num_clients", &FederationConfig::num_clients)
      .def_readwrite("local_epochs", &FederationConfig::local_epochs)
      .def_readwrite("participation_fraction", &FederationConfig::participation_fraction)
      .def_readwrite("neighbors", &FederationConfig::neighbors)
      .def_readwrite("temperature", &FederationConfig::temperature)
      .def_readwrite("algorithm", &FederationConfig::algorithm)
      .def_readwrite("hidden_dim", &FederationConfig::hidden_dim)
      .def_readwrite("feature_dim", &FederationConfig::feature_dim)
      .def_readwrite("threads", &FederationConfig::threads)
      .def_readwrite("seed", &FederationConfig::seed)
      .def_property(
          "learning_rate", [](const FederationConfig& c) { return c.optimizer.learning_rate; },
          [](FederationConfig& c, double v) { c.optimizer.learning_rate = v; })
      .def_property(
          "batch_size", [](const FederationConfig& c) { return c.optimizer.batch_size; },
          [](FederationConfig& c, std::size_t v) { c.optimizer.batch_size = v; })
      .def("validate", &FederationConfig::validate);

  py::class_<RoundMetrics>(m, "RoundMetrics")
      .def_readonly("round", &RoundMetrics::round)
      .def_readonly("accuracy", &RoundMetrics::accuracy)
      .def_readonly("loss_total", &RoundMetrics::loss_total)
      .def_readonly("loss_ce", &RoundMetrics::loss_ce)
      .def_readonly("loss_rpcl", &RoundMetrics::loss_rpcl)
      .def_readonly("loss_cpdr", &RoundMetrics::loss_cpdr)
      .def_readonly("wall_ms", &RoundMetrics::wall_ms);

  m.def(
      "run_experiment",
      [](const FederationConfig& config, const std::vector<ClientDataset>& clients, const Dataset& test) {
        py::gil_scoped_release release;
        return run_experiment(config, clients, test);
      },
      py::arg("config"), py::arg("clients"), py::arg("test"));
  m.def("rounds_to_accuracy", &rounds_to_accuracy, py::arg("metrics"), py::arg("threshold"));
  m.def("metrics_to_csv", &metrics_to_csv);
  m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("round"), py::arg("client"), py::arg("purpose"));

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "fedsc");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
