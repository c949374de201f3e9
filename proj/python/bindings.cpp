#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "refop/datagen.hpp"
#include "refop/geometry.hpp"
#include "refop/io.hpp"
#include "refop/meshinterp.hpp"
#include "refop/model.hpp"
#include "refop/pairing.hpp"
#include "refop/training.hpp"

namespace py = pybind11;
using namespace refop;

namespace {

geometry::Geometry make_geometry(const std::vector<std::pair<std::string, std::vector<double>>>& components,
                                 int k_boundary) {
  geometry::Geometry g;
  for (const auto& [kind, params] : components)
    g.components.push_back(
        geometry::sample_boundary(geometry::kind_from_name(kind), params, k_boundary));
  return g;
}

py::dict config_dict(const model::ModelConfig& c) {
  py::dict d;
  d["hidden_dim"] = c.hidden_dim;
  d["layers"] = c.layers;
  d["heads"] = c.heads;
  d["gamma"] = c.gamma;
  d["rfm_features"] = c.rfm_features;
  d["target_dim"] = c.target_dim;
  d["spatial_dim"] = c.spatial_dim;
  d["param_dim"] = c.param_dim;
  d["mlp_hidden"] = c.mlp_hidden;
  d["attention"] = model::attention_name(c.attention);
  d["seed"] = c.seed;
  return d;
}

model::ModelConfig config_from_dict(const py::dict& d) {
  model::ModelConfig c;
  if (d.contains("hidden_dim")) c.hidden_dim = d["hidden_dim"].cast<int>();
  if (d.contains("layers")) c.layers = d["layers"].cast<int>();
  if (d.contains("heads")) c.heads = d["heads"].cast<int>();
  if (d.contains("gamma")) c.gamma = d["gamma"].cast<double>();
  if (d.contains("rfm_features")) c.rfm_features = d["rfm_features"].cast<int>();
  if (d.contains("target_dim")) c.target_dim = d["target_dim"].cast<int>();
  if (d.contains("spatial_dim")) c.spatial_dim = d["spatial_dim"].cast<int>();
  if (d.contains("param_dim")) c.param_dim = d["param_dim"].cast<int>();
  if (d.contains("mlp_hidden")) c.mlp_hidden = d["mlp_hidden"].cast<int>();
  if (d.contains("attention"))
    c.attention = model::attention_from_name(d["attention"].cast<std::string>());
  if (d.contains("seed")) c.seed = d["seed"].cast<std::uint64_t>();
  model::validate_config(c);
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "reference neural operators: geometry, interpolation, attention kernels, inference";

  py::register_exception<usage_error>(m, "UsageError", PyExc_ValueError);
  py::register_exception<data_error>(m, "DataError", PyExc_ValueError);
  py::register_exception<numeric_error>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<geometry::Geometry>(m, "Geometry")
      .def(py::init([](const std::vector<std::pair<std::string, std::vector<double>>>& comps,
                       int k_boundary) { return make_geometry(comps, k_boundary); }),
           py::arg("components"), py::arg("k_boundary") = 64,
           "components: list of (kind, params); circle params (cx, cy, r), square (cx, cy, h)")
      .def_property_readonly("params", &geometry::Geometry::param_vector)
      .def_property_readonly("n_components",
                             [](const geometry::Geometry& g) { return g.components.size(); })
      .def("boundary_points",
           [](const geometry::Geometry& g, std::size_t i) { return g.components.at(i).points; },
           py::arg("component"))
      .def("signed_distance", [](const geometry::Geometry& g, const Mat& x) {
        Vec out(x.rows());
        for (int i = 0; i < x.rows(); ++i)
          out(i) = geometry::signed_distance(g, x.row(i).transpose());
        return out;
      });

  py::class_<datagen::Sample>(m, "Sample")
      .def_readonly("id", &datagen::Sample::id)
      .def_readonly("pair_tag", &datagen::Sample::pair_tag)
      .def_readonly("nodes", &datagen::Sample::nodes)
      .def_readonly("values", &datagen::Sample::values)
      .def_readonly("geom", &datagen::Sample::geom);

  py::class_<geometry::DeformationField>(m, "DeformationField")
      .def_readonly("shifts", &geometry::DeformationField::shifts)
      .def_readonly("gamma_phi", &geometry::DeformationField::gamma_phi)
      .def_readonly("d_max", &geometry::DeformationField::d_max);

  py::class_<meshinterp::TriMesh>(m, "TriMesh")
      .def_readonly("points", &meshinterp::TriMesh::points)
      .def_property_readonly("triangles", [](const meshinterp::TriMesh& t) {
        Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor> out(t.triangles.size(), 3);
        for (std::size_t i = 0; i < t.triangles.size(); ++i)
          for (int j = 0; j < 3; ++j) out(int(i), j) = t.triangles[i][std::size_t(j)];
        return out;
      });

  m.def("construct_phi", &geometry::construct_phi, py::arg("ref"), py::arg("query"),
        py::arg("query_nodes"), py::arg("gamma_phi"),
        "discrete inverse deformation (shift field) carrying query nodes toward the reference");
  m.def("geometric_distance", &geometry::geometric_distance, py::arg("p_ref"), py::arg("p_query"));
  m.def("cutoff_eta", &geometry::cutoff_eta, py::arg("d"), py::arg("d_max"));

  m.def("triangulate", &meshinterp::triangulate, py::arg("points"));
  m.def("interpolate", &meshinterp::interpolate, py::arg("mesh"), py::arg("values"),
        py::arg("queries"));
  m.def("pushforward",
        [](const datagen::Sample& ref, const Mat& query_nodes,
           const geometry::DeformationField& f) { return meshinterp::pushforward(ref, query_nodes, f); },
        py::arg("ref"), py::arg("query_nodes"), py::arg("field"));

  m.def("rfm_features", &model::rfm_features, py::arg("x"), py::arg("omegas"));
  m.def("daca_quadratic", &model::daca_quadratic, py::arg("q"), py::arg("k"), py::arg("v1"),
        py::arg("v2"), py::arg("v3"), py::arg("pos_q"), py::arg("pos_k"), py::arg("gamma"),
        py::arg("heads"));
  m.def("daca_linear", &model::daca_linear, py::arg("q"), py::arg("k"), py::arg("v1"),
        py::arg("v2"), py::arg("v3"), py::arg("phi_q"), py::arg("phi_k"), py::arg("heads"));

  m.def(
      "generate_pairs",
      [](int n_pairs, int grid, int holes_lo, int holes_hi, const std::string& kind,
         std::uint64_t seed, const std::string& problem) {
        datagen::GenConfig cfg;
        cfg.n_pairs = n_pairs;
        cfg.grid = grid;
        cfg.holes_lo = holes_lo;
        cfg.holes_hi = holes_hi;
        cfg.kind = geometry::kind_from_name(kind);
        cfg.seed = seed;
        cfg.problem = datagen::problem_from_name(problem);
        auto [samples, pm] = datagen::generate_pairs(cfg);
        std::vector<std::tuple<int, int, double>> pairs;
        for (const auto& e : pm.entries) pairs.emplace_back(e.query_id, e.ref_id, e.distance);
        return py::make_tuple(samples, pairs);
      },
      py::arg("n_pairs"), py::arg("grid") = 64, py::arg("holes_lo") = 1, py::arg("holes_hi") = 3,
      py::arg("kind") = "circle", py::arg("seed") = 0, py::arg("problem") = "poisson-holes");
  m.def("solve_poisson", &datagen::solve_poisson, py::arg("geom"), py::arg("grid"),
        py::arg("f") = 1.0, py::arg("tol") = 1e-8);

  m.def("load_dataset", [](const std::string& manifest) {
    auto ds = io::load_dataset(manifest);
    std::vector<std::tuple<int, int, double>> pairs;
    for (const auto& e : ds.manifest.pairs.entries)
      pairs.emplace_back(e.query_id, e.ref_id, e.distance);
    return py::make_tuple(ds.samples, pairs);
  });

  m.def(
      "init_checkpoint",
      [](const py::dict& config, const std::string& path) {
        const auto cfg = config_from_dict(config);
        model::ModelParams p = model::init_params(cfg);
        std::vector<Mat> zeros;
        for (const auto& v : p.values) zeros.push_back(Mat::Zero(v.rows(), v.cols()));
        io::write_checkpoint(path, {cfg, p, zeros, zeros, 0});
      },
      py::arg("config"), py::arg("path"),
      "writes a freshly initialized zero-step checkpoint (prediction == pushforward)");
  m.def("checkpoint_config", [](const std::string& path) {
    return config_dict(io::read_checkpoint(path).config);
  });

  m.def(
      "predict",
      [](const std::string& checkpoint, const datagen::Sample& ref, const datagen::Sample& query,
         double gamma_phi) {
        const auto ckpt = io::read_checkpoint(checkpoint);
        const auto ex = training::preprocess_pair(ref, query, gamma_phi);
        const auto res = model::forward(ex.input, ckpt.params, ckpt.config);
        return py::make_tuple(res.u_hat, ex.input.u_interp);
      },
      py::arg("checkpoint"), py::arg("ref"), py::arg("query"), py::arg("gamma_phi") = 0.1,
      "returns (u_hat, pushforward) for the query sample's nodes");
  m.def("rel_l2", &training::rel_l2, py::arg("truth"), py::arg("prediction"));
}
