#include "refop/io.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace refop::io {
namespace {

constexpr const char* kSampleMagic = "REFOP-SAMPLE v1";
constexpr const char* kManifestMagic = "REFOP-MANIFEST v1";
constexpr const char* kCheckpointMagic = "REFOP-CHECKPOINT v1";

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw data_error(path + ": " + what);
}

long long to_int(const std::string& s, const std::string& path) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (...) {
    fail(path, "bad integer '" + s + "'");
  }
  if (pos != s.size()) fail(path, "bad integer '" + s + "'");
  return v;
}

std::uint64_t to_uint(const std::string& s, const std::string& path) {
  std::size_t pos = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (...) {
    fail(path, "bad unsigned integer '" + s + "'");
  }
  if (pos != s.size() || s.size() == 0 || s[0] == '-') fail(path, "bad unsigned integer '" + s + "'");
  return v;
}

double to_double(const std::string& s, const std::string& path) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (...) {
    fail(path, "bad number '" + s + "'");
  }
  if (pos != s.size()) fail(path, "bad number '" + s + "'");
  return v;
}

std::vector<std::string> tokenize(const std::string& line) {
  std::istringstream iss(line);
  std::vector<std::string> out;
  std::string t;
  while (iss >> t) out.push_back(t);
  return out;
}

class HeaderReader {
 public:
  HeaderReader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  std::string raw_line() {
    std::string ln;
    if (!std::getline(in_, ln)) fail(path_, "truncated header");
    return ln;
  }

  std::vector<std::string> expect(const std::string& key, int n_fields = -1) {
    auto toks = tokenize(raw_line());
    if (toks.empty() || toks[0] != key) fail(path_, "expected '" + key + "' line");
    toks.erase(toks.begin());
    if (n_fields >= 0 && int(toks.size()) != n_fields)
      fail(path_, "'" + key + "' line needs " + std::to_string(n_fields) + " fields");
    return toks;
  }

  void expect_magic(const std::string& magic) {
    if (raw_line() != magic) fail(path_, "version mismatch (want '" + magic + "')");
  }

 private:
  std::istream& in_;
  std::string path_;
};

void append_mat(std::string& buf, const Mat& m) {
  if (m.size() > 0)
    buf.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * std::size_t(m.size()));
}

std::string read_payload(std::istream& in, std::size_t n_doubles, const std::string& path) {
  std::string buf(n_doubles * sizeof(double), '\0');
  in.read(buf.data(), std::streamsize(buf.size()));
  if (std::size_t(in.gcount()) != buf.size()) fail(path, "length mismatch (truncated payload)");
  if (in.peek() != std::char_traits<char>::eof()) fail(path, "length mismatch (trailing bytes)");
  return buf;
}

Mat take_mat(const std::string& buf, std::size_t& off, int rows, int cols) {
  Mat m(rows, cols);
  const std::size_t bytes = sizeof(double) * std::size_t(rows) * std::size_t(cols);
  if (bytes > 0) std::memcpy(m.data(), buf.data() + off, bytes);
  off += bytes;
  return m;
}

void write_file(const std::string& path, const std::string& header, const std::string& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out.write(header.data(), std::streamsize(header.size()));
  out.write(payload.data(), std::streamsize(payload.size()));
  out.flush();
  if (!out.good()) fail(path, "write failed");
}

void check_finite(const Mat& m, const std::string& path, const std::string& what) {
  if (m.size() > 0 && !m.allFinite()) fail(path, "non-finite payload in " + what);
}

void validate_sample(const datagen::Sample& s, const std::string& path) {
  if (s.nodes.rows() < 1) fail(path, "empty sample (N = 0)");
  if (s.nodes.cols() != 2) fail(path, "nodes must have 2 columns");
  if (s.values.rows() != s.nodes.rows()) fail(path, "values row count mismatch");
  if (s.values.cols() < 1) fail(path, "values need at least one column");
  if (s.geom.components.empty()) fail(path, "sample needs at least one boundary component");
  check_finite(s.nodes, path, "nodes");
  check_finite(s.values, path, "values");
  for (const auto& c : s.geom.components) {
    if (c.params.size() != 3) fail(path, "component params must have length 3");
    if (c.points.rows() < 1 || c.points.cols() != 2) fail(path, "bad boundary point block");
    check_finite(c.points, path, "boundary points");
    for (double p : c.params)
      if (!std::isfinite(p)) fail(path, "non-finite component params");
  }
  if (!s.geom.domain.lo.allFinite() || !s.geom.domain.hi.allFinite())
    fail(path, "non-finite domain");
}

}  // namespace

void write_sample(const std::string& path, const datagen::Sample& s) {
  validate_sample(s, path);
  std::ostringstream h;
  h << kSampleMagic << "\n";
  h << "id " << s.id << "\n";
  h << "pair_tag " << s.pair_tag << "\n";
  h << "nodes " << s.nodes.rows() << " " << s.nodes.cols() << "\n";
  h << "values " << s.values.rows() << " " << s.values.cols() << "\n";
  h << "domain " << fmt_g17(s.geom.domain.lo[0]) << " " << fmt_g17(s.geom.domain.lo[1]) << " "
    << fmt_g17(s.geom.domain.hi[0]) << " " << fmt_g17(s.geom.domain.hi[1]) << "\n";
  h << "components " << s.geom.components.size() << "\n";
  std::string payload;
  append_mat(payload, s.nodes);
  append_mat(payload, s.values);
  for (const auto& c : s.geom.components) {
    h << "component " << geometry::kind_name(c.kind) << " " << c.points.rows();
    for (double p : c.params) h << " " << fmt_g17(p);
    h << "\n";
    append_mat(payload, c.points);
  }
  h << "end_header\n";
  write_file(path, h.str(), payload);
}

datagen::Sample read_sample(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  HeaderReader hr(in, path);
  hr.expect_magic(kSampleMagic);
  datagen::Sample s;
  s.id = int(to_int(hr.expect("id", 1)[0], path));
  s.pair_tag = int(to_int(hr.expect("pair_tag", 1)[0], path));
  auto nt = hr.expect("nodes", 2);
  const long long n = to_int(nt[0], path), nd = to_int(nt[1], path);
  if (n < 1) fail(path, "empty sample (N = 0)");
  if (nd != 2) fail(path, "nodes must have 2 columns");
  auto vt = hr.expect("values", 2);
  const long long vn = to_int(vt[0], path), vd = to_int(vt[1], path);
  if (vn != n || vd < 1) fail(path, "bad values shape");
  auto dt = hr.expect("domain", 4);
  s.geom.domain.lo = {to_double(dt[0], path), to_double(dt[1], path)};
  s.geom.domain.hi = {to_double(dt[2], path), to_double(dt[3], path)};
  const long long m = to_int(hr.expect("components", 1)[0], path);
  if (m < 1) fail(path, "sample needs at least one boundary component");
  std::size_t n_doubles = std::size_t(n) * 2 + std::size_t(n) * std::size_t(vd);
  std::vector<std::pair<geometry::Kind, long long>> comp_shapes;
  for (long long i = 0; i < m; ++i) {
    auto ct = hr.expect("component", 5);
    geometry::BoundaryComponent c;
    c.kind = geometry::kind_from_name(ct[0]);
    const long long k = to_int(ct[1], path);
    if (k < 1) fail(path, "component needs boundary points");
    c.params = {to_double(ct[2], path), to_double(ct[3], path), to_double(ct[4], path)};
    s.geom.components.push_back(std::move(c));
    comp_shapes.emplace_back(s.geom.components.back().kind, k);
    n_doubles += std::size_t(k) * 2;
  }
  hr.expect("end_header", 0);
  const std::string buf = read_payload(in, n_doubles, path);
  std::size_t off = 0;
  s.nodes = take_mat(buf, off, int(n), 2);
  s.values = take_mat(buf, off, int(n), int(vd));
  for (long long i = 0; i < m; ++i)
    s.geom.components[std::size_t(i)].points = take_mat(buf, off, int(comp_shapes[std::size_t(i)].second), 2);
  validate_sample(s, path);
  return s;
}

namespace {

std::string config_lines(const datagen::GenConfig& c) {
  std::ostringstream h;
  h << "problem " << datagen::problem_name(c.problem) << "\n";
  h << "grid " << c.grid << "\n";
  h << "holes " << c.holes_lo << " " << c.holes_hi << "\n";
  h << "kind " << geometry::kind_name(c.kind) << "\n";
  h << "radius " << fmt_g17(c.radius_lo) << " " << fmt_g17(c.radius_hi) << "\n";
  h << "perturb " << fmt_g17(c.perturb_center) << " " << fmt_g17(c.perturb_radius) << "\n";
  h << "source " << fmt_g17(c.f) << "\n";
  h << "n_pairs " << c.n_pairs << "\n";
  h << "seed " << c.seed << "\n";
  h << "solver_tol " << fmt_g17(c.solver_tol) << "\n";
  h << "k_boundary " << c.k_boundary << "\n";
  return h.str();
}

}  // namespace

std::uint64_t gen_config_hash(const datagen::GenConfig& cfg) { return fnv1a64(config_lines(cfg)); }

void write_manifest(const std::string& path, const Manifest& m) {
  std::ostringstream h;
  h << kManifestMagic << "\n";
  h << config_lines(m.config);
  h << "config_hash " << hex16(gen_config_hash(m.config)) << "\n";
  h << "samples " << m.index.size() << "\n";
  std::set<int> ids;
  for (const auto& e : m.index) {
    if (!ids.insert(e.id).second) fail(path, "duplicate sample id " + std::to_string(e.id));
    if (e.file.find_first_of(" \t\n") != std::string::npos) fail(path, "file name has whitespace");
    h << "sample " << e.id << " " << e.file << " " << e.n_nodes << " " << e.pair_tag << " "
      << e.params.size();
    for (double p : e.params) h << " " << fmt_g17(p);
    h << "\n";
  }
  h << "pairs " << m.pairs.entries.size() << " "
    << (m.pairs.mode == pairing::Mode::natural ? "natural" : "knn") << " " << m.pairs.k << "\n";
  for (const auto& p : m.pairs.entries)
    h << "pair " << p.query_id << " " << p.ref_id << " " << fmt_g17(p.distance) << "\n";
  h << "end\n";
  write_file(path, h.str(), "");
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  HeaderReader hr(in, path);
  hr.expect_magic(kManifestMagic);
  Manifest m;
  auto& c = m.config;
  try {
    c.problem = datagen::problem_from_name(hr.expect("problem", 1)[0]);
  } catch (const usage_error& e) {
    fail(path, e.what());
  }
  c.grid = int(to_int(hr.expect("grid", 1)[0], path));
  auto ht = hr.expect("holes", 2);
  c.holes_lo = int(to_int(ht[0], path));
  c.holes_hi = int(to_int(ht[1], path));
  c.kind = geometry::kind_from_name(hr.expect("kind", 1)[0]);
  auto rt = hr.expect("radius", 2);
  c.radius_lo = to_double(rt[0], path);
  c.radius_hi = to_double(rt[1], path);
  auto pt = hr.expect("perturb", 2);
  c.perturb_center = to_double(pt[0], path);
  c.perturb_radius = to_double(pt[1], path);
  c.f = to_double(hr.expect("source", 1)[0], path);
  c.n_pairs = int(to_int(hr.expect("n_pairs", 1)[0], path));
  c.seed = to_uint(hr.expect("seed", 1)[0], path);
  c.solver_tol = to_double(hr.expect("solver_tol", 1)[0], path);
  c.k_boundary = int(to_int(hr.expect("k_boundary", 1)[0], path));
  const std::string stored_hash = hr.expect("config_hash", 1)[0];
  if (stored_hash != hex16(gen_config_hash(c))) fail(path, "config hash mismatch");
  const long long ns = to_int(hr.expect("samples", 1)[0], path);
  std::set<int> ids;
  const auto dir = std::filesystem::path(path).parent_path();
  for (long long i = 0; i < ns; ++i) {
    auto st = hr.expect("sample");
    if (st.size() < 5) fail(path, "bad sample line");
    SampleIndexEntry e;
    e.id = int(to_int(st[0], path));
    e.file = st[1];
    e.n_nodes = int(to_int(st[2], path));
    e.pair_tag = int(to_int(st[3], path));
    const long long np = to_int(st[4], path);
    if (int(st.size()) != 5 + np) fail(path, "bad sample line");
    for (long long j = 0; j < np; ++j) e.params.push_back(to_double(st[std::size_t(5 + j)], path));
    if (!ids.insert(e.id).second) fail(path, "duplicate sample id " + std::to_string(e.id));
    if (e.n_nodes < 1) fail(path, "bad node count");
    if (!std::filesystem::exists(dir / e.file))
      fail(path, "missing sample file '" + e.file + "'");
    m.index.push_back(std::move(e));
  }
  auto pe = hr.expect("pairs", 3);
  const long long npair = to_int(pe[0], path);
  if (pe[1] == "natural")
    m.pairs.mode = pairing::Mode::natural;
  else if (pe[1] == "knn")
    m.pairs.mode = pairing::Mode::knn;
  else
    fail(path, "unknown pairing mode '" + pe[1] + "'");
  m.pairs.k = int(to_int(pe[2], path));
  for (long long i = 0; i < npair; ++i) {
    auto et = hr.expect("pair", 3);
    pairing::PairEntry e;
    e.query_id = int(to_int(et[0], path));
    e.ref_id = int(to_int(et[1], path));
    e.distance = to_double(et[2], path);
    if (!ids.count(e.query_id) || !ids.count(e.ref_id)) fail(path, "pair references unknown id");
    m.pairs.entries.push_back(e);
  }
  hr.expect("end", 0);
  if (in.peek() != std::char_traits<char>::eof()) fail(path, "trailing bytes after 'end'");
  return m;
}

void write_dataset(const std::string& dir, const datagen::GenConfig& cfg,
                   const std::vector<datagen::Sample>& samples, const pairing::PairMap& pairs) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.config = cfg;
  m.pairs = pairs;
  for (const auto& s : samples) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%06d.refop", s.id);
    write_sample((std::filesystem::path(dir) / name).string(), s);
    SampleIndexEntry e;
    e.id = s.id;
    e.file = name;
    e.n_nodes = int(s.nodes.rows());
    e.pair_tag = s.pair_tag;
    e.params = s.geom.param_vector();
    m.index.push_back(std::move(e));
  }
  write_manifest((std::filesystem::path(dir) / "manifest.refop").string(), m);
}

Dataset load_dataset(const std::string& manifest_path) {
  Dataset d;
  d.manifest = read_manifest(manifest_path);
  const auto dir = std::filesystem::path(manifest_path).parent_path();
  for (const auto& e : d.manifest.index) {
    datagen::Sample s = read_sample((dir / e.file).string());
    if (s.id != e.id) fail(manifest_path, "sample id mismatch in '" + e.file + "'");
    if (int(s.nodes.rows()) != e.n_nodes) fail(manifest_path, "node count mismatch in '" + e.file + "'");
    if (s.pair_tag != e.pair_tag) fail(manifest_path, "pair tag mismatch in '" + e.file + "'");
    if (s.geom.param_vector() != e.params) fail(manifest_path, "param mismatch in '" + e.file + "'");
    d.samples.push_back(std::move(s));
  }
  return d;
}

namespace {

struct ArrayDecl {
  std::string name;
  int rows = 0;
  int cols = 0;
};

std::vector<ArrayDecl> expected_arrays(const model::ModelConfig& cfg) {
  std::vector<ArrayDecl> out;
  const auto shapes = model::param_shapes(cfg);
  for (const auto& s : shapes) out.push_back({s.name, s.rows, s.cols});
  for (const char* pre : {"adam.m.", "adam.v."})
    for (const auto& s : shapes) out.push_back({pre + s.name, s.rows, s.cols});
  if (cfg.attention == model::Attention::linear)
    out.push_back({"rfm_omegas", cfg.rfm_features, cfg.spatial_dim});
  return out;
}

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& c) {
  try {
    model::validate_config(c.config);
  } catch (const usage_error& e) {
    fail(path, e.what());
  }
  if (c.step < 0) fail(path, "negative step");
  const auto shapes = model::param_shapes(c.config);
  if (c.params.names.size() != shapes.size() || c.params.values.size() != shapes.size() ||
      c.adam_m.size() != shapes.size() || c.adam_v.size() != shapes.size())
    fail(path, "checkpoint key set mismatch");
  std::ostringstream h;
  h << kCheckpointMagic << "\n";
  h << "hidden_dim " << c.config.hidden_dim << "\n";
  h << "layers " << c.config.layers << "\n";
  h << "heads " << c.config.heads << "\n";
  h << "gamma " << fmt_g17(c.config.gamma) << "\n";
  h << "rfm_features " << c.config.rfm_features << "\n";
  h << "target_dim " << c.config.target_dim << "\n";
  h << "spatial_dim " << c.config.spatial_dim << "\n";
  h << "param_dim " << c.config.param_dim << "\n";
  h << "mlp_hidden " << c.config.mlp_hidden << "\n";
  h << "attention " << model::attention_name(c.config.attention) << "\n";
  h << "model_seed " << c.config.seed << "\n";
  h << "step " << c.step << "\n";
  const auto decls = expected_arrays(c.config);
  h << "arrays " << decls.size() << "\n";
  std::string payload;
  std::size_t t = 0;
  auto put = [&](const Mat& m, const ArrayDecl& d) {
    if (m.rows() != d.rows || m.cols() != d.cols) fail(path, "shape mismatch for " + d.name);
    check_finite(m, path, d.name);
    h << "array " << d.name << " " << d.rows << " " << d.cols << "\n";
    append_mat(payload, m);
  };
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (c.params.names[i] != shapes[i].name) fail(path, "checkpoint key set mismatch");
    put(c.params.values[i], decls[t++]);
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) put(c.adam_m[i], decls[t++]);
  for (std::size_t i = 0; i < shapes.size(); ++i) put(c.adam_v[i], decls[t++]);
  if (c.config.attention == model::Attention::linear) put(c.params.rfm_omegas, decls[t++]);
  h << "end_header\n";
  write_file(path, h.str(), payload);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open");
  HeaderReader hr(in, path);
  hr.expect_magic(kCheckpointMagic);
  Checkpoint c;
  c.config.hidden_dim = int(to_int(hr.expect("hidden_dim", 1)[0], path));
  c.config.layers = int(to_int(hr.expect("layers", 1)[0], path));
  c.config.heads = int(to_int(hr.expect("heads", 1)[0], path));
  c.config.gamma = to_double(hr.expect("gamma", 1)[0], path);
  c.config.rfm_features = int(to_int(hr.expect("rfm_features", 1)[0], path));
  c.config.target_dim = int(to_int(hr.expect("target_dim", 1)[0], path));
  c.config.spatial_dim = int(to_int(hr.expect("spatial_dim", 1)[0], path));
  c.config.param_dim = int(to_int(hr.expect("param_dim", 1)[0], path));
  c.config.mlp_hidden = int(to_int(hr.expect("mlp_hidden", 1)[0], path));
  c.config.attention = model::attention_from_name(hr.expect("attention", 1)[0]);
  c.config.seed = to_uint(hr.expect("model_seed", 1)[0], path);
  c.step = to_int(hr.expect("step", 1)[0], path);
  if (c.step < 0) fail(path, "negative step");
  try {
    model::validate_config(c.config);
  } catch (const usage_error& e) {
    fail(path, e.what());
  }
  const auto decls = expected_arrays(c.config);
  const long long na = to_int(hr.expect("arrays", 1)[0], path);
  if (na != (long long)decls.size()) fail(path, "checkpoint key set mismatch");
  std::size_t n_doubles = 0;
  for (const auto& d : decls) {
    auto at = hr.expect("array", 3);
    if (at[0] != d.name || to_int(at[1], path) != d.rows || to_int(at[2], path) != d.cols)
      fail(path, "checkpoint key set mismatch (at '" + at[0] + "')");
    n_doubles += std::size_t(d.rows) * std::size_t(d.cols);
  }
  hr.expect("end_header", 0);
  const std::string buf = read_payload(in, n_doubles, path);
  std::size_t off = 0;
  const auto shapes = model::param_shapes(c.config);
  for (const auto& s : shapes) {
    c.params.names.push_back(s.name);
    c.params.values.push_back(take_mat(buf, off, s.rows, s.cols));
    check_finite(c.params.values.back(), path, s.name);
  }
  for (const auto& s : shapes) {
    c.adam_m.push_back(take_mat(buf, off, s.rows, s.cols));
    check_finite(c.adam_m.back(), path, "adam.m." + s.name);
  }
  for (const auto& s : shapes) {
    c.adam_v.push_back(take_mat(buf, off, s.rows, s.cols));
    check_finite(c.adam_v.back(), path, "adam.v." + s.name);
  }
  if (c.config.attention == model::Attention::linear) {
    c.params.rfm_omegas = take_mat(buf, off, c.config.rfm_features, c.config.spatial_dim);
    check_finite(c.params.rfm_omegas, path, "rfm_omegas");
  }
  return c;
}

void write_report(const std::string& path, const training::EvalReport& rep) {
  if (rep.model_err.size() != rep.baseline_err.size()) fail(path, "component count mismatch");
  std::ostringstream h;
  h << "REFOP-REPORT v1\n";
  h << "config_hash " << (rep.config_hash.empty() ? "-" : rep.config_hash) << "\n";
  h << "model_seed " << rep.model_seed << "\n";
  h << "data_seed " << rep.data_seed << "\n";
  h << "pairs " << rep.records.size() << "\n";
  h << "components " << rep.model_err.size() << "\n";
  for (std::size_t c = 0; c < rep.model_err.size(); ++c)
    h << "component " << c << " model_rel_l2 " << fmt_g17(rep.model_err[c]) << " baseline_rel_l2 "
      << fmt_g17(rep.baseline_err[c]) << "\n";
  h << "end\n";
  write_file(path, h.str(), "");
}

void write_pair_csv(const std::string& path, const training::EvalReport& rep) {
  std::ostringstream h;
  if (!rep.config_hash.empty()) h << "# config_hash " << rep.config_hash << "\n";
  h << "query_id,ref_id,distance,model_rel_l2,baseline_rel_l2\n";
  for (const auto& r : rep.records)
    h << r.query_id << "," << r.ref_id << "," << fmt_g17(r.distance) << ","
      << fmt_g17(r.model_err) << "," << fmt_g17(r.baseline_err) << "\n";
  write_file(path, h.str(), "");
}

}  // namespace refop::io
