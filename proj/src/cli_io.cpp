#include "starformer/cli_io.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "starformer/errors.hpp"

namespace starformer {

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("file not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t env_threads() {
  const char* v = std::getenv("STARFORMER_THREADS");
  if (!v || !*v) return 1;
  std::size_t n = 0;
  const auto r = std::from_chars(v, v + std::strlen(v), n);
  if (r.ec != std::errc() || *r.ptr != '\0' || n == 0)
    throw ConfigError("STARFORMER_THREADS must be a positive integer, got '" + std::string(v) + "'");
  return n;
}

namespace {

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t end = line.find(',', start);
    cells.push_back(line.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return cells;
}

std::string where(const fs::path& path, std::size_t line) { return path.string() + ":" + std::to_string(line); }

double parse_double(const std::string& cell, const fs::path& path, std::size_t line) {
  double v = 0.0;
  const char* end = cell.data() + cell.size();
  const auto r = std::from_chars(cell.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end || cell.empty())
    throw DataError(where(path, line) + ": not a number: '" + cell + "'");
  return v;
}

std::size_t parse_index(const std::string& cell, const fs::path& path, std::size_t line) {
  std::size_t v = 0;
  const char* end = cell.data() + cell.size();
  const auto r = std::from_chars(cell.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end || cell.empty())
    throw DataError(where(path, line) + ": not an index: '" + cell + "'");
  return v;
}

}  // namespace

void write_timeseries_csv(const TimeSeriesMatrix& ts, const fs::path& path) {
  std::string out = "t";
  for (const auto& id : ts.roi_ids()) out += "," + id;
  out += '\n';
  for (std::size_t t = 0; t < ts.timepoints(); ++t) {
    out += std::to_string(t);
    for (std::size_t r = 0; r < ts.rois(); ++r) {
      out += ',';
      out += format_double(ts.values().at(r, t));
    }
    out += '\n';
  }
  write_text(path, out);
}

TimeSeriesMatrix read_timeseries_csv(const fs::path& path, const std::string& subject) {
  const std::string who = subject.empty() ? path.string() : "subject " + subject;
  const auto lines = split_lines(read_text(path));
  if (lines.empty()) throw DataError(path.string() + ": empty time series file");
  const auto header = split_cells(lines[0]);
  if (header.size() < 2 || header[0] != "t")
    throw DataError(where(path, 1) + ": header must be t,<roi ids>");
  const std::vector<std::string> ids(header.begin() + 1, header.end());
  const std::size_t n = ids.size(), m = lines.size() - 1;
  if (m == 0) throw DataError(path.string() + ": no timepoints");
  Tensor values = Tensor::zeros(n, m);
  for (std::size_t t = 0; t < m; ++t) {
    const std::size_t line = t + 2;
    const auto cells = split_cells(lines[t + 1]);
    if (cells.size() != n + 1)
      throw DataError(where(path, line) + ": expected " + std::to_string(n + 1) + " cells, found " +
                      std::to_string(cells.size()));
    if (parse_index(cells[0], path, line) != t) throw DataError(where(path, line) + ": timepoints out of sequence");
    for (std::size_t r = 0; r < n; ++r) {
      const double v = parse_double(cells[r + 1], path, line);
      if (!std::isfinite(v))
        throw DataError(who + ": non-finite value at t=" + std::to_string(t) + ", roi " + ids[r] + " (" +
                        where(path, line) + ")");
      values.at(r, t) = v;
    }
  }
  return TimeSeriesMatrix(std::move(values), ids);
}

void write_atlas_csv(const AtlasFile& atlas, const fs::path& path) {
  std::string out = "roi_id,roi_name,network\n";
  const auto& p = atlas.partition;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string name = i < atlas.roi_names.size() ? atlas.roi_names[i] : p.roi_ids[i];
    out += p.roi_ids[i] + "," + name + "," + std::string(network_name(p.network_of[i])) + "\n";
  }
  write_text(path, out);
}

AtlasFile read_atlas_csv(const fs::path& path) {
  const auto lines = split_lines(read_text(path));
  if (lines.empty() || lines[0] != "roi_id,roi_name,network")
    throw AtlasError(where(path, 1) + ": header must be roi_id,roi_name,network");
  AtlasFile a;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_cells(lines[i]);
    if (cells.size() != 3) throw AtlasError(where(path, i + 1) + ": expected 3 cells");
    try {
      a.partition.network_of.push_back(parse_network(cells[2]));
    } catch (const AtlasError& e) {
      throw AtlasError(where(path, i + 1) + ": " + e.what());
    }
    a.partition.roi_ids.push_back(cells[0]);
    a.roi_names.push_back(cells[1]);
  }
  a.partition.validate();
  std::set<Network> seen(a.partition.network_of.begin(), a.partition.network_of.end());
  std::string missing;
  for (Network net : kNetworkOrder)
    if (!seen.count(net)) missing += (missing.empty() ? "" : ", ") + std::string(network_name(net));
  if (!missing.empty()) throw AtlasError(path.string() + ": no ROIs for network(s) " + missing);
  return a;
}

void write_manifest(const Manifest& m, const fs::path& path) {
  nlohmann::json j;
  j["profile"] = m.profile;
  j["atlas"] = m.atlas;
  if (m.seed) j["seed"] = *m.seed;
  j["subjects"] = nlohmann::json::array();
  for (const auto& s : m.subjects) j["subjects"].push_back({{"id", s.id}, {"label", s.label}, {"file", s.file}});
  write_text(path, j.dump(2) + "\n");
}

Manifest read_manifest(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  Manifest m;
  try {
    m.profile = j.value("profile", m.profile);
    m.atlas = j.value("atlas", m.atlas);
    if (j.contains("seed")) m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("subjects")) {
      ManifestEntry e{s.at("id").get<std::string>(), s.at("label").get<int>(), s.at("file").get<std::string>()};
      if (e.label != 0 && e.label != 1)
        throw DataError(path.string() + ": subject " + e.id + " has label " + std::to_string(e.label));
      m.subjects.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return m;
}

Dataset load_dataset(const fs::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const fs::path dir = manifest_path.parent_path();
  const AtlasFile atlas = read_atlas_csv(dir / m.atlas);
  Dataset d;
  d.profile = m.profile;
  d.atlas = atlas.partition;
  d.roi_names = atlas.roi_names;
  std::set<std::string> ids;
  for (const auto& e : m.subjects) {
    if (!ids.insert(e.id).second) throw DataError(manifest_path.string() + ": duplicate subject id " + e.id);
    const fs::path file = dir / e.file;
    if (!fs::exists(file)) throw DataError("subject " + e.id + ": file not found: " + file.string());
    TimeSeriesMatrix ts = read_timeseries_csv(file, e.id);
    if (ts.rois() != d.atlas.size())
      throw DataError("subject " + e.id + ": " + std::to_string(ts.rois()) + " ROIs but the atlas has " +
                      std::to_string(d.atlas.size()) + " (" + file.string() + ")");
    for (std::size_t r = 0; r < ts.rois(); ++r)
      if (ts.roi_ids()[r] != d.atlas.roi_ids[r])
        throw DataError("subject " + e.id + ": column " + std::to_string(r + 1) + " is '" + ts.roi_ids()[r] +
                        "', atlas expects '" + d.atlas.roi_ids[r] + "' (" + file.string() + ")");
    d.subjects.push_back({e.id, e.label, std::move(ts)});
  }
  if (d.subjects.empty()) throw DataError(manifest_path.string() + ": no subjects");
  return d;
}

Manifest write_dataset(const Dataset& data, const fs::path& dir, std::optional<std::uint64_t> seed) {
  fs::create_directories(dir);
  Manifest m;
  m.profile = data.profile;
  m.seed = seed;
  write_atlas_csv({data.atlas, data.roi_names}, dir / m.atlas);
  for (const auto& s : data.subjects) {
    const std::string file = s.id + ".csv";
    write_timeseries_csv(s.series, dir / file);
    m.subjects.push_back({s.id, s.label, file});
  }
  write_manifest(m, dir / "manifest.json");
  return m;
}

// ---- synthetic data

void SyntheticSpec::validate() const {
  if (rois_per_network == 0 || timepoints < 8 || subjects_per_class == 0)
    throw ConfigError("synthetic spec needs ROIs, at least 8 timepoints and subjects");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("noise sigma must be finite and nonnegative");
  for (const auto* set : {&base_edges, &class1_edges, &class0_edges})
    for (const auto& e : *set)
      if (e.src >= rois() || e.dst >= rois() || !std::isfinite(e.weight))
        throw ConfigError("planted edge " + std::to_string(e.src) + "->" + std::to_string(e.dst) + " is invalid");
  for (int label : {0, 1}) {
    const double rho = spectral_radius(var_matrix(*this, label));
    if (!(rho < 1.0))
      throw ConfigError("class " + std::to_string(label) + " VAR matrix has spectral radius " + format_double(rho) +
                        " (must be < 1)");
  }
}

SyntheticSpec SyntheticSpec::bundled() {
  SyntheticSpec s;
  // Both classes carry a two-link chain in every network, on different ROIs,
  // so the classes differ only in where the coupling sits.
  for (std::size_t net = 0; net < 7; ++net) {
    const std::size_t b = 5 * net;
    s.class1_edges.push_back({b, b + 1, 0.8});
    s.class1_edges.push_back({b + 1, b + 2, 0.8});
    s.class0_edges.push_back({b + 2, b + 3, 0.8});
    s.class0_edges.push_back({b + 3, b + 4, 0.8});
  }
  s.base_edges = {{0, 10, 0.2}, {5, 15, 0.2}, {20, 25, 0.2}, {30, 3, 0.2}};
  return s;
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  auto edges = [](const std::vector<PlantedEdge>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& e : v) a.push_back({e.src, e.dst, e.weight});
    return a;
  };
  j = {{"rois_per_network", s.rois_per_network},
       {"timepoints", s.timepoints},
       {"subjects_per_class", s.subjects_per_class},
       {"self_coefficient", s.self_coefficient},
       {"base_edges", edges(s.base_edges)},
       {"class1_edges", edges(s.class1_edges)},
       {"class0_edges", edges(s.class0_edges)},
       {"sigma", s.sigma},
       {"burn_in", s.burn_in},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  auto edges = [&](const char* key, std::vector<PlantedEdge>& out) {
    if (!j.contains(key)) return;
    out.clear();
    for (const auto& e : j.at(key)) out.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(), e.at(2).get<double>()});
  };
  s.rois_per_network = j.value("rois_per_network", s.rois_per_network);
  s.timepoints = j.value("timepoints", s.timepoints);
  s.subjects_per_class = j.value("subjects_per_class", s.subjects_per_class);
  s.self_coefficient = j.value("self_coefficient", s.self_coefficient);
  edges("base_edges", s.base_edges);
  edges("class1_edges", s.class1_edges);
  edges("class0_edges", s.class0_edges);
  s.sigma = j.value("sigma", s.sigma);
  s.burn_in = j.value("burn_in", s.burn_in);
  s.seed = j.value("seed", s.seed);
}

Tensor var_matrix(const SyntheticSpec& spec, int label) {
  const std::size_t n = spec.rois();
  Tensor a = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) a.at(i, i) = spec.self_coefficient;
  for (const auto& e : spec.base_edges) a.at(e.dst, e.src) += e.weight;
  for (const auto& e : label == 1 ? spec.class1_edges : spec.class0_edges) a.at(e.dst, e.src) += e.weight;
  return a;
}

double spectral_radius(const Tensor& a) {
  const std::size_t n = a.rows();
  Eigen::MatrixXd m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.at(i, j);
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t n = spec.rois(), m = spec.timepoints;
  Dataset d;
  d.profile = "synthetic";
  for (Network net : kNetworkOrder)
    for (std::size_t k = 0; k < spec.rois_per_network; ++k) {
      const std::size_t i = d.atlas.roi_ids.size();
      d.atlas.roi_ids.push_back("R" + std::to_string(i));
      d.atlas.network_of.push_back(net);
      d.roi_names.push_back(std::string(network_name(net)) + "_" + std::to_string(k + 1));
    }
  const Tensor a[2] = {var_matrix(spec, 0), var_matrix(spec, 1)};
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t total = 2 * spec.subjects_per_class;
  for (std::size_t s = 0; s < total; ++s) {
    const int label = s < spec.subjects_per_class ? 0 : 1;
    const Tensor& A = a[label];
    std::vector<double> x(n, 0.0), next(n);
    Tensor values = Tensor::zeros(n, m);
    for (std::size_t t = 0; t < spec.burn_in + m; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        double v = spec.sigma * noise(rng);
        for (std::size_t j = 0; j < n; ++j) v += A.at(i, j) * x[j];
        next[i] = v;
      }
      x.swap(next);
      if (t >= spec.burn_in)
        for (std::size_t i = 0; i < n; ++i) values.at(i, t - spec.burn_in) = x[i];
    }
    char id[32];
    std::snprintf(id, sizeof id, "sub-%03zu", s);
    d.subjects.push_back({id, label, TimeSeriesMatrix(std::move(values), d.atlas.roi_ids)});
  }
  return d;
}

// ---- checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'T', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

class Reader {
 public:
  Reader(std::string_view data, const fs::path& path) : data_(data), path_(path) {}
  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string_view bytes(std::size_t n) { return {take(n), n}; }
  std::size_t left() const { return data_.size() - pos_; }

 private:
  const char* take(std::size_t n) {
    if (n > left()) throw IntegrityError(path_.string() + ": truncated checkpoint");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::string_view data_;
  fs::path path_;
  std::size_t pos_ = 0;
};

std::uint64_t checksum(std::string_view s) {
  return fnv1a64({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

}  // namespace

void save_checkpoint(const ModelState& state, const fs::path& path, const nlohmann::json& metadata) {
  std::string buf(kMagic, sizeof kMagic);
  put<std::uint32_t>(buf, kVersion);
  const std::string header = nlohmann::json{{"model", state.config}, {"metadata", metadata}}.dump();
  put<std::uint64_t>(buf, header.size());
  buf += header;
  put<std::uint64_t>(buf, state.config.architecture_hash());
  ModelState& st = const_cast<ModelState&>(state);  // visit is non-const; nothing is modified
  std::size_t count = 0;
  st.visit([&](const std::string&, Tensor&) { ++count; });
  put<std::uint64_t>(buf, count);
  st.visit([&](const std::string& name, Tensor& t) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) put<std::uint64_t>(buf, dim);
    buf.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(double));
  });
  put<std::uint64_t>(buf, state.ordering.perm.size());
  for (std::size_t p : state.ordering.perm) put<std::uint64_t>(buf, p);
  put<std::uint8_t>(buf, static_cast<std::uint8_t>(state.ordering.provenance));
  put<std::uint64_t>(buf, checksum(buf));
  write_text(path, buf);
}

LoadedCheckpoint load_checkpoint(const fs::path& path, const ModelConfig* expected) {
  const std::string data = read_text(path);
  if (data.size() < sizeof kMagic + 8 || std::memcmp(data.data(), kMagic, sizeof kMagic) != 0)
    throw IntegrityError(path.string() + ": not a checkpoint");
  const std::string_view body(data.data(), data.size() - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, data.data() + body.size(), 8);
  if (stored != checksum(body)) throw IntegrityError(path.string() + ": checksum mismatch");

  Reader r(body, path);
  r.bytes(sizeof kMagic);
  if (r.get<std::uint32_t>() != kVersion) throw IntegrityError(path.string() + ": unsupported version");
  nlohmann::json header;
  ModelConfig config;
  try {
    header = nlohmann::json::parse(r.bytes(r.get<std::uint64_t>()));
    config = header.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(path.string() + ": bad header: " + e.what());
  }
  if (r.get<std::uint64_t>() != config.architecture_hash())
    throw IntegrityError(path.string() + ": architecture hash does not match stored config");
  if (expected && expected->architecture_hash() != config.architecture_hash())
    throw ConfigError(path.string() + ": checkpoint architecture differs from the requested config");

  std::mt19937_64 rng(0);
  LoadedCheckpoint out{ModelState::init(config, rng), header.value("metadata", nlohmann::json::object())};
  std::map<std::string, Tensor*> slots;
  out.state.visit([&](const std::string& name, Tensor& t) { slots[name] = &t; });
  const std::uint64_t count = r.get<std::uint64_t>();
  if (count != slots.size()) throw IntegrityError(path.string() + ": tensor count differs from architecture");
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name(r.bytes(r.get<std::uint32_t>()));
    const auto it = slots.find(name);
    if (it == slots.end()) throw IntegrityError(path.string() + ": unexpected tensor " + name);
    Shape shape(r.get<std::uint32_t>());
    for (auto& dim : shape) dim = r.get<std::uint64_t>();
    if (shape != it->second->shape()) throw IntegrityError(path.string() + ": shape mismatch for " + name);
    const auto raw = r.bytes(it->second->numel() * sizeof(double));
    std::memcpy(it->second->ptr(), raw.data(), raw.size());
  }
  ROIOrdering ord;
  ord.perm.resize(r.get<std::uint64_t>());
  if (ord.perm.size() != config.n_rois) throw IntegrityError(path.string() + ": ordering length differs");
  for (auto& p : ord.perm) p = r.get<std::uint64_t>();
  const auto prov = r.get<std::uint8_t>();
  if (prov > 2) throw IntegrityError(path.string() + ": bad ordering provenance");
  ord.provenance = static_cast<OrderingProvenance>(prov);
  if (r.left() != 0) throw IntegrityError(path.string() + ": trailing bytes");
  try {
    ord.validate();
  } catch (const Error& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  }
  out.state.ordering = std::move(ord);
  return out;
}

// ---- configuration

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch", c.batch},
       {"lr_init", c.lr_init},
       {"lr_max", c.lr_max},
       {"lr_final", c.lr_final},
       {"warmup_fraction", c.warmup_fraction},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"seed", c.seed},
       {"folds", c.folds},
       {"ordering_subsample", c.ordering_subsample},
       {"ordering", ordering_mode_name(c.ordering)},
       {"lag", c.lag},
       {"alpha", c.alpha},
       {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr_init = j.value("lr_init", c.lr_init);
  c.lr_max = j.value("lr_max", c.lr_max);
  c.lr_final = j.value("lr_final", c.lr_final);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.seed = j.value("seed", c.seed);
  c.folds = j.value("folds", c.folds);
  c.ordering_subsample = j.value("ordering_subsample", c.ordering_subsample);
  c.ordering = parse_ordering_mode(j.value("ordering", std::string(ordering_mode_name(c.ordering))));
  c.lag = j.value("lag", c.lag);
  c.alpha = j.value("alpha", c.alpha);
  c.threads = j.value("threads", c.threads);
}

RunConfig RunConfig::for_profile(const std::string& profile) {
  RunConfig c;
  c.profile = profile;
  if (profile == "abide") {
    c.train.lr_init = 5e-5;
    c.train.lr_max = 1e-4;
    c.train.lr_final = 1e-5;
  } else if (profile == "adhd200") {
    c.train.lr_init = 1e-5;
    c.train.lr_max = 5e-5;
    c.train.lr_final = 1e-6;
  } else if (profile == "synthetic") {
    c.model.n_rois = 35;
    c.model.timepoints = 64;
    c.model.geometry = {16, 2, 32};
    c.model.schedule.tokens_per_layer = {8, 4, 4, 8};
    c.model.schedule.sequence_length = 64;
    c.model.mlp_hidden = 32;
    c.model.dropout = 0.1;
    c.train.epochs = 10;
    c.train.batch = 16;
    c.train.lr_init = 1e-3;
    c.train.lr_max = 3e-3;
    c.train.lr_final = 1e-4;
  } else {
    throw ConfigError("unknown profile '" + profile + "' (abide, adhd200, synthetic)");
  }
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  try {
    RunConfig c = RunConfig::for_profile(j.value("profile", std::string("synthetic")));
    if (j.contains("model")) {
      nlohmann::json merged = c.model;
      merged.update(j.at("model"));
      c.model = merged.get<ModelConfig>();
    }
    if (j.contains("train")) {
      nlohmann::json merged = c.train;
      merged.update(j.at("train"));
      c.train = merged.get<TrainConfig>();
    }
    c.model.validate();
    c.train.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

nlohmann::json to_json(const RunConfig& c) { return {{"profile", c.profile}, {"model", c.model}, {"train", c.train}}; }

// ---- outputs

nlohmann::json metrics_json(const Metrics& m) {
  return {{"acc", m.acc}, {"prec", m.prec}, {"rec", m.rec}, {"auc", m.auc ? nlohmann::json(*m.auc) : nlohmann::json()}};
}

nlohmann::json metrics_json(const CVReport& report, const TrainConfig& cfg) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : report.folds) {
    nlohmann::json e = metrics_json(f.test);
    e["fold"] = f.fold;
    e["best_val_acc"] = f.best_val_acc;
    e["best_epoch"] = f.best_epoch;
    if (!f.error.empty()) e["error"] = f.error;
    folds.push_back(std::move(e));
  }
  auto summary = [](const MetricSummary& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"count", s.count}}; };
  return {{"seed", cfg.seed},
          {"ordering", ordering_mode_name(cfg.ordering)},
          {"folds", folds},
          {"summary",
           {{"acc", summary(report.acc)},
            {"prec", summary(report.prec)},
            {"rec", summary(report.rec)},
            {"auc", summary(report.auc)}}},
          {"skipped", report.skipped}};
}

void write_metrics_csv(const CVReport& report, const fs::path& path) {
  std::string out = "fold,acc,prec,rec,auc\n";
  for (const auto& f : report.folds) {
    if (!f.error.empty()) continue;
    out += std::to_string(f.fold) + "," + format_double(f.test.acc) + "," + format_double(f.test.prec) + "," +
           format_double(f.test.rec) + "," + (f.test.auc ? format_double(*f.test.auc) : "") + "\n";
  }
  out += "mean," + format_double(report.acc.mean) + "," + format_double(report.prec.mean) + "," +
         format_double(report.rec.mean) + "," + format_double(report.auc.mean) + "\n";
  out += "std," + format_double(report.acc.std) + "," + format_double(report.prec.std) + "," +
         format_double(report.rec.std) + "," + format_double(report.auc.std) + "\n";
  write_text(path, out);
}

void write_loss_curve_csv(const FoldResult& fold, const fs::path& path) {
  std::string out = "epoch,train_loss,val_acc\n";
  for (const auto& e : fold.curve)
    out += std::to_string(e.epoch) + "," + format_double(e.train_loss) + "," + format_double(e.val_acc) + "\n";
  write_text(path, out);
}

void write_importance_csv(const ImportanceScores& s, const AtlasPartition& atlas, const fs::path& path) {
  const auto order = top_k(s.combined, s.combined.size());
  std::vector<std::size_t> rank(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = k + 1;
  std::string out = "roi_id,network,temporal,spatial,combined,rank\n";
  for (std::size_t r = 0; r < s.combined.size(); ++r)
    out += atlas.roi_ids[r] + "," + std::string(network_name(atlas.network_of[r])) + "," + format_double(s.temporal[r]) +
           "," + format_double(s.spatial[r]) + "," + format_double(s.combined[r]) + "," + std::to_string(rank[r]) + "\n";
  write_text(path, out);
}

nlohmann::json ordering_json(const ROIOrdering& ord, const std::vector<std::string>& roi_ids) {
  std::vector<std::string> ordered;
  for (std::size_t p : ord.perm) ordered.push_back(p < roi_ids.size() ? roi_ids[p] : std::to_string(p));
  return {{"perm", ord.perm}, {"provenance", provenance_name(ord.provenance)}, {"roi_ids", ordered}};
}

ROIOrdering ordering_from_json(const nlohmann::json& j) {
  ROIOrdering ord;
  try {
    ord.perm = j.at("perm").get<std::vector<std::size_t>>();
    const std::string prov = j.value("provenance", std::string("ec_sorted"));
    if (prov == "ec_sorted") ord.provenance = OrderingProvenance::ec_sorted;
    else if (prov == "random") ord.provenance = OrderingProvenance::random;
    else if (prov == "identity") ord.provenance = OrderingProvenance::identity;
    else throw ConfigError("unknown ordering provenance '" + prov + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ordering: ") + e.what());
  }
  ord.validate();
  return ord;
}

void write_matrix_csv(const Tensor& g, const std::vector<std::string>& roi_ids, const fs::path& path) {
  std::string out = "src";
  for (const auto& id : roi_ids) out += "," + id;
  out += '\n';
  for (std::size_t i = 0; i < g.rows(); ++i) {
    out += roi_ids[i];
    for (std::size_t j = 0; j < g.cols(); ++j) out += "," + format_double(g.at(i, j));
    out += '\n';
  }
  write_text(path, out);
}

Tensor read_matrix_csv(const fs::path& path, std::vector<std::string>* roi_ids) {
  const auto lines = split_lines(read_text(path));
  if (lines.empty()) throw DataError(path.string() + ": empty matrix file");
  const auto header = split_cells(lines[0]);
  if (header.size() < 2 || header[0] != "src") throw DataError(where(path, 1) + ": header must be src,<roi ids>");
  const std::size_t n = header.size() - 1;
  if (lines.size() != n + 1) throw DataError(path.string() + ": matrix is not square");
  Tensor g = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto cells = split_cells(lines[i + 1]);
    if (cells.size() != n + 1) throw DataError(where(path, i + 2) + ": wrong cell count");
    if (cells[0] != header[i + 1]) throw DataError(where(path, i + 2) + ": row id differs from column id");
    for (std::size_t j = 0; j < n; ++j) g.at(i, j) = parse_double(cells[j + 1], path, i + 2);
  }
  if (roi_ids) roi_ids->assign(header.begin() + 1, header.end());
  return g;
}

}  // namespace starformer
