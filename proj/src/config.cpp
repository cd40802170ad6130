#include "gmtr/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace gmtr {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + v + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define GMTR_FIELD_STR(name)                                             \
  {#name, [](const ExperimentConfig& c) { return c.name; },              \
   [](ExperimentConfig& c, const std::string& v) { c.name = v; }}
#define GMTR_FIELD_INT(name)                                              \
  {#name, [](const ExperimentConfig& c) { return std::to_string(c.name); }, \
   [](ExperimentConfig& c, const std::string& v) { c.name = std::stoi(v); }}
#define GMTR_FIELD_DOUBLE(name)                                          \
  {#name, [](const ExperimentConfig& c) { return fmt_double(c.name); },  \
   [](ExperimentConfig& c, const std::string& v) { c.name = std::stod(v); }}
#define GMTR_FIELD_BOOL(name)                                                  \
  {#name, [](const ExperimentConfig& c) { return c.name ? "true" : "false"; }, \
   [](ExperimentConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"seed", [](const ExperimentConfig& c) { return std::to_string(c.seed); },
       [](ExperimentConfig& c, const std::string& v) { c.seed = std::stoull(v); }},
      GMTR_FIELD_STR(mode),
      GMTR_FIELD_STR(backend),
      GMTR_FIELD_STR(graph),
      GMTR_FIELD_INT(image_size),
      GMTR_FIELD_INT(channels),
      GMTR_FIELD_INT(patch_size),
      GMTR_FIELD_INT(frontend_dim),
      GMTR_FIELD_INT(frontend_layers),
      GMTR_FIELD_INT(mlp_ratio),
      GMTR_FIELD_BOOL(positional),
      GMTR_FIELD_BOOL(filter),
      GMTR_FIELD_BOOL(cls_visible),
      GMTR_FIELD_INT(cross_layers),
      GMTR_FIELD_INT(bilinear_layers),
      GMTR_FIELD_INT(solver_dim),
      GMTR_FIELD_INT(solver_layers),
      GMTR_FIELD_INT(edge_dim),
      GMTR_FIELD_STR(heads),
      GMTR_FIELD_STR(sinkhorn_channel),
      GMTR_FIELD_INT(sinkhorn_iters),
      GMTR_FIELD_DOUBLE(sinkhorn_tau),
      GMTR_FIELD_DOUBLE(lr_frontend),
      GMTR_FIELD_DOUBLE(lr_solver),
      GMTR_FIELD_INT(epochs),
      GMTR_FIELD_INT(batch_size),
      GMTR_FIELD_INT(patience),
      GMTR_FIELD_INT(threads),
      GMTR_FIELD_DOUBLE(clamp_eps),
      GMTR_FIELD_STR(kind),
      GMTR_FIELD_INT(n),
      GMTR_FIELD_INT(count),
      GMTR_FIELD_INT(eval_count),
      GMTR_FIELD_DOUBLE(noise),
      GMTR_FIELD_STR(layout),
      GMTR_FIELD_DOUBLE(rotation),
      GMTR_FIELD_DOUBLE(jitter),
      GMTR_FIELD_BOOL(duplicates),
      GMTR_FIELD_DOUBLE(signal),
      GMTR_FIELD_DOUBLE(qap_noise),
      GMTR_FIELD_DOUBLE(edge_signal),
      GMTR_FIELD_DOUBLE(edge_noise),
  };
  return f;
}

#undef GMTR_FIELD_STR
#undef GMTR_FIELD_INT
#undef GMTR_FIELD_DOUBLE
#undef GMTR_FIELD_BOOL

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (f.key == key) {
      f.set(*this, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

std::string ExperimentConfig::get(const std::string& key) const {
  for (const Field& f : fields()) {
    if (f.key == key) return f.get(*this);
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream os;
  for (const Field& f : fields()) os << f.key << "=" << f.get(*this) << "\n";
  return os.str();
}

void ExperimentConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    set(line.substr(0, eq), line.substr(eq + 1));
  }
}

void ExperimentConfig::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("config: cannot write " + path);
  out << serialize();
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig mc;
  mc.mode = mode_from_string(mode);
  mc.graph_policy = graph == "complete" ? GraphPolicy::Complete : GraphPolicy::Delaunay;
  if (graph != "complete" && graph != "delaunay") {
    throw ConfigError("config: unknown graph policy '" + graph + "'");
  }
  mc.image_size = image_size;
  mc.channels = channels;
  mc.patch_size = patch_size;

  mc.frontend.dim = frontend_dim;
  mc.frontend.layers = frontend_layers;
  mc.frontend.mlp_ratio = mlp_ratio;
  mc.frontend.positional = positional;
  mc.frontend.filter = filter;
  mc.frontend.cls_visible = cls_visible;
  mc.frontend.cross_layers = cross_layers;
  mc.frontend.bilinear_layers = bilinear_layers;

  mc.solver.backend = backend_from_string(backend);
  mc.solver.dim = solver_dim;
  mc.solver.layers = solver_layers;
  mc.solver.edge_dim = edge_dim;
  mc.solver.sinkhorn_iters = sinkhorn_iters;
  mc.solver.sinkhorn_tau = sinkhorn_tau;
  if (sinkhorn_channel == "auto") {
    mc.solver.sinkhorn_channel = mc.solver.backend == BackendKind::Gcn;
  } else {
    mc.solver.sinkhorn_channel = parse_bool("sinkhorn_channel", sinkhorn_channel);
  }
  mc.solver.heads.clear();
  std::stringstream hs(heads);
  std::string tok;
  while (std::getline(hs, tok, ',')) mc.solver.heads.push_back(std::stoi(tok));
  return mc;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig tc;
  tc.lr_frontend = lr_frontend;
  tc.lr_solver = lr_solver;
  tc.epochs = epochs;
  tc.batch_size = batch_size;
  tc.seed = seed;
  tc.clamp_eps = clamp_eps;
  tc.early_stop_patience = patience;
  tc.threads = threads;
  return tc;
}

PairGenConfig ExperimentConfig::pair_config() const {
  PairGenConfig pc;
  pc.image_size = image_size;
  pc.channels = channels;
  pc.patch_size = patch_size;
  pc.n = n;
  pc.noise = noise;
  pc.layout = layout_from_string(layout);
  pc.rotation = rotation;
  pc.jitter = jitter;
  pc.duplicate_patterns = duplicates;
  return pc;
}

QapGenConfig ExperimentConfig::qap_config() const {
  QapGenConfig qc;
  qc.n = n;
  qc.signal = signal;
  qc.noise = qap_noise;
  qc.edge_signal = edge_signal;
  qc.edge_noise = edge_noise;
  return qc;
}

}  // namespace gmtr
