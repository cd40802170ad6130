#include "gmtr/syndata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gmtr/discretize.hpp"

namespace gmtr {

namespace fs = std::filesystem;
using nlohmann::json;

PairLayout layout_from_string(const std::string& s) {
  if (s == "independent") return PairLayout::Independent;
  if (s == "same") return PairLayout::Same;
  if (s == "rotated") return PairLayout::Rotated;
  throw ConfigError("unknown layout '" + s + "' (expected independent|same|rotated)");
}

std::string to_string(PairLayout l) {
  switch (l) {
    case PairLayout::Independent: return "independent";
    case PairLayout::Same: return "same";
    case PairLayout::Rotated: return "rotated";
  }
  return "?";
}

namespace {

constexpr double kMargin = 9.0;    // keeps stamps inside the image
constexpr double kMinDist = 15.0;  // pairwise center separation
constexpr int kStampRadius = 6;
constexpr int kPlacementTries = 1000;

struct Stamp {
  double amp;
  double sigma;
  double stripe;  // secondary texture frequency
};

// Value-distinct appearance signatures; with duplicates, consecutive
// pattern pairs share one signature.
Stamp stamp_for(int pattern, int n, bool duplicates) {
  const int ident = duplicates ? pattern / 2 : pattern;
  const int count = duplicates ? (n + 1) / 2 : n;
  const double t = count > 1 ? static_cast<double>(ident) / (count - 1) : 0.0;
  Stamp s;
  s.amp = 0.4 + 0.55 * t;
  s.sigma = 2.1 + 0.9 * (ident % 3);
  s.stripe = 0.6 + 0.5 * (ident % 2);
  return s;
}

void render_stamp(ImageGrid& img, double cx, double cy, const Stamp& s) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx)) - kStampRadius);
  const int x1 = std::min(img.W - 1, static_cast<int>(std::ceil(cx)) + kStampRadius);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy)) - kStampRadius);
  const int y1 = std::min(img.H - 1, static_cast<int>(std::ceil(cy)) + kStampRadius);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double r2 = dx * dx + dy * dy;
      double v = s.amp * std::exp(-r2 / (2.0 * s.sigma * s.sigma));
      v *= 1.0 + 0.25 * std::cos(s.stripe * dx);
      for (int c = 0; c < img.C; ++c) {
        double& px = img.at(c, y, x);
        px = std::min(1.0, px + v);
      }
    }
  }
}

std::vector<Keypoint> place_centers(Rng& rng, int n, int w, int h) {
  std::vector<Keypoint> pts;
  for (int tries = 0; static_cast<int>(pts.size()) < n; ++tries) {
    if (tries >= kPlacementTries) {
      throw std::runtime_error("gen_pattern_pair: could not place " + std::to_string(n) +
                               " non-overlapping patterns in " + std::to_string(kPlacementTries) +
                               " tries");
    }
    Keypoint p{rng.uniform(kMargin, w - kMargin), rng.uniform(kMargin, h - kMargin)};
    bool ok = true;
    for (const Keypoint& q : pts) {
      const double d2 = (p.u - q.u) * (p.u - q.u) + (p.v - q.v) * (p.v - q.v);
      if (d2 < kMinDist * kMinDist) {
        ok = false;
        break;
      }
    }
    if (ok) pts.push_back(p);
  }
  return pts;
}

ImageGrid blank_image(const PairGenConfig& cfg) {
  ImageGrid img;
  img.C = cfg.channels;
  img.H = cfg.image_size;
  img.W = cfg.image_size;
  img.P = cfg.patch_size;
  img.pix.assign(static_cast<std::size_t>(img.C) * img.H * img.W, 0.0);
  return img;
}

void add_noise_clamped(ImageGrid& img, Rng& rng, double noise) {
  for (double& px : img.pix) {
    if (noise > 0.0) px += noise * rng.normal();
    px = std::clamp(px, 0.0, 1.0);
  }
}

}  // namespace

SyntheticPair gen_pattern_pair(std::uint64_t seed, const PairGenConfig& cfg) {
  if (cfg.n < 2) throw std::invalid_argument("gen_pattern_pair: n >= 2 required");
  if (cfg.image_size < 4 * static_cast<int>(kMargin)) {
    throw std::invalid_argument("gen_pattern_pair: image too small for the configured patterns");
  }
  Rng rng(seed);
  SyntheticPair pair;
  pair.seed = seed;
  pair.a = blank_image(cfg);
  pair.b = blank_image(cfg);

  pair.kps_a = place_centers(rng, cfg.n, cfg.image_size, cfg.image_size);

  // Locations of each pattern in image B (indexed by pattern, not slot).
  std::vector<Keypoint> b_loc(static_cast<std::size_t>(cfg.n));
  switch (cfg.layout) {
    case PairLayout::Independent:
      b_loc = place_centers(rng, cfg.n, cfg.image_size, cfg.image_size);
      break;
    case PairLayout::Same:
      for (int i = 0; i < cfg.n; ++i) {
        Keypoint p = pair.kps_a[static_cast<std::size_t>(i)];
        if (cfg.jitter > 0.0) {
          p.u += cfg.jitter * rng.normal();
          p.v += cfg.jitter * rng.normal();
        }
        p.u = std::clamp(p.u, kMargin, cfg.image_size - kMargin);
        p.v = std::clamp(p.v, kMargin, cfg.image_size - kMargin);
        b_loc[static_cast<std::size_t>(i)] = p;
      }
      break;
    case PairLayout::Rotated: {
      const double cx = cfg.image_size / 2.0, cy = cfg.image_size / 2.0;
      const double cs = std::cos(cfg.rotation), sn = std::sin(cfg.rotation);
      for (int i = 0; i < cfg.n; ++i) {
        const Keypoint& p = pair.kps_a[static_cast<std::size_t>(i)];
        Keypoint r{cx + cs * (p.u - cx) - sn * (p.v - cy),
                   cy + sn * (p.u - cx) + cs * (p.v - cy)};
        r.u = std::clamp(r.u, kMargin, cfg.image_size - kMargin);
        r.v = std::clamp(r.v, kMargin, cfg.image_size - kMargin);
        b_loc[static_cast<std::size_t>(i)] = r;
      }
      break;
    }
  }

  // Pattern i occupies slot perm[i] in B's keypoint list.
  std::vector<int> perm = rng.permutation(cfg.n);
  pair.kps_b.resize(static_cast<std::size_t>(cfg.n));
  pair.x_gt = Mat::Zero(cfg.n, cfg.n);
  for (int i = 0; i < cfg.n; ++i) {
    pair.kps_b[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] =
        b_loc[static_cast<std::size_t>(i)];
    pair.x_gt(i, perm[static_cast<std::size_t>(i)]) = 1.0;
  }

  for (int i = 0; i < cfg.n; ++i) {
    const Stamp s = stamp_for(i, cfg.n, cfg.duplicate_patterns);
    render_stamp(pair.a, pair.kps_a[static_cast<std::size_t>(i)].u,
                 pair.kps_a[static_cast<std::size_t>(i)].v, s);
    render_stamp(pair.b, b_loc[static_cast<std::size_t>(i)].u, b_loc[static_cast<std::size_t>(i)].v,
                 s);
  }
  add_noise_clamped(pair.a, rng, 0.0);
  add_noise_clamped(pair.b, rng, cfg.noise);
  return pair;
}

ImageGrid roll_image(const ImageGrid& img, int dx, int dy) {
  ImageGrid out = img;
  for (int c = 0; c < img.C; ++c) {
    for (int y = 0; y < img.H; ++y) {
      for (int x = 0; x < img.W; ++x) {
        const int sx = ((x - dx) % img.W + img.W) % img.W;
        const int sy = ((y - dy) % img.H + img.H) % img.H;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

double crop_match_accuracy(const SyntheticPair& pair) {
  Mat ca = crop_key_patches(pair.a, pair.kps_a);
  Mat cb = crop_key_patches(pair.b, pair.kps_b);
  const int n = static_cast<int>(pair.kps_a.size());
  Mat cost(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) cost(i, j) = (ca.row(i) - cb.row(j)).squaredNorm();
  }
  Assignment a = hungarian({cost, Sense::Minimize});
  return matching_accuracy(a.matrix(), pair.x_gt);
}

PlantedQap gen_qap_instance(std::uint64_t seed, const QapGenConfig& cfg) {
  if (cfg.n < 2 || cfg.n > 8) throw std::invalid_argument("gen_qap_instance: 2 <= n <= 8 required");
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(attempt)));
    const int n = cfg.n;

    Mat coords1(n, 2);
    {
      std::vector<Keypoint> pts;
      int tries = 0;
      while (static_cast<int>(pts.size()) < n && tries++ < kPlacementTries) {
        Keypoint p{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
        bool ok = true;
        for (const Keypoint& q : pts) {
          if ((p.u - q.u) * (p.u - q.u) + (p.v - q.v) * (p.v - q.v) < 0.15 * 0.15) ok = false;
        }
        if (ok) pts.push_back(p);
      }
      if (static_cast<int>(pts.size()) < n) continue;
      for (int i = 0; i < n; ++i) {
        coords1(i, 0) = pts[static_cast<std::size_t>(i)].u;
        coords1(i, 1) = pts[static_cast<std::size_t>(i)].v;
      }
    }
    std::vector<int> perm = rng.permutation(n);
    Mat coords2(n, 2);
    for (int i = 0; i < n; ++i) {
      coords2(perm[static_cast<std::size_t>(i)], 0) =
          std::clamp(coords1(i, 0) + cfg.jitter * rng.normal(), 0.02, 0.98);
      coords2(perm[static_cast<std::size_t>(i)], 1) =
          std::clamp(coords1(i, 1) + cfg.jitter * rng.normal(), 0.02, 0.98);
    }

    KeypointGraph g1, g2;
    try {
      g1 = build_graph(coords1, GraphPolicy::Delaunay);
      g2 = build_graph(coords2, GraphPolicy::Delaunay);
    } catch (const std::invalid_argument&) {
      continue;  // duplicate coordinates after jitter; resample
    }

    AffinityInstance inst;
    inst.n1 = inst.n2 = n;
    inst.kp.resize(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        inst.kp(i, j) =
            cfg.noise * rng.uniform() + (perm[static_cast<std::size_t>(i)] == j ? cfg.signal : 0.0);
      }
    }
    for (const auto& [i1, i2] : g1.edges) {
      for (const auto& [j1, j2] : g2.edges) {
        const int pi1 = perm[static_cast<std::size_t>(i1)], pi2 = perm[static_cast<std::size_t>(i2)];
        const bool aligned = (pi1 == j1 && pi2 == j2) || (pi1 == j2 && pi2 == j1);
        const double v = cfg.edge_noise * rng.uniform() + (aligned ? cfg.edge_signal : 0.0);
        const auto [p, q] = std::minmax(i1 * n + j1, i2 * n + j2);
        const auto [p2, q2] = std::minmax(i1 * n + j2, i2 * n + j1);
        inst.off.push_back({p, q, v});
        inst.off.push_back({p2, q2, v});
      }
    }
    std::sort(inst.off.begin(), inst.off.end(), [](const CooEntry& a, const CooEntry& b) {
      return std::tie(a.r, a.c) < std::tie(b.r, b.c);
    });

    QapSolution sol = brute_force_qap(inst);
    if (!sol.tie && sol.assignment == perm) {
      PlantedQap out;
      out.inst = std::move(inst);
      out.planted = std::move(perm);
      out.attempts = attempt + 1;
      return out;
    }
  }
  throw std::runtime_error("gen_qap_instance: planted optimum failed verification in " +
                           std::to_string(cfg.max_attempts) +
                           " consecutive samples; increase signal or decrease noise");
}

// ---- dataset io -------------------------------------------------------------

namespace {

std::string id_name(const char* stem, int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%06d", stem, id);
  return buf;
}

json keypoints_json(const KeypointSet& kps) {
  json arr = json::array();
  for (const Keypoint& k : kps) arr.push_back({k.u, k.v});
  return arr;
}

KeypointSet keypoints_from_json(const json& arr) {
  KeypointSet kps;
  for (const auto& e : arr) kps.push_back({e.at(0).get<double>(), e.at(1).get<double>()});
  return kps;
}

std::vector<int> perm_from_x(const Mat& x) {
  std::vector<int> p(static_cast<std::size_t>(x.rows()), -1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (x(i, j) == 1.0) p[static_cast<std::size_t>(i)] = static_cast<int>(j);
    }
  }
  return p;
}

json pair_cfg_json(const PairGenConfig& c) {
  return {{"image_size", c.image_size}, {"channels", c.channels},
          {"patch_size", c.patch_size}, {"n", c.n},
          {"noise", c.noise},           {"layout", to_string(c.layout)},
          {"rotation", c.rotation},     {"jitter", c.jitter},
          {"duplicates", c.duplicate_patterns}};
}

PairGenConfig pair_cfg_from_json(const json& j) {
  PairGenConfig c;
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.n = j.at("n").get<int>();
  c.noise = j.at("noise").get<double>();
  c.layout = layout_from_string(j.at("layout").get<std::string>());
  c.rotation = j.at("rotation").get<double>();
  c.jitter = j.at("jitter").get<double>();
  c.duplicate_patterns = j.at("duplicates").get<bool>();
  return c;
}

json qap_cfg_json(const QapGenConfig& c) {
  return {{"n", c.n},
          {"signal", c.signal},
          {"noise", c.noise},
          {"edge_signal", c.edge_signal},
          {"edge_noise", c.edge_noise},
          {"jitter", c.jitter},
          {"max_attempts", c.max_attempts}};
}

QapGenConfig qap_cfg_from_json(const json& j) {
  QapGenConfig c;
  c.n = j.at("n").get<int>();
  c.signal = j.at("signal").get<double>();
  c.noise = j.at("noise").get<double>();
  c.edge_signal = j.at("edge_signal").get<double>();
  c.edge_noise = j.at("edge_noise").get<double>();
  c.jitter = j.at("jitter").get<double>();
  c.max_attempts = j.at("max_attempts").get<int>();
  return c;
}

void write_index(const std::string& dir, const json& index) {
  std::ofstream f(fs::path(dir) / "index.json");
  if (!f) throw std::runtime_error("cannot write index.json in " + dir);
  f << index.dump(2) << "\n";
}

json read_index(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "index.json");
  if (!f) throw std::runtime_error("no index.json in " + dir);
  return json::parse(f);
}

}  // namespace

std::string dataset_kind(const std::string& dir) {
  return read_index(dir).at("kind").get<std::string>();
}

PairDataset gen_pair_dataset(std::uint64_t base_seed, int train_count, int eval_count,
                             const PairGenConfig& cfg) {
  PairDataset ds;
  ds.cfg = cfg;
  for (int i = 0; i < train_count + eval_count; ++i) {
    SyntheticPair p = gen_pattern_pair(Rng::mix(base_seed, static_cast<std::uint64_t>(i)), cfg);
    (i < train_count ? ds.train : ds.eval).push_back(std::move(p));
  }
  return ds;
}

QapDataset gen_qap_dataset(std::uint64_t base_seed, int train_count, int eval_count,
                           const QapGenConfig& cfg) {
  QapDataset ds;
  ds.cfg = cfg;
  for (int i = 0; i < train_count + eval_count; ++i) {
    PlantedQap q = gen_qap_instance(Rng::mix(base_seed, static_cast<std::uint64_t>(i)), cfg);
    (i < train_count ? ds.train : ds.eval).push_back(std::move(q));
  }
  return ds;
}

void write_pair_dataset(const std::string& dir, std::uint64_t base_seed, int train_count,
                        int eval_count, const PairGenConfig& cfg) {
  fs::create_directories(dir);
  json instances = json::array();
  for (int i = 0; i < train_count + eval_count; ++i) {
    const std::uint64_t seed = Rng::mix(base_seed, static_cast<std::uint64_t>(i));
    SyntheticPair p = gen_pattern_pair(seed, cfg);
    const std::string stem = id_name("pair", i);
    save_image((fs::path(dir) / (stem + "_a.bin")).string(),
               (fs::path(dir) / (stem + "_a.json")).string(), p.a);
    save_image((fs::path(dir) / (stem + "_b.bin")).string(),
               (fs::path(dir) / (stem + "_b.json")).string(), p.b);
    json meta = {{"seed", seed},
                 {"keypoints_a", keypoints_json(p.kps_a)},
                 {"keypoints_b", keypoints_json(p.kps_b)},
                 {"x_gt", perm_from_x(p.x_gt)},
                 {"image_a", stem + "_a.json"},
                 {"image_b", stem + "_b.json"}};
    std::ofstream mf(fs::path(dir) / (stem + ".json"));
    mf << meta.dump(2) << "\n";
    instances.push_back({{"id", i},
                         {"seed", seed},
                         {"split", i < train_count ? "train" : "eval"},
                         {"file", stem + ".json"}});
  }
  write_index(dir, {{"kind", "pairs"},
                    {"params", pair_cfg_json(cfg)},
                    {"base_seed", base_seed},
                    {"instances", instances}});
}

PairDataset load_pair_dataset(const std::string& dir) {
  json index = read_index(dir);
  if (index.at("kind") != "pairs") throw std::runtime_error(dir + " is not a pairs dataset");
  PairDataset ds;
  ds.cfg = pair_cfg_from_json(index.at("params"));
  for (const auto& e : index.at("instances")) {
    std::ifstream mf(fs::path(dir) / e.at("file").get<std::string>());
    if (!mf) throw std::runtime_error("missing pair file in " + dir);
    json meta = json::parse(mf);
    SyntheticPair p;
    p.seed = meta.at("seed").get<std::uint64_t>();
    p.a = load_image((fs::path(dir) / meta.at("image_a").get<std::string>()).string());
    p.b = load_image((fs::path(dir) / meta.at("image_b").get<std::string>()).string());
    p.kps_a = keypoints_from_json(meta.at("keypoints_a"));
    p.kps_b = keypoints_from_json(meta.at("keypoints_b"));
    const auto perm = meta.at("x_gt").get<std::vector<int>>();
    const int n = static_cast<int>(perm.size());
    p.x_gt = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) p.x_gt(i, perm[static_cast<std::size_t>(i)]) = 1.0;
    (e.at("split") == "train" ? ds.train : ds.eval).push_back(std::move(p));
  }
  return ds;
}

void write_qap_dataset(const std::string& dir, std::uint64_t base_seed, int train_count,
                       int eval_count, const QapGenConfig& cfg) {
  fs::create_directories(dir);
  json instances = json::array();
  for (int i = 0; i < train_count + eval_count; ++i) {
    const std::uint64_t seed = Rng::mix(base_seed, static_cast<std::uint64_t>(i));
    PlantedQap q = gen_qap_instance(seed, cfg);
    const std::string name = id_name("qap", i) + ".aff";
    save_affinity((fs::path(dir) / name).string(), q.inst);
    instances.push_back({{"id", i},
                         {"seed", seed},
                         {"split", i < train_count ? "train" : "eval"},
                         {"file", name},
                         {"planted", q.planted}});
  }
  write_index(dir, {{"kind", "qap"},
                    {"params", qap_cfg_json(cfg)},
                    {"base_seed", base_seed},
                    {"instances", instances}});
}

QapDataset load_qap_dataset(const std::string& dir) {
  json index = read_index(dir);
  if (index.at("kind") != "qap") throw std::runtime_error(dir + " is not a qap dataset");
  QapDataset ds;
  ds.cfg = qap_cfg_from_json(index.at("params"));
  for (const auto& e : index.at("instances")) {
    PlantedQap q;
    q.inst = load_affinity((fs::path(dir) / e.at("file").get<std::string>()).string());
    q.planted = e.at("planted").get<std::vector<int>>();
    (e.at("split") == "train" ? ds.train : ds.eval).push_back(std::move(q));
  }
  return ds;
}

}  // namespace gmtr
