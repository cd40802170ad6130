#include "gmtr/affinity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace gmtr {

namespace {

double cross(double ax, double ay, double bx, double by, double cx, double cy) {
  return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
}

// > 0 when p lies strictly inside the circumcircle of ccw triangle (a,b,c).
double incircle(const Mat& pts, int a, int b, int c, int p) {
  const double ax = pts(a, 0) - pts(p, 0), ay = pts(a, 1) - pts(p, 1);
  const double bx = pts(b, 0) - pts(p, 0), by = pts(b, 1) - pts(p, 1);
  const double cx = pts(c, 0) - pts(p, 0), cy = pts(c, 1) - pts(p, 1);
  return (ax * ax + ay * ay) * (bx * cy - cx * by) - (bx * bx + by * by) * (ax * cy - cx * ay) +
         (cx * cx + cy * cy) * (ax * by - bx * ay);
}

struct Tri {
  int a, b, c;
};

std::vector<std::pair<int, int>> delaunay_edges(const Mat& coords) {
  const int n = static_cast<int>(coords.rows());
  // Embed the input in a large super-triangle, insert points one at a
  // time, carve the cavity of circumcircle-violating triangles and fan it
  // around the new point.
  double lo_x = coords.col(0).minCoeff(), hi_x = coords.col(0).maxCoeff();
  double lo_y = coords.col(1).minCoeff(), hi_y = coords.col(1).maxCoeff();
  const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1.0});
  const double cx = 0.5 * (lo_x + hi_x), cy = 0.5 * (lo_y + hi_y);

  Mat pts(n + 3, 2);
  pts.topRows(n) = coords;
  pts(n, 0) = cx - 40.0 * span;
  pts(n, 1) = cy - 20.0 * span;
  pts(n + 1, 0) = cx + 40.0 * span;
  pts(n + 1, 1) = cy - 20.0 * span;
  pts(n + 2, 0) = cx;
  pts(n + 2, 1) = cy + 40.0 * span;

  std::vector<Tri> tris{{n, n + 1, n + 2}};
  auto ccw = [&](Tri& t) {
    if (cross(pts(t.a, 0), pts(t.a, 1), pts(t.b, 0), pts(t.b, 1), pts(t.c, 0), pts(t.c, 1)) < 0.0) {
      std::swap(t.b, t.c);
    }
  };
  ccw(tris[0]);

  for (int p = 0; p < n; ++p) {
    std::vector<Tri> keep;
    std::vector<std::pair<int, int>> boundary;
    auto toggle = [&](int u, int v) {
      // Cavity boundary: edges appearing exactly once among bad triangles.
      const auto key = std::minmax(u, v);
      auto it = std::find_if(boundary.begin(), boundary.end(), [&](const auto& e) {
        return std::minmax(e.first, e.second) == key;
      });
      if (it != boundary.end()) {
        boundary.erase(it);
      } else {
        boundary.emplace_back(u, v);
      }
    };
    for (const Tri& t : tris) {
      if (incircle(pts, t.a, t.b, t.c, p) > 0.0) {
        toggle(t.a, t.b);
        toggle(t.b, t.c);
        toggle(t.c, t.a);
      } else {
        keep.push_back(t);
      }
    }
    for (const auto& [u, v] : boundary) {
      Tri t{u, v, p};
      ccw(t);
      keep.push_back(t);
    }
    tris = std::move(keep);
  }

  std::set<std::pair<int, int>> edges;
  for (const Tri& t : tris) {
    if (t.a >= n || t.b >= n || t.c >= n) continue;
    edges.insert(std::minmax(t.a, t.b));
    edges.insert(std::minmax(t.b, t.c));
    edges.insert(std::minmax(t.c, t.a));
  }
  return {edges.begin(), edges.end()};
}

bool all_collinear(const Mat& coords) {
  const int n = static_cast<int>(coords.rows());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      for (int k = j + 1; k < n; ++k) {
        if (std::abs(cross(coords(i, 0), coords(i, 1), coords(j, 0), coords(j, 1), coords(k, 0),
                           coords(k, 1))) > 1e-12) {
          return false;
        }
      }
    }
  }
  return true;
}

std::vector<std::pair<int, int>> complete_edges(int n) {
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) edges.emplace_back(i, j);
  }
  return edges;
}

}  // namespace

KeypointGraph build_graph(const Mat& coords, GraphPolicy policy) {
  const int n = static_cast<int>(coords.rows());
  if (n < 1 || coords.cols() != 2) {
    throw std::invalid_argument("build_graph: coords must be n x 2 with n >= 1, got " +
                                shape_str(coords));
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (coords(i, 0) == coords(j, 0) && coords(i, 1) == coords(j, 1)) {
        throw std::invalid_argument("build_graph: duplicate coordinates at rows " +
                                    std::to_string(i) + " and " + std::to_string(j));
      }
    }
  }
  KeypointGraph g;
  g.coords = coords;
  if (policy == GraphPolicy::Complete || n < 3 || all_collinear(coords)) {
    g.edges = complete_edges(n);
  } else {
    g.edges = delaunay_edges(coords);
  }
  return g;
}

Mat AffinityInstance::dense() const {
  const int N = nodes();
  Mat K = Mat::Zero(N, N);
  for (int i = 0; i < n1; ++i) {
    for (int j = 0; j < n2; ++j) K(i * n2 + j, i * n2 + j) = kp(i, j);
  }
  for (const CooEntry& e : off) {
    K(e.r, e.c) = e.v;
    K(e.c, e.r) = e.v;
  }
  return K;
}

Mat AffinityInstance::off_dense() const {
  const int N = nodes();
  Mat K = Mat::Zero(N, N);
  for (const CooEntry& e : off) {
    K(e.r, e.c) = e.v;
    K(e.c, e.r) = e.v;
  }
  return K;
}

void save_affinity(const std::string& path, const AffinityInstance& inst) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_affinity: cannot open " + path);
  char buf[64];
  f << inst.n1 << " " << inst.n2 << "\n";
  for (int i = 0; i < inst.n1; ++i) {
    for (int j = 0; j < inst.n2; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", inst.kp(i, j));
      f << buf << (j + 1 < inst.n2 ? " " : "\n");
    }
  }
  for (const CooEntry& e : inst.off) {
    std::snprintf(buf, sizeof(buf), "%.17g", e.v);
    f << e.r << " " << e.c << " " << buf << "\n";
  }
}

AffinityInstance load_affinity(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_affinity: cannot open " + path);
  AffinityInstance inst;
  if (!(f >> inst.n1 >> inst.n2) || inst.n1 < 1 || inst.n2 < 1) {
    throw std::runtime_error("load_affinity: bad header in " + path);
  }
  inst.kp.resize(inst.n1, inst.n2);
  for (int i = 0; i < inst.n1; ++i) {
    for (int j = 0; j < inst.n2; ++j) {
      if (!(f >> inst.kp(i, j))) throw std::runtime_error("load_affinity: truncated K_p block");
    }
  }
  int r, c;
  double v;
  while (f >> r >> c >> v) {
    if (r > c) std::swap(r, c);
    if (r == c || r < 0 || c >= inst.nodes()) {
      throw std::runtime_error("load_affinity: bad COO entry (" + std::to_string(r) + ", " +
                               std::to_string(c) + ")");
    }
    inst.off.push_back({r, c, v});
  }
  std::sort(inst.off.begin(), inst.off.end(),
            [](const CooEntry& a, const CooEntry& b) { return std::tie(a.r, a.c) < std::tie(b.r, b.c); });
  return inst;
}

AffinityParams make_affinity_params(ParamStore& store, const std::string& group, int feat_dim,
                                    int node_dim, int edge_dim, Rng& rng) {
  AffinityParams par;
  par.metric_node = &store.add("affinity.metric_node", group, init_identity(feat_dim));
  par.metric_edge = &store.add("affinity.metric_edge", group, init_identity(2 * feat_dim));
  par.node_lift = &store.add("affinity.node_lift", group, init_trunc_normal(rng, 1, node_dim, 0.1));
  par.edge_lift = &store.add("affinity.edge_lift", group, init_trunc_normal(rng, 1, edge_dim, 0.1));
  par.self_edge = &store.add("affinity.self_edge", group, init_trunc_normal(rng, 1, edge_dim, 0.1));
  return par;
}

ad::Var node_affinity(Graph& g, ad::Var f1, ad::Var f2, Param& metric_node) {
  ad::Var a = g.use(metric_node);
  ad::Var lam = ad::matmul(a, ad::transpose(a));
  return ad::matmul(ad::matmul(f1, lam), ad::transpose(f2));
}

namespace {

// Edge features per undirected edge: [F_i + F_j, |F_i - F_j|], which is
// invariant to edge orientation.
ad::Var edge_features(ad::Var f, const std::vector<std::pair<int, int>>& edges) {
  std::vector<int> firsts, seconds;
  firsts.reserve(edges.size());
  seconds.reserve(edges.size());
  for (const auto& [i, j] : edges) {
    firsts.push_back(i);
    seconds.push_back(j);
  }
  ad::Var fa = ad::select_rows(f, firsts);
  ad::Var fb = ad::select_rows(f, seconds);
  return ad::concat_cols(fa + fb, ad::abs(fa - fb));
}

}  // namespace

AffinityVars build_affinity(Graph& g, ad::Var f1, ad::Var f2, const KeypointGraph& g1,
                            const KeypointGraph& g2, const AffinityParams& par) {
  AffinityVars av;
  av.n1 = g1.n();
  av.n2 = g2.n();
  av.kp = node_affinity(g, f1, f2, *par.metric_node);

  const int N = av.n1 * av.n2;
  if (g1.edges.empty() || g2.edges.empty()) {
    av.off = g.constant(Mat::Zero(N, N));
    return av;
  }

  ad::Var ef1 = edge_features(f1, g1.edges);
  ad::Var ef2 = edge_features(f2, g2.edges);
  ad::Var b = g.use(*par.metric_edge);
  ad::Var lam = ad::matmul(b, ad::transpose(b));
  ad::Var pairwise = ad::matmul(ad::matmul(ef1, lam), ad::transpose(ef2));  // |E1| x |E2|

  std::vector<ad::ScatterEntry> map;
  std::set<std::pair<int, int>> support;
  map.reserve(4 * g1.edges.size() * g2.edges.size());
  for (std::size_t a = 0; a < g1.edges.size(); ++a) {
    const auto [i1, i2] = g1.edges[a];
    for (std::size_t bIdx = 0; bIdx < g2.edges.size(); ++bIdx) {
      const auto [j1, j2] = g2.edges[bIdx];
      const int sr = static_cast<int>(a), sc = static_cast<int>(bIdx);
      const int p = i1 * av.n2 + j1, q = i2 * av.n2 + j2;
      const int p2 = i1 * av.n2 + j2, q2 = i2 * av.n2 + j1;
      map.push_back({sr, sc, p, q});
      map.push_back({sr, sc, q, p});
      map.push_back({sr, sc, p2, q2});
      map.push_back({sr, sc, q2, p2});
      support.insert(std::minmax(p, q));
      support.insert(std::minmax(p2, q2));
    }
  }
  av.off = ad::scatter_entries(pairwise, std::move(map), N, N);
  av.support.assign(support.begin(), support.end());
  return av;
}

AffinityInstance freeze(const AffinityVars& av) {
  AffinityInstance inst;
  inst.n1 = av.n1;
  inst.n2 = av.n2;
  inst.kp = av.kp.value();
  const Mat& off = av.off.value();
  for (const auto& [r, c] : av.support) inst.off.push_back({r, c, off(r, c)});
  return inst;
}

AssociationGraph to_association_graph(const AffinityInstance& inst) {
  AssociationGraph ag;
  ag.nodes = inst.nodes();
  ag.adjacency_self = Mat::Identity(ag.nodes, ag.nodes);
  ag.edge_scalars = inst.off_dense();
  for (const CooEntry& e : inst.off) {
    ag.edges.emplace_back(e.r, e.c);
    ag.adjacency_self(e.r, e.c) = 1.0;
    ag.adjacency_self(e.c, e.r) = 1.0;
  }
  return ag;
}

ad::Var association_node_features(Graph& g, ad::Var kp, Param& node_lift,
                                  std::optional<ad::Var> sinkhorn_channel) {
  const int N = static_cast<int>(kp.rows() * kp.cols());
  ad::Var col = ad::reshape(kp, N, 1);
  ad::Var feats = ad::matmul(col, g.use(node_lift));
  if (sinkhorn_channel) {
    ad::Var extra = ad::reshape(*sinkhorn_channel, N, 1);
    feats = ad::concat_cols(feats, extra);
  }
  return feats;
}

}  // namespace gmtr
