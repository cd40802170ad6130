#include "gmtr/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <thread>

#include "gmtr/discretize.hpp"

namespace gmtr {

namespace {

void check_binary(const Mat& x_gt) {
  for (Eigen::Index i = 0; i < x_gt.size(); ++i) {
    const double v = *(x_gt.data() + i);
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument("bce_permutation_loss: X_gt is not binary");
    }
  }
}

}  // namespace

double bce_permutation_loss(const Mat& m, const Mat& x_gt, double eps) {
  if (m.rows() != x_gt.rows() || m.cols() != x_gt.cols()) {
    throw std::invalid_argument("bce_permutation_loss: shape mismatch: " + shape_str(m) + " vs " +
                                shape_str(x_gt));
  }
  check_binary(x_gt);
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double p = std::clamp(m(i, j), eps, 1.0 - eps);
      terms.push_back(x_gt(i, j) * std::log(p) + (1.0 - x_gt(i, j)) * std::log(1.0 - p));
    }
  }
  return -order_invariant_sum(terms) / static_cast<double>(m.size());
}

ad::Var bce_permutation_loss(Graph& g, ad::Var m, const Mat& x_gt, double eps) {
  if (m.rows() != x_gt.rows() || m.cols() != x_gt.cols()) {
    throw std::invalid_argument("bce_permutation_loss: shape mismatch: " +
                                shape_str(m.value()) + " vs " + shape_str(x_gt));
  }
  check_binary(x_gt);
  ad::Var mc = ad::clamp(m, eps, 1.0 - eps);
  ad::Var pos = ad::cmul(g.constant(x_gt), ad::log(mc));
  ad::Var one_minus = ad::add_scalar(ad::scale(mc, -1.0), 1.0);
  ad::Var neg = ad::cmul(g.constant((1.0 - x_gt.array()).matrix()), ad::log(one_minus));
  return ad::scale(ad::sum_all(pos + neg), -1.0 / static_cast<double>(x_gt.size()));
}

std::string metrics_jsonl(const std::vector<EpochMetrics>& log) {
  std::ostringstream os;
  char buf[256];
  for (const EpochMetrics& e : log) {
    std::snprintf(buf, sizeof(buf),
                  "{\"epoch\":%d,\"train_loss\":%.17g,\"eval_acc\":%.17g,\"wall_ms\":%ld}\n",
                  e.epoch, e.train_loss, e.eval_acc, e.wall_ms);
    os << buf;
  }
  return os.str();
}

std::string metrics_jsonl_canonical(const std::vector<EpochMetrics>& log) {
  std::ostringstream os;
  char buf[256];
  for (const EpochMetrics& e : log) {
    std::snprintf(buf, sizeof(buf), "{\"epoch\":%d,\"train_loss\":%.17g,\"eval_acc\":%.17g}\n",
                  e.epoch, e.train_loss, e.eval_acc);
    os << buf;
  }
  return os.str();
}

namespace {

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long t = 0;

  void step(ParamStore& store, const std::vector<Mat>& grads, double lr_frontend,
            double lr_solver) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < store.size(); ++i) {
      Param& p = store[i];
      if (!p.trainable) continue;
      const Mat& grad = grads[i];
      if (p.m_state.size() == 0) {
        p.m_state = Mat::Zero(p.value.rows(), p.value.cols());
        p.v_state = Mat::Zero(p.value.rows(), p.value.cols());
      }
      p.m_state = beta1 * p.m_state + (1.0 - beta1) * grad;
      p.v_state = (beta2 * p.v_state.array() + (1.0 - beta2) * grad.array().square()).matrix();
      const double lr = p.group == "frontend" ? lr_frontend : lr_solver;
      p.value.array() -=
          lr * (p.m_state.array() / bc1) / ((p.v_state.array() / bc2).sqrt() + eps);
    }
  }
};

// Builds the training loss for one instance; index into the train split.
ad::Var instance_loss(GmtrModel& model, const Dataset& data, std::size_t idx, Graph& g,
                      double eps) {
  if (std::holds_alternative<PairDataset>(data)) {
    const auto& ds = std::get<PairDataset>(data);
    const SyntheticPair& pair = ds.train[idx];
    return bce_permutation_loss(g, model.pair_soft(g, pair), pair.x_gt, eps);
  }
  const auto& ds = std::get<QapDataset>(data);
  const PlantedQap& q = ds.train[idx];
  Mat x_gt = Mat::Zero(q.inst.n1, q.inst.n2);
  for (int i = 0; i < q.inst.n1; ++i) x_gt(i, q.planted[static_cast<std::size_t>(i)]) = 1.0;
  return bce_permutation_loss(g, model.instance_soft(g, q.inst), x_gt, eps);
}

std::size_t train_size(const Dataset& data) {
  if (std::holds_alternative<PairDataset>(data)) return std::get<PairDataset>(data).train.size();
  return std::get<QapDataset>(data).train.size();
}

// Deterministic parallel map: results land in slot order regardless of
// worker scheduling.
template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<std::size_t> next{0};
  const int workers = std::min<int>(threads, static_cast<int>(count));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

TrainResult train(GmtrModel& model, const Dataset& data, const TrainConfig& cfg,
                  std::ostream* metrics_out) {
  const std::size_t count = train_size(data);
  if (count == 0) throw std::invalid_argument("train: empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("train: bad epochs/batch size");

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;

  TrainResult result;
  Adam adam;
  std::vector<Mat> grads(model.store.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Fisher-Yates with the run RNG; identical seeds give identical orders.
    for (std::size_t i = count - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)));
      std::swap(order[i], order[j]);
    }
    double epoch_loss = 0.0;
    int batch_index = 0;
    for (std::size_t start = 0; start < count; start += cfg.batch_size, ++batch_index) {
      const std::size_t stop = std::min(count, start + cfg.batch_size);
      const int bsize = static_cast<int>(stop - start);
      for (std::size_t i = 0; i < model.store.size(); ++i) {
        grads[i] = Mat::Zero(model.store[i].value.rows(), model.store[i].value.cols());
      }
      std::vector<double> losses(static_cast<std::size_t>(bsize));
      std::vector<std::vector<Mat>> worker_grads(static_cast<std::size_t>(bsize));
      parallel_for(static_cast<std::size_t>(bsize), cfg.threads, [&](std::size_t k) {
        Graph g(true);
        ad::Var loss = instance_loss(model, data, order[start + k], g, cfg.clamp_eps);
        losses[k] = loss.scalar();
        if (std::isfinite(losses[k])) {
          g.tape.backward(loss);
          auto& slot = worker_grads[k];
          slot.resize(model.store.size());
          for (auto& [p, v] : g.bound) {
            if (p->trainable) slot[static_cast<std::size_t>(p->index)] = g.tape.grad(v);
          }
        }
      });
      for (std::size_t k = 0; k < static_cast<std::size_t>(bsize); ++k) {
        if (!std::isfinite(losses[k])) throw DivergenceError(epoch, batch_index);
        epoch_loss += losses[k];
        for (std::size_t i = 0; i < model.store.size(); ++i) {
          if (worker_grads[k][i].size() != 0) grads[i] += worker_grads[k][i];
        }
      }
      for (std::size_t i = 0; i < model.store.size(); ++i) {
        grads[i] /= static_cast<double>(bsize);
      }
      adam.step(model.store, grads, cfg.lr_frontend, cfg.lr_solver);
    }

    EvalResult ev = evaluate(model, data, /*eval_split=*/true, cfg.threads);
    const auto t1 = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = epoch_loss / static_cast<double>(count);
    m.eval_acc = ev.mean_acc;
    m.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
    result.log.push_back(m);
    result.final_eval_acc = m.eval_acc;
    if (m.eval_acc > result.best_eval_acc || result.best_epoch < 0) {
      result.best_eval_acc = m.eval_acc;
      result.best_epoch = epoch;
    }
    if (epoch - result.best_epoch >= cfg.early_stop_patience) break;
  }
  if (metrics_out) *metrics_out << metrics_jsonl(result.log);
  return result;
}

EvalResult evaluate(const GmtrModel& model, const Dataset& data, bool eval_split, int threads) {
  EvalResult res;
  if (std::holds_alternative<PairDataset>(data)) {
    const auto& ds = std::get<PairDataset>(data);
    const auto& split = eval_split ? ds.eval : ds.train;
    res.per_instance_acc.resize(split.size());
    parallel_for(split.size(), threads, [&](std::size_t i) {
      MatchingResult mr = model.match_pair(split[i]);
      res.per_instance_acc[i] = matching_accuracy(mr.hard, split[i].x_gt);
    });
  } else {
    const auto& ds = std::get<QapDataset>(data);
    const auto& split = eval_split ? ds.eval : ds.train;
    res.per_instance_acc.resize(split.size());
    res.objective_ratio.resize(split.size());
    parallel_for(split.size(), threads, [&](std::size_t i) {
      const PlantedQap& q = split[i];
      MatchingResult mr = model.solve_instance(q.inst);
      Mat x_gt = Mat::Zero(q.inst.n1, q.inst.n2);
      for (int r = 0; r < q.inst.n1; ++r) x_gt(r, q.planted[static_cast<std::size_t>(r)]) = 1.0;
      res.per_instance_acc[i] = matching_accuracy(mr.hard, x_gt);
      const double opt = qap_objective(q.inst, q.planted);
      res.objective_ratio[i] = opt != 0.0 ? mr.objective / opt : 1.0;
    });
  }
  if (!res.per_instance_acc.empty()) {
    double s = 0.0;
    for (double a : res.per_instance_acc) s += a;
    res.mean_acc = s / static_cast<double>(res.per_instance_acc.size());
  }
  if (!res.objective_ratio.empty()) {
    double s = 0.0;
    for (double r : res.objective_ratio) s += r;
    res.mean_objective_ratio = s / static_cast<double>(res.objective_ratio.size());
  }
  return res;
}

GradCheckReport grad_audit(GmtrModel& model, const Dataset& data, double h) {
  if (train_size(data) == 0) throw std::invalid_argument("grad_audit: empty dataset");
  LossBuilder builder = [&](Graph& g) { return instance_loss(model, data, 0, g, 1e-12); };
  return finite_diff_check(model.store, builder, h);
}

}  // namespace gmtr
