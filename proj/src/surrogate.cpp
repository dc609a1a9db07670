#include "influprune/surrogate.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace influprune {

namespace {

Vec stable_softmax(const Vec& z) {
  Vec p = (z.array() - z.maxCoeff()).exp();
  p /= p.sum();
  return p;
}

}  // namespace

SurrogateModel::SurrogateModel(int n_items, const SurrogateConfig& cfg) : convex_(cfg.convex_mode) {
  if (cfg.embed_dim < 1) throw FatalError("embed_dim must be >= 1");
  if (cfg.init_scale <= 0) throw FatalError("init_scale must be > 0");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, cfg.init_scale);
  input_.resize(n_items, cfg.embed_dim);
  output_.resize(n_items, cfg.embed_dim);
  for (int i = 0; i < n_items; ++i)
    for (int k = 0; k < cfg.embed_dim; ++k) input_(i, k) = gauss(rng);
  for (int i = 0; i < n_items; ++i)
    for (int k = 0; k < cfg.embed_dim; ++k) output_(i, k) = gauss(rng);
}

SurrogateModel::SurrogateModel(Mat input_table, Mat output_table, bool convex_mode)
    : input_(std::move(input_table)), output_(std::move(output_table)), convex_(convex_mode) {
  if (input_.rows() != output_.rows() || input_.cols() != output_.cols())
    throw FatalError("input/output table shape mismatch");
}

int SurrogateModel::learnable_dim() const {
  int block = n_items() * embed_dim();
  return convex_ ? block : 2 * block;
}

Vec SurrogateModel::learnable() const {
  int block = n_items() * embed_dim();
  Vec theta(learnable_dim());
  int off = 0;
  if (!convex_) {
    for (int i = 0; i < n_items(); ++i)
      for (int k = 0; k < embed_dim(); ++k) theta[off++] = input_(i, k);
  }
  for (int i = 0; i < n_items(); ++i)
    for (int k = 0; k < embed_dim(); ++k) theta[off++] = output_(i, k);
  (void)block;
  return theta;
}

void SurrogateModel::set_learnable(const Vec& theta) {
  if (theta.size() != learnable_dim()) throw FatalError("parameter vector has wrong dimension");
  int off = 0;
  if (!convex_) {
    for (int i = 0; i < n_items(); ++i)
      for (int k = 0; k < embed_dim(); ++k) input_(i, k) = theta[off++];
  }
  for (int i = 0; i < n_items(); ++i)
    for (int k = 0; k < embed_dim(); ++k) output_(i, k) = theta[off++];
}

Vec SurrogateModel::pool(std::span<const int> history) const {
  if (history.empty()) throw FatalError("empty history");
  Vec u = Vec::Zero(embed_dim());
  for (int item : history) u += input_.row(item).transpose();
  return u / static_cast<double>(history.size());
}

Vec SurrogateModel::predict(std::span<const int> history) const {
  return stable_softmax(output_ * pool(history));
}

double SurrogateModel::sample_loss(const UserSequence& s) const {
  Vec z = output_ * pool(s.history);
  double zmax = z.maxCoeff();
  double lse = zmax + std::log((z.array() - zmax).exp().sum());
  return lse - z[s.target];
}

Vec SurrogateModel::sample_gradient(const UserSequence& s) const {
  Vec u = pool(s.history);
  Vec g = stable_softmax(output_ * u);  // p
  g[s.target] -= 1.0;

  Vec grad = Vec::Zero(learnable_dim());
  int d = embed_dim();
  int out_off = convex_ ? 0 : n_items() * d;
  for (int j = 0; j < n_items(); ++j)
    grad.segment(out_off + j * d, d) = g[j] * u;
  if (!convex_) {
    Vec du = output_.transpose() * g / static_cast<double>(s.history.size());
    for (int item : s.history) grad.segment(item * d, d) += du;
  }
  return grad;
}

Vec SurrogateModel::hessian_vector(const UserSequence& s, const Vec& v) const {
  if (v.size() != learnable_dim()) throw FatalError("hvp vector has wrong dimension");
  double vnorm = v.norm();
  if (vnorm == 0.0) return Vec::Zero(v.size());

  int d = embed_dim();
  if (convex_) {
    Vec u = pool(s.history);
    Vec p = stable_softmax(output_ * u);
    // q_j = V.row(j) . u with V = v reshaped |I| x d
    Vec q(n_items());
    for (int j = 0; j < n_items(); ++j) q[j] = v.segment(j * d, d).dot(u);
    double pq = p.dot(q);
    Vec out(v.size());
    for (int j = 0; j < n_items(); ++j) out.segment(j * d, d) = p[j] * (q[j] - pq) * u;
    return out;
  }

  // Full mode: central differences through the analytic gradient.
  const double step = 1e-4;
  Vec unit = v / vnorm;
  Vec theta = learnable();
  SurrogateModel probe(*this);
  probe.set_learnable(theta + step * unit);
  Vec gp = probe.sample_gradient(s);
  probe.set_learnable(theta - step * unit);
  Vec gm = probe.sample_gradient(s);
  return (gp - gm) * (vnorm / (2.0 * step));
}

Mat SurrogateModel::sample_hessian(const UserSequence& s) const {
  if (!convex_) throw FatalError("explicit Hessian only available in convex mode");
  int d = embed_dim();
  int m = learnable_dim();
  Vec u = pool(s.history);
  Vec p = stable_softmax(output_ * u);
  Mat uu = u * u.transpose();
  Mat h = Mat::Zero(m, m);
  for (int j = 0; j < n_items(); ++j)
    for (int jj = 0; jj < n_items(); ++jj) {
      double w = (j == jj ? p[j] : 0.0) - p[j] * p[jj];
      if (w != 0.0) h.block(j * d, jj * d, d, d) = w * uu;
    }
  return h;
}

double SurrogateModel::mean_loss(std::span<const UserSequence> samples) const {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const UserSequence& s : samples) total += sample_loss(s);
  return total / static_cast<double>(samples.size());
}

SurrogateModel train_surrogate(std::span<const UserSequence> train, int n_items,
                               const SurrogateConfig& cfg, const TrainConfig& tcfg,
                               TrainTrace* trace, std::int64_t skip) {
  SurrogateModel model(n_items, cfg);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (static_cast<std::int64_t>(i) != skip) order.push_back(i);
  if (order.empty()) throw FatalError("empty training set");

  auto mean_loss_now = [&] {
    double total = 0.0;
    for (std::size_t i : order) total += model.sample_loss(train[i]);
    return total / static_cast<double>(order.size());
  };
  if (trace) trace->epoch_loss.push_back(mean_loss_now());

  std::mt19937_64 rng(tcfg.seed);
  Vec theta = model.learnable();
  long step = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      std::size_t end = std::min(order.size(), start + tcfg.batch_size);
      Vec grad = Vec::Zero(theta.size());
      for (std::size_t b = start; b < end; ++b) grad += model.sample_gradient(train[order[b]]);
      grad /= static_cast<double>(end - start);
      theta -= tcfg.learning_rate * (grad + tcfg.weight_decay * theta);
      model.set_learnable(theta);
      ++step;
      if (!theta.allFinite()) {
        std::ostringstream msg;
        msg << "non-finite parameters at training step " << step;
        throw FatalError(msg.str());
      }
    }
    if (trace) trace->epoch_loss.push_back(mean_loss_now());
  }

  if (tcfg.newton_polish) {
    if (!cfg.convex_mode) throw FatalError("newton_polish requires convex mode");
    int m = model.learnable_dim();
    double inv_n = 1.0 / static_cast<double>(order.size());
    for (int it = 0; it < tcfg.polish_max_iters; ++it) {
      Vec grad = Vec::Zero(m);
      for (std::size_t i : order) grad += model.sample_gradient(train[i]);
      grad = grad * inv_n + tcfg.weight_decay * theta;
      if (grad.norm() <= tcfg.polish_tol) break;
      Mat hess = Mat::Zero(m, m);
      for (std::size_t i : order) hess += model.sample_hessian(train[i]);
      hess *= inv_n;
      hess.diagonal().array() += tcfg.weight_decay;
      theta -= hess.ldlt().solve(grad);
      model.set_learnable(theta);
    }
    if (trace) trace->epoch_loss.push_back(mean_loss_now());
  }
  return model;
}

}  // namespace influprune
