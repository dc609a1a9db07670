#include "influprune/target_model.hpp"

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

double log_sum_exp(const Vec& z) {
  double zmax = z.maxCoeff();
  return zmax + std::log((z.array() - zmax).exp().sum());
}

void fill_gauss(Mat& m, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> gauss(0.0, scale);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = gauss(rng);
}

}  // namespace

struct TargetModel::Grads {
  std::vector<Mat> blocks;
};

TargetModel::TargetModel(int n_items, const TargetConfig& cfg) : cfg_(cfg), n_items_(n_items) {
  if (cfg.embed_dim < 1 || n_items < 2) throw FatalError("bad target model shape");
  if (cfg.pretrain_fraction <= 0.0 || cfg.pretrain_fraction >= 1.0)
    throw FatalError("pretrain_fraction must be strictly inside (0,1)");
  std::mt19937_64 rng(cfg.seed);
  int d = cfg.embed_dim;
  embed_.resize(n_items, d);
  fill_gauss(embed_, rng, cfg.init_scale);
  out_.resize(n_items, d);
  fill_gauss(out_, rng, cfg.init_scale);
  if (cfg.arch == TargetArch::TinyTransformer) {
    pos_.resize(cfg.max_positions, d);
    fill_gauss(pos_, rng, cfg.init_scale);
    int f = 2 * d;
    layers_.resize(cfg.n_layers);
    for (Layer& l : layers_) {
      l.wq.resize(d, d); fill_gauss(l.wq, rng, cfg.init_scale);
      l.wk.resize(d, d); fill_gauss(l.wk, rng, cfg.init_scale);
      l.wv.resize(d, d); fill_gauss(l.wv, rng, cfg.init_scale);
      l.wo.resize(d, d); fill_gauss(l.wo, rng, cfg.init_scale);
      l.w1.resize(f, d); fill_gauss(l.w1, rng, cfg.init_scale);
      l.w2.resize(d, f); fill_gauss(l.w2, rng, cfg.init_scale);
    }
  }
  // One-sided zero init: adapters start as an exact no-op.
  adapter_u_ = Mat::Zero(n_items, cfg.adapter_rank);
  adapter_v_.resize(d, cfg.adapter_rank);
  fill_gauss(adapter_v_, rng, cfg.init_scale);
}

std::vector<std::pair<const Mat*, bool>> TargetModel::blocks() const {
  bool all = cfg_.subset == LearnableSubset::All;
  std::vector<std::pair<const Mat*, bool>> out;
  out.emplace_back(&embed_, all);
  if (cfg_.arch == TargetArch::TinyTransformer) {
    out.emplace_back(&pos_, all);
    for (const Layer& l : layers_) {
      out.emplace_back(&l.wq, all);
      out.emplace_back(&l.wk, all);
      out.emplace_back(&l.wv, all);
      out.emplace_back(&l.wo, all);
      out.emplace_back(&l.w1, all);
      out.emplace_back(&l.w2, all);
    }
  }
  out.emplace_back(&out_, all);
  out.emplace_back(&adapter_u_, true);
  out.emplace_back(&adapter_v_, true);
  return out;
}

std::vector<std::pair<Mat*, bool>> TargetModel::blocks() {
  std::vector<std::pair<Mat*, bool>> out;
  for (auto& [m, learn] : std::as_const(*this).blocks()) out.emplace_back(const_cast<Mat*>(m), learn);
  return out;
}

int TargetModel::learnable_dim() const {
  int n = 0;
  for (auto& [m, learn] : blocks())
    if (learn) n += static_cast<int>(m->size());
  return n;
}

Vec TargetModel::learnable() const {
  Vec phi(learnable_dim());
  int off = 0;
  for (auto& [m, learn] : blocks()) {
    if (!learn) continue;
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) phi[off++] = (*m)(i, j);
  }
  return phi;
}

void TargetModel::set_learnable(const Vec& phi) {
  if (phi.size() != learnable_dim()) throw FatalError("learnable vector has wrong dimension");
  int off = 0;
  for (auto& [m, learn] : blocks()) {
    if (!learn) continue;
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = phi[off++];
  }
}

Vec TargetModel::all_params() const {
  int n = 0;
  for (auto& [m, learn] : blocks()) n += static_cast<int>(m->size());
  Vec v(n);
  int off = 0;
  for (auto& [m, learn] : blocks())
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) v[off++] = (*m)(i, j);
  return v;
}

void TargetModel::set_all_params(const Vec& params) {
  int n = 0;
  for (auto& [m, learn] : blocks()) n += static_cast<int>(m->size());
  if (params.size() != n) throw FatalError("parameter vector has wrong dimension");
  int off = 0;
  for (auto& [m, learn] : blocks())
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = params[off++];
}

std::vector<int> TargetModel::clip(std::span<const int> history) const {
  if (history.empty()) throw FatalError("empty history");
  std::size_t keep = cfg_.arch == TargetArch::TinyTransformer
                         ? std::min<std::size_t>(history.size(), cfg_.max_positions)
                         : history.size();
  return {history.end() - keep, history.end()};
}

Vec TargetModel::forward_last_state(std::span<const int> history) const {
  std::vector<int> x = clip(history);
  int d = cfg_.embed_dim;
  if (cfg_.arch == TargetArch::MpceLarge) {
    Vec u = Vec::Zero(d);
    for (int item : x) u += embed_.row(item).transpose();
    return u / static_cast<double>(x.size());
  }
  auto L = static_cast<Eigen::Index>(x.size());
  Mat h(L, d);
  for (Eigen::Index t = 0; t < L; ++t) h.row(t) = embed_.row(x[t]) + pos_.row(t);
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (const Layer& l : layers_) {
    Mat q = h * l.wq.transpose(), k = h * l.wk.transpose(), v = h * l.wv.transpose();
    Mat attn = Mat::Zero(L, d);
    for (Eigen::Index t = 0; t < L; ++t) {
      Vec sc = (k.topRows(t + 1) * q.row(t).transpose()) * inv_sqrt_d;
      Vec alpha = stable_softmax(sc);
      attn.row(t) = alpha.transpose() * v.topRows(t + 1);
    }
    Mat h1 = h + attn * l.wo.transpose();
    Mat z = h1 * l.w1.transpose();
    h = h1 + z.cwiseMax(0.0) * l.w2.transpose();
  }
  return h.row(L - 1).transpose();
}

Vec TargetModel::item_logits(std::span<const int> history) const {
  Vec hlast = forward_last_state(history);
  return out_ * hlast + adapter_u_ * (adapter_v_.transpose() * hlast);
}

double TargetModel::sample_loss(const UserSequence& s) const {
  Vec z = item_logits(s.history);
  return log_sum_exp(z) - z[s.target];
}

void TargetModel::backward(const UserSequence& s, Grads& out) const {
  auto blist = blocks();
  out.blocks.resize(blist.size());
  for (std::size_t i = 0; i < blist.size(); ++i)
    out.blocks[i] = Mat::Zero(blist[i].first->rows(), blist[i].first->cols());
  // Block offsets mirror blocks(): embed [, pos, layers...], out, U, V.
  std::size_t bi = 0;
  Mat& g_embed = out.blocks[bi++];
  Mat* g_pos = nullptr;
  std::vector<std::array<Mat*, 6>> g_layers;
  if (cfg_.arch == TargetArch::TinyTransformer) {
    g_pos = &out.blocks[bi++];
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      g_layers.push_back({&out.blocks[bi], &out.blocks[bi + 1], &out.blocks[bi + 2],
                          &out.blocks[bi + 3], &out.blocks[bi + 4], &out.blocks[bi + 5]});
      bi += 6;
    }
  }
  Mat& g_out = out.blocks[bi++];
  Mat& g_u = out.blocks[bi++];
  Mat& g_v = out.blocks[bi++];

  std::vector<int> x = clip(s.history);
  int d = cfg_.embed_dim;
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  // Forward, caching per-layer intermediates.
  auto L = static_cast<Eigen::Index>(x.size());
  struct Cache {
    Mat h_in, q, k, v, alpha, attn, h1, z;
  };
  std::vector<Cache> caches;
  Mat h;
  if (cfg_.arch == TargetArch::MpceLarge) {
    Vec u = Vec::Zero(d);
    for (int item : x) u += embed_.row(item).transpose();
    h = (u / static_cast<double>(x.size())).transpose();
  } else {
    h.resize(L, d);
    for (Eigen::Index t = 0; t < L; ++t) h.row(t) = embed_.row(x[t]) + pos_.row(t);
    for (const Layer& l : layers_) {
      Cache c;
      c.h_in = h;
      c.q = h * l.wq.transpose();
      c.k = h * l.wk.transpose();
      c.v = h * l.wv.transpose();
      c.alpha = Mat::Zero(L, L);
      c.attn = Mat::Zero(L, d);
      for (Eigen::Index t = 0; t < L; ++t) {
        Vec sc = (c.k.topRows(t + 1) * c.q.row(t).transpose()) * inv_sqrt_d;
        Vec alpha = stable_softmax(sc);
        c.alpha.row(t).head(t + 1) = alpha.transpose();
        c.attn.row(t) = alpha.transpose() * c.v.topRows(t + 1);
      }
      c.h1 = h + c.attn * l.wo.transpose();
      c.z = c.h1 * l.w1.transpose();
      h = c.h1 + c.z.cwiseMax(0.0) * l.w2.transpose();
      caches.push_back(std::move(c));
    }
  }

  Vec hlast = h.row(h.rows() - 1).transpose();
  Vec logits = out_ * hlast + adapter_u_ * (adapter_v_.transpose() * hlast);
  Vec g = stable_softmax(logits);
  g[s.target] -= 1.0;

  g_out = g * hlast.transpose();
  g_u = g * (adapter_v_.transpose() * hlast).transpose();
  g_v = hlast * (adapter_u_.transpose() * g).transpose();
  Vec dhlast = out_.transpose() * g + adapter_v_ * (adapter_u_.transpose() * g);

  if (cfg_.arch == TargetArch::MpceLarge) {
    Vec du = dhlast / static_cast<double>(x.size());
    for (int item : x) g_embed.row(item) += du.transpose();
    return;
  }

  Mat dh = Mat::Zero(L, d);
  dh.row(L - 1) = dhlast.transpose();
  for (auto li = static_cast<std::int64_t>(layers_.size()) - 1; li >= 0; --li) {
    const Layer& l = layers_[li];
    const Cache& c = caches[li];
    auto& [gwq, gwk, gwv, gwo, gw1, gw2] = g_layers[li];

    // FFN: h2 = h1 + relu(z) w2^T
    Mat zr = c.z.cwiseMax(0.0);
    Mat dzr = dh * l.w2;
    *gw2 += dh.transpose() * zr;
    Mat dz = ((c.z.array() > 0.0).cast<double>() * dzr.array()).matrix();
    *gw1 += dz.transpose() * c.h1;
    Mat dh1 = dh + dz * l.w1;

    // Attention: h1 = h_in + attn wo^T
    Mat dattn = dh1 * l.wo;
    *gwo += dh1.transpose() * c.attn;
    Mat dh_in = dh1;

    Mat dq = Mat::Zero(L, d), dk = Mat::Zero(L, d), dv = Mat::Zero(L, d);
    for (Eigen::Index t = 0; t < L; ++t) {
      Vec alpha = c.alpha.row(t).head(t + 1).transpose();
      Vec dalpha = c.v.topRows(t + 1) * dattn.row(t).transpose();
      dv.topRows(t + 1) += alpha * dattn.row(t);
      Vec dsc = alpha.cwiseProduct(dalpha - Vec::Constant(t + 1, alpha.dot(dalpha)));
      dq.row(t) += (dsc.transpose() * c.k.topRows(t + 1)) * inv_sqrt_d;
      dk.topRows(t + 1) += (dsc * c.q.row(t)) * inv_sqrt_d;
    }
    *gwq += dq.transpose() * c.h_in;
    *gwk += dk.transpose() * c.h_in;
    *gwv += dv.transpose() * c.h_in;
    dh_in += dq * l.wq + dk * l.wk + dv * l.wv;
    dh = std::move(dh_in);
  }
  for (Eigen::Index t = 0; t < L; ++t) {
    g_embed.row(x[t]) += dh.row(t);
    g_pos->row(t) += dh.row(t);
  }
}

Vec TargetModel::learnable_gradient(const UserSequence& s) const {
  Grads g;
  backward(s, g);
  auto blist = blocks();
  Vec out(learnable_dim());
  int off = 0;
  for (std::size_t b = 0; b < blist.size(); ++b) {
    if (!blist[b].second) continue;
    const Mat& m = g.blocks[b];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) out[off++] = m(i, j);
  }
  return out;
}

Vec TargetModel::full_gradient(const UserSequence& s) const {
  Grads g;
  backward(s, g);
  int n = 0;
  for (const Mat& m : g.blocks) n += static_cast<int>(m.size());
  Vec out(n);
  int off = 0;
  for (const Mat& m : g.blocks)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) out[off++] = m(i, j);
  return out;
}

double TargetModel::mean_loss(std::span<const UserSequence> samples) const {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const UserSequence& s : samples) total += sample_loss(s);
  return total / static_cast<double>(samples.size());
}

namespace {

void train_learnable(TargetModel& model, std::span<const UserSequence> samples,
                     const TrainConfig& tcfg, TrainTrace* trace) {
  if (samples.empty()) throw FatalError("empty training subset");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  if (trace) trace->epoch_loss.push_back(model.mean_loss(samples));

  std::mt19937_64 rng(tcfg.seed);
  Vec phi = model.learnable();
  long step = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      std::size_t end = std::min(order.size(), start + tcfg.batch_size);
      Vec grad = Vec::Zero(phi.size());
      for (std::size_t b = start; b < end; ++b)
        grad += model.learnable_gradient(samples[order[b]]);
      grad /= static_cast<double>(end - start);
      phi -= tcfg.learning_rate * (grad + tcfg.weight_decay * phi);
      model.set_learnable(phi);
      ++step;
      if (!phi.allFinite()) {
        std::ostringstream msg;
        msg << "non-finite target parameters at training step " << step;
        throw FatalError(msg.str());
      }
    }
    if (trace) trace->epoch_loss.push_back(model.mean_loss(samples));
  }
}

}  // namespace

TargetModel pretrain_target(const Dataset& data, const TargetConfig& cfg, const TrainConfig& tcfg,
                            TrainTrace* trace) {
  if (data.train.empty()) throw FatalError("empty train set");
  TargetModel model(data.n_items(), cfg);
  auto prefix = static_cast<std::size_t>(cfg.pretrain_fraction * static_cast<double>(data.train.size()));
  prefix = std::max<std::size_t>(prefix, 1);
  train_learnable(model, std::span(data.train).first(prefix), tcfg, trace);
  return model;
}

EffortResult effort_scores(const TargetModel& model, std::span<const UserSequence> samples) {
  EffortResult res;
  res.efforts.resize(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    double norm = model.learnable_gradient(samples[i]).norm();
    if (!std::isfinite(norm)) throw FatalError("non-finite effort score for " + samples[i].id);
    res.efforts[i] = {samples[i].id, norm};
  });
  return res;
}

TargetModel finetune_fewshot(const TargetModel& pretrained, std::span<const UserSequence> subset,
                             const TrainConfig& tcfg, TrainTrace* trace) {
  if (subset.empty()) throw FatalError("few-shot subset is empty");
  TargetModel model = pretrained;
  train_learnable(model, subset, tcfg, trace);
  return model;
}

}  // namespace influprune
