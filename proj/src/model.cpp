#include "dpllm/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "dpllm/kernels.hpp"

namespace dpllm {

// ---------------------------------------------------------------------------
// Config and layer naming

void ModelConfig::validate() const {
  if (n_blocks < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab < 1 || seq_cap < 1) {
    throw ConfigError("model config: all counts must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                      ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (!(norm_eps > 0.0) || !std::isfinite(norm_eps)) {
    throw ConfigError("model config: norm_eps must be > 0");
  }
}

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Q:
      return "q";
    case LayerKind::K:
      return "k";
    case LayerKind::V:
      return "v";
    case LayerKind::O:
      return "o";
    case LayerKind::Up:
      return "up";
    case LayerKind::Gate:
      return "gate";
    case LayerKind::Down:
      return "down";
  }
  return "?";
}

LayerKind parse_kind(std::string_view name) {
  for (LayerKind k : kLayerKinds) {
    if (kind_name(k) == name) {
      return k;
    }
  }
  throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

bool is_residual_fed(LayerKind kind) {
  return kind == LayerKind::Q || kind == LayerKind::K || kind == LayerKind::V ||
         kind == LayerKind::Up;
}

std::string LayerId::name() const {
  return "blocks." + std::to_string(block) + "." + std::string(kind_name(kind));
}

LayerId LayerId::parse(std::string_view name) {
  constexpr std::string_view prefix = "blocks.";
  if (name.substr(0, prefix.size()) != prefix) {
    throw ConfigError("malformed layer name '" + std::string(name) + "'");
  }
  const auto rest = name.substr(prefix.size());
  const auto dot = rest.find('.');
  if (dot == std::string_view::npos || dot == 0) {
    throw ConfigError("malformed layer name '" + std::string(name) + "'");
  }
  std::uint32_t block = 0;
  for (char c : rest.substr(0, dot)) {
    if (c < '0' || c > '9') {
      throw ConfigError("malformed layer name '" + std::string(name) + "'");
    }
    block = block * 10 + static_cast<std::uint32_t>(c - '0');
  }
  return LayerId{block, parse_kind(rest.substr(dot + 1))};
}

std::vector<LayerId> linear_layers(const ModelConfig& config) {
  std::vector<LayerId> ids;
  ids.reserve(config.n_blocks * kKindsPerBlock);
  for (std::uint32_t b = 0; b < config.n_blocks; ++b) {
    for (LayerKind k : kLayerKinds) {
      ids.push_back({b, k});
    }
  }
  return ids;
}

std::size_t layer_index(LayerId id) {
  return id.block * kKindsPerBlock + static_cast<std::size_t>(id.kind);
}

LayerShape layer_shape(const ModelConfig& config, LayerKind kind) {
  switch (kind) {
    case LayerKind::Up:
    case LayerKind::Gate:
      return {config.d_ff, config.d_model};
    case LayerKind::Down:
      return {config.d_model, config.d_ff};
    default:
      return {config.d_model, config.d_model};
  }
}

// ---------------------------------------------------------------------------
// Weights

const Matrix& ModelWeights::linear(LayerId id) const {
  return blocks.at(id.block).linear[static_cast<std::size_t>(id.kind)];
}

Matrix& ModelWeights::linear(LayerId id) {
  return blocks.at(id.block).linear[static_cast<std::size_t>(id.kind)];
}

const std::vector<double>& ModelWeights::norm_gain(std::uint32_t block, NormSite site) const {
  const auto& bw = blocks.at(block);
  return site == NormSite::Attention ? bw.attn_norm : bw.mlp_norm;
}

std::uint64_t ModelWeights::checksum() const {
  Fnv1a h;
  auto feed = [&h](const std::vector<double>& v) { h.update(v.data(), v.size() * sizeof(double)); };
  h.update_pod(config.n_blocks);
  h.update_pod(config.d_model);
  h.update_pod(config.n_heads);
  h.update_pod(config.d_ff);
  h.update_pod(config.vocab);
  feed(embedding.values());
  for (const auto& bw : blocks) {
    feed(bw.attn_norm);
    feed(bw.mlp_norm);
    for (const auto& m : bw.linear) {
      feed(m.values());
    }
  }
  feed(final_norm);
  feed(lm_head.values());
  return h.digest();
}

namespace {

// Values are rounded through float so weights survive the FP32 file format bit-exactly.
void fill_normal(Matrix& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.values()) {
    v = static_cast<double>(static_cast<float>(dist(rng)));
  }
}

}  // namespace

ModelWeights init_model(std::uint64_t seed, const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  ModelWeights w;
  w.config = config;
  const std::size_t d = config.d_model;

  w.embedding = Matrix(config.vocab, d);
  fill_normal(w.embedding, rng, 1.0);

  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_blocks));
  w.blocks.resize(config.n_blocks);
  for (auto& bw : w.blocks) {
    bw.attn_norm.assign(d, 1.0);
    bw.mlp_norm.assign(d, 1.0);
    for (LayerKind k : kLayerKinds) {
      const auto shape = layer_shape(config, k);
      Matrix m(shape.rows, shape.cols);
      double stddev = 1.0 / std::sqrt(static_cast<double>(shape.cols));
      if (k == LayerKind::O || k == LayerKind::Down) {
        stddev *= out_scale;
      }
      fill_normal(m, rng, stddev);
      bw.linear[static_cast<std::size_t>(k)] = std::move(m);
    }
  }
  w.final_norm.assign(d, 1.0);
  // Small head: a fresh model predicts an almost uniform distribution.
  w.lm_head = Matrix(config.vocab, d);
  fill_normal(w.lm_head, rng, 0.1 / std::sqrt(static_cast<double>(d)));
  return w;
}

void rms_normalize(std::span<const double> x, std::span<const double> gain, double eps,
                   std::span<double> out) {
  double ss = 0.0;
  for (double v : x) {
    ss += v * v;
  }
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] * inv * gain[i];
  }
}

// ---------------------------------------------------------------------------
// Providers

void WeightProvider::linear_backward(LayerId id, std::size_t, std::span<const double>,
                                     std::span<double>) {
  throw Error("weight provider does not support backward (layer " + id.name() + ")");
}

void WeightProvider::observe_residual(std::uint32_t, NormSite, std::size_t,
                                      std::span<const double>) {}

void DenseProvider::linear(LayerId id, std::size_t, std::span<const double> x,
                           std::span<double> y) {
  const Matrix& w = weights_->linear(id);
  kernels::active().gemv(w.data(), w.rows(), w.cols(), x.data(), y.data());
}

void DenseProvider::linear_backward(LayerId id, std::size_t, std::span<const double> dy,
                                    std::span<double> dx) {
  const Matrix& w = weights_->linear(id);
  kernels::active().gemv_t_acc(w.data(), w.rows(), w.cols(), dy.data(), dx.data());
}

// ---------------------------------------------------------------------------
// Tape

struct BlockTape {
  std::vector<double> h_in, a, q, k, v, ctx, h_mid, m, u, g, s;
  double inv_rms_a = 0.0;
  double inv_rms_m = 0.0;
  std::vector<std::vector<double>> probs;  // per head, pos+1 entries
};

struct PositionTape {
  std::vector<BlockTape> blocks;
  std::vector<double> h_out, z;
  double inv_rms_z = 0.0;
};

struct ForwardTape {
  std::vector<Token> tokens;
  std::vector<PositionTape> positions;
  Matrix logits;
};

void TapeDeleter::operator()(ForwardTape* tape) const { delete tape; }

const Matrix& tape_logits(const ForwardTape& tape) { return tape.logits; }
std::span<const Token> tape_tokens(const ForwardTape& tape) { return tape.tokens; }

const Matrix* GradientBundle::weight_grad(std::string_view tensor_name) const {
  for (const auto& [id, m] : weight_grads) {
    if (id.name() == tensor_name) {
      return &m;
    }
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

double inv_rms(std::span<const double> x, double eps) {
  double ss = 0.0;
  for (double v : x) {
    ss += v * v;
  }
  return 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

struct Transformer::Session::State {
  const Transformer* model;
  WeightProvider* provider;
  ForwardTape* tape;
  std::size_t pos = 0;
  std::vector<Matrix> k_cache, v_cache;
  std::vector<double> h, a, q, k, v, ctx, o, m, u, g, s, dn, z, logits, scores;
};

Transformer::Transformer(const ModelWeights& weights) : weights_(&weights) {
  weights.config.validate();
}

Transformer::Session::Session(const Transformer& model, WeightProvider& provider, ForwardTape* tape)
    : state_(std::make_unique<State>()) {
  const auto& cfg = model.config();
  auto& st = *state_;
  st.model = &model;
  st.provider = &provider;
  st.tape = tape;
  st.k_cache.assign(cfg.n_blocks, Matrix(cfg.seq_cap, cfg.d_model));
  st.v_cache.assign(cfg.n_blocks, Matrix(cfg.seq_cap, cfg.d_model));
  const std::size_t d = cfg.d_model;
  for (auto* vec : {&st.h, &st.a, &st.q, &st.k, &st.v, &st.ctx, &st.o, &st.m, &st.dn, &st.z}) {
    vec->assign(d, 0.0);
  }
  for (auto* vec : {&st.u, &st.g, &st.s}) {
    vec->assign(cfg.d_ff, 0.0);
  }
  st.logits.assign(cfg.vocab, 0.0);
  st.scores.assign(cfg.seq_cap, 0.0);
}

Transformer::Session::~Session() = default;
Transformer::Session::Session(Session&&) noexcept = default;

std::size_t Transformer::Session::position() const { return state_->pos; }

std::span<const double> Transformer::Session::step(Token token) {
  auto& st = *state_;
  const ModelWeights& w = st.model->weights();
  const ModelConfig& cfg = w.config;
  if (st.pos >= cfg.seq_cap) {
    throw ShapeError("sequence length exceeds seq_cap (" + std::to_string(cfg.seq_cap) + ")");
  }
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab) {
    throw ShapeError("token " + std::to_string(token) + " outside vocabulary");
  }
  const auto& kt = kernels::active();
  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t t = st.pos;
  WeightProvider& provider = *st.provider;

  PositionTape* pt = nullptr;
  if (st.tape != nullptr) {
    st.tape->tokens.push_back(token);
    pt = &st.tape->positions.emplace_back();
    pt->blocks.resize(cfg.n_blocks);
  }

  std::copy_n(w.embedding.row(static_cast<std::size_t>(token)).begin(), d, st.h.begin());

  for (std::uint32_t b = 0; b < cfg.n_blocks; ++b) {
    const BlockWeights& bw = w.blocks[b];
    BlockTape* bt = pt != nullptr ? &pt->blocks[b] : nullptr;

    // Attention half.
    provider.observe_residual(b, NormSite::Attention, t, st.h);
    const double ira = inv_rms(st.h, cfg.norm_eps);
    for (std::size_t i = 0; i < d; ++i) {
      st.a[i] = st.h[i] * ira * bw.attn_norm[i];
    }
    provider.linear({b, LayerKind::Q}, t, st.a, st.q);
    provider.linear({b, LayerKind::K}, t, st.a, st.k);
    provider.linear({b, LayerKind::V}, t, st.a, st.v);
    std::copy(st.k.begin(), st.k.end(), st.k_cache[b].row(t).begin());
    std::copy(st.v.begin(), st.v.end(), st.v_cache[b].row(t).begin());

    if (bt != nullptr) {
      bt->h_in = st.h;
      bt->a = st.a;
      bt->inv_rms_a = ira;
      bt->q = st.q;
      bt->k = st.k;
      bt->v = st.v;
      bt->probs.resize(cfg.n_heads);
    }

    std::fill(st.ctx.begin(), st.ctx.end(), 0.0);
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      const std::size_t off = head * hd;
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= t; ++j) {
        st.scores[j] = kt.dot(st.q.data() + off, st.k_cache[b].row(j).data() + off, hd) * scale;
        mx = std::max(mx, st.scores[j]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        st.scores[j] = std::exp(st.scores[j] - mx);
        denom += st.scores[j];
      }
      for (std::size_t j = 0; j <= t; ++j) {
        st.scores[j] /= denom;
        kt.axpy(st.scores[j], st.v_cache[b].row(j).data() + off, st.ctx.data() + off, hd);
      }
      if (bt != nullptr) {
        bt->probs[head].assign(st.scores.begin(), st.scores.begin() + static_cast<long>(t + 1));
      }
    }
    provider.linear({b, LayerKind::O}, t, st.ctx, st.o);
    for (std::size_t i = 0; i < d; ++i) {
      st.h[i] += st.o[i];
    }

    // MLP half.
    provider.observe_residual(b, NormSite::Mlp, t, st.h);
    const double irm = inv_rms(st.h, cfg.norm_eps);
    for (std::size_t i = 0; i < d; ++i) {
      st.m[i] = st.h[i] * irm * bw.mlp_norm[i];
    }
    provider.linear({b, LayerKind::Up}, t, st.m, st.u);
    provider.linear({b, LayerKind::Gate}, t, st.m, st.g);
    for (std::size_t i = 0; i < cfg.d_ff; ++i) {
      st.s[i] = st.g[i] * sigmoid(st.g[i]) * st.u[i];
    }
    provider.linear({b, LayerKind::Down}, t, st.s, st.dn);

    if (bt != nullptr) {
      bt->ctx = st.ctx;
      bt->h_mid = st.h;
      bt->m = st.m;
      bt->inv_rms_m = irm;
      bt->u = st.u;
      bt->g = st.g;
      bt->s = st.s;
    }
    for (std::size_t i = 0; i < d; ++i) {
      st.h[i] += st.dn[i];
    }
  }

  const double irz = inv_rms(st.h, cfg.norm_eps);
  for (std::size_t i = 0; i < d; ++i) {
    st.z[i] = st.h[i] * irz * w.final_norm[i];
  }
  kt.gemv(w.lm_head.data(), w.lm_head.rows(), w.lm_head.cols(), st.z.data(), st.logits.data());
  if (pt != nullptr) {
    pt->h_out = st.h;
    pt->z = st.z;
    pt->inv_rms_z = irz;
  }
  ++st.pos;
  return st.logits;
}

Matrix Transformer::forward(std::span<const Token> tokens, WeightProvider& provider) const {
  if (tokens.size() > config().seq_cap) {
    throw ShapeError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds seq_cap " +
                     std::to_string(config().seq_cap));
  }
  Matrix logits(tokens.size(), config().vocab);
  Session session(*this, provider);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto row = session.step(tokens[t]);
    std::copy(row.begin(), row.end(), logits.row(t).begin());
  }
  return logits;
}

double cross_entropy(std::span<const double> logits, Token target) {
  double mx = -INFINITY;
  for (double v : logits) {
    mx = std::max(mx, v);
  }
  double s = 0.0;
  for (double v : logits) {
    s += std::exp(v - mx);
  }
  return std::log(s) + mx - logits[static_cast<std::size_t>(target)];
}

std::vector<double> Transformer::token_losses(std::span<const Token> tokens,
                                              WeightProvider& provider) const {
  const Matrix logits = forward(tokens, provider);
  std::vector<double> losses;
  if (tokens.size() < 2) {
    return losses;
  }
  losses.reserve(tokens.size() - 1);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    losses.push_back(cross_entropy(logits.row(t), tokens[t + 1]));
  }
  return losses;
}

double mean_loss_from_token_losses(std::span<const double> losses) {
  double s = 0.0;
  for (double v : losses) {
    s += v;
  }
  return losses.empty() ? 0.0 : s / static_cast<double>(losses.size());
}

LossResult Transformer::teacher_forced_loss(std::span<const Token> tokens,
                                            WeightProvider& provider) const {
  if (tokens.size() < 2) {
    throw ShapeError("teacher-forced loss needs at least 2 tokens");
  }
  const auto losses = token_losses(tokens, provider);
  LossResult r;
  r.loss = mean_loss_from_token_losses(losses);
  r.perplexity = std::exp(r.loss);
  r.predictions = losses.size();
  return r;
}

TapePtr Transformer::forward_tape(std::span<const Token> tokens, WeightProvider& provider) const {
  if (tokens.size() > config().seq_cap) {
    throw ShapeError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds seq_cap " +
                     std::to_string(config().seq_cap));
  }
  TapePtr tape(new ForwardTape);
  tape->logits = Matrix(tokens.size(), config().vocab);
  Session session(*this, provider, tape.get());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto row = session.step(tokens[t]);
    std::copy(row.begin(), row.end(), tape->logits.row(t).begin());
  }
  return tape;
}

// ---------------------------------------------------------------------------
// Backward

namespace {

// dx += d(x * inv_rms * gain)/dx applied to dy.
void rms_norm_backward(std::span<const double> x, std::span<const double> gain, double inv,
                       std::span<const double> dy, std::span<double> dx) {
  const std::size_t n = x.size();
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += gain[i] * dy[i] * x[i];
  }
  const double coef = inv * inv * inv * dot / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    dx[i] += inv * gain[i] * dy[i] - x[i] * coef;
  }
}

}  // namespace

GradientBundle Transformer::backward(const ForwardTape& tape, WeightProvider& provider,
                                     const BackwardOptions& options) const {
  const ModelWeights& w = weights();
  const ModelConfig& cfg = w.config;
  const auto& kt = kernels::active();
  const std::size_t T = tape.positions.size();
  if (T < 2) {
    throw ShapeError("backward needs at least 2 tokens");
  }
  const std::size_t d = cfg.d_model;
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double inv_pred = 1.0 / static_cast<double>(T - 1);

  GradientBundle bundle;
  for (LayerId id : linear_layers(cfg)) {
    const auto shape = layer_shape(cfg, id.kind);
    bundle.output_grads.emplace(id, Matrix(T, shape.rows));
    bundle.inputs.emplace(id, Matrix(T, shape.cols));
    if (options.weight_grads) {
      bundle.weight_grads.emplace(id, Matrix(shape.rows, shape.cols));
    }
  }

  auto record = [&](LayerId id, std::size_t t, std::span<const double> x,
                    std::span<const double> dy) {
    std::copy(x.begin(), x.end(), bundle.inputs.at(id).row(t).begin());
    std::copy(dy.begin(), dy.end(), bundle.output_grads.at(id).row(t).begin());
    if (options.weight_grads) {
      Matrix& gw = bundle.weight_grads.at(id);
      for (std::size_t r = 0; r < dy.size(); ++r) {
        if (dy[r] != 0.0) {
          kt.axpy(dy[r], x.data(), gw.row(r).data(), x.size());
        }
      }
    }
  };

  // Loss head.
  Matrix dh(T, d);
  {
    std::vector<double> dlogits(cfg.vocab), dz(d);
    double loss_sum = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t) {
      const auto logits = tape.logits.row(t);
      const Token target = tape.tokens[t + 1];
      double mx = -INFINITY;
      for (double v : logits) {
        mx = std::max(mx, v);
      }
      double s = 0.0;
      for (std::size_t i = 0; i < cfg.vocab; ++i) {
        dlogits[i] = std::exp(logits[i] - mx);
        s += dlogits[i];
      }
      loss_sum += std::log(s) + mx - logits[static_cast<std::size_t>(target)];
      for (std::size_t i = 0; i < cfg.vocab; ++i) {
        dlogits[i] = dlogits[i] / s * inv_pred;
      }
      dlogits[static_cast<std::size_t>(target)] -= inv_pred;
      std::fill(dz.begin(), dz.end(), 0.0);
      kt.gemv_t_acc(w.lm_head.data(), w.lm_head.rows(), w.lm_head.cols(), dlogits.data(),
                    dz.data());
      const auto& pt = tape.positions[t];
      rms_norm_backward(pt.h_out, w.final_norm, pt.inv_rms_z, dz, dh.row(t));
    }
    bundle.loss = loss_sum * inv_pred;
  }

  std::vector<double> ds(cfg.d_ff), du(cfg.d_ff), dg(cfg.d_ff), dm(d), da(d);
  Matrix dctx(T, d), dq(T, d), dk(T, d), dv(T, d);

  for (std::size_t bi = cfg.n_blocks; bi-- > 0;) {
    const auto b = static_cast<std::uint32_t>(bi);
    const BlockWeights& bw = w.blocks[b];

    // MLP half, position-independent.
    for (std::size_t t = 0; t < T; ++t) {
      const BlockTape& bt = tape.positions[t].blocks[b];
      const auto d_down = dh.row(t);
      record({b, LayerKind::Down}, t, bt.s, d_down);
      std::fill(ds.begin(), ds.end(), 0.0);
      provider.linear_backward({b, LayerKind::Down}, t, d_down, ds);
      for (std::size_t i = 0; i < cfg.d_ff; ++i) {
        const double sg = sigmoid(bt.g[i]);
        const double silu = bt.g[i] * sg;
        du[i] = ds[i] * silu;
        dg[i] = ds[i] * bt.u[i] * sg * (1.0 + bt.g[i] * (1.0 - sg));
      }
      record({b, LayerKind::Up}, t, bt.m, du);
      record({b, LayerKind::Gate}, t, bt.m, dg);
      std::fill(dm.begin(), dm.end(), 0.0);
      provider.linear_backward({b, LayerKind::Up}, t, du, dm);
      provider.linear_backward({b, LayerKind::Gate}, t, dg, dm);
      rms_norm_backward(bt.h_mid, bw.mlp_norm, bt.inv_rms_m, dm, dh.row(t));
    }

    // Attention output projection.
    std::fill(dctx.values().begin(), dctx.values().end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const BlockTape& bt = tape.positions[t].blocks[b];
      record({b, LayerKind::O}, t, bt.ctx, dh.row(t));
      provider.linear_backward({b, LayerKind::O}, t, dh.row(t), dctx.row(t));
    }

    // Softmax attention across positions.
    std::fill(dq.values().begin(), dq.values().end(), 0.0);
    std::fill(dk.values().begin(), dk.values().end(), 0.0);
    std::fill(dv.values().begin(), dv.values().end(), 0.0);
    std::vector<double> dp(T);
    for (std::size_t t = 0; t < T; ++t) {
      const BlockTape& bt = tape.positions[t].blocks[b];
      for (std::size_t head = 0; head < cfg.n_heads; ++head) {
        const std::size_t off = head * hd;
        const auto& p = bt.probs[head];
        const double* dc = dctx.row(t).data() + off;
        double weighted = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const BlockTape& bj = tape.positions[j].blocks[b];
          dp[j] = kt.dot(dc, bj.v.data() + off, hd);
          weighted += p[j] * dp[j];
          kt.axpy(p[j], dc, dv.row(j).data() + off, hd);
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const BlockTape& bj = tape.positions[j].blocks[b];
          const double dsc = p[j] * (dp[j] - weighted) * scale;
          kt.axpy(dsc, bj.k.data() + off, dq.row(t).data() + off, hd);
          kt.axpy(dsc, bt.q.data() + off, dk.row(j).data() + off, hd);
        }
      }
    }

    for (std::size_t t = 0; t < T; ++t) {
      const BlockTape& bt = tape.positions[t].blocks[b];
      record({b, LayerKind::Q}, t, bt.a, dq.row(t));
      record({b, LayerKind::K}, t, bt.a, dk.row(t));
      record({b, LayerKind::V}, t, bt.a, dv.row(t));
      std::fill(da.begin(), da.end(), 0.0);
      provider.linear_backward({b, LayerKind::Q}, t, dq.row(t), da);
      provider.linear_backward({b, LayerKind::K}, t, dk.row(t), da);
      provider.linear_backward({b, LayerKind::V}, t, dv.row(t), da);
      rms_norm_backward(bt.h_in, bw.attn_norm, bt.inv_rms_a, da, dh.row(t));
    }
  }
  return bundle;
}

}  // namespace dpllm
