#include "lmt/tiny_mlm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include "lmt/error.hpp"
#include "lmt/rng.hpp"

namespace lmt {

std::string_view language_name(Language lang) { return lang == Language::kEnglish ? "en" : "fg"; }

std::string_view param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kEmbEn: return "emb_en";
    case ParamGroup::kEmbFg: return "emb_fg";
    case ParamGroup::kPositions: return "positions";
    case ParamGroup::kEncoder: return "encoder";
    case ParamGroup::kBiasEn: return "bias_en";
    case ParamGroup::kBiasFg: return "bias_fg";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (dim == 0 || heads == 0 || dim % heads != 0)
    throw InvalidArgument("model: dim must be a positive multiple of heads");
  if (ffn == 0) throw InvalidArgument("model: ffn must be positive");
  if (max_len == 0) throw InvalidArgument("model: max_len must be positive");
  if (!(ln_eps > 0)) throw InvalidArgument("model: ln_eps must be positive");
}

FreezeMask FreezeMask::all() {
  FreezeMask m;
  m.frozen_.fill(true);
  return m;
}

FreezeMask FreezeMask::all_but_foreign() {
  FreezeMask m = all();
  m.frozen_[static_cast<std::size_t>(ParamGroup::kEmbFg)] = false;
  m.frozen_[static_cast<std::size_t>(ParamGroup::kBiasFg)] = false;
  return m;
}

FreezeMask FreezeMask::encoder_only() { return FreezeMask().freeze(ParamGroup::kEncoder); }

template <typename T>
std::vector<TensorRef<T>> tensors(ModelState<T>& s) {
  std::vector<TensorRef<T>> out;
  out.push_back({"emb_en", ParamGroup::kEmbEn, &s.emb_en});
  out.push_back({"emb_fg", ParamGroup::kEmbFg, &s.emb_fg});
  out.push_back({"pos", ParamGroup::kPositions, &s.pos});
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    auto& L = s.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    for (auto [name, m] : {std::pair{"wq", &L.wq}, {"wk", &L.wk}, {"wv", &L.wv}, {"wo", &L.wo}, {"w1", &L.w1},
                           {"b1", &L.b1}, {"w2", &L.w2}, {"b2", &L.b2}, {"ln1_g", &L.ln1_g}, {"ln1_b", &L.ln1_b},
                           {"ln2_g", &L.ln2_g}, {"ln2_b", &L.ln2_b}})
      out.push_back({p + name, ParamGroup::kEncoder, m});
  }
  out.push_back({"lnf_g", ParamGroup::kEncoder, &s.lnf_g});
  out.push_back({"lnf_b", ParamGroup::kEncoder, &s.lnf_b});
  out.push_back({"bias_en", ParamGroup::kBiasEn, &s.bias_en});
  out.push_back({"bias_fg", ParamGroup::kBiasFg, &s.bias_fg});
  return out;
}

template <typename T>
ModelState<T> zeros_like(const ModelState<T>& state) {
  ModelState<T> z = state;
  for (auto& t : tensors(z)) t.tensor->setZero();
  return z;
}

template <typename U, typename T>
ModelState<U> cast_state(const ModelState<T>& state) {
  ModelState<U> out;
  out.config = state.config;
  auto& src = const_cast<ModelState<T>&>(state);
  out.layers.resize(state.layers.size());
  auto dst = tensors(out);
  auto from = tensors(src);
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].tensor = from[i].tensor->template cast<U>();
  return out;
}

template <typename T>
bool all_finite(const ModelState<T>& state) {
  for (auto& t : tensors(const_cast<ModelState<T>&>(state)))
    if (!t.tensor->allFinite()) return false;
  return true;
}

ModelState<float> init_model(const ModelConfig& config, std::size_t vocab_en, std::size_t vocab_fg,
                             std::uint64_t seed) {
  config.validate();
  const auto d = static_cast<Eigen::Index>(config.dim);
  const auto h = static_cast<Eigen::Index>(config.ffn);
  ModelState<float> s;
  s.config = config;
  std::uint64_t stream = 0;
  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double stddev) {
    Rng rng(derive_seed(seed, stream++));
    Mat<float> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal(0.0, stddev));
    return m;
  };
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(config.layers, 1)));
  s.emb_en = gaussian(static_cast<Eigen::Index>(vocab_en), d, emb_std);
  s.emb_fg = gaussian(static_cast<Eigen::Index>(vocab_fg), d, emb_std);
  s.pos = gaussian(static_cast<Eigen::Index>(config.max_len), d, emb_std);
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayer<float> L;
    const double wd = 1.0 / std::sqrt(static_cast<double>(d));
    const double wh = 1.0 / std::sqrt(static_cast<double>(h));
    L.wq = gaussian(d, d, wd);
    L.wk = gaussian(d, d, wd);
    L.wv = gaussian(d, d, wd);
    L.wo = gaussian(d, d, wd * out_scale);
    L.w1 = gaussian(d, h, wd);
    L.b1 = Mat<float>::Zero(1, h);
    L.w2 = gaussian(h, d, wh * out_scale);
    L.b2 = Mat<float>::Zero(1, d);
    L.ln1_g = Mat<float>::Ones(1, d);
    L.ln1_b = Mat<float>::Zero(1, d);
    L.ln2_g = Mat<float>::Ones(1, d);
    L.ln2_b = Mat<float>::Zero(1, d);
    s.layers.push_back(std::move(L));
  }
  s.lnf_g = Mat<float>::Ones(1, d);
  s.lnf_b = Mat<float>::Zero(1, d);
  s.bias_en = Mat<float>::Zero(1, static_cast<Eigen::Index>(vocab_en));
  s.bias_fg = Mat<float>::Zero(1, static_cast<Eigen::Index>(vocab_fg));
  return s;
}

// ---------------------------------------------------------------------------
// Masking

MaskedBatch make_masked_batch(std::span<const Sequence> sequences, Language language, std::size_t vocab_size,
                              const MaskingOptions& options, std::uint64_t seed) {
  if (!(options.mask_prob > 0.0 && options.mask_prob <= 1.0))
    throw InvalidArgument("mask_prob must be in (0, 1]");
  if (vocab_size <= Vocabulary::kNumSpecials) throw InvalidArgument("vocabulary has no ordinary tokens");
  const auto first_ordinary = static_cast<TokenId>(Vocabulary::kNumSpecials);
  const std::uint64_t ordinary = vocab_size - Vocabulary::kNumSpecials;

  MaskedBatch batch;
  batch.language = language;
  batch.tokens.assign(sequences.begin(), sequences.end());
  Rng rng(seed);

  auto corrupt = [&](std::uint32_t r, std::uint32_t c) {
    TokenId& tok = batch.tokens[r][c];
    batch.masked.push_back({r, c, tok});
    if (!options.replacements) {
      tok = Vocabulary::kMask;
      return;
    }
    const double u = rng.uniform();
    if (u < options.mask_share)
      tok = Vocabulary::kMask;
    else if (u < options.mask_share + options.random_share)
      tok = first_ordinary + static_cast<TokenId>(rng.uniform_int(ordinary));
  };

  std::size_t eligible = 0;
  for (std::uint32_t r = 0; r < batch.tokens.size(); ++r)
    for (std::uint32_t c = 0; c < batch.tokens[r].size(); ++c) {
      if (batch.tokens[r][c] < first_ordinary) continue;
      ++eligible;
      if (rng.bernoulli(options.mask_prob)) corrupt(r, c);
    }
  if (eligible == 0) throw InvalidArgument("batch has no maskable positions");
  if (batch.masked.empty()) {
    auto pick = rng.uniform_int(eligible);
    for (std::uint32_t r = 0; r < batch.tokens.size(); ++r)
      for (std::uint32_t c = 0; c < batch.tokens[r].size(); ++c) {
        if (batch.tokens[r][c] < first_ordinary) continue;
        if (pick-- == 0) {
          corrupt(r, c);
          return batch;
        }
      }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename T>
struct NormCache {
  Mat<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, double eps, NormCache<T>& cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  Mat<T> y(n, d);
  cache.xhat.resize(n, d);
  cache.rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(d);
    const T r = T(1) / std::sqrt(var + static_cast<T>(eps));
    cache.rstd[static_cast<std::size_t>(i)] = r;
    cache.xhat.row(i) = centered * r;
    y.row(i) = cache.xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& g, const NormCache<T>& cache, Mat<T>* dg, Mat<T>* db) {
  const auto n = dy.rows();
  const auto d = dy.cols();
  if (dg) {
    dg->row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
    db->row(0) += dy.colwise().sum();
  }
  Mat<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dxhat = dy.row(i).cwiseProduct(g.row(0));
    const T mean_dxhat = dxhat.mean();
    const T mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
    dx.row(i) = cache.rstd[static_cast<std::size_t>(i)] *
                ((dxhat.array() - mean_dxhat).matrix() - mean_dxhat_xhat * cache.xhat.row(i));
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
struct LayerCache {
  Mat<T> attn_in;
  NormCache<T> n1, n2;
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;  // [sequence * heads + head]
  Mat<T> ctx;
  Mat<T> ffn_in;
  Mat<T> h_pre, h_act;
  Mat<T> h_tanh;  // tanh of the GELU argument, reused by the backward pass
};

// Several sequences stacked row-wise; sequence s owns rows
// [offsets[s], offsets[s + 1]).
template <typename T>
struct StackCache {
  std::vector<Eigen::Index> offsets;
  std::vector<LayerCache<T>> layers;
  NormCache<T> final_norm;
  bool has_final_norm = false;

  std::size_t sequences() const { return offsets.size() - 1; }
  Eigen::Index length(std::size_t s) const { return offsets[s + 1] - offsets[s]; }
};

bool uses_final_norm(const ModelConfig& c) { return c.norm == NormStyle::kPreNorm && c.layers > 0; }

template <typename T>
void attention_forward(const EncoderLayer<T>& L, const ModelConfig& cfg, const std::vector<Eigen::Index>& offsets,
                       LayerCache<T>& c) {
  const auto n = c.attn_in.rows();
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  const auto heads = static_cast<Eigen::Index>(cfg.heads);
  const auto dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  c.q.noalias() = c.attn_in * L.wq;
  c.k.noalias() = c.attn_in * L.wk;
  c.v.noalias() = c.attn_in * L.wv;
  const std::size_t seqs = offsets.size() - 1;
  c.probs.resize(seqs * static_cast<std::size_t>(heads));
  c.ctx.resize(n, d);
  for (std::size_t sq = 0; sq < seqs; ++sq) {
    const Eigen::Index o = offsets[sq], len = offsets[sq + 1] - offsets[sq];
    for (Eigen::Index h = 0; h < heads; ++h) {
      Mat<T> s = (c.q.block(o, h * dh, len, dh) * c.k.block(o, h * dh, len, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < len; ++i) {
        const T m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp().matrix();
        s.row(i) /= s.row(i).sum();
      }
      c.ctx.block(o, h * dh, len, dh).noalias() = s * c.v.block(o, h * dh, len, dh);
      c.probs[sq * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = std::move(s);
    }
  }
}

template <typename T>
Mat<T> ffn_forward(const EncoderLayer<T>& L, LayerCache<T>& c) {
  c.h_pre.noalias() = c.ffn_in * L.w1;
  c.h_pre.rowwise() += L.b1.row(0);
  const auto x = c.h_pre.array();
  c.h_tanh = (static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x.cube())).tanh().matrix();
  c.h_act = (T(0.5) * x * (T(1) + c.h_tanh.array())).matrix();
  Mat<T> f = c.h_act * L.w2;
  f.rowwise() += L.b2.row(0);
  return f;
}

template <typename T>
Mat<T> layer_forward(const EncoderLayer<T>& L, const ModelConfig& cfg, const std::vector<Eigen::Index>& offsets,
                     const Mat<T>& x, LayerCache<T>& c) {
  if (cfg.norm == NormStyle::kPreNorm) {
    c.attn_in = layer_norm(x, L.ln1_g, L.ln1_b, cfg.ln_eps, c.n1);
    attention_forward(L, cfg, offsets, c);
    Mat<T> x_mid = x;
    x_mid.noalias() += c.ctx * L.wo;
    c.ffn_in = layer_norm(x_mid, L.ln2_g, L.ln2_b, cfg.ln_eps, c.n2);
    return x_mid + ffn_forward(L, c);
  }
  c.attn_in = x;
  attention_forward(L, cfg, offsets, c);
  Mat<T> s1 = x;
  s1.noalias() += c.ctx * L.wo;
  c.ffn_in = layer_norm(s1, L.ln1_g, L.ln1_b, cfg.ln_eps, c.n1);
  Mat<T> s2 = c.ffn_in + ffn_forward(L, c);
  return layer_norm(s2, L.ln2_g, L.ln2_b, cfg.ln_eps, c.n2);
}

// Gradient w.r.t. the attention input; parameter grads into G when non-null.
template <typename T>
Mat<T> attention_backward(const EncoderLayer<T>& L, const ModelConfig& cfg, const std::vector<Eigen::Index>& offsets,
                          const LayerCache<T>& c, const Mat<T>& dy, EncoderLayer<T>* G) {
  const auto n = c.attn_in.rows();
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  const auto heads = static_cast<Eigen::Index>(cfg.heads);
  const auto dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  if (G) G->wo.noalias() += c.ctx.transpose() * dy;
  const Mat<T> dctx = dy * L.wo.transpose();
  Mat<T> dq(n, d), dk(n, d), dv(n, d);
  const std::size_t seqs = offsets.size() - 1;
  for (std::size_t sq = 0; sq < seqs; ++sq) {
    const Eigen::Index o = offsets[sq], len = offsets[sq + 1] - offsets[sq];
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto& p = c.probs[sq * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
      const auto dctx_h = dctx.block(o, h * dh, len, dh);
      const Mat<T> dp = dctx_h * c.v.block(o, h * dh, len, dh).transpose();
      dv.block(o, h * dh, len, dh).noalias() = p.transpose() * dctx_h;
      Mat<T> ds(len, len);
      for (Eigen::Index i = 0; i < len; ++i) {
        const T dot = dp.row(i).dot(p.row(i));
        ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
      }
      ds *= scale;
      dq.block(o, h * dh, len, dh).noalias() = ds * c.k.block(o, h * dh, len, dh);
      dk.block(o, h * dh, len, dh).noalias() = ds.transpose() * c.q.block(o, h * dh, len, dh);
    }
  }
  if (G) {
    G->wq.noalias() += c.attn_in.transpose() * dq;
    G->wk.noalias() += c.attn_in.transpose() * dk;
    G->wv.noalias() += c.attn_in.transpose() * dv;
  }
  Mat<T> din = dq * L.wq.transpose();
  din.noalias() += dk * L.wk.transpose();
  din.noalias() += dv * L.wv.transpose();
  return din;
}

// Gradient w.r.t. the feed-forward input.
template <typename T>
Mat<T> ffn_backward(const EncoderLayer<T>& L, const LayerCache<T>& c, const Mat<T>& df, EncoderLayer<T>* G) {
  if (G) {
    G->w2.noalias() += c.h_act.transpose() * df;
    G->b2.row(0) += df.colwise().sum();
  }
  Mat<T> dh = df * L.w2.transpose();
  {
    const auto x = c.h_pre.array();
    const auto t = c.h_tanh.array();
    const auto du = static_cast<T>(kGeluC) * (T(1) + T(3) * static_cast<T>(kGeluA) * x.square());
    dh.array() *= T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t.square()) * du;
  }
  if (G) {
    G->w1.noalias() += c.ffn_in.transpose() * dh;
    G->b1.row(0) += dh.colwise().sum();
  }
  return dh * L.w1.transpose();
}

template <typename T>
Mat<T> layer_backward(const EncoderLayer<T>& L, const ModelConfig& cfg, const std::vector<Eigen::Index>& offsets,
                      const LayerCache<T>& c, const Mat<T>& dout, EncoderLayer<T>* G) {
  if (cfg.norm == NormStyle::kPreNorm) {
    Mat<T> dx_mid = dout;
    const Mat<T> dffn_in = ffn_backward(L, c, dout, G);
    dx_mid += layer_norm_backward(dffn_in, L.ln2_g, c.n2, G ? &G->ln2_g : nullptr, G ? &G->ln2_b : nullptr);
    Mat<T> dx = dx_mid;
    const Mat<T> dattn_in = attention_backward(L, cfg, offsets, c, dx_mid, G);
    dx += layer_norm_backward(dattn_in, L.ln1_g, c.n1, G ? &G->ln1_g : nullptr, G ? &G->ln1_b : nullptr);
    return dx;
  }
  const Mat<T> ds2 = layer_norm_backward(dout, L.ln2_g, c.n2, G ? &G->ln2_g : nullptr, G ? &G->ln2_b : nullptr);
  Mat<T> dx_mid = ds2 + ffn_backward(L, c, ds2, G);
  const Mat<T> ds1 = layer_norm_backward(dx_mid, L.ln1_g, c.n1, G ? &G->ln1_g : nullptr, G ? &G->ln1_b : nullptr);
  return ds1 + attention_backward(L, cfg, offsets, c, ds1, G);
}

template <typename T>
void check_tokens(const ModelState<T>& state, std::span<const TokenId> tokens, Language lang) {
  if (tokens.empty()) throw InvalidArgument("empty sequence");
  if (tokens.size() > state.config.max_len)
    throw InvalidArgument("sequence of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                          std::to_string(state.config.max_len));
  const auto v = state.vocab_size(lang);
  for (TokenId t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw InvalidArgument("token id " + std::to_string(t) + " out of range for the " +
                            std::string(language_name(lang)) + " vocabulary of " + std::to_string(v));
}

// Contextual vectors of the listed sequences, stacked.
template <typename T>
Mat<T> forward_stack(const ModelState<T>& state, const std::vector<std::span<const TokenId>>& seqs, Language lang,
                     StackCache<T>& cache) {
  cache.offsets.assign(1, 0);
  for (const auto& s : seqs) {
    check_tokens(state, s, lang);
    cache.offsets.push_back(cache.offsets.back() + static_cast<Eigen::Index>(s.size()));
  }
  const auto& emb = state.embeddings(lang);
  Mat<T> x(cache.offsets.back(), static_cast<Eigen::Index>(state.config.dim));
  for (std::size_t q = 0; q < seqs.size(); ++q)
    for (std::size_t i = 0; i < seqs[q].size(); ++i)
      x.row(cache.offsets[q] + static_cast<Eigen::Index>(i)) =
          emb.row(seqs[q][i]) + state.pos.row(static_cast<Eigen::Index>(i));
  cache.layers.resize(state.layers.size());
  for (std::size_t l = 0; l < state.layers.size(); ++l)
    x = layer_forward(state.layers[l], state.config, cache.offsets, x, cache.layers[l]);
  cache.has_final_norm = uses_final_norm(state.config);
  if (cache.has_final_norm) x = layer_norm(x, state.lnf_g, state.lnf_b, state.config.ln_eps, cache.final_norm);
  return x;
}

// Masked positions of one batch row: [begin, end) into batch.masked.
struct RowSpan {
  std::size_t begin, end;
};

std::vector<RowSpan> row_spans(const MaskedBatch& batch) {
  std::vector<RowSpan> spans(batch.rows(), RowSpan{0, 0});
  std::size_t k = 0;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    spans[r].begin = k;
    while (k < batch.masked.size() && batch.masked[k].row == r) ++k;
    spans[r].end = k;
  }
  if (k != batch.masked.size()) throw InvalidArgument("masked positions are not sorted by row");
  return spans;
}

struct ScoreTotals {
  double loss = 0.0;
  std::size_t correct = 0;
};

// Log-softmax statistics in double precision, row k of `logits` belonging to
// batch.masked[first + k]; fills dlogits with (p - onehot) * coef when
// requested.
template <typename T>
ScoreTotals score_rows(const Mat<T>& logits, const MaskedBatch& batch, std::size_t first, Mat<T>* dlogits,
                       double coef) {
  ScoreTotals out;
  const auto v = logits.cols();
  std::vector<double> shifted(static_cast<std::size_t>(v));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const TokenId label = batch.masked[first + static_cast<std::size_t>(i)].label;
    Eigen::Index arg = 0;
    const T m = logits.row(i).maxCoeff(&arg);
    // Summed in sorted order so the result does not depend on column order.
    for (Eigen::Index j = 0; j < v; ++j) shifted[static_cast<std::size_t>(j)] = static_cast<double>(logits(i, j) - m);
    std::sort(shifted.begin(), shifted.end());
    double sum = 0.0;
    for (double s : shifted) sum += std::exp(s);
    const double lse = static_cast<double>(m) + std::log(sum);
    out.loss += lse - static_cast<double>(logits(i, label));
    if (arg == label) ++out.correct;
    if (dlogits) {
      for (Eigen::Index j = 0; j < v; ++j)
        (*dlogits)(i, j) = static_cast<T>(std::exp(static_cast<double>(logits(i, j)) - lse) * coef);
      (*dlogits)(i, label) -= static_cast<T>(coef);
    }
  }
  return out;
}

// logits(k, :) = c(rows[k], :) . emb^T + bias. Every column goes through the
// same multiply and add sequence, so permuting the vocabulary permutes the
// logits bit for bit (a GEMM kernel treats edge columns differently).
template <typename T>
void output_logits(const Mat<T>& c, const std::vector<Eigen::Index>& rows, const Mat<T>& emb, const Mat<T>& bias,
                   Mat<T>& logits) {
  const Mat<T> emb_t = emb.transpose();
  logits.resize(static_cast<Eigen::Index>(rows.size()), emb.rows());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    auto out = logits.row(static_cast<Eigen::Index>(k)).array();
    out.setZero();
    for (Eigen::Index j = 0; j < c.cols(); ++j) out += c(rows[k], j) * emb_t.row(j).array();
    out += bias.row(0).array();
  }
}

// Rows [row_begin, row_end) of the batch that have masked positions, encoded
// together. `stack_row[k]` is the stacked row of masked position first + k.
template <typename T>
struct ChunkForward {
  std::vector<std::size_t> rows;  // batch rows in the stack
  StackCache<T> cache;
  Mat<T> c;
  std::size_t first = 0, last = 0;  // masked positions [first, last)
  std::vector<Eigen::Index> stack_row;
  Mat<T> logits;
};

template <typename T>
void chunk_forward(const ModelState<T>& state, const MaskedBatch& batch, const std::vector<RowSpan>& spans,
                   std::size_t row_begin, std::size_t row_end, ChunkForward<T>& f) {
  std::vector<std::span<const TokenId>> seqs;
  f.rows.clear();
  for (std::size_t r = row_begin; r < row_end; ++r) {
    if (spans[r].begin == spans[r].end) continue;
    f.rows.push_back(r);
    seqs.emplace_back(batch.tokens[r]);
  }
  f.first = row_begin < row_end ? spans[row_begin].begin : 0;
  f.last = row_begin < row_end ? spans[row_end - 1].end : 0;
  f.stack_row.clear();
  if (f.rows.empty()) return;
  f.c = forward_stack(state, seqs, batch.language, f.cache);
  for (std::size_t q = 0; q < f.rows.size(); ++q) {
    const auto span = spans[f.rows[q]];
    for (std::size_t k = span.begin; k < span.end; ++k) {
      const auto col = batch.masked[k].col;
      if (col >= static_cast<std::uint32_t>(f.cache.length(q)))
        throw InvalidArgument("masked position beyond sequence end");
      f.stack_row.push_back(f.cache.offsets[q] + static_cast<Eigen::Index>(col));
    }
  }
  output_logits(f.c, f.stack_row, state.embeddings(batch.language), state.bias(batch.language), f.logits);
}

template <typename T>
double rows_forward_backward(const ModelState<T>& state, const MaskedBatch& batch, const std::vector<RowSpan>& spans,
                             std::size_t row_begin, std::size_t row_end, const FreezeMask& freeze, ModelState<T>& G,
                             double coef) {
  const bool en = batch.language == Language::kEnglish;
  const ParamGroup emb_group = en ? ParamGroup::kEmbEn : ParamGroup::kEmbFg;
  const ParamGroup bias_group = en ? ParamGroup::kBiasEn : ParamGroup::kBiasFg;
  const bool train_emb = freeze.trainable(emb_group);
  const bool train_bias = freeze.trainable(bias_group);
  const bool train_pos = freeze.trainable(ParamGroup::kPositions);
  const bool train_enc = freeze.trainable(ParamGroup::kEncoder);
  const bool need_encoder_pass = train_emb || train_pos || train_enc;

  const auto& emb = state.embeddings(batch.language);
  Mat<T>& g_emb = en ? G.emb_en : G.emb_fg;
  Mat<T>& g_bias = en ? G.bias_en : G.bias_fg;

  ChunkForward<T> f;
  chunk_forward(state, batch, spans, row_begin, row_end, f);
  if (f.rows.empty()) return 0.0;
  Mat<T> dlogits(f.logits.rows(), f.logits.cols());
  const double loss = score_rows(f.logits, batch, f.first, &dlogits, coef).loss;

  if (train_bias) g_bias.row(0) += dlogits.colwise().sum();
  if (!need_encoder_pass) return loss;

  if (train_emb) {
    Mat<T> cm(static_cast<Eigen::Index>(f.stack_row.size()), f.c.cols());
    for (std::size_t k = 0; k < f.stack_row.size(); ++k) cm.row(static_cast<Eigen::Index>(k)) = f.c.row(f.stack_row[k]);
    g_emb.noalias() += dlogits.transpose() * cm;
  }
  const Mat<T> dcm = dlogits * emb;
  Mat<T> dx = Mat<T>::Zero(f.c.rows(), f.c.cols());
  for (std::size_t k = 0; k < f.stack_row.size(); ++k) dx.row(f.stack_row[k]) += dcm.row(static_cast<Eigen::Index>(k));

  const auto& cache = f.cache;
  if (cache.has_final_norm)
    dx = layer_norm_backward(dx, state.lnf_g, cache.final_norm, train_enc ? &G.lnf_g : nullptr,
                             train_enc ? &G.lnf_b : nullptr);
  for (std::size_t l = state.layers.size(); l-- > 0;)
    dx = layer_backward(state.layers[l], state.config, cache.offsets, cache.layers[l], dx,
                        train_enc ? &G.layers[l] : nullptr);
  for (std::size_t q = 0; q < f.rows.size(); ++q) {
    const auto& tokens = batch.tokens[f.rows[q]];
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto row = cache.offsets[q] + static_cast<Eigen::Index>(i);
      if (train_emb) g_emb.row(tokens[i]) += dx.row(row);
      if (train_pos) G.pos.row(static_cast<Eigen::Index>(i)) += dx.row(row);
    }
  }
  return loss;
}

template <typename T>
void add_into(ModelState<T>& dst, ModelState<T>& src) {
  auto a = tensors(dst);
  auto b = tensors(src);
  for (std::size_t i = 0; i < a.size(); ++i) *a[i].tensor += *b[i].tensor;
}

}  // namespace

template <typename T>
Mat<T> encode(const ModelState<T>& state, std::span<const TokenId> tokens, Language language) {
  StackCache<T> cache;
  return forward_stack(state, {tokens}, language, cache);
}

template <typename T>
std::vector<Mat<T>> encode(const ModelState<T>& state, const MaskedBatch& batch) {
  std::vector<std::span<const TokenId>> seqs(batch.tokens.begin(), batch.tokens.end());
  StackCache<T> cache;
  const Mat<T> x = forward_stack(state, seqs, batch.language, cache);
  std::vector<Mat<T>> out;
  out.reserve(batch.rows());
  for (std::size_t s = 0; s < seqs.size(); ++s) out.push_back(x.middleRows(cache.offsets[s], cache.length(s)));
  return out;
}

template <typename T>
LossResult<T> mlm_loss(const ModelState<T>& state, const MaskedBatch& batch) {
  if (batch.masked.empty()) throw InvalidArgument("mlm_loss: batch has no masked positions");
  const auto spans = row_spans(batch);
  ChunkForward<T> f;
  chunk_forward(state, batch, spans, 0, batch.rows(), f);
  const auto totals = score_rows<T>(f.logits, batch, 0, nullptr, 0.0);
  LossResult<T> result;
  result.count = batch.masked.size();
  result.loss = totals.loss / static_cast<double>(result.count);
  result.correct = totals.correct;
  result.logits = std::move(f.logits);
  return result;
}

template <typename T>
double accumulate_gradients(const ModelState<T>& state, const MaskedBatch& batch, const FreezeMask& freeze,
                            ModelState<T>& grads, T scale, unsigned threads) {
  if (batch.masked.empty()) throw InvalidArgument("backward: batch has no masked positions");
  const auto spans = row_spans(batch);
  const double coef = static_cast<double>(scale) / static_cast<double>(batch.masked.size());
  const std::size_t rows = batch.rows();
  const unsigned t = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(rows)));
  double loss = 0.0;
  if (t == 1) {
    loss = rows_forward_backward(state, batch, spans, 0, rows, freeze, grads, coef);
  } else {
    std::vector<ModelState<T>> partial(t, zeros_like(state));
    std::vector<double> partial_loss(t, 0.0);
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < t; ++w) {
      const std::size_t b = rows * w / t, e = rows * (w + 1) / t;
      pool.emplace_back([&, w, b, e] {
        partial_loss[w] = rows_forward_backward(state, batch, spans, b, e, freeze, partial[w], coef);
      });
    }
    for (auto& th : pool) th.join();
    for (unsigned w = 0; w < t; ++w) {
      add_into(grads, partial[w]);
      loss += partial_loss[w];
    }
  }
  return loss / static_cast<double>(batch.masked.size());
}

template <typename T>
ModelState<T> backward(const ModelState<T>& state, const MaskedBatch& batch, const FreezeMask& freeze,
                       unsigned threads) {
  ModelState<T> grads = zeros_like(state);
  accumulate_gradients(state, batch, freeze, grads, T(1), threads);
  return grads;
}

#define LMT_INSTANTIATE(T)                                                                                     \
  template std::vector<TensorRef<T>> tensors(ModelState<T>&);                                                 \
  template ModelState<T> zeros_like(const ModelState<T>&);                                                     \
  template bool all_finite(const ModelState<T>&);                                                              \
  template Mat<T> encode(const ModelState<T>&, std::span<const TokenId>, Language);                           \
  template std::vector<Mat<T>> encode(const ModelState<T>&, const MaskedBatch&);                              \
  template LossResult<T> mlm_loss(const ModelState<T>&, const MaskedBatch&);                                   \
  template double accumulate_gradients(const ModelState<T>&, const MaskedBatch&, const FreezeMask&,           \
                                       ModelState<T>&, T, unsigned);                                           \
  template ModelState<T> backward(const ModelState<T>&, const MaskedBatch&, const FreezeMask&, unsigned);

LMT_INSTANTIATE(float)
LMT_INSTANTIATE(double)
#undef LMT_INSTANTIATE

template ModelState<double> cast_state<double, float>(const ModelState<float>&);
template ModelState<float> cast_state<float, double>(const ModelState<double>&);
template ModelState<float> cast_state<float, float>(const ModelState<float>&);
template ModelState<double> cast_state<double, double>(const ModelState<double>&);

}  // namespace lmt
