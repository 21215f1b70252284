#include "sagecc/caption_generator.hpp"

#include "sagecc/core/positional.hpp"

#include <algorithm>
#include <cmath>

namespace sagecc {

Matrix build_bias(const PriorMaps& priors, double alpha, double beta, int steps) {
  if (steps < 1) throw InputError("build_bias: T must be >= 1");
  const Vector pi = bias_pi(priors.change, priors.consistency, alpha, beta);
  return Matrix::Ones(steps, 1) * pi.transpose();
}

CaptionDecoder::CaptionDecoder(nn::ParameterStore& store, const DecoderConfig& config,
                               int vocab_size, int visual_dim, int disc_dim, int sem_dim,
                               int kg_dim, nn::Rng& rng)
    : config_(config),
      vocab_size_(vocab_size),
      disc_dim_(disc_dim),
      sem_dim_(sem_dim),
      kg_dim_(kg_dim) {
  if (vocab_size < 5) throw ConfigError("decoder: vocabulary too small");
  if (config.layers < 1) throw ConfigError("decoder: layers must be >= 1");
  const int d = config.model_dim();
  if (config.passthrough_fusion) {
    if (disc_dim != config.disc_proj || sem_dim != config.sem_proj || kg_dim != config.kg_proj) {
      throw ConfigError("decoder: passthrough fusion needs projection dims equal to input dims");
    }
  } else {
    proj_disc_ = nn::Linear(store, "decoder.fuse.disc", disc_dim, config.disc_proj, rng);
    proj_sem_ = nn::Linear(store, "decoder.fuse.sem", sem_dim, config.sem_proj, rng);
    proj_kg_ = nn::Linear(store, "decoder.fuse.kg", kg_dim, config.kg_proj, rng);
    fuse_norm_ = nn::LayerNorm(store, "decoder.fuse.norm", d, config.ln_eps);
  }
  embedding_ = &store.normal("decoder.embedding", vocab_size, d, 0.1, rng);
  alpha_ = &store.constant("decoder.alpha", 1, 1, config.alpha_init);
  beta_ = &store.constant("decoder.beta", 1, 1, config.beta_init);
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "decoder.layer" + std::to_string(l);
    layers_.push_back(Layer{
        nn::MultiHeadAttention(store, p + ".self_attn", d, d, d, config.heads, rng),
        nn::LayerNorm(store, p + ".norm_self", d, config.ln_eps),
        nn::MultiHeadAttention(store, p + ".cross_attn", d, visual_dim, d, config.heads, rng),
        nn::LayerNorm(store, p + ".norm_cross", d, config.ln_eps),
        nn::Linear(store, p + ".ffn_in", d, config.ffn_dim, rng),
        nn::Linear(store, p + ".ffn_out", config.ffn_dim, d, rng),
    });
  }
  output_ = nn::Linear(store, "decoder.output", d, vocab_size, rng);
}

ad::Var CaptionDecoder::fuse_change(ad::Tape& tape, const ad::Var& f_disc, const ad::Var& f_sem,
                                    const ad::Var& f_kg) const {
  if (f_disc.cols() != disc_dim_ || f_sem.cols() != sem_dim_ || f_kg.cols() != kg_dim_ ||
      f_disc.rows() != 1 || f_sem.rows() != 1 || f_kg.rows() != 1) {
    throw ConfigError("fuse_change: input dims (" + std::to_string(f_disc.cols()) + ", " +
                      std::to_string(f_sem.cols()) + ", " + std::to_string(f_kg.cols()) +
                      ") do not match configured (" + std::to_string(disc_dim_) + ", " +
                      std::to_string(sem_dim_) + ", " + std::to_string(kg_dim_) + ")");
  }
  ad::ScopeGuard scope(tape, "fuse");
  if (config_.passthrough_fusion) {
    const ad::Var parts[] = {f_disc, f_sem, f_kg};
    return ad::hconcat(parts);
  }
  const ad::Var parts[] = {proj_disc_(tape, f_disc), proj_sem_(tape, f_sem), proj_kg_(tape, f_kg)};
  return fuse_norm_(tape, ad::hconcat(parts));
}

ad::Var CaptionDecoder::bias_column(ad::Tape& tape, const PriorVars& priors) const {
  return ad::add(ad::mul_scalar(priors.change, tape.parameter(*alpha_)),
                 ad::mul_scalar(priors.consistency, tape.parameter(*beta_)));
}

ad::Var CaptionDecoder::forward(ad::Tape& tape, std::span<const int> tokens,
                                const ad::Var& visual, const ad::Var& r, const ad::Var* pi,
                                const CrossAttentionProbe* probe) const {
  const auto t = static_cast<Index>(tokens.size());
  if (t < 1) throw InputError("decoder_forward: empty token sequence");
  if (t > config_.max_len + 1) throw InputError("decoder_forward: sequence longer than max_len");
  std::vector<int> ids(tokens.begin(), tokens.end());
  for (int id : ids) {
    if (id < 0 || id >= vocab_size_) {
      throw InputError("decoder_forward: token id " + std::to_string(id) + " out of range");
    }
  }
  const int d = config_.model_dim();
  ad::ScopeGuard scope(tape, "decoder");
  ad::Var y = ad::add(ad::gather_rows(tape.parameter(*embedding_), ids),
                      tape.constant(sinusoid_table<double>(static_cast<int>(t), d), "token_pos"));
  std::optional<ad::Var> bias;
  if (pi != nullptr) {
    if (pi->rows() != visual.rows() || pi->cols() != 1) throw ShapeError("decoder_forward: bias shape");
    bias = ad::broadcast_rows(ad::transpose(*pi), t);
  }
  ad::Var r_rows = ad::broadcast_rows(r, t);
  for (size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    ad::Var ytilde = layer.norm_self(tape, ad::add(y, layer.self_attn(tape, y, y, nullptr, true)));
    nn::AttentionProbe inner;
    if (probe != nullptr) {
      inner = [&, l](const std::vector<Matrix>& p) { (*probe)(static_cast<int>(l), p); };
    }
    ad::Var z = layer.cross_attn(tape, ytilde, visual, bias ? &*bias : nullptr, false,
                                 probe != nullptr ? &inner : nullptr);
    ad::Var u = layer.norm_cross(tape, ad::add(ad::add(ytilde, z), r_rows));
    y = ad::add(u, layer.ffn_out(tape, ad::relu(layer.ffn_in(tape, u))));
  }
  return output_(tape, y);
}

ad::Var ce_loss(const ad::Var& logits, std::span<const int> targets, double epsilon, int pad_id) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("ce_loss: epsilon must be in [0,1)");
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw ShapeError("ce_loss: target count does not match logit rows");
  }
  const Index v = logits.cols();
  std::vector<int> rows;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == pad_id) continue;
    if (targets[i] < 0 || targets[i] >= v) throw InputError("ce_loss: target id out of range");
    rows.push_back(static_cast<int>(i));
  }
  if (rows.empty()) throw InputError("ce_loss: every position is padding, loss undefined");
  Matrix q = Matrix::Constant(static_cast<Index>(rows.size()), v,
                              v > 1 ? epsilon / static_cast<double>(v - 1) : 0.0);
  for (size_t k = 0; k < rows.size(); ++k) {
    q(static_cast<Index>(k), targets[static_cast<size_t>(rows[k])]) = 1.0 - epsilon;
  }
  ad::Tape& tape = *logits.tape();
  ad::Var logp = ad::log_softmax_rows(ad::gather_rows(logits, rows));
  ad::Var weighted = ad::mul(logp, tape.constant(std::move(q), "smoothed_targets"));
  return ad::scale(ad::sum_all(weighted), -1.0 / static_cast<double>(rows.size()));
}

std::vector<int> greedy_decode(const NextTokenFn& next, int bos, int eos, int max_len) {
  std::vector<int> prefix{bos};
  for (int step = 0; step < max_len; ++step) {
    const RowVector lp = next(prefix);
    Index best = 0;
    lp.maxCoeff(&best);
    if (static_cast<int>(best) == eos) break;
    prefix.push_back(static_cast<int>(best));
  }
  return {prefix.begin() + 1, prefix.end()};
}

std::vector<int> beam_decode(const NextTokenFn& next, int bos, int eos, int max_len, int k) {
  if (k < 1) throw ConfigError("beam_decode: beam width must be >= 1");
  struct Hyp {
    std::vector<int> tokens;  // with BOS, without EOS
    double score = 0.0;
    int length = 0;  // generated tokens, EOS included
  };
  std::vector<Hyp> live{{{bos}, 0.0, 0}};
  std::vector<Hyp> finished;
  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Cand {
      size_t beam;
      int token;
      double score;
    };
    std::vector<Cand> cands;
    for (size_t b = 0; b < live.size(); ++b) {
      const RowVector lp = next(live[b].tokens);
      for (Index v = 0; v < lp.size(); ++v) {
        if (std::isfinite(lp(v))) cands.push_back({b, static_cast<int>(v), live[b].score + lp(v)});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.score > b.score; });
    if (cands.size() > static_cast<size_t>(k)) cands.resize(static_cast<size_t>(k));
    std::vector<Hyp> next_live;
    for (const Cand& c : cands) {
      Hyp h = live[c.beam];
      h.score = c.score;
      h.length += 1;
      if (c.token == eos) {
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(c.token);
        next_live.push_back(std::move(h));
      }
    }
    live = std::move(next_live);
  }
  for (auto& h : live) finished.push_back(std::move(h));
  if (finished.empty()) return {};
  const Hyp* best = &finished.front();
  auto normalized = [](const Hyp& h) { return h.length > 0 ? h.score / h.length : h.score; };
  for (const Hyp& h : finished) {
    if (normalized(h) > normalized(*best)) best = &h;
  }
  return {best->tokens.begin() + 1, best->tokens.end()};
}

std::vector<int> generate(const NextTokenFn& next, const DecodeOptions& options) {
  if (options.strategy == "greedy") return greedy_decode(next, options.bos, options.eos, options.max_len);
  if (options.strategy == "beam") {
    return beam_decode(next, options.bos, options.eos, options.max_len, options.beam);
  }
  throw ConfigError("generate: unknown strategy '" + options.strategy + "'");
}

}  // namespace sagecc
