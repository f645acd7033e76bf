#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "salcls/corpus.hpp"
#include "salcls/errors.hpp"
#include "salcls/oracles.hpp"
#include "salcls/text.hpp"

namespace salcls {

using Vec = std::vector<double>;

// Row-major matrix of doubles. Everything here is desk-scale, so plain loops
// over flat storage keep the arithmetic order fixed and runs bit-reproducible.
struct Mat {
  std::size_t rows = 0, cols = 0;
  Vec data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }

  bool operator==(const Mat&) const = default;
};

enum class EncoderPreset { tiny, small, pretrained_adapter };

inline const char* to_string(EncoderPreset p) {
  switch (p) {
    case EncoderPreset::tiny: return "tiny";
    case EncoderPreset::small: return "small";
    case EncoderPreset::pretrained_adapter: return "pretrained-adapter";
  }
  return "?";
}

inline EncoderPreset preset_from_string(const std::string& s) {
  if (s == "tiny") return EncoderPreset::tiny;
  if (s == "small") return EncoderPreset::small;
  if (s == "pretrained-adapter") return EncoderPreset::pretrained_adapter;
  throw ConfigError("unknown encoder preset: " + s);
}

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 32;
  int l_max = 128;
  int n_classes = 2;
  int vocab_size = 4096;  // hashing buckets, ids 0 (pad) and 1 (mask) reserved
  double dropout = 0.1;
  EncoderPreset preset = EncoderPreset::tiny;

  int d_ff() const { return 4 * d_model; }
  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || l_max <= 0)
      throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model must be divisible by n_heads");
    if (n_classes <= 0) throw ConfigError("n_classes must be positive");
    if (vocab_size < 3) throw ConfigError("vocab_size must leave room for pad and mask ids");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
  }

  static ModelConfig tiny_preset(int n_classes, int l_max = 128) {
    ModelConfig c;
    c.preset = EncoderPreset::tiny;
    c.n_layers = 2; c.n_heads = 2; c.d_model = 32;
    c.n_classes = n_classes; c.l_max = l_max;
    return c;
  }
  static ModelConfig small_preset(int n_classes, int l_max = 128) {
    ModelConfig c;
    c.preset = EncoderPreset::small;
    c.n_layers = 4; c.n_heads = 4; c.d_model = 128;
    c.n_classes = n_classes; c.l_max = l_max;
    return c;
  }

  json to_json() const {
    return json{{"preset", to_string(preset)}, {"n_layers", n_layers},
                {"n_heads", n_heads},          {"d_model", d_model},
                {"l_max", l_max},              {"n_classes", n_classes},
                {"vocab_size", vocab_size},    {"dropout", dropout}};
  }
  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.preset = preset_from_string(j.at("preset").get<std::string>());
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.l_max = j.at("l_max").get<int>();
    c.n_classes = j.at("n_classes").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Model tokenization: hashing-trick vocabulary over the word tokenizer.
// ---------------------------------------------------------------------------

inline constexpr int kPadId = 0;
inline constexpr int kMaskId = 1;

inline int token_to_id(std::string_view token, int vocab_size) {
  return 2 + static_cast<int>(fnv1a(to_lower(token)) %
                              static_cast<std::uint64_t>(vocab_size - 2));
}

struct Tokenization {
  std::vector<int> ids;        // length = real token count (pre-padding)
  std::vector<CharSpan> spans; // character spans into the normalized text
  std::vector<std::string> tokens;
};

inline Tokenization tokenize_for_model(const std::string& text, const ModelConfig& cfg) {
  Tokenization t;
  for (const auto& tok : tokenize(text)) {
    t.ids.push_back(token_to_id(tok.text, cfg.vocab_size));
    t.spans.push_back(tok.span);
    t.tokens.push_back(tok.text);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Encoder output and the saliency head
// ---------------------------------------------------------------------------

struct EncoderOutput {
  Mat token_reprs;             // l_max x d_model
  std::vector<Mat> attention;  // n_layers * n_heads matrices, each l_max x l_max
  Vec pooled;                  // d_model (first-token pooling)
  std::vector<int> pad_mask;   // l_max, 1 = real token
  int n_layers = 0, n_heads = 0;

  const Mat& att(int layer, int head) const {
    return attention[static_cast<std::size_t>(layer) * static_cast<std::size_t>(n_heads) +
                     static_cast<std::size_t>(head)];
  }
  Mat& att(int layer, int head) {
    return attention[static_cast<std::size_t>(layer) * static_cast<std::size_t>(n_heads) +
                     static_cast<std::size_t>(head)];
  }
};

// The last-layer last-head attention matrix, exactly as produced (no
// renormalization).
inline const Mat& extract_attention_matrix(const EncoderOutput& out) {
  return out.att(out.n_layers - 1, out.n_heads - 1);
}

struct SaliencyHead {
  Vec weight;  // l_max
  Vec bias;    // l_max
};

// y_hat[i] = sum_j att[i,j] * weight[j] + bias[i]
inline Vec saliency_logits(const Mat& att, const SaliencyHead& head) {
  if (att.rows != att.cols || att.rows != head.weight.size() ||
      head.weight.size() != head.bias.size())
    throw ShapeMismatch("attention matrix and saliency head dimensions disagree");
  const std::size_t n = att.rows;
  Vec y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    const double* row = att.row(i);
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * head.weight[j];
    y[i] = acc + head.bias[i];
  }
  return y;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline constexpr double kLogitClamp = 30.0;

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Weighted BCE over real tokens, mean-reduced; the positive weight multiplies
// the salient term only. Returns 0 when the sequence has no real tokens.
inline double saliency_loss(const Vec& logits, const SaliencyMask& target,
                            const std::vector<int>& pad_mask, double positive_weight) {
  if (logits.size() != pad_mask.size())
    throw ShapeMismatch("saliency logits and pad mask lengths disagree");
  double sum = 0.0;
  std::size_t real = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!pad_mask[i]) continue;
    ++real;
    const double z = std::clamp(logits[i], -kLogitClamp, kLogitClamp);
    const double s = sigmoid(z);
    if (i < target.length() && target.is_salient(i))
      sum += -positive_weight * std::log(s);
    else
      sum += -std::log(1.0 - s);
  }
  return real == 0 ? 0.0 : sum / static_cast<double>(real);
}

// d(saliency_loss)/d(logit_i); zero at pad positions and outside the clamp.
inline Vec saliency_loss_grad_logits(const Vec& logits, const SaliencyMask& target,
                                     const std::vector<int>& pad_mask,
                                     double positive_weight) {
  Vec g(logits.size(), 0.0);
  std::size_t real = 0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (pad_mask[i]) ++real;
  if (real == 0) return g;
  const double inv = 1.0 / static_cast<double>(real);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!pad_mask[i]) continue;
    if (logits[i] <= -kLogitClamp || logits[i] >= kLogitClamp) continue;
    const double s = sigmoid(logits[i]);
    if (i < target.length() && target.is_salient(i))
      g[i] = positive_weight * (s - 1.0) * inv;
    else
      g[i] = s * inv;
  }
  return g;
}

// Analytic d(saliency_loss)/dW and /db through y_hat = att*W + b.
inline void saliency_loss_grad_head(const Mat& att, const SaliencyHead& head,
                                    const SaliencyMask& target,
                                    const std::vector<int>& pad_mask,
                                    double positive_weight, Vec& d_weight, Vec& d_bias) {
  const Vec logits = saliency_logits(att, head);
  const Vec dz = saliency_loss_grad_logits(logits, target, pad_mask, positive_weight);
  d_weight.assign(head.weight.size(), 0.0);
  d_bias.assign(head.bias.size(), 0.0);
  for (std::size_t i = 0; i < att.rows; ++i) {
    if (dz[i] == 0.0) continue;
    const double* row = att.row(i);
    for (std::size_t j = 0; j < att.cols; ++j) d_weight[j] += dz[i] * row[j];
    d_bias[i] = dz[i];
  }
}

inline Vec softmax(const Vec& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  Vec p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

// Softmax cross-entropy over class logits.
inline double classification_loss(const Vec& class_logits, int gold) {
  if (gold < 0 || static_cast<std::size_t>(gold) >= class_logits.size())
    throw ShapeMismatch("gold label out of range");
  const Vec p = softmax(class_logits);
  return -std::log(std::max(p[static_cast<std::size_t>(gold)], 1e-300));
}

struct LossBreakdown {
  double class_loss = 0.0;
  double saliency_loss = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  double positive_weight = 1.0;
};

inline LossBreakdown total_loss(double class_loss, double sal_loss, double lambda,
                                double positive_weight = 1.0) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0,1]");
  LossBreakdown lb;
  lb.class_loss = class_loss;
  lb.saliency_loss = sal_loss;
  lb.lambda = lambda;
  lb.positive_weight = positive_weight;
  lb.total = class_loss + lambda * sal_loss;
  return lb;
}

// ---------------------------------------------------------------------------
// The transformer encoder network
// ---------------------------------------------------------------------------

// Flat parameter layout. Keeping every parameter in one contiguous vector
// makes the optimizer, checkpointing, and bit-identity checks trivial.
struct ParamLayout {
  struct Layer {
    std::size_t wq, wk, wv, wo;      // d x d each
    std::size_t bq, bk, bv, bo;      // d each
    std::size_t ln1_g, ln1_b;        // d each
    std::size_t w1, b1, w2, b2;      // d x ff, ff, ff x d, d
    std::size_t ln2_g, ln2_b;        // d each
  };
  std::size_t tok_emb = 0;  // vocab x d
  std::size_t pos_emb = 0;  // l_max x d
  std::vector<Layer> layers;
  std::size_t cls_w = 0;  // d x n_classes
  std::size_t cls_b = 0;  // n_classes
  std::size_t sal_w = 0;  // l_max
  std::size_t sal_b = 0;  // l_max
  std::size_t total = 0;

  explicit ParamLayout(const ModelConfig& cfg) {
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t ff = static_cast<std::size_t>(cfg.d_ff());
    const std::size_t L = static_cast<std::size_t>(cfg.l_max);
    std::size_t off = 0;
    auto take = [&off](std::size_t n) { std::size_t o = off; off += n; return o; };
    tok_emb = take(static_cast<std::size_t>(cfg.vocab_size) * d);
    pos_emb = take(L * d);
    for (int l = 0; l < cfg.n_layers; ++l) {
      Layer lay;
      lay.wq = take(d * d); lay.wk = take(d * d); lay.wv = take(d * d); lay.wo = take(d * d);
      lay.bq = take(d); lay.bk = take(d); lay.bv = take(d); lay.bo = take(d);
      lay.ln1_g = take(d); lay.ln1_b = take(d);
      lay.w1 = take(d * ff); lay.b1 = take(ff); lay.w2 = take(ff * d); lay.b2 = take(d);
      lay.ln2_g = take(d); lay.ln2_b = take(d);
      layers.push_back(lay);
    }
    cls_w = take(d * static_cast<std::size_t>(cfg.n_classes));
    cls_b = take(static_cast<std::size_t>(cfg.n_classes));
    sal_w = take(L);
    sal_b = take(L);
    total = off;
  }
};

inline constexpr double kLayerNormEps = 1e-5;

class Network {
 public:
  Network(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg), layout_(cfg), seed_(seed) {
    cfg_.validate();
    if (cfg_.preset == EncoderPreset::pretrained_adapter)
      throw ConfigError(
          "the pretrained-adapter preset needs an external encoder runtime; "
          "use the tiny or small preset here");
    params_.assign(layout_.total, 0.0);
    init_params(seed);
  }

  // Construct from a checkpoint blob (see save/load below).
  Network(ModelConfig cfg, Vec params, std::uint64_t seed)
      : cfg_(cfg), layout_(cfg), params_(std::move(params)), seed_(seed) {
    cfg_.validate();
    if (params_.size() != layout_.total)
      throw ShapeMismatch("parameter blob size does not match the model config");
  }

  const ModelConfig& config() const { return cfg_; }
  const Vec& params() const { return params_; }
  Vec& params() { return params_; }
  const ParamLayout& layout() const { return layout_; }
  std::uint64_t seed() const { return seed_; }

  SaliencyHead saliency_head() const {
    const std::size_t L = static_cast<std::size_t>(cfg_.l_max);
    SaliencyHead h;
    h.weight.assign(params_.begin() + layout_.sal_w, params_.begin() + layout_.sal_w + L);
    h.bias.assign(params_.begin() + layout_.sal_b, params_.begin() + layout_.sal_b + L);
    return h;
  }

  // Per-layer caches kept for the backward pass.
  struct LayerCache {
    Mat x;                    // layer input
    Mat q, k, v;              // l_max x d
    Mat ctx;                  // concatenated head outputs
    Mat attn_proj;            // ctx*wo + bo, after dropout
    Vec attn_drop;            // dropout multipliers (empty when not training)
    Mat sum1;                 // x + attn_proj
    Mat norm1;                // normalized sum1 (x-hat)
    Vec mu1, rstd1;           // per-row layernorm stats
    Mat y;                    // LN1 output
    Mat ffn_h;                // relu(y*w1 + b1)
    Mat ffn_out;              // ffn_h*w2 + b2, after dropout
    Vec ffn_drop;
    Mat sum2;                 // y + ffn_out
    Mat norm2;
    Vec mu2, rstd2;
    Mat out;                  // LN2 output, the layer's output
  };

  struct Activations {
    std::vector<int> ids;  // padded to l_max
    Mat x0;                // embeddings after dropout
    Vec emb_drop;
    std::vector<LayerCache> layers;
    EncoderOutput out;
    Vec class_logits;
    Vec class_probs;
  };

  // Forward pass. Sequences longer than l_max are truncated unless
  // allow_truncation is false. rng enables dropout (training mode).
  Activations forward(const std::vector<int>& token_ids, std::mt19937_64* rng = nullptr,
                      bool allow_truncation = true) const {
    const std::size_t L = static_cast<std::size_t>(cfg_.l_max);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    if (token_ids.size() > L && !allow_truncation)
      throw SequenceTooLong(std::to_string(token_ids.size()) + " tokens > l_max " +
                            std::to_string(L));

    Activations a;
    a.ids.assign(L, kPadId);
    for (std::size_t i = 0; i < std::min(L, token_ids.size()); ++i) {
      if (token_ids[i] < 0 || token_ids[i] >= cfg_.vocab_size)
        throw ShapeMismatch("token id " + std::to_string(token_ids[i]) +
                            " outside vocabulary of size " + std::to_string(cfg_.vocab_size));
      a.ids[i] = token_ids[i];
    }

    a.out.pad_mask.assign(L, 0);
    for (std::size_t i = 0; i < L; ++i) a.out.pad_mask[i] = a.ids[i] != kPadId ? 1 : 0;
    a.out.n_layers = cfg_.n_layers;
    a.out.n_heads = cfg_.n_heads;

    // Embeddings
    a.x0 = Mat(L, d);
    for (std::size_t i = 0; i < L; ++i) {
      const double* te = &params_[layout_.tok_emb + static_cast<std::size_t>(a.ids[i]) * d];
      const double* pe = &params_[layout_.pos_emb + i * d];
      for (std::size_t c = 0; c < d; ++c) a.x0.at(i, c) = te[c] + pe[c];
    }
    apply_dropout(a.x0, rng, a.emb_drop);

    Mat x = a.x0;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      LayerCache lc;
      lc.x = x;
      forward_layer(l, lc, a.out, rng);
      x = lc.out;
      a.layers.push_back(std::move(lc));
    }

    a.out.token_reprs = x;
    a.out.pooled.assign(x.row(0), x.row(0) + d);

    // Class head
    const std::size_t C = static_cast<std::size_t>(cfg_.n_classes);
    a.class_logits.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      double acc = params_[layout_.cls_b + c];
      for (std::size_t k = 0; k < d; ++k)
        acc += a.out.pooled[k] * params_[layout_.cls_w + k * C + c];
      a.class_logits[c] = acc;
    }
    a.class_probs = softmax(a.class_logits);
    return a;
  }

  // Backward pass. d_class_logits is the gradient at the class logits;
  // d_att_last is added to the gradient of the last layer's last head
  // attention probabilities (the saliency-loss path). Either may be empty.
  // Gradients accumulate into grad (size = params().size()). When dx0 is
  // non-null it receives the gradient at the post-embedding input.
  void backward(const Activations& a, const Vec& d_class_logits, const Mat& d_att_last,
                Vec& grad, Mat* dx0_out = nullptr) const {
    const std::size_t L = static_cast<std::size_t>(cfg_.l_max);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t C = static_cast<std::size_t>(cfg_.n_classes);
    if (grad.size() != params_.size()) grad.assign(params_.size(), 0.0);

    Mat dx(L, d);  // gradient at the current layer's output

    if (!d_class_logits.empty()) {
      if (d_class_logits.size() != C) throw ShapeMismatch("class logit gradient size");
      // class head: logits = pooled * cls_w + cls_b, pooled = token_reprs[0]
      for (std::size_t c = 0; c < C; ++c) {
        grad[layout_.cls_b + c] += d_class_logits[c];
        for (std::size_t k = 0; k < d; ++k) {
          grad[layout_.cls_w + k * C + c] += a.out.pooled[k] * d_class_logits[c];
          dx.at(0, k) += params_[layout_.cls_w + k * C + c] * d_class_logits[c];
        }
      }
    }

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
      const bool inject = (l == cfg_.n_layers - 1) && d_att_last.rows == L;
      backward_layer(l, a.layers[static_cast<std::size_t>(l)], a.out,
                     inject ? &d_att_last : nullptr, dx, grad);
    }

    // Embedding dropout, then the embedding tables.
    Mat dx0 = dx;
    if (!a.emb_drop.empty())
      for (std::size_t i = 0; i < dx0.data.size(); ++i) dx0.data[i] *= a.emb_drop[i];
    for (std::size_t i = 0; i < L; ++i) {
      double* d_te = &grad[layout_.tok_emb + static_cast<std::size_t>(a.ids[i]) * d];
      double* d_pe = &grad[layout_.pos_emb + i * d];
      for (std::size_t c = 0; c < d; ++c) {
        d_te[c] += dx0.at(i, c);
        d_pe[c] += dx0.at(i, c);
      }
    }
    if (dx0_out) *dx0_out = std::move(dx0);
  }

  // Convenience: saliency logits straight from a forward pass.
  Vec saliency_logits_for(const Activations& a) const {
    return salcls::saliency_logits(extract_attention_matrix(a.out), saliency_head());
  }

  // -------------------------------------------------------------------------
  // Checkpointing: binary parameter blob + JSON manifest sidecar.
  // -------------------------------------------------------------------------

  void save(const std::string& blob_path) const {
    std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot write checkpoint: " + blob_path);
    const char magic[8] = {'S', 'A', 'L', 'C', 'L', 'S', '0', '1'};
    out.write(magic, 8);
    const std::uint64_t count = params_.size();
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    out.write(reinterpret_cast<const char*>(params_.data()),
              static_cast<std::streamsize>(count * sizeof(double)));
    if (!out) throw IoFailure("checkpoint write failed: " + blob_path);
  }

  static Vec load_blob(const std::string& blob_path) {
    std::ifstream in(blob_path, std::ios::binary);
    if (!in) throw IoFailure("cannot read checkpoint: " + blob_path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "SALCLS01")
      throw ManifestMismatch("not a checkpoint blob: " + blob_path);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    Vec params(count);
    in.read(reinterpret_cast<char*>(params.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw IoFailure("truncated checkpoint blob: " + blob_path);
    return params;
  }

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
  Vec params_;
  std::uint64_t seed_ = 0;

  void init_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto fill_normal = [&](std::size_t off, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) params_[off + i] = dist(rng);
    };
    auto fill_const = [&](std::size_t off, std::size_t n, double v) {
      for (std::size_t i = 0; i < n; ++i) params_[off + i] = v;
    };
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t ff = static_cast<std::size_t>(cfg_.d_ff());
    const std::size_t L = static_cast<std::size_t>(cfg_.l_max);
    fill_normal(layout_.tok_emb, static_cast<std::size_t>(cfg_.vocab_size) * d);
    fill_normal(layout_.pos_emb, L * d);
    for (const auto& lay : layout_.layers) {
      fill_normal(lay.wq, d * d); fill_normal(lay.wk, d * d);
      fill_normal(lay.wv, d * d); fill_normal(lay.wo, d * d);
      fill_const(lay.ln1_g, d, 1.0);
      fill_const(lay.ln2_g, d, 1.0);
      fill_normal(lay.w1, d * ff);
      fill_normal(lay.w2, ff * d);
      // biases stay zero
    }
    fill_normal(layout_.cls_w, d * static_cast<std::size_t>(cfg_.n_classes));
    fill_normal(layout_.sal_w, L);
    // sal_b stays zero
  }

  void apply_dropout(Mat& m, std::mt19937_64* rng, Vec& keep) const {
    if (!rng || cfg_.dropout <= 0.0) return;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double scale = 1.0 / (1.0 - cfg_.dropout);
    keep.resize(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      keep[i] = u(*rng) < cfg_.dropout ? 0.0 : scale;
      m.data[i] *= keep[i];
    }
  }

  static void layernorm_rows(const Mat& in, const double* gamma, const double* beta,
                             Mat& normed, Mat& out, Vec& mu, Vec& rstd) {
    const std::size_t R = in.rows, D = in.cols;
    normed = Mat(R, D);
    out = Mat(R, D);
    mu.assign(R, 0.0);
    rstd.assign(R, 0.0);
    for (std::size_t i = 0; i < R; ++i) {
      const double* v = in.row(i);
      double m = 0.0;
      for (std::size_t c = 0; c < D; ++c) m += v[c];
      m /= static_cast<double>(D);
      double var = 0.0;
      for (std::size_t c = 0; c < D; ++c) var += (v[c] - m) * (v[c] - m);
      var /= static_cast<double>(D);
      const double r = 1.0 / std::sqrt(var + kLayerNormEps);
      mu[i] = m;
      rstd[i] = r;
      for (std::size_t c = 0; c < D; ++c) {
        normed.at(i, c) = (v[c] - m) * r;
        out.at(i, c) = gamma[c] * normed.at(i, c) + beta[c];
      }
    }
  }

  static void layernorm_rows_backward(const Mat& dout, const Mat& normed, const Vec& rstd,
                                      const double* gamma, double* dgamma, double* dbeta,
                                      Mat& din) {
    const std::size_t R = dout.rows, D = dout.cols;
    din = Mat(R, D);
    for (std::size_t i = 0; i < R; ++i) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t c = 0; c < D; ++c) {
        const double g = dout.at(i, c);
        dgamma[c] += g * normed.at(i, c);
        dbeta[c] += g;
        const double dxhat = g * gamma[c];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * normed.at(i, c);
      }
      mean_dxhat /= static_cast<double>(D);
      mean_dxhat_xhat /= static_cast<double>(D);
      for (std::size_t c = 0; c < D; ++c) {
        const double dxhat = dout.at(i, c) * gamma[c];
        din.at(i, c) =
            (dxhat - mean_dxhat - normed.at(i, c) * mean_dxhat_xhat) * rstd[i];
      }
    }
  }

  // x (LxD) times w (DxE) plus bias b (E) -> out (LxE)
  void linear(const Mat& x, std::size_t w_off, std::size_t b_off, std::size_t out_dim,
              Mat& out) const {
    const std::size_t R = x.rows, D = x.cols;
    out = Mat(R, out_dim);
    for (std::size_t i = 0; i < R; ++i) {
      const double* xi = x.row(i);
      for (std::size_t e = 0; e < out_dim; ++e) {
        double acc = params_[b_off + e];
        for (std::size_t c = 0; c < D; ++c) acc += xi[c] * params_[w_off + c * out_dim + e];
        out.at(i, e) = acc;
      }
    }
  }

  void linear_backward(const Mat& x, std::size_t w_off, std::size_t b_off,
                       std::size_t out_dim, const Mat& dout, Mat& dx, Vec& grad) const {
    const std::size_t R = x.rows, D = x.cols;
    if (dx.rows != R || dx.cols != D) dx = Mat(R, D);
    for (std::size_t i = 0; i < R; ++i) {
      const double* xi = x.row(i);
      const double* doi = dout.row(i);
      for (std::size_t e = 0; e < out_dim; ++e) {
        const double g = doi[e];
        if (g == 0.0) continue;
        grad[b_off + e] += g;
        for (std::size_t c = 0; c < D; ++c) {
          grad[w_off + c * out_dim + e] += xi[c] * g;
          dx.at(i, c) += params_[w_off + c * out_dim + e] * g;
        }
      }
    }
  }

  void forward_layer(int l, LayerCache& lc, EncoderOutput& out,
                     std::mt19937_64* rng) const {
    const std::size_t L = static_cast<std::size_t>(cfg_.l_max);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t H = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t dh = static_cast<std::size_t>(cfg_.d_head());
    const auto& lay = layout_.layers[static_cast<std::size_t>(l)];

    linear(lc.x, lay.wq, lay.bq, d, lc.q);
    linear(lc.x, lay.wk, lay.bk, d, lc.k);
    linear(lc.x, lay.wv, lay.bv, d, lc.v);

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    lc.ctx = Mat(L, d);
    for (std::size_t h = 0; h < H; ++h) {
      Mat att(L, L);
      for (std::size_t i = 0; i < L; ++i) {
        // scores over real keys only
        double mx = -1e300;
        Vec scores(L, 0.0);
        bool any = false;
        for (std::size_t j = 0; j < L; ++j) {
          if (!out.pad_mask[j]) continue;
          double acc = 0.0;
          const double* qi = lc.q.row(i) + h * dh;
          const double* kj = lc.k.row(j) + h * dh;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          scores[j] = acc * inv_sqrt_dh;
          mx = std::max(mx, scores[j]);
          any = true;
        }
        if (!any) continue;  // all-pad input: leave the row at zero
        double denom = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          if (!out.pad_mask[j]) continue;
          att.at(i, j) = std::exp(scores[j] - mx);
          denom += att.at(i, j);
        }
        for (std::size_t j = 0; j < L; ++j)
          if (out.pad_mask[j]) att.at(i, j) /= denom;
        // context for this row
        for (std::size_t j = 0; j < L; ++j) {
          const double a = att.at(i, j);
          if (a == 0.0) continue;
          const double* vj = lc.v.row(j) + h * dh;
          double* ci = lc.ctx.row(i) + h * dh;
          for (std::size_t c = 0; c < dh; ++c) ci[c] += a * vj[c];
        }
      }
      out.attention.push_back(std::move(att));
    }

    linear(lc.ctx, lay.wo, lay.bo, d, lc.attn_proj);
    apply_dropout(lc.attn_proj, rng, lc.attn_drop);

    lc.sum1 = Mat(L, d);
    for (std::size_t i = 0; i < lc.sum1.data.size(); ++i)
      lc.sum1.data[i] = lc.x.data[i] + lc.attn_proj.data[i];
    layernorm_rows(lc.sum1, &params_[lay.ln1_g], &params_[lay.ln1_b], lc.norm1, lc.y,
                   lc.mu1, lc.rstd1);

    const std::size_t ff = static_cast<std::size_t>(cfg_.d_ff());
    linear(lc.y, lay.w1, lay.b1, ff, lc.ffn_h);
    for (double& v : lc.ffn_h.data) v = std::max(0.0, v);
    linear(lc.ffn_h, lay.w2, lay.b2, d, lc.ffn_out);
    apply_dropout(lc.ffn_out, rng, lc.ffn_drop);

    lc.sum2 = Mat(L, d);
    for (std::size_t i = 0; i < lc.sum2.data.size(); ++i)
      lc.sum2.data[i] = lc.y.data[i] + lc.ffn_out.data[i];
    layernorm_rows(lc.sum2, &params_[lay.ln2_g], &params_[lay.ln2_b], lc.norm2, lc.out,
                   lc.mu2, lc.rstd2);
  }

  void backward_layer(int l, const LayerCache& lc, const EncoderOutput& out,
                      const Mat* d_att_inject, Mat& dx, Vec& grad) const {
    const std::size_t L = static_cast<std::size_t>(cfg_.l_max);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t H = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t dh = static_cast<std::size_t>(cfg_.d_head());
    const std::size_t ff = static_cast<std::size_t>(cfg_.d_ff());
    const auto& lay = layout_.layers[static_cast<std::size_t>(l)];

    // LN2
    Mat dsum2;
    layernorm_rows_backward(dx, lc.norm2, lc.rstd2, &params_[lay.ln2_g],
                            &grad[lay.ln2_g], &grad[lay.ln2_b], dsum2);
    // residual: sum2 = y + ffn_out
    Mat dffn_out = dsum2;
    if (!lc.ffn_drop.empty())
      for (std::size_t i = 0; i < dffn_out.data.size(); ++i)
        dffn_out.data[i] *= lc.ffn_drop[i];
    Mat dffn_h;
    linear_backward(lc.ffn_h, lay.w2, lay.b2, d, dffn_out, dffn_h, grad);
    for (std::size_t i = 0; i < dffn_h.data.size(); ++i)
      if (lc.ffn_h.data[i] <= 0.0) dffn_h.data[i] = 0.0;
    Mat dy;
    linear_backward(lc.y, lay.w1, lay.b1, ff, dffn_h, dy, grad);
    for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] += dsum2.data[i];

    // LN1
    Mat dsum1;
    layernorm_rows_backward(dy, lc.norm1, lc.rstd1, &params_[lay.ln1_g],
                            &grad[lay.ln1_g], &grad[lay.ln1_b], dsum1);
    Mat dattn_proj = dsum1;
    if (!lc.attn_drop.empty())
      for (std::size_t i = 0; i < dattn_proj.data.size(); ++i)
        dattn_proj.data[i] *= lc.attn_drop[i];
    Mat dctx;
    linear_backward(lc.ctx, lay.wo, lay.bo, d, dattn_proj, dctx, grad);

    Mat dq(L, d), dk(L, d), dv(L, d);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < H; ++h) {
      const Mat& att = out.att(l, static_cast<int>(h));
      const bool inject_here = d_att_inject && h == H - 1;
      for (std::size_t i = 0; i < L; ++i) {
        // dA[i,j] = dctx_h[i] . v_h[j]  (+ injected saliency gradient)
        Vec da(L, 0.0);
        const double* dci = dctx.row(i) + h * dh;
        bool row_live = false;
        for (std::size_t j = 0; j < L; ++j) {
          if (att.at(i, j) == 0.0 && !inject_here) continue;
          double acc = 0.0;
          const double* vj = lc.v.row(j) + h * dh;
          for (std::size_t c = 0; c < dh; ++c) acc += dci[c] * vj[c];
          da[j] = acc;
          if (inject_here) da[j] += d_att_inject->at(i, j);
          row_live = row_live || att.at(i, j) != 0.0;
        }
        if (!row_live) continue;  // all-pad row, softmax was skipped
        // dV from this row
        for (std::size_t j = 0; j < L; ++j) {
          const double a = att.at(i, j);
          if (a == 0.0) continue;
          double* dvj = dv.row(j) + h * dh;
          for (std::size_t c = 0; c < dh; ++c) dvj[c] += a * dci[c];
        }
        // softmax backward: ds = a .* (da - sum(da .* a))
        double dot = 0.0;
        for (std::size_t j = 0; j < L; ++j) dot += da[j] * att.at(i, j);
        for (std::size_t j = 0; j < L; ++j) {
          const double a = att.at(i, j);
          if (a == 0.0) continue;
          const double ds = a * (da[j] - dot) * inv_sqrt_dh;
          const double* kj = lc.k.row(j) + h * dh;
          const double* qi = lc.q.row(i) + h * dh;
          double* dqi = dq.row(i) + h * dh;
          double* dkj = dk.row(j) + h * dh;
          for (std::size_t c = 0; c < dh; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }

    Mat dx_in(L, d);
    linear_backward(lc.x, lay.wq, lay.bq, d, dq, dx_in, grad);
    linear_backward(lc.x, lay.wk, lay.bk, d, dk, dx_in, grad);
    linear_backward(lc.x, lay.wv, lay.bv, d, dv, dx_in, grad);
    // residual: sum1 = x + attn_proj
    for (std::size_t i = 0; i < dx_in.data.size(); ++i)
      dx_in.data[i] += dsum1.data[i];
    dx = std::move(dx_in);
  }
};

}  // namespace salcls
