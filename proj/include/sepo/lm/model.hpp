#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sepo/autodiff/ops.hpp"
#include "sepo/autodiff/tape.hpp"
#include "sepo/autodiff/tensor.hpp"
#include "sepo/core/error.hpp"
#include "sepo/core/hash.hpp"
#include "sepo/core/rng.hpp"
#include "sepo/lm/vocab.hpp"

namespace sepo::lm {

using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Decoder-only transformer shape. Positions are learned absolute embeddings.
struct LMConfig {
    std::size_t vocab_size = 32;
    std::size_t n_layers = 1;
    std::size_t n_heads = 2;
    std::size_t d_model = 32;
    std::size_t max_context = 32;

    void validate() const {
        if (vocab_size < 4 || vocab_size > kMaxVocab)
            throw ValidationError("vocab_size must be in [4, " + std::to_string(kMaxVocab) + "], got " +
                                  std::to_string(vocab_size));
        if (n_layers == 0 || n_heads == 0 || d_model == 0 || max_context == 0)
            throw ValidationError("model dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ValidationError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                  std::to_string(n_heads));
    }

    /// Canonical key=value text; stable across runs and platforms.
    std::string canonical() const {
        std::ostringstream os;
        os << "vocab_size=" << vocab_size << "\nn_layers=" << n_layers << "\nn_heads=" << n_heads
           << "\nd_model=" << d_model << "\nmax_context=" << max_context << "\npositional=learned-absolute\n";
        return os.str();
    }

    bool operator==(const LMConfig&) const = default;
};

template <class T>
struct Block {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> w_qkv, b_qkv;
    Tensor<T> w_o, b_o;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w_fc, b_fc;
    Tensor<T> w_proj, b_proj;
};

/// Parameters of one model. Copyable; parameter views are recomputed on
/// demand so copies never alias.
template <class T>
class Model {
  public:
    Model() = default;

    /// Small-normal init; the output head starts at zero so an untrained
    /// model is exactly uniform over the vocabulary.
    Model(const LMConfig& cfg, std::uint64_t seed) : config_(cfg) {
        cfg.validate();
        const std::size_t V = cfg.vocab_size, D = cfg.d_model, C = cfg.max_context;
        Rng rng(seed);
        auto normal = [&rng](ad::Shape shape, double std) {
            Tensor<T> t(std::move(shape));
            for (T& v : t.data()) v = static_cast<T>(rng.normal() * std);
            return t;
        };
        const double s = 0.02;
        const double s_res = s / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
        tok_emb_ = normal({V, D}, s);
        pos_emb_ = normal({C, D}, s);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            Block<T> b;
            b.ln1_g = Tensor<T>({D}, T{1});
            b.ln1_b = Tensor<T>({D});
            b.w_qkv = normal({D, 3 * D}, s);
            b.b_qkv = Tensor<T>({3 * D});
            b.w_o = normal({D, D}, s_res);
            b.b_o = Tensor<T>({D});
            b.ln2_g = Tensor<T>({D}, T{1});
            b.ln2_b = Tensor<T>({D});
            b.w_fc = normal({D, 4 * D}, s);
            b.b_fc = Tensor<T>({4 * D});
            b.w_proj = normal({4 * D, D}, s_res);
            b.b_proj = Tensor<T>({D});
            blocks_.push_back(std::move(b));
        }
        lnf_g_ = Tensor<T>({D}, T{1});
        lnf_b_ = Tensor<T>({D});
        head_w_ = Tensor<T>({D, V});
        head_b_ = Tensor<T>({V});
    }

    const LMConfig& config() const noexcept { return config_; }

    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out{{"tok_emb", &tok_emb_}, {"pos_emb", &pos_emb_}};
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            Block<T>& b = blocks_[l];
            const std::string p = "h" + std::to_string(l) + ".";
            out.insert(out.end(), {{p + "ln1.g", &b.ln1_g},
                                   {p + "ln1.b", &b.ln1_b},
                                   {p + "attn.w_qkv", &b.w_qkv},
                                   {p + "attn.b_qkv", &b.b_qkv},
                                   {p + "attn.w_o", &b.w_o},
                                   {p + "attn.b_o", &b.b_o},
                                   {p + "ln2.g", &b.ln2_g},
                                   {p + "ln2.b", &b.ln2_b},
                                   {p + "mlp.w_fc", &b.w_fc},
                                   {p + "mlp.b_fc", &b.b_fc},
                                   {p + "mlp.w_proj", &b.w_proj},
                                   {p + "mlp.b_proj", &b.b_proj}});
        }
        out.insert(out.end(), {{"lnf.g", &lnf_g_}, {"lnf.b", &lnf_b_}, {"head.w", &head_w_}, {"head.b", &head_b_}});
        return out;
    }

    std::vector<std::pair<std::string, const Tensor<T>*>> named_parameters() const {
        std::vector<std::pair<std::string, const Tensor<T>*>> out;
        for (auto& [name, t] : const_cast<Model*>(this)->named_parameters()) out.emplace_back(name, t);
        return out;
    }

    std::vector<Tensor<T>*> parameters() {
        std::vector<Tensor<T>*> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    void zero_grads() {
        for (Tensor<T>* p : parameters()) p->zero_grad();
    }

    void drop_grads() {
        for (Tensor<T>* p : parameters()) p->drop_grad();
    }

    /// Records the forward pass on `tape`; returns logits [len x vocab].
    Var<T> forward(Tape<T>& tape, std::span<const int> tokens) {
        if (tokens.empty()) throw ValidationError("forward: empty token sequence");
        if (tokens.size() > config_.max_context)
            throw ValidationError("forward: sequence length " + std::to_string(tokens.size()) +
                                  " exceeds max_context " + std::to_string(config_.max_context));
        Var<T> x = ad::embed(tape.param(tok_emb_), tape.param(pos_emb_), tokens);
        for (Block<T>& b : blocks_) {
            Var<T> h = ad::layer_norm(x, tape.param(b.ln1_g), tape.param(b.ln1_b));
            h = ad::affine(h, tape.param(b.w_qkv), tape.param(b.b_qkv));
            h = ad::causal_attention(h, config_.n_heads);
            h = ad::affine(h, tape.param(b.w_o), tape.param(b.b_o));
            x = ad::add(x, h);
            h = ad::layer_norm(x, tape.param(b.ln2_g), tape.param(b.ln2_b));
            h = ad::gelu(ad::affine(h, tape.param(b.w_fc), tape.param(b.b_fc)));
            h = ad::affine(h, tape.param(b.w_proj), tape.param(b.b_proj));
            x = ad::add(x, h);
        }
        x = ad::layer_norm(x, tape.param(lnf_g_), tape.param(lnf_b_));
        return ad::affine(x, tape.param(head_w_), tape.param(head_b_));
    }

  private:
    LMConfig config_;
    Tensor<T> tok_emb_, pos_emb_;
    std::vector<Block<T>> blocks_;
    Tensor<T> lnf_g_, lnf_b_, head_w_, head_b_;
};

/// Exact trainable-parameter count.
template <class T>
std::size_t param_count(const Model<T>& model) {
    std::size_t n = 0;
    for (const auto& [name, t] : model.named_parameters()) n += t->size();
    return n;
}

/// Closed form of param_count for a config, without allocating.
inline std::size_t param_count(const LMConfig& c) {
    const std::size_t V = c.vocab_size, D = c.d_model;
    const std::size_t per_block = 2 * D + (D * 3 * D + 3 * D) + (D * D + D) + 2 * D + (D * 4 * D + 4 * D) +
                                  (4 * D * D + D);
    return V * D + c.max_context * D + c.n_layers * per_block + 2 * D + D * V + V;
}

/// Logits for a token sequence, computed in inference mode.
template <class T>
Tensor<T> forward_logits(Model<T>& model, std::span<const int> tokens) {
    Tape<T> tape(false);
    return model.forward(tape, tokens).value();
}

template <class T>
Tensor<T> forward_logits(const Model<T>& model, std::span<const int> tokens) {
    return forward_logits(const_cast<Model<T>&>(model), tokens);
}

/// Per-token conditional log-probabilities of a response, one per token.
template <class T>
struct TokenLogProbs {
    std::vector<T> values;
    std::size_t prompt_len = 0;
    std::size_t response_len = 0;

    T sum() const {
        T s{0};
        for (T v : values) s += v;
        return s;
    }
};

namespace detail {

inline std::vector<int> join_for_scoring(std::span<const int> prompt, std::span<const int> response) {
    // The final response token is never an input: its prediction comes from
    // the previous position.
    std::vector<int> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), response.begin(), response.end() - 1);
    return seq;
}

inline void check_side(std::span<const int> prompt, std::span<const int> response, const LMConfig& cfg) {
    if (prompt.empty()) throw ValidationError("response_logprobs: empty prompt");
    if (response.empty()) throw ValidationError("response_logprobs: empty response");
    if (prompt.size() + response.size() > cfg.max_context)
        throw ValidationError("response_logprobs: prompt+response length " +
                              std::to_string(prompt.size() + response.size()) + " exceeds max_context " +
                              std::to_string(cfg.max_context));
}

} // namespace detail

/// Records log pi(y_i | q, y_<i) for every response token as a [len] vector
/// on `tape`. Only the first `response.size()` tokens are scored; callers
/// strip padding before calling.
template <class T>
Var<T> response_logprob_vars(Tape<T>& tape, Model<T>& model, std::span<const int> prompt,
                             std::span<const int> response) {
    detail::check_side(prompt, response, model.config());
    const std::vector<int> seq = detail::join_for_scoring(prompt, response);
    Var<T> logp = ad::log_softmax(model.forward(tape, seq));
    std::vector<std::size_t> rows(response.size());
    for (std::size_t i = 0; i < response.size(); ++i) rows[i] = prompt.size() + i - 1;
    return ad::pick(logp, std::span<const std::size_t>(rows), response);
}

template <class T>
TokenLogProbs<T> response_logprobs(const Model<T>& model, std::span<const int> prompt,
                                   std::span<const int> response) {
    Tape<T> tape(false);
    Var<T> v = response_logprob_vars(tape, const_cast<Model<T>&>(model), prompt, response);
    TokenLogProbs<T> out;
    out.values.assign(v.data().begin(), v.data().end());
    out.prompt_len = prompt.size();
    out.response_len = response.size();
    return out;
}

struct SampleOptions {
    std::size_t max_new = 16;
    double temperature = 0.8;
    bool greedy = false;
};

/// Ancestral sampling until EOS (kept in the output) or max_new tokens.
/// PAD and BOS are never emitted. Deterministic per seed.
template <class T>
std::vector<int> sample(const Model<T>& model, std::span<const int> prompt, const SampleOptions& opts,
                        std::uint64_t seed) {
    if (!opts.greedy && !(opts.temperature > 0.0)) throw ValidationError("sample: temperature must be positive");
    if (prompt.empty()) throw ValidationError("sample: empty prompt");
    const std::size_t V = model.config().vocab_size;
    Rng rng(seed);
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    std::vector<double> probs(V);
    while (out.size() < opts.max_new && seq.size() < model.config().max_context) {
        const Tensor<T> logits = forward_logits(model, seq);
        const std::size_t last = logits.rows() - 1;
        int next = kEos;
        if (opts.greedy) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t v = kFirstContent - 1; v < V; ++v) {
                const double l = static_cast<double>(logits.at(last, v));
                if (l > best) {
                    best = l;
                    next = static_cast<int>(v);
                }
            }
        } else {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t v = kEos; v < V; ++v) mx = std::max(mx, static_cast<double>(logits.at(last, v)));
            double total = 0.0;
            for (std::size_t v = 0; v < V; ++v) {
                probs[v] = v < static_cast<std::size_t>(kEos)
                               ? 0.0
                               : std::exp((static_cast<double>(logits.at(last, v)) - mx) / opts.temperature);
                total += probs[v];
            }
            const double u = rng.uniform() * total;
            double acc = 0.0;
            next = static_cast<int>(V - 1);
            for (std::size_t v = kEos; v < V; ++v) {
                acc += probs[v];
                if (u < acc) {
                    next = static_cast<int>(v);
                    break;
                }
            }
        }
        out.push_back(next);
        seq.push_back(next);
        if (next == kEos) break;
    }
    return out;
}

} // namespace sepo::lm
