#pragma once

// A small pre-norm decoder-only transformer: RMSNorm, rotary position
// encoding, causal self-attention, GELU MLP, untied LM head. Forward takes an
// embedding matrix so callers can splice non-vocabulary rows (compressed
// context vectors) into the input sequence before the first block.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "selecom/nn.hpp"
#include "selecom/tensor.hpp"

namespace selecom {

struct DecoderConfig {
    size_t n_layers = 2;
    size_t n_heads = 2;
    size_t d_model = 32;
    size_t d_ff = 64;
    size_t vocab_size = 0;
    size_t max_seq_len = 512;

    void validate() const {
        if (!n_layers || !n_heads || !d_model || !d_ff || !vocab_size || !max_seq_len)
            throw TensorError("DecoderConfig: all fields must be positive");
        if (d_model % n_heads != 0)
            throw TensorError("DecoderConfig: d_model must be divisible by n_heads");
    }
};

// Per-layer attention weights captured during a forward pass, for
// diagnostics. Each layer holds a dense [n_heads x tq x tk] buffer.
struct AttentionCapture {
    size_t n_heads = 0, tq = 0, tk = 0;
    std::vector<std::vector<float>> layers;

    float at(size_t layer, size_t head, size_t qpos, size_t kpos) const {
        return layers.at(layer)[(head * tq + qpos) * tk + kpos];
    }
};

class Decoder {
public:
    Decoder() = default;

    Decoder(const DecoderConfig& cfg, std::mt19937& rng) : cfg_(cfg) {
        cfg.validate();
        const float s = 0.02f;
        embedding_ = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, s, true);
        for (size_t l = 0; l < cfg.n_layers; ++l) {
            Layer ly;
            ly.attn_gain = Tensor({cfg.d_model}, 1.0f, true);
            ly.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true);
            ly.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true);
            ly.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true);
            ly.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, s, true);
            ly.mlp_gain = Tensor({cfg.d_model}, 1.0f, true);
            ly.w1 = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, s, true);
            ly.b1 = Tensor({cfg.d_ff}, 0.0f, true);
            ly.w2 = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, s, true);
            ly.b2 = Tensor({cfg.d_model}, 0.0f, true);
            layers_.push_back(std::move(ly));
        }
        final_gain_ = Tensor({cfg.d_model}, 1.0f, true);
        lm_head_ = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, s, true);
    }

    const DecoderConfig& config() const { return cfg_; }
    Tensor& embedding() { return embedding_; }
    const Tensor& embedding() const { return embedding_; }

    Tensor embed(const std::vector<int>& ids) const {
        if (ids.size() > cfg_.max_seq_len)
            throw TensorError("sequence length " + std::to_string(ids.size()) +
                              " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
        return embedding_lookup(embedding_, ids);
    }

    // Runs the block stack over an already-embedded [T x d_model] sequence.
    // Returns final hidden states after the closing RMSNorm.
    Tensor forward_hidden(const Tensor& x, AttentionCapture* capture = nullptr) const {
        if (x.ndim() != 2 || x.dim(1) != cfg_.d_model)
            throw TensorError("forward_hidden: expected [T x d_model] input, got " +
                              shape_str(x.shape()));
        if (x.dim(0) > cfg_.max_seq_len)
            throw TensorError("sequence length " + std::to_string(x.dim(0)) +
                              " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
        if (capture) {
            capture->n_heads = cfg_.n_heads;
            capture->tq = capture->tk = x.dim(0);
            capture->layers.clear();
        }
        Tensor h = x;
        for (const Layer& ly : layers_) {
            Tensor a_in = rms_norm(h, ly.attn_gain);
            Tensor q = rotary_position_encode(matmul(a_in, ly.wq), cfg_.n_heads);
            Tensor k = rotary_position_encode(matmul(a_in, ly.wk), cfg_.n_heads);
            Tensor v = matmul(a_in, ly.wv);
            AttentionResult att = scaled_dot_attention(q, k, v, cfg_.n_heads, /*causal=*/true);
            if (capture) capture->layers.push_back(att.weights.values());
            h = add(h, matmul(att.output, ly.wo));
            Tensor m_in = rms_norm(h, ly.mlp_gain);
            Tensor m = matmul(gelu(add_rowvec(matmul(m_in, ly.w1), ly.b1)), ly.w2);
            h = add(h, add_rowvec(m, ly.b2));
        }
        return rms_norm(h, final_gain_);
    }

    Tensor logits(const Tensor& hidden) const { return matmul(hidden, lm_head_); }

    Tensor forward_logits(const std::vector<int>& ids, AttentionCapture* capture = nullptr) const {
        return logits(forward_hidden(embed(ids), capture));
    }

    // Greedy decoding with full recompute per step. `prefix_embeds` lets the
    // caller pass spliced embeddings; generated tokens extend it via normal
    // vocabulary lookups. Stops at `eos_id` (excluded from the result).
    std::vector<int> generate(const Tensor& prefix_embeds, size_t max_new_tokens,
                              int eos_id) const {
        std::vector<int> out;
        Tensor seq = prefix_embeds;
        for (size_t step = 0; step < max_new_tokens; ++step) {
            if (seq.dim(0) >= cfg_.max_seq_len) break;
            Tensor h = forward_hidden(seq);
            Tensor lg = logits(slice_rows(h, h.dim(0) - 1, 1));
            int best = 0;
            float best_v = lg.at(0);
            for (size_t v = 1; v < cfg_.vocab_size; ++v)
                if (lg.at(v) > best_v) { best_v = lg.at(v); best = static_cast<int>(v); }
            if (best == eos_id) break;
            out.push_back(best);
            seq = concat_rows({seq, embedding_lookup(embedding_, {best})});
        }
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> parameters() {
        std::vector<std::pair<std::string, Tensor>> ps;
        ps.emplace_back("embedding", embedding_);
        for (size_t l = 0; l < layers_.size(); ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            Layer& ly = layers_[l];
            ps.emplace_back(pre + "attn_gain", ly.attn_gain);
            ps.emplace_back(pre + "wq", ly.wq);
            ps.emplace_back(pre + "wk", ly.wk);
            ps.emplace_back(pre + "wv", ly.wv);
            ps.emplace_back(pre + "wo", ly.wo);
            ps.emplace_back(pre + "mlp_gain", ly.mlp_gain);
            ps.emplace_back(pre + "w1", ly.w1);
            ps.emplace_back(pre + "b1", ly.b1);
            ps.emplace_back(pre + "w2", ly.w2);
            ps.emplace_back(pre + "b2", ly.b2);
        }
        ps.emplace_back("final_gain", final_gain_);
        ps.emplace_back("lm_head", lm_head_);
        return ps;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, t] : parameters()) t.set_requires_grad(trainable);
    }

private:
    struct Layer {
        Tensor attn_gain, wq, wk, wv, wo;
        Tensor mlp_gain, w1, b1, w2, b2;
    };

    DecoderConfig cfg_;
    Tensor embedding_;
    std::vector<Layer> layers_;
    Tensor final_gain_;
    Tensor lm_head_;
};

}  // namespace selecom
