#pragma once

// Selector / projector / generator triple: the selector reads a
// query-conditioned prompt with p trainable <ENCODE> embeddings appended, the
// projector maps the p selector hidden states to n generator-width latent
// vectors, and the generator consumes a prompt whose <DOCUMENT> placeholder
// rows are replaced by those vectors.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "selecom/decoder.hpp"
#include "selecom/tokenizer.hpp"

namespace selecom {

struct Selector {
    Decoder backbone;
    Tensor encode_embeddings;  // dedicated [p x d_model] table, not in the vocab
    size_t p = 0;

    Selector() = default;
    Selector(const DecoderConfig& cfg, size_t p_count, std::mt19937& rng)
        : backbone(cfg, rng), p(p_count) {
        if (!p) throw TensorError("Selector: p must be positive");
        encode_embeddings = Tensor::randn({p, cfg.d_model}, rng, 0.02f, true);
    }
};

struct Projector {
    Tensor weight;  // [(p * d_sel) x (n * d_gen)]
    Tensor bias;    // [n * d_gen]
    size_t n = 0;
    size_t d_gen = 0;

    Projector() = default;
    Projector(size_t p, size_t d_sel, size_t n_count, size_t d_gen_width, std::mt19937& rng)
        : n(n_count), d_gen(d_gen_width) {
        if (!n) throw TensorError("Projector: n must be positive");
        weight = Tensor::randn({p * d_sel, n * d_gen}, rng, 0.02f, true);
        bias = Tensor({n * d_gen}, 0.0f, true);
    }
};

struct Generator {
    Decoder backbone;
    int document_placeholder_id = Tokenizer::kDocument;

    Generator() = default;
    Generator(const DecoderConfig& cfg, std::mt19937& rng) : backbone(cfg, rng) {}
};

struct CompressedContext {
    std::vector<Tensor> vectors;  // n tensors, each [1 x d_gen]
    std::string source_doc_id;
    std::string query_id;

    void check(size_t n, size_t d_gen) const {
        if (vectors.size() != n)
            throw TensorError("CompressedContext: expected " + std::to_string(n) +
                              " vectors, have " + std::to_string(vectors.size()));
        for (const Tensor& v : vectors) {
            if (v.ndim() != 2 || v.dim(0) != 1 || v.dim(1) != d_gen)
                throw TensorError("CompressedContext: vector width mismatch, got " +
                                  shape_str(v.shape()));
            v.check_finite("CompressedContext");
        }
    }
};

// Runs the selector over [prompt; <ENCODE>_p] and returns the p hidden
// vectors at the appended positions.
inline Tensor selector_forward(const Selector& sel, const std::vector<int>& prompt_tokens,
                               AttentionCapture* capture = nullptr) {
    const size_t t = prompt_tokens.size();
    if (t + sel.p > sel.backbone.config().max_seq_len)
        throw TensorError("selector prompt of " + std::to_string(t) + " tokens plus p=" +
                          std::to_string(sel.p) + " exceeds max_seq_len " +
                          std::to_string(sel.backbone.config().max_seq_len));
    Tensor x = concat_rows({sel.backbone.embed(prompt_tokens), sel.encode_embeddings});
    Tensor h = sel.backbone.forward_hidden(x, capture);
    return slice_rows(h, t, sel.p);
}

inline CompressedContext project_and_split(const Projector& proj, const Tensor& hidden) {
    if (hidden.ndim() != 2)
        throw TensorError("project_and_split: hidden must be [p x d_sel]");
    const size_t flat = hidden.dim(0) * hidden.dim(1);
    if (flat != proj.weight.dim(0))
        throw TensorError("project_and_split: hidden size " + std::to_string(flat) +
                          " does not match projector input width " +
                          std::to_string(proj.weight.dim(0)));
    Tensor out = add_rowvec(matmul(reshape(hidden, {1, flat}), proj.weight), proj.bias);
    Tensor pieces = reshape(out, {proj.n, proj.d_gen});
    CompressedContext ctx;
    for (size_t i = 0; i < proj.n; ++i) ctx.vectors.push_back(slice_rows(pieces, i, 1));
    return ctx;
}

// Embeds the generator prompt and replaces every <DOCUMENT> placeholder row
// with the context vectors, in document order. Exact substitution: no
// normalization or scaling is applied.
inline Tensor splice_embed(const Generator& gen, const std::vector<int>& gen_prompt_tokens,
                           const std::vector<CompressedContext>& contexts) {
    std::vector<size_t> slots;
    for (size_t i = 0; i < gen_prompt_tokens.size(); ++i)
        if (gen_prompt_tokens[i] == gen.document_placeholder_id) slots.push_back(i);
    size_t total = 0;
    for (const auto& c : contexts) total += c.vectors.size();
    if (slots.size() != total)
        throw TensorError("splice: prompt has " + std::to_string(slots.size()) +
                          " placeholders but contexts supply " + std::to_string(total) +
                          " vectors");
    Tensor base = gen.backbone.embed(gen_prompt_tokens);
    if (contexts.empty()) return base;
    const size_t d_gen = gen.backbone.config().d_model;
    std::vector<Tensor> rows;
    for (const auto& c : contexts) {
        c.check(c.vectors.size(), d_gen);
        for (const Tensor& v : c.vectors) rows.push_back(v);
    }
    return replace_rows(base, concat_rows(rows), slots);
}

inline std::vector<int> splice_and_generate(const Generator& gen,
                                            const std::vector<int>& gen_prompt_tokens,
                                            const std::vector<CompressedContext>& contexts,
                                            size_t max_new_tokens,
                                            AttentionCapture* capture = nullptr) {
    Tensor spliced = splice_embed(gen, gen_prompt_tokens, contexts);
    if (capture) gen.backbone.forward_hidden(spliced, capture);
    return gen.backbone.generate(spliced, max_new_tokens, Tokenizer::kEos);
}

// Query-free encoding Z = f_enc(D) used by the full-compression baseline and
// the diagnostics probes.
inline CompressedContext full_compression_encode(const Selector& sel, const Projector& proj,
                                                 const std::vector<int>& document_tokens) {
    return project_and_split(proj, selector_forward(sel, document_tokens));
}

// Normalized mean of the vocabulary embedding rows: the center of the
// anisotropy cone that token embeddings cluster around.
inline std::vector<float> mean_vocab_direction(const Decoder& model) {
    const Tensor& emb = model.embedding();
    const size_t v = emb.dim(0), d = emb.dim(1);
    std::vector<float> dir(d, 0.0f);
    for (size_t i = 0; i < v; ++i)
        for (size_t j = 0; j < d; ++j) dir[j] += emb.values()[i * d + j];
    double norm = 0.0;
    for (float x : dir) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
        for (float& x : dir) x = static_cast<float>(x / norm);
    return dir;
}

inline double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw TensorError("cosine_similarity: size mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Mean cosine between the n compressed vectors and a reference direction.
inline double context_cosine(const CompressedContext& ctx, const std::vector<float>& dir) {
    if (ctx.vectors.empty()) throw TensorError("context_cosine: empty context");
    double acc = 0.0;
    for (const Tensor& v : ctx.vectors) acc += cosine_similarity(v.values(), dir);
    return acc / static_cast<double>(ctx.vectors.size());
}

// ---------------------------------------------------------------------------
// Checkpointing: versioned binary container, bit-exact round trip.

namespace ckpt {

constexpr uint32_t kMagic = 0x53454C43;  // "SELC"
constexpr uint32_t kVersion = 1;

inline void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is) {
    std::string s(read_u64(is), '\0');
    is.read(s.data(), static_cast<std::streamsize>(s.size()));
    return s;
}

inline void save(const std::string& path, const std::map<std::string, std::string>& config,
                 const std::vector<std::pair<std::string, Tensor>>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw TensorError("cannot write checkpoint: " + path);
    uint32_t magic = kMagic, version = kVersion;
    os.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    write_u64(os, config.size());
    for (const auto& [k, v] : config) {
        write_str(os, k);
        write_str(os, v);
    }
    write_u64(os, params.size());
    for (const auto& [name, t] : params) {
        write_str(os, name);
        write_u64(os, t.ndim());
        for (size_t d : t.shape()) write_u64(os, d);
        os.write(reinterpret_cast<const char*>(t.values().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!os) throw TensorError("checkpoint write failed: " + path);
}

struct Loaded {
    std::map<std::string, std::string> config;
    std::vector<std::pair<std::string, Tensor>> params;
};

inline Loaded load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw TensorError("cannot read checkpoint: " + path);
    uint32_t magic = 0, version = 0;
    is.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    is.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (magic != kMagic) throw TensorError("bad checkpoint magic in " + path);
    if (version != kVersion)
        throw TensorError("unsupported checkpoint version " + std::to_string(version));
    Loaded out;
    const uint64_t n_cfg = read_u64(is);
    for (uint64_t i = 0; i < n_cfg; ++i) {
        std::string k = read_str(is);
        out.config[k] = read_str(is);
    }
    const uint64_t n_par = read_u64(is);
    for (uint64_t i = 0; i < n_par; ++i) {
        std::string name = read_str(is);
        Shape shape(read_u64(is));
        for (size_t& d : shape) d = read_u64(is);
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.values().data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
        out.params.emplace_back(std::move(name), std::move(t));
    }
    if (!is) throw TensorError("checkpoint read failed: " + path);
    return out;
}

}  // namespace ckpt

// The full trainable system plus the shared tokenizer.
struct System {
    Tokenizer tokenizer;
    Selector selector;
    Projector projector;
    Generator generator;

    System() = default;

    System(Tokenizer tk, const DecoderConfig& sel_cfg, const DecoderConfig& gen_cfg, size_t p,
           size_t n, uint32_t seed)
        : tokenizer(std::move(tk)) {
        std::mt19937 rng(seed);
        selector = Selector(sel_cfg, p, rng);
        projector = Projector(p, sel_cfg.d_model, n, gen_cfg.d_model, rng);
        generator = Generator(gen_cfg, rng);
    }

    std::vector<std::pair<std::string, Tensor>> parameters() {
        std::vector<std::pair<std::string, Tensor>> ps;
        for (auto& [name, t] : selector.backbone.parameters())
            ps.emplace_back("selector." + name, t);
        ps.emplace_back("selector.encode_embeddings", selector.encode_embeddings);
        ps.emplace_back("projector.weight", projector.weight);
        ps.emplace_back("projector.bias", projector.bias);
        for (auto& [name, t] : generator.backbone.parameters())
            ps.emplace_back("generator." + name, t);
        return ps;
    }

    void save(const std::string& ckpt_path, const std::string& vocab_path) {
        tokenizer.save(vocab_path);
        std::map<std::string, std::string> cfg;
        auto put_cfg = [&cfg](const std::string& pre, const DecoderConfig& c) {
            cfg[pre + "n_layers"] = std::to_string(c.n_layers);
            cfg[pre + "n_heads"] = std::to_string(c.n_heads);
            cfg[pre + "d_model"] = std::to_string(c.d_model);
            cfg[pre + "d_ff"] = std::to_string(c.d_ff);
            cfg[pre + "vocab_size"] = std::to_string(c.vocab_size);
            cfg[pre + "max_seq_len"] = std::to_string(c.max_seq_len);
        };
        put_cfg("selector.", selector.backbone.config());
        put_cfg("generator.", generator.backbone.config());
        cfg["p"] = std::to_string(selector.p);
        cfg["n"] = std::to_string(projector.n);
        ckpt::save(ckpt_path, cfg, parameters());
    }

    static System load(const std::string& ckpt_path, const std::string& vocab_path) {
        ckpt::Loaded data = ckpt::load(ckpt_path);
        auto get = [&data](const std::string& k) -> size_t {
            auto it = data.config.find(k);
            if (it == data.config.end())
                throw TensorError("checkpoint missing config key: " + k);
            return static_cast<size_t>(std::stoull(it->second));
        };
        auto get_cfg = [&get](const std::string& pre) {
            DecoderConfig c;
            c.n_layers = get(pre + "n_layers");
            c.n_heads = get(pre + "n_heads");
            c.d_model = get(pre + "d_model");
            c.d_ff = get(pre + "d_ff");
            c.vocab_size = get(pre + "vocab_size");
            c.max_seq_len = get(pre + "max_seq_len");
            return c;
        };
        System sys(Tokenizer::load(vocab_path), get_cfg("selector."), get_cfg("generator."),
                   get("p"), get("n"), /*seed=*/0);
        auto params = sys.parameters();
        if (params.size() != data.params.size())
            throw TensorError("checkpoint parameter count mismatch");
        for (size_t i = 0; i < params.size(); ++i) {
            auto& [name, dst] = params[i];
            auto& [saved_name, src] = data.params[i];
            if (name != saved_name || dst.shape() != src.shape())
                throw TensorError("checkpoint parameter mismatch at " + name);
            dst.values() = src.values();
        }
        return sys;
    }
};

}  // namespace selecom
