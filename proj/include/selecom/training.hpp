#pragma once

// Training stages: generator pretraining on the synthetic corpus (language
// modeling plus answer-format splice reading), stage 1 (selector + projector
// against a frozen generator), stage 2 (generator adaptation), and the
// full-compression reconstruction baseline with its norm trace.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "selecom/datagen.hpp"
#include "selecom/model.hpp"
#include "selecom/optim.hpp"
#include "selecom/pipeline.hpp"

namespace selecom {

struct LossCurve {
    std::vector<std::pair<size_t, double>> points;  // (step, loss)

    void add(size_t step, double loss) { points.push_back({step, loss}); }
    double final_loss() const { return points.empty() ? 0.0 : points.back().second; }

    void save_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw TensorError("cannot write loss curve: " + path);
        f << "step,loss\n";
        for (const auto& [s, l] : points) f << s << "," << l << "\n";
    }
};

struct TrainSample {
    std::string query;
    std::string doc_id;
    std::string doc_text;          // title + content, selector input
    std::vector<int> answer_ids;   // tokenized answer payload
    int difficulty = 2;
};

inline TrainSample make_train_sample(const QASample& qa, const Corpus& corpus,
                                     const Tokenizer& tk) {
    const Document& d = corpus.get(qa.doc_id);
    return {qa.query, qa.doc_id, d.title + " " + d.content, tk.encode(qa.answer), qa.difficulty};
}

// ---------------------------------------------------------------------------
// Shared loss: next-token prediction restricted to answer positions.
// The sequence is [gen prompt (ends with <answer>)] ++ [answer </answer> <eos>];
// loss covers exactly the appended tail.

inline Tensor answer_loss(const Generator& gen, const std::vector<int>& gen_prompt,
                          const std::vector<CompressedContext>& contexts,
                          const std::vector<int>& answer_ids) {
    std::vector<int> full = gen_prompt;
    full.insert(full.end(), answer_ids.begin(), answer_ids.end());
    full.push_back(Tokenizer::kAnswerClose);
    full.push_back(Tokenizer::kEos);
    Tensor emb = splice_embed(gen, full, contexts);
    const size_t t = full.size();
    Tensor hidden = gen.backbone.forward_hidden(slice_rows(emb, 0, t - 1));
    Tensor logits = gen.backbone.logits(hidden);
    std::vector<int> targets(full.begin() + 1, full.end());
    std::vector<bool> mask(t - 1);
    for (size_t j = 0; j < t - 1; ++j) mask[j] = (j + 1 >= gen_prompt.size());
    return nll_loss(logits, targets, mask);
}

// Plain language-modeling loss over a token sequence.
inline Tensor lm_loss(const Decoder& model, const std::vector<int>& ids) {
    if (ids.size() < 2) throw TensorError("lm_loss: sequence too short");
    std::vector<int> input(ids.begin(), ids.end() - 1);
    Tensor logits = model.forward_logits(input);
    std::vector<int> targets(ids.begin() + 1, ids.end());
    return nll_loss(logits, targets, std::vector<bool>(targets.size(), true));
}

namespace detail_train {

inline void write_abort_dump(const std::string& stage, size_t step, const std::string& detail) {
    std::ofstream(stage + "_abort.json")
        << nlohmann::json{{"stage", stage}, {"step", step}, {"detail", detail}}.dump(2) << "\n";
}

// Runs one batch worth of loss computation. A non-finite loss or any tensor
// error (e.g. non-finite logits) aborts the stage with a diagnostic dump.
template <typename F>
double guarded_batch(F&& compute, size_t step, const std::string& stage) {
    double loss;
    try {
        loss = compute();
    } catch (const TensorError& e) {
        write_abort_dump(stage, step, e.what());
        throw;
    }
    if (!std::isfinite(loss)) {
        write_abort_dump(stage, step, "non-finite loss");
        throw TensorError(stage + ": non-finite loss at step " + std::to_string(step));
    }
    return loss;
}

inline std::vector<Tensor> trainable_only(std::vector<std::pair<std::string, Tensor>> params) {
    std::vector<Tensor> out;
    for (auto& [name, t] : params)
        if (t.requires_grad()) out.push_back(t);
    return out;
}

}  // namespace detail_train

// ---------------------------------------------------------------------------
// Curriculum: emit difficulty buckets in schedule order, shuffled within each
// bucket by the seed.

inline std::vector<TrainSample> curriculum_order(const std::vector<TrainSample>& samples,
                                                 const std::vector<int>& schedule, uint32_t seed) {
    std::vector<TrainSample> out;
    for (int bucket : schedule) {
        std::vector<TrainSample> group;
        for (const auto& s : samples)
            if (s.difficulty == bucket) group.push_back(s);
        std::mt19937 rng(seed + static_cast<uint32_t>(bucket));
        std::shuffle(group.begin(), group.end(), rng);
        out.insert(out.end(), group.begin(), group.end());
    }
    return out;
}

inline std::vector<TrainSample> shuffled_order(const std::vector<TrainSample>& samples,
                                               uint32_t seed) {
    std::vector<TrainSample> out = samples;
    std::mt19937 rng(seed);
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

// ---------------------------------------------------------------------------
// Generator pretraining. Two-part mixture: language modeling over corpus
// sentences teaches fluency; answer-format samples with the answer's literal
// embeddings spliced into the reference slots teach the generator to read
// content out of the placeholder positions — the ability stage 1 relies on
// while the generator is frozen.

struct PretrainConfig {
    float lr = 1e-3f;
    size_t epochs = 1;
    size_t batch_size = 8;
    uint32_t seed = 1;
    bool echo_tasks = true;      // mix in ignore-and-echo instruction samples
    bool echo_slot_refs = true;  // echo tasks alternate slot references in;
                                 // off = literal-text references only
    bool reconstruct_tasks = true;  // mix in repeat-the-reference samples with
                                    // literal document text
};

// Builds a context whose n slots hold the vocabulary embeddings of the first
// answer tokens (repeating the last one when the answer is shorter than n).
inline CompressedContext literal_context(const Generator& gen, const std::vector<int>& answer_ids,
                                         size_t n) {
    if (answer_ids.empty()) throw TensorError("literal_context: empty answer");
    CompressedContext ctx;
    for (size_t i = 0; i < n; ++i) {
        const int id = answer_ids[std::min(i, answer_ids.size() - 1)];
        ctx.vectors.push_back(gen.backbone.embed({id}));
    }
    return ctx;
}

inline LossCurve pretrain_generator(System& sys, const std::vector<TrainSample>& samples,
                                    const std::vector<std::string>& lm_texts,
                                    const PretrainConfig& cfg) {
    Generator& gen = sys.generator;
    gen.backbone.set_trainable(true);
    Adam opt(detail_train::trainable_only(gen.backbone.parameters()), {cfg.lr});
    std::mt19937 rng(cfg.seed);
    LossCurve curve;
    size_t step = 0;
    const size_t n = sys.projector.n;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<TrainSample> order = shuffled_order(samples, cfg.seed + epoch);
        for (size_t i = 0; i < order.size(); i += cfg.batch_size) {
            opt.zero_grad();
            size_t count = 0;
            double batch_loss = detail_train::guarded_batch(
                [&] {
                    double acc = 0.0;
                    for (size_t b = i; b < std::min(i + cfg.batch_size, order.size());
                         ++b, ++count) {
                        const TrainSample& s = order[b];
                        std::vector<int> prompt = assemble_gen_prompt(sys.tokenizer, s.query, 1, n);
                        Tensor total = answer_loss(gen, prompt,
                                                   {literal_context(gen, s.answer_ids, n)},
                                                   s.answer_ids);
                        if (cfg.echo_tasks) {
                            // echo targets of varying length, borrowed from other
                            // samples' answers; alternate literal-text and
                            // latent-slot references
                            const TrainSample& o1 = order[rng() % order.size()];
                            const TrainSample& o2 = order[rng() % order.size()];
                            std::vector<int> target_ids = o1.answer_ids;
                            if (rng() % 2) {
                                target_ids.insert(target_ids.end(), o2.answer_ids.begin(),
                                                  o2.answer_ids.end());
                            }
                            const std::string target = sys.tokenizer.decode(target_ids);
                            Tensor echo;
                            if (b % 2 == 0 || !cfg.echo_slot_refs) {
                                std::vector<int> ep = sys.tokenizer.encode(
                                    render_ignore_probe_prompt(target, n, s.doc_text));
                                echo = answer_loss(gen, ep, {}, target_ids);
                            } else {
                                std::vector<int> ep = sys.tokenizer.encode(
                                    render_ignore_probe_prompt(target, n));
                                echo = answer_loss(gen, ep,
                                                   {literal_context(gen, s.answer_ids, n)},
                                                   target_ids);
                            }
                            total = add(total, echo);
                        }
                        if (cfg.reconstruct_tasks && b % 4 == 0) {
                            // repeat-the-reference with literal document text,
                            // the frozen-generator pathway the reconstruction
                            // baseline later drives through its slots
                            std::vector<int> rp = sys.tokenizer.encode(
                                render_reconstruct_probe_prompt(n, s.doc_text));
                            total = add(total,
                                        answer_loss(gen, rp, {}, sys.tokenizer.encode(s.doc_text)));
                        }
                        if (!lm_texts.empty()) {
                            std::vector<int> ids =
                                sys.tokenizer.encode(lm_texts[rng() % lm_texts.size()]);
                            if (ids.size() >= 2)
                                total = add(total, scale(lm_loss(gen.backbone, ids), 0.3f));
                        }
                        total.backward();
                        acc += total.scalar();
                    }
                    return acc / static_cast<double>(count);
                },
                step, "pretrain");
            opt.scale_grads(1.0f / static_cast<float>(count));
            opt.clip_global_norm(1.0f);
            opt.step();
            curve.add(step++, batch_loss);
        }
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Stage 1: selector + projector against a frozen generator.

struct Stage1Config {
    float lr = 3e-4f;
    size_t batch_size = 16;
    size_t epochs = 1;
    std::vector<int> curriculum{2, 3, 4};
    bool shuffled_ablation = false;  // ignore curriculum; plain shuffle
    uint32_t seed = 1;
};

inline CompressedContext compress_for(System& sys, const std::string& query,
                                      const std::string& doc_text) {
    std::vector<int> sp = assemble_select_prompt(sys.tokenizer, query, doc_text, sys.selector.p);
    return project_and_split(sys.projector, selector_forward(sys.selector, sp));
}

inline LossCurve train_stage1(System& sys, const std::vector<TrainSample>& samples,
                              const Stage1Config& cfg) {
    sys.generator.backbone.set_trainable(false);
    sys.selector.backbone.set_trainable(true);
    sys.selector.encode_embeddings.set_requires_grad(true);
    sys.projector.weight.set_requires_grad(true);
    sys.projector.bias.set_requires_grad(true);

    std::vector<Tensor> trainable =
        detail_train::trainable_only(sys.selector.backbone.parameters());
    trainable.push_back(sys.selector.encode_embeddings);
    trainable.push_back(sys.projector.weight);
    trainable.push_back(sys.projector.bias);
    Adam opt(trainable, {cfg.lr});

    LossCurve curve;
    size_t step = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<TrainSample> order =
            cfg.shuffled_ablation ? shuffled_order(samples, cfg.seed + epoch)
                                  : curriculum_order(samples, cfg.curriculum, cfg.seed + epoch);
        for (size_t i = 0; i < order.size(); i += cfg.batch_size) {
            opt.zero_grad();
            size_t count = 0;
            double batch_loss = detail_train::guarded_batch(
                [&] {
                    double acc = 0.0;
                    for (size_t b = i; b < std::min(i + cfg.batch_size, order.size());
                         ++b, ++count) {
                        const TrainSample& s = order[b];
                        std::vector<int> prompt =
                            assemble_gen_prompt(sys.tokenizer, s.query, 1, sys.projector.n);
                        Tensor loss =
                            answer_loss(sys.generator, prompt,
                                        {compress_for(sys, s.query, s.doc_text)}, s.answer_ids);
                        loss.backward();
                        acc += loss.scalar();
                    }
                    return acc / static_cast<double>(count);
                },
                step, "stage1");
            opt.scale_grads(1.0f / static_cast<float>(count));
            opt.clip_global_norm(1.0f);
            opt.step();
            curve.add(step++, batch_loss);
        }
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Stage 2: generator adaptation on top of the stage-1 selector.

struct Stage2Config {
    float lr = 1e-4f;
    size_t batch_size = 16;
    size_t epochs = 1;
    bool freeze_selector = true;  // false = "stage2 (selector tuned)" ablation arm
    uint32_t seed = 1;
};

inline LossCurve train_stage2(System& sys, const std::vector<TrainSample>& samples,
                              const Stage2Config& cfg) {
    sys.generator.backbone.set_trainable(true);
    sys.selector.backbone.set_trainable(!cfg.freeze_selector);
    sys.selector.encode_embeddings.set_requires_grad(!cfg.freeze_selector);
    sys.projector.weight.set_requires_grad(!cfg.freeze_selector);
    sys.projector.bias.set_requires_grad(!cfg.freeze_selector);

    std::vector<Tensor> trainable = detail_train::trainable_only(sys.parameters());
    Adam opt(trainable, {cfg.lr});

    LossCurve curve;
    size_t step = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<TrainSample> order = shuffled_order(samples, cfg.seed + epoch);
        for (size_t i = 0; i < order.size(); i += cfg.batch_size) {
            opt.zero_grad();
            size_t count = 0;
            double batch_loss = detail_train::guarded_batch(
                [&] {
                    double acc = 0.0;
                    for (size_t b = i; b < std::min(i + cfg.batch_size, order.size());
                         ++b, ++count) {
                        const TrainSample& s = order[b];
                        std::vector<int> prompt =
                            assemble_gen_prompt(sys.tokenizer, s.query, 1, sys.projector.n);
                        Tensor loss =
                            answer_loss(sys.generator, prompt,
                                        {compress_for(sys, s.query, s.doc_text)}, s.answer_ids);
                        loss.backward();
                        acc += loss.scalar();
                    }
                    return acc / static_cast<double>(count);
                },
                step, "stage2");
            opt.scale_grads(1.0f / static_cast<float>(count));
            opt.clip_global_norm(1.0f);
            opt.step();
            curve.add(step++, batch_loss);
        }
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Full-compression baseline: query-free encoding trained to reconstruct the
// document through a frozen generator.

struct FullCompConfig {
    float lr = 3e-4f;
    size_t batch_size = 8;
    size_t epochs = 1;
    size_t norm_trace_every = 1;
    uint32_t seed = 1;
};

struct NormTrace {
    std::vector<size_t> steps;
    std::vector<double> z_norms;  // mean L2 norm of Z over the fixed probe set
    std::vector<double> cosines;  // mean cosine(Z, v-bar) over the probe set
    std::vector<double> losses;

    void save_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw TensorError("cannot write norm trace: " + path);
        f << "step,z_norm,cosine,loss\n";
        for (size_t i = 0; i < steps.size(); ++i)
            f << steps[i] << "," << z_norms[i] << "," << cosines[i] << "," << losses[i] << "\n";
    }
};

inline double context_norm(const CompressedContext& ctx) {
    double acc = 0.0;
    size_t count = 0;
    for (const Tensor& v : ctx.vectors) {
        for (float x : v.values()) acc += static_cast<double>(x) * x;
        count += v.size();
    }
    return std::sqrt(acc);
}

// Reconstruction training uses the reconstruct-probe prompt, so the probe in
// diagnostics exercises exactly the trained format; the target is the
// document token sequence.
inline Tensor reconstruction_loss(const Generator& gen, const Tokenizer& tk,
                                  const CompressedContext& ctx,
                                  const std::vector<int>& doc_ids, size_t n) {
    std::vector<int> prompt = tk.encode(render_reconstruct_probe_prompt(n));
    std::vector<int> full = prompt;
    full.insert(full.end(), doc_ids.begin(), doc_ids.end());
    full.push_back(Tokenizer::kAnswerClose);
    full.push_back(Tokenizer::kEos);
    Tensor emb = splice_embed(gen, full, {ctx});
    const size_t t = full.size();
    Tensor logits = gen.backbone.logits(gen.backbone.forward_hidden(slice_rows(emb, 0, t - 1)));
    std::vector<int> targets(full.begin() + 1, full.end());
    std::vector<bool> mask(t - 1);
    for (size_t j = 0; j < t - 1; ++j) mask[j] = (j + 1 >= prompt.size());
    return nll_loss(logits, targets, mask);
}

inline NormTrace train_full_compression_baseline(System& sys,
                                                 const std::vector<std::string>& doc_texts,
                                                 const FullCompConfig& cfg,
                                                 LossCurve* curve = nullptr) {
    sys.generator.backbone.set_trainable(false);
    sys.selector.backbone.set_trainable(true);
    sys.selector.encode_embeddings.set_requires_grad(true);
    sys.projector.weight.set_requires_grad(true);
    sys.projector.bias.set_requires_grad(true);

    std::vector<Tensor> trainable =
        detail_train::trainable_only(sys.selector.backbone.parameters());
    trainable.push_back(sys.selector.encode_embeddings);
    trainable.push_back(sys.projector.weight);
    trainable.push_back(sys.projector.bias);
    Adam opt(trainable, {cfg.lr});

    std::vector<std::vector<int>> docs;
    for (const auto& text : doc_texts) docs.push_back(sys.tokenizer.encode(text));

    // ‖Z‖ is traced on a fixed probe set so the trace reflects parameter
    // drift, not batch composition.
    const size_t probe_count = std::min<size_t>(docs.size(), 8);
    const std::vector<float> vbar = mean_vocab_direction(sys.generator.backbone);
    auto probe_stats = [&]() {
        double norm_acc = 0.0, cos_acc = 0.0;
        for (size_t i = 0; i < probe_count; ++i) {
            CompressedContext z = full_compression_encode(sys.selector, sys.projector, docs[i]);
            norm_acc += context_norm(z);
            cos_acc += context_cosine(z, vbar);
        }
        return std::pair<double, double>{norm_acc / static_cast<double>(probe_count),
                                         cos_acc / static_cast<double>(probe_count)};
    };

    NormTrace trace;
    size_t step = 0;
    std::mt19937 rng(cfg.seed);
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(docs.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t i = 0; i < order.size(); i += cfg.batch_size) {
            opt.zero_grad();
            size_t count = 0;
            double batch_loss = detail_train::guarded_batch(
                [&] {
                    double acc = 0.0;
                    for (size_t b = i; b < std::min(i + cfg.batch_size, order.size());
                         ++b, ++count) {
                        const std::vector<int>& doc = docs[order[b]];
                        CompressedContext z =
                            full_compression_encode(sys.selector, sys.projector, doc);
                        Tensor loss = reconstruction_loss(sys.generator, sys.tokenizer, z, doc,
                                                          sys.projector.n);
                        loss.backward();
                        acc += loss.scalar();
                    }
                    return acc / static_cast<double>(count);
                },
                step, "fullcomp");
            opt.scale_grads(1.0f / static_cast<float>(count));
            opt.clip_global_norm(1.0f);
            opt.step();
            if (step % cfg.norm_trace_every == 0) {
                auto [zn, zc] = probe_stats();
                trace.steps.push_back(step);
                trace.z_norms.push_back(zn);
                trace.cosines.push_back(zc);
                trace.losses.push_back(batch_loss);
            }
            if (curve) curve->add(step, batch_loss);
            ++step;
        }
    }
    return trace;
}

}  // namespace selecom
