#pragma once

// Retrieval-augmented answering flow: JSONL corpus ingestion, BM25 index,
// prompt assembly for the selector and generator, and the end-to-end
// retrieve -> compress -> splice -> decode path with per-query tracing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "selecom/model.hpp"

namespace selecom {

struct Document {
    std::string id;
    std::string title;
    std::string content;
};

struct Corpus {
    std::vector<Document> documents;
    std::unordered_map<std::string, size_t> by_id;

    void add(Document doc) {
        if (by_id.count(doc.id)) throw TensorError("duplicate document id: " + doc.id);
        by_id[doc.id] = documents.size();
        documents.push_back(std::move(doc));
    }

    const Document& get(const std::string& id) const {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw TensorError("unknown document id: " + id);
        return documents[it->second];
    }

    static Corpus load_jsonl(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw TensorError("cannot read corpus file: " + path);
        Corpus c;
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            c.add({j.at("id").get<std::string>(), j.at("title").get<std::string>(),
                   j.at("content").get<std::string>()});
        }
        return c;
    }

    void save_jsonl(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw TensorError("cannot write corpus file: " + path);
        for (const auto& d : documents) {
            nlohmann::json j{{"id", d.id}, {"title", d.title}, {"content", d.content}};
            f << j.dump() << "\n";
        }
    }
};

// Inverted index with BM25 scoring (k1=1.2, b=0.75). Documents are scored
// over title + content; ties break by ascending document id.
class Index {
public:
    static Index build(const Corpus& corpus) {
        Index idx;
        idx.doc_ids_.reserve(corpus.documents.size());
        double total_len = 0.0;
        for (const auto& doc : corpus.documents) {
            const size_t di = idx.doc_ids_.size();
            idx.doc_ids_.push_back(doc.id);
            std::unordered_map<std::string, size_t> tf;
            size_t len = 0;
            for (const auto& term : Tokenizer::split(doc.title + " " + doc.content)) {
                ++tf[term];
                ++len;
            }
            idx.doc_len_.push_back(len);
            total_len += static_cast<double>(len);
            for (const auto& [term, count] : tf) idx.postings_[term].push_back({di, count});
        }
        idx.avg_len_ = idx.doc_len_.empty() ? 0.0 : total_len / idx.doc_len_.size();
        return idx;
    }

    size_t doc_count() const { return doc_ids_.size(); }
    size_t term_count() const { return postings_.size(); }
    bool has_term(const std::string& term) const { return postings_.count(term) > 0; }

    double score(const std::string& query, size_t doc_index) const {
        double s = 0.0;
        for (const auto& term : Tokenizer::split(query)) {
            auto it = postings_.find(term);
            if (it == postings_.end()) continue;
            size_t tf = 0;
            for (const auto& [di, count] : it->second)
                if (di == doc_index) tf = count;
            if (!tf) continue;
            s += idf(it->second.size()) * tf_term(tf, doc_len_[doc_index]);
        }
        return s;
    }

    struct TopK {
        std::vector<std::string> doc_ids;
        bool truncated = false;  // set when k exceeded the corpus size
    };

    TopK retrieve_topk(const std::string& query, size_t k) const {
        if (k < 1) throw TensorError("retrieve_topk: k must be >= 1");
        std::unordered_map<size_t, double> scores;
        for (const auto& term : Tokenizer::split(query)) {
            auto it = postings_.find(term);
            if (it == postings_.end()) continue;
            const double w = idf(it->second.size());
            for (const auto& [di, tf] : it->second)
                scores[di] += w * tf_term(tf, doc_len_[di]);
        }
        std::vector<std::pair<double, size_t>> ranked;
        ranked.reserve(scores.size());
        for (const auto& [di, s] : scores) ranked.push_back({s, di});
        std::sort(ranked.begin(), ranked.end(), [this](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return doc_ids_[a.second] < doc_ids_[b.second];
        });
        TopK out;
        out.truncated = k > doc_ids_.size();
        for (size_t i = 0; i < ranked.size() && i < k; ++i)
            out.doc_ids.push_back(doc_ids_[ranked[i].second]);
        return out;
    }

private:
    double tf_term(size_t tf, size_t dl) const {
        constexpr double k1 = 1.2, b = 0.75;
        const double norm = avg_len_ > 0.0 ? static_cast<double>(dl) / avg_len_ : 1.0;
        return (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm));
    }

    double idf(size_t df) const {
        const double n = static_cast<double>(doc_ids_.size());
        return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    }

    std::unordered_map<std::string, std::vector<std::pair<size_t, size_t>>> postings_;
    std::vector<std::string> doc_ids_;
    std::vector<size_t> doc_len_;
    double avg_len_ = 0.0;
};

// ---------------------------------------------------------------------------
// Prompt assembly (P_select and P_gen templates).

inline std::string render_select_prompt(const std::string& query, const std::string& document) {
    if (query.empty()) throw TensorError("assemble_select_prompt: empty query");
    return "### Document\n" + document + "\n### Question\n" + query +
           "\n### Instruction\nExtract the key information from the document that is helpful "
           "to answer the question.";
}

inline std::vector<int> assemble_select_prompt(const Tokenizer& tk, const std::string& query,
                                               const std::string& document, size_t p) {
    std::vector<int> ids = tk.encode(render_select_prompt(query, document));
    ids.insert(ids.end(), p, Tokenizer::kEncode);
    return ids;
}

inline std::string render_gen_prompt(const std::string& query, size_t doc_count, size_t n) {
    if (query.empty()) throw TensorError("assemble_gen_prompt: empty query");
    // One marker pair around the whole reference block: each retrieved
    // document contributes exactly its n slots, so top-k prefill grows by
    // n tokens per extra document.
    std::string refs = "<DOCUMENT_START>";
    for (size_t i = 0; i < doc_count * n; ++i) refs += "<DOCUMENT>";
    refs += "<DOCUMENT_END>\n";
    std::string out;
    if (doc_count > 0) out += "### Reference\n" + refs;
    out += "### Question\n" + query +
           "\n### Instruction\nAnswer the question according to the reference provided above."
           "\n### Restriction\n1. You must use English.\n2. You must DIRECTLY provide the "
           "answer in this STRICT format: <answer></answer>.\n3. You must not generate any "
           "other text.\n<answer>";
    return out;
}

inline std::vector<int> assemble_gen_prompt(const Tokenizer& tk, const std::string& query,
                                            size_t doc_count, size_t n) {
    return tk.encode(render_gen_prompt(query, doc_count, n));
}

// Instruction-probe prompts (§3.2-style): the reference is either n latent
// slots or literal document text, and the instruction asks the generator to
// ignore it and echo a target, or to reproduce the reference content.
inline std::string render_probe_reference(size_t n, const std::string& literal_text) {
    std::string refs = "<DOCUMENT_START>";
    if (literal_text.empty())
        for (size_t i = 0; i < n; ++i) refs += "<DOCUMENT>";
    else
        refs += " " + literal_text + " ";
    refs += "<DOCUMENT_END>";
    return "### Reference\n" + refs + "\n";
}

inline std::string render_ignore_probe_prompt(const std::string& target, size_t n,
                                              const std::string& literal_text = "") {
    return render_probe_reference(n, literal_text) +
           "### Instruction\nIgnore the reference and output exactly the following string: " +
           target + "\n<answer>";
}

inline std::string render_reconstruct_probe_prompt(size_t n,
                                                   const std::string& literal_text = "") {
    return render_probe_reference(n, literal_text) +
           "### Instruction\nRepeat the content of the reference.\n<answer>";
}

// Register every fixed template string with the tokenizer so prompt assembly
// never falls back to <unk> for template words.
inline void add_prompt_templates(Tokenizer& tk) {
    tk.add_text(render_select_prompt("q", "d"));
    tk.add_text(render_gen_prompt("q", 1, 1));
    tk.add_text(render_ignore_probe_prompt("t", 1));
    tk.add_text(render_reconstruct_probe_prompt(1));
}

// ---------------------------------------------------------------------------
// End-to-end answering.

inline double compression_rate(size_t document_token_count, size_t n) {
    if (!n) throw TensorError("compression_rate: n must be positive");
    return static_cast<double>(document_token_count) / static_cast<double>(n);
}

struct AnswerTrace {
    std::string query_id;
    std::vector<std::string> doc_ids;
    double retrieve_ms = 0.0;
    double compress_ms = 0.0;
    double generate_ms = 0.0;
    size_t document_tokens = 0;   // raw tokens across retrieved docs
    size_t compressed_len = 0;    // n * k latent vectors
    size_t prompt_tokens = 0;     // generator prompt length incl. placeholders
    size_t answer_tokens = 0;
    bool answer_wrapped = true;   // false when output lacked <answer></answer>

    nlohmann::json to_json() const {
        return {{"query_id", query_id},
                {"doc_ids", doc_ids},
                {"timings_ms",
                 {{"retrieve", retrieve_ms}, {"compress", compress_ms}, {"generate", generate_ms}}},
                {"token_counts",
                 {{"document", document_tokens},
                  {"compressed", compressed_len},
                  {"prompt", prompt_tokens},
                  {"answer", answer_tokens}}},
                {"answer_wrapped", answer_wrapped}};
    }
};

// Extracts the payload of <answer>...</answer>. If the wrapper is absent the
// raw text is returned and `wrapped` is cleared.
inline std::string extract_answer(const Tokenizer& tk, const std::vector<int>& ids,
                                  bool* wrapped = nullptr) {
    auto open = std::find(ids.begin(), ids.end(), Tokenizer::kAnswerOpen);
    auto close = std::find(ids.begin(), ids.end(), Tokenizer::kAnswerClose);
    if (wrapped) *wrapped = true;
    if (close != ids.end()) {
        auto begin = open == ids.end() || open > close ? ids.begin() : open + 1;
        return tk.decode(std::vector<int>(begin, close));
    }
    if (wrapped) *wrapped = false;
    return tk.decode(ids);
}

inline std::string answer(const std::string& query, size_t k, System& sys, const Corpus& corpus,
                          const Index& index, AnswerTrace* trace = nullptr,
                          size_t max_new_tokens = 16) {
    using clock = std::chrono::steady_clock;
    auto ms = [](clock::time_point a, clock::time_point b) {
        return std::chrono::duration<double, std::milli>(b - a).count();
    };
    AnswerTrace local;
    AnswerTrace& tr = trace ? *trace : local;

    auto t0 = clock::now();
    std::vector<std::string> doc_ids;
    if (k > 0) doc_ids = index.retrieve_topk(query, k).doc_ids;
    tr.doc_ids = doc_ids;
    auto t1 = clock::now();
    tr.retrieve_ms = ms(t0, t1);

    std::vector<CompressedContext> contexts;
    for (const auto& id : doc_ids) {
        const Document& doc = corpus.get(id);
        std::vector<int> sp = assemble_select_prompt(sys.tokenizer, query,
                                                     doc.title + " " + doc.content, sys.selector.p);
        tr.document_tokens += sys.tokenizer.encode(doc.title + " " + doc.content).size();
        CompressedContext ctx =
            project_and_split(sys.projector, selector_forward(sys.selector, sp));
        ctx.source_doc_id = id;
        contexts.push_back(std::move(ctx));
    }
    auto t2 = clock::now();
    tr.compress_ms = ms(t1, t2);

    std::vector<int> gp =
        assemble_gen_prompt(sys.tokenizer, query, doc_ids.size(), sys.projector.n);
    tr.prompt_tokens = gp.size();
    tr.compressed_len = doc_ids.size() * sys.projector.n;
    std::vector<int> out = splice_and_generate(sys.generator, gp, contexts, max_new_tokens);
    tr.answer_tokens = out.size();
    tr.generate_ms = ms(t2, clock::now());
    return extract_answer(sys.tokenizer, out, &tr.answer_wrapped);
}

inline void append_trace_jsonl(const std::string& path, const AnswerTrace& trace) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw TensorError("cannot write trace file: " + path);
    f << trace.to_json().dump() << "\n";
}

}  // namespace selecom
