#pragma once

// Data-construction pipeline: length -> content -> quality filters, QA
// generation from easy/hard templates, QA correctness/difficulty filtering,
// and difficulty buckets. All judge-dependent stages speak the strict
// bracketed output formats through a pluggable JudgeClient; the deterministic
// rule judge makes the whole pipeline testable offline, and an HTTP client
// covers real-LLM runs.

#include <algorithm>
#include <fstream>
#include <numeric>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "selecom/pipeline.hpp"
#include "selecom/tokenizer.hpp"

namespace selecom {

struct RawDocument {
    std::string id;
    std::string title;
    std::string content;
    size_t token_count = 0;
};

struct QASample {
    std::string query;
    std::string doc_id;
    std::string answer;
    int difficulty = 0;  // assigned by filter_and_bucket; valid values 2-4
    std::string origin;  // "easy-template" or "hard-template"

    nlohmann::json to_json() const {
        return {{"query", query},
                {"doc_id", doc_id},
                {"answer", answer},
                {"difficulty", difficulty},
                {"origin", origin}};
    }

    static QASample from_json(const nlohmann::json& j) {
        return {j.at("query"), j.at("doc_id"), j.at("answer"), j.at("difficulty"), j.at("origin")};
    }
};

class JudgeClient {
public:
    virtual ~JudgeClient() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

// ---------------------------------------------------------------------------
// Prompt templates (document filtering, QA generation, QA filtering).

inline std::string content_filter_prompt(const std::string& document) {
    return "### Instruction\nYou will be given a document. Verify if the document is a piece "
           "of human-readable plain text.\n### Document\n" + document +
           "\n### Criteria\nALL PART of the document must look like a piece of descriptive "
           "text. If it seems to be a piece of code, table, figure or other non-descriptive "
           "elements, it is considered of BAD quality. You must be a strict judge and consider "
           "a text as BAD at any opportunity.\n### Restriction\n1. You must generate your "
           "judgement in this STRICT format: <document></document>\n2. You must not generate "
           "any other text.";
}

inline std::string quality_score_prompt(const std::string& document) {
    return "### Instruction\nYou will be given a document. Evaluate the amount of information "
           "contained by the document.\n### Document\n" + document +
           "\n### Criteria\nYou will score the amount of information of the document as an "
           "integer in 1,2,3,4,5,6,7,8,9,10.\n### Format restriction\n1. You must generate "
           "your evaluation in this STRICT format: <response></response>\n2. You must not "
           "generate any other text.";
}

inline std::string qa_generation_prompt(const std::string& document, bool hard) {
    const char* easy_instr =
        "Ask a question about one single fact mentioned in the above document, and provide "
        "its answer. The answer should be short, concise and factual (1-10 words typically) "
        "and correctly answers the question.";
    const char* hard_instr =
        "Ask a challenging, real-world question about one single fact that can be inferred "
        "from the above document and provide its answer. The question should require "
        "reasoning, inference, or common sense beyond just looking up facts directly from "
        "the text. The question should never ask for more than one fact. The answer should "
        "be short, concise and factual (1-10 words typically) and correctly answers the "
        "question. Avoid questions that can be answered by simply copying text from the "
        "document.";
    return "### Document\n" + document + "\n### Instruction\n" +
           (hard ? hard_instr : easy_instr) +
           "\n### Restriction\n1. You must use English.\n2. You must generate the question "
           "and its answer in this STRICT format: <question></question><answer></answer>.\n"
           "3. You must not generate any other text.";
}

inline std::string qa_filter_prompt(const std::string& document, const std::string& question,
                                    const std::string& answer) {
    return "### Instruction\nYou will be given a document, a question on this document, and "
           "an answer to this question. Judge the correctness of the answer, then evaluate "
           "the difficulty of the question to be correctly answered given the document "
           "content.\n### Document\n" + document + "\n### Question\n" + question +
           "\n### Answer\n" + answer +
           "\n### Criteria\n- Judge the answer by if it is correct to answer the question.\n"
           "If correct, CORRECT. If wrong, WRONG.\n- Then score the difficulty of the "
           "question to be correctly answered given the document as an integer in 1,2,3,4,5."
           "\n### Format restriction\n1. You must generate your response in this STRICT "
           "format: <correctness></correctness><difficulty></difficulty>.\n2. You must not "
           "generate any other text.";
}

// Extracts the payload of <tag>...</tag>; nullopt when the wrapper is absent.
inline std::optional<std::string> extract_tag(const std::string& text, const std::string& tag) {
    const std::string open = "<" + tag + ">", close = "</" + tag + ">";
    const size_t a = text.find(open);
    if (a == std::string::npos) return std::nullopt;
    const size_t b = text.find(close, a + open.size());
    if (b == std::string::npos) return std::nullopt;
    return text.substr(a + open.size(), b - a - open.size());
}

// ---------------------------------------------------------------------------
// Deterministic rule judge over the synthetic corpus. Facts have the shape
// "key kN is <value>", so every judgement is a string computation.

namespace rules {

inline std::string extract_document(const std::string& prompt) {
    const std::string marker = "### Document\n";
    const size_t a = prompt.find(marker);
    if (a == std::string::npos) return "";
    const size_t start = a + marker.size();
    const size_t b = prompt.find("\n### ", start);
    return prompt.substr(start, b == std::string::npos ? std::string::npos : b - start);
}

inline std::string extract_section(const std::string& prompt, const std::string& name) {
    const std::string marker = "### " + name + "\n";
    const size_t a = prompt.find(marker);
    if (a == std::string::npos) return "";
    const size_t start = a + marker.size();
    const size_t b = prompt.find("\n### ", start);
    return prompt.substr(start, b == std::string::npos ? std::string::npos : b - start);
}

inline bool looks_markup(const std::string& doc) {
    return doc.find('|') != std::string::npos || doc.find('{') != std::string::npos ||
           doc.find("</") != std::string::npos;
}

// Sheet identifier ("record sheet 7" -> "7"), empty if the document has none.
inline std::string sheet_of(const std::string& doc) {
    static const std::regex sheet_re(R"(record sheet (\d+))");
    std::smatch m;
    return std::regex_search(doc, m, sheet_re) ? m[1].str() : "";
}

inline std::vector<std::pair<std::string, std::string>> facts_in(const std::string& doc) {
    static const std::regex fact_re(R"(key (k\d+) is (\w+))");
    std::vector<std::pair<std::string, std::string>> out;
    for (auto it = std::sregex_iterator(doc.begin(), doc.end(), fact_re);
         it != std::sregex_iterator(); ++it)
        out.push_back({(*it)[1].str(), (*it)[2].str()});
    return out;
}

}  // namespace rules

class RuleJudge : public JudgeClient {
public:
    std::string complete(const std::string& prompt) override {
        const std::string doc = rules::extract_document(prompt);
        if (prompt.find("human-readable plain text") != std::string::npos)
            return rules::looks_markup(doc) ? "<document>BAD</document>"
                                            : "<document>GOOD</document>";
        if (prompt.find("Evaluate the amount of information") != std::string::npos) {
            const size_t facts = rules::facts_in(doc).size();
            const int score = std::clamp(static_cast<int>(2 * facts), 1, 10);
            return "<response>" + std::to_string(score) + "</response>";
        }
        if (prompt.find("Ask a challenging") != std::string::npos) return hard_qa(doc);
        if (prompt.find("Ask a question about one single fact") != std::string::npos)
            return easy_qa(doc);
        if (prompt.find("Judge the correctness of the answer") != std::string::npos)
            return filter_verdict(prompt, doc);
        return "";
    }

private:
    // Key names repeat across sheets, so questions name the sheet to stay
    // answerable from that one document.
    static std::string in_sheet(const std::string& doc) {
        const std::string sheet = rules::sheet_of(doc);
        return sheet.empty() ? "" : " in record sheet " + sheet;
    }

    static std::string easy_qa(const std::string& doc) {
        auto facts = rules::facts_in(doc);
        if (facts.empty()) return "";
        return "<question>What is the value of " + facts[0].first + in_sheet(doc) +
               "?</question><answer>" + facts[0].second + "</answer>";
    }

    // Inverse lookup: names a value and asks for its key, so the question
    // is not answerable by copying the fact sentence verbatim.
    static std::string hard_qa(const std::string& doc) {
        auto facts = rules::facts_in(doc);
        if (facts.size() < 2) return "";
        return "<question>Which key holds the value " + facts.back().second + in_sheet(doc) +
               "?</question><answer>" + facts.back().first + "</answer>";
    }

    static std::string filter_verdict(const std::string& prompt, const std::string& doc) {
        const std::string question = rules::extract_section(prompt, "Question");
        const std::string answer = rules::extract_section(prompt, "Answer");
        auto facts = rules::facts_in(doc);
        bool correct = false;
        for (const auto& [key, value] : facts) {
            if (question.find("value of " + key) != std::string::npos && answer == value)
                correct = true;
            if (question.find("the value " + value) != std::string::npos && answer == key)
                correct = true;
        }
        int difficulty;
        if (question.find("What is the value") != std::string::npos)
            difficulty = facts.size() <= 1 ? 1 : 2;  // single-fact lookups are trivial
        else if (facts.size() >= 6)
            difficulty = 5;  // inverse lookup over many facts: too hard to keep
        else
            difficulty = facts.size() >= 4 ? 4 : 3;
        return std::string("<correctness>") + (correct ? "CORRECT" : "WRONG") +
               "</correctness><difficulty>" + std::to_string(difficulty) + "</difficulty>";
    }
};

// Generic HTTP text-completion judge: POST {prompt} -> {text}.
// Declared here; defined in datagen_http.hpp to keep httplib out of
// translation units that never use the remote mode.
struct HttpJudgeConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string path = "/complete";
    int timeout_sec = 30;
    int retries = 1;
};

// ---------------------------------------------------------------------------
// Pipeline stages.

struct QuarantineRecord {
    std::string doc_id;
    std::string stage;
    std::string raw_output;
};

struct DatagenReport {
    size_t input_docs = 0;
    size_t after_length = 0;
    size_t after_content = 0;
    size_t after_quality = 0;
    size_t candidates = 0;
    size_t kept_samples = 0;
    std::vector<QuarantineRecord> quarantined;

    nlohmann::json to_json() const {
        nlohmann::json q = nlohmann::json::array();
        for (const auto& r : quarantined)
            q.push_back({{"doc_id", r.doc_id}, {"stage", r.stage}, {"raw_output", r.raw_output}});
        return {{"input_docs", input_docs},       {"after_length", after_length},
                {"after_content", after_content}, {"after_quality", after_quality},
                {"candidates", candidates},       {"kept_samples", kept_samples},
                {"quarantined", q}};
    }
};

inline std::vector<RawDocument> length_filter(const std::vector<RawDocument>& docs,
                                              size_t min_tokens, size_t max_tokens) {
    std::vector<RawDocument> kept;
    for (const auto& d : docs)
        if (d.token_count >= min_tokens && d.token_count <= max_tokens) kept.push_back(d);
    return kept;
}

// Asks the judge once, retries once on a malformed verdict, then quarantines.
template <typename Parse>
std::optional<std::string> judged_with_retry(JudgeClient& judge, const std::string& prompt,
                                             const Parse& parse, const std::string& doc_id,
                                             const std::string& stage, DatagenReport* report) {
    for (int attempt = 0; attempt < 2; ++attempt) {
        const std::string raw = judge.complete(prompt);
        std::optional<std::string> v = parse(raw);
        if (v) return v;
        if (attempt == 1 && report)
            report->quarantined.push_back({doc_id, stage, raw});
    }
    return std::nullopt;
}

inline std::vector<RawDocument> content_filter(const std::vector<RawDocument>& docs,
                                               JudgeClient& judge,
                                               DatagenReport* report = nullptr) {
    std::vector<RawDocument> kept;
    for (const auto& d : docs) {
        auto verdict = judged_with_retry(
            judge, content_filter_prompt(d.content),
            [](const std::string& raw) -> std::optional<std::string> {
                auto v = extract_tag(raw, "document");
                if (v && (*v == "GOOD" || *v == "BAD")) return v;
                return std::nullopt;
            },
            d.id, "content_filter", report);
        if (verdict && *verdict == "GOOD") kept.push_back(d);
    }
    return kept;
}

struct ScoredDocument {
    RawDocument doc;
    int score = 0;
};

struct QualityResult {
    std::vector<ScoredDocument> scored;
    std::vector<RawDocument> kept;  // score >= threshold
};

inline QualityResult quality_score(const std::vector<RawDocument>& docs, JudgeClient& judge,
                                   int threshold = 6, DatagenReport* report = nullptr) {
    QualityResult out;
    for (const auto& d : docs) {
        auto verdict = judged_with_retry(
            judge, quality_score_prompt(d.content),
            [](const std::string& raw) -> std::optional<std::string> {
                auto v = extract_tag(raw, "response");
                if (!v) return std::nullopt;
                try {
                    const int s = std::stoi(*v);
                    if (s >= 1 && s <= 10 && std::to_string(s) == *v) return v;
                } catch (const std::exception&) {
                }
                return std::nullopt;
            },
            d.id, "quality_score", report);
        if (!verdict) continue;
        const int score = std::stoi(*verdict);
        out.scored.push_back({d, score});
        if (score >= threshold) out.kept.push_back(d);
    }
    return out;
}

inline std::optional<QASample> generate_qa(const RawDocument& doc, JudgeClient& judge, bool hard,
                                           DatagenReport* report = nullptr) {
    if (doc.content.empty()) return std::nullopt;
    auto parsed = judged_with_retry(
        judge, qa_generation_prompt(doc.content, hard),
        [](const std::string& raw) -> std::optional<std::string> {
            auto q = extract_tag(raw, "question");
            auto a = extract_tag(raw, "answer");
            if (q && a && !q->empty() && !a->empty()) return raw;
            return std::nullopt;
        },
        doc.id, "generate_qa", report);
    if (!parsed) return std::nullopt;
    QASample s;
    s.query = *extract_tag(*parsed, "question");
    s.answer = *extract_tag(*parsed, "answer");
    s.doc_id = doc.id;
    s.origin = hard ? "hard-template" : "easy-template";
    return s;
}

struct Buckets {
    std::map<int, std::vector<QASample>> by_difficulty;  // keys 2, 3, 4

    size_t total() const {
        size_t n = 0;
        for (const auto& [d, v] : by_difficulty) n += v.size();
        return n;
    }
};

inline Buckets filter_and_bucket(const std::vector<QASample>& samples,
                                 const std::map<std::string, RawDocument>& docs_by_id,
                                 JudgeClient& judge, DatagenReport* report = nullptr) {
    Buckets out;
    out.by_difficulty[2] = {};
    out.by_difficulty[3] = {};
    out.by_difficulty[4] = {};
    for (const auto& s : samples) {
        auto doc_it = docs_by_id.find(s.doc_id);
        if (doc_it == docs_by_id.end())
            throw TensorError("filter_and_bucket: unknown doc id " + s.doc_id);
        auto verdict = judged_with_retry(
            judge, qa_filter_prompt(doc_it->second.content, s.query, s.answer),
            [](const std::string& raw) -> std::optional<std::string> {
                auto c = extract_tag(raw, "correctness");
                auto d = extract_tag(raw, "difficulty");
                if (!c || !d || (*c != "CORRECT" && *c != "WRONG")) return std::nullopt;
                if (d->size() != 1 || (*d)[0] < '1' || (*d)[0] > '5') return std::nullopt;
                return raw;
            },
            s.doc_id, "filter_and_bucket", report);
        if (!verdict) continue;
        if (*extract_tag(*verdict, "correctness") == "WRONG") continue;
        const int difficulty = std::stoi(*extract_tag(*verdict, "difficulty"));
        if (difficulty < 2 || difficulty > 4) continue;  // too easy / too hard
        QASample kept = s;
        kept.difficulty = difficulty;
        out.by_difficulty[difficulty].push_back(std::move(kept));
    }
    // deterministic collector order: doc id, then query text
    for (auto& [d, v] : out.by_difficulty)
        std::sort(v.begin(), v.end(), [](const QASample& a, const QASample& b) {
            if (a.doc_id != b.doc_id) return a.doc_id < b.doc_id;
            return a.query < b.query;
        });
    if (report) report->kept_samples = out.total();
    return out;
}

inline void write_bucket_files(const Buckets& buckets, const std::string& dir) {
    for (const auto& [difficulty, samples] : buckets.by_difficulty) {
        const std::string path = dir + "/bucket_" + std::to_string(difficulty) + ".jsonl";
        std::ofstream f(path);
        if (!f) throw TensorError("cannot write bucket file: " + path);
        for (const auto& s : samples) f << s.to_json().dump() << "\n";
    }
}

inline std::vector<QASample> load_bucket_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw TensorError("cannot read bucket file: " + path);
    std::vector<QASample> out;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) out.push_back(QASample::from_json(nlohmann::json::parse(line)));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus: key-value facts with distractor prose, plus planted
// non-readable and low-density documents to exercise the filters.

struct GoldQA {
    std::string query;
    std::string doc_id;
    std::string answer;
};

struct SynthCorpus {
    std::vector<RawDocument> docs;
    std::vector<GoldQA> gold;                    // answerable by string lookup
    std::vector<std::string> non_readable_ids;   // planted markup docs
    std::vector<std::string> low_density_ids;    // planted few-fact docs
};

inline SynthCorpus synth_corpus(size_t n_docs, size_t facts_per_doc,
                                const std::vector<std::string>& vocab, uint32_t seed) {
    if (vocab.size() < 4) throw TensorError("synth_corpus: vocab too small");
    std::mt19937 rng(seed);
    std::uniform_int_distribution<size_t> pick(0, vocab.size() - 1);
    SynthCorpus out;
    for (size_t i = 0; i < n_docs; ++i) {
        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "doc%04zu", i);
        RawDocument d;
        d.id = idbuf;
        const size_t kind = i % 10;  // 10% markup, 10% low-density, 80% regular
        if (kind == 8) {
            d.title = "table dump " + std::to_string(i);
            d.content = "| col1 | col2 |\n| " + vocab[pick(rng)] + " | " + vocab[pick(rng)] +
                        " |\n{ rows = 2 ; }";
            out.non_readable_ids.push_back(d.id);
        } else if (kind == 9) {
            d.title = "filler " + std::to_string(i);
            d.content = "the " + vocab[pick(rng)] + " drifts past the " + vocab[pick(rng)] +
                        " without any records of note .";
            out.low_density_ids.push_back(d.id);
        } else {
            const std::string sheet = std::to_string(i);
            d.title = "record sheet " + sheet;
            // Keys are drawn from a small shared pool, so the same key name
            // carries a different value on every sheet. A question must name
            // the sheet and its answer can only be read out of that sheet's
            // text; no global key->value table exists.
            std::vector<size_t> key_pool(10);
            std::iota(key_pool.begin(), key_pool.end(), 0);
            std::shuffle(key_pool.begin(), key_pool.end(), rng);
            std::vector<size_t> value_pool(vocab.size());
            std::iota(value_pool.begin(), value_pool.end(), 0);
            std::shuffle(value_pool.begin(), value_pool.end(), rng);
            // vary fact counts a little so QA difficulty spreads over buckets
            const size_t n_facts = facts_per_doc + i % 3;
            if (n_facts > key_pool.size() || n_facts > value_pool.size())
                throw TensorError("synth_corpus: facts_per_doc too large");
            std::string content = "record sheet " + sheet + " . ";
            for (size_t f = 0; f < n_facts; ++f) {
                const std::string key = "k" + std::to_string(key_pool[f]);
                const std::string value = vocab[value_pool[f]];
                content += "the " + vocab[pick(rng)] + " ledger notes that key " + key + " is " +
                           value + " . ";
                out.gold.push_back({"What is the value of " + key + " in record sheet " + sheet +
                                        "?",
                                    d.id, value});
            }
            d.content = content;
        }
        d.token_count = Tokenizer::split(d.title + " " + d.content).size();
        out.docs.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Task-preserving augmentation for the KV corpus. Each copy applies one
// consistent random relabeling of sheet ids, key names, and value words
// across document, query, and answer. Any (sheet, key) -> value lookup table
// becomes inconsistent across copies, while reading the value out of the
// provided document stays correct; training on augmented copies forces the
// selector toward the copy rule instead of memorization.

struct KVSample {
    std::string doc_text;
    std::string query;
    std::string answer;
    int difficulty = 2;
};

inline std::vector<KVSample> augment_kv(const std::vector<KVSample>& base,
                                        const std::vector<std::string>& sheet_pool,
                                        const std::vector<std::string>& value_pool,
                                        size_t factor, uint32_t seed) {
    if (factor < 1) throw TensorError("augment_kv: factor must be >= 1");
    std::mt19937 rng(seed);
    std::vector<std::string> keys(10);
    for (size_t i = 0; i < keys.size(); ++i) keys[i] = "k" + std::to_string(i);

    auto remap_words = [](const std::string& text,
                          const std::map<std::string, std::string>& m) {
        std::string out;
        for (const auto& w : Tokenizer::split(text)) {
            auto it = m.find(w);
            out += (out.empty() ? "" : " ") + (it == m.end() ? w : it->second);
        }
        return out;
    };

    std::vector<KVSample> out = base;
    out.reserve(base.size() * factor);
    for (size_t copy = 1; copy < factor; ++copy) {
        for (const KVSample& s : base) {
            std::map<std::string, std::string> m;
            std::vector<std::string> kperm = keys, vperm = value_pool;
            std::shuffle(kperm.begin(), kperm.end(), rng);
            std::shuffle(vperm.begin(), vperm.end(), rng);
            for (size_t i = 0; i < keys.size(); ++i) m[keys[i]] = kperm[i];
            for (size_t i = 0; i < value_pool.size(); ++i) m[value_pool[i]] = vperm[i];
            const std::string sheet = rules::sheet_of(s.doc_text);
            if (!sheet.empty() && !sheet_pool.empty())
                m[sheet] = sheet_pool[rng() % sheet_pool.size()];
            out.push_back({remap_words(s.doc_text, m), remap_words(s.query, m),
                           remap_words(s.answer, m), s.difficulty});
        }
    }
    return out;
}

}  // namespace selecom
