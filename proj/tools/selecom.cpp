// selecom: single entry binary exposing every workflow as a subcommand.
//
// Subcommands communicate through files in run directories. Every run writes
// a manifest.json (config snapshot + code version + seed) so any result is
// reproducible from its run directory alone. Config values come from an
// optional key=value file, overridden by repeated --set key=value flags.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "selecom/datagen.hpp"
#include "selecom/datagen_http.hpp"
#include "selecom/diagnostics.hpp"
#include "selecom/evalbench.hpp"
#include "selecom/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace selecom;

namespace {

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// key=value config with CLI overrides. Every lookup records the effective
// value so the manifest snapshots exactly what the run used.

class Cfg {
public:
    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw TensorError("cannot read config file: " + path);
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty() || line[0] == '#') continue;
            apply(line, "config file " + path);
        }
    }

    void apply(const std::string& kv, const std::string& origin) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw TensorError("malformed key=value entry '" + kv + "' from " + origin);
        values_[kv.substr(0, eq)] = kv.substr(eq + 1);
    }

    std::string get(const std::string& key, const std::string& def) {
        auto it = values_.find(key);
        const std::string v = it == values_.end() ? def : it->second;
        effective_[key] = v;
        return v;
    }
    long get_int(const std::string& key, long def) {
        return std::stol(get(key, std::to_string(def)));
    }
    double get_real(const std::string& key, double def) {
        std::ostringstream os;
        os << def;
        return std::stod(get(key, os.str()));
    }

    // Keys that were set but never read indicate a typo; fail loudly.
    void check_consumed() const {
        for (const auto& [k, v] : values_)
            if (!effective_.count(k)) throw TensorError("unknown config key: " + k);
    }

    const std::map<std::string, std::string>& effective() const { return effective_; }

private:
    std::map<std::string, std::string> values_;
    std::map<std::string, std::string> effective_;
};

void require_file(const std::string& path) {
    if (!fs::exists(path)) throw TensorError("missing input file: " + path);
}

void write_manifest(const std::string& out_dir, const std::string& subcommand, long seed,
                    const Cfg& cfg) {
    fs::create_directories(out_dir);
    json j{{"subcommand", subcommand},
           {"version", kVersion},
           {"seed", seed},
           {"config", cfg.effective()}};
    std::ofstream f(out_dir + "/manifest.json");
    if (!f) throw TensorError("cannot write manifest in " + out_dir);
    f << j.dump(2) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw TensorError("cannot write " + path);
    f << text;
}

// ---------------------------------------------------------------------------
// File formats shared between subcommands.

void save_raw_docs(const std::vector<RawDocument>& docs, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw TensorError("cannot write " + path);
    for (const auto& d : docs)
        f << json{{"id", d.id}, {"title", d.title}, {"content", d.content}}.dump() << "\n";
}

std::vector<RawDocument> load_raw_docs(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw TensorError("cannot read " + path);
    std::vector<RawDocument> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        RawDocument d;
        d.id = j.at("id").get<std::string>();
        d.title = j.at("title").get<std::string>();
        d.content = j.at("content").get<std::string>();
        d.token_count = Tokenizer::split(d.title + " " + d.content).size();
        out.push_back(std::move(d));
    }
    return out;
}

void save_qa_jsonl(const std::vector<QASample>& samples, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw TensorError("cannot write " + path);
    for (const auto& s : samples) f << s.to_json().dump() << "\n";
}

// Gold QA with a deterministic difficulty (= fact count of the source doc,
// clamped to the curriculum buckets) and a deterministic train/eval split:
// every fifth sample is held out.
struct GoldSplit {
    std::vector<QASample> train;
    std::vector<QASample> eval;
};

GoldSplit split_gold(const std::string& gold_path, const Corpus& corpus) {
    std::ifstream f(gold_path);
    if (!f) throw TensorError("cannot read " + gold_path);
    GoldSplit out;
    std::string line;
    size_t i = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        QASample s;
        s.query = j.at("query").get<std::string>();
        s.answer = j.at("answer").get<std::string>();
        s.doc_id = j.at("doc_id").get<std::string>();
        s.origin = "gold";
        if (!corpus.by_id.count(s.doc_id)) continue;  // filtered out upstream
        const int facts = static_cast<int>(rules::facts_in(corpus.get(s.doc_id).content).size());
        s.difficulty = std::clamp(facts, 2, 4);
        (i % 5 == 4 ? out.eval : out.train).push_back(std::move(s));
        ++i;
    }
    return out;
}

Tokenizer build_tokenizer(const Corpus& corpus, const std::vector<QASample>& qa) {
    Tokenizer tk;
    add_prompt_templates(tk);
    for (const auto& d : corpus.documents) tk.add_text(d.title + " " + d.content);
    for (const auto& s : qa) tk.add_text(s.query + " " + s.answer);
    tk.finalize();
    return tk;
}

std::vector<TrainSample> to_train_samples(const std::vector<QASample>& qa, const Corpus& corpus,
                                          const Tokenizer& tk) {
    std::vector<TrainSample> out;
    out.reserve(qa.size());
    for (const auto& s : qa) out.push_back(make_train_sample(s, corpus, tk));
    return out;
}

struct LoadedRun {
    System sys;
    Corpus corpus;
    Index index;
    GoldSplit gold;
};

LoadedRun load_run(const std::string& ckpt, const std::string& vocab, const std::string& corpus_path,
                   const std::string& gold_path) {
    require_file(ckpt);
    require_file(vocab);
    require_file(corpus_path);
    LoadedRun r;
    r.sys = System::load(ckpt, vocab);
    r.corpus = Corpus::load_jsonl(corpus_path);
    r.index = Index::build(r.corpus);
    if (!gold_path.empty()) {
        require_file(gold_path);
        r.gold = split_gold(gold_path, r.corpus);
    }
    return r;
}

std::vector<std::string> doc_texts_of(const Corpus& corpus) {
    std::vector<std::string> out;
    for (const auto& d : corpus.documents) out.push_back(d.title + " " + d.content);
    return out;
}

DecoderConfig decoder_cfg(Cfg& cfg, const std::string& prefix, size_t vocab, long layers,
                          long heads, long d_model, long d_ff, long max_seq) {
    DecoderConfig c;
    c.n_layers = static_cast<size_t>(cfg.get_int(prefix + "layers", layers));
    c.n_heads = static_cast<size_t>(cfg.get_int(prefix + "heads", heads));
    c.d_model = static_cast<size_t>(cfg.get_int(prefix + "d_model", d_model));
    c.d_ff = static_cast<size_t>(cfg.get_int(prefix + "d_ff", d_ff));
    c.vocab_size = vocab;
    c.max_seq_len = static_cast<size_t>(cfg.get_int(prefix + "max_seq_len", max_seq));
    return c;
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each validates inputs, writes the manifest, then works.

const std::vector<std::string> kSynthVocab{"amber", "basalt", "cedar",   "dune",  "ember",
                                           "fjord", "grove",  "heath",   "inlet", "juniper",
                                           "karst", "lagoon", "mesa",    "nadir", "opal",
                                           "pumice"};

int cmd_synth_corpus(Cfg& cfg, long seed, const std::string& out) {
    const size_t docs = static_cast<size_t>(cfg.get_int("docs", 100));
    const size_t facts = static_cast<size_t>(cfg.get_int("facts", 2));
    write_manifest(out, "synth-corpus", seed, cfg);
    SynthCorpus sc = synth_corpus(docs, facts, kSynthVocab, static_cast<uint32_t>(seed));
    save_raw_docs(sc.docs, out + "/raw_docs.jsonl");
    std::ofstream g(out + "/gold.jsonl");
    if (!g) throw TensorError("cannot write gold.jsonl");
    for (const auto& qa : sc.gold)
        g << json{{"query", qa.query}, {"doc_id", qa.doc_id}, {"answer", qa.answer}}.dump()
          << "\n";
    std::cerr << "synth-corpus: " << sc.docs.size() << " docs, " << sc.gold.size()
              << " gold QA -> " << out << "\n";
    return 0;
}

int cmd_datagen(Cfg& cfg, long seed, const std::string& out) {
    const std::string in = cfg.get("in", out + "/raw_docs.jsonl");
    const std::string judge_kind = cfg.get("judge", "rule");
    const size_t min_tokens = static_cast<size_t>(cfg.get_int("min_tokens", 4));
    const size_t max_tokens = static_cast<size_t>(cfg.get_int("max_tokens", 512));
    const int quality_min = static_cast<int>(cfg.get_int("quality_min", 6));
    require_file(in);

    std::unique_ptr<JudgeClient> judge;
    if (judge_kind == "rule") {
        judge = std::make_unique<RuleJudge>();
    } else if (judge_kind == "http") {
        HttpJudgeConfig hc;
        hc.host = cfg.get("judge_host", hc.host);
        hc.port = static_cast<int>(cfg.get_int("judge_port", hc.port));
        hc.path = cfg.get("judge_path", hc.path);
        judge = std::make_unique<HttpJudge>(hc);
    } else {
        throw TensorError("unknown judge kind: " + judge_kind + " (expected rule|http)");
    }
    write_manifest(out, "datagen", seed, cfg);

    DatagenReport report;
    std::vector<RawDocument> docs = load_raw_docs(in);
    report.input_docs = docs.size();
    docs = length_filter(docs, min_tokens, max_tokens);
    report.after_length = docs.size();
    docs = content_filter(docs, *judge, &report);
    report.after_content = docs.size();
    QualityResult qr = quality_score(docs, *judge, quality_min, &report);
    report.after_quality = qr.kept.size();

    Corpus corpus;
    std::map<std::string, RawDocument> by_id;
    for (const auto& d : qr.kept) {
        corpus.add({d.id, d.title, d.content});
        by_id[d.id] = d;
    }
    corpus.save_jsonl(out + "/corpus.jsonl");

    std::vector<QASample> candidates;
    for (const auto& d : qr.kept)
        for (bool hard : {false, true})
            if (auto s = generate_qa(d, *judge, hard, &report)) candidates.push_back(*s);
    report.candidates = candidates.size();

    Buckets buckets = filter_and_bucket(candidates, by_id, *judge, &report);
    write_bucket_files(buckets, out);
    write_text(out + "/report.json", report.to_json().dump(2) + "\n");
    std::cerr << "datagen: " << report.input_docs << " in, " << report.after_quality
              << " docs kept, " << report.kept_samples << " QA kept -> " << out << "\n";
    return 0;
}

int cmd_pretrain(Cfg& cfg, long seed, const std::string& out) {
    const std::string corpus_path = cfg.get("corpus", out + "/corpus.jsonl");
    const std::string gold_path = cfg.get("gold", out + "/gold.jsonl");
    require_file(corpus_path);
    require_file(gold_path);
    write_manifest(out, "pretrain-lm", seed, cfg);

    Corpus corpus = Corpus::load_jsonl(corpus_path);
    GoldSplit gold = split_gold(gold_path, corpus);
    std::vector<QASample> all = gold.train;
    all.insert(all.end(), gold.eval.begin(), gold.eval.end());
    Tokenizer tk = build_tokenizer(corpus, all);

    DecoderConfig sel_cfg =
        decoder_cfg(cfg, "sel_", tk.vocab_size(), 2, 2, 32, 64, 256);
    DecoderConfig gen_cfg =
        decoder_cfg(cfg, "gen_", tk.vocab_size(), 2, 2, 32, 64, 256);
    const size_t p = static_cast<size_t>(cfg.get_int("p", 4));
    const size_t n = static_cast<size_t>(cfg.get_int("n", 2));
    System sys(tk, sel_cfg, gen_cfg, p, n, static_cast<uint32_t>(seed));

    PretrainConfig pc;
    pc.lr = static_cast<float>(cfg.get_real("lr", 1e-3));
    pc.epochs = static_cast<size_t>(cfg.get_int("epochs", 30));
    pc.batch_size = static_cast<size_t>(cfg.get_int("batch", 8));
    pc.seed = static_cast<uint32_t>(seed);
    LossCurve curve =
        pretrain_generator(sys, to_train_samples(gold.train, corpus, tk), doc_texts_of(corpus), pc);
    curve.save_csv(out + "/pretrain_loss.csv");
    sys.save(out + "/model.ckpt", out + "/vocab.txt");
    std::cerr << "pretrain-lm: final loss " << curve.final_loss() << " -> " << out << "\n";
    return 0;
}

int cmd_train_stage1(Cfg& cfg, long seed, const std::string& out) {
    LoadedRun r = load_run(cfg.get("ckpt", out + "/model.ckpt"), cfg.get("vocab", out + "/vocab.txt"),
                           cfg.get("corpus", out + "/corpus.jsonl"),
                           cfg.get("gold", out + "/gold.jsonl"));
    write_manifest(out, "train-stage1", seed, cfg);
    Stage1Config sc;
    sc.lr = static_cast<float>(cfg.get_real("lr", 1e-3));
    sc.epochs = static_cast<size_t>(cfg.get_int("epochs", 30));
    sc.batch_size = static_cast<size_t>(cfg.get_int("batch", 16));
    sc.shuffled_ablation = cfg.get_int("shuffled", 0) != 0;
    sc.seed = static_cast<uint32_t>(seed);
    std::vector<TrainSample> train = to_train_samples(r.gold.train, r.corpus, r.sys.tokenizer);
    const size_t augment = static_cast<size_t>(cfg.get_int("augment", 1));
    if (augment > 1) {
        std::vector<KVSample> base;
        for (const auto& s : train)
            base.push_back({s.doc_text, s.query, r.sys.tokenizer.decode(s.answer_ids),
                            s.difficulty});
        std::vector<std::string> sheet_pool;
        for (const auto& d : r.corpus.documents) {
            std::string sh = rules::sheet_of(d.content);
            if (!sh.empty()) sheet_pool.push_back(sh);
        }
        train.clear();
        for (const auto& a :
             augment_kv(base, sheet_pool, kSynthVocab, augment, static_cast<uint32_t>(seed)))
            train.push_back({a.query, "aug", a.doc_text, r.sys.tokenizer.encode(a.answer),
                             a.difficulty});
    }
    LossCurve curve = train_stage1(r.sys, train, sc);
    curve.save_csv(out + "/stage1_loss.csv");
    r.sys.save(out + "/model.ckpt", out + "/vocab.txt");
    std::cerr << "train-stage1: final loss " << curve.final_loss() << " -> " << out << "\n";
    return 0;
}

int cmd_train_stage2(Cfg& cfg, long seed, const std::string& out) {
    LoadedRun r = load_run(cfg.get("ckpt", out + "/model.ckpt"), cfg.get("vocab", out + "/vocab.txt"),
                           cfg.get("corpus", out + "/corpus.jsonl"),
                           cfg.get("gold", out + "/gold.jsonl"));
    write_manifest(out, "train-stage2", seed, cfg);
    Stage2Config sc;
    sc.lr = static_cast<float>(cfg.get_real("lr", 1e-4));
    sc.epochs = static_cast<size_t>(cfg.get_int("epochs", 2));
    sc.batch_size = static_cast<size_t>(cfg.get_int("batch", 16));
    sc.freeze_selector = cfg.get_int("freeze_selector", 1) != 0;
    sc.seed = static_cast<uint32_t>(seed);
    LossCurve curve = train_stage2(
        r.sys, to_train_samples(r.gold.train, r.corpus, r.sys.tokenizer), sc);
    curve.save_csv(out + "/stage2_loss.csv");
    r.sys.save(out + "/model.ckpt", out + "/vocab.txt");
    std::cerr << "train-stage2: final loss " << curve.final_loss() << " -> " << out << "\n";
    return 0;
}

int cmd_train_fullcomp(Cfg& cfg, long seed, const std::string& out) {
    LoadedRun r = load_run(cfg.get("ckpt", out + "/model.ckpt"), cfg.get("vocab", out + "/vocab.txt"),
                           cfg.get("corpus", out + "/corpus.jsonl"), "");
    write_manifest(out, "train-fullcomp", seed, cfg);
    FullCompConfig fc;
    fc.lr = static_cast<float>(cfg.get_real("lr", 3e-4));
    fc.epochs = static_cast<size_t>(cfg.get_int("epochs", 40));
    fc.batch_size = static_cast<size_t>(cfg.get_int("batch", 8));
    fc.norm_trace_every = static_cast<size_t>(cfg.get_int("trace_every", 1));
    fc.seed = static_cast<uint32_t>(seed);
    LossCurve curve;
    NormTrace trace = train_full_compression_baseline(r.sys, doc_texts_of(r.corpus), fc, &curve);
    trace.save_csv(out + "/norm_trace.csv");
    curve.save_csv(out + "/fullcomp_loss.csv");
    r.sys.save(out + "/model.ckpt", out + "/vocab.txt");
    std::cerr << "train-fullcomp: " << trace.steps.size() << " trace points -> " << out << "\n";
    return 0;
}

int cmd_eval(Cfg& cfg, long seed, const std::string& out) {
    LoadedRun r = load_run(cfg.get("ckpt", out + "/model.ckpt"), cfg.get("vocab", out + "/vocab.txt"),
                           cfg.get("corpus", out + "/corpus.jsonl"),
                           cfg.get("gold", out + "/gold.jsonl"));
    const std::string mode = cfg.get("mode", "selecom");
    const std::string split = cfg.get("split", "eval");
    const size_t k = static_cast<size_t>(cfg.get_int("k", 1));
    const size_t max_new = static_cast<size_t>(cfg.get_int("max_new_tokens", 8));
    if (mode != "selecom" && mode != "fullcomp")
        throw TensorError("unknown eval mode: " + mode + " (expected selecom|fullcomp)");
    write_manifest(out, "eval", seed, cfg);

    const std::vector<QASample>& qa = split == "train" ? r.gold.train : r.gold.eval;
    std::vector<EvalRecord> records;
    std::ofstream results(out + "/results.jsonl");
    if (!results) throw TensorError("cannot write results.jsonl");
    for (size_t i = 0; i < qa.size(); ++i) {
        const QASample& s = qa[i];
        std::string pred;
        if (mode == "selecom") {
            pred = answer(s.query, k, r.sys, r.corpus, r.index);
        } else {
            auto ids = r.index.retrieve_topk(s.query, 1).doc_ids;
            const Document& d = r.corpus.get(ids[0]);
            CompressedContext ctx =
                full_compression_encode(r.sys.selector, r.sys.projector,
                                        r.sys.tokenizer.encode(d.title + " " + d.content));
            std::vector<int> gp =
                assemble_gen_prompt(r.sys.tokenizer, s.query, 1, r.sys.projector.n);
            std::vector<int> gen = splice_and_generate(r.sys.generator, gp, {ctx}, max_new);
            bool wrapped = false;
            pred = extract_answer(r.sys.tokenizer, gen, &wrapped);
        }
        char qid[16];
        std::snprintf(qid, sizeof(qid), "q%04zu", i);
        EvalRecord rec = score_record(qid, pred, {s.answer});
        results << json{{"query_id", rec.query_id}, {"query", s.query}, {"prediction", pred},
                        {"gold", s.answer},          {"em", rec.scores.at("em")},
                        {"f1", rec.scores.at("f1")}}
                       .dump()
                << "\n";
        records.push_back(std::move(rec));
    }
    write_text(out + "/report.csv", report_table_csv(records));
    write_text(out + "/report.md", report_table_markdown(records));
    double em = 0.0;
    for (const auto& rec : records) em += rec.scores.at("em");
    std::cerr << "eval(" << mode << "," << split << "): EM "
              << (records.empty() ? 0.0 : em / records.size()) << " over " << records.size()
              << " queries -> " << out << "\n";
    return 0;
}

int cmd_bench(Cfg& cfg, long seed, const std::string& out) {
    LoadedRun r = load_run(cfg.get("ckpt", out + "/model.ckpt"), cfg.get("vocab", out + "/vocab.txt"),
                           cfg.get("corpus", out + "/corpus.jsonl"),
                           cfg.get("gold", out + "/gold.jsonl"));
    const size_t n_queries =
        std::min<size_t>(static_cast<size_t>(cfg.get_int("queries", 8)), r.gold.eval.size());
    const size_t decode_len = static_cast<size_t>(cfg.get_int("decode_len", 8));
    if (n_queries == 0) throw TensorError("bench: no eval queries available");
    write_manifest(out, "bench", seed, cfg);

    const size_t n = r.sys.projector.n;
    const size_t p = r.sys.selector.p;
    std::vector<EfficiencyQuery> compressed, uncompressed;
    std::vector<size_t> select_lens;
    size_t comp_prompt_len = 0, uncomp_prompt_len = 0;
    for (size_t i = 0; i < n_queries; ++i) {
        const QASample& s = r.gold.eval[i];
        auto ids = r.index.retrieve_topk(s.query, 1).doc_ids;
        const Document& d = r.corpus.get(ids[0]);
        const std::string doc_text = d.title + " " + d.content;
        CompressedContext ctx = compress_for(r.sys, s.query, doc_text);
        std::vector<int> gp = assemble_gen_prompt(r.sys.tokenizer, s.query, 1, n);
        compressed.push_back({gp, {ctx}});
        select_lens.push_back(assemble_select_prompt(r.sys.tokenizer, s.query, doc_text, p).size());
        comp_prompt_len += gp.size();
        // Uncompressed path: same prompt shell with the document text spliced
        // in literally instead of the n compressed slots.
        std::vector<int> doc_ids = r.sys.tokenizer.encode(doc_text);
        CompressedContext lit;
        Tensor emb = r.sys.generator.backbone.embed(doc_ids);
        for (size_t t = 0; t < doc_ids.size(); ++t) lit.vectors.push_back(slice_rows(emb, t, 1));
        std::string prompt = render_gen_prompt(s.query, 1, doc_ids.size());
        std::vector<int> up = r.sys.tokenizer.encode(prompt);
        uncompressed.push_back({up, {lit}});
        uncomp_prompt_len += up.size();
    }
    EfficiencyReport comp = measure_efficiency(r.sys, compressed, decode_len);
    EfficiencyReport uncomp = measure_efficiency(r.sys, uncompressed, decode_len);
    comp.flops = count_compressed_flops(r.sys.selector.backbone.config(),
                                        r.sys.generator.backbone.config(), p, n, select_lens,
                                        comp_prompt_len / n_queries, decode_len);
    uncomp.flops = count_uncompressed_flops(r.sys.generator.backbone.config(),
                                            uncomp_prompt_len / n_queries, decode_len);

    std::ostringstream csv;
    csv << "config,til_ms,ttft_ms,prefill_gflops,total_gflops\n";
    auto gflops = [](double macs) { return 2.0 * macs / 1e9; };
    auto row = [&csv, &gflops](const char* name, const EfficiencyReport& rep) {
        csv << name << "," << rep.til_ms << "," << rep.ttft_ms << ","
            << gflops(rep.flops.prefill_macs()) << "," << gflops(rep.flops.total_macs()) << "\n";
    };
    row("compressed", comp);
    row("uncompressed", uncomp);
    const double prefill_ratio = comp.flops.prefill_macs() / uncomp.flops.prefill_macs();
    csv << "ratio," << comp.til_ms / uncomp.til_ms << "," << comp.ttft_ms / uncomp.ttft_ms << ","
        << prefill_ratio << "," << comp.flops.total_macs() / uncomp.flops.total_macs() << "\n";
    write_text(out + "/bench.csv", csv.str());
    std::cerr << "bench: prefill GFLOPs ratio " << prefill_ratio << " -> " << out << "\n";
    return 0;
}

int cmd_diagnose(Cfg& cfg, long seed, const std::string& out) {
    LoadedRun r = load_run(cfg.get("ckpt", out + "/model.ckpt"), cfg.get("vocab", out + "/vocab.txt"),
                           cfg.get("corpus", out + "/corpus.jsonl"),
                           cfg.get("gold", out + "/gold.jsonl"));
    const std::string echo_target = cfg.get("echo_target", "opal mesa");
    write_manifest(out, "diagnose", seed, cfg);
    if (r.gold.eval.empty()) throw TensorError("diagnose: no eval queries available");
    const QASample& s = r.gold.eval.front();
    const Document& d = r.corpus.get(s.doc_id);
    const std::string doc_text = d.title + " " + d.content;
    const std::vector<int> doc_ids = r.sys.tokenizer.encode(doc_text);
    CompressedContext ctx =
        full_compression_encode(r.sys.selector, r.sys.projector, doc_ids);

    ProbeResult ignore =
        instruction_probe(r.sys, ProbeMode::kIgnoreAndEcho, {ctx}, "", echo_target, {});
    ProbeResult recon =
        instruction_probe(r.sys, ProbeMode::kReconstruct, {ctx}, "", "", doc_ids);
    FocusResult focus =
        selection_focus_probe(r.sys.selector, r.sys.tokenizer, s.query, doc_text, s.answer);

    export_heatmap(ignore.map, out + "/heatmap_ignore.csv");
    export_heatmap(recon.map, out + "/heatmap_reconstruct.csv");
    export_heatmap(focus.map, out + "/heatmap_focus.csv");
    json j{{"ignore_pass", ignore.pass},
           {"ignore_output", ignore.output},
           {"ignore_mass_z", attention_mass_mean(ignore.map, kRoleDocument, ignore.prompt_len,
                                                 ignore.map.tq)},
           {"ignore_mass_instruction",
            attention_mass_mean(ignore.map, kRoleInstruction, ignore.prompt_len, ignore.map.tq)},
           {"reconstruct_pass", recon.pass},
           {"reconstruct_output", recon.output},
           {"focus", focus.focus},
           {"focus_diffuse_baseline", focus.diffuse_baseline}};
    write_text(out + "/diagnose.json", j.dump(2) + "\n");
    std::cerr << "diagnose: ignore_pass=" << ignore.pass << " focus=" << focus.focus << " -> "
              << out << "\n";
    return 0;
}

int cmd_export_report(Cfg& cfg, long seed, const std::string& out) {
    const std::string runs = cfg.get("runs", out);
    write_manifest(out, "export-report", seed, cfg);
    std::ostringstream md;
    md << "# Run report\n";
    std::vector<fs::path> dirs;
    for (const auto& e : fs::recursive_directory_iterator(runs))
        if (e.is_regular_file() && e.path().filename() == "results.jsonl")
            dirs.push_back(e.path().parent_path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
        std::vector<EvalRecord> records;
        std::ifstream f(dir / "results.jsonl");
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            records.push_back({j.at("query_id").get<std::string>(),
                               j.at("prediction").get<std::string>(),
                               {j.at("gold").get<std::string>()},
                               {{"em", j.at("em").get<double>()},
                                {"f1", j.at("f1").get<double>()}}});
        }
        md << "\n## " << dir.lexically_relative(runs).string() << "\n\n"
           << report_table_markdown(records);
    }
    for (const auto& e : fs::recursive_directory_iterator(runs))
        if (e.is_regular_file() && e.path().filename() == "bench.csv") {
            md << "\n## " << e.path().lexically_relative(runs).string() << "\n\n```\n";
            std::ifstream f(e.path());
            md << f.rdbuf() << "```\n";
        }
    write_text(out + "/report.md", md.str());
    std::cerr << "export-report: " << dirs.size() << " result sets -> " << out << "/report.md\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"selecom: query-conditioned soft context compression workbench"};
    app.require_subcommand(1);

    struct Common {
        std::string config_file;
        std::vector<std::string> sets;
        long seed = 1;
        std::string out = "run";
    };
    std::map<std::string, Common> opts;
    std::map<std::string, int (*)(Cfg&, long, const std::string&)> handlers{
        {"synth-corpus", cmd_synth_corpus}, {"datagen", cmd_datagen},
        {"pretrain-lm", cmd_pretrain},      {"train-stage1", cmd_train_stage1},
        {"train-stage2", cmd_train_stage2}, {"train-fullcomp", cmd_train_fullcomp},
        {"eval", cmd_eval},                 {"bench", cmd_bench},
        {"diagnose", cmd_diagnose},         {"export-report", cmd_export_report}};

    for (auto& [name, fn] : handlers) {
        CLI::App* sub = app.add_subcommand(name);
        Common& c = opts[name];
        sub->add_option("--config", c.config_file, "key=value config file");
        sub->add_option("--set", c.sets, "override: key=value (repeatable)");
        sub->add_option("--seed", c.seed, "random seed");
        sub->add_option("--out", c.out, "run directory (created if missing)");
    }

    CLI11_PARSE(app, argc, argv);

    const std::string name = app.get_subcommands().front()->get_name();
    const Common& c = opts[name];
    try {
        Cfg cfg;
        if (!c.config_file.empty()) cfg.load_file(c.config_file);
        for (const auto& kv : c.sets) cfg.apply(kv, "--set");
        const int rc = handlers[name](cfg, c.seed, c.out);
        cfg.check_consumed();
        return rc;
    } catch (const std::exception& e) {
        std::cerr << "error: " << name << ": " << e.what() << "\n";
        return 1;
    }
}
