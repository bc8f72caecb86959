#pragma once

// Diagnostics: attention-mass accounting over role-labeled attention maps,
// instruction-following probes, selection-focus heatmaps, an exact discrete
// mutual-information oracle, and CSV heatmap export.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "selecom/model.hpp"
#include "selecom/pipeline.hpp"

namespace selecom {

// ---------------------------------------------------------------------------
// Role-labeled attention maps.

inline constexpr const char* kRoleInstruction = "instruction";
inline constexpr const char* kRoleQuery = "query";
inline constexpr const char* kRoleDocument = "document/Z";
inline constexpr const char* kRoleScaffold = "scaffold";
inline constexpr const char* kRoleGenerated = "generated";

struct AttentionMap {
    size_t n_heads = 0, tq = 0, tk = 0;
    std::vector<std::vector<float>> layers;  // each [n_heads * tq * tk]
    std::vector<std::string> roles;          // one label per key position

    size_t n_layers() const { return layers.size(); }

    float at(size_t layer, size_t head, size_t qpos, size_t kpos) const {
        return layers.at(layer)[(head * tq + qpos) * tk + kpos];
    }

    // Each query row must sum to 1 (causal masking zeroes future keys but the
    // active prefix is a full distribution), and the labels must partition the
    // key positions.
    void validate() const {
        if (roles.size() != tk)
            throw TensorError("AttentionMap: " + std::to_string(roles.size()) +
                              " labels for " + std::to_string(tk) + " key positions");
        for (const std::string& r : roles)
            if (r.empty()) throw TensorError("AttentionMap: empty role label");
        for (size_t l = 0; l < layers.size(); ++l) {
            if (layers[l].size() != n_heads * tq * tk)
                throw TensorError("AttentionMap: layer " + std::to_string(l) +
                                  " buffer size mismatch");
            for (size_t h = 0; h < n_heads; ++h)
                for (size_t q = 0; q < tq; ++q) {
                    double row = 0.0;
                    for (size_t k = 0; k < tk; ++k) row += at(l, h, q, k);
                    if (std::abs(row - 1.0) > 1e-5)
                        throw TensorError("AttentionMap: row sum " + std::to_string(row) +
                                          " at layer " + std::to_string(l));
                }
        }
    }

    static AttentionMap from_capture(const AttentionCapture& cap,
                                     std::vector<std::string> role_labels) {
        AttentionMap m;
        m.n_heads = cap.n_heads;
        m.tq = cap.tq;
        m.tk = cap.tk;
        m.layers = cap.layers;
        m.roles = std::move(role_labels);
        m.validate();
        return m;
    }

    // Mean over layers and heads, [tq x tk].
    std::vector<std::vector<double>> mean_matrix() const {
        std::vector<std::vector<double>> out(tq, std::vector<double>(tk, 0.0));
        const double denom = static_cast<double>(n_layers() * n_heads);
        for (size_t l = 0; l < n_layers(); ++l)
            for (size_t h = 0; h < n_heads; ++h)
                for (size_t q = 0; q < tq; ++q)
                    for (size_t k = 0; k < tk; ++k) out[q][k] += at(l, h, q, k) / denom;
        return out;
    }
};

// Fraction of attention falling on key positions with the given role, per
// query position, averaged over heads and layers.
inline std::vector<double> attention_mass(const AttentionMap& map, const std::string& role) {
    map.validate();
    std::vector<double> out(map.tq, 0.0);
    const double denom = static_cast<double>(map.n_layers() * map.n_heads);
    for (size_t l = 0; l < map.n_layers(); ++l)
        for (size_t h = 0; h < map.n_heads; ++h)
            for (size_t q = 0; q < map.tq; ++q)
                for (size_t k = 0; k < map.tk; ++k)
                    if (map.roles[k] == role) out[q] += map.at(l, h, q, k) / denom;
    return out;
}

// Scalar mass over the query range [q_begin, q_end).
inline double attention_mass_mean(const AttentionMap& map, const std::string& role,
                                  size_t q_begin, size_t q_end) {
    if (q_begin >= q_end || q_end > map.tq)
        throw TensorError("attention_mass_mean: bad query range");
    std::vector<double> per = attention_mass(map, role);
    double acc = 0.0;
    for (size_t q = q_begin; q < q_end; ++q) acc += per[q];
    return acc / static_cast<double>(q_end - q_begin);
}

// ---------------------------------------------------------------------------
// Role segmentation of prompts. Segments are (role, text) pieces whose
// concatenation reproduces the rendered prompt exactly; encoding each piece
// separately yields per-token labels.

using RoleSegments = std::vector<std::pair<std::string, std::string>>;

inline RoleSegments gen_prompt_role_segments(const std::string& query, size_t doc_count,
                                             size_t n) {
    RoleSegments seg;
    if (doc_count > 0) {
        std::string refs = "<DOCUMENT_START>";
        for (size_t i = 0; i < doc_count * n; ++i) refs += "<DOCUMENT>";
        refs += "<DOCUMENT_END>\n";
        seg.emplace_back(kRoleScaffold, "### Reference\n");
        seg.emplace_back(kRoleDocument, refs);
    }
    seg.emplace_back(kRoleScaffold, "### Question\n");
    seg.emplace_back(kRoleQuery, query);
    seg.emplace_back(kRoleInstruction,
                     "\n### Instruction\nAnswer the question according to the reference "
                     "provided above.\n### Restriction\n1. You must use English.\n2. You must "
                     "DIRECTLY provide the answer in this STRICT format: <answer></answer>.\n3. "
                     "You must not generate any other text.\n");
    seg.emplace_back(kRoleScaffold, "<answer>");
    return seg;
}

inline RoleSegments probe_role_segments(const std::string& instruction_tail,
                                        const std::string& target, size_t n,
                                        const std::string& literal_text) {
    std::string refs = "<DOCUMENT_START>";
    if (literal_text.empty())
        for (size_t i = 0; i < n; ++i) refs += "<DOCUMENT>";
    else
        refs += " " + literal_text + " ";
    refs += "<DOCUMENT_END>";
    RoleSegments seg;
    seg.emplace_back(kRoleScaffold, "### Reference\n");
    seg.emplace_back(kRoleDocument, refs);
    seg.emplace_back(kRoleScaffold, "\n");
    seg.emplace_back(kRoleInstruction, "### Instruction\n" + instruction_tail);
    if (!target.empty()) seg.emplace_back(kRoleQuery, target);
    seg.emplace_back(kRoleScaffold, "\n<answer>");
    return seg;
}

inline RoleSegments ignore_probe_role_segments(const std::string& target, size_t n,
                                               const std::string& literal_text = "") {
    return probe_role_segments("Ignore the reference and output exactly the following string: ",
                               target, n, literal_text);
}

inline RoleSegments reconstruct_probe_role_segments(size_t n,
                                                    const std::string& literal_text = "") {
    return probe_role_segments("Repeat the content of the reference.", "", n, literal_text);
}

// Encodes each segment and concatenates ids and per-token labels.
inline std::pair<std::vector<int>, std::vector<std::string>> encode_segments(
    const Tokenizer& tk, const RoleSegments& segments) {
    std::vector<int> ids;
    std::vector<std::string> roles;
    for (const auto& [role, text] : segments) {
        std::vector<int> piece = tk.encode(text);
        ids.insert(ids.end(), piece.begin(), piece.end());
        roles.insert(roles.end(), piece.size(), role);
    }
    return {std::move(ids), std::move(roles)};
}

// ---------------------------------------------------------------------------
// Instruction-following probes (reconstruct / ignore-and-echo).

enum class ProbeMode { kReconstruct, kIgnoreAndEcho };

struct ProbeResult {
    std::string output;
    std::vector<int> output_ids;
    AttentionMap map;
    size_t prompt_len = 0;  // query positions >= prompt_len are generated
    bool pass = false;
};

namespace detail_diag {

// Truncate generated ids at the closing answer tag, if present.
inline std::vector<int> strip_answer_tail(const std::vector<int>& ids) {
    std::vector<int> out;
    for (int id : ids) {
        if (id == Tokenizer::kAnswerClose) break;
        out.push_back(id);
    }
    return out;
}

}  // namespace detail_diag

// Runs the generator on a probe prompt whose reference is either the supplied
// compressed context (contexts non-empty, literal_text empty) or literal text.
// In ignore mode the pass criterion is exact echo of `echo_target`; in
// reconstruct mode it is >= 50% recall of the document's distinct tokens.
inline ProbeResult instruction_probe(const System& sys, ProbeMode mode,
                                     const std::vector<CompressedContext>& contexts,
                                     const std::string& literal_text,
                                     const std::string& echo_target,
                                     const std::vector<int>& doc_ids,
                                     size_t max_new_tokens = 24) {
    const size_t n = sys.projector.n;
    if (!contexts.empty() && !literal_text.empty())
        throw TensorError("instruction_probe: supply compressed or literal reference, not both");
    RoleSegments seg = mode == ProbeMode::kIgnoreAndEcho
                           ? ignore_probe_role_segments(echo_target, n, literal_text)
                           : reconstruct_probe_role_segments(n, literal_text);
    auto [prompt_ids, roles] = encode_segments(sys.tokenizer, seg);

    Tensor emb = splice_embed(sys.generator, prompt_ids, contexts);
    std::vector<int> raw = sys.generator.backbone.generate(emb, max_new_tokens, Tokenizer::kEos);
    std::vector<int> out_ids = detail_diag::strip_answer_tail(raw);

    std::vector<int> full = prompt_ids;
    full.insert(full.end(), raw.begin(), raw.end());
    AttentionCapture cap;
    sys.generator.backbone.forward_hidden(splice_embed(sys.generator, full, contexts), &cap);
    roles.insert(roles.end(), raw.size(), kRoleGenerated);

    ProbeResult res;
    res.prompt_len = prompt_ids.size();
    res.map = AttentionMap::from_capture(cap, std::move(roles));
    res.output_ids = out_ids;
    res.output = sys.tokenizer.decode(out_ids);
    if (mode == ProbeMode::kIgnoreAndEcho) {
        res.pass = res.output == sys.tokenizer.decode(sys.tokenizer.encode(echo_target));
    } else {
        std::vector<int> uniq = doc_ids;
        std::sort(uniq.begin(), uniq.end());
        uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
        if (uniq.empty()) throw TensorError("instruction_probe: empty document");
        size_t hit = 0;
        for (int id : uniq)
            if (std::find(out_ids.begin(), out_ids.end(), id) != out_ids.end()) ++hit;
        res.pass = hit * 2 >= uniq.size();
    }
    return res;
}

// ---------------------------------------------------------------------------
// Selection-focus probe: attention from the <ENCODE> positions onto the
// document tokens, and the fraction of that mass landing on the gold span.

struct FocusResult {
    AttentionMap map;
    double focus = 0.0;             // gold-span mass / total document mass
    double diffuse_baseline = 0.0;  // gold length / document length
    size_t doc_begin = 0, doc_len = 0, gold_begin = 0, gold_len = 0;
};

// With query_conditioned the selector sees the full P_select prompt; without
// it the prompt is the bare document (the full-compression encoder's view).
inline FocusResult selection_focus_probe(const Selector& sel, const Tokenizer& tk,
                                         const std::string& query, const std::string& document,
                                         const std::string& gold_evidence,
                                         bool query_conditioned = true) {
    std::vector<int> doc_ids = tk.encode(document);
    std::vector<int> gold_ids = tk.encode(gold_evidence);
    if (doc_ids.empty() || gold_ids.empty() || gold_ids.size() > doc_ids.size())
        throw TensorError("selection_focus_probe: bad document or gold span");

    std::vector<int> prompt;
    std::vector<std::string> roles;
    size_t doc_begin = 0;
    if (query_conditioned) {
        RoleSegments seg{
            {kRoleScaffold, "### Document\n"},
            {kRoleDocument, document},
            {kRoleScaffold, "\n### Question\n"},
            {kRoleQuery, query},
            {kRoleInstruction,
             "\n### Instruction\nExtract the key information from the document that is helpful "
             "to answer the question."}};
        std::tie(prompt, roles) = encode_segments(tk, seg);
        doc_begin = tk.encode("### Document\n").size();
    } else {
        prompt = doc_ids;
        roles.assign(doc_ids.size(), kRoleDocument);
    }
    roles.insert(roles.end(), sel.p, kRoleScaffold);  // the appended <ENCODE> slots

    size_t gold_begin = std::string::npos;
    for (size_t i = 0; i + gold_ids.size() <= doc_ids.size(); ++i)
        if (std::equal(gold_ids.begin(), gold_ids.end(), doc_ids.begin() + i)) {
            gold_begin = doc_begin + i;
            break;
        }
    if (gold_begin == std::string::npos)
        throw TensorError("selection_focus_probe: gold evidence not found in document");

    AttentionCapture cap;
    selector_forward(sel, prompt, &cap);

    FocusResult res;
    res.map = AttentionMap::from_capture(cap, std::move(roles));
    res.doc_begin = doc_begin;
    res.doc_len = doc_ids.size();
    res.gold_begin = gold_begin;
    res.gold_len = gold_ids.size();
    res.diffuse_baseline =
        static_cast<double>(gold_ids.size()) / static_cast<double>(doc_ids.size());

    const size_t t = prompt.size();
    double doc_mass = 0.0, gold_mass = 0.0;
    for (size_t l = 0; l < res.map.n_layers(); ++l)
        for (size_t h = 0; h < res.map.n_heads; ++h)
            for (size_t q = t; q < t + sel.p; ++q)
                for (size_t k = doc_begin; k < doc_begin + doc_ids.size(); ++k) {
                    const double w = res.map.at(l, h, q, k);
                    doc_mass += w;
                    if (k >= gold_begin && k < gold_begin + gold_ids.size()) gold_mass += w;
                }
    if (doc_mass <= 0.0) throw TensorError("selection_focus_probe: zero document mass");
    res.focus = gold_mass / doc_mass;
    return res;
}

// ---------------------------------------------------------------------------
// Exact mutual-information oracle over a finite channel.
//
// Joint model: (Q, E, N) ~ p_qen; answer A = g(E, Q); document statistic
// D = (E, N); blind code Z = f(E, N); selective code Z_s = f_s(E).

struct DiscreteChannelSpec {
    size_t nq = 0, ne = 0, nn = 0, na = 0, nz = 0, nzs = 0;
    std::vector<double> p_qen;    // [nq * ne * nn], sums to 1
    std::vector<size_t> a_of_eq;  // [ne * nq] -> [0, na)
    std::vector<size_t> z_of_en;  // [ne * nn] -> [0, nz)
    std::vector<size_t> zs_of_e;  // [ne] -> [0, nzs)

    void validate() const {
        if (!nq || !ne || !nn || !na || !nz || !nzs)
            throw TensorError("DiscreteChannelSpec: empty alphabet");
        if (nq * ne * nn > 1000000)
            throw TensorError("DiscreteChannelSpec: joint state space exceeds 1e6");
        if (p_qen.size() != nq * ne * nn || a_of_eq.size() != ne * nq ||
            z_of_en.size() != ne * nn || zs_of_e.size() != ne)
            throw TensorError("DiscreteChannelSpec: table size mismatch");
        double sum = 0.0;
        for (double p : p_qen) {
            if (p < 0.0) throw TensorError("DiscreteChannelSpec: negative probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw TensorError("DiscreteChannelSpec: distribution sums to " +
                              std::to_string(sum));
        for (size_t v : a_of_eq)
            if (v >= na) throw TensorError("DiscreteChannelSpec: a_of_eq out of range");
        for (size_t v : z_of_en)
            if (v >= nz) throw TensorError("DiscreteChannelSpec: z_of_en out of range");
        for (size_t v : zs_of_e)
            if (v >= nzs) throw TensorError("DiscreteChannelSpec: zs_of_e out of range");
    }
};

struct MIResult {
    double i_a_d_q = 0.0;   // I(A; D | Q), D = (E, N)
    double i_a_e_q = 0.0;   // I(A; E | Q)
    double i_a_z_q = 0.0;   // I(A; Z | Q)
    double i_a_zs_q = 0.0;  // I(A; Z_s | Q)
};

namespace detail_diag {

// I(A; X | Q) in bits from an exact joint table p(q, a, x).
inline double conditional_mi(const std::vector<double>& joint, size_t nq, size_t na,
                             size_t nx) {
    auto at = [&](size_t q, size_t a, size_t x) { return joint[(q * na + a) * nx + x]; };
    double mi = 0.0;
    for (size_t q = 0; q < nq; ++q) {
        double pq = 0.0;
        for (size_t a = 0; a < na; ++a)
            for (size_t x = 0; x < nx; ++x) pq += at(q, a, x);
        if (pq <= 0.0) continue;
        for (size_t a = 0; a < na; ++a)
            for (size_t x = 0; x < nx; ++x) {
                const double paxq = at(q, a, x);
                if (paxq <= 0.0) continue;
                double paq = 0.0, pxq = 0.0;
                for (size_t x2 = 0; x2 < nx; ++x2) paq += at(q, a, x2);
                for (size_t a2 = 0; a2 < na; ++a2) pxq += at(q, a2, x);
                mi += paxq * std::log2(paxq * pq / (paq * pxq));
            }
    }
    return mi;
}

}  // namespace detail_diag

inline MIResult mi_oracle(const DiscreteChannelSpec& spec) {
    spec.validate();
    const size_t nd = spec.ne * spec.nn;
    std::vector<double> jd(spec.nq * spec.na * nd, 0.0);
    std::vector<double> je(spec.nq * spec.na * spec.ne, 0.0);
    std::vector<double> jz(spec.nq * spec.na * spec.nz, 0.0);
    std::vector<double> jzs(spec.nq * spec.na * spec.nzs, 0.0);
    for (size_t q = 0; q < spec.nq; ++q)
        for (size_t e = 0; e < spec.ne; ++e)
            for (size_t n = 0; n < spec.nn; ++n) {
                const double p = spec.p_qen[(q * spec.ne + e) * spec.nn + n];
                if (p <= 0.0) continue;
                const size_t a = spec.a_of_eq[e * spec.nq + q];
                const size_t z = spec.z_of_en[e * spec.nn + n];
                const size_t zs = spec.zs_of_e[e];
                jd[(q * spec.na + a) * nd + (e * spec.nn + n)] += p;
                je[(q * spec.na + a) * spec.ne + e] += p;
                jz[(q * spec.na + a) * spec.nz + z] += p;
                jzs[(q * spec.na + a) * spec.nzs + zs] += p;
            }
    MIResult r;
    r.i_a_d_q = detail_diag::conditional_mi(jd, spec.nq, spec.na, nd);
    r.i_a_e_q = detail_diag::conditional_mi(je, spec.nq, spec.na, spec.ne);
    r.i_a_z_q = detail_diag::conditional_mi(jz, spec.nq, spec.na, spec.nz);
    r.i_a_zs_q = detail_diag::conditional_mi(jzs, spec.nq, spec.na, spec.nzs);
    return r;
}

// ---------------------------------------------------------------------------
// Heatmap export: CSV matrix (mean over layers and heads) plus a sidecar
// listing one key-position label per line.

inline void export_heatmap(const AttentionMap& map, const std::string& path) {
    map.validate();
    std::ofstream f(path);
    if (!f) throw TensorError("export_heatmap: cannot write " + path);
    std::vector<std::vector<double>> m = map.mean_matrix();
    f.precision(10);
    for (size_t q = 0; q < map.tq; ++q) {
        for (size_t k = 0; k < map.tk; ++k) f << (k ? "," : "") << m[q][k];
        f << "\n";
    }
    std::ofstream g(path + ".labels");
    if (!g) throw TensorError("export_heatmap: cannot write " + path + ".labels");
    for (const std::string& r : map.roles) g << r << "\n";
}

struct HeatmapFile {
    std::vector<std::vector<double>> matrix;
    std::vector<std::string> labels;
};

inline HeatmapFile import_heatmap(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw TensorError("import_heatmap: cannot read " + path);
    HeatmapFile out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        out.matrix.push_back(std::move(row));
    }
    std::ifstream g(path + ".labels");
    if (!g) throw TensorError("import_heatmap: cannot read " + path + ".labels");
    while (std::getline(g, line))
        if (!line.empty()) out.labels.push_back(line);
    return out;
}

}  // namespace selecom
