#pragma once

#include <array>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "softmol/chem.hpp"
#include "softmol/error.hpp"
#include "softmol/oracle.hpp"

namespace softmol::curate {

struct CurationConfig {
    double qed_min = 0.5;
    double sa_max = 5.0;
    double tpsa_max = 140.0;
    double mw_min = 100.0;
    double mw_max = 500.0;
    double logp_max = 5.0;
    int hbd_max = 5;
    int hba_max = 10;
    int rot_max = 10;
    int max_ring = 8;
    int bridgehead_max = 2;
    int heavy_min = 4;
    int heavy_max = 49;
    double tanimoto_max = 0.5;
    std::set<std::string> banned_elements{"Si", "Sn"};
    // Illustrative token-substring alerts (peroxide, azo, nitro, acyl
    // chloride, isothiocyanate, disulfide); not a PAINS reproduction.
    std::vector<std::string> banned_patterns{"OO", "N=N", "[N+](=O)[O-]", "C(=O)Cl", "N=C=S", "SS"};

    void validate() const {
        if (!(mw_min <= mw_max) || heavy_min > heavy_max || heavy_min < 0) {
            throw ConfigError("curation ranges must be non-empty");
        }
        for (double v : {qed_min, sa_max, tpsa_max, mw_min, mw_max, logp_max, tanimoto_max}) {
            if (!std::isfinite(v)) throw ConfigError("curation thresholds must be finite");
        }
    }
};

// Overrides fields present in `j` (unprefixed keys, e.g. "qed_min").
inline void apply_json(const nlohmann::json& j, CurationConfig& c) {
    auto num = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    num("qed_min", c.qed_min);
    num("sa_max", c.sa_max);
    num("tpsa_max", c.tpsa_max);
    num("mw_min", c.mw_min);
    num("mw_max", c.mw_max);
    num("logp_max", c.logp_max);
    num("hbd_max", c.hbd_max);
    num("hba_max", c.hba_max);
    num("rot_max", c.rot_max);
    num("max_ring", c.max_ring);
    num("bridgehead_max", c.bridgehead_max);
    num("heavy_min", c.heavy_min);
    num("heavy_max", c.heavy_max);
    num("tanimoto_max", c.tanimoto_max);
    if (j.contains("banned_elements")) c.banned_elements = j.at("banned_elements").get<std::set<std::string>>();
    if (j.contains("banned_patterns")) c.banned_patterns = j.at("banned_patterns").get<std::vector<std::string>>();
    c.validate();
}

inline nlohmann::json to_json(const CurationConfig& c) {
    return {{"qed_min", c.qed_min},       {"sa_max", c.sa_max},       {"tpsa_max", c.tpsa_max},
            {"mw_min", c.mw_min},         {"mw_max", c.mw_max},       {"logp_max", c.logp_max},
            {"hbd_max", c.hbd_max},       {"hba_max", c.hba_max},     {"rot_max", c.rot_max},
            {"max_ring", c.max_ring},     {"bridgehead_max", c.bridgehead_max},
            {"heavy_min", c.heavy_min},   {"heavy_max", c.heavy_max}, {"tanimoto_max", c.tanimoto_max},
            {"banned_elements", c.banned_elements},                   {"banned_patterns", c.banned_patterns}};
}

enum class Stage : std::uint8_t { Physchem, Structural, Lipinski, Diversity };

inline std::string_view to_string(Stage s) noexcept {
    switch (s) {
        case Stage::Physchem: return "physchem";
        case Stage::Structural: return "structural";
        case Stage::Lipinski: return "lipinski";
        case Stage::Diversity: return "diversity";
    }
    return "?";
}

struct Verdict {
    bool accepted = true;
    Stage stage = Stage::Physchem;
    std::string rule;

    static Verdict accept() { return {}; }
    static Verdict reject(Stage s, std::string rule) { return {false, s, std::move(rule)}; }
};

// Contiguous match of the pattern's token texts inside the molecule's tokens.
inline bool contains_pattern(std::span<const chem::Token> tokens, std::string_view pattern) {
    const auto pat = chem::tokenize(pattern);
    if (pat.empty() || pat.size() > tokens.size()) return false;
    for (std::size_t i = 0; i + pat.size() <= tokens.size(); ++i) {
        bool hit = true;
        for (std::size_t k = 0; k < pat.size() && hit; ++k) hit = tokens[i + k].text == pat[k].text;
        if (hit) return true;
    }
    return false;
}

// Every P must carry a double-bonded O.
inline bool phosphorus_ok(const chem::ParsedMol& mol) {
    const auto adj = mol.adjacency();
    for (std::size_t i = 0; i < mol.atoms.size(); ++i) {
        if (mol.atoms[i].element != "P") continue;
        bool oxo = false;
        for (auto [v, e] : adj[i]) {
            if (mol.atoms[v].element == "O" && mol.bonds[e].order == 2.0) oxo = true;
        }
        if (!oxo) return false;
    }
    return true;
}

// Stages 1-3 in order, stopping at the first violated rule.
inline Verdict classify(std::span<const chem::Token> tokens, const chem::ParsedMol& mol, const chem::DescriptorSet& d,
                        double qed, double sa, const CurationConfig& cfg) {
    if (qed <= cfg.qed_min) return Verdict::reject(Stage::Physchem, "qed");
    if (sa >= cfg.sa_max) return Verdict::reject(Stage::Physchem, "sa");

    for (const auto& e : d.element_set) {
        if (cfg.banned_elements.count(e)) return Verdict::reject(Stage::Structural, "banned_element");
    }
    if (d.charge_total != 0) return Verdict::reject(Stage::Structural, "charge");
    if (d.radical_flag) return Verdict::reject(Stage::Structural, "radical");
    if (d.bridgehead_count > cfg.bridgehead_max) return Verdict::reject(Stage::Structural, "bridgehead");
    if (d.max_ring_size > cfg.max_ring) return Verdict::reject(Stage::Structural, "max_ring");
    if (d.rotatable_proxy > cfg.rot_max) return Verdict::reject(Stage::Structural, "rotatable_bonds");
    if (d.tpsa_proxy > cfg.tpsa_max) return Verdict::reject(Stage::Structural, "tpsa");
    for (const auto& p : cfg.banned_patterns) {
        if (contains_pattern(tokens, p)) return Verdict::reject(Stage::Structural, "banned_pattern");
    }
    if (!phosphorus_ok(mol)) return Verdict::reject(Stage::Structural, "phosphorus");

    if (d.logp_proxy > cfg.logp_max) return Verdict::reject(Stage::Lipinski, "logp");
    if (d.approx_mw < cfg.mw_min || d.approx_mw > cfg.mw_max) return Verdict::reject(Stage::Lipinski, "mw");
    if (d.hbd_proxy > cfg.hbd_max) return Verdict::reject(Stage::Lipinski, "hbd");
    if (d.hba_proxy > cfg.hba_max) return Verdict::reject(Stage::Lipinski, "hba");
    return Verdict::accept();
}

struct CurationReport {
    std::size_t input_count = 0;
    std::size_t parse_failures = 0;
    std::size_t accepted_count = 0;
    std::array<std::size_t, 4> rejected{};  // indexed by Stage
    std::map<std::string, std::size_t> rule_counts;
    std::map<int, std::size_t> buckets;  // heavy-atom count -> admitted

    std::size_t rejected_at(Stage s) const { return rejected[static_cast<std::size_t>(s)]; }

    bool reconciles() const {
        std::size_t sum = accepted_count + parse_failures;
        for (auto r : rejected) sum += r;
        return sum == input_count;
    }
};

inline nlohmann::json to_json(const CurationReport& r) {
    nlohmann::json buckets = nlohmann::json::object();
    for (auto [h, n] : r.buckets) buckets[std::to_string(h)] = n;
    return {{"input_count", r.input_count},
            {"accepted_count", r.accepted_count},
            {"parse_failures", r.parse_failures},
            {"rejected",
             {{"physchem", r.rejected[0]},
              {"structural", r.rejected[1]},
              {"lipinski", r.rejected[2]},
              {"diversity", r.rejected[3]}}},
            {"rules", r.rule_counts},
            {"buckets", buckets}};
}

struct CurationOutput {
    std::vector<std::string> accepted;
    CurationReport report;
};

// Classifies each molecule, then admits it to its heavy-atom bucket only if
// it is dissimilar (Tanimoto below the cap) to everything already there.
// Molecules outside the bucket range count as diversity-stage rejections.
inline CurationOutput curate_stream(std::span<const std::string> input, const CurationConfig& cfg) {
    cfg.validate();
    CurationOutput out;
    auto& rep = out.report;
    std::map<int, std::vector<chem::Fingerprint>> buckets;
    for (const auto& smiles : input) {
        ++rep.input_count;
        chem::TokenSeq tokens;
        try {
            tokens = chem::tokenize(smiles);
        } catch (const UnknownCharacter&) {
            ++rep.parse_failures;
            continue;
        }
        auto parsed = chem::parse_validate(tokens);
        if (!parsed.ok()) {
            ++rep.parse_failures;
            continue;
        }
        const auto& mol = parsed.mol();
        const auto d = chem::descriptors(mol);
        const Verdict v = classify(tokens, mol, d, oracle::surrogate_qed(d), oracle::surrogate_sa(d), cfg);
        if (!v.accepted) {
            ++rep.rejected[static_cast<std::size_t>(v.stage)];
            ++rep.rule_counts[v.rule];
            continue;
        }
        if (d.heavy_atoms < cfg.heavy_min || d.heavy_atoms > cfg.heavy_max) {
            ++rep.rejected[static_cast<std::size_t>(Stage::Diversity)];
            ++rep.rule_counts["heavy_atom_range"];
            continue;
        }
        const auto fp = chem::fingerprint(mol);
        auto& bucket = buckets[d.heavy_atoms];
        bool similar = false;
        for (const auto& other : bucket) {
            if (chem::tanimoto(fp, other) >= cfg.tanimoto_max) {
                similar = true;
                break;
            }
        }
        if (similar) {
            ++rep.rejected[static_cast<std::size_t>(Stage::Diversity)];
            ++rep.rule_counts["similarity"];
            continue;
        }
        bucket.push_back(fp);
        ++rep.buckets[d.heavy_atoms];
        ++rep.accepted_count;
        out.accepted.push_back(smiles);
    }
    return out;
}

}  // namespace softmol::curate
