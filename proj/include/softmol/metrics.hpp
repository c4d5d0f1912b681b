#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "softmol/chem.hpp"
#include "softmol/error.hpp"
#include "softmol/oracle.hpp"

namespace softmol::metrics {

using oracle::PropertyRecord;

struct ScoredMolecule {
    std::string smiles;
    PropertyRecord props;
    chem::Fingerprint fp;
};

// Valid molecules, deduplicated by exact string, in first-appearance order.
inline std::vector<ScoredMolecule> unique_valid(std::span<const std::string> samples,
                                                const oracle::SurrogateOracle& oracle, std::size_t* valid_count = nullptr) {
    std::vector<ScoredMolecule> out;
    std::unordered_set<std::string> seen;
    std::size_t valid = 0;
    for (const auto& s : samples) {
        auto parsed = chem::parse_smiles(s);
        if (!parsed.ok()) continue;
        ++valid;
        if (!seen.insert(s).second) continue;
        const auto& mol = parsed.mol();
        out.push_back({s, oracle.score(mol), chem::fingerprint(mol, oracle.profile().target_fp.width())});
    }
    if (valid_count) *valid_count = valid;
    return out;
}

// 1 - mean pairwise Tanimoto; 0 for fewer than two fingerprints.
inline double diversity(std::span<const chem::Fingerprint> fps) {
    if (fps.size() < 2) return 0.0;
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < fps.size(); ++i) {
        for (std::size_t j = i + 1; j < fps.size(); ++j) {
            sum += chem::tanimoto(fps[i], fps[j]);
            ++pairs;
        }
    }
    return 1.0 - sum / static_cast<double>(pairs);
}

// Greedy sphere exclusion in the given order.
inline std::size_t circles(std::span<const chem::Fingerprint> ordered, double threshold = 0.75) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("circle threshold must lie in (0, 1)");
    std::vector<const chem::Fingerprint*> centers;
    for (const auto& fp : ordered) {
        bool far = true;
        for (const auto* c : centers) {
            if (chem::tanimoto(fp, *c) >= threshold) {
                far = false;
                break;
            }
        }
        if (far) centers.push_back(&fp);
    }
    return centers.size();
}

inline bool quality_pass(const PropertyRecord& p) noexcept { return p.qed >= 0.6 && p.sa <= 4.0; }
inline bool docking_filter_pass(const PropertyRecord& p) noexcept { return p.qed > 0.5 && p.sa < 5.0; }

struct HitMetrics {
    double hit_ratio = 0.0;
    std::optional<double> novel_top_hit;  // absent when there is no hit
    std::vector<ScoredMolecule> hits;     // ds ascending (best first)
    std::size_t circles = 0;
};

// Hits: DS below the target threshold, QED > 0.5 and SA < 5.
inline HitMetrics hit_metrics(std::span<const ScoredMolecule> unique, double threshold_ds, double circle_threshold = 0.75) {
    HitMetrics h;
    for (const auto& m : unique) {
        if (m.props.ds < threshold_ds && docking_filter_pass(m.props)) h.hits.push_back(m);
    }
    std::stable_sort(h.hits.begin(), h.hits.end(),
                     [](const ScoredMolecule& a, const ScoredMolecule& b) { return a.props.ds < b.props.ds; });
    h.hit_ratio = unique.empty() ? 0.0 : static_cast<double>(h.hits.size()) / static_cast<double>(unique.size());
    if (!h.hits.empty()) {
        const auto top = static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(h.hits.size())));
        double sum = 0.0;
        for (std::size_t i = 0; i < top; ++i) sum += h.hits[i].props.ds;
        h.novel_top_hit = sum / static_cast<double>(top);
    }
    std::vector<chem::Fingerprint> fps;
    for (const auto& m : h.hits) fps.push_back(m.fp);
    h.circles = circles(fps, circle_threshold);
    return h;
}

struct EvalReport {
    std::size_t total = 0;
    std::size_t valid = 0;
    std::size_t unique = 0;
    double validity = 0.0;
    double uniqueness = 0.0;
    double quality = 0.0;
    double docking_filter = 0.0;
    double diversity = 0.0;
    double hit_ratio = 0.0;
    std::size_t hit_count = 0;
    std::size_t circles = 0;
    std::optional<double> novel_top_hit;
};

inline EvalReport standard_metrics(std::span<const std::string> samples, const oracle::SurrogateOracle& oracle) {
    if (samples.empty()) throw EmptySet();
    EvalReport r;
    r.total = samples.size();
    const auto uv = unique_valid(samples, oracle, &r.valid);
    r.unique = uv.size();
    r.validity = static_cast<double>(r.valid) / static_cast<double>(r.total);
    r.uniqueness = r.valid ? static_cast<double>(r.unique) / static_cast<double>(r.valid) : 0.0;
    std::size_t q = 0, f = 0;
    std::vector<chem::Fingerprint> fps;
    for (const auto& m : uv) {
        q += quality_pass(m.props);
        f += docking_filter_pass(m.props);
        fps.push_back(m.fp);
    }
    if (r.unique) {
        r.quality = static_cast<double>(q) / static_cast<double>(r.unique);
        r.docking_filter = static_cast<double>(f) / static_cast<double>(r.unique);
    }
    r.diversity = diversity(fps);
    return r;
}

// Standard metrics plus the target-specific hit metrics.
inline EvalReport evaluate(std::span<const std::string> samples, const oracle::SurrogateOracle& oracle) {
    EvalReport r = standard_metrics(samples, oracle);
    const auto uv = unique_valid(samples, oracle);
    const auto h = hit_metrics(uv, oracle.profile().threshold_ds);
    r.hit_ratio = h.hit_ratio;
    r.hit_count = h.hits.size();
    r.circles = h.circles;
    r.novel_top_hit = h.novel_top_hit;
    return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j{{"total", r.total},
                     {"valid", r.valid},
                     {"unique", r.unique},
                     {"validity", r.validity},
                     {"uniqueness", r.uniqueness},
                     {"quality", r.quality},
                     {"docking_filter", r.docking_filter},
                     {"diversity", r.diversity},
                     {"hit_ratio", r.hit_ratio},
                     {"hit_count", r.hit_count},
                     {"circles", r.circles}};
    j["novel_top_hit"] = r.novel_top_hit ? nlohmann::json(*r.novel_top_hit) : nlohmann::json(nullptr);
    return j;
}

}  // namespace softmol::metrics
