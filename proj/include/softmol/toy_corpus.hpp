#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "softmol/curate.hpp"
#include "softmol/rng.hpp"

namespace softmol::toy {

// Small fragment grammar for desk-scale training data:
//   [head] ring [linker ring] [tail]
// Ring templates use '#' for the ring-closure digit (1 for the outer ring,
// 2 for a ring nested in its branch) and '{}' for the continuation slot.
struct RingTemplate {
    std::string_view with_slot;  // continues through '{}'
    std::string_view terminal;   // ends the molecule
};

inline constexpr std::array<RingTemplate, 16> kRings{{
    {"c#ccc({})cc#", "c#ccccc#"},
    {"c#cccc({})c#", "c#ccc(C)cc#"},
    {"c#ccccc#{}", "c#ccc(F)cc#"},
    {"c#ccc({})nc#", "c#ccncc#"},
    {"c#cnccc#{}", "c#ccc(Cl)cc#"},
    {"c#ccc({})s#", "c#ccsc#"},
    {"c#ccc({})o#", "c#ccoc#"},
    {"c#ccc({})[nH]#", "c#cc[nH]c#"},
    {"C#CCC({})CC#", "C#CCCCC#"},
    {"C#CCN({})CC#", "C#CCNCC#"},
    {"N#CCC({})CC#", "N#CCOCC#"},
    {"N#CCN({})CC#", "N#CCCC#"},
    {"C#CCC({})C#", "C#CCCC#"},
    {"C#CC#{}", "C#CC#"},
    {"c#cncc({})c#", "c#ccc(OC)cc#"},
    {"C#COCC({})C#", "C#CCOC#"},
}};

inline constexpr std::array<std::string_view, 12> kLinkers{
    {"", "C", "CC", "O", "N", "C(=O)N", "NC(=O)", "C(=O)", "S(=O)(=O)N", "OC", "CN", "NC"}};

inline constexpr std::array<std::string_view, 14> kHeads{
    {"", "C", "CC", "O", "N", "F", "Cl", "N#C", "CO", "OC", "CC(C)", "NC(=O)", "CC(=O)", "FC(F)(F)"}};

inline constexpr std::array<std::string_view, 14> kTails{
    {"", "C", "CC", "O", "N", "F", "Cl", "Br", "C#N", "OC", "C(F)(F)F", "C(=O)O", "C(=O)N", "N(C)C"}};

namespace detail {

inline std::string with_digit(std::string_view tmpl, char digit) {
    std::string out;
    for (char ch : tmpl) out.push_back(ch == '#' ? digit : ch);
    return out;
}

inline std::string fill_slot(std::string tmpl, std::string_view rest) {
    const auto at = tmpl.find("{}");
    if (at == std::string::npos) return tmpl;
    if (rest.empty()) {
        // an empty branch "()" is not SMILES; drop the parentheses as well
        if (at > 0 && tmpl[at - 1] == '(' && at + 2 < tmpl.size() && tmpl[at + 2] == ')') {
            tmpl.erase(at - 1, 4);
        } else {
            tmpl.erase(at, 2);
        }
        return tmpl;
    }
    tmpl.replace(at, 2, rest);
    return tmpl;
}

}  // namespace detail

// Candidate #index of the raw (uncurated) stream; pure function of (seed, index).
inline std::string candidate(std::uint64_t seed, std::uint64_t index) {
    SplitMix64 rng(key_hash({seed, index, 0x70ceULL}));
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.below(n)); };
    const auto& head = kHeads[pick(kHeads.size())];
    const auto& tail = kTails[pick(kTails.size())];
    const bool two_rings = rng.below(3) != 0;
    const auto& r1 = kRings[pick(kRings.size())];
    std::string body;
    if (two_rings) {
        const auto& link = kLinkers[pick(kLinkers.size())];
        const auto& r2 = kRings[pick(kRings.size())];
        std::string inner = tail.empty() || rng.below(2) ? detail::with_digit(r2.terminal, '2')
                                                         : detail::fill_slot(detail::with_digit(r2.with_slot, '2'), tail);
        body = detail::fill_slot(detail::with_digit(r1.with_slot, '1'), std::string(link) + inner);
    } else {
        body = tail.empty() ? detail::with_digit(r1.terminal, '1')
                            : detail::fill_slot(detail::with_digit(r1.with_slot, '1'), tail);
    }
    return std::string(head) + body;
}

// The first `count` molecules of the candidate stream that survive curation.
inline std::vector<std::string> curated_corpus(std::size_t count, std::uint64_t seed = 7,
                                               const curate::CurationConfig& cfg = {}) {
    std::vector<std::string> out;
    const std::size_t chunk = 2048;
    std::uint64_t next = 0;
    curate::CurationOutput running;
    std::vector<std::string> raw;
    while (out.size() < count && next < 4'000'000) {
        for (std::size_t i = 0; i < chunk; ++i) raw.push_back(candidate(seed, next++));
        running = curate::curate_stream(raw, cfg);
        out = running.accepted;
    }
    if (out.size() > count) out.resize(count);
    return out;
}

}  // namespace softmol::toy
