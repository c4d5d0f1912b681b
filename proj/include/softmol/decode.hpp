#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "softmol/chem.hpp"
#include "softmol/diffusion.hpp"
#include "softmol/error.hpp"
#include "softmol/fragment.hpp"
#include "softmol/rng.hpp"

namespace softmol::decode {

using diffusion::ProbTable;
using diffusion::SamplingParams;

// Anything that maps (noised block, clean context, t) to a K x |V| table.
template <class D>
concept Denoiser = requires(const D& d, std::span<const int> ids, double t, const SamplingParams& s) {
    { d.vocab_size() } -> std::convertible_to<int>;
    { d.predict(ids, ids, t, s, ids) } -> std::same_as<ProbTable>;
};

// Greedy: the most confident (position, token) pair is written.
// Sample: the most confident position is chosen the same way, but its token
// is drawn from that position's distribution with a per-lane keyed draw.
enum class SelectMode : std::uint8_t { Greedy, Sample };

struct DecodeConfig {
    int k_sample = 8;
    int l_max = 512;
    int window = 0;  // 0 means l_max (full context)
    int budget = 128;
    double temperature = 1.0;
    double nucleus = 1.0;
    int n_batch = 1;
    std::uint64_t seed = 42;
    int max_blocks = 0;  // 0 means l_max / k_sample
    SelectMode mode = SelectMode::Greedy;

    int effective_window() const noexcept { return window > 0 ? window : l_max; }
    int effective_blocks() const noexcept { return max_blocks > 0 ? std::min(max_blocks, l_max / k_sample) : l_max / k_sample; }
    FragmentConfig fragment() const { return FragmentConfig{l_max, k_sample}; }

    void validate() const {
        fragment().validate();
        if (budget < 1) throw ConfigError("decode budget T must be >= 1");
        if (n_batch < 1) throw ConfigError("batch size must be >= 1");
        if (window != 0 && window < k_sample) throw ConfigError("context window must be >= K_sample");
        SamplingParams{temperature, nucleus}.validate();
    }
};

// t <- t * u^(1/m): the time at which the next of m masked tokens is revealed.
inline double first_hitting_step(double t, int m, double u) {
    if (m < 1) throw ZeroMasked();
    if (!(u > 0.0 && u < 1.0)) throw OutOfRange("first-hitting draw must lie in (0, 1)");
    if (!(t > 0.0 && t <= 1.0)) throw OutOfRange("diffusion time must lie in (0, 1]");
    double next = t * std::pow(u, 1.0 / static_cast<double>(m));
    if (next >= t) next = std::nextafter(t, 0.0);
    return next;
}

struct Selection {
    int position = -1;
    int token = -1;
    double confidence = 0.0;
};

// argmax over masked j of max_v probs[j][v]; ties go to the lower j, then the
// lower token id (strict comparisons in ascending scan order).
inline Selection gcd_select(const ProbTable& probs, std::span<const int> masked) {
    if (masked.empty()) throw EmptyMaskedSet();
    std::vector<int> order(masked.begin(), masked.end());
    std::sort(order.begin(), order.end());
    Selection best;
    for (int j : order) {
        const auto row = probs.row(j);
        int arg = 0;
        for (int v = 1; v < probs.cols; ++v) {
            if (row[v] > row[arg]) arg = v;
        }
        if (best.position < 0 || row[arg] > best.confidence) {
            best = {j, arg, row[arg]};
        }
    }
    return best;
}

// Inverse-CDF draw from one probability row, scanning token ids in order.
inline int sample_row(std::span<const double> row, double u) {
    double acc = 0.0;
    int last = -1;
    for (int v = 0; v < static_cast<int>(row.size()); ++v) {
        if (row[v] <= 0.0) continue;
        acc += row[v];
        last = v;
        if (u < acc) return v;
    }
    return last;
}

enum class LaneStatus : std::uint8_t { Running, Complete, BudgetExhausted, Truncated };

inline std::string_view to_string(LaneStatus s) noexcept {
    switch (s) {
        case LaneStatus::Running: return "running";
        case LaneStatus::Complete: return "complete";
        case LaneStatus::BudgetExhausted: return "budget_exhausted";
        case LaneStatus::Truncated: return "truncated";
    }
    return "?";
}

// One record per predictor call, for tests and diagnostics.
struct StepTrace {
    int lane;
    int block;
    int step;
    int masked_before;
    double t;
    int position;
    int token;
};

// Lock-step batch of sequences. Row i of `tokens` is lane i's padded
// sequence; finished lanes stay in place and are skipped.
struct DecodeState {
    DecodeConfig cfg;
    int lanes = 0;
    int block = 0;
    std::uint64_t stream = 0;
    std::vector<int> tokens;
    std::vector<double> t;
    std::vector<std::uint8_t> done;
    std::vector<LaneStatus> status;
    std::vector<int> blocks_decoded;
    std::vector<int> calls;  // predictor calls spent on the most recent block
    std::vector<StepTrace>* trace = nullptr;

    std::span<int> row(int i) {
        return std::span<int>(tokens).subspan(static_cast<std::size_t>(i) * cfg.l_max, static_cast<std::size_t>(cfg.l_max));
    }
    std::span<const int> row(int i) const {
        return std::span<const int>(tokens).subspan(static_cast<std::size_t>(i) * cfg.l_max,
                                                    static_cast<std::size_t>(cfg.l_max));
    }
    bool all_done() const noexcept {
        return std::all_of(done.begin(), done.end(), [](std::uint8_t d) { return d != 0; });
    }
};

namespace detail {

inline constexpr std::uint64_t kTimeTag = 0x71a3ULL;
inline constexpr std::uint64_t kTokenTag = 0x70c4ULL;

// Everything after `pos` becomes EOS.
inline void freeze_after(std::span<int> row, int pos) {
    for (std::size_t k = static_cast<std::size_t>(pos) + 1; k < row.size(); ++k) row[k] = chem::Vocab::kEos;
}

}  // namespace detail

// Lanes start as [BOS, prefix..., MASK...]. Decoding begins at the block
// holding the first MASK; a prefix that already contains EOS is complete.
inline DecodeState init_state(const DecodeConfig& cfg, std::span<const int> prefix, int lanes, std::uint64_t stream = 0) {
    cfg.validate();
    if (lanes < 1) throw ConfigError("decode state needs at least one lane");
    if (prefix.size() + 1 >= static_cast<std::size_t>(cfg.l_max)) {
        throw TooLong(prefix.size(), static_cast<std::size_t>(cfg.l_max) - 1);
    }
    DecodeState s;
    s.cfg = cfg;
    s.lanes = lanes;
    s.stream = stream;
    s.tokens.assign(static_cast<std::size_t>(lanes) * cfg.l_max, chem::Vocab::kMask);
    s.t.assign(static_cast<std::size_t>(lanes), 1.0);
    s.done.assign(static_cast<std::size_t>(lanes), 0);
    s.status.assign(static_cast<std::size_t>(lanes), LaneStatus::Running);
    s.blocks_decoded.assign(static_cast<std::size_t>(lanes), 0);
    s.calls.assign(static_cast<std::size_t>(lanes), 0);
    const auto eos = std::find(prefix.begin(), prefix.end(), chem::Vocab::kEos);
    for (int i = 0; i < lanes; ++i) {
        auto r = s.row(i);
        r[0] = chem::Vocab::kBos;
        std::copy(prefix.begin(), prefix.end(), r.begin() + 1);
        if (eos != prefix.end()) {
            detail::freeze_after(r, 1 + static_cast<int>(eos - prefix.begin()));
            s.done[i] = 1;
            s.status[i] = LaneStatus::Complete;
        }
    }
    s.block = (1 + static_cast<int>(prefix.size())) / cfg.k_sample;
    return s;
}

// Resolves block `state.block` for every running lane, then advances the
// block index. The cap T is measured against the block width K_sample, so
// T < K_sample fails every running lane with BudgetExhausted, including on
// blocks that BOS or a prefix leave partly filled; a lane that writes EOS (or PAD, read
// as termination) freezes everything after it to EOS and finishes once the
// rest of its block is resolved.
template <Denoiser D>
void decode_block(DecodeState& s, const D& model) {
    const auto& cfg = s.cfg;
    const int K = cfg.k_sample;
    const int b = s.block;
    if (b >= cfg.l_max / K) throw OutOfRange("block index past L_max");
    const int begin = std::max(1, b * K);
    const int end = (b + 1) * K;
    const int ctx_begin = std::max(0, b * K - cfg.effective_window());
    const SamplingParams sp{cfg.temperature, cfg.nucleus};

    for (int i = 0; i < s.lanes; ++i) {
        if (s.done[i]) continue;
        auto r = s.row(i);
        std::vector<int> masked;
        for (int k = begin; k < end; ++k) {
            if (r[k] == chem::Vocab::kMask) masked.push_back(k - b * K);
        }
        s.calls[i] = 0;
        if (masked.empty()) continue;
        if (cfg.budget < K) {
            s.done[i] = 1;
            s.status[i] = LaneStatus::BudgetExhausted;
            continue;
        }
        ++s.blocks_decoded[i];
        s.t[i] = 1.0;
        bool finishing = false;
        const std::span<const int> context(r.data() + ctx_begin, static_cast<std::size_t>(b * K - ctx_begin));
        std::vector<int> noised(r.begin() + b * K, r.begin() + end);
        int step = 0;
        while (!masked.empty()) {
            const int m = static_cast<int>(masked.size());
            const double u = keyed_uniform({cfg.seed, s.stream, static_cast<std::uint64_t>(i),
                                            static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(step),
                                            detail::kTimeTag});
            s.t[i] = first_hitting_step(s.t[i], m, u);
            const ProbTable probs = model.predict(noised, context, s.t[i], sp, masked);
            ++s.calls[i];
            Selection sel = gcd_select(probs, masked);
            if (cfg.mode == SelectMode::Sample) {
                const double uv = keyed_uniform({cfg.seed, s.stream, static_cast<std::uint64_t>(i),
                                                 static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(step),
                                                 detail::kTokenTag});
                sel.token = sample_row(probs.row(sel.position), uv);
            }
            if (s.trace) s.trace->push_back({i, b, step, m, s.t[i], sel.position, sel.token});
            int tok = sel.token;
            if (tok == chem::Vocab::kPad) tok = chem::Vocab::kEos;
            if (tok == chem::Vocab::kMask || tok == chem::Vocab::kBos) {
                // never re-mask and never emit a second BOS; read as termination
                tok = chem::Vocab::kEos;
            }
            const int pos = b * K + sel.position;
            r[pos] = tok;
            noised[sel.position] = tok;
            if (tok == chem::Vocab::kEos) {
                finishing = true;
                detail::freeze_after(r, pos);
                for (int k = pos + 1; k < end; ++k) noised[k - b * K] = chem::Vocab::kEos;
            }
            masked.clear();
            for (int k = begin; k < end; ++k) {
                if (r[k] == chem::Vocab::kMask) masked.push_back(k - b * K);
            }
            ++step;
        }
        if (finishing) {
            s.done[i] = 1;
            s.status[i] = LaneStatus::Complete;
        }
    }
    ++s.block;
    if (s.block >= cfg.effective_blocks() || s.block >= cfg.l_max / K) {
        for (int i = 0; i < s.lanes; ++i) {
            if (!s.done[i]) {
                s.done[i] = 1;
                s.status[i] = LaneStatus::Truncated;
            }
        }
    }
}

// Decodes blocks until every lane is done or S blocks have been spent.
template <Denoiser D>
void run(DecodeState& s, const D& model) {
    while (!s.all_done() && s.block < s.cfg.effective_blocks()) {
        decode_block(s, model);
    }
    for (int i = 0; i < s.lanes; ++i) {
        if (!s.done[i]) {
            s.done[i] = 1;
            s.status[i] = LaneStatus::Truncated;
        }
    }
}

struct DecodedSequence {
    TokenIds ids;  // molecule tokens: BOS dropped, cut at the first EOS
    LaneStatus status = LaneStatus::Running;
    int block_count = 0;
};

inline DecodedSequence lane_result(const DecodeState& s, int i) {
    DecodedSequence out;
    out.status = s.status[i];
    out.block_count = s.blocks_decoded[i];
    if (out.status == LaneStatus::BudgetExhausted) return out;
    const auto r = s.row(i);
    for (std::size_t k = 1; k < r.size(); ++k) {
        if (r[k] == chem::Vocab::kEos || r[k] == chem::Vocab::kMask) break;
        if (r[k] == chem::Vocab::kPad) continue;
        out.ids.push_back(r[k]);
    }
    return out;
}

// Algorithm-level entry point: N_batch lanes from the same (optional)
// prefix. Lane i's trajectory depends only on (seed, i), never on N_batch.
template <Denoiser D>
std::vector<DecodedSequence> generate(const D& model, const DecodeConfig& cfg, std::span<const int> prefix = {}) {
    DecodeState s = init_state(cfg, prefix, cfg.n_batch);
    run(s, model);
    std::vector<DecodedSequence> out;
    out.reserve(static_cast<std::size_t>(s.lanes));
    for (int i = 0; i < s.lanes; ++i) out.push_back(lane_result(s, i));
    return out;
}

inline bool completed(const DecodedSequence& d) noexcept { return d.status == LaneStatus::Complete; }

inline std::string to_smiles(const chem::Vocab& vocab, std::span<const int> ids) {
    return chem::join(vocab.decode(ids));
}

}  // namespace softmol::decode
