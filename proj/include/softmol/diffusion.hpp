#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "softmol/chem.hpp"
#include "softmol/error.hpp"
#include "softmol/fragment.hpp"
#include "softmol/rng.hpp"

namespace softmol::diffusion {

// ---------------------------------------------------------------------------
// Noise schedule and forward process
// ---------------------------------------------------------------------------

// Linear schedule alpha(t) = 1 - t; the NELBO weight -alpha'(t)/(1-alpha(t))
// reduces to 1/t.
struct LinearSchedule {
    static constexpr double kMinTime = 1e-4;

    struct Point {
        double alpha;
        double alpha_prime;
        double weight;
    };

    static Point eval(double t) {
        if (!(t > 0.0 && t <= 1.0)) {
            throw OutOfRange("diffusion time must lie in (0, 1], got " + std::to_string(t));
        }
        return {1.0 - t, -1.0, 1.0 / t};
    }

    static double clip(double t) noexcept { return std::clamp(t, kMinTime, 1.0); }
};

// Each position independently becomes MASK with probability 1 - alpha(t).
template <class Rng>
std::vector<int> forward_mask(std::span<const int> block, double t, Rng& rng) {
    const double keep = LinearSchedule::eval(t).alpha;
    std::vector<int> out(block.begin(), block.end());
    for (auto& id : out) {
        if (to_open_unit(rng()) >= keep) {
            id = chem::Vocab::kMask;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

enum class MaskLayout : std::uint8_t { Training, Inference };

struct AttentionMask {
    int rows = 0;
    int cols = 0;
    MaskLayout layout = MaskLayout::Training;
    std::vector<std::uint8_t> bits;

    bool at(int i, int j) const { return bits.at(static_cast<std::size_t>(i) * cols + j) != 0; }
    void set(int i, int j, bool v) { bits.at(static_cast<std::size_t>(i) * cols + j) = v ? 1 : 0; }
};

namespace detail {

template <class Pred>
AttentionMask square_mask(int n, Pred pred) {
    AttentionMask m;
    m.rows = m.cols = n;
    m.bits.assign(static_cast<std::size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            m.set(i, j, pred(i, j));
        }
    }
    return m;
}

}  // namespace detail

// Intra-block bidirectional attention over the noised half.
inline AttentionMask block_diagonal_mask(const FragmentConfig& cfg) {
    return detail::square_mask(cfg.length, [&](int i, int j) { return cfg.block_of(i) == cfg.block_of(j); });
}

// Noised tokens look at clean tokens of strictly earlier blocks.
inline AttentionMask offset_block_causal_mask(const FragmentConfig& cfg) {
    return detail::square_mask(cfg.length, [&](int i, int j) { return cfg.block_of(j) < cfg.block_of(i); });
}

// Clean tokens look at clean tokens of the same or earlier blocks.
inline AttentionMask block_causal_mask(const FragmentConfig& cfg) {
    return detail::square_mask(cfg.length, [&](int i, int j) { return cfg.block_of(j) <= cfg.block_of(i); });
}

// 2L x 2L mask over [noised ; clean]:
//   [ block-diagonal   offset-block-causal ]
//   [ 0                block-causal        ]
inline AttentionMask build_train_mask(const FragmentConfig& cfg) {
    cfg.validate();
    const int n = cfg.length;
    const auto bd = block_diagonal_mask(cfg);
    const auto obc = offset_block_causal_mask(cfg);
    const auto bc = block_causal_mask(cfg);
    AttentionMask m;
    m.rows = m.cols = 2 * n;
    m.layout = MaskLayout::Training;
    m.bits.assign(static_cast<std::size_t>(4) * n * n, 0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            m.set(i, j, bd.at(i, j));
            m.set(i, n + j, obc.at(i, j));
            m.set(n + i, n + j, bc.at(i, j));
        }
    }
    return m;
}

// Inference mask for one active block: K rows over a span of `window`
// columns whose last K columns are the active block. Every active row sees
// every cached column and every block column; cached rows are not computed
// at all, so they never receive updates.
inline AttentionMask build_infer_mask(int window, int block) {
    if (block < 1 || window < block) {
        throw ConfigError("inference mask needs window >= block >= 1");
    }
    AttentionMask m;
    m.rows = block;
    m.cols = window;
    m.layout = MaskLayout::Inference;
    m.bits.assign(static_cast<std::size_t>(block) * window, 1);
    return m;
}

// ---------------------------------------------------------------------------
// Reference predictor
// ---------------------------------------------------------------------------

// Attention-free two-layer context model over relative positions, with
// off(r) = clamp(r, -W, W). Layer 1 gives every position k a state
//   a_k = tanh(hidden_bias + sum over visible k' of embed[x_k'] * gain[off(k - k')])
// and a masked position j is read out from the states of itself and of the
// positions it sees:
//   g_j = tanh(sum over k of a_k * gain2[off(j - k)]),  logits_j = g_j . out + bias.
// Visibility follows the training mask: a context token sees the context
// tokens of its own and earlier blocks; a block position sees the whole
// context and the unmasked tokens of its block. Sums run in increasing
// position order and all tables are row-major.
struct PredictorParams {
    int vocab = 0;
    int dim = 0;
    int window = 0;
    std::vector<double> embed;        // vocab x dim
    std::vector<double> gain;         // (2 window + 1) x dim
    std::vector<double> hidden_bias;  // dim
    std::vector<double> gain2;        // (2 window + 1) x dim
    std::vector<double> out;          // dim x vocab
    std::vector<double> bias;         // vocab

    static PredictorParams zeros(int vocab, int dim, int window) {
        if (vocab < 5 || dim < 1 || window < 1) {
            throw ConfigError("predictor needs vocab >= 5, dim >= 1, window >= 1");
        }
        PredictorParams p;
        p.vocab = vocab;
        p.dim = dim;
        p.window = window;
        const auto offsets = static_cast<std::size_t>(2 * window + 1);
        p.embed.assign(static_cast<std::size_t>(vocab) * dim, 0.0);
        p.gain.assign(offsets * dim, 0.0);
        p.hidden_bias.assign(static_cast<std::size_t>(dim), 0.0);
        p.gain2.assign(offsets * dim, 0.0);
        p.out.assign(static_cast<std::size_t>(dim) * vocab, 0.0);
        p.bias.assign(static_cast<std::size_t>(vocab), 0.0);
        return p;
    }

    // Embeddings and output weights ~ scale * N(0,1); layer-1 gains start at
    // 1 and layer-2 gains at `gain2_init`, so the initial model is a bag of
    // context tokens at every depth.
    static PredictorParams random(int vocab, int dim, int window, std::uint64_t seed, double scale = 0.1,
                                  double gain2_init = 0.1) {
        PredictorParams p = zeros(vocab, dim, window);
        SplitMix64 rng(key_hash({seed, 0x1a17ULL}));
        auto normal = [&] {
            const double u1 = rng.uniform();
            const double u2 = rng.uniform();
            return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        };
        for (auto& x : p.embed) x = scale * normal();
        for (auto& x : p.out) x = scale * normal();
        std::fill(p.gain.begin(), p.gain.end(), 1.0);
        std::fill(p.gain2.begin(), p.gain2.end(), gain2_init);
        return p;
    }

    std::array<std::vector<double>*, 6> tables() noexcept { return {&embed, &gain, &hidden_bias, &gain2, &out, &bias}; }
    std::array<const std::vector<double>*, 6> tables() const noexcept {
        return {&embed, &gain, &hidden_bias, &gain2, &out, &bias};
    }

    std::size_t size() const noexcept {
        std::size_t n = 0;
        for (const auto* t : tables()) n += t->size();
        return n;
    }

    // Flat coordinate view over the tables in declaration order.
    double& coord(std::size_t i) {
        for (auto* t : tables()) {
            if (i < t->size()) return (*t)[i];
            i -= t->size();
        }
        throw OutOfRange("parameter index");
    }
    double coord(std::size_t i) const { return const_cast<PredictorParams&>(*this).coord(i); }

    void clear() noexcept {
        for (auto* t : tables()) std::fill(t->begin(), t->end(), 0.0);
    }

    bool same_shape(const PredictorParams& o) const noexcept {
        return vocab == o.vocab && dim == o.dim && window == o.window;
    }

    bool finite() const noexcept {
        for (const auto* t : tables()) {
            for (double x : *t) {
                if (!std::isfinite(x)) return false;
            }
        }
        return true;
    }

    void axpy(double a, const PredictorParams& x) {
        auto dst = tables();
        const auto src = x.tables();
        for (std::size_t k = 0; k < dst.size(); ++k) {
            for (std::size_t i = 0; i < dst[k]->size(); ++i) (*dst[k])[i] += a * (*src[k])[i];
        }
    }

    friend bool operator==(const PredictorParams&, const PredictorParams&) = default;
};

struct SamplingParams {
    double temperature = 1.0;
    double nucleus = 1.0;

    void validate() const {
        if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
        if (!(nucleus > 0.0 && nucleus <= 1.0)) throw ConfigError("nucleus must lie in (0, 1]");
    }
};

// K x |V| row-stochastic table. Rows that were not requested stay all-zero.
struct ProbTable {
    int rows = 0;
    int cols = 0;
    std::vector<double> p;

    std::span<const double> row(int j) const {
        return std::span<const double>(p).subspan(static_cast<std::size_t>(j) * cols, cols);
    }
    std::span<double> row(int j) { return std::span<double>(p).subspan(static_cast<std::size_t>(j) * cols, cols); }
};

namespace detail {

inline int offset_index(int rel, int window) noexcept { return std::clamp(rel, -window, window) + window; }

inline const double* row_ptr(const std::vector<double>& table, int r, int d) {
    return &table[static_cast<std::size_t>(r) * d];
}
inline double* row_ptr(std::vector<double>& table, int r, int d) { return &table[static_cast<std::size_t>(r) * d]; }

inline void add_product(double* acc, const double* x, const double* g, int d) {
    for (int c = 0; c < d; ++c) acc[c] += x[c] * g[c];
}

// Exclusive end of the context block holding k, for a context of length n
// that ends where a block of length `block` begins.
inline int context_block_end(int n, int k, int block) { return n - block * ((n - 1 - k) / block); }

// Everything that depends only on the context and the block length: the
// context states and the context share of each block row's pre-activations.
struct ContextStates {
    std::vector<int> context;
    int block = 0;
    std::vector<double> a;       // context x dim
    std::vector<double> u_base;  // block x dim, layer 1
    std::vector<double> h_base;  // block x dim, layer 2
};

inline ContextStates context_states(const PredictorParams& P, std::span<const int> context, int block) {
    const int n = static_cast<int>(context.size());
    const int d = P.dim;
    ContextStates cs;
    cs.context.assign(context.begin(), context.end());
    cs.block = block;
    cs.a.assign(static_cast<std::size_t>(n) * d, 0.0);
    std::vector<double> u(static_cast<std::size_t>(d));
    for (int k = 0; k < n; ++k) {
        std::copy(P.hidden_bias.begin(), P.hidden_bias.end(), u.begin());
        const int last = context_block_end(n, k, block);
        for (int q = 0; q < last; ++q) {
            add_product(u.data(), row_ptr(P.embed, context[q], d), row_ptr(P.gain, offset_index(k - q, P.window), d), d);
        }
        double* a = row_ptr(cs.a, k, d);
        for (int c = 0; c < d; ++c) a[c] = std::tanh(u[c]);
    }
    cs.u_base.assign(static_cast<std::size_t>(block) * d, 0.0);
    cs.h_base.assign(static_cast<std::size_t>(block) * d, 0.0);
    for (int j = 0; j < block; ++j) {
        double* ub = row_ptr(cs.u_base, j, d);
        double* hb = row_ptr(cs.h_base, j, d);
        std::copy(P.hidden_bias.begin(), P.hidden_bias.end(), ub);
        for (int q = 0; q < n; ++q) {
            const int off = offset_index(n + j - q, P.window);
            add_product(ub, row_ptr(P.embed, context[q], d), row_ptr(P.gain, off, d), d);
            add_product(hb, row_ptr(cs.a, q, d), row_ptr(P.gain2, off, d), d);
        }
    }
    return cs;
}

// Layer-1 states of every block position.
inline void block_states(const PredictorParams& P, const ContextStates& cs, std::span<const int> noised,
                         std::vector<double>& a) {
    const int K = static_cast<int>(noised.size());
    const int d = P.dim;
    a.assign(static_cast<std::size_t>(K) * d, 0.0);
    for (int k = 0; k < K; ++k) {
        double* u = row_ptr(a, k, d);
        std::copy_n(row_ptr(cs.u_base, k, d), d, u);
        for (int q = 0; q < K; ++q) {
            if (noised[q] == chem::Vocab::kMask) continue;
            add_product(u, row_ptr(P.embed, noised[q], d), row_ptr(P.gain, offset_index(k - q, P.window), d), d);
        }
        for (int c = 0; c < d; ++c) u[c] = std::tanh(u[c]);
    }
}

// Read-out g_j (after the tanh) for block row j.
inline void readout(const PredictorParams& P, const ContextStates& cs, std::span<const int> noised,
                    const std::vector<double>& a_blk, int j, std::span<double> g) {
    const int K = static_cast<int>(noised.size());
    const int d = P.dim;
    std::copy_n(row_ptr(cs.h_base, j, d), d, g.data());
    for (int q = 0; q < K; ++q) {
        if (noised[q] == chem::Vocab::kMask && q != j) continue;
        add_product(g.data(), row_ptr(a_blk, q, d), row_ptr(P.gain2, offset_index(j - q, P.window), d), d);
    }
    for (auto& x : g) x = std::tanh(x);
}

inline void logits_from_hidden(const PredictorParams& P, std::span<const double> h, std::span<double> z) {
    const int V = P.vocab;
    std::copy(P.bias.begin(), P.bias.end(), z.begin());
    for (int c = 0; c < P.dim; ++c) {
        const double hc = h[c];
        if (hc == 0.0) continue;
        const double* o = &P.out[static_cast<std::size_t>(c) * V];
        for (int v = 0; v < V; ++v) z[v] += hc * o[v];
    }
}

// logits -> tempered softmax -> nucleus truncation -> renormalised row.
inline void sampling_probs(std::span<const double> z, const SamplingParams& s, std::span<double> out) {
    const std::size_t V = z.size();
    double zmax = -std::numeric_limits<double>::infinity();
    for (double x : z) zmax = std::max(zmax, x);
    double total = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
        out[v] = std::exp((z[v] - zmax) / s.temperature);
        total += out[v];
    }
    for (auto& x : out) x /= total;
    if (s.nucleus >= 1.0) return;

    std::vector<int> order(V);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return out[a] > out[b]; });
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < V) {
        mass += out[order[keep]];
        ++keep;
        if (mass >= s.nucleus) break;
    }
    for (std::size_t r = keep; r < V; ++r) out[order[r]] = 0.0;
    double kept = 0.0;
    for (double x : out) kept += x;
    for (auto& x : out) x /= kept;
}

inline void check_context(std::span<const int> context) {
    for (int c : context) {
        if (c == chem::Vocab::kMask) throw MaskInContext();
    }
}

inline ProbTable predict_with(const PredictorParams& P, const ContextStates& cs, std::span<const int> noised,
                              const SamplingParams& s, std::span<const int> rows) {
    const int K = static_cast<int>(noised.size());
    ProbTable table;
    table.rows = K;
    table.cols = P.vocab;
    table.p.assign(static_cast<std::size_t>(K) * P.vocab, 0.0);
    std::vector<double> a_blk;
    block_states(P, cs, noised, a_blk);
    std::vector<double> g(static_cast<std::size_t>(P.dim));
    std::vector<double> z(static_cast<std::size_t>(P.vocab));
    auto one = [&](int j) {
        if (j < 0 || j >= K) throw OutOfRange("predicted row outside the block");
        readout(P, cs, noised, a_blk, j, g);
        logits_from_hidden(P, g, z);
        sampling_probs(z, s, table.row(j));
    };
    if (rows.empty()) {
        for (int j = 0; j < K; ++j) one(j);
    } else {
        for (int j : rows) one(j);
    }
    return table;
}

}  // namespace detail

// Probability table for the active block given its (partially masked) tokens
// and a clean context window. Only the rows listed in `rows` are computed;
// pass an empty span to compute all of them.
inline ProbTable predict_rows(const PredictorParams& P, std::span<const int> noised,
                              std::span<const int> context, double t, const SamplingParams& s,
                              std::span<const int> rows) {
    (void)t;  // the reference model is time-agnostic
    s.validate();
    detail::check_context(context);
    if (noised.empty()) throw ConfigError("empty block");
    const auto cs = detail::context_states(P, context, static_cast<int>(noised.size()));
    return detail::predict_with(P, cs, noised, s, rows);
}

inline ProbTable predict(const PredictorParams& P, std::span<const int> noised, std::span<const int> context,
                         double t, double temperature = 1.0, double nucleus = 1.0) {
    return predict_rows(P, noised, context, t, SamplingParams{temperature, nucleus}, {});
}

// Adapter satisfying the decoder's predictor interface. Context states are
// cached across calls that share a context, as the lanes and steps of one
// block do; an instance is therefore not safe to share between threads.
class ReferenceDenoiser {
public:
    explicit ReferenceDenoiser(const PredictorParams& params) : params_(&params) {}

    int vocab_size() const noexcept { return params_->vocab; }
    int window() const noexcept { return params_->window; }

    ProbTable predict(std::span<const int> noised, std::span<const int> context, double t,
                      const SamplingParams& s, std::span<const int> rows) const {
        (void)t;
        s.validate();
        if (noised.empty()) throw ConfigError("empty block");
        const int K = static_cast<int>(noised.size());
        if (!cache_ || cache_->block != K || !std::equal(context.begin(), context.end(), cache_->context.begin(),
                                                         cache_->context.end())) {
            detail::check_context(context);
            cache_ = detail::context_states(*params_, context, K);
        }
        return detail::predict_with(*params_, *cache_, noised, s, rows);
    }

private:
    const PredictorParams* params_;
    mutable std::optional<detail::ContextStates> cache_;
};

// ---------------------------------------------------------------------------
// NELBO
// ---------------------------------------------------------------------------

// One noise realisation for a whole example: a time per block and a mask flag
// per position. Position 0 (BOS) is never masked; it is the fixed start
// context in decoding as well.
struct BlockNoise {
    std::vector<double> t;
    std::vector<std::uint8_t> masked;
};

// Times are antithetic across consecutive examples: example 2i draws t and
// example 2i+1 uses 1 - t for the same block.
inline BlockNoise draw_noise(const FragmentConfig& cfg, std::uint64_t seed, std::uint64_t example) {
    BlockNoise n;
    const std::uint64_t pair = example / 2;
    const bool partner = (example % 2) == 1;
    n.t.resize(static_cast<std::size_t>(cfg.blocks()));
    for (int b = 0; b < cfg.blocks(); ++b) {
        const double u = keyed_uniform({seed, pair, static_cast<std::uint64_t>(b), 0x7157ULL});
        n.t[b] = LinearSchedule::clip(partner ? 1.0 - u : u);
    }
    n.masked.assign(static_cast<std::size_t>(cfg.length), 0);
    for (int p = 1; p < cfg.length; ++p) {
        const double u = keyed_uniform({seed, example, static_cast<std::uint64_t>(p), 0x3a5cULL});
        n.masked[p] = u < n.t[cfg.block_of(p)] ? 1 : 0;
    }
    return n;
}

// Noise with an explicit time per block, masking drawn from `rng`.
template <class Rng>
BlockNoise draw_noise_at(const FragmentConfig& cfg, std::span<const double> times, Rng& rng) {
    BlockNoise n;
    n.t.assign(times.begin(), times.end());
    n.masked.assign(static_cast<std::size_t>(cfg.length), 0);
    for (int p = 1; p < cfg.length; ++p) {
        n.masked[p] = to_open_unit(rng()) < n.t[cfg.block_of(p)] ? 1 : 0;
    }
    return n;
}

struct LossReport {
    double nelbo = 0.0;
    std::vector<double> per_block;
    std::vector<int> masked_count;
};

namespace detail {

inline int context_begin(const FragmentConfig& cfg, int b, int window) {
    return std::max(0, cfg.block_begin(b) - window);
}

inline void check_clean(const BlockTensor& bt) {
    if (!bt.fully_clean()) throw ConfigError("NELBO needs a fully clean block tensor");
    bt.config.validate();
}

// weight * sum over masked rows of -log p(truth), and its gradient added to
// `grad` when one is given.
inline double block_loss(const PredictorParams& P, std::span<const int> context, std::span<const int> noised,
                         std::span<const int> truth, double weight, PredictorParams* grad) {
    const int n = static_cast<int>(context.size());
    const int K = static_cast<int>(noised.size());
    const int d = P.dim;
    const int V = P.vocab;
    const auto cs = context_states(P, context, K);
    std::vector<double> a_blk;
    block_states(P, cs, noised, a_blk);
    std::vector<double> g(static_cast<std::size_t>(d)), z(static_cast<std::size_t>(V)), prob(z.size());
    std::vector<double> dg(g.size());
    std::vector<double> da_ctx, da_blk;
    if (grad) {
        da_ctx.assign(cs.a.size(), 0.0);
        da_blk.assign(a_blk.size(), 0.0);
    }
    const SamplingParams plain{};
    double ce = 0.0;
    for (int j = 0; j < K; ++j) {
        if (noised[j] != chem::Vocab::kMask) continue;
        const int y = truth[j];
        readout(P, cs, noised, a_blk, j, g);
        logits_from_hidden(P, g, z);
        sampling_probs(z, plain, prob);
        ce -= std::log(prob[y]);
        if (!grad) continue;

        // dz = w (p - onehot(y)); then back through out and the read-out tanh
        for (int v = 0; v < V; ++v) prob[v] *= weight;
        prob[y] -= weight;
        for (int v = 0; v < V; ++v) grad->bias[v] += prob[v];
        for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            const double* o = &P.out[static_cast<std::size_t>(c) * V];
            double* go = &grad->out[static_cast<std::size_t>(c) * V];
            for (int v = 0; v < V; ++v) {
                go[v] += g[c] * prob[v];
                acc += o[v] * prob[v];
            }
            dg[c] = acc * (1.0 - g[c] * g[c]);
        }
        auto back2 = [&](const double* a, double* da, int off) {
            const double* g2 = row_ptr(P.gain2, off, d);
            double* dg2 = row_ptr(grad->gain2, off, d);
            for (int c = 0; c < d; ++c) {
                dg2[c] += dg[c] * a[c];
                da[c] += dg[c] * g2[c];
            }
        };
        for (int q = 0; q < n; ++q) {
            back2(row_ptr(cs.a, q, d), row_ptr(da_ctx, q, d), offset_index(n + j - q, P.window));
        }
        for (int q = 0; q < K; ++q) {
            if (noised[q] == chem::Vocab::kMask && q != j) continue;
            back2(row_ptr(a_blk, q, d), row_ptr(da_blk, q, d), offset_index(j - q, P.window));
        }
    }
    if (!grad) return weight * ce;

    std::vector<double> du(static_cast<std::size_t>(d));
    // du = da * (1 - a^2); false when it vanishes
    auto pre = [&](const double* a, const double* da) {
        bool any = false;
        for (int c = 0; c < d; ++c) {
            du[c] = da[c] * (1.0 - a[c] * a[c]);
            any = any || du[c] != 0.0;
        }
        if (any) {
            for (int c = 0; c < d; ++c) grad->hidden_bias[c] += du[c];
        }
        return any;
    };
    // state at position k (context numbering) from token `tok` at position q
    auto spread = [&](int k, int q, int tok) {
        const int off = offset_index(k - q, P.window);
        const double* e = row_ptr(P.embed, tok, d);
        const double* g1 = row_ptr(P.gain, off, d);
        double* de = row_ptr(grad->embed, tok, d);
        double* dg1 = row_ptr(grad->gain, off, d);
        for (int c = 0; c < d; ++c) {
            de[c] += du[c] * g1[c];
            dg1[c] += du[c] * e[c];
        }
    };
    for (int k = 0; k < K; ++k) {
        if (!pre(row_ptr(a_blk, k, d), row_ptr(da_blk, k, d))) continue;
        for (int q = 0; q < n; ++q) spread(n + k, q, context[q]);
        for (int q = 0; q < K; ++q) {
            if (noised[q] != chem::Vocab::kMask) spread(n + k, n + q, noised[q]);
        }
    }
    for (int k = 0; k < n; ++k) {
        if (!pre(row_ptr(cs.a, k, d), row_ptr(da_ctx, k, d))) continue;
        const int last = context_block_end(n, k, K);
        for (int q = 0; q < last; ++q) spread(k, q, context[q]);
    }
    return weight * ce;
}

}  // namespace detail

namespace detail {

inline LossReport loop_loss(const PredictorParams& P, const BlockTensor& bt, const BlockNoise& noise,
                            PredictorParams* grad) {
    check_clean(bt);
    const auto& cfg = bt.config;
    LossReport rep;
    rep.per_block.assign(static_cast<std::size_t>(cfg.blocks()), 0.0);
    rep.masked_count.assign(static_cast<std::size_t>(cfg.blocks()), 0);
    for (int b = 0; b < cfg.blocks(); ++b) {
        const int begin = cfg.block_begin(b);
        std::span<const int> truth(bt.ids.data() + begin, static_cast<std::size_t>(cfg.block));
        std::vector<int> noised(truth.begin(), truth.end());
        int masked = 0;
        for (int j = 0; j < cfg.block; ++j) {
            if (noise.masked[begin + j]) {
                noised[j] = chem::Vocab::kMask;
                ++masked;
            }
        }
        rep.masked_count[b] = masked;
        if (masked == 0) continue;
        const int cb = context_begin(cfg, b, P.window);
        std::span<const int> context(bt.ids.data() + cb, static_cast<std::size_t>(begin - cb));
        rep.per_block[b] = block_loss(P, context, noised, truth, LinearSchedule::eval(noise.t[b]).weight, grad);
    }
    for (double x : rep.per_block) rep.nelbo += x;
    return rep;
}

}  // namespace detail

// Per-block loop: block b is noised, the clean prefix (within the predictor
// window) is the context, and each masked position contributes
// weight(t_b) * -log p(true token).
inline LossReport nelbo_loss(const PredictorParams& P, const BlockTensor& bt, const BlockNoise& noise) {
    return detail::loop_loss(P, bt, noise, nullptr);
}

// Whole-sequence evaluation driven by the 2L x 2L training mask over the
// concatenation [noised ; clean]. Every row gathers the columns its mask row
// opens, visited in order of the absolute position the column stands for;
// clean rows give the context states and noised rows the block states.
inline LossReport nelbo_loss_vectorized(const PredictorParams& P, const BlockTensor& bt,
                                        const BlockNoise& noise, const AttentionMask& mask) {
    detail::check_clean(bt);
    const auto& cfg = bt.config;
    const int L = cfg.length;
    const int d = P.dim;
    if (mask.rows != 2 * L || mask.cols != 2 * L) throw ConfigError("training mask has the wrong size");

    std::vector<int> full(static_cast<std::size_t>(2 * L));
    for (int p = 0; p < L; ++p) {
        full[p] = noise.masked[p] ? chem::Vocab::kMask : bt.ids[p];
        full[L + p] = bt.ids[p];
    }

    LossReport rep;
    rep.per_block.assign(static_cast<std::size_t>(cfg.blocks()), 0.0);
    rep.masked_count.assign(static_cast<std::size_t>(cfg.blocks()), 0);
    std::vector<double> states(static_cast<std::size_t>(2 * L) * d, 0.0);
    std::vector<double> g(static_cast<std::size_t>(d));
    std::vector<double> z(static_cast<std::size_t>(P.vocab)), prob(z.size());
    const SamplingParams plain{};

    // column row i reads for position q, or -1; clean columns stop at the window
    auto column = [&](int i, int q, int lo) {
        if (mask.at(i, q)) return q;
        if (mask.at(i, L + q) && q >= lo) return L + q;
        return -1;
    };
    auto state = [&](int i, int pos, int lo) {
        double* u = detail::row_ptr(states, i, d);
        std::copy(P.hidden_bias.begin(), P.hidden_bias.end(), u);
        for (int q = 0; q < L; ++q) {
            const int col = column(i, q, lo);
            if (col < 0 || full[col] == chem::Vocab::kMask) continue;
            detail::add_product(u, detail::row_ptr(P.embed, full[col], d),
                                detail::row_ptr(P.gain, detail::offset_index(pos - q, P.window), d), d);
        }
        for (int c = 0; c < d; ++c) u[c] = std::tanh(u[c]);
    };

    for (int b = 0; b < cfg.blocks(); ++b) {
        const int begin = cfg.block_begin(b);
        const int end = cfg.block_end(b);
        int masked = 0;
        for (int i = begin; i < end; ++i) masked += noise.masked[i];
        rep.masked_count[b] = masked;
        if (masked == 0) continue;
        const int lo = detail::context_begin(cfg, b, P.window);
        for (int q = lo; q < begin; ++q) state(L + q, q, lo);
        for (int i = begin; i < end; ++i) state(i, i, lo);
        double ce = 0.0;
        for (int i = begin; i < end; ++i) {
            if (!noise.masked[i]) continue;
            std::fill(g.begin(), g.end(), 0.0);
            for (int q = 0; q < L; ++q) {
                const int col = column(i, q, lo);
                if (col < 0 || (full[col] == chem::Vocab::kMask && col != i)) continue;
                detail::add_product(g.data(), detail::row_ptr(states, col, d),
                                    detail::row_ptr(P.gain2, detail::offset_index(i - q, P.window), d), d);
            }
            for (auto& x : g) x = std::tanh(x);
            detail::logits_from_hidden(P, g, z);
            detail::sampling_probs(z, plain, prob);
            ce -= std::log(prob[bt.ids[i]]);
        }
        rep.per_block[b] = LinearSchedule::eval(noise.t[b]).weight * ce;
    }
    for (double x : rep.per_block) rep.nelbo += x;
    return rep;
}

// Analytic gradient of nelbo_loss for the same noise realisation, accumulated
// into `grad` (which must have the shape of P). Returns the loss.
inline LossReport accumulate_gradient(const PredictorParams& P, const BlockTensor& bt, const BlockNoise& noise,
                                      PredictorParams& grad) {
    if (!grad.same_shape(P)) throw ConfigError("gradient buffer shape mismatch");
    return detail::loop_loss(P, bt, noise, &grad);
}

inline PredictorParams loss_gradient(const PredictorParams& P, const BlockTensor& bt, const BlockNoise& noise) {
    PredictorParams g = PredictorParams::zeros(P.vocab, P.dim, P.window);
    accumulate_gradient(P, bt, noise, g);
    return g;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Optimizer : std::uint8_t { Sgd, AdamW };

struct TrainOptions {
    Optimizer optimizer = Optimizer::AdamW;
    int epochs = 5;
    double learning_rate = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    int batch = 4;
    std::uint64_t seed = 42;
    // Rescale a batch gradient whose L2 norm exceeds this (0 disables). The
    // 1/t weight makes single small-t draws dominate otherwise.
    double clip_norm = 0.0;
};

struct TrainResult {
    PredictorParams params;
    std::vector<double> epoch_loss;  // mean NELBO per example
};

// Mini-batch training with a constant step, either AdamW (no warmup) or
// plain SGD. Examples are visited in a per-epoch shuffled order; the gradient
// of a batch is summed in that order, so a fixed seed gives bit-identical
// parameters.
inline TrainResult train(PredictorParams init, std::span<const TokenIds> corpus, const FragmentConfig& cfg,
                         const TrainOptions& opt) {
    cfg.validate();
    if (corpus.empty()) throw EmptyCorpus();
    if (opt.batch < 1) throw ConfigError("batch size must be >= 1");
    std::vector<BlockTensor> tensors;
    tensors.reserve(corpus.size());
    for (const auto& seq : corpus) tensors.push_back(pad_and_partition(seq, cfg));

    TrainResult res{std::move(init), {}};
    PredictorParams& P = res.params;
    PredictorParams grad = PredictorParams::zeros(P.vocab, P.dim, P.window);
    std::vector<double> m1, m2;
    if (opt.optimizer == Optimizer::AdamW) {
        m1.assign(P.size(), 0.0);
        m2.assign(P.size(), 0.0);
    }
    std::uint64_t step = 0;
    const std::size_t n = tensors.size();
    std::vector<std::size_t> order(n);
    std::uint64_t example = 0;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        SplitMix64 shuffle_rng(key_hash({opt.seed, static_cast<std::uint64_t>(epoch), 0x5eedULL}));
        for (std::size_t i = n; i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        }
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(opt.batch)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(opt.batch));
            grad.clear();
            for (std::size_t k = start; k < stop; ++k) {
                const auto noise = draw_noise(cfg, opt.seed, example++);
                total += accumulate_gradient(P, tensors[order[k]], noise, grad).nelbo;
            }
            double scale = 1.0 / static_cast<double>(stop - start);
            if (opt.clip_norm > 0.0) {
                double sq = 0.0;
                for (std::size_t i = 0; i < grad.size(); ++i) sq += grad.coord(i) * grad.coord(i);
                const double norm = std::sqrt(sq) * scale;
                if (norm > opt.clip_norm) scale *= opt.clip_norm / norm;
            }
            ++step;
            if (opt.optimizer == Optimizer::Sgd) {
                P.axpy(-opt.learning_rate * scale, grad);
                continue;
            }
            const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
            for (std::size_t i = 0; i < P.size(); ++i) {
                const double g = grad.coord(i) * scale;
                m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * g;
                m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * g * g;
                double& w = P.coord(i);
                w -= opt.learning_rate * (m1[i] / c1 / (std::sqrt(m2[i] / c2) + opt.epsilon) + opt.weight_decay * w);
            }
        }
        res.epoch_loss.push_back(total / static_cast<double>(n));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    chem::Vocab vocab;
    FragmentConfig config;
    PredictorParams params;
    std::uint64_t seed = 0;
};

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const Checkpoint& ck) {
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(ck.vocab.hash()));
    return nlohmann::json{
        {"format", "softmol-checkpoint"},
        {"version", kCheckpointVersion},
        {"vocab", ck.vocab.tokens()},
        {"vocab_hash", hash},
        {"length", ck.config.length},
        {"block", ck.config.block},
        {"dim", ck.params.dim},
        {"window", ck.params.window},
        {"seed", ck.seed},
        {"embed", ck.params.embed},
        {"gain", ck.params.gain},
        {"hidden_bias", ck.params.hidden_bias},
        {"gain2", ck.params.gain2},
        {"out", ck.params.out},
        {"bias", ck.params.bias},
    };
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "softmol-checkpoint" || j.value("version", 0) != kCheckpointVersion) {
        throw ConfigError("not a version-1 softmol checkpoint");
    }
    Checkpoint ck;
    ck.vocab = chem::Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(ck.vocab.hash()));
    if (j.at("vocab_hash").get<std::string>() != hash) {
        throw ConfigError("checkpoint vocabulary hash mismatch");
    }
    ck.config.length = j.at("length").get<int>();
    ck.config.block = j.at("block").get<int>();
    ck.config.validate();
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.params = PredictorParams::zeros(ck.vocab.size(), j.at("dim").get<int>(), j.at("window").get<int>());
    auto load = [&](const char* key, std::vector<double>& dst) {
        auto v = j.at(key).get<std::vector<double>>();
        if (v.size() != dst.size()) throw ConfigError(std::string("checkpoint table has wrong size: ") + key);
        dst = std::move(v);
    };
    load("embed", ck.params.embed);
    load("gain", ck.params.gain);
    load("hidden_bias", ck.params.hidden_bias);
    load("gain2", ck.params.gain2);
    load("out", ck.params.out);
    load("bias", ck.params.bias);
    if (!ck.params.finite()) throw ConfigError("checkpoint holds non-finite parameters");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write checkpoint " + path);
    out << to_json(ck).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read checkpoint " + path);
    return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace softmol::diffusion
