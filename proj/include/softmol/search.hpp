#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "softmol/chem.hpp"
#include "softmol/decode.hpp"
#include "softmol/error.hpp"
#include "softmol/oracle.hpp"
#include "softmol/rng.hpp"

namespace softmol::search {

using oracle::PropertyRecord;

struct GateConfig {
    double qed_min = 0.5;
    double sa_max = 5.0;
    double penalty = -1.0;

    static GateConfig unconstrained() { return {0.0, std::numeric_limits<double>::infinity(), -1.0}; }

    bool passes(const PropertyRecord& r) const noexcept { return r.qed >= qed_min && r.sa <= sa_max; }
};

inline decode::DecodeConfig default_search_decode() {
    decode::DecodeConfig d;
    d.k_sample = 8;
    d.l_max = 512;
    d.budget = 128;
    d.temperature = 1.1;
    d.nucleus = 1.0;
    d.mode = decode::SelectMode::Sample;
    return d;
}

struct SearchConfig {
    int n_max = 10000;
    double c = 2.1;
    double lambda = 0.5;
    double beta = 2.0;
    int c_init = 20;
    int c_base = 8;
    int c_min = 8;
    int c_max = 10;
    int m = 64;
    int n_sim = 1;
    int d_max = 100;
    std::uint64_t seed = 42;
    decode::DecodeConfig decode = default_search_decode();
    GateConfig gate;

    void validate() const {
        if (n_max < 0) throw ConfigError("N_max must be >= 0");
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
        if (c_min > c_max) throw ConfigError("C_min must not exceed C_max");
        if (m < 1 || n_sim < 1 || d_max < 1 || c_init < 1 || c_base < 1) {
            throw ConfigError("M, n_sim, D_max, C_init and C_base must be >= 1");
        }
        // Surrogate rewards are -DS >= 0, so any negative penalty sits below them.
        if (!(gate.penalty < 0.0)) throw ConfigError("penalty reward must be below every gated reward");
        decode.validate();
    }
};

// ---------------------------------------------------------------------------
// Tree
// ---------------------------------------------------------------------------

struct Node {
    TokenIds body;   // tokens after BOS covered by this node's blocks
    TokenIds block;  // the block this node added to its parent
    int depth = 0;
    int parent = -1;
    std::vector<int> children;
    int visits = 0;
    double mean = 0.0;
    double best = -std::numeric_limits<double>::infinity();
    int cap = 0;
    std::optional<double> cached_reward;
    bool terminal = false;
    bool no_novel = false;  // set once expansion found nothing new

    bool fully_expanded() const noexcept { return no_novel || static_cast<int>(children.size()) >= cap; }
};

struct Tree {
    std::vector<Node> nodes;

    Node& at(int id) { return nodes.at(static_cast<std::size_t>(id)); }
    const Node& at(int id) const { return nodes.at(static_cast<std::size_t>(id)); }
    Node& root() { return nodes.front(); }

    static Tree with_root(int c_init) {
        Tree t;
        Node r;
        r.cap = c_init;
        t.nodes.push_back(std::move(r));
        return t;
    }

    int add_child(int parent, Node child) {
        child.parent = parent;
        child.depth = at(parent).depth + 1;
        nodes.push_back(std::move(child));
        const int id = static_cast<int>(nodes.size()) - 1;
        at(parent).children.push_back(id);
        return id;
    }
};

// A fully expanded node with no children cannot be descended; it is a leaf
// for selection just like an EOS- or depth-terminated node.
inline bool is_leaf_terminal(const Node& n) noexcept { return n.terminal || (n.no_novel && n.children.empty()); }

inline double uct_score(const Node& child, int parent_visits, double lambda, double c) {
    if (child.visits < 1) throw UnvisitedChild();
    if (parent_visits < 1) throw OutOfRange("parent visit count must be >= 1");
    return lambda * child.mean + (1.0 - lambda) * child.best +
           c * std::sqrt(std::log(static_cast<double>(parent_visits)) / static_cast<double>(child.visits));
}

// cap = clamp(floor(beta * I), C_min, C_max) with I the largest gap between a
// visited child's mean and the node's own mean. No visited child: unchanged.
inline int adaptive_cap(const Tree& tree, const Node& node, double beta, int c_min, int c_max) {
    double spread = -1.0;
    for (int id : node.children) {
        const Node& ch = tree.at(id);
        if (ch.visits < 1) continue;
        spread = std::max(spread, std::abs(ch.mean - node.mean));
    }
    if (spread < 0.0) return node.cap;
    const double raw = std::floor(beta * spread);
    const double clamped = std::min(static_cast<double>(c_max), std::max(static_cast<double>(c_min), raw));
    return static_cast<int>(clamped);
}

// Unvisited children first (creation order); otherwise the highest UCT score,
// ties to the earlier child.
inline int best_child(const Tree& tree, const Node& node, double lambda, double c) {
    for (int id : node.children) {
        if (tree.at(id).visits == 0) return id;
    }
    int best = -1;
    double best_score = 0.0;
    for (int id : node.children) {
        const double s = uct_score(tree.at(id), node.visits, lambda, c);
        if (best < 0 || s > best_score) {
            best = id;
            best_score = s;
        }
    }
    return best;
}

// Descends from the root to the first node that is terminal or still has
// room for children, refreshing non-root caps along the way.
inline std::vector<int> select(Tree& tree, const SearchConfig& cfg) {
    std::vector<int> path{0};
    int id = 0;
    for (;;) {
        Node& n = tree.at(id);
        if (id != 0 && is_leaf_terminal(n)) return path;
        if (id != 0) n.cap = adaptive_cap(tree, n, cfg.beta, cfg.c_min, cfg.c_max);
        if (!n.fully_expanded()) return path;
        if (n.children.empty()) throw ExhaustedTree();
        id = best_child(tree, n, cfg.lambda, cfg.c);
        path.push_back(id);
    }
}

inline void backpropagate(Tree& tree, std::span<const int> path, double reward) {
    for (int id : path) {
        Node& n = tree.at(id);
        n.visits += 1;
        n.mean += (reward - n.mean) / static_cast<double>(n.visits);
        n.best = std::max(n.best, reward);
    }
}

namespace detail {

inline bool contains_eos(std::span<const int> ids) {
    return std::find(ids.begin(), ids.end(), chem::Vocab::kEos) != ids.end();
}

inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t iteration, std::uint64_t tag) {
    return key_hash({seed, iteration, tag});
}

}  // namespace detail

// Samples M candidate blocks in one batched block decode, drops those equal
// to an existing sibling's block, and attaches one survivor chosen uniformly.
template <decode::Denoiser D>
int expand(Tree& tree, int node_id, const SearchConfig& cfg, const D& model, std::uint64_t iteration) {
    const Node& node = tree.at(node_id);
    if (is_leaf_terminal(node)) throw ConfigError("cannot expand a terminal node");
    decode::DecodeConfig dc = cfg.decode;
    dc.n_batch = cfg.m;
    dc.seed = cfg.seed;
    auto state = decode::init_state(dc, node.body, cfg.m, detail::stream_key(cfg.seed, iteration, 1));
    const int b = state.block;
    decode::decode_block(state, model);

    const int lo = std::max(1, b * dc.k_sample);
    const int hi = (b + 1) * dc.k_sample;
    std::vector<TokenIds> sibling_blocks;
    for (int id : tree.at(node_id).children) sibling_blocks.push_back(tree.at(id).block);

    std::vector<TokenIds> survivors;
    for (int i = 0; i < cfg.m; ++i) {
        if (state.status[i] == decode::LaneStatus::BudgetExhausted) continue;
        const auto r = state.row(i);
        TokenIds blk(r.begin() + lo, r.begin() + hi);
        if (std::find(sibling_blocks.begin(), sibling_blocks.end(), blk) != sibling_blocks.end()) continue;
        survivors.push_back(std::move(blk));
    }
    if (survivors.empty()) {
        tree.at(node_id).no_novel = true;
        throw NoNovelCandidate();
    }
    SplitMix64 pick(detail::stream_key(cfg.seed, iteration, 3));
    TokenIds chosen = survivors[pick.below(survivors.size())];

    Node child;
    child.body = tree.at(node_id).body;
    child.body.insert(child.body.end(), chosen.begin(), chosen.end());
    child.block = std::move(chosen);
    child.cap = cfg.c_base;
    const int depth = tree.at(node_id).depth + 1;
    child.terminal = detail::contains_eos(child.block) || depth >= cfg.d_max || depth * dc.k_sample >= dc.l_max;
    return tree.add_child(node_id, std::move(child));
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

// nullopt means "not scorable" (the gate then assigns the penalty). Oracle
// failures other than OracleUnavailable are also mapped to the penalty.
template <class S>
concept Scorer = requires(S& s, std::string_view smiles) {
    { s.score(smiles) } -> std::convertible_to<std::optional<PropertyRecord>>;
};

class ExternalScorer {
public:
    explicit ExternalScorer(oracle::ExternalOracle& o) : oracle_(&o) {}
    std::optional<PropertyRecord> score(std::string_view smiles) { return oracle_->score(smiles); }

private:
    oracle::ExternalOracle* oracle_;
};

struct Rollout {
    std::string smiles;
    bool valid = false;
    bool gate_pass = false;
    double reward = 0.0;
    std::optional<PropertyRecord> props;
    int depth = 0;
    int iteration = 0;
};

template <Scorer S>
Rollout score_rollout(std::string smiles, const GateConfig& gate, S& scorer) {
    Rollout r;
    r.smiles = std::move(smiles);
    r.reward = gate.penalty;
    r.valid = !r.smiles.empty() && chem::is_valid_smiles(r.smiles);
    if (!r.valid) return r;
    try {
        r.props = scorer.score(r.smiles);
    } catch (const OracleUnavailable&) {
        throw;
    } catch (const OracleError&) {
        r.props.reset();
    }
    if (r.props && gate.passes(*r.props)) {
        r.gate_pass = true;
        r.reward = -r.props->ds;
    }
    return r;
}

// n_sim rollouts completing the node's prefix with the decode prior; the
// node's reward is the best of them.
template <decode::Denoiser D, Scorer S>
std::vector<Rollout> simulate(Tree& tree, int node_id, const SearchConfig& cfg, const D& model,
                              const chem::Vocab& vocab, S& scorer, std::uint64_t iteration) {
    Node& node = tree.at(node_id);
    std::vector<TokenIds> molecules;
    if (detail::contains_eos(node.body) || node.body.size() + 1 >= static_cast<std::size_t>(cfg.decode.l_max)) {
        TokenIds ids;
        for (int id : node.body) {
            if (id == chem::Vocab::kEos) break;
            ids.push_back(id);
        }
        molecules.assign(static_cast<std::size_t>(cfg.n_sim), ids);
    } else {
        decode::DecodeConfig dc = cfg.decode;
        dc.n_batch = cfg.n_sim;
        dc.seed = cfg.seed;
        auto state = decode::init_state(dc, node.body, cfg.n_sim, detail::stream_key(cfg.seed, iteration, 2));
        decode::run(state, model);
        for (int i = 0; i < cfg.n_sim; ++i) {
            auto res = decode::lane_result(state, i);
            molecules.push_back(res.status == decode::LaneStatus::BudgetExhausted ? TokenIds{} : std::move(res.ids));
        }
    }
    std::vector<Rollout> out;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& ids : molecules) {
        Rollout r = score_rollout(decode::to_smiles(vocab, ids), cfg.gate, scorer);
        r.depth = node.depth;
        r.iteration = static_cast<int>(iteration);
        best = std::max(best, r.reward);
        out.push_back(std::move(r));
    }
    tree.at(node_id).cached_reward = best;
    return out;
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

struct SearchResult {
    std::vector<Rollout> rollouts;  // every rollout in order
    std::vector<Rollout> hits;      // gate-passing, unique by SMILES, best first
    std::optional<Rollout> best;
    int iterations = 0;
    std::size_t tree_size = 0;
    bool exhausted = false;
    std::string aborted;  // non-empty when the oracle became unavailable

    double best_reward(double fallback) const { return best ? best->reward : fallback; }
};

// Optional `keep` receives the final tree.
template <decode::Denoiser D, Scorer S>
SearchResult run_search(const SearchConfig& cfg, const D& model, const chem::Vocab& vocab, S& scorer,
                        Tree* keep = nullptr) {
    cfg.validate();
    SearchResult res;
    Tree tree = Tree::with_root(cfg.c_init);
    std::unordered_set<std::string> seen_hits;

    auto record = [&](std::vector<Rollout>& batch) {
        for (auto& r : batch) {
            if (!res.best || r.reward > res.best->reward) res.best = r;
            if (r.gate_pass && seen_hits.insert(r.smiles).second) res.hits.push_back(r);
            res.rollouts.push_back(std::move(r));
        }
    };

    try {
        for (int it = 0; it < cfg.n_max; ++it) {
            std::vector<int> path;
            try {
                path = select(tree, cfg);
            } catch (const ExhaustedTree&) {
                res.exhausted = true;
                break;
            }
            int leaf = path.back();
            std::optional<double> reward;
            bool expanded = false;
            if (!(leaf != 0 && is_leaf_terminal(tree.at(leaf)))) {
                try {
                    leaf = expand(tree, leaf, cfg, model, static_cast<std::uint64_t>(it));
                    path.push_back(leaf);
                    expanded = true;
                } catch (const NoNovelCandidate&) {
                    // the node is now marked fully expanded; fall back to its cache
                }
            }
            if (expanded) {
                auto batch = simulate(tree, leaf, cfg, model, vocab, scorer, static_cast<std::uint64_t>(it));
                reward = *tree.at(leaf).cached_reward;
                record(batch);
            } else {
                reward = tree.at(leaf).cached_reward;
            }
            // nothing evaluated and nothing cached (a root with no novel block)
            if (reward) backpropagate(tree, path, *reward);
            res.iterations = it + 1;
        }
    } catch (const OracleUnavailable& e) {
        res.aborted = e.what();
    }
    std::stable_sort(res.hits.begin(), res.hits.end(),
                     [](const Rollout& a, const Rollout& b) { return a.reward > b.reward; });
    res.tree_size = tree.nodes.size();
    if (keep) *keep = std::move(tree);
    return res;
}

}  // namespace softmol::search
