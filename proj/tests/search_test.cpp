#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "softmol/search.hpp"
#include "support.hpp"

using namespace softmol;
using namespace softmol::search;
using diffusion::ProbTable;
using diffusion::SamplingParams;

namespace {

// Greedy decoding under this model always writes the same block.
struct ConstantDenoiser {
    int vocab_size() const { return 8; }
    ProbTable predict(std::span<const int> noised, std::span<const int>, double, const SamplingParams&,
                      std::span<const int>) const {
        ProbTable t{static_cast<int>(noised.size()), 8, {}};
        t.p.assign(static_cast<std::size_t>(t.rows * 8), 0.0);
        for (int j = 0; j < t.rows; ++j) {
            t.row(j)[4] = 0.7;
            t.row(j)[5] = 0.3;
        }
        return t;
    }
};

struct FixedScorer {
    PropertyRecord record;
    int calls = 0;
    std::optional<PropertyRecord> score(std::string_view) {
        ++calls;
        return record;
    }
};

Node stats(int visits, double mean, double best) {
    Node n;
    n.visits = visits;
    n.mean = mean;
    n.best = best;
    n.cap = SearchConfig{}.c_base;  // as set on expansion
    return n;
}

SearchConfig toy_search(std::uint64_t seed, int n_max) {
    SearchConfig sc;
    sc.n_max = n_max;
    sc.seed = seed;
    sc.decode.l_max = 64;
    return sc;
}

}  // namespace

TEST(Uct, DirectSubstitution) {
    // N = 3: 0.5 * 1 + 0.5 * 2 + 2.1 sqrt(ln 3 / 1)
    EXPECT_DOUBLE_EQ(uct_score(stats(1, 1.0, 2.0), 3, 0.5, 2.1), 1.5 + 2.1 * std::sqrt(std::log(3.0)));
    EXPECT_DOUBLE_EQ(uct_score(stats(4, 1.0, 2.0), 1, 0.5, 2.1), 1.5);
    EXPECT_THROW(uct_score(stats(0, 0.0, 0.0), 3, 0.5, 2.1), UnvisitedChild);
}

TEST(Uct, Boundaries) {
    const Node a = stats(2, 1.0, 9.0), b = stats(2, 3.0, 4.0);
    // lambda = 1: mean only
    EXPECT_LT(uct_score(a, 4, 1.0, 0.0), uct_score(b, 4, 1.0, 0.0));
    EXPECT_DOUBLE_EQ(uct_score(a, 4, 1.0, 0.0), 1.0);
    // lambda = 0, C = 0: best only
    EXPECT_GT(uct_score(a, 4, 0.0, 0.0), uct_score(b, 4, 0.0, 0.0));
    EXPECT_DOUBLE_EQ(uct_score(b, 4, 0.0, 0.0), 4.0);
}

// Scaling every reward and C by a > 0 scales each score by a.
TEST(Uct, ArgmaxInvariantUnderRewardAndCScaling) {
    SplitMix64 rng(21);
    for (int trial = 0; trial < 500; ++trial) {
        Tree t = Tree::with_root(20);
        t.root().visits = 50;
        for (int k = 0; k < 5; ++k) {
            const double m = 10.0 * rng.uniform() - 2.0;
            t.add_child(0, stats(1 + static_cast<int>(rng.below(10)), m, m + 3.0 * rng.uniform()));
        }
        const double lambda = rng.uniform(), c = 3.0 * rng.uniform(), a = 0.1 + 5.0 * rng.uniform();
        const int before = best_child(t, t.root(), lambda, c);
        for (int id : t.root().children) {
            t.at(id).mean *= a;
            t.at(id).best *= a;
        }
        EXPECT_EQ(best_child(t, t.root(), lambda, c * a), before);
    }
}

TEST(AdaptiveCap, Substitution) {
    Tree t = Tree::with_root(20);
    t.root().mean = 0.0;
    t.add_child(0, stats(1, 4.7, 4.7));
    t.add_child(0, stats(1, -1.0, -1.0));
    EXPECT_EQ(adaptive_cap(t, t.root(), 2.0, 8, 10), 9);  // floor(9.4)
    t.at(1).mean = 0.0;
    t.at(2).mean = 0.0;
    EXPECT_EQ(adaptive_cap(t, t.root(), 2.0, 8, 10), 8);
    t.at(1).mean = 100.0;
    EXPECT_EQ(adaptive_cap(t, t.root(), 2.0, 8, 10), 10);
}

TEST(AdaptiveCap, StaysWithinBoundsForRandomTrees) {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 300; ++trial) {
        Tree t = Tree::with_root(20);
        t.root().mean = 5.0 * rng.uniform();
        for (int k = 0; k < 4; ++k) t.add_child(0, stats(1, 20.0 * rng.uniform() - 10.0, 0.0));
        const int cap = adaptive_cap(t, t.root(), 3.0 * rng.uniform(), 8, 10);
        EXPECT_GE(cap, 8);
        EXPECT_LE(cap, 10);
    }
}

TEST(Select, FreshRootReturnsRoot) {
    Tree t = Tree::with_root(20);
    EXPECT_EQ(select(t, SearchConfig{}), std::vector<int>{0});
}

TEST(Select, TiesGoToTheEarlierChild) {
    SearchConfig cfg;
    Tree t = Tree::with_root(2);
    t.root().visits = 4;
    t.add_child(0, stats(2, 1.0, 1.0));
    t.add_child(0, stats(2, 1.0, 1.0));
    EXPECT_EQ(select(t, cfg), (std::vector<int>{0, 1}));
}

TEST(Select, UnvisitedChildFirst) {
    SearchConfig cfg;
    Tree t = Tree::with_root(2);
    t.root().visits = 4;
    t.add_child(0, stats(3, 9.0, 9.0));
    t.add_child(0, stats(0, 0.0, -1.0));
    EXPECT_EQ(select(t, cfg), (std::vector<int>{0, 2}));
}

// Three levels; scores enumerated by hand with lambda 0.5, C 2.1:
//   root (N=10, cap 2): a = (N 6, mean 2, best 4), b = (N 4, mean 3, best 3)
//     a: 3 + 2.1 sqrt(ln 10 / 6) = 4.3009..., b: 3 + 2.1 sqrt(ln 10 / 4) = 4.5933...  -> b
//   b (N=4, mean 3, children c = (N 3, mean 2.5, best 4), d = (N 1, mean 3, best 3)):
//     cap = clamp(floor(2 * 0.5), 8, 10) = 8 > 2 children, so b is not fully expanded -> stop at b
TEST(Select, HandBuiltTreeMatchesBruteForce) {
    SearchConfig cfg;
    Tree t = Tree::with_root(2);
    t.root().visits = 10;
    const int a = t.add_child(0, stats(6, 2.0, 4.0));
    const int b = t.add_child(0, stats(4, 3.0, 3.0));
    t.add_child(b, stats(3, 2.5, 4.0));
    t.add_child(b, stats(1, 3.0, 3.0));
    for (auto& n : t.nodes) n.cap = 8;
    t.root().cap = 2;
    const double sa = 3.0 + 2.1 * std::sqrt(std::log(10.0) / 6.0);
    const double sb = 3.0 + 2.1 * std::sqrt(std::log(10.0) / 4.0);
    ASSERT_GT(sb, sa);
    EXPECT_EQ(select(t, cfg), (std::vector<int>{0, b}));

    // with b saturated (C_max = 2) the walk continues to its best child:
    // c: 3.25 + 2.1 sqrt(ln 4 / 3) = 4.6775..., d: 3 + 2.1 sqrt(ln 4) = 5.4725... -> d
    cfg.c_min = 2;
    cfg.c_max = 2;
    EXPECT_EQ(select(t, cfg), (std::vector<int>{0, b, b + 2}));
}

TEST(Select, ExhaustedTree) {
    Tree t = Tree::with_root(1);
    t.root().no_novel = true;
    EXPECT_THROW(select(t, SearchConfig{}), ExhaustedTree);
}

TEST(Backpropagate, RunningStatistics) {
    Tree t = Tree::with_root(4);
    t.add_child(0, Node{});
    const std::vector<int> path{0, 1};
    backpropagate(t, path, 5.0);
    EXPECT_EQ(t.at(1).visits, 1);
    EXPECT_EQ(t.at(1).mean, 5.0);
    EXPECT_EQ(t.at(1).best, 5.0);

    Tree u = Tree::with_root(4);
    backpropagate(u, std::vector<int>{0}, 1.0);
    backpropagate(u, std::vector<int>{0}, 3.0);
    EXPECT_EQ(u.root().mean, 2.0);
    EXPECT_EQ(u.root().best, 3.0);
}

TEST(Backpropagate, MeanMatchesArithmeticMean) {
    Tree t = Tree::with_root(4);
    SplitMix64 rng(8);
    double sum = 0.0, best = -1e300;
    for (int k = 0; k < 1000; ++k) {
        const double r = 20.0 * rng.uniform() - 5.0;
        sum += r;
        best = std::max(best, r);
        backpropagate(t, std::vector<int>{0}, r);
    }
    EXPECT_NEAR(t.root().mean, sum / 1000.0, 1e-9);
    EXPECT_EQ(t.root().best, best);
    EXPECT_GE(t.root().best, t.root().mean);
}

TEST(Expand, OneChildPerCallThenNoNovelCandidate) {
    ConstantDenoiser model;
    SearchConfig cfg;
    cfg.decode.l_max = 32;
    cfg.decode.mode = decode::SelectMode::Greedy;
    Tree t = Tree::with_root(cfg.c_init);
    const int child = expand(t, 0, cfg, model, 0);
    EXPECT_EQ(t.nodes.size(), 2u);
    EXPECT_EQ(t.at(child).block.size(), 7u);  // block 0 minus BOS
    EXPECT_EQ(t.at(child).depth, 1);
    EXPECT_EQ(t.at(child).cap, cfg.c_base);
    EXPECT_THROW(expand(t, 0, cfg, model, 1), NoNovelCandidate);
    EXPECT_TRUE(t.root().no_novel);
}

TEST(ScoreRollout, GateArithmetic) {
    const GateConfig gate;
    FixedScorer pass{{0.6, 4.0, -9.2}};
    EXPECT_DOUBLE_EQ(score_rollout("CCO", gate, pass).reward, 9.2);
    FixedScorer low_qed{{0.4, 4.0, -9.2}};
    EXPECT_EQ(score_rollout("CCO", gate, low_qed).reward, -1.0);
    FixedScorer high_sa{{0.6, 5.5, -9.2}};
    EXPECT_EQ(score_rollout("CCO", gate, high_sa).reward, -1.0);
    // invalid strings never reach the scorer
    FixedScorer counted{{0.6, 4.0, -9.2}};
    EXPECT_EQ(score_rollout("C1CC", gate, counted).reward, -1.0);
    EXPECT_EQ(counted.calls, 0);
    EXPECT_EQ(score_rollout("CCO", GateConfig::unconstrained(), low_qed).reward, 9.2);
}

TEST(SearchConfig, PenaltyMustBeNegative) {
    SearchConfig cfg;
    cfg.gate.penalty = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = SearchConfig{};
    cfg.lambda = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(RunSearch, ZeroIterations) {
    const auto& d = softmol::testing::toy_data();
    const diffusion::ReferenceDenoiser model(softmol::testing::trained_toy_42());
    oracle::SurrogateOracle orc(oracle::builtin_profile("parp1"));
    const auto res = run_search(toy_search(42, 0), model, d.vocab, orc);
    EXPECT_TRUE(res.rollouts.empty());
    EXPECT_TRUE(res.hits.empty());
    EXPECT_FALSE(res.best);
}

TEST(RunSearch, InvariantsOnASmallRun) {
    const auto& d = softmol::testing::toy_data();
    const diffusion::ReferenceDenoiser model(softmol::testing::trained_toy_42());
    oracle::SurrogateOracle orc(oracle::builtin_profile("parp1"));
    const auto cfg = toy_search(44, 150);
    Tree tree;
    const auto res = run_search(cfg, model, d.vocab, orc, &tree);
    for (const auto& h : res.hits) {
        ASSERT_TRUE(h.props);
        EXPECT_GE(h.props->qed, cfg.gate.qed_min);
        EXPECT_LE(h.props->sa, cfg.gate.sa_max);
        EXPECT_TRUE(chem::is_valid_smiles(h.smiles));
    }
    for (const auto& n : tree.nodes) {
        std::set<TokenIds> blocks;
        int child_visits = 0;
        for (int id : n.children) {
            EXPECT_TRUE(blocks.insert(tree.at(id).block).second);
            child_visits += tree.at(id).visits;
            EXPECT_EQ(tree.at(id).parent, &n - tree.nodes.data());
        }
        EXPECT_GE(n.visits, child_visits);
        if (n.visits >= 1) EXPECT_GE(n.best, n.mean - 1e-12);
        if (&n != tree.nodes.data() && n.visits >= 1 && !n.children.empty()) {
            EXPECT_GE(n.cap, cfg.c_min);
            EXPECT_LE(n.cap, cfg.c_max);
        }
    }
    const auto again = run_search(cfg, model, d.vocab, orc);
    ASSERT_EQ(again.rollouts.size(), res.rollouts.size());
    for (std::size_t i = 0; i < res.rollouts.size(); ++i) EXPECT_EQ(again.rollouts[i].smiles, res.rollouts[i].smiles);
}
