#include <gtest/gtest.h>

#include <algorithm>

#include "softmol/metrics.hpp"
#include "support.hpp"

using namespace softmol;
using namespace softmol::metrics;

namespace {

chem::Fingerprint bits(std::initializer_list<std::size_t> on) {
    chem::Fingerprint fp(64);
    for (auto b : on) fp.set(b);
    return fp;
}

ScoredMolecule hit(double ds, chem::Fingerprint fp = bits({1})) {
    return {"C", {0.7, 3.0, ds}, std::move(fp)};
}

oracle::SurrogateOracle parp1() { return oracle::SurrogateOracle(oracle::builtin_profile("parp1")); }

}  // namespace

TEST(StandardMetrics, IdenticalSet) {
    const std::vector<std::string> s(10, "CC(=O)Nc1ccccc1");
    const auto r = standard_metrics(s, parp1());
    EXPECT_EQ(r.validity, 1.0);
    EXPECT_DOUBLE_EQ(r.uniqueness, 0.1);
    EXPECT_EQ(r.diversity, 0.0);
}

TEST(StandardMetrics, OneInvalidAmongTen) {
    std::vector<std::string> s(10, "CCO");
    s.push_back("C1CC");
    EXPECT_DOUBLE_EQ(standard_metrics(s, parp1()).validity, 10.0 / 11.0);
    EXPECT_THROW(standard_metrics(std::vector<std::string>{}, parp1()), EmptySet);
}

TEST(StandardMetrics, FourMoleculesAgainstPairwiseOracle) {
    const std::vector<std::string> s{"NC(=O)c1ccc(cc1)C1CCNCC1", "CC(=O)Nc1ccc(cc1)N1CCOCC1", "ClC(Cl)(Cl)c1ncncn1",
                                     "c1ccccc1"};
    const auto orc = parp1();
    const auto r = standard_metrics(s, orc);
    std::vector<chem::Fingerprint> fps;
    std::size_t quality = 0, filter = 0;
    for (const auto& m : s) {
        const auto mol = chem::parse_smiles(m).mol();
        fps.push_back(chem::fingerprint(mol));
        const auto p = orc.score(mol);
        quality += p.qed >= 0.6 && p.sa <= 4.0;
        filter += p.qed > 0.5 && p.sa < 5.0;
    }
    double sum = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = i + 1; j < 4; ++j) {
            sum += chem::tanimoto(fps[i], fps[j]);
            ++pairs;
        }
    }
    EXPECT_EQ(r.unique, 4u);
    EXPECT_EQ(r.diversity, 1.0 - sum / pairs);
    EXPECT_EQ(r.quality, quality / 4.0);
    EXPECT_EQ(r.docking_filter, filter / 4.0);
}

TEST(StandardMetrics, FractionsStayInUnitInterval) {
    const auto& d = softmol::testing::toy_data();
    std::vector<std::string> s(d.smiles.begin(), d.smiles.begin() + 60);
    s.push_back("C1CC");
    s.push_back(s.front());
    const auto r = evaluate(s, parp1());
    for (double f : {r.validity, r.uniqueness, r.quality, r.docking_filter, r.diversity, r.hit_ratio}) {
        EXPECT_GE(f, 0.0);
        EXPECT_LE(f, 1.0);
    }
    EXPECT_LE(r.circles, r.hit_count);
}

TEST(HitMetrics, SingletonAndAbsent) {
    const std::vector<ScoredMolecule> one{hit(-11.0)};
    EXPECT_EQ(hit_metrics(one, -10.0).novel_top_hit, -11.0);
    const std::vector<ScoredMolecule> none{hit(-9.0)};
    const auto h = hit_metrics(none, -10.0);
    EXPECT_FALSE(h.novel_top_hit.has_value());
    EXPECT_EQ(h.hit_ratio, 0.0);
    EXPECT_EQ(h.circles, 0u);
}

TEST(HitMetrics, TopFivePercentOfAHundredHits) {
    SplitMix64 rng(12);
    std::vector<ScoredMolecule> mols;
    std::vector<double> ds;
    for (int k = 0; k < 100; ++k) {
        ds.push_back(-10.5 - 5.0 * rng.uniform());
        mols.push_back(hit(ds.back()));
    }
    std::sort(ds.begin(), ds.end());
    const double want = (ds[0] + ds[1] + ds[2] + ds[3] + ds[4]) / 5.0;
    const auto h = hit_metrics(mols, -10.0);
    EXPECT_DOUBLE_EQ(*h.novel_top_hit, want);
    EXPECT_EQ(h.hit_ratio, 1.0);
}

TEST(HitMetrics, GateAppliesToHits) {
    std::vector<ScoredMolecule> mols{hit(-12.0), hit(-12.0), hit(-12.0)};
    mols[1].props.qed = 0.5;  // filter needs QED > 0.5
    mols[2].props.sa = 5.0;   // and SA < 5
    EXPECT_EQ(hit_metrics(mols, -10.0).hits.size(), 1u);
}

TEST(Circles, Extremes) {
    const std::vector<chem::Fingerprint> same(5, bits({1, 2, 3}));
    EXPECT_EQ(circles(same), 1u);
    const std::vector<chem::Fingerprint> disjoint{bits({1}), bits({2}), bits({3}), bits({4})};
    EXPECT_EQ(circles(disjoint), 4u);
    EXPECT_THROW(circles(same, 1.0), ConfigError);
}

// Greedy trace at threshold 0.75:
//   A {1,2,3,4}            -> center
//   B {1,2,3,4,5}  T(A)=4/5  = 0.8   >= 0.75 -> covered
//   C {1,2,3}      T(A)=3/4  = 0.75  >= 0.75 -> covered
//   D {1,2,6,7}    T(A)=2/6          -> center
//   E {6,7,8}      T(A)=0, T(D)=2/5  -> center
//   F {6,7,8,9}    T(A)=0, T(D)=2/6, T(E)=3/4 = 0.75 -> covered
TEST(Circles, CraftedTrace) {
    const std::vector<chem::Fingerprint> fps{bits({1, 2, 3, 4}), bits({1, 2, 3, 4, 5}), bits({1, 2, 3}),
                                             bits({1, 2, 6, 7}), bits({6, 7, 8}),       bits({6, 7, 8, 9})};
    EXPECT_EQ(circles(fps, 0.75), 3u);
}

TEST(Diversity, SmallSets) {
    EXPECT_EQ(diversity(std::vector<chem::Fingerprint>{}), 0.0);
    EXPECT_EQ(diversity(std::vector<chem::Fingerprint>{bits({1})}), 0.0);
    // T = 2/4 between the two
    EXPECT_DOUBLE_EQ(diversity(std::vector<chem::Fingerprint>{bits({1, 2, 3}), bits({2, 3, 4})}), 0.5);
}

TEST(EvalReport, JsonMarksMissingTopHitAsNull) {
    const auto j = to_json(evaluate(std::vector<std::string>{"CCO"}, parp1()));
    EXPECT_TRUE(j.at("novel_top_hit").is_null());
    EXPECT_EQ(j.at("total"), 1);
}
