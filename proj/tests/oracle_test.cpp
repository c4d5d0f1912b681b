#include <gtest/gtest.h>

#include <cmath>

#include "softmol/oracle.hpp"
#include "support.hpp"

using namespace softmol;
using namespace softmol::oracle;

namespace {

chem::DescriptorSet at_optimum() {
    chem::DescriptorSet d;
    d.approx_mw = 300.0;
    d.logp_proxy = 2.0;
    d.hbd_proxy = 1;
    d.ring_count = 2;
    return d;
}

ExternalOracleConfig shell(const std::string& script, double timeout = 5.0) {
    return {{"/bin/sh", "-c", script}, timeout};
}

}  // namespace

TEST(SurrogateQed, OptimumAndOneOffset) {
    EXPECT_DOUBLE_EQ(surrogate_qed(at_optimum()), 1.0);
    auto d = at_optimum();
    d.approx_mw = 600.0;  // z = 2: D = e^-4, fourth root e^-1
    EXPECT_NEAR(surrogate_qed(d), std::exp(-1.0), 1e-12);
}

TEST(SurrogateSa, FormulaValues) {
    chem::DescriptorSet one;
    one.heavy_atoms = 1;
    EXPECT_DOUBLE_EQ(surrogate_sa(one), 1.15);
    const auto chain = chem::descriptors(chem::parse_smiles("CCCCCCCCCC").mol());
    EXPECT_DOUBLE_EQ(surrogate_sa(chain), 2.5);
    // macrocycle of 12: 1 + 1.8 + 0.7 + 0.3 * 6
    const auto ring = chem::descriptors(chem::parse_smiles("C1CCCCCCCCCCC1").mol());
    EXPECT_NEAR(surrogate_sa(ring), 5.3, 1e-12);
}

TEST(SurrogateSa, ClampedToRange) {
    chem::DescriptorSet big;
    big.heavy_atoms = 200;
    EXPECT_EQ(surrogate_sa(big), 10.0);
}

TEST(SurrogateDs, Extremes) {
    const auto p = builtin_profile("parp1");
    const auto seed = chem::parse_smiles(p.seed_smiles).mol();
    const SurrogateOracle orc(p);
    EXPECT_DOUBLE_EQ(orc.score(seed).ds, -18.0);
    chem::Fingerprint empty(p.target_fp.width());
    chem::DescriptorSet far;
    far.heavy_atoms = p.size_optimum + 120;
    EXPECT_NEAR(surrogate_ds(empty, far, p), 0.0, 1e-12);
}

TEST(SurrogateOracle, DeterministicAndNulloptForInvalid) {
    const SurrogateOracle orc(builtin_profile("jak2"));
    const auto a = orc.score(std::string_view("N#Cc1ccc(cc1)Oc1ccncc1"));
    const auto b = orc.score(std::string_view("N#Cc1ccc(cc1)Oc1ccncc1"));
    ASSERT_TRUE(a);
    EXPECT_EQ(*a, *b);
    EXPECT_FALSE(orc.score(std::string_view("C1CC")));
}

TEST(Profiles, ShippedFilesMatchBuiltins) {
    for (const auto& e : kDefaultProfiles) {
        const auto file = load_profile(softmol::testing::data_file("profiles/" + std::string(e.name) + ".json"));
        const auto builtin = builtin_profile(e.name);
        EXPECT_EQ(to_json(file), to_json(builtin));
        EXPECT_LT(file.threshold_ds, 0.0);
    }
    EXPECT_THROW(builtin_profile("nope"), ConfigError);
    EXPECT_THROW(make_profile("x", 1.0, "CCO"), ConfigError);
    EXPECT_THROW(make_profile("x", -1.0, "C1CC"), ConfigError);
    auto j = to_json(builtin_profile("fa7"));
    j["size_optimum"] = 3;
    EXPECT_THROW(profile_from_json(j), ConfigError);
}

TEST(PropertyRecord, Clamping) {
    const PropertyRecord r{1.7, 0.2, -4.0};
    EXPECT_EQ(r.clamped(), (PropertyRecord{1.0, 1.0, -4.0}));
}

TEST(ExternalOracle, EchoStubPassesRecordThrough) {
    ExternalOracle o(shell("while read l; do echo '{\"qed\": 0.61, \"sa\": 3.5, \"ds\": -9.25}'; done"));
    for (int k = 0; k < 3; ++k) EXPECT_EQ(o.score("CCO"), (PropertyRecord{0.61, 3.5, -9.25}));
}

TEST(ExternalOracle, RequestLineCarriesTheSmiles) {
    // reply with the request's length in the ds field
    ExternalOracle o(shell("while read l; do echo \"{\\\"qed\\\": 0.5, \\\"sa\\\": 2, \\\"ds\\\": -${#l}}\"; done"));
    // {"smiles":"CCO"} is 16 characters
    EXPECT_EQ(o.score("CCO").ds, -16.0);
}

TEST(ExternalOracle, InvalidJsonIsAProtocolError) {
    ExternalOracle o(shell("while read l; do echo 'not json'; done"));
    EXPECT_THROW(o.score("CCO"), ProtocolError);
    ExternalOracle missing(shell("while read l; do echo '{\"qed\": 0.5}'; done"));
    EXPECT_THROW(missing.score("CCO"), ProtocolError);
}

TEST(ExternalOracle, SilentChildTimesOut) {
    ExternalOracle o(shell("sleep 30", 0.3));
    EXPECT_THROW(o.score("CCO"), OracleTimeout);
}

TEST(ExternalOracle, ExitedChildIsReported) {
    ExternalOracle o(shell("read l; exit 0"));
    EXPECT_THROW(o.score("CCO"), ChildExited);
}

TEST(ExternalOracle, MissingProgramIsUnavailable) {
    EXPECT_THROW(ExternalOracle({{"/nonexistent/softmol-oracle"}, 1.0}), OracleUnavailable);
    EXPECT_THROW(ExternalOracle({{}, 1.0}), ConfigError);
}
