#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "softmol/diffusion.hpp"
#include "support.hpp"

using namespace softmol;
using namespace softmol::diffusion;
using softmol::testing::kToyFragment;
using softmol::testing::toy_data;

TEST(Schedule, LinearValues) {
    EXPECT_EQ(LinearSchedule::eval(1.0).alpha, 0.0);
    EXPECT_EQ(LinearSchedule::eval(1.0).weight, 1.0);
    EXPECT_EQ(LinearSchedule::eval(0.5).alpha, 0.5);
    EXPECT_EQ(LinearSchedule::eval(0.5).weight, 2.0);
    EXPECT_EQ(LinearSchedule::eval(0.25).weight, 4.0);
    EXPECT_THROW(LinearSchedule::eval(0.0), OutOfRange);
    EXPECT_THROW(LinearSchedule::eval(1.5), OutOfRange);
    EXPECT_EQ(LinearSchedule::clip(0.0), LinearSchedule::kMinTime);
}

TEST(Schedule, AlphaDecreasesAndWeightStaysFinite) {
    double prev = 2.0;
    for (int k = 1; k <= 1000; ++k) {
        const auto p = LinearSchedule::eval(k / 1000.0);
        EXPECT_LT(p.alpha, prev);
        EXPECT_TRUE(std::isfinite(p.weight));
        prev = p.alpha;
    }
}

TEST(ForwardMask, Endpoints) {
    const TokenIds block{5, 6, 7, 8, 9, 10, 11, 12};
    SplitMix64 rng(3);
    EXPECT_EQ(forward_mask(block, 1.0, rng), TokenIds(8, chem::Vocab::kMask));
    int unchanged = 0;
    for (int n = 0; n < 1000; ++n) unchanged += forward_mask(block, 1e-9, rng) == block;
    EXPECT_EQ(unchanged, 1000);
}

TEST(ForwardMask, MaskRateMatchesT) {
    const TokenIds block(8, 5);
    SplitMix64 rng(4);
    int masked = 0;
    constexpr int kRuns = 20000;
    for (int n = 0; n < kRuns; ++n) {
        for (int id : forward_mask(block, 0.3, rng)) masked += id == chem::Vocab::kMask;
    }
    // binomial(160000, 0.3): sd ~ 183, so 5 sd is ~ 0.0057
    EXPECT_NEAR(masked / (8.0 * kRuns), 0.3, 0.006);
}

// Brute force from the three sub-mask predicates.
TEST(TrainMask, FourByTwo) {
    const auto m = build_train_mask(FragmentConfig{4, 2});
    ASSERT_EQ(m.rows, 8);
    // rows 0-3: noised, cols 0-3 block-diagonal, cols 4-7 strictly earlier clean blocks
    const int want[8][8] = {
        {1, 1, 0, 0, 0, 0, 0, 0}, {1, 1, 0, 0, 0, 0, 0, 0}, {0, 0, 1, 1, 1, 1, 0, 0}, {0, 0, 1, 1, 1, 1, 0, 0},
        {0, 0, 0, 0, 1, 1, 0, 0}, {0, 0, 0, 0, 1, 1, 0, 0}, {0, 0, 0, 0, 1, 1, 1, 1}, {0, 0, 0, 0, 1, 1, 1, 1},
    };
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) EXPECT_EQ(m.at(i, j), want[i][j] == 1) << i << "," << j;
    }
}

TEST(TrainMask, SingleBlockAndUnitBlocks) {
    const int L = 6;
    const auto one = build_train_mask(FragmentConfig{L, L});
    const auto unit = build_train_mask(FragmentConfig{L, 1});
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) {
            EXPECT_TRUE(one.at(i, j));
            EXPECT_FALSE(one.at(i, L + j));
            EXPECT_EQ(unit.at(i, j), i == j);
            EXPECT_FALSE(one.at(L + i, j));
        }
    }
}

TEST(InferMask, WindowEqualToBlockIsIntraBlock) {
    const auto m = build_infer_mask(8, 8);
    EXPECT_EQ(m.rows, 8);
    EXPECT_EQ(m.cols, 8);
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) EXPECT_TRUE(m.at(i, j));
    }
    EXPECT_THROW(build_infer_mask(4, 8), ConfigError);
}

TEST(Predict, ZeroParamsGiveUniformRows) {
    const auto P = PredictorParams::zeros(7, 4, 8);
    const std::vector<int> noised{5, 3, 3, 6};
    const std::vector<int> context{0, 5};
    const auto tab = predict(P, noised, context, 0.5);
    for (int j = 0; j < 4; ++j) {
        for (double p : tab.row(j)) EXPECT_DOUBLE_EQ(p, 1.0 / 7.0);
    }
}

TEST(Predict, MatchesDirectSoftmaxAndSharpensAtLowTemperature) {
    const auto& d = toy_data();
    const auto P = PredictorParams::random(d.vocab.size(), 8, 16, 5, 0.5, 0.5);
    const std::vector<int> context{0, d.ids[0][0], d.ids[0][1]};
    const std::vector<int> noised{3, d.ids[0][2], 3, 3};
    const auto plain = predict(P, noised, context, 1.0);
    const auto hot = predict(P, noised, context, 1.0, 0.5);
    const auto cold = predict(P, noised, context, 1.0, 1e-3);
    for (int j = 0; j < 4; ++j) {
        // recover logits up to a constant and renormalise by hand
        const auto row = plain.row(j);
        std::vector<double> logit(row.size());
        for (std::size_t v = 0; v < row.size(); ++v) logit[v] = std::log(row[v]);
        double z = 0.0;
        for (double l : logit) z += std::exp(l / 0.5);
        for (std::size_t v = 0; v < row.size(); ++v) EXPECT_NEAR(hot.row(j)[v], std::exp(logit[v] / 0.5) / z, 1e-12);
        const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        double zc = 0.0;
        for (double l : logit) zc += std::exp((l - logit[arg]) / 1e-3);
        for (std::size_t v = 0; v < row.size(); ++v) {
            EXPECT_NEAR(cold.row(j)[v], std::exp((logit[v] - logit[arg]) / 1e-3) / zc, 1e-9);
        }
        EXPECT_GE(cold.row(j)[arg], row[arg]);
        double sum = 0.0;
        for (double p : row) sum += p;
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Predict, NucleusKeepsTheSmallestHeadCoveringP) {
    const auto& d = toy_data();
    const auto P = PredictorParams::random(d.vocab.size(), 8, 16, 6, 1.0, 0.5);
    const std::vector<int> context{0};
    const std::vector<int> noised{3, 3};
    const auto full = predict(P, noised, context, 1.0);
    const auto nuc = predict(P, noised, context, 1.0, 1.0, 0.6);
    for (int j = 0; j < 2; ++j) {
        std::vector<double> sorted(full.row(j).begin(), full.row(j).end());
        std::sort(sorted.rbegin(), sorted.rend());
        std::size_t keep = 0;
        double mass = 0.0;
        while (mass < 0.6) mass += sorted[keep++];
        std::size_t kept = 0;
        double sum = 0.0;
        for (double p : nuc.row(j)) {
            kept += p > 0.0;
            sum += p;
        }
        EXPECT_EQ(kept, keep);
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Predict, RejectsMaskInContextAndBadSampling) {
    const auto P = PredictorParams::zeros(6, 2, 4);
    const std::vector<int> noised{3};
    EXPECT_THROW(predict(P, noised, std::vector<int>{0, 3}, 0.5), MaskInContext);
    EXPECT_THROW(predict(P, noised, std::vector<int>{0}, 0.5, 0.0), ConfigError);
    EXPECT_THROW(predict(P, noised, std::vector<int>{0}, 0.5, 1.0, 1.5), ConfigError);
}

TEST(Predict, DenoiserCacheMatchesFreshEvaluation) {
    const auto& d = toy_data();
    const auto& P = softmol::testing::trained_toy_42();
    const ReferenceDenoiser den(P);
    const std::vector<int> ctx_a{0, d.ids[1][0], d.ids[1][1]};
    const std::vector<int> ctx_b{0, d.ids[2][0]};
    const std::vector<int> noised{3, 3, d.ids[1][2], 3};
    for (const auto* ctx : {&ctx_a, &ctx_a, &ctx_b, &ctx_a}) {
        const auto cached = den.predict(noised, *ctx, 0.5, SamplingParams{}, {});
        EXPECT_EQ(cached.p, predict(P, noised, *ctx, 0.5).p);
    }
}

// One masked token, uniform predictor over |V| = 5, t = 0.5: weight 2 times
// cross-entropy ln 5.
TEST(Nelbo, SingleMaskedTokenUniformPredictor) {
    const auto P = PredictorParams::zeros(5, 2, 4);
    const auto bt = pad_and_partition(TokenIds{4}, FragmentConfig{4, 4});
    BlockNoise noise{{0.5}, {0, 1, 0, 0}};
    const auto rep = nelbo_loss(P, bt, noise);
    EXPECT_NEAR(rep.nelbo, 2.0 * std::log(5.0), 1e-12);
    EXPECT_EQ(rep.masked_count[0], 1);
}

TEST(Nelbo, NothingMaskedGivesZeroLossAndGradient) {
    const auto& d = toy_data();
    const auto P = PredictorParams::random(d.vocab.size(), 8, 16, 1);
    const auto bt = pad_and_partition(d.ids[0], kToyFragment);
    BlockNoise noise{std::vector<double>(8, 1e-4), std::vector<std::uint8_t>(64, 0)};
    EXPECT_EQ(nelbo_loss(P, bt, noise).nelbo, 0.0);
    const auto g = loss_gradient(P, bt, noise);
    for (std::size_t i = 0; i < g.size(); ++i) ASSERT_EQ(g.coord(i), 0.0);
}

TEST(Nelbo, TotalIsSumOfBlocksAndLoopMatchesVectorized) {
    const auto& d = toy_data();
    const auto P = PredictorParams::random(d.vocab.size(), 8, 16, 2, 0.3, 0.3);
    const auto mask = build_train_mask(kToyFragment);
    for (int n = 0; n < 20; ++n) {
        const auto bt = pad_and_partition(d.ids[static_cast<std::size_t>(n) * 7], kToyFragment);
        const auto noise = draw_noise(kToyFragment, 11, static_cast<std::uint64_t>(n));
        const auto a = nelbo_loss(P, bt, noise);
        double sum = 0.0;
        for (double x : a.per_block) sum += x;
        EXPECT_NEAR(a.nelbo, sum, 1e-9 * std::abs(sum));
        EXPECT_NEAR(a.nelbo, nelbo_loss_vectorized(P, bt, noise, mask).nelbo, 1e-9);
    }
}

TEST(Nelbo, RejectsMaskedInput) {
    const auto P = PredictorParams::zeros(6, 2, 4);
    auto bt = pad_and_partition(TokenIds{4}, FragmentConfig{4, 4});
    bt.ids[1] = chem::Vocab::kMask;
    bt.state[1] = MaskState::Masked;
    EXPECT_ANY_THROW(nelbo_loss(P, bt, BlockNoise{{0.5}, {0, 1, 0, 0}}));
}

TEST(Noise, AntitheticPairsAndBosNeverMasked) {
    const FragmentConfig cfg{64, 8};
    for (std::uint64_t ex = 0; ex < 20; ex += 2) {
        const auto a = draw_noise(cfg, 3, ex);
        const auto b = draw_noise(cfg, 3, ex + 1);
        for (int k = 0; k < cfg.blocks(); ++k) {
            EXPECT_NEAR(a.t[k] + b.t[k], 1.0, 1e-4 + 1e-12);
            EXPECT_GE(a.t[k], LinearSchedule::kMinTime);
        }
        EXPECT_EQ(a.masked[0], 0);
        EXPECT_EQ(b.masked[0], 0);
    }
}

TEST(Gradient, MatchesCentralDifferencesOnASmallModel) {
    const auto& d = toy_data();
    const auto P = PredictorParams::random(d.vocab.size(), 4, 8, 13, 0.5, 0.5);
    const FragmentConfig cfg{32, 8};
    const auto bt = pad_and_partition(d.ids[10], cfg);
    BlockNoise noise{{0.6, 0.5, 0.7, 0.9}, std::vector<std::uint8_t>(32, 0)};
    for (int p = 1; p < 32; p += 2) noise.masked[p] = 1;
    const auto g = loss_gradient(P, bt, noise);
    constexpr double h = 1e-6;
    double worst = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < P.size(); i += 7) {
        auto plus = P, minus = P;
        plus.coord(i) += h;
        minus.coord(i) -= h;
        const double fd = (nelbo_loss(plus, bt, noise).nelbo - nelbo_loss(minus, bt, noise).nelbo) / (2 * h);
        worst = std::max(worst, std::abs(fd - g.coord(i)));
        scale = std::max(scale, std::abs(fd));
    }
    // absolute error against the largest gradient entry checked
    EXPECT_LT(worst, 1e-6 * scale);
}

TEST(Train, ZeroEpochsLeaveParamsUnchanged) {
    const auto& d = toy_data();
    const auto P = PredictorParams::random(d.vocab.size(), 4, 8, 1);
    TrainOptions opt;
    opt.epochs = 0;
    EXPECT_EQ(train(P, d.ids, kToyFragment, opt).params, P);
}

TEST(Train, FixedSeedIsBitIdenticalAndLossFalls) {
    const auto& d = toy_data();
    const std::vector<TokenIds> corpus(d.ids.begin(), d.ids.begin() + 40);
    const auto P = PredictorParams::random(d.vocab.size(), 8, 16, 3);
    TrainOptions opt;
    opt.epochs = 3;
    const auto a = train(P, corpus, kToyFragment, opt);
    const auto b = train(P, corpus, kToyFragment, opt);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
    EXPECT_LT(a.epoch_loss.back(), a.epoch_loss.front());
    EXPECT_TRUE(a.params.finite());
}

TEST(Train, SgdAndEmptyCorpus) {
    const auto& d = toy_data();
    const auto P = PredictorParams::random(d.vocab.size(), 4, 8, 1);
    TrainOptions opt;
    opt.optimizer = Optimizer::Sgd;
    opt.epochs = 1;
    const std::vector<TokenIds> corpus(d.ids.begin(), d.ids.begin() + 8);
    EXPECT_NE(train(P, corpus, kToyFragment, opt).params, P);
    EXPECT_THROW(train(P, std::vector<TokenIds>{}, kToyFragment, opt), EmptyCorpus);
}

TEST(Checkpoint, RoundTripAndHashCheck) {
    const auto& d = toy_data();
    Checkpoint ck{d.vocab, kToyFragment, PredictorParams::random(d.vocab.size(), 4, 8, 1), 42};
    const auto path = (std::filesystem::temp_directory_path() / "softmol_ck_test.json").string();
    save_checkpoint(ck, path);
    const auto back = load_checkpoint(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.params, ck.params);
    EXPECT_EQ(back.vocab.tokens(), ck.vocab.tokens());
    EXPECT_EQ(back.seed, 42u);

    auto j = to_json(ck);
    j["vocab_hash"] = "0000000000000000";
    EXPECT_THROW(checkpoint_from_json(j), ConfigError);
}

TEST(Checkpoint, ShippedReferenceMatchesDefaultTraining) {
    const auto ck = load_checkpoint(softmol::testing::data_file("reference_ckpt.json"));
    EXPECT_EQ(ck.vocab.tokens(), toy_data().vocab.tokens());
    EXPECT_EQ(ck.params, softmol::testing::trained_toy_42());
}
