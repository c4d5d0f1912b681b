#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "softmol/softmol.hpp"

namespace softmol::testing {

inline std::string data_file(const std::string& name) { return std::string(SOFTMOL_DATA_DIR) + "/" + name; }

struct ToyData {
    std::vector<std::string> smiles;
    chem::Vocab vocab;
    std::vector<TokenIds> ids;
};

// The shipped 500-molecule curated toy corpus, tokenized.
inline const ToyData& toy_data() {
    static const ToyData data = [] {
        ToyData d;
        std::ifstream in(data_file("toy_corpus.smi"));
        d.smiles = chem::read_smiles_lines(in);
        std::vector<chem::TokenSeq> toks;
        for (const auto& s : d.smiles) toks.push_back(chem::tokenize(s));
        d.vocab = chem::Vocab::from_corpus(toks);
        for (const auto& t : toks) d.ids.push_back(d.vocab.encode(t));
        return d;
    }();
    return data;
}

inline constexpr FragmentConfig kToyFragment{64, 8};

// Reference predictor trained with the default options (5 epochs) and `seed`.
inline diffusion::PredictorParams train_toy(std::uint64_t seed, int epochs = 5) {
    const auto& d = toy_data();
    diffusion::TrainOptions opt;
    opt.seed = seed;
    opt.epochs = epochs;
    auto init = diffusion::PredictorParams::random(d.vocab.size(), 32, 64, seed);
    return diffusion::train(std::move(init), d.ids, kToyFragment, opt).params;
}

inline const diffusion::PredictorParams& trained_toy_42() {
    static const diffusion::PredictorParams p = train_toy(42);
    return p;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace softmol::testing
