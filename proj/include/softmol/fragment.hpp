#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "softmol/chem.hpp"
#include "softmol/error.hpp"

namespace softmol {

using chem::Vocab;
using TokenIds = std::vector<int>;

// Soft-fragment geometry: a padded sequence of `length` tokens cut into
// length / block contiguous blocks. Block boundaries depend only on position.
struct FragmentConfig {
    int length = 64;
    int block = 8;

    int blocks() const noexcept { return block > 0 ? length / block : 0; }

    void validate() const {
        if (block < 1 || length < block || length % block != 0) {
            throw ConfigError("fragment config needs K >= 1, L >= K and L % K == 0 (L=" +
                              std::to_string(length) + ", K=" + std::to_string(block) + ")");
        }
    }

    int block_of(int position) const noexcept { return position / block; }
    int block_begin(int b) const noexcept { return b * block; }
    int block_end(int b) const noexcept { return (b + 1) * block; }
};

enum class MaskState : std::uint8_t { Clean, Masked, Frozen };

struct BlockTensor {
    std::vector<int> ids;
    std::vector<MaskState> state;
    FragmentConfig config;

    std::span<const int> block(int b) const {
        return std::span<const int>(ids).subspan(static_cast<std::size_t>(config.block_begin(b)),
                                                 static_cast<std::size_t>(config.block));
    }

    bool fully_clean() const noexcept {
        for (auto s : state) {
            if (s == MaskState::Masked) return false;
        }
        return true;
    }
};

// [BOS, tokens..., EOS, PAD...] of exactly cfg.length ids.
inline BlockTensor pad_and_partition(std::span<const int> tokens, const FragmentConfig& cfg) {
    cfg.validate();
    if (tokens.size() + 2 > static_cast<std::size_t>(cfg.length)) {
        throw TooLong(tokens.size(), static_cast<std::size_t>(cfg.length));
    }
    BlockTensor bt;
    bt.config = cfg;
    bt.ids.reserve(static_cast<std::size_t>(cfg.length));
    bt.ids.push_back(Vocab::kBos);
    bt.ids.insert(bt.ids.end(), tokens.begin(), tokens.end());
    bt.ids.push_back(Vocab::kEos);
    bt.ids.resize(static_cast<std::size_t>(cfg.length), Vocab::kPad);
    bt.state.assign(bt.ids.size(), MaskState::Clean);
    return bt;
}

// Molecule tokens back out of a tensor: leading BOS dropped, everything from
// the first EOS on discarded, stray PAD removed.
inline TokenIds reassemble_ids(std::span<const int> ids) {
    TokenIds out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id == Vocab::kMask) throw IncompleteSequence();
        if (id == Vocab::kEos) break;
        if (id == Vocab::kBos || id == Vocab::kPad) continue;
        out.push_back(id);
    }
    return out;
}

inline TokenIds reassemble(const BlockTensor& bt) {
    for (auto s : bt.state) {
        if (s == MaskState::Masked) throw IncompleteSequence();
    }
    return reassemble_ids(bt.ids);
}

}  // namespace softmol
