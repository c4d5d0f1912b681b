#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "softmol/error.hpp"

namespace softmol::chem {

// ---------------------------------------------------------------------------
// Tokens and vocabulary
// ---------------------------------------------------------------------------

enum class TokenKind : std::uint8_t {
    Atom,
    BracketAtom,
    Bond,
    RingBond,
    BranchOpen,
    BranchClose,
    Dot,
    BOS,
    EOS,
    PAD,
    MASK,
};

struct Token {
    TokenKind kind;
    std::string text;

    friend bool operator==(const Token&, const Token&) = default;
};

using TokenSeq = std::vector<Token>;

inline constexpr std::string_view kBosText = "[BOS]";
inline constexpr std::string_view kEosText = "[EOS]";
inline constexpr std::string_view kPadText = "[PAD]";
inline constexpr std::string_view kMaskText = "[MASK]";

inline bool is_control(TokenKind k) noexcept {
    return k == TokenKind::BOS || k == TokenKind::EOS || k == TokenKind::PAD ||
           k == TokenKind::MASK;
}

inline bool is_ring_bond_text(std::string_view t) noexcept {
    if (t.size() == 1) {
        return t[0] >= '0' && t[0] <= '9';
    }
    return t.size() == 3 && t[0] == '%' && t[1] >= '0' && t[1] <= '9' && t[2] >= '0' &&
           t[2] <= '9';
}

// Kind of a token given only its surface text (used when decoding model ids).
inline TokenKind classify(std::string_view t) {
    if (t == kBosText) return TokenKind::BOS;
    if (t == kEosText) return TokenKind::EOS;
    if (t == kPadText) return TokenKind::PAD;
    if (t == kMaskText) return TokenKind::MASK;
    if (t.size() >= 2 && t.front() == '[' && t.back() == ']') return TokenKind::BracketAtom;
    if (is_ring_bond_text(t)) return TokenKind::RingBond;
    if (t == "(") return TokenKind::BranchOpen;
    if (t == ")") return TokenKind::BranchClose;
    if (t == ".") return TokenKind::Dot;
    if (t == "-" || t == "=" || t == "#" || t == ":" || t == "/" || t == "\\") return TokenKind::Bond;
    return TokenKind::Atom;
}

inline Token make_token(std::string_view text) { return Token{classify(text), std::string(text)}; }

// Splits a SMILES string into atom-level tokens. Two-letter organic elements,
// bracket atoms and "%NN" ring bonds are single tokens. The control strings
// "[BOS]", "[EOS]", "[PAD]" and "[MASK]" are recognised as control tokens so
// that model output can be round-tripped through text.
inline TokenSeq tokenize(std::string_view text) {
    TokenSeq out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        const char c = text[i];
        if (static_cast<unsigned char>(c) > 127) {
            throw UnknownCharacter(i);
        }
        switch (c) {
        case 'C':
            if (i + 1 < n && text[i + 1] == 'l') {
                out.push_back({TokenKind::Atom, "Cl"});
                i += 2;
            } else {
                out.push_back({TokenKind::Atom, "C"});
                ++i;
            }
            break;
        case 'B':
            if (i + 1 < n && text[i + 1] == 'r') {
                out.push_back({TokenKind::Atom, "Br"});
                i += 2;
            } else {
                out.push_back({TokenKind::Atom, "B"});
                ++i;
            }
            break;
        case 'N': case 'O': case 'P': case 'S': case 'F': case 'I':
        case 'b': case 'c': case 'n': case 'o': case 'p': case 's':
            out.push_back({TokenKind::Atom, std::string(1, c)});
            ++i;
            break;
        case '[': {
            const std::size_t close = text.find(']', i + 1);
            if (close == std::string_view::npos) {
                throw UnknownCharacter(i);
            }
            for (std::size_t k = i + 1; k < close; ++k) {
                if (text[k] == '[' || static_cast<unsigned char>(text[k]) > 127) {
                    throw UnknownCharacter(k);
                }
            }
            out.push_back(make_token(text.substr(i, close - i + 1)));
            i = close + 1;
            break;
        }
        case '-': case '=': case '#': case ':': case '/': case '\\':
            out.push_back({TokenKind::Bond, std::string(1, c)});
            ++i;
            break;
        case '(':
            out.push_back({TokenKind::BranchOpen, "("});
            ++i;
            break;
        case ')':
            out.push_back({TokenKind::BranchClose, ")"});
            ++i;
            break;
        case '.':
            out.push_back({TokenKind::Dot, "."});
            ++i;
            break;
        case '%':
            if (i + 2 < n && std::isdigit(static_cast<unsigned char>(text[i + 1])) &&
                std::isdigit(static_cast<unsigned char>(text[i + 2]))) {
                out.push_back({TokenKind::RingBond, std::string(text.substr(i, 3))});
                i += 3;
            } else {
                throw UnknownCharacter(i);
            }
            break;
        default:
            if (c >= '0' && c <= '9') {
                out.push_back({TokenKind::RingBond, std::string(1, c)});
                ++i;
            } else {
                throw UnknownCharacter(i);
            }
        }
    }
    return out;
}

inline std::string join(std::span<const Token> tokens) {
    std::string s;
    for (const auto& t : tokens) {
        s += t.text;
    }
    return s;
}

// Molecule body of a model sequence: BOS, PAD and MASK dropped, everything
// from the first EOS on discarded.
inline TokenSeq strip_control(std::span<const Token> tokens) {
    TokenSeq out;
    for (const auto& t : tokens) {
        if (t.kind == TokenKind::EOS) {
            break;
        }
        if (!is_control(t.kind)) {
            out.push_back(t);
        }
    }
    return out;
}

class Vocab {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;
    static constexpr int kMask = 3;

    Vocab() : Vocab(std::vector<std::string>{}) {}

    // `body` lists the non-control tokens; control tokens are prepended at
    // fixed ids 0..3.
    explicit Vocab(const std::vector<std::string>& body) {
        tokens_ = {std::string(kBosText), std::string(kEosText), std::string(kPadText),
                   std::string(kMaskText)};
        for (const auto& t : body) {
            if (is_control(classify(t))) {
                throw ConfigError("control token listed in vocabulary body: " + t);
            }
            tokens_.push_back(t);
        }
        for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
            if (!index_.emplace(tokens_[i], i).second) {
                throw ConfigError("duplicate vocabulary token: " + tokens_[i]);
            }
        }
    }

    // Builds the vocabulary from the token set of a corpus, sorted so that the
    // id assignment does not depend on corpus order.
    static Vocab from_corpus(std::span<const TokenSeq> corpus) {
        std::set<std::string> seen;
        for (const auto& seq : corpus) {
            for (const auto& t : seq) {
                if (!is_control(t.kind)) {
                    seen.insert(t.text);
                }
            }
        }
        return Vocab(std::vector<std::string>(seen.begin(), seen.end()));
    }

    // Full token list including the four control tokens.
    static Vocab from_tokens(const std::vector<std::string>& all) {
        if (all.size() < 4 || all[kBos] != kBosText || all[kEos] != kEosText ||
            all[kPad] != kPadText || all[kMask] != kMaskText) {
            throw ConfigError("vocabulary must start with [BOS] [EOS] [PAD] [MASK]");
        }
        return Vocab(std::vector<std::string>(all.begin() + 4, all.end()));
    }

    int size() const noexcept { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    bool contains(std::string_view t) const { return index_.count(std::string(t)) != 0; }

    int id(std::string_view t) const {
        auto it = index_.find(std::string(t));
        if (it == index_.end()) {
            throw UnknownToken(std::string(t));
        }
        return it->second;
    }

    std::vector<int> encode(std::span<const Token> tokens) const {
        std::vector<int> ids;
        ids.reserve(tokens.size());
        for (const auto& t : tokens) {
            ids.push_back(id(t.text));
        }
        return ids;
    }

    TokenSeq decode(std::span<const int> ids) const {
        TokenSeq out;
        out.reserve(ids.size());
        for (int i : ids) {
            out.push_back(make_token(token(i)));
        }
        return out;
    }

    // FNV-1a over the token list; stored in checkpoints to catch vocab drift.
    std::uint64_t hash() const noexcept {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& t : tokens_) {
            for (unsigned char c : t) {
                h = (h ^ c) * 0x100000001b3ULL;
            }
            h = (h ^ 0xffU) * 0x100000001b3ULL;
        }
        return h;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Element data
// ---------------------------------------------------------------------------

struct ElementInfo {
    std::string_view symbol;
    double mass;
    int max_valence;
};

// Standard atomic weights; the valence column is the ceiling used for
// validation of neutral atoms (organic subset per the project valence table,
// conservative values elsewhere).
inline constexpr std::array<ElementInfo, 62> kElements{{
    {"H", 1.008, 1},    {"He", 4.0026, 0},  {"Li", 6.94, 1},     {"Be", 9.0122, 2},
    {"B", 10.81, 3},    {"C", 12.011, 4},   {"N", 14.007, 3},    {"O", 15.999, 2},
    {"F", 18.998, 1},   {"Ne", 20.180, 0},  {"Na", 22.990, 1},   {"Mg", 24.305, 2},
    {"Al", 26.982, 3},  {"Si", 28.085, 4},  {"P", 30.974, 5},    {"S", 32.06, 6},
    {"Cl", 35.45, 1},   {"Ar", 39.948, 0},  {"K", 39.098, 1},    {"Ca", 40.078, 2},
    {"Sc", 44.956, 3},  {"Ti", 47.867, 4},  {"V", 50.942, 5},    {"Cr", 51.996, 6},
    {"Mn", 54.938, 7},  {"Fe", 55.845, 6},  {"Co", 58.933, 6},   {"Ni", 58.693, 6},
    {"Cu", 63.546, 4},  {"Zn", 65.38, 2},   {"Ga", 69.723, 3},   {"Ge", 72.630, 4},
    {"As", 74.922, 5},  {"Se", 78.971, 6},  {"Br", 79.904, 1},   {"Kr", 83.798, 0},
    {"Rb", 85.468, 1},  {"Sr", 87.62, 2},   {"Y", 88.906, 3},    {"Zr", 91.224, 4},
    {"Nb", 92.906, 5},  {"Mo", 95.95, 6},   {"Tc", 98.0, 7},     {"Ru", 101.07, 8},
    {"Rh", 102.91, 6},  {"Pd", 106.42, 4},  {"Ag", 107.87, 2},   {"Cd", 112.41, 2},
    {"In", 114.82, 3},  {"Sn", 118.71, 4},  {"Sb", 121.76, 5},   {"Te", 127.60, 6},
    {"I", 126.90, 1},   {"Xe", 131.29, 8},  {"Cs", 132.91, 1},   {"Ba", 137.33, 2},
    {"Pt", 195.08, 6},  {"Au", 196.97, 3},  {"Hg", 200.59, 2},   {"Tl", 204.38, 3},
    {"Pb", 207.2, 4},   {"Bi", 208.98, 5},
}};

inline const ElementInfo* find_element(std::string_view symbol) noexcept {
    for (const auto& e : kElements) {
        if (e.symbol == symbol) {
            return &e;
        }
    }
    return nullptr;
}

// Allowed valences for organic-subset atoms written without brackets.
inline std::span<const int> organic_valences(std::string_view element) noexcept {
    static constexpr int b[] = {3};
    static constexpr int c[] = {4};
    static constexpr int n[] = {3};
    static constexpr int o[] = {2};
    static constexpr int p[] = {3, 5};
    static constexpr int s[] = {2, 4, 6};
    static constexpr int x[] = {1};
    if (element == "B") return b;
    if (element == "C") return c;
    if (element == "N") return n;
    if (element == "O") return o;
    if (element == "P") return p;
    if (element == "S") return s;
    if (element == "F" || element == "Cl" || element == "Br" || element == "I") return x;
    return {};
}

// Valence ceiling for an atom with the given formal charge.
inline int max_valence(std::string_view element, int charge) noexcept {
    const ElementInfo* info = find_element(element);
    int base = info ? info->max_valence : 8;
    if (charge == 0) {
        return base;
    }
    if (element == "N") {
        return charge == 1 ? 5 : std::max(0, 3 + charge);
    }
    if (element == "O" || element == "S" || element == "P" || element == "Se") {
        return std::max(0, base + charge);
    }
    if (element == "B") {
        return std::max(0, base - charge);
    }
    if (element == "C") {
        return std::max(0, base - std::abs(charge));
    }
    return base;
}

inline bool is_halogen(std::string_view e) noexcept {
    return e == "F" || e == "Cl" || e == "Br" || e == "I";
}

// ---------------------------------------------------------------------------
// Parsing and validation
// ---------------------------------------------------------------------------

struct Atom {
    std::string element;
    int charge = 0;
    int hydrogens = 0;  // explicit for bracket atoms, implicit otherwise
    bool aromatic = false;
    bool bracket = false;
    std::string stereo;
    std::size_t token_pos = 0;
};

struct Bond {
    int a = 0;
    int b = 0;
    double order = 1.0;  // 1, 1.5 (aromatic), 2 or 3
    bool ring_closure = false;
    std::string stereo;  // "/" or "\\" when written

    bool aromatic() const noexcept { return order == 1.5; }
};

struct RingClosure {
    int digit = 0;
    int open_atom = 0;
    int close_atom = 0;
};

struct ParsedMol {
    std::vector<Atom> atoms;
    std::vector<Bond> bonds;
    std::vector<RingClosure> ring_closures;
    std::vector<int> branch_depth;  // depth after each token

    // neighbour lists as (atom, bond index)
    std::vector<std::vector<std::pair<int, int>>> adjacency() const {
        std::vector<std::vector<std::pair<int, int>>> adj(atoms.size());
        for (int i = 0; i < static_cast<int>(bonds.size()); ++i) {
            adj[bonds[i].a].push_back({bonds[i].b, i});
            adj[bonds[i].b].push_back({bonds[i].a, i});
        }
        return adj;
    }
};

enum class FailureKind : std::uint8_t {
    UnclosedRing,
    UnbalancedBranch,
    DanglingBond,
    ValenceExceeded,
    EmptyMolecule,
    InvalidAromaticity,
    Malformed,
};

inline std::string_view to_string(FailureKind k) noexcept {
    switch (k) {
    case FailureKind::UnclosedRing: return "UnclosedRing";
    case FailureKind::UnbalancedBranch: return "UnbalancedBranch";
    case FailureKind::DanglingBond: return "DanglingBond";
    case FailureKind::ValenceExceeded: return "ValenceExceeded";
    case FailureKind::EmptyMolecule: return "EmptyMolecule";
    case FailureKind::InvalidAromaticity: return "InvalidAromaticity";
    case FailureKind::Malformed: return "Malformed";
    }
    return "?";
}

struct ValidationFailure {
    FailureKind kind;
    std::size_t position = 0;  // token index
    int detail = -1;           // ring digit or atom index, where meaningful
    std::string message;
};

class ParseResult {
public:
    ParseResult(ParsedMol mol) : value_(std::move(mol)) {}
    ParseResult(ValidationFailure f) : value_(std::move(f)) {}

    bool ok() const noexcept { return std::holds_alternative<ParsedMol>(value_); }
    explicit operator bool() const noexcept { return ok(); }

    const ParsedMol& mol() const { return std::get<ParsedMol>(value_); }
    ParsedMol& mol() { return std::get<ParsedMol>(value_); }
    const ValidationFailure& failure() const { return std::get<ValidationFailure>(value_); }

private:
    std::variant<ParsedMol, ValidationFailure> value_;
};

namespace detail {

inline double bond_order_of(std::string_view sym) noexcept {
    if (sym == "=") return 2.0;
    if (sym == "#") return 3.0;
    if (sym == ":") return 1.5;
    return 1.0;  // "-", "/", "\\"
}

inline bool is_element_symbol(std::string_view s) { return find_element(s) != nullptr; }

// Parses the inside of a bracket atom. Returns false on malformed content.
inline bool parse_bracket(std::string_view body, Atom& atom) {
    std::size_t i = 0;
    const std::size_t n = body.size();
    while (i < n && std::isdigit(static_cast<unsigned char>(body[i]))) {
        ++i;  // isotope, ignored
    }
    if (i >= n) {
        return false;
    }
    if (std::islower(static_cast<unsigned char>(body[i]))) {
        static constexpr std::string_view two[] = {"se", "as", "te"};
        bool matched = false;
        for (auto t : two) {
            if (body.substr(i, 2) == t) {
                atom.element = std::string(1, static_cast<char>(std::toupper(t[0]))) + t[1];
                i += 2;
                matched = true;
                break;
            }
        }
        if (!matched) {
            const char c = body[i];
            if (c != 'b' && c != 'c' && c != 'n' && c != 'o' && c != 'p' && c != 's') {
                return false;
            }
            atom.element = std::string(1, static_cast<char>(std::toupper(c)));
            ++i;
        }
        atom.aromatic = true;
    } else if (std::isupper(static_cast<unsigned char>(body[i]))) {
        if (i + 1 < n && std::islower(static_cast<unsigned char>(body[i + 1])) &&
            is_element_symbol(body.substr(i, 2))) {
            atom.element = std::string(body.substr(i, 2));
            i += 2;
        } else if (is_element_symbol(body.substr(i, 1))) {
            atom.element = std::string(body.substr(i, 1));
            i += 1;
        } else {
            return false;
        }
    } else {
        return false;
    }
    if (i < n && body[i] == '@') {
        const std::size_t start = i;
        ++i;
        if (i < n && body[i] == '@') {
            ++i;
        } else if (i + 1 < n && std::isupper(static_cast<unsigned char>(body[i]))) {
            const auto cls = body.substr(i, 2);
            if (cls != "TH" && cls != "AL" && cls != "SP" && cls != "TB" && cls != "OH") {
                return false;
            }
            i += 2;
            const std::size_t d0 = i;
            while (i < n && std::isdigit(static_cast<unsigned char>(body[i]))) ++i;
            if (i == d0) return false;
        }
        atom.stereo = std::string(body.substr(start, i - start));
    }
    if (i < n && body[i] == 'H') {
        ++i;
        int h = 1;
        if (i < n && std::isdigit(static_cast<unsigned char>(body[i]))) {
            h = body[i] - '0';
            ++i;
        }
        atom.hydrogens = h;
    }
    if (i < n && (body[i] == '+' || body[i] == '-')) {
        const char sign = body[i];
        const int unit = sign == '+' ? 1 : -1;
        ++i;
        int magnitude = 1;
        if (i < n && std::isdigit(static_cast<unsigned char>(body[i]))) {
            magnitude = 0;
            while (i < n && std::isdigit(static_cast<unsigned char>(body[i]))) {
                magnitude = magnitude * 10 + (body[i] - '0');
                ++i;
            }
        } else {
            while (i < n && body[i] == sign) {
                ++magnitude;
                ++i;
            }
        }
        atom.charge = unit * magnitude;
    }
    if (i < n && body[i] == ':') {
        ++i;
        const std::size_t d0 = i;
        while (i < n && std::isdigit(static_cast<unsigned char>(body[i]))) ++i;
        if (i == d0) return false;
    }
    return i == n;
}

inline int ring_digit(std::string_view t) {
    return t.size() == 1 ? t[0] - '0' : (t[1] - '0') * 10 + (t[2] - '0');
}

// BFS shortest path between `from` and `to` avoiding bond `skip`, restricted to
// bonds accepted by `allow`. Returns the atom path (empty when disconnected).
template <class Allow>
std::vector<int> shortest_path(const std::vector<std::vector<std::pair<int, int>>>& adj, int from,
                               int to, int skip, Allow allow) {
    std::vector<int> parent(adj.size(), -2);
    std::queue<int> q;
    parent[from] = -1;
    q.push(from);
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        if (u == to) break;
        for (auto [v, e] : adj[u]) {
            if (e == skip || parent[v] != -2 || !allow(e)) continue;
            parent[v] = u;
            q.push(v);
        }
    }
    if (parent[to] == -2) return {};
    std::vector<int> path;
    for (int v = to; v != -1; v = parent[v]) path.push_back(v);
    std::reverse(path.begin(), path.end());
    return path;
}

}  // namespace detail

// Grammar + valence validation. Succeeds iff rings are closed, branches are
// balanced, no bond symbol dangles, lowercase atoms sit in 5- or 6-membered
// aromatic rings and every atom stays within its valence ceiling.
//
// Aromatic bonds count 1 each towards valence (a Kekule-compatible rule), so
// exocyclic double bonds on aromatic carbons such as c(=O) are accepted.
inline ParseResult parse_validate(std::span<const Token> tokens) {
    using FK = FailureKind;
    auto fail = [](FK kind, std::size_t pos, int detail, std::string msg) {
        return ParseResult(ValidationFailure{kind, pos, detail, std::move(msg)});
    };

    ParsedMol mol;
    int prev = -1;
    std::optional<std::pair<std::string, std::size_t>> pending;  // bond symbol, position
    std::vector<std::pair<int, std::size_t>> branches;            // (atom, '(' position)
    struct OpenRing {
        int atom;
        std::string bond;
        std::size_t pos;
    };
    std::map<int, OpenRing> open_rings;
    std::vector<bool> implicit_bond;  // per bond: order chosen by default rule
    int depth = 0;

    auto add_bond = [&](int a, int b, const std::string& sym, bool ring) -> bool {
        for (const auto& bd : mol.bonds) {
            if ((bd.a == a && bd.b == b) || (bd.a == b && bd.b == a)) return false;
        }
        Bond bond;
        bond.a = a;
        bond.b = b;
        bond.ring_closure = ring;
        const bool implicit = sym.empty();
        if (implicit) {
            bond.order = (mol.atoms[a].aromatic && mol.atoms[b].aromatic) ? 1.5 : 1.0;
        } else {
            bond.order = detail::bond_order_of(sym);
            if (sym == "/" || sym == "\\") bond.stereo = sym;
        }
        mol.bonds.push_back(bond);
        implicit_bond.push_back(implicit);
        return true;
    };

    for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
        const Token& tok = tokens[pos];
        switch (tok.kind) {
        case TokenKind::Atom:
        case TokenKind::BracketAtom: {
            Atom atom;
            atom.token_pos = pos;
            if (tok.kind == TokenKind::Atom) {
                const std::string& t = tok.text;
                if (!t.empty() && std::islower(static_cast<unsigned char>(t[0]))) {
                    atom.element = std::string(1, static_cast<char>(std::toupper(t[0])));
                    atom.aromatic = true;
                } else {
                    atom.element = t;
                }
                if (organic_valences(atom.element).empty()) {
                    return fail(FK::Malformed, pos, -1, "not an organic-subset atom: " + t);
                }
            } else {
                atom.bracket = true;
                if (!detail::parse_bracket(
                        std::string_view(tok.text).substr(1, tok.text.size() - 2), atom)) {
                    return fail(FK::Malformed, pos, -1, "malformed bracket atom " + tok.text);
                }
            }
            mol.atoms.push_back(atom);
            const int idx = static_cast<int>(mol.atoms.size()) - 1;
            if (prev >= 0) {
                add_bond(prev, idx, pending ? pending->first : std::string(), false);
            } else if (pending) {
                return fail(FK::DanglingBond, pending->second, -1, "bond without a left atom");
            }
            pending.reset();
            prev = idx;
            break;
        }
        case TokenKind::Bond:
            if (prev < 0 || pending) {
                return fail(FK::DanglingBond, pos, -1, "bond symbol " + tok.text + " has no left atom");
            }
            pending = {tok.text, pos};
            break;
        case TokenKind::RingBond: {
            if (prev < 0) {
                return fail(FK::DanglingBond, pos, -1, "ring bond without an atom");
            }
            const int digit = detail::ring_digit(tok.text);
            auto it = open_rings.find(digit);
            if (it == open_rings.end()) {
                open_rings.emplace(digit, OpenRing{prev, pending ? pending->first : std::string(), pos});
            } else {
                const std::string a = it->second.bond;
                const std::string b = pending ? pending->first : std::string();
                if (!a.empty() && !b.empty() &&
                    detail::bond_order_of(a) != detail::bond_order_of(b)) {
                    return fail(FK::Malformed, pos, digit, "conflicting ring-closure bond orders");
                }
                if (it->second.atom == prev ||
                    !add_bond(it->second.atom, prev, a.empty() ? b : a, true)) {
                    return fail(FK::Malformed, pos, digit, "ring closure duplicates a bond");
                }
                mol.ring_closures.push_back({digit, it->second.atom, prev});
                open_rings.erase(it);
            }
            pending.reset();
            break;
        }
        case TokenKind::BranchOpen:
            if (pending) {
                return fail(FK::DanglingBond, pending->second, -1, "bond before branch");
            }
            if (prev < 0) {
                return fail(FK::Malformed, pos, -1, "branch without an anchor atom");
            }
            if (pos + 1 < tokens.size() && tokens[pos + 1].kind == TokenKind::BranchClose) {
                return fail(FK::Malformed, pos, -1, "empty branch");
            }
            if (pos > 0 && tokens[pos - 1].kind == TokenKind::BranchOpen) {
                return fail(FK::Malformed, pos, -1, "branch must start with an atom or bond");
            }
            branches.push_back({prev, pos});
            ++depth;
            break;
        case TokenKind::BranchClose:
            if (pending) {
                return fail(FK::DanglingBond, pending->second, -1, "bond at end of branch");
            }
            if (branches.empty()) {
                return fail(FK::UnbalancedBranch, pos, -1, "')' without matching '('");
            }
            prev = branches.back().first;
            branches.pop_back();
            --depth;
            break;
        case TokenKind::Dot:
            if (pending) {
                return fail(FK::DanglingBond, pending->second, -1, "bond before '.'");
            }
            if (!branches.empty()) {
                return fail(FK::UnbalancedBranch, branches.back().second, -1, "'.' inside a branch");
            }
            if (prev < 0 || pos + 1 == tokens.size()) {
                return fail(FK::Malformed, pos, -1, "empty component");
            }
            prev = -1;
            break;
        default:
            return fail(FK::Malformed, pos, -1, "control token inside molecule body");
        }
        mol.branch_depth.push_back(depth);
    }

    if (pending) {
        return fail(FK::DanglingBond, pending->second, -1, "dangling bond " + pending->first);
    }
    if (!branches.empty()) {
        return fail(FK::UnbalancedBranch, branches.back().second, -1, "unclosed branch");
    }
    if (!open_rings.empty()) {
        auto first = std::min_element(open_rings.begin(), open_rings.end(), [](auto& x, auto& y) {
            return x.second.pos < y.second.pos;
        });
        return fail(FK::UnclosedRing, first->second.pos, first->first,
                    "ring bond " + std::to_string(first->first) + " never closed");
    }
    if (mol.atoms.empty()) {
        return fail(FK::EmptyMolecule, 0, -1, "no atoms");
    }

    auto adj = mol.adjacency();
    const auto any_bond = [](int) { return true; };

    // Implicit aromatic bonds outside rings (biaryl links) are single bonds.
    for (int e = 0; e < static_cast<int>(mol.bonds.size()); ++e) {
        Bond& bd = mol.bonds[e];
        if (bd.aromatic() && implicit_bond[e] &&
            detail::shortest_path(adj, bd.a, bd.b, e, any_bond).empty()) {
            bd.order = 1.0;
        }
    }

    const auto aromatic_bond = [&](int e) { return mol.bonds[e].aromatic(); };
    for (int i = 0; i < static_cast<int>(mol.atoms.size()); ++i) {
        if (!mol.atoms[i].aromatic) continue;
        std::size_t best = 0;
        for (auto [v, e] : adj[i]) {
            if (!mol.bonds[e].aromatic()) continue;
            auto path = detail::shortest_path(adj, i, v, e, aromatic_bond);
            if (!path.empty() && (best == 0 || path.size() < best)) best = path.size();
        }
        if (best != 5 && best != 6) {
            return fail(FK::InvalidAromaticity, mol.atoms[i].token_pos, i,
                        "aromatic atom outside a 5- or 6-membered aromatic ring");
        }
    }

    for (int i = 0; i < static_cast<int>(mol.atoms.size()); ++i) {
        Atom& atom = mol.atoms[i];
        int aromatic_bonds = 0;
        double other = 0.0;
        for (auto [v, e] : adj[i]) {
            if (mol.bonds[e].aromatic()) {
                ++aromatic_bonds;
            } else {
                other += mol.bonds[e].order;
            }
        }
        const int used = aromatic_bonds + static_cast<int>(other) + atom.hydrogens;
        const int ceiling = atom.bracket ? max_valence(atom.element, atom.charge)
                                         : organic_valences(atom.element).back();
        if (used > ceiling) {
            return fail(FK::ValenceExceeded, atom.token_pos, i,
                        "atom " + std::to_string(i) + " (" + atom.element + ") uses valence " +
                            std::to_string(used) + " > " + std::to_string(ceiling));
        }
        if (!atom.bracket) {
            int target = ceiling;
            for (int v : organic_valences(atom.element)) {
                if (v >= used) {
                    target = v;
                    break;
                }
            }
            const int pi = (atom.aromatic && used + 1 <= target) ? 1 : 0;
            atom.hydrogens = std::max(0, target - used - pi);
        }
    }
    return ParseResult(std::move(mol));
}

inline ParseResult parse_smiles(std::string_view smiles) {
    TokenSeq tokens;
    try {
        tokens = tokenize(smiles);
    } catch (const UnknownCharacter& e) {
        return ParseResult(ValidationFailure{FailureKind::Malformed, e.position(), -1, e.what()});
    }
    return parse_validate(tokens);
}

inline bool is_valid_smiles(std::string_view smiles) { return parse_smiles(smiles).ok(); }

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

struct DescriptorSet {
    int heavy_atoms = 0;
    double approx_mw = 0.0;
    int ring_count = 0;
    int max_ring_size = 0;
    int rotatable_proxy = 0;
    int hbd_proxy = 0;
    int hba_proxy = 0;
    double tpsa_proxy = 0.0;
    double logp_proxy = 0.0;
    int charge_total = 0;
    bool radical_flag = false;  // the parser has no radical representation
    int bridgehead_count = 0;
    std::set<std::string> element_set;
};

// Smallest cycle through every ring bond, deduplicated. Each ring is a sorted
// list of bond indices.
inline std::vector<std::vector<int>> ring_bond_sets(const ParsedMol& mol) {
    const auto adj = mol.adjacency();
    std::set<std::vector<int>> rings;
    for (int e = 0; e < static_cast<int>(mol.bonds.size()); ++e) {
        auto path = detail::shortest_path(adj, mol.bonds[e].a, mol.bonds[e].b, e,
                                          [](int) { return true; });
        if (path.empty()) continue;
        std::vector<int> ring{e};
        for (std::size_t k = 0; k + 1 < path.size(); ++k) {
            for (auto [v, be] : adj[path[k]]) {
                if (v == path[k + 1] && be != e) {
                    ring.push_back(be);
                    break;
                }
            }
        }
        std::sort(ring.begin(), ring.end());
        rings.insert(std::move(ring));
    }
    return {rings.begin(), rings.end()};
}

inline DescriptorSet descriptors(const ParsedMol& mol) {
    DescriptorSet d;
    const auto adj = mol.adjacency();
    const int n = static_cast<int>(mol.atoms.size());

    int carbons = 0, nitrogens = 0, oxygens = 0, halogens = 0;
    for (int i = 0; i < n; ++i) {
        const Atom& a = mol.atoms[i];
        d.element_set.insert(a.element);
        d.charge_total += a.charge;
        const ElementInfo* info = find_element(a.element);
        d.approx_mw += (info ? info->mass : 0.0) + a.hydrogens * 1.008;
        if (a.element == "H") continue;
        ++d.heavy_atoms;
        if (a.element == "C") ++carbons;
        if (a.element == "N") ++nitrogens;
        if (a.element == "O") ++oxygens;
        if (is_halogen(a.element)) ++halogens;
        if ((a.element == "N" || a.element == "O")) {
            int h = a.hydrogens;
            for (auto [v, e] : adj[i]) {
                if (mol.atoms[v].element == "H") ++h;
            }
            if (h > 0) ++d.hbd_proxy;
        }
    }
    d.hba_proxy = nitrogens + oxygens;
    d.tpsa_proxy = 20.2 * nitrogens + 17.1 * oxygens;
    d.logp_proxy = 0.5 * carbons - 1.0 * (nitrogens + oxygens) + 0.8 * halogens;

    // cyclomatic number
    std::vector<int> comp(n, -1);
    int components = 0;
    for (int s = 0; s < n; ++s) {
        if (comp[s] >= 0) continue;
        std::vector<int> stack{s};
        comp[s] = components;
        while (!stack.empty()) {
            int u = stack.back();
            stack.pop_back();
            for (auto [v, e] : adj[u]) {
                if (comp[v] < 0) {
                    comp[v] = components;
                    stack.push_back(v);
                }
            }
        }
        ++components;
    }
    d.ring_count = static_cast<int>(mol.bonds.size()) - n + components;

    const auto rings = ring_bond_sets(mol);
    std::vector<bool> in_ring(mol.bonds.size(), false);
    for (const auto& r : rings) {
        d.max_ring_size = std::max(d.max_ring_size, static_cast<int>(r.size()));
        for (int e : r) in_ring[e] = true;
    }

    auto heavy_degree = [&](int i) {
        int deg = 0;
        for (auto [v, e] : adj[i]) {
            if (mol.atoms[v].element != "H") ++deg;
        }
        return deg;
    };
    for (int e = 0; e < static_cast<int>(mol.bonds.size()); ++e) {
        const Bond& b = mol.bonds[e];
        if (b.order != 1.0 || in_ring[e]) continue;
        if (mol.atoms[b.a].element == "H" || mol.atoms[b.b].element == "H") continue;
        if (heavy_degree(b.a) >= 2 && heavy_degree(b.b) >= 2) ++d.rotatable_proxy;
    }

    // Bridgeheads: end atoms of a path of >= 2 bonds shared by two rings.
    std::set<int> bridgeheads;
    for (std::size_t i = 0; i < rings.size(); ++i) {
        for (std::size_t j = i + 1; j < rings.size(); ++j) {
            std::vector<int> shared;
            std::set_intersection(rings[i].begin(), rings[i].end(), rings[j].begin(),
                                  rings[j].end(), std::back_inserter(shared));
            if (shared.size() < 2) continue;
            std::map<int, int> incidence;
            for (int e : shared) {
                ++incidence[mol.bonds[e].a];
                ++incidence[mol.bonds[e].b];
            }
            for (auto [atom, count] : incidence) {
                if (count == 1) bridgeheads.insert(atom);
            }
        }
    }
    d.bridgehead_count = static_cast<int>(bridgeheads.size());
    return d;
}

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

class Fingerprint {
public:
    static constexpr std::size_t kDefaultWidth = 2048;

    Fingerprint() : Fingerprint(kDefaultWidth) {}
    explicit Fingerprint(std::size_t width) : width_(width), words_((width + 63) / 64, 0) {}

    std::size_t width() const noexcept { return width_; }

    void set(std::size_t bit) { words_.at(bit / 64) |= (std::uint64_t{1} << (bit % 64)); }
    bool test(std::size_t bit) const { return (words_.at(bit / 64) >> (bit % 64)) & 1U; }

    std::size_t set_count() const noexcept {
        std::size_t c = 0;
        for (auto w : words_) c += static_cast<std::size_t>(std::popcount(w));
        return c;
    }

    const std::vector<std::uint64_t>& words() const noexcept { return words_; }

    friend bool operator==(const Fingerprint&, const Fingerprint&) = default;

private:
    std::size_t width_;
    std::vector<std::uint64_t> words_;
};

inline constexpr std::uint64_t kFingerprintSeed = 0x51f7c0de2026ULL;

namespace detail {

inline std::uint64_t fnv1a(std::span<const std::uint64_t> words) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ kFingerprintSeed;
    for (std::uint64_t w : words) {
        for (int k = 0; k < 8; ++k) {
            h = (h ^ ((w >> (8 * k)) & 0xffU)) * 0x100000001b3ULL;
        }
    }
    return h;
}

inline std::uint64_t atom_code(const Atom& a) noexcept {
    std::uint64_t h = 0;
    for (unsigned char c : a.element) h = h * 131 + c;
    return (h << 8) ^ (static_cast<std::uint64_t>(a.aromatic) << 7) ^
           static_cast<std::uint64_t>(a.charge + 8);
}

inline std::uint64_t bond_code(const Bond& b) noexcept {
    return static_cast<std::uint64_t>(b.order * 2.0) | 0x1000U;
}

}  // namespace detail

// Hashed linear paths of 0..3 bonds over heavy atoms. Each path is encoded in
// the lexicographically smaller of its two directions, so the bit set depends
// only on the molecular graph, never on how the SMILES was written.
inline Fingerprint fingerprint(const ParsedMol& mol, std::size_t width = Fingerprint::kDefaultWidth) {
    if (width < 256 || !std::has_single_bit(width)) {
        throw ConfigError("fingerprint width must be a power of two >= 256");
    }
    Fingerprint fp(width);
    const auto adj = mol.adjacency();
    const int n = static_cast<int>(mol.atoms.size());
    std::vector<int> atoms;
    std::vector<int> bonds;

    auto emit = [&] {
        std::vector<std::uint64_t> fwd, rev;
        for (std::size_t k = 0; k < atoms.size(); ++k) {
            fwd.push_back(detail::atom_code(mol.atoms[atoms[k]]));
            if (k < bonds.size()) fwd.push_back(detail::bond_code(mol.bonds[bonds[k]]));
        }
        rev.assign(fwd.rbegin(), fwd.rend());
        const auto& canon = std::min(fwd, rev);
        fp.set(detail::fnv1a(canon) & (width - 1));
    };

    auto dfs = [&](auto&& self, int u) -> void {
        emit();
        if (bonds.size() == 3) return;
        for (auto [v, e] : adj[u]) {
            if (mol.atoms[v].element == "H") continue;
            if (std::find(atoms.begin(), atoms.end(), v) != atoms.end()) continue;
            atoms.push_back(v);
            bonds.push_back(e);
            self(self, v);
            atoms.pop_back();
            bonds.pop_back();
        }
    };

    for (int s = 0; s < n; ++s) {
        if (mol.atoms[s].element == "H") continue;
        atoms = {s};
        bonds.clear();
        dfs(dfs, s);
    }
    return fp;
}

inline double tanimoto(const Fingerprint& a, const Fingerprint& b) {
    if (a.width() != b.width()) {
        throw WidthMismatch(a.width(), b.width());
    }
    std::size_t both = 0, either = 0;
    const auto& wa = a.words();
    const auto& wb = b.words();
    for (std::size_t i = 0; i < wa.size(); ++i) {
        both += static_cast<std::size_t>(std::popcount(wa[i] & wb[i]));
        either += static_cast<std::size_t>(std::popcount(wa[i] | wb[i]));
    }
    if (either == 0) {
        return 1.0;
    }
    return static_cast<double>(both) / static_cast<double>(either);
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

// One SMILES per line; blank lines and lines starting with '#' are skipped.
// Anything after the first whitespace (a name column, say) is ignored.
inline std::vector<std::string> read_smiles_lines(std::istream& in) {
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        const auto start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos || line[start] == '#') continue;
        const auto end = line.find_first_of(" \t\r", start);
        out.push_back(line.substr(start, end == std::string::npos ? std::string::npos : end - start));
    }
    return out;
}

}  // namespace softmol::chem
