#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace softmol {

// Base for every error raised by the library. Callers that only need to
// distinguish "our" failures from std::bad_alloc and friends catch this.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UnknownCharacter : public Error {
public:
    explicit UnknownCharacter(std::size_t position)
        : Error("unknown SMILES character at position " + std::to_string(position)),
          position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

class UnknownToken : public Error {
public:
    explicit UnknownToken(const std::string& token)
        : Error("token not in vocabulary: " + token), token_(token) {}
    const std::string& token() const noexcept { return token_; }

private:
    std::string token_;
};

class WidthMismatch : public Error {
public:
    WidthMismatch(std::size_t a, std::size_t b)
        : Error("fingerprint width mismatch: " + std::to_string(a) + " vs " + std::to_string(b)) {}
};

class TooLong : public Error {
public:
    TooLong(std::size_t actual, std::size_t limit)
        : Error("sequence of " + std::to_string(actual) + " tokens does not fit padded length " +
                std::to_string(limit)),
          actual_(actual), limit_(limit) {}
    std::size_t actual() const noexcept { return actual_; }
    std::size_t limit() const noexcept { return limit_; }

private:
    std::size_t actual_;
    std::size_t limit_;
};

class IncompleteSequence : public Error {
public:
    IncompleteSequence() : Error("sequence still contains masked positions") {}
};

class OutOfRange : public Error {
public:
    using Error::Error;
};

class MaskInContext : public Error {
public:
    MaskInContext() : Error("context window contains a MASK token") {}
};

class EmptyCorpus : public Error {
public:
    EmptyCorpus() : Error("training corpus is empty") {}
};

class ZeroMasked : public Error {
public:
    ZeroMasked() : Error("first-hitting step requested with zero masked tokens") {}
};

class EmptyMaskedSet : public Error {
public:
    EmptyMaskedSet() : Error("confidence selection over an empty masked set") {}
};

class BudgetExhausted : public Error {
public:
    BudgetExhausted(int required, int budget)
        : Error("block needs " + std::to_string(required) + " predictor calls, budget is " +
                std::to_string(budget)) {}
};

class UnvisitedChild : public Error {
public:
    UnvisitedChild() : Error("UCT score requested for an unvisited child") {}
};

class ExhaustedTree : public Error {
public:
    ExhaustedTree() : Error("no traversable child remains in the search tree") {}
};

class NoNovelCandidate : public Error {
public:
    NoNovelCandidate() : Error("every sampled candidate duplicates an existing sibling") {}
};

class OracleError : public Error {
public:
    using Error::Error;
};

class OracleTimeout : public OracleError {
public:
    OracleTimeout() : OracleError("external oracle timed out") {}
};

class ProtocolError : public OracleError {
public:
    using OracleError::OracleError;
};

class ChildExited : public OracleError {
public:
    ChildExited() : OracleError("external oracle process exited") {}
};

class OracleUnavailable : public OracleError {
public:
    using OracleError::OracleError;
};

class EmptySet : public Error {
public:
    EmptySet() : Error("metric requested over an empty sample set") {}
};

class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace softmol
