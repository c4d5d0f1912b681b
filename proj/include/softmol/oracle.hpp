#pragma once

#include <algorithm>
#include <array>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "softmol/chem.hpp"
#include "softmol/error.hpp"

namespace softmol::oracle {

struct PropertyRecord {
    double qed = 0.0;
    double sa = 10.0;
    double ds = 0.0;

    PropertyRecord clamped() const {
        return {std::clamp(qed, 0.0, 1.0), std::clamp(sa, 1.0, 10.0), ds};
    }
    friend bool operator==(const PropertyRecord&, const PropertyRecord&) = default;
};

// ---------------------------------------------------------------------------
// Surrogates
// ---------------------------------------------------------------------------

namespace detail {

inline double desirability(double v, double mu, double sigma) {
    const double z = (v - mu) / sigma;
    return std::exp(-z * z);
}

}  // namespace detail

// Geometric mean of four Gaussian desirabilities.
inline double surrogate_qed(const chem::DescriptorSet& d) {
    const double prod = detail::desirability(d.approx_mw, 300.0, 150.0) *
                        detail::desirability(d.logp_proxy, 2.0, 2.0) *
                        detail::desirability(static_cast<double>(d.hbd_proxy), 1.0, 2.0) *
                        detail::desirability(static_cast<double>(d.ring_count), 2.0, 1.5);
    return std::clamp(std::pow(prod, 0.25), 0.0, 1.0);
}

inline double surrogate_sa(const chem::DescriptorSet& d) {
    const double raw = 1.0 + 0.15 * d.heavy_atoms + 0.7 * d.ring_count + 0.5 * d.bridgehead_count +
                       0.3 * std::max(0, d.max_ring_size - 6);
    return std::clamp(raw, 1.0, 10.0);
}

struct OracleProfile {
    std::string name;
    double threshold_ds = -10.0;
    std::string seed_smiles;
    int size_optimum = 0;
    chem::Fingerprint target_fp{chem::Fingerprint::kDefaultWidth};
    double gate_qed = 0.5;
    double gate_sa = 5.0;
};

inline double surrogate_ds(const chem::Fingerprint& fp, const chem::DescriptorSet& d, const OracleProfile& profile) {
    const double sim = chem::tanimoto(fp, profile.target_fp);
    const double size = detail::desirability(static_cast<double>(d.heavy_atoms),
                                             static_cast<double>(profile.size_optimum), 12.0);
    return -(14.0 * sim + 4.0 * size);
}

// Profile whose target fingerprint and size optimum come from a seed molecule.
inline OracleProfile make_profile(std::string name, double threshold_ds, std::string seed_smiles) {
    if (!(threshold_ds < 0.0)) throw ConfigError("hit threshold must be negative");
    auto parsed = chem::parse_smiles(seed_smiles);
    if (!parsed.ok()) throw ConfigError("profile seed molecule does not parse: " + seed_smiles);
    OracleProfile p;
    p.name = std::move(name);
    p.threshold_ds = threshold_ds;
    p.seed_smiles = std::move(seed_smiles);
    p.size_optimum = chem::descriptors(parsed.mol()).heavy_atoms;
    p.target_fp = chem::fingerprint(parsed.mol());
    return p;
}

struct ProfileEntry {
    std::string_view name;
    double threshold_ds;
    std::string_view seed_smiles;
};

// Hit thresholds are the median docking scores of known actives per target.
inline constexpr std::array<ProfileEntry, 5> kDefaultProfiles{{
    {"parp1", -10.0, "NC(=O)c1ccc(cc1)C1CCNCC1"},
    {"fa7", -8.5, "CC(=O)Nc1ccc(cc1)N1CCOCC1"},
    {"5ht1b", -8.8, "CN1CCC(CC1)c1ccc(O)cc1"},
    {"braf", -10.3, "Cc1ccc(cc1)S(=O)(=O)N1CCCC1"},
    {"jak2", -9.1, "N#Cc1ccc(cc1)Oc1ccncc1"},
}};

inline OracleProfile builtin_profile(std::string_view name) {
    for (const auto& e : kDefaultProfiles) {
        if (e.name == name) return make_profile(std::string(e.name), e.threshold_ds, std::string(e.seed_smiles));
    }
    throw ConfigError("unknown target profile: " + std::string(name));
}

inline OracleProfile profile_from_json(const nlohmann::json& j) {
    OracleProfile p = make_profile(j.at("name").get<std::string>(), j.at("threshold_ds").get<double>(),
                                   j.at("seed_smiles").get<std::string>());
    if (j.contains("size_optimum")) {
        const int declared = j.at("size_optimum").get<int>();
        if (declared != p.size_optimum) {
            throw ConfigError("profile " + p.name + ": size_optimum disagrees with its seed molecule");
        }
    }
    return p;
}

inline nlohmann::json to_json(const OracleProfile& p) {
    return {{"name", p.name}, {"threshold_ds", p.threshold_ds}, {"seed_smiles", p.seed_smiles},
            {"size_optimum", p.size_optimum}};
}

inline OracleProfile load_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read profile " + path);
    return profile_from_json(nlohmann::json::parse(in));
}

// Parses and scores a SMILES string; nullopt when it does not parse.
class SurrogateOracle {
public:
    explicit SurrogateOracle(OracleProfile profile) : profile_(std::move(profile)) {}

    const OracleProfile& profile() const noexcept { return profile_; }

    PropertyRecord score(const chem::ParsedMol& mol) const {
        const auto d = chem::descriptors(mol);
        return score(chem::fingerprint(mol, profile_.target_fp.width()), d);
    }

    PropertyRecord score(const chem::Fingerprint& fp, const chem::DescriptorSet& d) const {
        return {surrogate_qed(d), surrogate_sa(d), surrogate_ds(fp, d, profile_)};
    }

    std::optional<PropertyRecord> score(std::string_view smiles) const {
        auto parsed = chem::parse_smiles(smiles);
        if (!parsed.ok()) return std::nullopt;
        return score(parsed.mol());
    }

private:
    OracleProfile profile_;
};

// ---------------------------------------------------------------------------
// External scorer over newline-delimited JSON
// ---------------------------------------------------------------------------

struct ExternalOracleConfig {
    std::vector<std::string> argv;
    double timeout_seconds = 60.0;
};

// Child process speaking one request line {"smiles": ...} and one reply line
// {"qed": f, "sa": f, "ds": f} per molecule. After a timeout or a dead child
// the process is reaped and relaunched on the next call.
class ExternalOracle {
public:
    explicit ExternalOracle(ExternalOracleConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.argv.empty()) throw ConfigError("external oracle needs a command");
        launch();
    }
    ExternalOracle(const ExternalOracle&) = delete;
    ExternalOracle& operator=(const ExternalOracle&) = delete;
    ~ExternalOracle() { shutdown(); }

    PropertyRecord score(std::string_view smiles) {
        if (pid_ < 0) launch();
        const std::string line = nlohmann::json{{"smiles", std::string(smiles)}}.dump() + "\n";
        write_all(line);
        const std::string reply = read_line();
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(reply);
        } catch (const nlohmann::json::exception&) {
            throw ProtocolError("external oracle reply is not JSON: " + reply);
        }
        if (!j.is_object()) throw ProtocolError("external oracle reply is not an object");
        PropertyRecord r;
        try {
            r.qed = j.at("qed").get<double>();
            r.sa = j.at("sa").get<double>();
            r.ds = j.at("ds").get<double>();
        } catch (const nlohmann::json::exception&) {
            throw ProtocolError("external oracle reply lacks numeric qed/sa/ds");
        }
        if (!std::isfinite(r.qed) || !std::isfinite(r.sa) || !std::isfinite(r.ds)) {
            throw ProtocolError("external oracle reply holds non-finite values");
        }
        return r.clamped();
    }

private:
    void launch() {
        int sv[2];
        if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) {
            throw OracleUnavailable(std::string("socketpair failed: ") + std::strerror(errno));
        }
        int report[2];
        if (::pipe2(report, O_CLOEXEC) != 0) {
            ::close(sv[0]);
            ::close(sv[1]);
            throw OracleUnavailable(std::string("pipe failed: ") + std::strerror(errno));
        }
        const pid_t pid = ::fork();
        if (pid < 0) {
            ::close(sv[0]);
            ::close(sv[1]);
            ::close(report[0]);
            ::close(report[1]);
            throw OracleUnavailable(std::string("fork failed: ") + std::strerror(errno));
        }
        if (pid == 0) {
            ::dup2(sv[1], STDIN_FILENO);
            ::dup2(sv[1], STDOUT_FILENO);
            std::vector<char*> args;
            for (auto& a : cfg_.argv) args.push_back(a.data());
            args.push_back(nullptr);
            ::execvp(args[0], args.data());
            const int err = errno;
            [[maybe_unused]] auto n = ::write(report[1], &err, sizeof err);
            ::_exit(127);
        }
        ::close(sv[1]);
        ::close(report[1]);
        int err = 0;
        const auto got = ::read(report[0], &err, sizeof err);
        ::close(report[0]);
        if (got == static_cast<ssize_t>(sizeof err)) {
            ::close(sv[0]);
            ::waitpid(pid, nullptr, 0);
            throw OracleUnavailable("cannot launch " + cfg_.argv[0] + ": " + std::strerror(err));
        }
        fd_ = sv[0];
        pid_ = pid;
        buffer_.clear();
    }

    void shutdown() noexcept {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
        if (pid_ > 0) {
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, nullptr, 0);
            pid_ = -1;
        }
    }

    [[noreturn]] void fail_exited() {
        shutdown();
        throw ChildExited();
    }

    void write_all(const std::string& data) {
        std::size_t off = 0;
        while (off < data.size()) {
            const auto n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                fail_exited();
            }
            off += static_cast<std::size_t>(n);
        }
    }

    std::string read_line() {
        using clock = std::chrono::steady_clock;
        const auto deadline = clock::now() + std::chrono::duration<double>(cfg_.timeout_seconds);
        for (;;) {
            const auto nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now()).count();
            if (left <= 0) {
                shutdown();
                throw OracleTimeout();
            }
            pollfd p{fd_, POLLIN, 0};
            const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1 << 30)));
            if (rc < 0 && errno == EINTR) continue;
            if (rc == 0) continue;
            char chunk[4096];
            const auto n = ::read(fd_, chunk, sizeof chunk);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) fail_exited();
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    ExternalOracleConfig cfg_;
    int fd_ = -1;
    pid_t pid_ = -1;
    std::string buffer_;
};

}  // namespace softmol::oracle
