#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "softmol/softmol.hpp"

#ifndef SOFTMOL_DATA_DIR
#define SOFTMOL_DATA_DIR "data"
#endif

namespace softmol::cli {

using json = nlohmann::json;

// Bad flags, unknown config keys and the like; exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// ---------------------------------------------------------------------------
// Resolved configuration: flat namespaced keys
// ---------------------------------------------------------------------------

inline json default_config() {
    const search::SearchConfig s;
    const diffusion::TrainOptions t;
    json c = {
        {"seed", 42},
        {"workers", 1},
        {"verbosity", 1},
        {"data_dir", SOFTMOL_DATA_DIR},
        {"model.checkpoint", ""},

        {"train.epochs", t.epochs},
        {"train.learning_rate", t.learning_rate},
        {"train.batch", t.batch},
        {"train.optimizer", "adamw"},
        {"train.weight_decay", t.weight_decay},
        {"train.clip_norm", t.clip_norm},
        {"train.dim", 32},
        {"train.window", 64},
        {"train.init_scale", 0.1},
        {"train.L", 64},
        {"train.K", 8},

        {"sample.N_batch", 1000},
        {"sample.K_sample", 8},
        {"sample.L_max", 512},
        {"sample.T", 128},
        {"sample.window", 0},
        {"sample.temperature", 1.0},
        {"sample.nucleus", 1.0},
        {"sample.mode", "sample"},
        {"sample.prefix", ""},

        {"search.N_max", s.n_max},
        {"search.C", s.c},
        {"search.lambda", s.lambda},
        {"search.beta", s.beta},
        {"search.C_init", s.c_init},
        {"search.C_base", s.c_base},
        {"search.C_min", s.c_min},
        {"search.C_max", s.c_max},
        {"search.M", s.m},
        {"search.n_sim", s.n_sim},
        {"search.D_max", s.d_max},
        {"search.tau_qed", s.gate.qed_min},
        {"search.tau_sa", s.gate.sa_max},
        {"search.penalty", s.gate.penalty},
        {"search.K_sample", s.decode.k_sample},
        {"search.L_max", s.decode.l_max},
        {"search.T", s.decode.budget},
        {"search.temperature", s.decode.temperature},
        {"search.nucleus", s.decode.nucleus},
        {"search.target", "parp1"},
        {"search.profile", ""},
        {"search.oracle_cmd", ""},
        {"search.oracle_timeout", 60.0},
        {"search.stream", "hits"},

        {"eval.target", "parp1"},
        {"eval.profile", ""},
        {"eval.circle_threshold", 0.75},
    };
    const json curation = curate::to_json(curate::CurationConfig{});
    for (auto& [k, v] : curation.items()) c["curate." + k] = v;
    return c;
}

namespace detail {

inline bool same_kind(const json& def, const json& v) {
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number()) return v.is_number();
    if (def.is_string()) return v.is_string();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_array()) return v.is_array();
    return false;
}

}  // namespace detail

// Overrides keys of `cfg`; every key must already exist with the same kind.
inline void merge_config(json& cfg, const json& overrides) {
    if (!overrides.is_object()) throw UsageError("config file must hold a JSON object");
    for (auto& [k, v] : overrides.items()) {
        if (!cfg.contains(k)) throw UsageError("unknown config key: " + k);
        if (!detail::same_kind(cfg[k], v)) throw UsageError("config key " + k + " has the wrong type");
        cfg[k] = v;
    }
}

inline json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config file " + path + " is not JSON: " + e.what());
    }
}

// Converts a flag string to the kind of the key's default value.
inline json parse_flag_value(const json& def, const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        if (def.is_number_integer()) {
            const long long v = std::stoll(text, &used);
            if (used == text.size()) return v;
        } else if (def.is_number()) {
            const double v = std::stod(text, &used);
            if (used == text.size()) return v;
        } else if (def.is_string()) {
            return text;
        } else if (def.is_boolean()) {
            if (text == "true" || text == "1") return true;
            if (text == "false" || text == "0") return false;
        }
    } catch (const std::logic_error&) {
    }
    throw UsageError("bad value for " + key + ": " + text);
}

template <class T>
T get(const json& cfg, const std::string& key) {
    return cfg.at(key).get<T>();
}

inline decode::SelectMode parse_mode(const std::string& m) {
    if (m == "greedy") return decode::SelectMode::Greedy;
    if (m == "sample") return decode::SelectMode::Sample;
    throw UsageError("decode mode must be greedy or sample, got " + m);
}

inline decode::DecodeConfig sample_decode_config(const json& c) {
    decode::DecodeConfig d;
    d.k_sample = get<int>(c, "sample.K_sample");
    d.l_max = get<int>(c, "sample.L_max");
    d.budget = get<int>(c, "sample.T");
    d.window = get<int>(c, "sample.window");
    d.temperature = get<double>(c, "sample.temperature");
    d.nucleus = get<double>(c, "sample.nucleus");
    d.n_batch = get<int>(c, "sample.N_batch");
    d.seed = get<std::uint64_t>(c, "seed");
    d.mode = parse_mode(get<std::string>(c, "sample.mode"));
    d.validate();
    return d;
}

inline search::SearchConfig search_config(const json& c) {
    search::SearchConfig s;
    s.n_max = get<int>(c, "search.N_max");
    s.c = get<double>(c, "search.C");
    s.lambda = get<double>(c, "search.lambda");
    s.beta = get<double>(c, "search.beta");
    s.c_init = get<int>(c, "search.C_init");
    s.c_base = get<int>(c, "search.C_base");
    s.c_min = get<int>(c, "search.C_min");
    s.c_max = get<int>(c, "search.C_max");
    s.m = get<int>(c, "search.M");
    s.n_sim = get<int>(c, "search.n_sim");
    s.d_max = get<int>(c, "search.D_max");
    s.seed = get<std::uint64_t>(c, "seed");
    s.gate.qed_min = get<double>(c, "search.tau_qed");
    s.gate.sa_max = get<double>(c, "search.tau_sa");
    s.gate.penalty = get<double>(c, "search.penalty");
    s.decode.k_sample = get<int>(c, "search.K_sample");
    s.decode.l_max = get<int>(c, "search.L_max");
    s.decode.budget = get<int>(c, "search.T");
    s.decode.temperature = get<double>(c, "search.temperature");
    s.decode.nucleus = get<double>(c, "search.nucleus");
    s.decode.seed = s.seed;
    s.validate();
    return s;
}

inline curate::CurationConfig curation_config(const json& c) {
    json flat = json::object();
    const std::string prefix = "curate.";
    for (auto& [k, v] : c.items()) {
        if (k.rfind(prefix, 0) == 0) flat[k.substr(prefix.size())] = v;
    }
    curate::CurationConfig cc;
    curate::apply_json(flat, cc);
    return cc;
}

inline diffusion::TrainOptions train_options(const json& c) {
    diffusion::TrainOptions t;
    t.epochs = get<int>(c, "train.epochs");
    t.learning_rate = get<double>(c, "train.learning_rate");
    t.batch = get<int>(c, "train.batch");
    t.weight_decay = get<double>(c, "train.weight_decay");
    t.clip_norm = get<double>(c, "train.clip_norm");
    t.seed = get<std::uint64_t>(c, "seed");
    const auto opt = get<std::string>(c, "train.optimizer");
    if (opt == "adamw") {
        t.optimizer = diffusion::Optimizer::AdamW;
    } else if (opt == "sgd") {
        t.optimizer = diffusion::Optimizer::Sgd;
    } else {
        throw UsageError("optimizer must be adamw or sgd, got " + opt);
    }
    if (t.epochs < 0) throw UsageError("train.epochs must be >= 0");
    return t;
}

// ---------------------------------------------------------------------------
// I/O helpers
// ---------------------------------------------------------------------------

inline std::vector<std::string> read_smiles_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path);
    return chem::read_smiles_lines(in);
}

// Plain SMILES lines, or JSON lines carrying a "smiles" field (the sample and
// search streams). An empty "smiles" string is kept as a failed sample.
inline std::vector<std::string> read_samples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        const auto start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos || line[start] == '#') continue;
        if (line[start] == '{') {
            const json j = json::parse(line);
            out.push_back(j.at("smiles").get<std::string>());
            continue;
        }
        const auto end = line.find_first_of(" \t\r", start);
        out.push_back(line.substr(start, end == std::string::npos ? std::string::npos : end - start));
    }
    return out;
}

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Output sink: a file when a path is given, otherwise the data stream.
class Sink {
public:
    Sink(const std::string& path, std::ostream& fallback) {
        if (path.empty() || path == "-") {
            os_ = &fallback;
            return;
        }
        file_ = std::make_unique<std::ofstream>(path);
        if (!*file_) throw ConfigError("cannot write " + path);
        os_ = file_.get();
    }
    std::ostream& operator*() { return *os_; }

private:
    std::unique_ptr<std::ofstream> file_;
    std::ostream* os_ = nullptr;
};

inline std::string data_path(const json& cfg, const std::string& name) {
    return get<std::string>(cfg, "data_dir") + "/" + name;
}

inline std::string checkpoint_path(const json& cfg) {
    const auto p = get<std::string>(cfg, "model.checkpoint");
    return p.empty() ? data_path(cfg, "reference_ckpt.json") : p;
}

inline oracle::OracleProfile resolve_profile(const json& cfg, const std::string& ns) {
    const auto path = get<std::string>(cfg, ns + ".profile");
    if (!path.empty()) return oracle::load_profile(path);
    const auto name = get<std::string>(cfg, ns + ".target");
    const std::string file = data_path(cfg, "profiles/" + name + ".json");
    if (std::ifstream(file)) return oracle::load_profile(file);
    return oracle::builtin_profile(name);
}

inline std::vector<std::string> split_words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Context {
    json config;
    std::map<std::string, std::string> paths;  // in/out/report
    std::ostream* out;
    std::ostream* err;
    json summary = json::object();

    int verbosity() const { return get<int>(config, "verbosity"); }
    std::string path(const std::string& k) const {
        auto it = paths.find(k);
        return it == paths.end() ? std::string() : it->second;
    }
};

inline void cmd_validate(Context& ctx) {
    const auto path = ctx.path("in");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path);
    std::size_t total = 0, failures = 0, line_no = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        const auto start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos || line[start] == '#') continue;
        const auto end = line.find_first_of(" \t\r", start);
        const std::string smiles = line.substr(start, end == std::string::npos ? std::string::npos : end - start);
        json rec{{"line", line_no}, {"smiles", smiles}};
        ++total;
        try {
            const auto res = chem::parse_smiles(smiles);
            rec["valid"] = res.ok();
            if (!res.ok()) {
                rec["error"] = std::string(chem::to_string(res.failure().kind));
                rec["position"] = res.failure().position;
            }
        } catch (const UnknownCharacter& e) {
            rec["valid"] = false;
            rec["error"] = "UnknownCharacter";
            rec["position"] = e.position();
        }
        if (!rec["valid"].get<bool>()) ++failures;
        *ctx.out << rec.dump() << '\n';
    }
    ctx.summary = {{"total", total}, {"valid", total - failures}, {"failures", failures}};
}

inline void cmd_curate(Context& ctx) {
    const auto cfg = curation_config(ctx.config);
    const auto input = read_smiles_file(ctx.path("in"));
    const auto res = curate::curate_stream(input, cfg);
    Sink out(ctx.path("out"), *ctx.out);
    for (const auto& s : res.accepted) *out << s << '\n';
    const json report = curate::to_json(res.report);
    if (!ctx.path("report").empty()) {
        Sink rep(ctx.path("report"), *ctx.out);
        *rep << report.dump(2) << '\n';
    }
    ctx.summary = report;
}

inline void cmd_train(Context& ctx) {
    const auto& c = ctx.config;
    const auto opt = train_options(c);
    const FragmentConfig frag{get<int>(c, "train.L"), get<int>(c, "train.K")};
    frag.validate();
    const auto in_path = ctx.path("in").empty() ? data_path(c, "toy_corpus.smi") : ctx.path("in");
    const auto smiles = read_smiles_file(in_path);
    if (smiles.empty()) throw EmptyCorpus();
    std::vector<chem::TokenSeq> toks;
    for (const auto& s : smiles) toks.push_back(chem::tokenize(s));
    const auto vocab = chem::Vocab::from_corpus(toks);
    std::vector<TokenIds> ids;
    for (const auto& t : toks) ids.push_back(vocab.encode(t));
    const int dim = get<int>(c, "train.dim");
    const int window = get<int>(c, "train.window");
    if (dim < 1 || window < 1) throw UsageError("train.dim and train.window must be >= 1");
    auto init = diffusion::PredictorParams::random(vocab.size(), dim, window, opt.seed, get<double>(c, "train.init_scale"));
    auto res = diffusion::train(std::move(init), ids, frag, opt);
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) {
        *ctx.out << json{{"epoch", e + 1}, {"loss", res.epoch_loss[e]}}.dump() << '\n';
    }
    diffusion::save_checkpoint({vocab, frag, std::move(res.params), opt.seed}, ctx.path("out"));
    ctx.summary = {{"corpus_size", smiles.size()},
                   {"vocab_size", vocab.size()},
                   {"final_loss", res.epoch_loss.empty() ? json(nullptr) : json(res.epoch_loss.back())}};
}

inline void cmd_sample(Context& ctx) {
    const auto& c = ctx.config;
    const auto dc = sample_decode_config(c);
    const auto ck = diffusion::load_checkpoint(checkpoint_path(c));
    const diffusion::ReferenceDenoiser model(ck.params);
    TokenIds prefix;
    const auto prefix_text = get<std::string>(c, "sample.prefix");
    if (!prefix_text.empty()) prefix = ck.vocab.encode(chem::tokenize(prefix_text));
    const auto out = decode::generate(model, dc, prefix);
    Sink sink(ctx.path("out"), *ctx.out);
    std::size_t valid = 0;
    for (const auto& d : out) {
        const std::string smiles = decode::to_smiles(ck.vocab, d.ids);
        const bool ok = !smiles.empty() && chem::is_valid_smiles(smiles);
        valid += ok;
        *sink << json{{"smiles", smiles}, {"valid", ok}, {"block_count", d.block_count}, {"seed", dc.seed}}.dump()
              << '\n';
    }
    ctx.summary = {{"samples", out.size()}, {"valid", valid}};
}

template <class Scorer>
search::SearchResult run_search_with(const search::SearchConfig& sc, const diffusion::Checkpoint& ck, Scorer& scorer) {
    const diffusion::ReferenceDenoiser model(ck.params);
    return search::run_search(sc, model, ck.vocab, scorer);
}

inline void cmd_search(Context& ctx) {
    const auto& c = ctx.config;
    const auto sc = search_config(c);
    const auto ck = diffusion::load_checkpoint(checkpoint_path(c));
    const auto profile = resolve_profile(c, "search");
    const auto stream = get<std::string>(c, "search.stream");
    if (stream != "hits" && stream != "rollouts") throw UsageError("search.stream must be hits or rollouts");

    search::SearchResult res;
    const auto cmd = split_words(get<std::string>(c, "search.oracle_cmd"));
    if (cmd.empty()) {
        oracle::SurrogateOracle orc(profile);
        res = run_search_with(sc, ck, orc);
    } else {
        oracle::ExternalOracle ext({cmd, get<double>(c, "search.oracle_timeout")});
        search::ExternalScorer scorer(ext);
        res = run_search_with(sc, ck, scorer);
    }

    Sink sink(ctx.path("out"), *ctx.out);
    const auto& records = stream == "hits" ? res.hits : res.rollouts;
    for (const auto& r : records) {
        json j{{"smiles", r.smiles}, {"reward", r.reward}, {"depth", r.depth}, {"iteration", r.iteration}};
        j["ds"] = r.props ? json(r.props->ds) : json(nullptr);
        j["qed"] = r.props ? json(r.props->qed) : json(nullptr);
        j["sa"] = r.props ? json(r.props->sa) : json(nullptr);
        j["gate_pass"] = r.gate_pass;
        *sink << j.dump() << '\n';
    }
    std::set<std::string> unique;
    std::size_t gate_pass = 0;
    for (const auto& r : res.rollouts) {
        if (r.valid) unique.insert(r.smiles);
        gate_pass += r.gate_pass;
    }
    ctx.summary = {{"target", profile.name},
                   {"iterations", res.iterations},
                   {"rollouts", res.rollouts.size()},
                   {"unique_count", unique.size()},
                   {"gate_pass_count", gate_pass},
                   {"hit_count", res.hits.size()},
                   {"tree_size", res.tree_size},
                   {"exhausted", res.exhausted}};
    ctx.summary["best_smiles"] = res.best ? json(res.best->smiles) : json(nullptr);
    ctx.summary["best_reward"] = res.best ? json(res.best->reward) : json(nullptr);
    if (!res.aborted.empty()) throw OracleUnavailable(res.aborted);
}

inline void cmd_eval(Context& ctx) {
    const auto& c = ctx.config;
    const auto samples = read_samples(ctx.path("in"));
    const oracle::SurrogateOracle orc(resolve_profile(c, "eval"));
    auto report = metrics::standard_metrics(samples, orc);
    const auto uv = metrics::unique_valid(samples, orc);
    const auto h = metrics::hit_metrics(uv, orc.profile().threshold_ds, get<double>(c, "eval.circle_threshold"));
    report.hit_ratio = h.hit_ratio;
    report.hit_count = h.hits.size();
    report.circles = h.circles;
    report.novel_top_hit = h.novel_top_hit;
    json j = metrics::to_json(report);
    j["target"] = orc.profile().name;
    *ctx.out << j.dump() << '\n';
    ctx.summary = j;
}

// Quick checks of hand-derived values across the modules.
inline std::vector<std::pair<std::string, std::function<bool()>>> selftest_cases() {
    using namespace softmol;
    auto fails_with = [](const char* s, chem::FailureKind k) {
        const auto r = chem::parse_smiles(s);
        return !r.ok() && r.failure().kind == k;
    };
    return {
        {"tokenize benzene gives 8 tokens", [] { return chem::tokenize("c1ccccc1").size() == 8; }},
        {"tokenize CCl gives 2 tokens", [] { return chem::tokenize("CCl").size() == 2; }},
        {"C1CCCCC is an unclosed ring", [=] { return fails_with("C1CCCCC", chem::FailureKind::UnclosedRing); }},
        {"O=C( is an unbalanced branch", [=] { return fails_with("O=C(", chem::FailureKind::UnbalancedBranch); }},
        {"CC# is a dangling bond", [=] { return fails_with("CC#", chem::FailureKind::DanglingBond); }},
        {"O=C=O is valid", [] { return chem::is_valid_smiles("O=C=O"); }},
        {"benzene descriptors",
         [] {
             const auto d = chem::descriptors(chem::parse_smiles("c1ccccc1").mol());
             return d.heavy_atoms == 6 && d.ring_count == 1 && d.max_ring_size == 6;
         }},
        {"ethanol has one donor",
         [] { return chem::descriptors(chem::parse_smiles("CCO").mol()).hbd_proxy == 1; }},
        {"tanimoto of a molecule with itself is 1",
         [] {
             const auto fp = chem::fingerprint(chem::parse_smiles("CCO").mol());
             return chem::tanimoto(fp, fp) == 1.0;
         }},
        {"first-hitting step with u = 0.25, m = 2 halves t",
         [] { return decode::first_hitting_step(1.0, 2, 0.25) == 0.5; }},
        {"uct score by hand",
         [] {
             search::Node n;
             n.visits = 4;
             n.mean = 2.0;
             n.best = 6.0;
             const double want = 0.5 * 2.0 + 0.5 * 6.0 + 2.0 * std::sqrt(std::log(16.0) / 4.0);
             return std::abs(search::uct_score(n, 16, 0.5, 2.0) - want) < 1e-12;
         }},
        {"identical fingerprints form one circle",
         [] {
             const auto fp = chem::fingerprint(chem::parse_smiles("c1ccccc1O").mol());
             std::vector<chem::Fingerprint> v(5, fp);
             return metrics::circles(v) == 1;
         }},
        {"ten identical samples have uniqueness 0.1",
         [] {
             const oracle::SurrogateOracle o(oracle::builtin_profile("parp1"));
             std::vector<std::string> s(10, "CCO");
             const auto r = metrics::standard_metrics(s, o);
             return std::abs(r.uniqueness - 0.1) < 1e-12 && r.diversity == 0.0;
         }},
    };
}

inline bool cmd_selftest(Context& ctx) {
    bool all = true;
    std::size_t passed = 0;
    const auto cases = selftest_cases();
    for (const auto& [name, fn] : cases) {
        bool ok = false;
        try {
            ok = fn();
        } catch (const std::exception&) {
            ok = false;
        }
        *ctx.out << (ok ? "PASS " : "FAIL ") << name << '\n';
        all = all && ok;
        passed += ok;
    }
    ctx.summary = {{"cases", cases.size()}, {"passed", passed}};
    return all;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

struct FlagSpec {
    const char* flag;
    const char* key;
    const char* help;
};

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Soft-fragment block diffusion and gated tree search for molecules", "softmol"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    std::map<std::string, std::string> values;  // config key -> flag text
    std::map<std::string, std::string> paths;
    std::string config_path, manifest_path;
    std::vector<std::pair<CLI::Option*, std::string>> bound;

    auto add_flags = [&](CLI::App* sub, std::initializer_list<FlagSpec> specs) {
        for (const auto& s : specs) bound.emplace_back(sub->add_option(s.flag, values[s.key], s.help), s.key);
    };
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON file with flat namespaced keys");
        sub->add_option("--manifest", manifest_path, "Write the run manifest here (default: stderr at -v 2)");
        add_flags(sub, {{"--seed", "seed", "Random seed"},
                        {"--workers", "workers", "Concurrency budget"},
                        {"--verbosity,-v", "verbosity", "0 quiet, 1 summary, 2 summary and manifest"},
                        {"--data-dir", "data_dir", "Directory holding corpora, profiles and checkpoints"}});
    };

    auto* validate = app.add_subcommand("validate", "Tokenize and validate one SMILES per line");
    validate->add_option("--in", paths["in"], "Input SMILES file")->required();
    add_common(validate);

    auto* curate = app.add_subcommand("curate", "Run the curation filter cascade");
    curate->add_option("--in", paths["in"], "Input SMILES file")->required();
    curate->add_option("--out", paths["out"], "Accepted molecules")->required();
    curate->add_option("--report", paths["report"], "JSON report (default: standard output)");
    add_common(curate);

    auto* train = app.add_subcommand("train", "Train the reference predictor");
    train->add_option("--in", paths["in"], "Training SMILES file (default: toy corpus)");
    train->add_option("--out", paths["out"], "Checkpoint to write")->required();
    add_flags(train, {{"--epochs", "train.epochs", "Epochs"},
                      {"--lr", "train.learning_rate", "Learning rate"},
                      {"--batch", "train.batch", "Batch size"},
                      {"--optimizer", "train.optimizer", "adamw or sgd"},
                      {"--dim", "train.dim", "Hidden width"},
                      {"--window", "train.window", "Relative-position window W"},
                      {"--length", "train.L", "Padded length L"},
                      {"--block", "train.K", "Block size K"}});
    add_common(train);

    auto* sample = app.add_subcommand("sample", "Decode molecules from a checkpoint");
    sample->add_option("--out", paths["out"], "JSON-lines output (default: standard output)");
    add_flags(sample, {{"--checkpoint", "model.checkpoint", "Checkpoint file"},
                       {"--n", "sample.N_batch", "Number of molecules"},
                       {"--k-sample", "sample.K_sample", "Decoding block size"},
                       {"--l-max", "sample.L_max", "Maximum length"},
                       {"--budget", "sample.T", "Predictor calls per block"},
                       {"--window", "sample.window", "Context window (0: full)"},
                       {"--temp", "sample.temperature", "Temperature"},
                       {"--nucleus", "sample.nucleus", "Nucleus mass p"},
                       {"--mode", "sample.mode", "greedy or sample"},
                       {"--prefix", "sample.prefix", "SMILES prefix to complete"}});
    add_common(sample);

    auto* search = app.add_subcommand("search", "Gated tree search against a target profile");
    search->add_option("--out", paths["out"], "JSON-lines stream (default: standard output)");
    add_flags(search, {{"--checkpoint", "model.checkpoint", "Checkpoint file"},
                       {"--target", "search.target", "Target profile name"},
                       {"--profile", "search.profile", "Target profile JSON file"},
                       {"--budget", "search.N_max", "Iterations N_max"},
                       {"--qed", "search.tau_qed", "Gate QED threshold"},
                       {"--sa", "search.tau_sa", "Gate SA threshold"},
                       {"--c", "search.C", "Exploration constant"},
                       {"--lambda", "search.lambda", "Mean/max blend"},
                       {"--m", "search.M", "Candidates per expansion"},
                       {"--k-sample", "search.K_sample", "Block size"},
                       {"--l-max", "search.L_max", "Maximum length"},
                       {"--temp", "search.temperature", "Temperature"},
                       {"--oracle-cmd", "search.oracle_cmd", "External scorer command"},
                       {"--oracle-timeout", "search.oracle_timeout", "External scorer timeout, seconds"},
                       {"--stream", "search.stream", "hits or rollouts"}});
    add_common(search);

    auto* eval = app.add_subcommand("eval", "Metrics over a sample file");
    eval->add_option("--in", paths["in"], "SMILES or JSON-lines file")->required();
    add_flags(eval, {{"--target", "eval.target", "Target profile name"},
                     {"--profile", "eval.profile", "Target profile JSON file"},
                     {"--circle-threshold", "eval.circle_threshold", "Circle threshold"}});
    add_common(eval);

    auto* selftest = app.add_subcommand("selftest", "Run built-in hand-checked examples");
    add_common(selftest);

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, err, err);
        return kExitUsage;
    }

    CLI::App* chosen = app.get_subcommands().front();
    Context ctx{default_config(), paths, &out, &err};
    try {
        if (!config_path.empty()) merge_config(ctx.config, load_config_file(config_path));
        for (const auto& [opt, key] : bound) {
            if (opt->count() == 0) continue;
            ctx.config[key] = parse_flag_value(ctx.config[key], key, values[key]);
        }
        if (get<int>(ctx.config, "workers") < 1) throw UsageError("workers must be >= 1");
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n' << chosen->help();
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    }

    const std::string name = chosen->get_name();
    int code = kExitOk;
    try {
        if (name == "validate") cmd_validate(ctx);
        else if (name == "curate") cmd_curate(ctx);
        else if (name == "train") cmd_train(ctx);
        else if (name == "sample") cmd_sample(ctx);
        else if (name == "search") cmd_search(ctx);
        else if (name == "eval") cmd_eval(ctx);
        else if (name == "selftest") code = cmd_selftest(ctx) ? kExitOk : kExitRuntime;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        code = kExitRuntime;
    }
    out.flush();

    json manifest{{"command", name}, {"config", ctx.config}, {"inputs", json::object()}, {"summary", ctx.summary},
                  {"exit_code", code}, {"timestamp", utc_timestamp()}};
    for (const auto& [k, v] : paths) {
        if (!v.empty()) manifest["inputs"][k] = v;
    }
    if (!manifest_path.empty()) {
        std::ofstream mf(manifest_path);
        if (!mf) {
            err << "error: cannot write manifest " << manifest_path << '\n';
            return kExitRuntime;
        }
        mf << manifest.dump(2) << '\n';
    }
    if (ctx.verbosity() >= 1 && !ctx.summary.empty()) err << name << ": " << ctx.summary.dump() << '\n';
    if (ctx.verbosity() >= 2 && manifest_path.empty()) err << manifest.dump(2) << '\n';
    return code;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, out, err);
}

}  // namespace softmol::cli
