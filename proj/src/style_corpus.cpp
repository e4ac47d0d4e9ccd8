#include "cvsteer/style_corpus.hpp"

#include "cvsteer/error.hpp"
#include "cvsteer/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace cvsteer::corpus {

namespace {

constexpr const char* kModule = "style_corpus";

[[noreturn]] void schema_error(const std::string& what) {
    throw Error(ErrorCode::SchemaViolation, kModule, what);
}

// Bar length in eighth-note units (the corpus always uses L:1/8).
int bar_units(const std::string& meter) {
    const auto slash = meter.find('/');
    if (slash == std::string::npos) schema_error("meter must look like N/D: " + meter);
    const int num = std::stoi(meter.substr(0, slash));
    const int den = std::stoi(meter.substr(slash + 1));
    if (num <= 0 || den <= 0 || 8 % den != 0) schema_error("unsupported meter " + meter);
    return num * (8 / den);
}

int duration_units(const std::string& token) {
    if (token.empty()) return 1;
    if (!std::all_of(token.begin(), token.end(), [](char c) { return c >= '0' && c <= '9'; }))
        schema_error("duration tokens must be integer multiples of L: '" + token + "'");
    return std::stoi(token);
}

} // namespace

void StyleSpec::check() const {
    if (pitch_set.empty()) schema_error("style " + label.name + ": empty pitch_set");
    if (interval_weights.empty() || duration_weights.empty())
        schema_error("style " + label.name + ": empty weight table");
    double isum = 0.0;
    for (const auto& w : interval_weights) {
        if (!(w.weight >= 0.0)) schema_error("style " + label.name + ": negative interval weight");
        isum += w.weight;
    }
    double dsum = 0.0;
    for (const auto& w : duration_weights) {
        if (!(w.weight >= 0.0)) schema_error("style " + label.name + ": negative duration weight");
        if (duration_units(w.token) <= 0) schema_error("style " + label.name + ": zero duration");
        dsum += w.weight;
    }
    if (std::abs(isum - 1.0) > 1e-9 || std::abs(dsum - 1.0) > 1e-9)
        schema_error("style " + label.name + ": weights must sum to 1");
    if (bars_min < 1 || bars_max < bars_min) schema_error("style " + label.name + ": bad bar range");
    for (const auto& p : pitch_set) {
        const auto seq = abc::tokenize(p);
        if (seq.empty() || seq.tokens.back().kind != abc::TokenKind::Note)
            schema_error("style " + label.name + ": pitch '" + p + "' is not a note");
    }
    bar_units(meter);
}

std::vector<StyleSpec> default_registry() {
    std::vector<StyleSpec> specs(4);

    specs[0].label = {0, "Alpha"};
    specs[0].pitch_set = {"C", "D", "E", "F", "G"};
    specs[0].interval_weights = {{-1, 0.35}, {1, 0.35}, {0, 0.1}, {-2, 0.1}, {2, 0.1}};
    specs[0].duration_weights = {{"2", 0.6}, {"4", 0.25}, {"", 0.15}};
    specs[0].meter = "4/4";
    specs[0].key = "C";

    specs[1].label = {1, "Beta"};
    specs[1].pitch_set = {"G", "A", "B", "c", "d"};
    specs[1].interval_weights = {{-2, 0.3}, {2, 0.3}, {-1, 0.15}, {1, 0.15}, {3, 0.1}};
    specs[1].duration_weights = {{"", 0.55}, {"2", 0.3}, {"3", 0.15}};
    specs[1].meter = "3/4";
    specs[1].key = "G";

    specs[2].label = {2, "Gamma"};
    specs[2].pitch_set = {"e", "^f", "g", "a", "b"};
    specs[2].interval_weights = {{1, 0.5}, {-1, 0.2}, {2, 0.2}, {0, 0.1}};
    specs[2].duration_weights = {{"3", 0.5}, {"", 0.3}, {"2", 0.2}};
    specs[2].meter = "6/8";
    specs[2].key = "D";

    specs[3].label = {3, "Delta"};
    specs[3].pitch_set = {"c'", "d'", "e'", "f'", "g'"};
    specs[3].interval_weights = {{0, 0.3}, {-1, 0.25}, {1, 0.25}, {-3, 0.1}, {3, 0.1}};
    specs[3].duration_weights = {{"", 0.4}, {"2", 0.4}, {"4", 0.2}};
    specs[3].meter = "2/4";
    specs[3].key = "F";

    for (auto& s : specs) s.prompt_text = "%style:" + s.label.name;
    return specs;
}

std::string generate_piece(const StyleSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    const int units = bar_units(spec.meter);
    const int n_bars = spec.bars_min + static_cast<int>(rng.below(static_cast<std::size_t>(spec.bars_max - spec.bars_min + 1)));

    std::vector<double> step_w;
    for (const auto& w : spec.interval_weights) step_w.push_back(w.weight);

    const int n_pitch = static_cast<int>(spec.pitch_set.size());
    int pitch = static_cast<int>(rng.below(spec.pitch_set.size()));

    std::ostringstream out;
    out << "X:1\nM:" << spec.meter << "\nL:1/8\nK:" << spec.key << "\n";
    std::vector<double> dur_w(spec.duration_weights.size());
    for (int bar = 0; bar < n_bars; ++bar) {
        int remaining = units;
        while (remaining > 0) {
            for (std::size_t i = 0; i < dur_w.size(); ++i) {
                const int u = duration_units(spec.duration_weights[i].token);
                dur_w[i] = u <= remaining ? spec.duration_weights[i].weight : 0.0;
            }
            std::string dur;
            int used = 1;
            if (std::any_of(dur_w.begin(), dur_w.end(), [](double w) { return w > 0.0; })) {
                const auto& pick = spec.duration_weights[rng.categorical(dur_w)];
                dur = pick.token;
                used = duration_units(dur);
            }
            out << spec.pitch_set[static_cast<std::size_t>(pitch)] << dur;
            remaining -= used;
            // Walk on the pitch set as a cycle so the stationary distribution
            // is uniform whenever the step weights are.
            const int step = spec.interval_weights[rng.categorical(step_w)].step;
            pitch = ((pitch + step) % n_pitch + n_pitch) % n_pitch;
        }
        if (bar + 1 == n_bars) {
            out << "|]";
        } else {
            out << '|';
            if ((bar + 1) % 4 == 0) out << '\n';
        }
    }
    return out.str();
}

std::vector<int> StyleCorpus::counts() const {
    std::vector<int> n(labels.size(), 0);
    for (const auto& e : entries) ++n.at(static_cast<std::size_t>(e.label.id));
    return n;
}

std::vector<const CorpusEntry*> StyleCorpus::entries_for(int label_id) const {
    std::vector<const CorpusEntry*> out;
    for (const auto& e : entries)
        if (e.label.id == label_id) out.push_back(&e);
    return out;
}

const StyleLabel& StyleCorpus::label_named(const std::string& name) const {
    for (const auto& l : labels)
        if (l.name == name) return l;
    throw Error(ErrorCode::UnknownStyle, kModule, "no style named '" + name + "'");
}

StyleCorpus build_corpus(const std::vector<StyleSpec>& specs, int n_per_style, std::uint64_t seed) {
    if (n_per_style < 1)
        throw Error(ErrorCode::ConfigError, kModule, "n_per_style must be >= 1");
    StyleCorpus corpus;
    std::uint64_t index = 0;
    for (const auto& spec : specs) {
        spec.check();
        corpus.labels.push_back(spec.label);
        const auto prompt = abc::tokenize(spec.prompt_text);
        for (int i = 0; i < n_per_style; ++i, ++index) {
            corpus.entries.push_back(CorpusEntry{
                prompt, abc::tokenize(generate_piece(spec, derive_seed(seed, index))), spec.label});
        }
    }
    return corpus;
}

abc::TokenSequence concat(const abc::TokenSequence& prompt, const abc::TokenSequence& piece) {
    abc::TokenSequence out;
    out.tokens.reserve(prompt.size() + piece.size() + 1);
    out.tokens = prompt.tokens;
    out.tokens.push_back(abc::Token{"\n", abc::TokenKind::Whitespace});
    out.tokens.insert(out.tokens.end(), piece.tokens.begin(), piece.tokens.end());
    out.source_text = prompt.source_text + "\n" + piece.source_text;
    return out;
}

void save_corpus(const StyleCorpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + path.string());
    for (const auto& e : corpus.entries) {
        nlohmann::json line = {{"style", e.label.name},
                               {"prompt", abc::detokenize(e.prompt)},
                               {"piece", abc::detokenize(e.piece)}};
        out << line.dump() << '\n';
    }
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "write failed for " + path.string());
}

StyleCorpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoFailure, kModule, "cannot read " + path.string());
    StyleCorpus corpus;
    std::map<std::string, int> ids;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto where = path.string() + ":" + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& ex) {
            schema_error(where + ": " + ex.what());
        }
        if (!j.is_object() || !j.contains("style") || !j.contains("prompt") || !j.contains("piece") ||
            !j["style"].is_string() || !j["prompt"].is_string() || !j["piece"].is_string())
            schema_error(where + ": expected {style, prompt, piece} strings");
        const auto name = j["style"].get<std::string>();
        auto [it, fresh] = ids.emplace(name, static_cast<int>(ids.size()));
        if (fresh) corpus.labels.push_back(StyleLabel{it->second, name});
        try {
            corpus.entries.push_back(CorpusEntry{abc::tokenize(j["prompt"].get<std::string>()),
                                                 abc::tokenize(j["piece"].get<std::string>()),
                                                 StyleLabel{it->second, name}});
        } catch (const Error& ex) {
            schema_error(where + ": " + ex.what());
        }
    }
    if (corpus.labels.empty()) schema_error(path.string() + ": no labels");
    return corpus;
}

void to_json(nlohmann::json& j, const StyleSpec& spec) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& w : spec.interval_weights) steps.push_back({{"step", w.step}, {"weight", w.weight}});
    nlohmann::json durs = nlohmann::json::array();
    for (const auto& w : spec.duration_weights) durs.push_back({{"token", w.token}, {"weight", w.weight}});
    j = nlohmann::json{{"id", spec.label.id},          {"name", spec.label.name},
                       {"pitch_set", spec.pitch_set},  {"interval_weights", steps},
                       {"duration_weights", durs},     {"meter", spec.meter},
                       {"key", spec.key},              {"bars_per_piece", {spec.bars_min, spec.bars_max}},
                       {"prompt_text", spec.prompt_text}};
}

void from_json(const nlohmann::json& j, StyleSpec& spec) {
    try {
        spec.label.id = j.at("id").get<int>();
        spec.label.name = j.at("name").get<std::string>();
        spec.pitch_set = j.at("pitch_set").get<std::vector<std::string>>();
        spec.interval_weights.clear();
        for (const auto& w : j.at("interval_weights"))
            spec.interval_weights.push_back({w.at("step").get<int>(), w.at("weight").get<double>()});
        spec.duration_weights.clear();
        for (const auto& w : j.at("duration_weights"))
            spec.duration_weights.push_back({w.at("token").get<std::string>(), w.at("weight").get<double>()});
        spec.meter = j.at("meter").get<std::string>();
        spec.key = j.value("key", std::string("C"));
        const auto bars = j.at("bars_per_piece");
        spec.bars_min = bars.at(0).get<int>();
        spec.bars_max = bars.at(1).get<int>();
        spec.prompt_text = j.value("prompt_text", "%style:" + spec.label.name);
    } catch (const nlohmann::json::exception& ex) {
        schema_error(std::string("style spec: ") + ex.what());
    }
}

std::vector<StyleSpec> load_registry(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoFailure, kModule, "cannot read " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
        schema_error(path.string() + ": " + ex.what());
    }
    if (!j.is_array() || j.empty()) schema_error(path.string() + ": expected non-empty list of styles");
    auto specs = j.get<std::vector<StyleSpec>>();
    std::set<std::string> names;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].label.id != static_cast<int>(i)) schema_error("style ids must be dense 0..K-1");
        if (!names.insert(specs[i].label.name).second) schema_error("duplicate style " + specs[i].label.name);
        specs[i].check();
    }
    return specs;
}

void save_registry(const std::vector<StyleSpec>& specs, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, kModule, "cannot write " + path.string());
    out << nlohmann::json(specs).dump(2) << '\n';
}

} // namespace cvsteer::corpus
