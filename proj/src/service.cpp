#include "cvsteer/service.hpp"

#include "cvsteer/abc.hpp"
#include "cvsteer/error.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <optional>
#include <set>

namespace cvsteer::service {

using nlohmann::json;

namespace {

constexpr const char* kModule = "service";

Response error_response(int status, const std::string& code, const std::string& message,
                        const std::optional<std::string>& field = {}) {
    json e = {{"code", code}, {"module", kModule}, {"message", message}};
    if (field) e["field"] = *field;
    return {status, json{{"error", e}}.dump()};
}

// Thrown while reading a request; turned into a 400 or 422 response.
struct RequestError {
    int status;
    std::string field;
    std::string message;
};

[[noreturn]] void bad(const std::string& field, const std::string& message) { throw RequestError{400, field, message}; }

double number_field(const json& body, const char* key, double fallback) {
    if (!body.contains(key)) return fallback;
    const auto& v = body.at(key);
    if (!v.is_number()) bad(key, std::string(key) + " must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw RequestError{422, key, std::string(key) + " must be finite"};
    return x;
}

bool bool_field(const json& body, const char* key, bool fallback) {
    if (!body.contains(key)) return fallback;
    if (!body.at(key).is_boolean()) bad(key, std::string(key) + " must be a boolean");
    return body.at(key).get<bool>();
}

std::int64_t int_field(const json& body, const char* key, std::int64_t fallback) {
    if (!body.contains(key)) return fallback;
    const auto& v = body.at(key);
    if (!v.is_number_integer()) bad(key, std::string(key) + " must be an integer");
    return v.get<std::int64_t>();
}

int style_index(const Artifacts& a, const std::string& name, const std::string& field) {
    for (std::size_t i = 0; i < a.styles.size(); ++i)
        if (a.styles[i].label.name == name) return static_cast<int>(i);
    bad(field, "unknown style '" + name + "'");
}

} // namespace

void Service::load(std::shared_ptr<const Artifacts> artifacts) {
    if (artifacts) {
        if (artifacts->vectors.size() != artifacts->styles.size() ||
            artifacts->classifier.model.labels().size() != artifacts->styles.size())
            throw Error(ErrorCode::SchemaViolation, kModule, "styles, vectors and classifier labels disagree");
        for (std::size_t i = 0; i < artifacts->styles.size(); ++i)
            if (artifacts->styles[i].label.name != artifacts->classifier.model.labels()[i] ||
                artifacts->vectors[i].label.name != artifacts->styles[i].label.name)
                throw Error(ErrorCode::SchemaViolation, kModule, "styles, vectors and classifier labels disagree");
    }
    std::lock_guard lock(mu_);
    artifacts_ = std::move(artifacts);
}

bool Service::loaded() const { return current() != nullptr; }

std::shared_ptr<const Artifacts> Service::current() const {
    std::lock_guard lock(mu_);
    return artifacts_;
}

Response Service::handle(const std::string& method, const std::string& path, const std::string& body) const {
    const auto route = [&](const char* m, const char* p) { return path == p && method == m; };
    if (route("GET", "/styles")) return styles();
    if (route("POST", "/generate")) return generate(body);
    if (route("GET", "/localization")) return localization();
    if (path == "/styles" || path == "/generate" || path == "/localization")
        return error_response(405, "MethodNotAllowed", method + " is not allowed on " + path);
    return error_response(404, "NotFound", "no route for " + path);
}

Response Service::styles() const {
    const auto a = current();
    if (!a) return error_response(503, "NotLoaded", "model artifacts are still loading");
    json list = json::array();
    for (const auto& s : a->styles)
        list.push_back({{"id", s.label.id}, {"name", s.label.name}, {"prompt_text", s.prompt_text}});
    return {200, json{{"styles", list}, {"selected_layer", a->layer}, {"context_len", a->checkpoint.config().context_len}}
                     .dump()};
}

Response Service::localization() const {
    const auto a = current();
    if (!a) return error_response(503, "NotLoaded", "layer report not computed yet");
    return {200, a->layer_report_json};
}

Response Service::generate(const std::string& body_text) const {
    const auto started = std::chrono::steady_clock::now();
    const auto a = current();
    if (!a) return error_response(503, "NotLoaded", "model artifacts are still loading");
    try {
        json body;
        std::string last_key = "body";
        try {
            body = json::parse(body_text, [&](int, json::parse_event_t event, json& parsed) {
                if (event == json::parse_event_t::key) last_key = parsed.get<std::string>();
                return true;
            });
        } catch (const json::parse_error& e) {
            bad("body", std::string("invalid JSON: ") + e.what());
        } catch (const json::out_of_range&) {
            // Literals such as 1e999 overflow a double.
            throw RequestError{422, last_key, last_key + " must be finite"};
        }
        if (!body.is_object()) bad("body", "request body must be a JSON object");
        static const std::set<std::string> known{"prompt_style", "targets",     "alpha",       "seed",
                                                 "max_len",      "temperature", "format_gate", "norm_preserve"};
        for (const auto& [k, v] : body.items())
            if (!known.contains(k)) bad(k, "unknown field '" + k + "'");

        if (!body.contains("prompt_style") || !body.at("prompt_style").is_string())
            bad("prompt_style", "prompt_style must be a style name");
        const auto prompt_name = body.at("prompt_style").get<std::string>();
        const int prompt = style_index(*a, prompt_name, "prompt_style");

        std::vector<steer::FusionTerm> terms;
        json targets_echo = json::array();
        if (body.contains("targets")) {
            const auto& targets = body.at("targets");
            if (!targets.is_array()) bad("targets", "targets must be an array of {style, weight}");
            for (std::size_t i = 0; i < targets.size(); ++i) {
                const auto field = "targets[" + std::to_string(i) + "]";
                const auto& t = targets[i];
                if (!t.is_object() || !t.contains("style") || !t.at("style").is_string())
                    bad(field + ".style", "each target needs a style name");
                for (const auto& [k, v] : t.items())
                    if (k != "style" && k != "weight") bad(field + "." + k, "unknown field '" + k + "'");
                const auto name = t.at("style").get<std::string>();
                const int idx = style_index(*a, name, field + ".style");
                double w = 1.0;
                if (t.contains("weight")) {
                    if (!t.at("weight").is_number()) bad(field + ".weight", "weight must be a number");
                    w = t.at("weight").get<double>();
                    if (!std::isfinite(w)) throw RequestError{422, field + ".weight", "weight must be finite"};
                }
                terms.push_back({&a->vectors[static_cast<std::size_t>(idx)], w});
                targets_echo.push_back({{"style", name}, {"weight", w}});
            }
        }

        const double alpha = number_field(body, "alpha", 0.0);
        const std::int64_t seed = int_field(body, "seed", 0);
        if (seed < 0) bad("seed", "seed must be non-negative");
        const int limit = std::min(limits_.max_len_cap, a->checkpoint.config().context_len);
        const std::int64_t max_len = int_field(body, "max_len", std::min(160, limit));
        if (max_len < 2 || max_len > limit) bad("max_len", "max_len must be in 2.." + std::to_string(limit));
        const double temperature = number_field(body, "temperature", 0.8);
        if (temperature < 0.0) bad("temperature", "temperature must be >= 0");
        const bool format_gate = bool_field(body, "format_gate", true);
        const bool norm_preserve = bool_field(body, "norm_preserve", true);

        steer::SteeringConfig cfg;
        cfg.alpha = alpha;
        cfg.layer = a->layer;
        cfg.format_gate = format_gate;
        cfg.norm_preserve = norm_preserve;
        if (!terms.empty()) cfg.direction = steer::fuse(terms);
        if (cfg.direction.size() > 0 && !cfg.direction.allFinite())
            throw RequestError{422, "targets", "fused direction is not finite"};

        const auto& style = a->styles[static_cast<std::size_t>(prompt)];
        const auto gen = steer::steered_generate(a->checkpoint, steer::make_prompt(style), cfg,
                                                 lm::Sampler{temperature, static_cast<std::uint64_t>(seed)},
                                                 static_cast<int>(max_len));
        const auto piece = gen.piece_tokens();
        const Eigen::VectorXd p = a->classifier.predict_proba(piece);
        json probs = json::object();
        for (std::size_t i = 0; i < a->styles.size(); ++i)
            probs[a->styles[i].label.name] = p(static_cast<Eigen::Index>(i));

        const double elapsed =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
        if (elapsed > limits_.budget_seconds * 1000.0)
            return error_response(504, "BudgetExceeded", "generation exceeded the server time budget");
        json echo = {{"prompt_style", prompt_name}, {"targets", targets_echo},   {"alpha", alpha},
                     {"seed", seed},                {"max_len", max_len},        {"temperature", temperature},
                     {"format_gate", format_gate},  {"norm_preserve", norm_preserve}};
        return {200, json{{"abc", piece.source_text},
                          {"parse_valid", abc::validate(piece).parse_valid},
                          {"probabilities", probs},
                          {"was_gated_count", gen.gated_count()},
                          {"layer", a->layer},
                          {"elapsed_ms", elapsed},
                          {"request", echo}}
                         .dump()};
    } catch (const RequestError& e) {
        return error_response(e.status, e.status == 422 ? "NonFinite" : "SchemaViolation", e.message, e.field);
    } catch (const Error& e) {
        json err = {{"code", std::string(to_string(e.code()))}, {"module", e.module()}, {"message", e.what()}};
        return {500, json{{"error", err}}.dump()};
    }
}

void serve(const Service& service, const std::string& host, int port, int threads) {
    httplib::Server server;
    server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(std::max(1, threads))); };
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    const auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
        const auto r = service.handle(req.method, req.path, req.body);
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    };
    server.Get(R"(/.*)", forward);
    server.Post(R"(/.*)", forward);
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    if (!server.bind_to_port(host, port))
        throw Error(ErrorCode::IoFailure, kModule, "cannot bind " + host + ":" + std::to_string(port));
    server.listen_after_bind();
}

} // namespace cvsteer::service
