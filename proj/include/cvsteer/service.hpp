#pragma once

// Local HTTP facade: GET /styles, POST /generate, GET /localization.
// Handlers are plain functions of (loaded artifacts, request) so they can be
// exercised without a socket; serve() binds them to an HTTP server.

#include "cvsteer/classifier.hpp"
#include "cvsteer/steering.hpp"
#include "cvsteer/style_corpus.hpp"
#include "cvsteer/tinylm.hpp"

#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace cvsteer::service {

struct Artifacts {
    lm::Checkpoint checkpoint;
    std::vector<corpus::StyleSpec> styles;       // classifier label order
    std::vector<steer::ComposerVector> vectors;  // same order as styles
    shallow::StyleClassifier classifier;
    std::string layer_report_json;               // served verbatim
    int layer = 0;
};

struct Response {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

struct Limits {
    int max_len_cap = 512;
    double budget_seconds = 30.0;
};

class Service {
public:
    explicit Service(Limits limits = {}) : limits_(limits) {}

    void load(std::shared_ptr<const Artifacts> artifacts);
    bool loaded() const;

    Response handle(const std::string& method, const std::string& path, const std::string& body) const;

    Response styles() const;
    Response generate(const std::string& body) const;
    Response localization() const;

    const Limits& limits() const { return limits_; }

private:
    std::shared_ptr<const Artifacts> current() const;

    Limits limits_;
    mutable std::mutex mu_;
    std::shared_ptr<const Artifacts> artifacts_;
};

// Blocks until the server stops. CORS is open for local clients.
// Throws Error{IoFailure} when the address cannot be bound.
void serve(const Service& service, const std::string& host, int port, int threads = 4);

} // namespace cvsteer::service
