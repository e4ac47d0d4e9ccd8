#include "cvsteer/service.hpp"
#include "fixtures.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

using namespace cvsteer;
using nlohmann::json;

namespace {

std::shared_ptr<const service::Artifacts> artifacts() {
    const auto& t = fixture::tiny();
    auto a = std::make_shared<service::Artifacts>(service::Artifacts{
        t.model, t.styles, t.vectors, t.classifier, R"({"layers":[],"selected_layer":2})", 2});
    return a;
}

const service::Service& loaded() {
    static const auto s = [] {
        auto svc = std::make_unique<service::Service>();
        svc->load(artifacts());
        return svc;
    }();
    return *s;
}

json post(const std::string& body, int expect) {
    const auto r = loaded().handle("POST", "/generate", body);
    CHECK(r.status == expect);
    return json::parse(r.body);
}

std::string error_field(const json& j) { return j.at("error").value("field", ""); }

} // namespace

TEST_CASE("not loaded yet") {
    const service::Service svc;
    CHECK(svc.handle("GET", "/styles", "").status == 503);
    CHECK(svc.handle("POST", "/generate", R"({"prompt_style":"Alpha"})").status == 503);
    CHECK(svc.handle("GET", "/localization", "").status == 503);
    CHECK_FALSE(svc.loaded());
}

TEST_CASE("routes") {
    const auto& svc = loaded();
    CHECK(svc.handle("GET", "/nowhere", "").status == 404);
    CHECK(svc.handle("POST", "/styles", "").status == 405);
    CHECK(svc.handle("GET", "/generate", "").status == 405);

    const auto styles = json::parse(svc.handle("GET", "/styles", "").body);
    REQUIRE(styles.at("styles").size() == 4);
    CHECK(styles["styles"][0]["name"] == "Alpha");
    CHECK(styles["styles"][3]["id"] == 3);
    CHECK(styles["selected_layer"] == 2);
    CHECK(styles["context_len"] == 128);

    const auto loc = svc.handle("GET", "/localization", "");
    CHECK(loc.status == 200);
    CHECK(loc.body == R"({"layers":[],"selected_layer":2})");
}

TEST_CASE("generate validation") {
    CHECK(error_field(post(R"({"prompt_style":"Nobody"})", 400)) == "prompt_style");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","targets":[{"style":"X","weight":1}]})", 400)) ==
          "targets[0].style");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","alpha":1e999})", 422)) == "alpha");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","targets":[{"style":"Beta","weight":-1e999}]})", 422)) == "weight");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","max_len":513})", 400)) == "max_len");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","max_len":129})", 400)) == "max_len");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","max_len":1})", 400)) == "max_len");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","colour":"red"})", 400)) == "colour");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","seed":-3})", 400)) == "seed");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","temperature":-1})", 400)) == "temperature");
    CHECK(error_field(post(R"({"prompt_style":"Alpha","format_gate":1})", 400)) == "format_gate");
    CHECK(error_field(post(R"({"prompt_style":"Alpha",)", 400)) == "body");
    CHECK(error_field(post(R"([1,2])", 400)) == "body");
    const auto e = post(R"({"targets":[]})", 400);
    CHECK(e["error"]["code"] == "SchemaViolation");
    CHECK(e["error"]["module"] == "service");
}

TEST_CASE("generate") {
    const auto body = R"({"prompt_style":"Gamma","alpha":0,"seed":4,"max_len":100})";
    const auto a = post(body, 200);
    const auto b = post(body, 200);
    CHECK(a["abc"] == b["abc"]);
    CHECK(a["request"]["temperature"] == 0.8);
    CHECK(a["request"]["format_gate"] == true);
    CHECK(a["layer"] == 2);

    // alpha 0 with targets matches the unsteered request.
    const auto c = post(R"({"prompt_style":"Gamma","alpha":0,"seed":4,"max_len":100,
                            "targets":[{"style":"Alpha","weight":1}]})",
                        200);
    CHECK(c["abc"] == a["abc"]);

    const auto fused = post(R"({"prompt_style":"Delta","alpha":0.5,"seed":1,
                                "targets":[{"style":"Alpha","weight":0.7},{"style":"Beta","weight":0.3}]})",
                            200);
    const auto& p = fused["probabilities"];
    REQUIRE(p.size() == 4);
    CHECK(p.contains("Alpha"));
    CHECK(p.contains("Beta"));
    double sum = 0.0;
    for (const auto& [k, v] : p.items()) sum += v.get<double>();
    CHECK(std::abs(sum - 1.0) < 1e-6);
    CHECK(fused["request"]["targets"].size() == 2);
    CHECK(fused["was_gated_count"].get<int>() >= 0);
    CHECK(fused["parse_valid"].is_boolean());
}

TEST_CASE("budget") {
    service::Service svc(service::Limits{512, 0.0});
    svc.load(artifacts());
    const auto r = svc.handle("POST", "/generate", R"({"prompt_style":"Alpha","seed":1})");
    CHECK(r.status == 504);
}

TEST_CASE("mismatched artifacts are refused") {
    auto a = std::make_shared<service::Artifacts>(*artifacts());
    a->vectors.pop_back();
    service::Service svc;
    CHECK_THROWS(svc.load(a));
    CHECK_FALSE(svc.loaded());
}
