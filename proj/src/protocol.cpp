#include "loraserve/protocol.hpp"

#include "json.hpp"
#include "loraserve/errors.hpp"

namespace loraserve {

using nlohmann::json;

ParsedLine parse_request_line(const std::string& line, std::size_t width) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        return ProtocolError{std::nullopt, "malformed JSON at byte " + std::to_string(e.byte)};
    }
    if (!j.is_object()) return ProtocolError{std::nullopt, "request must be a JSON object"};

    std::optional<std::string> id;
    if (auto it = j.find("id"); it != j.end() && it->is_string()) id = it->get<std::string>();
    auto fail = [&id](std::string msg) { return ProtocolError{id, std::move(msg)}; };
    if (!id || id->empty()) return fail("missing string field 'id'");

    auto text = j.find("text");
    if (text == j.end() || !text->is_string()) return fail("missing string field 'text'");
    if (tokenize(text->get<std::string>()).empty()) return fail("text has no tokens");

    auto feats = j.find("features");
    if (feats == j.end() || !feats->is_array() || feats->empty()) return fail("missing non-empty array 'features'");
    std::vector<double> data;
    data.reserve(feats->size() * width);
    for (const auto& row : *feats) {
        if (!row.is_array() || row.size() != width) {
            return fail("every feature row must hold " + std::to_string(width) + " numbers");
        }
        for (const auto& v : row) {
            if (!v.is_number()) return fail("feature values must be numbers");
            data.push_back(v.get<double>());
        }
    }

    InferenceRequest req{*id, text->get<std::string>(), DenseTensor({feats->size(), width}, std::move(data)),
                         std::nullopt};
    if (auto mask = j.find("mask"); mask != j.end() && !mask->is_null()) {
        if (!mask->is_array()) return fail("'mask' must be an array of adapter ids");
        AdapterMask m;
        for (const auto& v : *mask) {
            if (!v.is_string()) return fail("'mask' must be an array of adapter ids");
            m.insert(v.get<std::string>());
        }
        req.mask = std::move(m);
    }
    return req;
}

std::string format_response(const InferenceResponse& response) {
    nlohmann::ordered_json j;
    j["id"] = response.id;
    j["status"] = "ok";
    const auto& out = response.output;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < out.extent(0); ++t) {
        auto r = out.row(t);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    j["output"] = std::move(rows);
    nlohmann::ordered_json retrieved = nlohmann::ordered_json::array();
    for (const auto& s : response.retrieved) retrieved.push_back({{"id", s.id}, {"score", s.score}});
    j["retrieved"] = std::move(retrieved);
    return j.dump();
}

std::string format_error(const ProtocolError& error) {
    nlohmann::ordered_json j;
    j["id"] = error.id ? nlohmann::ordered_json(*error.id) : nlohmann::ordered_json(nullptr);
    j["status"] = "error";
    j["error"] = error.message;
    return j.dump();
}

}  // namespace loraserve
