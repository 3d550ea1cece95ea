#include <istream>
#include <ostream>
#include <thread>

#include "loraserve/errors.hpp"
#include "loraserve/protocol.hpp"

namespace loraserve {

namespace {

using Batch = std::vector<ParsedLine>;

// Serves the valid requests of a batch together; if the batch as a whole
// fails, each request is retried alone so one bad request cannot sink the rest.
std::vector<std::string> serve_entries(const ServingEngine& engine, Batch& batch, const CompositionStrategy& strategy,
                                       ServeLoopStats& stats) {
    std::vector<InferenceRequest> requests;
    for (auto& entry : batch)
        if (auto* r = std::get_if<InferenceRequest>(&entry)) requests.push_back(*r);

    std::vector<std::string> served(requests.size());
    if (!requests.empty()) {
        try {
            const auto result = engine.serve_batch(requests, strategy);
            for (std::size_t i = 0; i < requests.size(); ++i) served[i] = format_response(result.responses[i]);
        } catch (const Error&) {
            for (std::size_t i = 0; i < requests.size(); ++i) {
                try {
                    const auto single = engine.serve_batch(std::span(&requests[i], 1), strategy);
                    served[i] = format_response(single.responses.front());
                } catch (const Error& e) {
                    served[i] = format_error({requests[i].id, e.what()});
                    ++stats.errors;
                }
            }
        }
    }

    std::vector<std::string> lines;
    std::size_t next = 0;
    for (auto& entry : batch) {
        if (std::holds_alternative<InferenceRequest>(entry)) {
            lines.push_back(std::move(served[next++]));
        } else {
            lines.push_back(format_error(std::get<ProtocolError>(entry)));
            ++stats.errors;
        }
    }
    return lines;
}

}  // namespace

ServeLoopStats run_serve_loop(std::istream& in, std::ostream& out, const ServingEngine& engine,
                              const ServeLoopConfig& config) {
    if (config.max_batch == 0) throw ValidationError("max_batch must be >= 1");
    const std::size_t width = engine.model().width();
    HandoffQueue<std::string> lines;
    HandoffQueue<Batch> batches;
    ServeLoopStats stats;

    std::thread reader([&] {
        std::string line;
        while (std::getline(in, line)) {
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            lines.push(std::move(line));
        }
        lines.close();
    });

    std::thread former([&] {
        while (auto first = lines.pop()) {
            Batch batch;
            batch.push_back(parse_request_line(*first, width));
            while (batch.size() < config.max_batch) {
                auto more = lines.try_pop();
                if (!more) break;
                batch.push_back(parse_request_line(*more, width));
            }
            batches.push(std::move(batch));
        }
        batches.close();
    });

    while (auto batch = batches.pop()) {
        stats.requests += batch->size();
        ++stats.batches;
        for (const auto& l : serve_entries(engine, *batch, config.strategy, stats)) out << l << '\n';
        out.flush();
    }
    reader.join();
    former.join();
    return stats;
}

}  // namespace loraserve
