#include <algorithm>
#include <chrono>

#include "loraserve/engine.hpp"
#include "loraserve/errors.hpp"

namespace loraserve {

namespace {

std::size_t count_tokens(std::span<const InferenceRequest> requests) {
    std::size_t tokens = 0;
    for (const auto& r : requests) tokens += r.features.extent(0);
    return tokens;
}

// One pass over every request; returns a value derived from the outputs so
// the work cannot be elided.
double run_pass(const ServingEngine& engine, std::span<const InferenceRequest> requests, std::size_t batch_size,
                const CompositionStrategy& strategy, bool unbatched) {
    double sink = 0.0;
    if (unbatched) {
        for (const auto& r : requests) sink += engine.serve_single(r, strategy).output[0];
        return sink;
    }
    for (std::size_t start = 0; start < requests.size(); start += batch_size) {
        const auto count = std::min(batch_size, requests.size() - start);
        const auto result = engine.serve_batch(requests.subspan(start, count), strategy);
        sink += result.responses.front().output[0];
    }
    return sink;
}

}  // namespace

std::vector<ThroughputRow> benchmark_throughput(const ServingEngine& engine, std::span<const InferenceRequest> requests,
                                                std::span<const std::size_t> batch_sizes,
                                                const CompositionStrategy& strategy, const BenchmarkConfig& config) {
    if (requests.empty()) throw ValidationError("benchmark needs at least one request");
    if (config.trials == 0) throw ValidationError("benchmark needs at least one trial");
    const std::size_t tokens = count_tokens(requests);
    std::vector<ThroughputRow> rows;
    volatile double sink = 0.0;

    for (auto b : batch_sizes) {
        if (b == 0) throw ValidationError("batch size must be >= 1");
        for (std::size_t w = 0; w < config.warmup; ++w) sink = sink + run_pass(engine, requests, b, strategy, config.unbatched);

        std::vector<double> seconds;
        for (std::size_t t = 0; t < config.trials; ++t) {
            const auto start = std::chrono::steady_clock::now();
            sink = sink + run_pass(engine, requests, b, strategy, config.unbatched);
            const auto stop = std::chrono::steady_clock::now();
            seconds.push_back(std::chrono::duration<double>(stop - start).count());
        }
        std::sort(seconds.begin(), seconds.end());
        const double median = seconds[seconds.size() / 2];
        rows.push_back({b, static_cast<double>(tokens) / median, median, tokens});
    }
    return rows;
}

}  // namespace loraserve
