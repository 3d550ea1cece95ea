#pragma once

#include <condition_variable>
#include <deque>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <string>
#include <variant>

#include "loraserve/engine.hpp"

namespace loraserve {

/// A request line that could not be turned into an InferenceRequest.
struct ProtocolError {
    std::optional<std::string> id;  // present when the line carried a readable id
    std::string message;
};

using ParsedLine = std::variant<InferenceRequest, ProtocolError>;

/// Parses one JSON request line:
///   {"id": "...", "text": "...", "features": [[d floats], ...], "mask": ["adapter id", ...]}
/// `mask` is optional. Feature rows must all have `width` entries.
ParsedLine parse_request_line(const std::string& line, std::size_t width);

std::string format_response(const InferenceResponse& response);
std::string format_error(const ProtocolError& error);

/// Minimal closable FIFO used between the serve-loop stages.
template <class T>
class HandoffQueue {
public:
    void push(T value) {
        {
            std::lock_guard lock(mutex_);
            items_.push_back(std::move(value));
        }
        cv_.notify_one();
    }

    void close() {
        {
            std::lock_guard lock(mutex_);
            closed_ = true;
        }
        cv_.notify_all();
    }

    /// Blocks until an item arrives or the queue is closed and drained.
    std::optional<T> pop() {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [this] { return closed_ || !items_.empty(); });
        if (items_.empty()) return std::nullopt;
        T v = std::move(items_.front());
        items_.pop_front();
        return v;
    }

    std::optional<T> try_pop() {
        std::lock_guard lock(mutex_);
        if (items_.empty()) return std::nullopt;
        T v = std::move(items_.front());
        items_.pop_front();
        return v;
    }

private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<T> items_;
    bool closed_ = false;
};

struct ServeLoopConfig {
    CompositionStrategy strategy = CompositionStrategy::mixture(kDefaultTopK);
    std::size_t max_batch = 32;
};

struct ServeLoopStats {
    std::size_t requests = 0;
    std::size_t errors = 0;
    std::size_t batches = 0;
};

/// Reads request lines from `in` until EOF and writes one response line per
/// non-blank input line to `out`, in input order. A reader thread feeds a
/// batch former, which drains up to max_batch pending lines, and a compute
/// worker serves each batch and flushes its responses.
ServeLoopStats run_serve_loop(std::istream& in, std::ostream& out, const ServingEngine& engine,
                              const ServeLoopConfig& config);

}  // namespace loraserve
