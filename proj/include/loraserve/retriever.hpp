#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loraserve/encoder.hpp"
#include "loraserve/registry.hpp"

namespace loraserve {

inline constexpr std::size_t kDefaultTopK = 3;

/// Dot product of two unit vectors, i.e. their cosine similarity.
double similarity(const EmbeddingVector& a, const EmbeddingVector& b);

/// Centroid of an adapter: mean of the instructed embeddings of its
/// representative samples, re-normalised to unit length.
EmbeddingVector embed_lora(const Encoder& encoder, const LoraAdapter& adapter,
                           std::string_view instruction = kRetrievalInstruction);

struct ScoredAdapter {
    std::string id;
    double score = 0.0;

    bool operator==(const ScoredAdapter&) const = default;
};

using AdapterMask = std::set<std::string>;

/// Ranks (id, score) candidates: descending score, ties by ascending id.
/// Masked ids are dropped; at most k results are returned.
std::vector<ScoredAdapter> rank_top_k(std::vector<ScoredAdapter> candidates, std::size_t k,
                                      const AdapterMask* mask = nullptr);

/// Centroid embeddings for every adapter of one snapshot. Immutable after
/// construction and safe to share between threads.
class AdapterIndex {
public:
    AdapterIndex(const Encoder& encoder, const RegistrySnapshot& snapshot,
                 std::string_view instruction = kRetrievalInstruction);

    std::uint64_t snapshot_version() const noexcept { return version_; }
    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<std::pair<std::string, EmbeddingVector>>& entries() const noexcept { return entries_; }

    /// Throws EmptyPoolError when nothing is left after masking.
    std::vector<ScoredAdapter> retrieve(const EmbeddingVector& query, std::size_t k,
                                        const AdapterMask* mask = nullptr) const;

private:
    std::uint64_t version_;
    std::vector<std::pair<std::string, EmbeddingVector>> entries_;
};

/// One-shot retrieval: embeds the text and scans the snapshot.
std::vector<ScoredAdapter> retrieve_top_k(const Encoder& encoder, std::string_view text,
                                          const RegistrySnapshot& snapshot, std::size_t k,
                                          const AdapterMask* mask = nullptr,
                                          std::string_view instruction = kRetrievalInstruction);

// ---------------------------------------------------------------------------
// Contrastive training

struct TrainingConfig {
    double gamma = 0.05;           // softmax temperature
    std::size_t negatives = 4;     // negatives per positive pair
    std::size_t epochs = 50;
    double learning_rate = 0.05;
    std::uint64_t seed = 7;
    double projection_lr_scale = 0.02;  // projection step = learning_rate * this
    double token_decay = 0.1;           // shrink of token rows seen on both sides of a contrast
};

/// -log softmax probability of the positive among {positive, negatives}
/// with logits s/gamma, computed with max subtraction.
double contrastive_nll(const EmbeddingVector& anchor, const EmbeddingVector& positive,
                       std::span<const EmbeddingVector> negatives, double gamma);

/// Same loss from precomputed similarities.
double contrastive_nll_from_scores(double positive_score, std::span<const double> negative_scores, double gamma);

/// Loss for one (anchor, positive, negatives) text tuple together with its
/// gradient with respect to every encoder parameter.
struct ContrastiveStep {
    double loss = 0.0;
    EncoderGradient gradient;
};

ContrastiveStep contrastive_loss_and_gradient(const Encoder& encoder, std::string_view anchor,
                                              std::string_view positive, std::span<const std::string> negatives,
                                              double gamma, std::string_view instruction = kRetrievalInstruction);

struct RetrieverTrainResult {
    Encoder encoder;
    std::vector<double> epoch_losses;
};

/// SGD over (x, x+) pairs from the same task, each with `negatives` samples
/// drawn from other tasks. Every sample of every task serves as an anchor
/// once per epoch.
RetrieverTrainResult train_retriever(Encoder encoder, const std::map<std::string, std::vector<std::string>>& tasks,
                                     const TrainingConfig& config,
                                     std::string_view instruction = kRetrievalInstruction);

}  // namespace loraserve
