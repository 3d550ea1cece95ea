#include "loraserve/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <random>
#include <set>

#include "loraserve/errors.hpp"

namespace loraserve {

double similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dim() != b.dim()) throw DimensionError("embedding dimensions differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) s += a.values[i] * b.values[i];
    return s;
}

EmbeddingVector embed_lora(const Encoder& encoder, const LoraAdapter& adapter, std::string_view instruction) {
    if (adapter.samples.empty()) {
        throw ValidationError("adapter '" + adapter.id + "' has no representative samples");
    }
    EmbeddingVector sum{std::vector<double>(encoder.embed_dim(), 0.0)};
    for (const auto& s : adapter.samples) {
        const auto v = encoder.embed_text(instruction, s);
        for (std::size_t i = 0; i < sum.dim(); ++i) sum.values[i] += v.values[i];
    }
    const double inv_m = 1.0 / static_cast<double>(adapter.samples.size());
    for (auto& v : sum.values) v *= inv_m;
    const double n = sum.norm();
    if (n == 0.0) throw RuntimeFailure("adapter '" + adapter.id + "' centroid has zero norm");
    for (auto& v : sum.values) v /= n;
    return sum;
}

std::vector<ScoredAdapter> rank_top_k(std::vector<ScoredAdapter> candidates, std::size_t k, const AdapterMask* mask) {
    if (k == 0) throw ValidationError("k must be >= 1");
    if (mask) {
        std::erase_if(candidates, [mask](const ScoredAdapter& c) { return mask->count(c.id) != 0; });
    }
    auto better = [](const ScoredAdapter& a, const ScoredAdapter& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    };
    const std::size_t keep = std::min(k, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    candidates.resize(keep);
    return candidates;
}

AdapterIndex::AdapterIndex(const Encoder& encoder, const RegistrySnapshot& snapshot, std::string_view instruction)
    : version_(snapshot.version()) {
    entries_.reserve(snapshot.size());
    for (const auto& a : snapshot.adapters()) entries_.emplace_back(a->id, embed_lora(encoder, *a, instruction));
}

std::vector<ScoredAdapter> AdapterIndex::retrieve(const EmbeddingVector& query, std::size_t k,
                                                  const AdapterMask* mask) const {
    std::vector<ScoredAdapter> scored;
    scored.reserve(entries_.size());
    for (const auto& [id, centroid] : entries_) scored.push_back({id, similarity(query, centroid)});
    auto out = rank_top_k(std::move(scored), k, mask);
    if (out.empty()) throw EmptyPoolError("no candidate adapters left after masking");
    return out;
}

std::vector<ScoredAdapter> retrieve_top_k(const Encoder& encoder, std::string_view text,
                                          const RegistrySnapshot& snapshot, std::size_t k, const AdapterMask* mask,
                                          std::string_view instruction) {
    if (snapshot.empty()) throw EmptyPoolError("adapter pool is empty");
    AdapterIndex index(encoder, snapshot, instruction);
    return index.retrieve(encoder.embed_text(instruction, text), k, mask);
}

// ---------------------------------------------------------------------------

namespace {

// Softmax over [s+, s1-, ..., sp-] / gamma; returns loss and fills probs.
double softmax_nll(double positive, std::span<const double> negatives, double gamma, std::vector<double>& probs) {
    if (!(gamma > 0.0)) throw ValidationError("gamma must be > 0");
    if (negatives.empty()) throw ValidationError("at least one negative is required");
    probs.resize(negatives.size() + 1);
    probs[0] = positive / gamma;
    for (std::size_t j = 0; j < negatives.size(); ++j) probs[j + 1] = negatives[j] / gamma;
    const double mx = *std::max_element(probs.begin(), probs.end());
    double denom = 0.0;
    for (auto& v : probs) {
        v = std::exp(v - mx);
        denom += v;
    }
    for (auto& v : probs) v /= denom;
    // -log(e^{s+/g - mx} / denom)
    return -(positive / gamma - mx) + std::log(denom);
}

}  // namespace

double contrastive_nll_from_scores(double positive_score, std::span<const double> negative_scores, double gamma) {
    std::vector<double> probs;
    return softmax_nll(positive_score, negative_scores, gamma, probs);
}

double contrastive_nll(const EmbeddingVector& anchor, const EmbeddingVector& positive,
                       std::span<const EmbeddingVector> negatives, double gamma) {
    std::vector<double> neg(negatives.size());
    for (std::size_t j = 0; j < negatives.size(); ++j) neg[j] = similarity(anchor, negatives[j]);
    return contrastive_nll_from_scores(similarity(anchor, positive), neg, gamma);
}

namespace {

void accumulate_step(const Encoder& encoder, std::string_view anchor, std::string_view positive,
                     std::span<const std::string> negatives, double gamma, std::string_view instruction,
                     EncoderGradient& grad, double& loss) {
    const auto anchor_ids = encoder.encode(instruction, anchor);
    const auto anchor_vec = encoder.embed_ids(anchor_ids);

    std::vector<std::vector<std::size_t>> other_ids;
    other_ids.reserve(negatives.size() + 1);
    other_ids.push_back(encoder.encode(instruction, positive));
    for (const auto& n : negatives) other_ids.push_back(encoder.encode(instruction, n));

    std::vector<EmbeddingVector> others;
    others.reserve(other_ids.size());
    for (const auto& ids : other_ids) others.push_back(encoder.embed_ids(ids));

    std::vector<double> neg_scores(negatives.size());
    for (std::size_t j = 0; j < negatives.size(); ++j) neg_scores[j] = similarity(anchor_vec, others[j + 1]);
    std::vector<double> probs;
    loss = softmax_nll(similarity(anchor_vec, others[0]), neg_scores, gamma, probs);

    // dL/ds+ = (p+ - 1)/gamma, dL/ds_j = p_j/gamma
    std::vector<double> dscore(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) dscore[i] = probs[i] / gamma;
    dscore[0] -= 1.0 / gamma;

    const std::size_t e = encoder.embed_dim();
    std::vector<double> d_anchor(e, 0.0);
    std::vector<double> d_other(e);
    for (std::size_t i = 0; i < others.size(); ++i) {
        for (std::size_t j = 0; j < e; ++j) {
            d_anchor[j] += dscore[i] * others[i].values[j];
            d_other[j] = dscore[i] * anchor_vec.values[j];
        }
        encoder.backward(other_ids[i], others[i], d_other, grad);
    }
    encoder.backward(anchor_ids, anchor_vec, d_anchor, grad);
}

}  // namespace

ContrastiveStep contrastive_loss_and_gradient(const Encoder& encoder, std::string_view anchor,
                                              std::string_view positive, std::span<const std::string> negatives,
                                              double gamma, std::string_view instruction) {
    ContrastiveStep step{0.0, encoder.zero_gradient()};
    accumulate_step(encoder, anchor, positive, negatives, gamma, instruction, step.gradient, step.loss);
    return step;
}

RetrieverTrainResult train_retriever(Encoder encoder, const std::map<std::string, std::vector<std::string>>& tasks,
                                     const TrainingConfig& config, std::string_view instruction) {
    if (tasks.size() < 2) throw ValidationError("retriever training needs at least two tasks");
    if (!(config.gamma > 0.0)) throw ValidationError("gamma must be > 0");
    if (config.negatives == 0) throw ValidationError("negatives must be >= 1");
    for (const auto& [task, samples] : tasks) {
        if (samples.size() < 2) throw ValidationError("task '" + task + "' needs at least two samples");
    }

    std::vector<const std::vector<std::string>*> task_samples;
    for (const auto& [_, samples] : tasks) task_samples.push_back(&samples);

    // (task, sample) anchors, visited in a fresh shuffled order every epoch
    std::vector<std::pair<std::size_t, std::size_t>> anchors;
    for (std::size_t t = 0; t < task_samples.size(); ++t)
        for (std::size_t s = 0; s < task_samples[t]->size(); ++s) anchors.emplace_back(t, s);

    std::mt19937_64 rng(config.seed);
    RetrieverTrainResult result{std::move(encoder), {}};
    auto& enc = result.encoder;
    auto grad = enc.zero_gradient();
    std::vector<std::string> negs(config.negatives);
    std::set<std::size_t> pos_side, neg_side, touched;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(anchors.begin(), anchors.end(), rng);
        double total = 0.0;
        for (const auto& [t, s] : anchors) {
            const auto& own = *task_samples[t];
            std::uniform_int_distribution<std::size_t> pick_pos(0, own.size() - 2);
            std::size_t pos = pick_pos(rng);
            if (pos >= s) ++pos;
            std::uniform_int_distribution<std::size_t> pick_task(0, task_samples.size() - 2);
            for (auto& n : negs) {
                std::size_t nt = pick_task(rng);
                if (nt >= t) ++nt;
                const auto& other = *task_samples[nt];
                n = other[std::uniform_int_distribution<std::size_t>(0, other.size() - 1)(rng)];
            }

            std::fill(grad.token_table.data().begin(), grad.token_table.data().end(), 0.0);
            std::fill(grad.projection.data().begin(), grad.projection.data().end(), 0.0);
            double loss = 0.0;
            accumulate_step(enc, own[s], own[pos], negs, config.gamma, instruction, grad, loss);
            total += loss;

            for (std::size_t i = 0; i < grad.token_table.size(); ++i)
                enc.token_table()[i] -= config.learning_rate * grad.token_table[i];
            if (config.token_decay > 0.0) {
                // Only rows that occur on both sides of this contrast: they
                // cannot separate the positive from the negatives.
                pos_side.clear();
                neg_side.clear();
                touched.clear();
                for (const auto* text : {&own[s], &own[pos]}) for (auto id : enc.encode(instruction, *text)) pos_side.insert(id);
                for (const auto& n : negs) for (auto id : enc.encode(instruction, n)) neg_side.insert(id);
                std::set_intersection(pos_side.begin(), pos_side.end(), neg_side.begin(), neg_side.end(),
                                      std::inserter(touched, touched.end()));
                const double shrink = 1.0 - config.learning_rate * config.token_decay;
                for (auto id : touched) for (auto& v : enc.token_table().row(id)) v *= shrink;
            }
            for (std::size_t i = 0; i < grad.projection.size(); ++i)
                enc.projection()[i] -= config.learning_rate * config.projection_lr_scale * grad.projection[i];
        }
        result.epoch_losses.push_back(total / static_cast<double>(anchors.size()));
    }
    return result;
}

}  // namespace loraserve
