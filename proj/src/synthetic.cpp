#include "loraserve/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_set>

#include "loraserve/errors.hpp"

namespace loraserve {

namespace {

constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"};
constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};

class WordFactory {
public:
    explicit WordFactory(std::mt19937_64& rng) : rng_(rng) {}

    std::string next() {
        std::uniform_int_distribution<int> syll(2, 3);
        std::uniform_int_distribution<std::size_t> on(0, std::size(kOnsets) - 1);
        std::uniform_int_distribution<std::size_t> vo(0, std::size(kVowels) - 1);
        for (;;) {
            std::string w;
            const int n = syll(rng_);
            for (int i = 0; i < n; ++i) w += std::string(kOnsets[on(rng_)]) + kVowels[vo(rng_)];
            if (used_.insert(w).second) return w;
        }
    }

    std::vector<std::string> batch(std::size_t n) {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < n; ++i) out.push_back(next());
        return out;
    }

    void reserve_word(const std::string& w) { used_.insert(w); }

private:
    std::mt19937_64& rng_;
    std::unordered_set<std::string> used_;
};

// U V^T with U, V ~ N(0, gain^2 / d), both [d, rank]
DenseTensor low_rank(std::size_t d, std::size_t rank, double gain, std::mt19937_64& rng) {
    const double sd = std::sqrt(gain / std::sqrt(static_cast<double>(d * rank)));
    auto u = DenseTensor::random_normal({d, rank}, rng, sd);
    auto v = DenseTensor::random_normal({d, rank}, rng, sd);
    return matmul(u, transpose(v));
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

SyntheticSample make_sample(const SyntheticTaskSuite& suite, const SyntheticTask& task, std::mt19937_64& rng) {
    const auto& cfg = suite.config;
    std::vector<std::string> words;
    for (std::size_t i = 0; i < cfg.task_tokens; ++i) words.push_back(pick(task.vocab_cluster, rng));
    for (std::size_t i = 0; i < cfg.family_tokens; ++i) words.push_back(pick(suite.family_vocab[task.family], rng));
    for (std::size_t i = 0; i < cfg.filler_tokens; ++i) words.push_back(pick(suite.filler_vocab, rng));
    std::shuffle(words.begin(), words.end(), rng);
    std::string text;
    for (std::size_t i = 0; i < words.size(); ++i) text += (i ? " " : "") + words[i];

    SyntheticSample s{std::move(text), DenseTensor::random_normal({cfg.seq_len, cfg.width}, rng, cfg.feature_std),
                      DenseTensor({cfg.seq_len, cfg.width})};
    for (std::size_t t = 0; t < cfg.seq_len; ++t) {
        for (std::size_t i = 0; i < cfg.width; ++i) {
            double acc = task.target_bias[i];
            for (std::size_t j = 0; j < cfg.width; ++j) acc += task.target_weight.at(i, j) * s.features.at(t, j);
            s.targets.at(t, i) = acc;
        }
    }
    return s;
}

}  // namespace

std::vector<TaskExample> SyntheticTask::train_examples() const {
    std::vector<TaskExample> out;
    out.reserve(train.size());
    for (const auto& s : train) out.push_back({s.features, s.targets});
    return out;
}

std::vector<std::string> SyntheticTask::train_texts() const {
    std::vector<std::string> out;
    for (const auto& s : train) out.push_back(s.text);
    return out;
}

std::vector<std::string> SyntheticTaskSuite::vocabulary() const {
    std::vector<std::string> out = filler_vocab;
    for (const auto& f : family_vocab) out.insert(out.end(), f.begin(), f.end());
    for (const auto& t : tasks) out.insert(out.end(), t.vocab_cluster.begin(), t.vocab_cluster.end());
    return out;
}

std::string adapter_id_for(const std::string& task_id) { return "lora_" + task_id; }

SyntheticTaskSuite generate_suite(const SuiteConfig& config) {
    if (config.num_tasks < 2) throw ValidationError("a suite needs at least two tasks");
    if (config.num_families == 0 || config.num_families > config.num_tasks) {
        throw ValidationError("num_families must be in [1, num_tasks]");
    }
    if (config.width == 0 || config.seq_len == 0) throw ValidationError("width and seq_len must be >= 1");
    if (config.train_per_task < 2) throw ValidationError("train_per_task must be >= 2");
    if (config.task_tokens == 0 || config.words_per_task == 0) throw ValidationError("tasks need vocabulary words");

    std::mt19937_64 rng(config.seed);
    WordFactory words(rng);
    for (const auto& w : tokenize(kRetrievalInstruction)) words.reserve_word(w);

    SyntheticTaskSuite suite;
    suite.config = config;
    suite.filler_vocab = words.batch(std::max<std::size_t>(config.filler_words, 1));
    std::vector<DenseTensor> family_maps;
    for (std::size_t f = 0; f < config.num_families; ++f) {
        suite.family_vocab.push_back(words.batch(std::max<std::size_t>(config.words_per_family, 1)));
        family_maps.push_back(low_rank(config.width, config.shift_rank, config.family_rank_gain, rng));
    }

    std::normal_distribution<double> bias_dist(0.0, 0.1);
    for (std::size_t t = 0; t < config.num_tasks; ++t) {
        SyntheticTask task;
        char id[16];
        std::snprintf(id, sizeof id, "task_%02zu", t);
        task.task_id = id;
        task.family = t % config.num_families;
        task.vocab_cluster = words.batch(config.words_per_task);
        task.target_weight = family_maps[task.family];
        const auto own = low_rank(config.width, config.shift_rank, config.task_rank_gain, rng);
        for (std::size_t i = 0; i < own.size(); ++i) task.target_weight[i] += own[i];
        task.target_bias.resize(config.width);
        for (auto& b : task.target_bias) b = bias_dist(rng);
        suite.tasks.push_back(std::move(task));
    }
    for (auto& task : suite.tasks) {
        for (std::size_t i = 0; i < config.train_per_task; ++i) task.train.push_back(make_sample(suite, task, rng));
        for (std::size_t i = 0; i < config.test_per_task; ++i) task.test.push_back(make_sample(suite, task, rng));
    }
    return suite;
}

SyntheticTaskSuite generate_suite(std::size_t num_tasks, std::size_t samples_per_task, std::size_t width,
                                  std::uint64_t seed) {
    SuiteConfig cfg;
    cfg.num_tasks = num_tasks;
    cfg.test_per_task = samples_per_task;
    cfg.width = width;
    cfg.seed = seed;
    cfg.num_families = std::min(cfg.num_families, num_tasks);
    return generate_suite(cfg);
}

}  // namespace loraserve
