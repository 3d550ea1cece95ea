#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loraserve/engine.hpp"
#include "loraserve/tensor.hpp"

namespace loraserve {

/// Knobs of the synthetic mixed-task generator. Tasks are grouped into
/// families that share part of their target map and a few family words, so
/// that adapters of sibling tasks are useful for each other.
struct SuiteConfig {
    std::size_t num_tasks = 20;
    std::size_t train_per_task = 20;
    std::size_t test_per_task = 50;
    std::size_t width = 16;
    std::size_t seq_len = 4;
    std::uint64_t seed = 1;

    std::size_t num_families = 5;
    std::size_t words_per_task = 6;     // size of each task's private vocab cluster
    std::size_t words_per_family = 6;
    std::size_t filler_words = 40;      // shared by every task
    std::size_t task_tokens = 4;        // per sample text
    std::size_t family_tokens = 6;
    std::size_t filler_tokens = 16;

    double family_rank_gain = 1.0;      // scale of the family-shared low-rank shift
    double task_rank_gain = 0.6;        // scale of the task-specific low-rank shift
    std::size_t shift_rank = 2;
    double feature_std = 1.0;
};

struct SyntheticSample {
    std::string text;
    DenseTensor features;  // [seq_len, width]
    DenseTensor targets;   // [seq_len, width]
};

struct SyntheticTask {
    std::string task_id;
    std::size_t family = 0;
    std::vector<std::string> vocab_cluster;
    DenseTensor target_weight;  // [width, width]
    std::vector<double> target_bias;
    std::vector<SyntheticSample> train;
    std::vector<SyntheticSample> test;

    std::vector<TaskExample> train_examples() const;
    std::vector<std::string> train_texts() const;
};

struct SyntheticTaskSuite {
    SuiteConfig config;
    std::vector<std::vector<std::string>> family_vocab;
    std::vector<std::string> filler_vocab;
    std::vector<SyntheticTask> tasks;

    /// Every word the generator can emit.
    std::vector<std::string> vocabulary() const;
};

SyntheticTaskSuite generate_suite(const SuiteConfig& config);
SyntheticTaskSuite generate_suite(std::size_t num_tasks, std::size_t samples_per_task, std::size_t width,
                                  std::uint64_t seed);

/// Id under which a task's adapter is registered.
std::string adapter_id_for(const std::string& task_id);

}  // namespace loraserve
