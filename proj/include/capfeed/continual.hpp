#pragma once

#include "capfeed/captioner.hpp"
#include "capfeed/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace capfeed {

struct Experience {
    std::string image_id;
    CaptionRecord caption;
    std::int64_t write_step = 0;
};

nlohmann::json to_json(const Experience& e);
Experience experience_from_json(const nlohmann::json& j);

// Bounded reservoir of past training captions. Images are referenced by id
// and resolved again when replayed.
class ReplayMemory {
public:
    explicit ReplayMemory(std::size_t capacity = 1000, std::uint64_t seed = 0);

    // Appends while below capacity, then replaces a uniformly random slot with
    // probability capacity / seen_count. Throws std::invalid_argument for
    // predicted captions.
    void write(Experience e);
    // Uniform without replacement, or with replacement when batch_size
    // exceeds the size. Empty memory gives an empty list.
    std::vector<Experience> sample(std::size_t batch_size, std::uint64_t seed) const;

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::uint64_t seen_count() const { return seen_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<Experience>& entries() const { return entries_; }

    // JSONL: a header line {"v","capacity","seen_count","seed","rng"} then one
    // experience per line. Written to a temporary file and renamed.
    void save(const std::filesystem::path& path) const;
    static ReplayMemory load(const std::filesystem::path& path);

private:
    std::size_t capacity_;
    std::uint64_t seed_;
    std::uint64_t seen_ = 0;
    std::vector<Experience> entries_;
    std::mt19937_64 rng_;
};

void memory_write(ReplayMemory& mem, Experience e);
std::vector<Experience> memory_sample(const ReplayMemory& mem, std::size_t batch_size, std::uint64_t seed);

// Resolves an image id for replay; returns nullptr when unknown.
using ImageLookup = std::function<const ImageRecord*(const std::string&)>;

struct UpdateConfig {
    std::size_t batch_size = 8;
    double lr = 0.01;
    int epochs = 1;
    int replay_every = 10;  // 0 disables replay
    std::size_t replay_batch_size = 8;
    bool write_augmented = true;
    bool shuffle = true;
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> checkpoint_out;

    nlohmann::json to_json() const;
    static UpdateConfig from_json(const nlohmann::json& j);
};

struct UpdateReport {
    int task_id = 0;
    std::size_t new_batches = 0;
    std::size_t replay_batches = 0;
    double final_loss = 0;
    std::string checkpoint_hash;

    nlohmann::json to_json() const;
};

// Trains on batches of new instances; after every replay_every new batches,
// one step on a memory batch. Each consumed instance is written to memory
// after its batch. Throws std::invalid_argument for predicted captions and
// std::runtime_error when a replayed image cannot be resolved.
UpdateReport update(CaptionModel& model, std::span<const Instance> new_instances, ReplayMemory& mem,
                    const ImageLookup& lookup, const UpdateConfig& config, int task_id = 0);

struct TaskData {
    int split_id = 0;
    std::vector<Instance> train;
    std::vector<EvalItem> eval;
};

struct DisjointResult {
    // T x (T + 1): row i holds BLEU-4 on tasks j <= i after training task i,
    // NaN above the diagonal; the last column is the union of tasks <= i.
    Eigen::MatrixXd R;
    std::vector<UpdateReport> reports;
};

DisjointResult train_disjoint(CaptionModel& model, std::span<const TaskData> tasks, ReplayMemory& mem,
                              const ImageLookup& lookup, const UpdateConfig& config, int eval_max_len = 16);

// max over i < T of R[i][j] - R[T][j], T the last row; NaN entries are skipped
// and 0 is returned when no earlier entry exists.
double forgetting(const Eigen::MatrixXd& R, int j);

// One instance per caption whose image is present.
std::vector<Instance> instances_for(std::span<const ImageRecord> images, std::span<const CaptionRecord> captions);

}  // namespace capfeed
