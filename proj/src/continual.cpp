#include "capfeed/continual.hpp"

#include "capfeed/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace capfeed {

using nlohmann::json;

json to_json(const Experience& e) {
    return {{"image_id", e.image_id}, {"caption", to_json(e.caption)}, {"write_step", e.write_step}};
}

Experience experience_from_json(const json& j) {
    return {j.at("image_id").get<std::string>(), caption_from_json(j.at("caption")), j.at("write_step").get<std::int64_t>()};
}

ReplayMemory::ReplayMemory(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), seed_(seed), rng_(seed) {
    if (capacity == 0) throw std::invalid_argument("ReplayMemory: capacity must be >= 1");
}

void ReplayMemory::write(Experience e) {
    if (e.caption.provenance == Provenance::predicted)
        throw std::invalid_argument("ReplayMemory: predicted captions are not training experiences");
    ++seen_;
    e.write_step = static_cast<std::int64_t>(seen_);
    if (entries_.size() < capacity_) {
        entries_.push_back(std::move(e));
        return;
    }
    std::uniform_int_distribution<std::uint64_t> slot(0, seen_ - 1);
    const auto j = slot(rng_);
    if (j < capacity_) entries_[static_cast<std::size_t>(j)] = std::move(e);
}

std::vector<Experience> ReplayMemory::sample(std::size_t batch_size, std::uint64_t seed) const {
    std::vector<Experience> out;
    if (entries_.empty() || batch_size == 0) return out;
    std::mt19937_64 rng(seed);
    if (batch_size > entries_.size()) {
        std::uniform_int_distribution<std::size_t> pick(0, entries_.size() - 1);
        for (std::size_t i = 0; i < batch_size; ++i) out.push_back(entries_[pick(rng)]);
        return out;
    }
    std::vector<std::size_t> idx(entries_.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < batch_size; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
        out.push_back(entries_[idx[i]]);
    }
    return out;
}

void ReplayMemory::save(const std::filesystem::path& path) const {
    std::ostringstream rng_state;
    rng_state << rng_;
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << json{{"v", 1}, {"capacity", capacity_}, {"seen_count", seen_}, {"seed", seed_}, {"rng", rng_state.str()}}.dump()
            << "\n";
        for (const auto& e : entries_) out << to_json(e).dump() << "\n";
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

ReplayMemory ReplayMemory::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    auto parse = [&](const std::string& text) {
        try {
            return json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    };
    if (!std::getline(in, line)) throw ParseError(path.string() + ": missing header");
    ++line_no;
    const json header = parse(line);
    try {
        ReplayMemory mem(header.at("capacity").get<std::size_t>(), header.at("seed").get<std::uint64_t>());
        mem.seen_ = header.at("seen_count").get<std::uint64_t>();
        std::istringstream(header.at("rng").get<std::string>()) >> mem.rng_;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            mem.entries_.push_back(experience_from_json(parse(line)));
        }
        if (mem.entries_.size() > mem.capacity_) throw ParseError(path.string() + ": more entries than capacity");
        return mem;
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
}

void memory_write(ReplayMemory& mem, Experience e) { mem.write(std::move(e)); }

std::vector<Experience> memory_sample(const ReplayMemory& mem, std::size_t batch_size, std::uint64_t seed) {
    return mem.sample(batch_size, seed);
}

json UpdateConfig::to_json() const {
    json j = {{"batch_size", batch_size},       {"lr", lr},         {"epochs", epochs},
              {"replay_every", replay_every},   {"replay_batch_size", replay_batch_size},
              {"write_augmented", write_augmented}, {"shuffle", shuffle}, {"seed", seed}};
    return j;
}

UpdateConfig UpdateConfig::from_json(const json& j) {
    UpdateConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.replay_every = j.value("replay_every", c.replay_every);
    c.replay_batch_size = j.value("replay_batch_size", c.replay_batch_size);
    c.write_augmented = j.value("write_augmented", c.write_augmented);
    c.shuffle = j.value("shuffle", c.shuffle);
    c.seed = j.value("seed", c.seed);
    return c;
}

json UpdateReport::to_json() const {
    return {{"task_id", task_id},
            {"new_batches", new_batches},
            {"replay_batches", replay_batches},
            {"final_loss", final_loss},
            {"checkpoint_hash", checkpoint_hash}};
}

UpdateReport update(CaptionModel& model, std::span<const Instance> new_instances, ReplayMemory& mem,
                    const ImageLookup& lookup, const UpdateConfig& config, int task_id) {
    if (config.batch_size == 0) throw std::invalid_argument("update: batch_size must be >= 1");
    if (config.replay_every < 0) throw std::invalid_argument("update: replay_every must be >= 0");
    UpdateReport report;
    report.task_id = task_id;
    if (new_instances.empty()) {
        report.checkpoint_hash = model.content_hash();
        return report;
    }
    for (const auto& inst : new_instances)
        if (inst.caption.provenance == Provenance::predicted)
            throw std::invalid_argument("update: instance " + inst.caption.caption_id + " has predicted provenance");

    std::mt19937_64 rng(config.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(task_id + 1)));
    std::vector<std::size_t> order(new_instances.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<Instance> batch;
    for (int epoch = 0; epoch < std::max(1, config.epochs); ++epoch) {
        if (config.shuffle) std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            batch.clear();
            for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i)
                batch.push_back(new_instances[order[i]]);
            report.final_loss = model.train_step(batch, config.lr);
            ++report.new_batches;
            for (const auto& inst : batch) {
                if (!config.write_augmented && inst.caption.provenance == Provenance::augmented) continue;
                mem.write({inst.image.image_id, inst.caption, 0});
            }
            if (config.replay_every > 0 && report.new_batches % static_cast<std::size_t>(config.replay_every) == 0) {
                std::vector<Instance> replay;
                for (auto& e : mem.sample(config.replay_batch_size, rng())) {
                    const ImageRecord* img = lookup ? lookup(e.image_id) : nullptr;
                    if (!img) throw std::runtime_error("update: replayed image " + e.image_id + " cannot be resolved");
                    replay.push_back({*img, std::move(e.caption), nullptr});
                }
                if (!replay.empty()) {
                    model.train_step(replay, config.lr);
                    ++report.replay_batches;
                }
            }
        }
    }
    if (config.checkpoint_out) model.save(*config.checkpoint_out);
    report.checkpoint_hash = model.content_hash();
    return report;
}

DisjointResult train_disjoint(CaptionModel& model, std::span<const TaskData> tasks, ReplayMemory& mem,
                              const ImageLookup& lookup, const UpdateConfig& config, int eval_max_len) {
    if (tasks.empty()) throw std::invalid_argument("train_disjoint: no tasks");
    const auto T = static_cast<Eigen::Index>(tasks.size());
    DisjointResult result;
    result.R = Eigen::MatrixXd::Constant(T, T + 1, std::numeric_limits<double>::quiet_NaN());
    std::vector<EvalItem> seen_eval;
    for (Eigen::Index i = 0; i < T; ++i) {
        const auto& task = tasks[static_cast<std::size_t>(i)];
        result.reports.push_back(update(model, task.train, mem, lookup, config, task.split_id));
        seen_eval.insert(seen_eval.end(), task.eval.begin(), task.eval.end());
        for (Eigen::Index j = 0; j <= i; ++j) {
            const auto& eval = tasks[static_cast<std::size_t>(j)].eval;
            result.R(i, j) = eval.empty() ? 0.0 : evaluate(model, eval, eval_max_len).bleu4;
        }
        result.R(i, T) = seen_eval.empty() ? 0.0 : evaluate(model, seen_eval, eval_max_len).bleu4;
    }
    return result;
}

double forgetting(const Eigen::MatrixXd& R, int j) {
    if (R.rows() < 1 || j < 0 || j >= R.cols()) throw std::invalid_argument("forgetting: column out of range");
    const Eigen::Index last = R.rows() - 1;
    const double final_value = R(last, j);
    if (std::isnan(final_value)) throw std::invalid_argument("forgetting: final row has no value for this column");
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < last; ++i)
        if (!std::isnan(R(i, j))) best = std::max(best, R(i, j) - final_value);
    return std::isinf(best) ? 0.0 : best;
}

std::vector<Instance> instances_for(std::span<const ImageRecord> images, std::span<const CaptionRecord> captions) {
    std::unordered_map<std::string, const ImageRecord*> by_id;
    for (const auto& img : images) by_id[img.image_id] = &img;
    std::vector<Instance> out;
    for (const auto& c : captions)
        if (const auto it = by_id.find(c.image_id); it != by_id.end()) out.push_back({*it->second, c, nullptr});
    return out;
}

}  // namespace capfeed
