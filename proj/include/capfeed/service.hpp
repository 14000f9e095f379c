#pragma once

#include "capfeed/captioner.hpp"
#include "capfeed/continual.hpp"
#include "capfeed/event_log.hpp"
#include "capfeed/image_augment.hpp"
#include "capfeed/joint_augment.hpp"
#include "capfeed/text_augment.hpp"

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

namespace httplib {
class Server;
}

namespace capfeed {

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::optional<std::filesystem::path> checkpoint;  // initial model
    std::filesystem::path state_dir = "capfeed-state";
    std::optional<std::filesystem::path> log_path;    // default <state_dir>/events.jsonl
    std::optional<std::filesystem::path> data_dir;    // dataset directory of known images

    TextAugmentConfig text;
    std::optional<std::filesystem::path> lexicon;
    std::optional<std::filesystem::path> stub_table;  // stub text backend table
    std::optional<std::string> backend_url;          // HTTP text backend, wins over the stub
    int image_variants = 3;
    ImageAugmentConfig image;
    bool cutmix = true;
    CutMixConfig cutmix_config;

    UpdateConfig update;
    std::size_t memory_capacity = 1000;
    int rank_cutoff = 5;  // ranked variants with rank <= cutoff are approved
    int max_len = 16;

    std::filesystem::path event_log_path() const { return log_path ? *log_path : state_dir / "events.jsonl"; }

    nlohmann::json to_json() const;
    static ServiceConfig from_json(const nlohmann::json& j);
};

using EnvLookup = std::function<const char*(const char*)>;

// CAPFEED_HOST, CAPFEED_PORT, CAPFEED_CHECKPOINT, CAPFEED_STATE_DIR,
// CAPFEED_LOG_PATH, CAPFEED_DATA_DIR, CAPFEED_LEXICON, CAPFEED_STUB_TABLE,
// CAPFEED_BACKEND_URL, CAPFEED_N_SYNONYM, CAPFEED_N_PARAPHRASE,
// CAPFEED_IMAGE_VARIANTS, CAPFEED_REPLAY_EVERY, CAPFEED_MEMORY_CAPACITY,
// CAPFEED_RANK_CUTOFF, CAPFEED_BATCH_SIZE, CAPFEED_LR, CAPFEED_EPOCHS, CAPFEED_SEED.
void apply_env_overrides(ServiceConfig& config, const EnvLookup& env);
ServiceConfig load_service_config(const std::optional<std::filesystem::path>& file, const EnvLookup& env);

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

// Event-sourced feedback service. Every state change is an event appended
// to the log (fsync'd before the call returns) and folded into the live
// state under one lock. Predictions read an immutable model snapshot that
// updates replace atomically.
class FeedbackService {
public:
    explicit FeedbackService(ServiceConfig config);
    ~FeedbackService();
    FeedbackService(const FeedbackService&) = delete;
    FeedbackService& operator=(const FeedbackService&) = delete;

    ApiResponse predict(const std::string& image_id);
    ApiResponse predict_upload(std::span<const std::uint8_t> bytes);
    ApiResponse feedback(const nlohmann::json& body);
    ApiResponse augmentations(const std::string& image_id, int wait_ms);
    ApiResponse rate(const std::string& set_id, const nlohmann::json& body);
    ApiResponse update(const nlohmann::json& body);
    ApiResponse metrics() const;
    ApiResponse state() const;

    std::string state_hash() const;
    ServiceState state_copy() const;
    std::shared_ptr<const CaptionModel> snapshot() const;
    const ServiceConfig& config() const { return config_; }
    // Blocks until the augmentation queue is empty.
    void wait_idle();

private:
    Event append_event(const std::string& image_id, const std::string& kind, nlohmann::json payload);
    void register_images(const Event& e);
    const ImageRecord* find_image(const std::string& image_id) const;
    void enqueue(const std::string& source_event_id, const std::string& image_id);
    void worker_loop();
    void augment_source(const std::string& source_event_id);
    ApiResponse predict_record(const ImageRecord& image, nlohmann::json extra);

    ServiceConfig config_;
    SynonymLexicon lexicon_;
    std::unique_ptr<TextBackend> backend_;

    mutable std::mutex state_mu_;
    ServiceState state_;
    std::unique_ptr<EventLog> log_;

    mutable std::shared_mutex images_mu_;
    std::map<std::string, ImageRecord> images_;
    std::vector<std::string> dataset_order_;

    mutable std::mutex model_mu_;
    std::shared_ptr<const CaptionModel> model_;

    std::mutex update_mu_;
    std::unique_ptr<ReplayMemory> memory_;

    std::mutex queue_mu_;
    std::condition_variable queue_cv_;
    std::deque<std::pair<std::string, std::string>> queue_;  // (source event id, image id)
    std::map<std::string, int> pending_per_image_;
    bool busy_ = false;
    bool stopping_ = false;
    std::thread worker_;
};

// Registers the HTTP routes of the API on `server`.
void register_routes(httplib::Server& server, FeedbackService& service);

}  // namespace capfeed
