#pragma once

#include "capfeed/dataset.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace capfeed {

inline constexpr int kEventSchemaVersion = 1;

// Event kinds: prediction, caption_correction, bbox_annotation,
// augmentation_set (written by the augmentation worker),
// augmentation_rating and update_trigger.
struct Event {
    std::string event_id;  // "ev-" + 12-digit sequence number, ordered as strings
    std::uint64_t seq = 0;
    std::int64_t timestamp_ms = 0;
    std::string image_id;
    std::string kind;
    nlohmann::json payload = nlohmann::json::object();

    nlohmann::json to_json() const;
    static Event from_json(const nlohmann::json& j);
};

std::string event_id_for(std::uint64_t seq);

// Append-only JSONL file. append() returns after the line is flushed with
// fsync. Calls are serialized by the caller.
class EventLog {
public:
    explicit EventLog(const std::filesystem::path& path);
    ~EventLog();
    EventLog(const EventLog&) = delete;
    EventLog& operator=(const EventLog&) = delete;

    void append(const Event& e);
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

// Throws ParseError naming the 1-based line of the first corrupt line. A
// truncated final line without a newline (torn write) is ignored.
std::vector<Event> read_log(const std::filesystem::path& path);

struct StoredImage {
    std::string image_id;
    std::string path;
    int width = 0;
    int height = 0;
    std::vector<BBox> bboxes;

    nlohmann::json to_json() const;
    static StoredImage from_json(const nlohmann::json& j);
};

struct Variant {
    std::string augmentation_id;
    std::string method_tag;
    std::optional<CaptionRecord> caption;
    std::optional<StoredImage> image;
    std::optional<std::string> rating;  // good | bad
    std::optional<int> rank;            // 1 = best
};

struct AugSet {
    std::string set_id;
    std::string image_id;
    std::string source_id;  // caption id (text) or annotation event id (image)
    std::string kind;       // text | image
    std::vector<Variant> variants;
};

struct Correction {
    std::string event_id;
    std::string image_id;
    std::string text;
};

struct Annotation {
    std::string event_id;
    std::string image_id;
    BBox box;
};

// Service state as a pure fold over events.
class ServiceState {
public:
    void apply(const Event& e);

    nlohmann::json canonical_json() const;  // timestamps excluded
    std::string hash() const;

    std::uint64_t last_seq() const { return last_seq_; }
    std::size_t event_count() const { return events_; }
    std::size_t prediction_count() const { return predictions_; }
    const std::map<std::string, StoredImage>& uploads() const { return uploads_; }
    const std::vector<Correction>& corrections() const { return corrections_; }
    const std::vector<Annotation>& annotations() const { return annotations_; }
    const std::map<std::string, AugSet>& sets() const { return sets_; }
    const AugSet* find_set(const std::string& set_id) const;
    std::vector<const AugSet*> sets_for_image(const std::string& image_id) const;
    bool consumed(const std::string& id) const { return consumed_.count(id) > 0; }
    const std::vector<nlohmann::json>& updates() const { return updates_; }

    // Approved means rated good, or ranked within rank_cutoff.
    static bool approved(const Variant& v, int rank_cutoff);
    // Unconsumed corrections and approved, unconsumed variants, by id.
    std::vector<std::string> pending_ids(int rank_cutoff) const;
    // Correction or annotation event ids whose augmentation set is missing.
    std::vector<std::string> unaugmented_sources() const;
    const Correction* latest_correction(const std::string& image_id) const;

private:
    std::uint64_t last_seq_ = 0;
    std::size_t events_ = 0;
    std::size_t predictions_ = 0;
    std::map<std::string, StoredImage> uploads_;
    std::vector<Correction> corrections_;
    std::vector<Annotation> annotations_;
    std::map<std::string, AugSet> sets_;
    std::set<std::string> augmented_sources_;
    std::set<std::string> consumed_;
    std::vector<nlohmann::json> updates_;
};

ServiceState replay_log(const std::filesystem::path& path);

}  // namespace capfeed
