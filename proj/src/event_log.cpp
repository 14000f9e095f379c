#include "capfeed/event_log.hpp"

#include "capfeed/errors.hpp"
#include "capfeed/hash.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <fcntl.h>
#include <unistd.h>

namespace capfeed {

using nlohmann::json;

std::string event_id_for(std::uint64_t seq) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ev-%012llu", static_cast<unsigned long long>(seq));
    return buf;
}

json Event::to_json() const {
    return {{"v", kEventSchemaVersion}, {"event_id", event_id}, {"seq", seq},        {"timestamp", timestamp_ms},
            {"image_id", image_id},     {"kind", kind},         {"payload", payload}};
}

Event Event::from_json(const json& j) {
    const int v = j.at("v").get<int>();
    if (v != kEventSchemaVersion) throw ParseError("unsupported event schema version " + std::to_string(v));
    Event e;
    e.event_id = j.at("event_id").get<std::string>();
    e.seq = j.at("seq").get<std::uint64_t>();
    e.timestamp_ms = j.at("timestamp").get<std::int64_t>();
    e.image_id = j.at("image_id").get<std::string>();
    e.kind = j.at("kind").get<std::string>();
    e.payload = j.at("payload");
    return e;
}

EventLog::EventLog(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open event log " + path.string() + ": " + std::strerror(errno));
}

EventLog::~EventLog() {
    if (fd_ >= 0) ::close(fd_);
}

void EventLog::append(const Event& e) {
    const std::string line = e.to_json().dump() + "\n";
    std::size_t done = 0;
    while (done < line.size()) {
        const auto n = ::write(fd_, line.data() + done, line.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw std::runtime_error("event log write failed: " + std::string(std::strerror(errno)));
        }
        done += static_cast<std::size_t>(n);
    }
    if (::fsync(fd_) != 0) throw std::runtime_error("event log fsync failed: " + std::string(std::strerror(errno)));
}

std::vector<Event> read_log(const std::filesystem::path& path) {
    std::vector<Event> events;
    std::ifstream in(path, std::ios::binary);
    if (!in) return events;
    const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0, line_no = 0;
    while (pos < content.size()) {
        ++line_no;
        const auto nl = content.find('\n', pos);
        if (nl == std::string::npos) break;  // torn final write, never acknowledged
        const std::string line = content.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        try {
            auto e = Event::from_json(json::parse(line));
            if (!events.empty() && e.seq <= events.back().seq)
                throw ParseError("event ids do not increase");
            events.push_back(std::move(e));
        } catch (const std::exception& ex) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": corrupt event: " + ex.what());
        }
    }
    return events;
}

json StoredImage::to_json() const {
    json boxes = json::array();
    for (const auto& b : bboxes) boxes.push_back(capfeed::to_json(b));
    return {{"image_id", image_id}, {"path", path}, {"width", width}, {"height", height}, {"bboxes", boxes}};
}

StoredImage StoredImage::from_json(const json& j) {
    StoredImage s;
    s.image_id = j.at("image_id").get<std::string>();
    s.path = j.at("path").get<std::string>();
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    for (const auto& b : j.value("bboxes", json::array())) s.bboxes.push_back(bbox_from_json(b));
    return s;
}

void ServiceState::apply(const Event& e) {
    ++events_;
    last_seq_ = e.seq;
    const auto& p = e.payload;
    if (e.kind == "prediction") {
        ++predictions_;
        if (p.contains("upload")) uploads_[e.image_id] = StoredImage::from_json(p["upload"]);
    } else if (e.kind == "caption_correction") {
        corrections_.push_back({e.event_id, e.image_id, p.at("text").get<std::string>()});
    } else if (e.kind == "bbox_annotation") {
        annotations_.push_back({e.event_id, e.image_id, bbox_from_json(p.at("bbox"))});
    } else if (e.kind == "augmentation_set") {
        AugSet s;
        s.set_id = p.at("set_id").get<std::string>();
        s.image_id = e.image_id;
        s.source_id = p.at("source_id").get<std::string>();
        s.kind = p.at("kind").get<std::string>();
        for (const auto& v : p.at("variants")) {
            Variant var;
            var.augmentation_id = v.at("augmentation_id").get<std::string>();
            var.method_tag = v.at("method_tag").get<std::string>();
            if (v.contains("caption") && !v["caption"].is_null()) var.caption = caption_from_json(v["caption"]);
            if (v.contains("image") && !v["image"].is_null()) var.image = StoredImage::from_json(v["image"]);
            s.variants.push_back(std::move(var));
        }
        augmented_sources_.insert(p.at("trigger_event_id").get<std::string>());
        sets_[s.set_id] = std::move(s);
    } else if (e.kind == "augmentation_rating") {
        auto& s = sets_.at(p.at("set_id").get<std::string>());
        if (p.contains("ratings")) {
            for (auto& v : s.variants) {
                v.rank.reset();
                if (const auto it = p["ratings"].find(v.augmentation_id); it != p["ratings"].end())
                    v.rating = it->get<std::string>();
            }
        } else if (p.contains("ranks")) {
            for (auto& v : s.variants) {
                v.rating.reset();
                v.rank.reset();
                if (const auto it = p["ranks"].find(v.augmentation_id); it != p["ranks"].end()) v.rank = it->get<int>();
            }
        }
    } else if (e.kind == "update_trigger") {
        for (const auto& id : p.at("consumed")) consumed_.insert(id.get<std::string>());
        updates_.push_back(p);
    } else {
        throw ParseError("unknown event kind '" + e.kind + "' in " + e.event_id);
    }
}

json ServiceState::canonical_json() const {
    json j;
    j["last_seq"] = last_seq_;
    j["events"] = events_;
    j["predictions"] = predictions_;
    j["uploads"] = json::array();
    for (const auto& [id, s] : uploads_) j["uploads"].push_back(s.to_json());
    j["corrections"] = json::array();
    for (const auto& c : corrections_) j["corrections"].push_back({c.event_id, c.image_id, c.text});
    j["annotations"] = json::array();
    for (const auto& a : annotations_) j["annotations"].push_back({a.event_id, a.image_id, to_json(a.box)});
    j["sets"] = json::array();
    for (const auto& [id, s] : sets_) {
        json vars = json::array();
        for (const auto& v : s.variants)
            vars.push_back({{"id", v.augmentation_id},
                            {"method", v.method_tag},
                            {"caption", v.caption ? to_json(*v.caption) : json()},
                            {"image", v.image ? v.image->to_json() : json()},
                            {"rating", v.rating ? json(*v.rating) : json()},
                            {"rank", v.rank ? json(*v.rank) : json()}});
        j["sets"].push_back({{"set_id", id}, {"image_id", s.image_id}, {"source_id", s.source_id}, {"kind", s.kind}, {"variants", vars}});
    }
    j["augmented_sources"] = augmented_sources_;
    j["consumed"] = consumed_;
    j["updates"] = updates_;
    return j;
}

std::string ServiceState::hash() const { return sha256_hex(canonical_json().dump()); }

const AugSet* ServiceState::find_set(const std::string& set_id) const {
    const auto it = sets_.find(set_id);
    return it == sets_.end() ? nullptr : &it->second;
}

std::vector<const AugSet*> ServiceState::sets_for_image(const std::string& image_id) const {
    std::vector<const AugSet*> out;
    for (const auto& [id, s] : sets_)
        if (s.image_id == image_id) out.push_back(&s);
    return out;
}

bool ServiceState::approved(const Variant& v, int rank_cutoff) {
    if (v.rank) return *v.rank <= rank_cutoff;
    return v.rating && *v.rating == "good";
}

std::vector<std::string> ServiceState::pending_ids(int rank_cutoff) const {
    std::vector<std::string> out;
    for (const auto& c : corrections_)
        if (!consumed(c.event_id)) out.push_back(c.event_id);
    for (const auto& [id, s] : sets_)
        for (const auto& v : s.variants)
            if (approved(v, rank_cutoff) && !consumed(v.augmentation_id)) out.push_back(v.augmentation_id);
    return out;
}

std::vector<std::string> ServiceState::unaugmented_sources() const {
    std::vector<std::string> out;
    for (const auto& c : corrections_)
        if (!augmented_sources_.count(c.event_id)) out.push_back(c.event_id);
    for (const auto& a : annotations_)
        if (!augmented_sources_.count(a.event_id)) out.push_back(a.event_id);
    std::sort(out.begin(), out.end());
    return out;
}

const Correction* ServiceState::latest_correction(const std::string& image_id) const {
    for (auto it = corrections_.rbegin(); it != corrections_.rend(); ++it)
        if (it->image_id == image_id) return &*it;
    return nullptr;
}

ServiceState replay_log(const std::filesystem::path& path) {
    ServiceState state;
    for (const auto& e : read_log(path)) state.apply(e);
    return state;
}

}  // namespace capfeed
