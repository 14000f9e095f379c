#include "capfeed/service.hpp"

#include "capfeed/errors.hpp"
#include "capfeed/hash.hpp"
#include "capfeed/image_io.hpp"
#include "capfeed/metrics.hpp"

#include "httplib.h"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

namespace capfeed {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::int64_t now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

std::uint64_t seq_of(const std::string& event_id) {
    const auto pos = event_id.find_last_of('-');
    return pos == std::string::npos ? 0 : std::stoull(event_id.substr(pos + 1));
}

ApiResponse error(int status, const std::string& message) { return {status, {{"error", message}}}; }

json opt_path(const std::optional<fs::path>& p) { return p ? json(p->string()) : json(); }

std::optional<fs::path> path_or_null(const json& j, const char* key, std::optional<fs::path> fallback) {
    if (!j.contains(key)) return fallback;
    if (j[key].is_null()) return std::nullopt;
    return fs::path(j[key].get<std::string>());
}

json variant_json(const Variant& v) {
    json j = {{"augmentation_id", v.augmentation_id}, {"method_tag", v.method_tag}};
    j["caption"] = v.caption ? json(v.caption->text) : json();
    if (v.image) {
        json boxes = json::array();
        for (const auto& b : v.image->bboxes) boxes.push_back(to_json(b));
        j["image"] = {{"image_id", v.image->image_id},
                      {"width", v.image->width},
                      {"height", v.image->height},
                      {"bboxes", boxes}};
    } else {
        j["image"] = nullptr;
    }
    j["rating"] = v.rating ? json(*v.rating) : json();
    j["rank"] = v.rank ? json(*v.rank) : json();
    return j;
}

json set_json(const AugSet& s) {
    json vars = json::array();
    for (const auto& v : s.variants) vars.push_back(variant_json(v));
    return {{"set_id", s.set_id}, {"image_id", s.image_id}, {"source_id", s.source_id}, {"kind", s.kind},
            {"variants", vars}};
}

// Paths recorded in events are relative to the state directory.
fs::path resolve(const fs::path& state_dir, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : state_dir / path;
}

ImageRecord lazy_record(const fs::path& state_dir, const StoredImage& s) {
    ImageRecord r;
    r.image_id = s.image_id;
    r.width = s.width;
    r.height = s.height;
    r.bboxes = s.bboxes;
    r.path = resolve(state_dir, s.path);
    return r;
}

StoredImage store_image(const ImageRecord& image, const fs::path& state_dir, const fs::path& rel) {
    const auto px = image.pixels();
    write_ppm(state_dir / rel, image.width, image.height, *px);
    return {image.image_id, rel.string(), image.width, image.height, image.bboxes};
}

double finite_number(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number()) throw std::invalid_argument(std::string("bbox.") + key + " must be a number");
    const double v = j[key].get<double>();
    if (!std::isfinite(v)) throw std::invalid_argument(std::string("bbox.") + key + " must be finite");
    return v;
}

}  // namespace

json ServiceConfig::to_json() const {
    return {{"host", host},
            {"port", port},
            {"checkpoint", opt_path(checkpoint)},
            {"state_dir", state_dir.string()},
            {"log_path", opt_path(log_path)},
            {"data_dir", opt_path(data_dir)},
            {"text", text.to_json()},
            {"lexicon", opt_path(lexicon)},
            {"stub_table", opt_path(stub_table)},
            {"backend_url", backend_url ? json(*backend_url) : json()},
            {"image_variants", image_variants},
            {"cutmix", cutmix},
            {"update", update.to_json()},
            {"memory_capacity", memory_capacity},
            {"rank_cutoff", rank_cutoff},
            {"max_len", max_len}};
}

ServiceConfig ServiceConfig::from_json(const json& j) {
    ServiceConfig c;
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.checkpoint = path_or_null(j, "checkpoint", c.checkpoint);
    c.state_dir = j.value("state_dir", c.state_dir.string());
    c.log_path = path_or_null(j, "log_path", c.log_path);
    c.data_dir = path_or_null(j, "data_dir", c.data_dir);
    if (j.contains("text")) c.text = TextAugmentConfig::from_json(j["text"]);
    c.lexicon = path_or_null(j, "lexicon", c.lexicon);
    c.stub_table = path_or_null(j, "stub_table", c.stub_table);
    if (j.contains("backend_url") && !j["backend_url"].is_null()) c.backend_url = j["backend_url"].get<std::string>();
    c.image_variants = j.value("image_variants", c.image_variants);
    c.cutmix = j.value("cutmix", c.cutmix);
    if (j.contains("update")) c.update = UpdateConfig::from_json(j["update"]);
    c.memory_capacity = j.value("memory_capacity", c.memory_capacity);
    c.rank_cutoff = j.value("rank_cutoff", c.rank_cutoff);
    c.max_len = j.value("max_len", c.max_len);
    return c;
}

void apply_env_overrides(ServiceConfig& c, const EnvLookup& env) {
    auto str = [&](const char* name) -> std::optional<std::string> {
        const char* v = env(name);
        if (!v || !*v) return std::nullopt;
        return std::string(v);
    };
    auto num = [&](const char* name, auto& target) {
        if (auto v = str(name)) {
            try {
                if constexpr (std::is_floating_point_v<std::remove_reference_t<decltype(target)>>)
                    target = std::stod(*v);
                else
                    target = static_cast<std::remove_reference_t<decltype(target)>>(std::stoll(*v));
            } catch (const std::exception&) {
                throw std::invalid_argument(std::string(name) + ": not a number: " + *v);
            }
        }
    };
    if (auto v = str("CAPFEED_HOST")) c.host = *v;
    num("CAPFEED_PORT", c.port);
    if (auto v = str("CAPFEED_CHECKPOINT")) c.checkpoint = *v;
    if (auto v = str("CAPFEED_STATE_DIR")) c.state_dir = *v;
    if (auto v = str("CAPFEED_LOG_PATH")) c.log_path = *v;
    if (auto v = str("CAPFEED_DATA_DIR")) c.data_dir = *v;
    if (auto v = str("CAPFEED_LEXICON")) c.lexicon = *v;
    if (auto v = str("CAPFEED_STUB_TABLE")) c.stub_table = *v;
    if (auto v = str("CAPFEED_BACKEND_URL")) c.backend_url = *v;
    num("CAPFEED_N_SYNONYM", c.text.n_synonym);
    num("CAPFEED_N_PARAPHRASE", c.text.n_paraphrase);
    num("CAPFEED_IMAGE_VARIANTS", c.image_variants);
    num("CAPFEED_REPLAY_EVERY", c.update.replay_every);
    num("CAPFEED_MEMORY_CAPACITY", c.memory_capacity);
    num("CAPFEED_RANK_CUTOFF", c.rank_cutoff);
    num("CAPFEED_BATCH_SIZE", c.update.batch_size);
    num("CAPFEED_LR", c.update.lr);
    num("CAPFEED_EPOCHS", c.update.epochs);
    num("CAPFEED_SEED", c.update.seed);
}

ServiceConfig load_service_config(const std::optional<fs::path>& file, const EnvLookup& env) {
    ServiceConfig c;
    if (file) {
        std::ifstream in(*file);
        if (!in) throw ParseError("cannot open config " + file->string());
        try {
            c = ServiceConfig::from_json(json::parse(in));
        } catch (const json::exception& e) {
            throw ParseError(file->string() + ": " + e.what());
        }
    }
    apply_env_overrides(c, env);
    return c;
}

FeedbackService::FeedbackService(ServiceConfig config) : config_(std::move(config)) {
    if (config_.rank_cutoff < 1) throw std::invalid_argument("rank_cutoff must be >= 1");
    if (config_.image_variants < 0) throw std::invalid_argument("image_variants must be >= 0");
    fs::create_directories(config_.state_dir / "uploads");
    fs::create_directories(config_.state_dir / "augment");
    fs::create_directories(config_.state_dir / "checkpoints");
    fs::create_directories(config_.state_dir / "memory");

    if (config_.lexicon) lexicon_ = SynonymLexicon::from_file(*config_.lexicon);
    if (config_.backend_url)
        backend_ = std::make_unique<HttpTextBackend>(*config_.backend_url);
    else if (config_.stub_table)
        backend_ = std::make_unique<StubTextBackend>(StubTextBackend::from_file(*config_.stub_table));
    else
        backend_ = std::make_unique<StubTextBackend>();

    if (config_.data_dir) {
        LoadOptions opts;
        opts.pixels = PixelMode::lazy;
        auto data = load_dataset(*config_.data_dir, opts);
        for (auto& img : data.images) {
            dataset_order_.push_back(img.image_id);
            images_.emplace(img.image_id, std::move(img));
        }
    }

    state_ = replay_log(config_.event_log_path());
    for (const auto& [id, up] : state_.uploads()) images_.emplace(id, lazy_record(config_.state_dir, up));
    for (const auto& [id, s] : state_.sets())
        for (const auto& v : s.variants)
            if (v.image) images_.emplace(v.image->image_id, lazy_record(config_.state_dir, *v.image));

    std::optional<fs::path> ckpt = config_.checkpoint;
    std::optional<fs::path> mem;
    if (!state_.updates().empty()) {
        const auto& last = state_.updates().back();
        ckpt = resolve(config_.state_dir, last.at("checkpoint").get<std::string>());
        mem = resolve(config_.state_dir, last.at("memory").get<std::string>());
    }
    if (ckpt) {
        auto m = std::make_shared<Captioner>(Captioner::load(*ckpt));
        model_ = std::move(m);
    }
    memory_ = std::make_unique<ReplayMemory>(mem ? ReplayMemory::load(*mem)
                                                 : ReplayMemory(config_.memory_capacity, config_.update.seed));

    log_ = std::make_unique<EventLog>(config_.event_log_path());
    worker_ = std::thread([this] { worker_loop(); });

    std::map<std::string, std::string> image_of;
    for (const auto& c : state_.corrections()) image_of[c.event_id] = c.image_id;
    for (const auto& a : state_.annotations()) image_of[a.event_id] = a.image_id;
    for (const auto& id : state_.unaugmented_sources()) enqueue(id, image_of.at(id));
}

FeedbackService::~FeedbackService() {
    {
        std::lock_guard lk(queue_mu_);
        stopping_ = true;
    }
    queue_cv_.notify_all();
    if (worker_.joinable()) worker_.join();
}

Event FeedbackService::append_event(const std::string& image_id, const std::string& kind, json payload) {
    Event e;
    {
        std::lock_guard lk(state_mu_);
        e.seq = state_.last_seq() + 1;
        e.event_id = event_id_for(e.seq);
        e.timestamp_ms = now_ms();
        e.image_id = image_id;
        e.kind = kind;
        e.payload = std::move(payload);
        log_->append(e);
        state_.apply(e);
    }
    register_images(e);
    return e;
}

void FeedbackService::register_images(const Event& e) {
    std::unique_lock lk(images_mu_);
    if (e.kind == "prediction" && e.payload.contains("upload")) {
        const auto s = StoredImage::from_json(e.payload["upload"]);
        images_.emplace(s.image_id, lazy_record(config_.state_dir, s));
    } else if (e.kind == "augmentation_set") {
        for (const auto& v : e.payload.at("variants"))
            if (v.contains("image") && !v["image"].is_null()) {
                const auto s = StoredImage::from_json(v["image"]);
                images_.emplace(s.image_id, lazy_record(config_.state_dir, s));
            }
    }
}

const ImageRecord* FeedbackService::find_image(const std::string& image_id) const {
    std::shared_lock lk(images_mu_);
    const auto it = images_.find(image_id);
    return it == images_.end() ? nullptr : &it->second;
}

std::shared_ptr<const CaptionModel> FeedbackService::snapshot() const {
    std::lock_guard lk(model_mu_);
    return model_;
}

std::string FeedbackService::state_hash() const {
    std::lock_guard lk(state_mu_);
    return state_.hash();
}

ServiceState FeedbackService::state_copy() const {
    std::lock_guard lk(state_mu_);
    return state_;
}

ApiResponse FeedbackService::predict_record(const ImageRecord& image, json extra) {
    const auto model = snapshot();
    if (!model) return error(503, "no model loaded");
    GenerateOptions opts;
    opts.max_len = config_.max_len;
    Generation g;
    try {
        g = model->generate(image, opts);
    } catch (const ParseError& e) {
        return error(400, e.what());
    } catch (const ShapeError& e) {
        return error(400, e.what());
    }
    json attention = json::array();
    const auto& w = g.attention.weights;
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(w.cols()))));
    for (Eigen::Index t = 0; t < w.rows() && t < static_cast<Eigen::Index>(g.caption.tokens.size()); ++t) {
        Eigen::Index best = 0;
        const double peak = w.row(t).maxCoeff(&best);
        attention.push_back({{"token", g.caption.tokens[static_cast<std::size_t>(t)]},
                             {"position", best},
                             {"row", side > 0 ? best / side : 0},
                             {"col", side > 0 ? best % side : 0},
                             {"weight", peak}});
    }
    json payload = {{"caption", g.caption.text}, {"tokens", g.caption.tokens}, {"model_hash", model->content_hash()}};
    for (auto& [k, v] : extra.items()) payload[k] = v;
    const auto e = append_event(image.image_id, "prediction", payload);
    return {200,
            {{"event_id", e.event_id},
             {"image_id", image.image_id},
             {"caption", g.caption.text},
             {"tokens", g.caption.tokens},
             {"attention", {{"grid_side", side}, {"per_token", attention}}}}};
}

ApiResponse FeedbackService::predict(const std::string& image_id) {
    const ImageRecord* image = find_image(image_id);
    if (!image) return error(404, "unknown image " + image_id);
    return predict_record(*image, json::object());
}

ApiResponse FeedbackService::predict_upload(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) return error(400, "empty image upload");
    DecodedImage decoded;
    try {
        decoded = decode_image(bytes);
    } catch (const std::exception& e) {
        return error(400, std::string("malformed image: ") + e.what());
    }
    if (decoded.width < 1 || decoded.height < 1) return error(400, "malformed image: no pixels");
    const std::string hex = sha256_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    const std::string id = "upload-" + hex.substr(0, 16);
    const fs::path rel = fs::path("uploads") / (id + ".ppm");
    auto record = make_image(id, decoded.width, decoded.height, std::move(decoded.rgb));
    if (!fs::exists(config_.state_dir / rel)) write_ppm(config_.state_dir / rel, record.width, record.height, *record.data);
    StoredImage stored{id, rel.string(), record.width, record.height, {}};
    return predict_record(record, {{"upload", stored.to_json()}});
}

ApiResponse FeedbackService::feedback(const json& body) {
    if (!body.is_object() || !body.contains("image_id") || !body["image_id"].is_string() || !body.contains("kind") ||
        !body["kind"].is_string())
        return error(400, "expected {image_id, kind, payload}");
    const std::string image_id = body["image_id"].get<std::string>();
    const std::string kind = body["kind"].get<std::string>();
    const json payload = body.value("payload", json::object());
    const ImageRecord* image = find_image(image_id);
    if (!image) return error(404, "unknown image " + image_id);
    if (!payload.is_object()) return error(422, "payload must be an object");

    if (kind == "caption_correction") {
        if (!payload.contains("text") || !payload["text"].is_string()) return error(422, "payload.text is required");
        const auto tokens = tokenize(payload["text"].get<std::string>());
        if (tokens.empty()) return error(422, "correction text has no tokens");
        json p = {{"text", payload["text"]}};
        if (payload.contains("prediction_event_id")) p["prediction_event_id"] = payload["prediction_event_id"];
        const auto e = append_event(image_id, kind, p);
        enqueue(e.event_id, image_id);
        return {200, {{"event_id", e.event_id}}};
    }
    if (kind == "bbox_annotation") {
        BBox norm;
        try {
            norm.x = finite_number(payload, "x");
            norm.y = finite_number(payload, "y");
            norm.w = finite_number(payload, "w");
            norm.h = finite_number(payload, "h");
        } catch (const std::invalid_argument& e) {
            return error(422, e.what());
        }
        norm.label = payload.value("label", std::string());
        constexpr double eps = 1e-9;
        if (norm.x < 0 || norm.y < 0 || norm.w <= 0 || norm.h <= 0 || norm.x + norm.w > 1 + eps ||
            norm.y + norm.h > 1 + eps)
            return error(422, "bbox must lie within the image in normalized [0, 1] coordinates");
        BBox px{norm.x * image->width, norm.y * image->height, norm.w * image->width, norm.h * image->height,
                norm.label};
        px.w = std::min(px.w, image->width - px.x);
        px.h = std::min(px.h, image->height - px.y);
        const auto e = append_event(image_id, kind, {{"bbox", to_json(px)}, {"normalized", to_json(norm)}});
        if (config_.image_variants > 0) enqueue(e.event_id, image_id);
        return {200, {{"event_id", e.event_id}}};
    }
    return error(422, "unsupported feedback kind '" + kind + "'");
}

void FeedbackService::enqueue(const std::string& source_event_id, const std::string& image_id) {
    {
        std::lock_guard lk(queue_mu_);
        queue_.emplace_back(source_event_id, image_id);
        ++pending_per_image_[image_id];
    }
    queue_cv_.notify_all();
}

void FeedbackService::wait_idle() {
    std::unique_lock lk(queue_mu_);
    queue_cv_.wait(lk, [&] { return (queue_.empty() && !busy_) || stopping_; });
}

void FeedbackService::worker_loop() {
    for (;;) {
        std::pair<std::string, std::string> job;
        {
            std::unique_lock lk(queue_mu_);
            queue_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
            if (stopping_) return;
            job = queue_.front();
            queue_.pop_front();
            busy_ = true;
        }
        try {
            augment_source(job.first);
        } catch (const std::exception& e) {
            append_event(job.second, "augmentation_set",
                         {{"set_id", "set-" + job.first},
                          {"kind", "text"},
                          {"source_id", job.first},
                          {"trigger_event_id", job.first},
                          {"variants", json::array()},
                          {"error", e.what()}});
        }
        {
            std::lock_guard lk(queue_mu_);
            busy_ = false;
            if (--pending_per_image_[job.second] == 0) pending_per_image_.erase(job.second);
        }
        queue_cv_.notify_all();
    }
}

void FeedbackService::augment_source(const std::string& source_id) {
    std::optional<Correction> correction;
    std::optional<Annotation> annotation;
    std::optional<Correction> cutmix_dst;
    {
        std::lock_guard lk(state_mu_);
        for (const auto& c : state_.corrections())
            if (c.event_id == source_id) correction = c;
        for (const auto& a : state_.annotations())
            if (a.event_id == source_id) annotation = a;
        if (annotation)
            for (auto it = state_.corrections().rbegin(); it != state_.corrections().rend(); ++it)
                if (it->image_id != annotation->image_id) {
                    cutmix_dst = *it;
                    break;
                }
    }
    const std::string set_id = "set-" + source_id;
    const std::uint64_t seq = seq_of(source_id);

    if (correction) {
        const auto caption = make_caption(correction->event_id, correction->image_id, correction->text,
                                          Provenance::corrected);
        auto text_cfg = config_.text;
        text_cfg.seed = config_.text.seed + seq;
        const auto set = augment_caption(caption, text_cfg, lexicon_, *backend_);
        json vars = json::array();
        for (const auto& v : set.variants)
            vars.push_back({{"augmentation_id", v.caption_id}, {"method_tag", v.method_tag.value_or("")}, {"caption", to_json(v)}});
        append_event(correction->image_id, "augmentation_set",
                     {{"set_id", set_id}, {"kind", "text"}, {"source_id", source_id}, {"trigger_event_id", source_id},
                      {"variants", vars}});
        return;
    }
    if (!annotation) throw std::runtime_error("augmentation source " + source_id + " not found");

    const ImageRecord* base = find_image(annotation->image_id);
    if (!base) throw std::runtime_error("image " + annotation->image_id + " not found");
    ImageRecord image = *base;
    image.data = base->pixels();
    image.bboxes = {annotation->box};

    json vars = json::array();
    const auto outputs = augment_image_traced(image, config_.image_variants, config_.text.seed + seq, config_.image);
    for (std::size_t j = 0; j < outputs.size(); ++j) {
        ImageRecord out = outputs[j].image;
        out.image_id = set_id + "#img" + std::to_string(j);
        const auto stored = store_image(out, config_.state_dir, fs::path("augment") / (out.image_id + ".ppm"));
        vars.push_back({{"augmentation_id", out.image_id}, {"method_tag", outputs[j].transform.name()}, {"image", stored.to_json()}});
    }
    const ImageRecord* dst = cutmix_dst ? find_image(cutmix_dst->image_id) : nullptr;
    if (config_.cutmix && !annotation->box.label.empty() && dst) {
        ImageRecord dst_img = *dst;
        dst_img.data = dst->pixels();
        const auto dst_caption =
            make_caption(cutmix_dst->event_id, dst_img.image_id, cutmix_dst->text, Provenance::corrected);
        try {
            auto [img, cap] = cutmix_joint(image, annotation->box, dst_img, dst_caption, seq, config_.cutmix_config);
            img.image_id = set_id + "#cutmix";
            cap = make_caption(img.image_id, img.image_id, cap.text, Provenance::augmented, "cutmix", cutmix_dst->event_id);
            const auto stored = store_image(img, config_.state_dir, fs::path("augment") / (img.image_id + ".ppm"));
            vars.push_back({{"augmentation_id", img.image_id}, {"method_tag", "cutmix"}, {"caption", to_json(cap)},
                            {"image", stored.to_json()}});
        } catch (const PlacementError&) {
        }
    }
    append_event(annotation->image_id, "augmentation_set",
                 {{"set_id", set_id}, {"kind", "image"}, {"source_id", source_id}, {"trigger_event_id", source_id},
                  {"variants", vars}});
}

ApiResponse FeedbackService::augmentations(const std::string& image_id, int wait_ms) {
    if (!find_image(image_id)) return error(404, "unknown image " + image_id);
    bool pending;
    {
        std::unique_lock lk(queue_mu_);
        auto done = [&] { return stopping_ || !pending_per_image_.count(image_id); };
        if (wait_ms > 0)
            queue_cv_.wait_for(lk, std::chrono::milliseconds(wait_ms), done);
        pending = !done();
    }
    json sets = json::array();
    {
        std::lock_guard lk(state_mu_);
        for (const auto* s : state_.sets_for_image(image_id)) sets.push_back(set_json(*s));
    }
    return {200, {{"image_id", image_id}, {"pending", pending}, {"sets", sets}}};
}

ApiResponse FeedbackService::rate(const std::string& set_id, const json& body) {
    AugSet set;
    {
        std::lock_guard lk(state_mu_);
        const auto* s = state_.find_set(set_id);
        if (!s) return error(404, "unknown augmentation set " + set_id);
        set = *s;
    }
    if (!body.is_object()) return error(422, "expected {ratings} or {ranks}");
    const bool has_ratings = body.contains("ratings"), has_ranks = body.contains("ranks");
    if (has_ratings == has_ranks) return error(422, "exactly one of ratings or ranks is required");
    std::set<std::string> ids;
    for (const auto& v : set.variants) ids.insert(v.augmentation_id);

    json payload = {{"set_id", set_id}};
    std::size_t accepted = 0;
    if (has_ratings) {
        const auto& r = body["ratings"];
        if (!r.is_object() || r.empty()) return error(422, "ratings must be a non-empty object");
        for (const auto& [id, value] : r.items()) {
            if (!ids.count(id)) return error(422, "unknown augmentation " + id);
            if (!value.is_string() || (value != "good" && value != "bad"))
                return error(422, "rating for " + id + " must be good or bad");
        }
        payload["ratings"] = r;
        accepted = r.size();
    } else {
        json ranks = json::object();
        const auto& r = body["ranks"];
        if (r.is_array()) {
            if (r.size() != set.variants.size()) return error(422, "rank list length must equal the variant count");
            for (std::size_t i = 0; i < r.size(); ++i) ranks[set.variants[i].augmentation_id] = r[i];
        } else if (r.is_object()) {
            ranks = r;
        } else {
            return error(422, "ranks must be a list or an object");
        }
        if (ranks.size() != set.variants.size()) return error(422, "ranks must cover every variant");
        std::vector<int> values;
        for (const auto& [id, value] : ranks.items()) {
            if (!ids.count(id)) return error(422, "unknown augmentation " + id);
            if (!value.is_number_integer()) return error(422, "rank for " + id + " must be an integer");
            values.push_back(value.get<int>());
        }
        std::sort(values.begin(), values.end());
        for (std::size_t i = 0; i < values.size(); ++i)
            if (values[i] != static_cast<int>(i + 1)) return error(422, "ranks are not a permutation of 1..m");
        payload["ranks"] = ranks;
        accepted = ranks.size();
    }
    const auto e = append_event(set.image_id, "augmentation_rating", payload);
    return {200, {{"accepted", accepted}, {"event_id", e.event_id}}};
}

ApiResponse FeedbackService::update(const json& body) {
    std::unique_lock lk(update_mu_, std::try_to_lock);
    if (!lk.owns_lock()) return error(409, "an update is already running");
    const std::string since = body.is_object() ? body.value("since_event_id", std::string()) : std::string();
    const auto model = snapshot();
    if (!model) return error(503, "no model loaded");
    const ServiceState st = state_copy();
    const int task_id = static_cast<int>(st.updates().size());

    std::vector<Instance> instances;
    std::vector<std::string> consumed;
    std::map<std::string, std::vector<std::string>> task_refs;
    for (const auto& c : st.corrections()) {
        if (st.consumed(c.event_id) || c.event_id <= since) continue;
        const ImageRecord* image = find_image(c.image_id);
        if (!image) continue;
        instances.push_back({*image, make_caption(c.event_id, c.image_id, c.text, Provenance::corrected), nullptr});
        consumed.push_back(c.event_id);
        task_refs[c.image_id].push_back(c.text);
    }
    for (const auto& [id, s] : st.sets()) {
        if (s.source_id <= since) continue;
        for (const auto& v : s.variants) {
            if (!ServiceState::approved(v, config_.rank_cutoff) || st.consumed(v.augmentation_id)) continue;
            const ImageRecord* image = find_image(v.image ? v.image->image_id : s.image_id);
            if (!image) continue;
            CaptionRecord caption;
            if (v.caption) {
                caption = *v.caption;
            } else {
                const Correction* corr = st.latest_correction(s.image_id);
                if (!corr) continue;
                caption = make_caption(v.augmentation_id, image->image_id, corr->text, Provenance::augmented,
                                       v.method_tag, corr->event_id);
            }
            instances.push_back({*image, std::move(caption), nullptr});
            consumed.push_back(v.augmentation_id);
        }
    }
    if (instances.empty()) {
        UpdateReport noop;
        noop.task_id = task_id;
        noop.checkpoint_hash = model->content_hash();
        return {200, {{"report", noop.to_json()}, {"noop", true}, {"consumed", 0}}};
    }

    auto next = model->clone();
    ReplayMemory mem = *memory_;
    const ImageLookup lookup = [this](const std::string& id) { return find_image(id); };
    UpdateReport report;
    try {
        report = capfeed::update(*next, instances, mem, lookup, config_.update, task_id);
    } catch (const std::exception& e) {
        return error(500, std::string("update failed: ") + e.what());
    }

    const fs::path ckpt = fs::path("checkpoints") / ("ckpt-" + std::to_string(task_id) + ".bin");
    const fs::path mem_path = fs::path("memory") / ("memory-" + std::to_string(task_id) + ".jsonl");
    next->save(config_.state_dir / ckpt);
    mem.save(config_.state_dir / mem_path);

    json task_eval = json::array();
    for (const auto& [image_id, refs] : task_refs) task_eval.push_back({{"image_id", image_id}, {"references", refs}});
    auto eval_items = [&](const json& entries) {
        std::vector<EvalItem> items;
        for (const auto& entry : entries) {
            const ImageRecord* image = find_image(entry.at("image_id").get<std::string>());
            if (!image) continue;
            EvalItem item{*image, {}};
            for (const auto& r : entry.at("references")) item.references.push_back(tokenize(r.get<std::string>()));
            items.push_back(std::move(item));
        }
        return items;
    };
    json r_row = json::array();
    std::vector<EvalItem> all;
    for (int j = 0; j <= task_id; ++j) {
        const json& entries = j < task_id ? st.updates()[static_cast<std::size_t>(j)].at("task_eval") : task_eval;
        auto items = eval_items(entries);
        // A task made only of approved variants has no corrected references.
        r_row.push_back(items.empty() ? json() : json(evaluate(*next, items, config_.max_len).bleu4));
        all.insert(all.end(), items.begin(), items.end());
    }
    const json union_bleu = all.empty() ? json() : json(evaluate(*next, all, config_.max_len).bleu4);

    json payload = {{"task_id", task_id},       {"consumed", consumed},          {"report", report.to_json()},
                    {"checkpoint", ckpt.string()}, {"memory", mem_path.string()}, {"task_eval", task_eval},
                    {"r_row", r_row},           {"union_bleu", union_bleu},     {"config", config_.update.to_json()}};
    if (!since.empty()) payload["since_event_id"] = since;
    const auto e = append_event("", "update_trigger", payload);

    *memory_ = std::move(mem);
    {
        std::lock_guard mlk(model_mu_);
        model_ = std::shared_ptr<const CaptionModel>(std::move(next));
    }
    return {200,
            {{"event_id", e.event_id},
             {"report", report.to_json()},
             {"consumed", consumed.size()},
             {"r_row", r_row},
             {"union_bleu", union_bleu},
             {"checkpoint", (config_.state_dir / ckpt).string()}}};
}

ApiResponse FeedbackService::metrics() const {
    const ServiceState st = state_copy();
    json rows = json::array(), reports = json::array(), unions = json::array();
    for (const auto& u : st.updates()) {
        rows.push_back(u.at("r_row"));
        reports.push_back(u.at("report"));
        unions.push_back(u.at("union_bleu"));
    }
    json forgetting = json::array();
    if (!rows.empty()) {
        const auto& last = rows.back();
        for (std::size_t j = 0; j + 1 < rows.size(); ++j) {
            if (last[j].is_null()) {
                forgetting.push_back(nullptr);
                continue;
            }
            double peak = 0;
            for (std::size_t i = j; i + 1 < rows.size(); ++i) peak = std::max(peak, rows[i][j].get<double>());
            forgetting.push_back(peak - last[j].get<double>());
        }
    }
    json latest = st.updates().empty() ? json() : json(st.updates().back());
    return {200,
            {{"updates", st.updates().size()},
             {"R", rows},
             {"union_bleu", unions},
             {"reports", reports},
             {"forgetting", forgetting},
             {"latest", latest}}};
}

ApiResponse FeedbackService::state() const {
    std::lock_guard lk(state_mu_);
    return {200,
            {{"hash", state_.hash()},
             {"last_event_id", state_.last_seq() ? json(event_id_for(state_.last_seq())) : json()},
             {"events", state_.event_count()},
             {"pending", state_.pending_ids(config_.rank_cutoff)},
             {"updates", state_.updates().size()}}};
}

void register_routes(httplib::Server& server, FeedbackService& service) {
    auto reply = [](httplib::Response& res, const ApiResponse& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    auto parse = [](const httplib::Request& req) -> std::optional<json> {
        if (req.body.empty()) return json::object();
        try {
            return json::parse(req.body);
        } catch (const json::parse_error&) {
            return std::nullopt;
        }
    };
    auto bad_json = ApiResponse{400, {{"error", "request body is not valid JSON"}}};

    server.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string msg = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            msg = e.what();
        } catch (...) {
        }
        reply(res, {500, {{"error", msg}}});
    });

    server.Post("/predict", [&service, reply, parse, bad_json](const httplib::Request& req, httplib::Response& res) {
        if (req.is_multipart_form_data()) {
            if (!req.has_file("image")) return reply(res, {400, {{"error", "multipart field 'image' is required"}}});
            const auto& f = req.get_file_value("image");
            return reply(res, service.predict_upload(
                                  {reinterpret_cast<const std::uint8_t*>(f.content.data()), f.content.size()}));
        }
        const auto type = req.get_header_value("Content-Type");
        if (type.rfind("application/json", 0) == 0) {
            const auto body = parse(req);
            if (!body) return reply(res, bad_json);
            if (!body->contains("image_id") || !(*body)["image_id"].is_string())
                return reply(res, {400, {{"error", "image_id is required"}}});
            return reply(res, service.predict((*body)["image_id"].get<std::string>()));
        }
        reply(res, service.predict_upload({reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()}));
    });
    server.Post("/feedback", [&service, reply, parse, bad_json](const httplib::Request& req, httplib::Response& res) {
        const auto body = parse(req);
        reply(res, body ? service.feedback(*body) : bad_json);
    });
    server.Get("/augmentations", [&service, reply](const httplib::Request& req, httplib::Response& res) {
        if (!req.has_param("image_id")) return reply(res, {400, {{"error", "image_id is required"}}});
        int wait_ms = 0;
        if (req.has_param("wait_ms")) {
            try {
                wait_ms = std::clamp(std::stoi(req.get_param_value("wait_ms")), 0, 60000);
            } catch (const std::exception&) {
                return reply(res, {400, {{"error", "wait_ms must be an integer"}}});
            }
        }
        reply(res, service.augmentations(req.get_param_value("image_id"), wait_ms));
    });
    server.Post(R"(/augmentations/([^/]+)/ratings)",
                [&service, reply, parse, bad_json](const httplib::Request& req, httplib::Response& res) {
                    const auto body = parse(req);
                    reply(res, body ? service.rate(req.matches[1], *body) : bad_json);
                });
    server.Post("/update", [&service, reply, parse, bad_json](const httplib::Request& req, httplib::Response& res) {
        const auto body = parse(req);
        reply(res, body ? service.update(*body) : bad_json);
    });
    server.Get("/metrics", [&service, reply](const httplib::Request&, httplib::Response& res) { reply(res, service.metrics()); });
    server.Get("/state", [&service, reply](const httplib::Request&, httplib::Response& res) { reply(res, service.state()); });
    server.Get("/health", [reply](const httplib::Request&, httplib::Response& res) { reply(res, {200, {{"ok", true}}}); });
}

}  // namespace capfeed
