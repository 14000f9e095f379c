#include "capfeed/sim_user.hpp"

#include "httplib.h"

#include <algorithm>
#include <fstream>
#include <future>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace capfeed {

using nlohmann::json;

double token_jaccard(std::span<const std::string> a, std::span<const std::string> b) {
    const std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    if (sa.empty() && sb.empty()) return 1.0;
    std::size_t inter = 0;
    for (const auto& t : sa) inter += sb.count(t);
    return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

json simulate_correction(const ImageRecord& image, const CaptionRecord& predicted,
                         std::span<const CaptionRecord> gt_captions) {
    if (gt_captions.empty()) throw std::invalid_argument("simulate_correction: gt_captions must be non-empty");
    const CaptionRecord* best = nullptr;
    double best_sim = -1;
    for (const auto& gt : gt_captions) {
        const double sim = token_jaccard(predicted.tokens, gt.tokens);
        if (sim > best_sim || (sim == best_sim && image_id_less(gt.caption_id, best->caption_id))) {
            best = &gt;
            best_sim = sim;
        }
    }
    return {{"image_id", image.image_id},
            {"kind", "caption_correction"},
            {"payload", {{"text", best->text}, {"source_caption_id", best->caption_id}}}};
}

std::string simulate_rating(const CaptionRecord& augmentation, std::span<const CaptionRecord> gt_captions,
                            double threshold) {
    if (!(threshold >= 0 && threshold <= 1)) throw std::invalid_argument("simulate_rating: threshold must be in [0, 1]");
    double best = 0;
    for (const auto& gt : gt_captions) best = std::max(best, token_jaccard(augmentation.tokens, gt.tokens));
    return best >= threshold ? "good" : "bad";
}

namespace {

class Caller {
public:
    Caller(const std::string& endpoint, const SimOptions& options) : endpoint_(endpoint), options_(options) {}

    json call(int round, const std::string& name, const std::string& method, const std::string& path,
              const json& request) const {
        httplib::Client client(endpoint_);
        client.set_connection_timeout(std::chrono::seconds(10));
        client.set_read_timeout(std::chrono::seconds(options_.timeout_s));
        json entry = {{"round", round}, {"call", name}, {"method", method}, {"path", path}, {"request", request}};
        std::string last_error;
        const int attempts = std::max(1, options_.retries + 1);
        for (int a = 1; a <= attempts; ++a) {
            auto res = method == "GET" ? client.Get(path) : client.Post(path, request.dump(), "application/json");
            entry["attempts"] = a;
            if (res) {
                entry["status"] = res->status;
                try {
                    entry["response"] = json::parse(res->body);
                } catch (const json::parse_error&) {
                    entry["response"] = res->body;
                }
                return entry;
            }
            last_error = httplib::to_string(res.error());
            std::this_thread::sleep_for(std::chrono::milliseconds(100 * a));
        }
        entry["status"] = nullptr;
        entry["response"] = nullptr;
        entry["error"] = last_error;
        return entry;
    }

private:
    std::string endpoint_;
    SimOptions options_;
};

bool ok(const json& entry) { return entry["status"].is_number() && entry["status"].get<int>() == 200; }

std::string percent_encode(const std::string& s) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
            out += static_cast<char>(c);
        } else {
            out += '%';
            out += hex[c >> 4];
            out += hex[c & 15];
        }
    }
    return out;
}

}  // namespace

std::vector<json> run_loop(std::span<const ImageRecord> images, std::span<const CaptionRecord> captions,
                           const std::string& endpoint, const SimOptions& options) {
    std::vector<json> transcript;
    if (options.rounds <= 0 || images.empty()) return transcript;
    const auto gt_by_image = captions_by_image(captions);
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(options.seed);
    std::shuffle(order.begin(), order.end(), rng);

    const Caller caller(endpoint, options);
    auto image_at = [&](int round) -> const ImageRecord& {
        return images[order[static_cast<std::size_t>(round) % order.size()]];
    };
    auto predict_call = [&](int round) {
        return caller.call(round, "predict", "POST", "/predict", {{"image_id", image_at(round).image_id}});
    };

    std::vector<std::future<json>> predicted;
    if (options.parallel)
        for (int r = 0; r < options.rounds; ++r) predicted.push_back(std::async(std::launch::async, predict_call, r));

    std::set<std::string> rated;
    for (int r = 0; r < options.rounds; ++r) {
        const ImageRecord& image = image_at(r);
        const auto gt_it = gt_by_image.find(image.image_id);
        const std::vector<CaptionRecord> no_gt;
        const auto& gt = gt_it == gt_by_image.end() ? no_gt : gt_it->second;

        json pred = options.parallel ? predicted[static_cast<std::size_t>(r)].get() : predict_call(r);
        transcript.push_back(pred);
        if (ok(pred) && !gt.empty()) {
            const auto text = pred["response"].value("caption", std::string());
            const auto predicted_caption = make_caption("pred", image.image_id, text, Provenance::predicted);
            json body = simulate_correction(image, predicted_caption, gt);
            body["payload"]["prediction_event_id"] = pred["response"].value("event_id", std::string());
            transcript.push_back(caller.call(r, "feedback", "POST", "/feedback", body));
        }
        if (options.post_bboxes)
            for (const auto& b : image.bboxes) {
                const json body = {{"image_id", image.image_id},
                                   {"kind", "bbox_annotation"},
                                   {"payload",
                                    {{"x", b.x / image.width},
                                     {"y", b.y / image.height},
                                     {"w", b.w / image.width},
                                     {"h", b.h / image.height},
                                     {"label", b.label}}}};
                transcript.push_back(caller.call(r, "feedback", "POST", "/feedback", body));
            }

        const std::string aug_path = "/augmentations?image_id=" + percent_encode(image.image_id) +
                                     "&wait_ms=" + std::to_string(options.wait_ms);
        json augs = caller.call(r, "get-augmentations", "GET", aug_path, json());
        transcript.push_back(augs);
        if (ok(augs)) {
            for (const auto& set : augs["response"]["sets"]) {
                const std::string set_id = set["set_id"].get<std::string>();
                if (rated.count(set_id) || set["variants"].empty()) continue;
                rated.insert(set_id);
                std::vector<std::pair<std::string, double>> scored;
                for (const auto& v : set["variants"]) {
                    double sim = 1.0;  // geometric image variants keep the corrected caption
                    if (v["caption"].is_string()) {
                        const auto tokens = tokenize(v["caption"].get<std::string>());
                        sim = 0;
                        for (const auto& g : gt) sim = std::max(sim, token_jaccard(tokens, g.tokens));
                    }
                    scored.emplace_back(v["augmentation_id"].get<std::string>(), sim);
                }
                json body;
                if (options.use_ranks) {
                    std::vector<std::size_t> idx(scored.size());
                    std::iota(idx.begin(), idx.end(), 0);
                    std::stable_sort(idx.begin(), idx.end(),
                                     [&](std::size_t a, std::size_t b) { return scored[a].second > scored[b].second; });
                    json ranks = json::object();
                    for (std::size_t k = 0; k < idx.size(); ++k) ranks[scored[idx[k]].first] = k + 1;
                    body = {{"ranks", ranks}};
                } else {
                    json ratings = json::object();
                    for (const auto& [id, sim] : scored) ratings[id] = sim >= options.threshold ? "good" : "bad";
                    body = {{"ratings", ratings}};
                }
                transcript.push_back(
                    caller.call(r, "ratings", "POST", "/augmentations/" + percent_encode(set_id) + "/ratings", body));
            }
        }
        if (options.update_every > 0 && (r + 1) % options.update_every == 0)
            transcript.push_back(caller.call(r, "update", "POST", "/update", json::object()));
    }
    return transcript;
}

void write_transcript(const std::filesystem::path& path, std::span<const json> transcript) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write transcript " + path.string());
    for (const auto& e : transcript) out << e.dump() << "\n";
}

}  // namespace capfeed
