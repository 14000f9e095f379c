#include "doctest.h"

#include "capfeed/service.hpp"
#include "capfeed/sim_user.hpp"
#include "capfeed/synthetic.hpp"

#include "httplib.h"

#include <random>
#include <thread>

#include <unistd.h>

using namespace capfeed;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<CaptionRecord> gts(const std::vector<std::pair<std::string, std::string>>& items) {
    std::vector<CaptionRecord> out;
    for (const auto& [id, text] : items) out.push_back(make_caption(id, "img", text));
    return out;
}

ImageRecord blank() { return make_image("img", 2, 2, std::vector<std::uint8_t>(12, 0)); }

struct LiveService {
    fs::path dir;
    SyntheticDataset data;
    std::unique_ptr<FeedbackService> service;
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit LiveService(const std::string& tag, int per_combination = 1) {
        dir = fs::temp_directory_path() / ("capfeed_sim_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        data = make_shapes_dataset({"circle", "square"}, {"red", "blue"}, per_combination, 5, "img");
        save_dataset(dir / "data", data.images, data.captions);
        CaptionerConfig cfg;
        cfg.hidden_dim = 16;
        cfg.embed_dim = 8;
        cfg.attention_dim = 8;
        cfg.feature_dim = 8;
        cfg.max_len = 6;
        Captioner(cfg, build_vocab(data.captions, 1), 2).save(dir / "model.bin");
        ServiceConfig sc;
        sc.checkpoint = dir / "model.bin";
        sc.state_dir = dir / "state";
        sc.data_dir = dir / "data";
        sc.lexicon = fs::path(CAPFEED_DATA) / "lexicon.json";
        sc.image_variants = 2;
        sc.max_len = 6;
        service = std::make_unique<FeedbackService>(sc);
        register_routes(server, *service);
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~LiveService() {
        server.stop();
        thread.join();
        service.reset();
        fs::remove_all(dir);
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port); }
};

std::vector<std::string> calls(const std::vector<json>& transcript) {
    std::vector<std::string> out;
    for (const auto& e : transcript) out.push_back(e["call"]);
    return out;
}

}  // namespace

TEST_CASE("token_jaccard") {
    CHECK(token_jaccard(tokenize("a small dog"), tokenize("a dog")) == doctest::Approx(2.0 / 3.0));
    CHECK(token_jaccard(tokenize("a a dog"), tokenize("dog a")) == 1.0);
    CHECK(token_jaccard(tokenize("cat"), tokenize("dog")) == 0.0);
    CHECK(token_jaccard({}, {}) == 1.0);
}

TEST_CASE("simulate_correction examples") {
    const auto refs = gts({{"1", "a red circle"}, {"2", "a blue square"}, {"3", "yellow star shining"}});
    auto pick = [&](const std::string& pred) {
        return simulate_correction(blank(), make_caption("p", "img", pred, Provenance::predicted), refs);
    };
    CHECK(pick("a blue square")["payload"]["text"] == "a blue square");
    CHECK(pick("star yellow")["payload"]["source_caption_id"] == "3");
    const auto none = pick("zebra");
    CHECK(none["payload"]["source_caption_id"] == "1");
    CHECK(none["kind"] == "caption_correction");
    CHECK(none["image_id"] == "img");

    const auto natural = gts({{"10", "x"}, {"2", "y"}});
    CHECK(simulate_correction(blank(), make_caption("p", "img", "zzz"), natural)["payload"]["source_caption_id"] == "2");
    CHECK_THROWS_AS(simulate_correction(blank(), make_caption("p", "img", "a"), {}), std::invalid_argument);
}

TEST_CASE("simulate_rating examples") {
    const auto refs = gts({{"1", "a dog"}});
    CHECK(simulate_rating(make_caption("a", "img", "a dog"), refs, 1.0) == "good");
    CHECK(simulate_rating(make_caption("a", "img", "two cats"), refs, 0.5) == "bad");
    CHECK(simulate_rating(make_caption("a", "img", "a small dog"), refs, 0.5) == "good");
    CHECK(simulate_rating(make_caption("a", "img", "two cats"), refs, 0.0) == "good");
    CHECK_THROWS_AS(simulate_rating(make_caption("a", "img", "x"), refs, 1.5), std::invalid_argument);
    CHECK_THROWS_AS(simulate_rating(make_caption("a", "img", "x"), refs, -0.1), std::invalid_argument);
}

TEST_CASE("property: corrections come from the references; ratings are monotone in the threshold") {
    std::mt19937_64 rng(3);
    const std::vector<std::string> words = {"a", "red", "blue", "dog", "cat", "on", "the", "mat", "big"};
    auto random_text = [&] {
        std::string s;
        const auto n = 1 + rng() % 5;
        for (std::size_t i = 0; i < n; ++i) s += words[rng() % words.size()] + " ";
        return s;
    };
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<CaptionRecord> refs;
        const auto n = 1 + rng() % 4;
        for (std::size_t i = 0; i < n; ++i) refs.push_back(make_caption("r" + std::to_string(i), "img", random_text()));
        const auto pred = make_caption("p", "img", random_text(), Provenance::predicted);
        const auto out = simulate_correction(blank(), pred, refs);
        bool found = false;
        double best = 0;
        for (const auto& r : refs) {
            found |= out["payload"]["text"] == r.text;
            best = std::max(best, token_jaccard(pred.tokens, r.tokens));
        }
        CHECK(found);
        CHECK(token_jaccard(pred.tokens, tokenize(out["payload"]["text"].get<std::string>())) == best);

        bool seen_bad = false;
        for (int k = 0; k <= 20; ++k) {
            const auto rating = simulate_rating(pred, refs, k / 20.0);
            if (rating == "bad") seen_bad = true;
            CHECK_FALSE((seen_bad && rating == "good"));
        }
    }
}

TEST_CASE("run_loop with zero rounds is empty") {
    const auto data = make_shapes_dataset({"circle"}, {"red"}, 1, 1);
    SimOptions opts;
    opts.rounds = 0;
    CHECK(run_loop(data.images, data.captions, "http://127.0.0.1:1", opts).empty());
}

TEST_CASE("run_loop records network failures after retries") {
    const auto data = make_shapes_dataset({"circle"}, {"red"}, 1, 1);
    SimOptions opts;
    opts.rounds = 1;
    opts.retries = 2;
    opts.post_bboxes = false;
    const auto t = run_loop(data.images, data.captions, "http://127.0.0.1:1", opts);
    REQUIRE(t.size() == 2);
    CHECK(calls(t) == std::vector<std::string>{"predict", "get-augmentations"});
    CHECK(t[0]["status"].is_null());
    CHECK(t[0]["attempts"] == 3);
    CHECK(t[0].contains("error"));
}

TEST_CASE("one round is predict, feedback, get-augmentations, ratings") {
    LiveService live("one");
    auto images = live.data.images;
    for (auto& img : images) img.bboxes.clear();
    SimOptions opts;
    opts.rounds = 1;
    const auto t = run_loop(images, live.data.captions, live.endpoint(), opts);
    CHECK(calls(t) == std::vector<std::string>{"predict", "feedback", "get-augmentations", "ratings"});
    for (const auto& e : t) CHECK(e["status"] == 200);
}

TEST_CASE("20 rounds with update every 10 make exactly 2 update calls") {
    LiveService live("twenty", 5);
    REQUIRE(live.data.images.size() == 20);
    SimOptions opts;
    opts.rounds = 20;
    opts.use_ranks = true;
    const auto t = run_loop(live.data.images, live.data.captions, live.endpoint(), opts);
    int updates = 0, bbox = 0;
    for (const auto& e : t) {
        CHECK(e["status"] == 200);
        if (e["call"] == "update") {
            ++updates;
            CHECK(e["response"]["r_row"].size() == static_cast<std::size_t>(updates));
        }
        if (e["call"] == "feedback" && e["request"]["kind"] == "bbox_annotation") ++bbox;
        if (e["call"] == "ratings") {
            std::vector<int> ranks;
            for (const auto& [id, r] : e["request"]["ranks"].items()) ranks.push_back(r.get<int>());
            std::sort(ranks.begin(), ranks.end());
            for (std::size_t i = 0; i < ranks.size(); ++i) CHECK(ranks[i] == static_cast<int>(i + 1));
        }
    }
    CHECK(updates == 2);
    CHECK(bbox == 20);
    CHECK(live.service->metrics().body["R"].size() == 2);
}

TEST_CASE("run_loop is idempotent against the event log modulo ids and timestamps") {
    std::vector<std::vector<std::string>> runs;
    for (int run = 0; run < 2; ++run) {
        LiveService live("idem" + std::to_string(run), 2);
        SimOptions opts;
        opts.rounds = 6;
        opts.update_every = 3;
        run_loop(live.data.images, live.data.captions, live.endpoint(), opts);
        live.service->wait_idle();
        std::vector<std::string> events;
        for (auto e : read_log(live.service->config().event_log_path())) {
            json p = e.payload;
            p.erase("prediction_event_id");
            events.push_back(e.kind + "|" + e.image_id + "|" + p.dump());
        }
        runs.push_back(events);
    }
    REQUIRE(runs[0].size() == runs[1].size());
    for (std::size_t i = 0; i < runs[0].size(); ++i) CHECK(runs[0][i] == runs[1][i]);
}
