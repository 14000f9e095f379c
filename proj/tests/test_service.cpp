#include "doctest.h"

#include "capfeed/errors.hpp"
#include "capfeed/image_io.hpp"
#include "capfeed/service.hpp"
#include "capfeed/synthetic.hpp"

#include "httplib.h"

#include <atomic>
#include <fstream>
#include <latch>
#include <random>
#include <set>
#include <thread>

#include <unistd.h>

using namespace capfeed;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("capfeed_svc_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

Event make_event(std::uint64_t seq, const std::string& image_id, const std::string& kind, json payload) {
    return {event_id_for(seq), seq, 1000 + static_cast<std::int64_t>(seq), image_id, kind, std::move(payload)};
}

// Tiny dataset + checkpoint shared by the service tests.
struct Fixture {
    TempDir dir{"fx"};
    fs::path data = dir.path / "data";
    fs::path ckpt = dir.path / "model.bin";
    fs::path stub = dir.path / "stub.json";
    SyntheticDataset shapes;

    Fixture() {
        shapes = make_shapes_dataset({"circle", "square"}, {"red", "blue"}, 1, 3, "img");
        save_dataset(data, shapes.images, shapes.captions);
        CaptionerConfig cfg;
        cfg.hidden_dim = 16;
        cfg.embed_dim = 8;
        cfg.attention_dim = 8;
        cfg.feature_dim = 8;
        cfg.conv_channels = {4, 8, 8};
        cfg.max_len = 6;
        Captioner model(cfg, build_vocab(shapes.captions, 1), 1);
        model.save(ckpt);
        json table = json::object();
        table["paraphrase:a red circle"] = {"one red circle", "a crimson circle", "a red ring"};
        json ten = json::array();
        for (int i = 0; i < 10; ++i) ten.push_back("a blue square number " + std::to_string(i));
        table["paraphrase:a blue square"] = ten;
        std::ofstream(stub) << table.dump();
    }

    ServiceConfig config(const std::string& state) const {
        ServiceConfig c;
        c.checkpoint = ckpt;
        c.state_dir = dir.path / state;
        c.data_dir = data;
        c.stub_table = stub;
        c.text.n_synonym = 0;
        c.text.pivots = {};
        c.text.n_paraphrase = 10;
        c.image_variants = 2;
        c.update.batch_size = 4;
        c.update.epochs = 1;
        c.rank_cutoff = 2;
        c.max_len = 6;
        return c;
    }

    std::string id_of(const std::string& color, const std::string& shape) const {
        for (std::size_t i = 0; i < shapes.specs.size(); ++i)
            if (shapes.specs[i].color == color && shapes.specs[i].shape == shape) return shapes.images[i].image_id;
        return "";
    }
};

json correct(FeedbackService& svc, const std::string& image_id, const std::string& text) {
    const auto r = svc.feedback({{"image_id", image_id}, {"kind", "caption_correction"}, {"payload", {{"text", text}}}});
    REQUIRE(r.status == 200);
    return r.body;
}

json only_set(FeedbackService& svc, const std::string& image_id) {
    const auto r = svc.augmentations(image_id, 10000);
    REQUIRE(r.status == 200);
    REQUIRE_FALSE(r.body["pending"].get<bool>());
    REQUIRE(r.body["sets"].size() == 1);
    return r.body["sets"][0];
}

}  // namespace

TEST_CASE("replay of an empty or missing log gives the empty state") {
    TempDir dir("empty");
    std::ofstream(dir.path / "events.jsonl").close();
    const auto state = replay_log(dir.path / "events.jsonl");
    CHECK(state.event_count() == 0);
    CHECK(state.hash() == ServiceState{}.hash());
    CHECK(replay_log(dir.path / "absent.jsonl").hash() == ServiceState{}.hash());
}

TEST_CASE("one prediction and one correction leave exactly that correction pending") {
    TempDir dir("pending");
    const auto path = dir.path / "events.jsonl";
    {
        EventLog log(path);
        log.append(make_event(1, "img-1", "prediction", {{"caption", "a dog"}, {"tokens", {"a", "dog"}}}));
        log.append(make_event(2, "img-1", "caption_correction", {{"text", "a red circle"}}));
    }
    const auto state = replay_log(path);
    CHECK(state.pending_ids(2) == std::vector<std::string>{event_id_for(2)});
    CHECK(state.unaugmented_sources() == std::vector<std::string>{event_id_for(2)});
    CHECK(state.prediction_count() == 1);
}

TEST_CASE("replayed state hash equals the incrementally built state at every prefix") {
    TempDir dir("dual");
    const auto path = dir.path / "events.jsonl";
    std::mt19937_64 rng(11);
    ServiceState live;
    std::vector<std::string> prefix_hashes;
    std::vector<std::string> sets;
    std::map<std::string, std::vector<std::string>> variant_ids;
    std::vector<std::string> sources;
    {
        EventLog log(path);
        for (std::uint64_t seq = 1; seq <= 500; ++seq) {
            const std::string image = "img-" + std::to_string(rng() % 7);
            const auto roll = rng() % 6;
            Event e;
            if (roll == 0) {
                e = make_event(seq, image, "prediction", {{"caption", "a thing"}, {"tokens", {"a", "thing"}}});
            } else if (roll == 1) {
                e = make_event(seq, image, "caption_correction", {{"text", "caption " + std::to_string(seq)}});
                sources.push_back(e.event_id);
            } else if (roll == 2) {
                e = make_event(seq, image, "bbox_annotation",
                               {{"bbox", to_json(BBox{1, 2, 3.5, 4, "cup"})}, {"normalized", to_json(BBox{0.1, 0.2, 0.3, 0.4, "cup"})}});
                sources.push_back(e.event_id);
            } else if (roll == 3 && !sources.empty()) {
                const std::string src = sources[rng() % sources.size()];
                const std::string set_id = "set-" + std::to_string(seq);
                json vars = json::array();
                for (int v = 0; v < 3; ++v) {
                    const std::string vid = set_id + "#v" + std::to_string(v);
                    vars.push_back({{"augmentation_id", vid},
                                    {"method_tag", "paraphrase"},
                                    {"caption", to_json(make_caption(vid, image, "variant " + std::to_string(v),
                                                                     Provenance::augmented, "paraphrase", src))}});
                    variant_ids[set_id].push_back(vid);
                }
                e = make_event(seq, image, "augmentation_set",
                               {{"set_id", set_id}, {"kind", "text"}, {"source_id", src}, {"trigger_event_id", src}, {"variants", vars}});
                sets.push_back(set_id);
            } else if (roll == 4 && !sets.empty()) {
                const std::string set_id = sets[rng() % sets.size()];
                const auto& ids = variant_ids[set_id];
                json payload = {{"set_id", set_id}};
                if (rng() % 2) {
                    json ratings = json::object();
                    for (const auto& id : ids) ratings[id] = rng() % 2 ? "good" : "bad";
                    payload["ratings"] = ratings;
                } else {
                    std::vector<int> perm = {1, 2, 3};
                    std::shuffle(perm.begin(), perm.end(), rng);
                    json ranks = json::object();
                    for (std::size_t k = 0; k < ids.size(); ++k) ranks[ids[k]] = perm[k];
                    payload["ranks"] = ranks;
                }
                e = make_event(seq, image, "augmentation_rating", payload);
            } else {
                const auto pending = live.pending_ids(2);
                e = make_event(seq, "", "update_trigger", {{"consumed", pending}, {"r_row", {0.5}}});
            }
            log.append(e);
            live.apply(e);
            prefix_hashes.push_back(live.hash());
        }
    }
    const auto replayed = replay_log(path);
    CHECK(replayed.hash() == live.hash());
    CHECK(replayed.event_count() == 500);

    // Truncated copies of the log reproduce the hash at that event id.
    std::ifstream in(path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    for (std::size_t cut : {1u, 37u, 250u, 499u}) {
        const auto part = dir.path / "prefix.jsonl";
        std::ofstream out(part);
        for (std::size_t i = 0; i < cut; ++i) out << lines[i] << "\n";
        out.close();
        CHECK(replay_log(part).hash() == prefix_hashes[cut - 1]);
    }
}

TEST_CASE("corrupt log lines are fatal with the line number; a torn tail is ignored") {
    TempDir dir("corrupt");
    const auto path = dir.path / "events.jsonl";
    {
        EventLog log(path);
        log.append(make_event(1, "a", "prediction", json::object()));
        log.append(make_event(2, "a", "prediction", json::object()));
    }
    {
        std::ofstream out(path, std::ios::app);
        out << "{\"v\":1,\"event_id\":\"ev-0000000";
    }
    CHECK(replay_log(path).event_count() == 2);
    {
        std::ofstream out(path, std::ios::app);
        out << "\n";
    }
    try {
        replay_log(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find(":3:") != std::string::npos);
    }

    const auto versioned = dir.path / "v2.jsonl";
    std::ofstream(versioned) << R"({"v":2,"event_id":"ev-000000000001","seq":1,"timestamp":0,"image_id":"a","kind":"prediction","payload":{}})"
                             << "\n";
    CHECK_THROWS_AS(replay_log(versioned), ParseError);

    const auto unordered = dir.path / "unordered.jsonl";
    {
        EventLog log(unordered);
        log.append(make_event(2, "a", "prediction", json::object()));
        log.append(make_event(1, "a", "prediction", json::object()));
    }
    CHECK_THROWS_AS(replay_log(unordered), ParseError);
}

TEST_CASE("config file plus environment overrides") {
    TempDir dir("cfg");
    const auto file = dir.path / "config.json";
    std::ofstream(file) << R"({"port": 9000, "state_dir": "/tmp/x", "update": {"replay_every": 3}, "rank_cutoff": 4})";
    std::map<std::string, std::string> env = {{"CAPFEED_PORT", "9100"}, {"CAPFEED_MEMORY_CAPACITY", "50"}, {"CAPFEED_LR", "0.5"}};
    const EnvLookup lookup = [&](const char* name) -> const char* {
        const auto it = env.find(name);
        return it == env.end() ? nullptr : it->second.c_str();
    };
    const auto c = load_service_config(file, lookup);
    CHECK(c.port == 9100);
    CHECK(c.state_dir == "/tmp/x");
    CHECK(c.update.replay_every == 3);
    CHECK(c.update.lr == doctest::Approx(0.5));
    CHECK(c.memory_capacity == 50);
    CHECK(c.rank_cutoff == 4);
    CHECK(c.event_log_path() == fs::path("/tmp/x/events.jsonl"));
    env["CAPFEED_PORT"] = "abc";
    CHECK_THROWS_AS(load_service_config(file, lookup), std::invalid_argument);
    CHECK_THROWS_AS(load_service_config(dir.path / "missing.json", lookup), ParseError);
    const auto round_trip = ServiceConfig::from_json(c.to_json());
    CHECK(round_trip.to_json() == c.to_json());
}

TEST_CASE("predict: known images, uploads and errors") {
    Fixture fx;
    FeedbackService svc(fx.config("predict"));
    const auto id = fx.shapes.images[0].image_id;
    const auto a = svc.predict(id);
    REQUIRE(a.status == 200);
    CHECK(a.body["tokens"].size() <= 6);
    CHECK(a.body["attention"]["per_token"].size() == a.body["tokens"].size());
    const auto b = svc.predict(id);
    CHECK(b.body["caption"] == a.body["caption"]);
    CHECK(b.body["event_id"].get<std::string>() > a.body["event_id"].get<std::string>());

    CHECK(svc.predict("nope").status == 404);
    CHECK(svc.predict_upload({}).status == 400);
    const std::string junk = "not an image";
    CHECK(svc.predict_upload({reinterpret_cast<const std::uint8_t*>(junk.data()), junk.size()}).status == 400);

    const auto& img = fx.shapes.images[1];
    const auto bytes = encode_ppm(img.width, img.height, *img.data);
    const auto up = svc.predict_upload(bytes);
    REQUIRE(up.status == 200);
    const auto up_id = up.body["image_id"].get<std::string>();
    CHECK(up_id.rfind("upload-", 0) == 0);
    CHECK(correct(svc, up_id, "a thing")["event_id"].is_string());
    CHECK(svc.state_copy().prediction_count() == 3);
}

TEST_CASE("predict without a model is 503") {
    Fixture fx;
    auto cfg = fx.config("nomodel");
    cfg.checkpoint.reset();
    FeedbackService svc(cfg);
    CHECK(svc.predict(fx.shapes.images[0].image_id).status == 503);
    CHECK(svc.update(json::object()).status == 503);
}

TEST_CASE("feedback validation") {
    Fixture fx;
    FeedbackService svc(fx.config("fb"));
    const auto id = fx.shapes.images[0].image_id;
    auto bbox = [&](double x, double y, double w, double h) {
        return svc.feedback({{"image_id", id}, {"kind", "bbox_annotation"},
                             {"payload", {{"x", x}, {"y", y}, {"w", w}, {"h", h}, {"label", "circle"}}}}).status;
    };
    CHECK(bbox(0.8, 0.1, 0.3, 0.2) == 422);
    CHECK(bbox(0.1, 0.1, 0.0, 0.2) == 422);
    CHECK(bbox(-0.1, 0.1, 0.2, 0.2) == 422);
    CHECK(bbox(0.25, 0.25, 0.5, 0.5) == 200);
    CHECK(svc.feedback({{"image_id", "ghost"}, {"kind", "caption_correction"}, {"payload", {{"text", "x"}}}}).status == 404);
    CHECK(svc.feedback({{"image_id", id}, {"kind", "caption_correction"}, {"payload", {{"text", " . "}}}}).status == 422);
    CHECK(svc.feedback({{"image_id", id}, {"kind", "update_trigger"}}).status == 422);
    CHECK(svc.feedback({{"kind", "caption_correction"}}).status == 400);

    const auto state = svc.state_copy();
    REQUIRE(state.annotations().size() == 1);
    const auto& box = state.annotations()[0].box;
    CHECK(box.x == doctest::Approx(0.25 * 64));
    CHECK(box.w == doctest::Approx(0.5 * 64));
    CHECK(box.label == "circle");
}

TEST_CASE("caption correction yields a text augmentation set of at most 10 variants") {
    Fixture fx;
    FeedbackService svc(fx.config("text"));
    const auto id = fx.id_of("blue", "square");
    const auto ev = correct(svc, id, "a blue square")["event_id"].get<std::string>();
    const auto set = only_set(svc, id);
    CHECK(set["source_id"] == ev);
    CHECK(set["kind"] == "text");
    CHECK(set["variants"].size() == 10);

    auto cfg = fx.config("text-default");
    cfg.stub_table.reset();
    cfg.text = TextAugmentConfig{};
    cfg.lexicon = fs::path(CAPFEED_DATA) / "lexicon.json";
    FeedbackService svc2(cfg);
    correct(svc2, id, "a large blue square on a wooden table");
    const auto set2 = only_set(svc2, id);
    CHECK(set2["variants"].size() >= 1);
    CHECK(set2["variants"].size() <= 10);
}

TEST_CASE("rating validation and the rank cutoff filter") {
    Fixture fx;
    FeedbackService svc(fx.config("ranks"));
    const auto id = fx.id_of("red", "circle");
    const auto ev = correct(svc, id, "a red circle")["event_id"].get<std::string>();
    const auto set = only_set(svc, id);
    const std::string set_id = set["set_id"];
    REQUIRE(set["variants"].size() == 3);
    std::vector<std::string> vids;
    for (const auto& v : set["variants"]) vids.push_back(v["augmentation_id"]);

    CHECK(svc.rate("set-missing", {{"ranks", {1}}}).status == 404);
    CHECK(svc.rate(set_id, {{"ranks", {2, 1, 1}}}).status == 422);
    CHECK(svc.rate(set_id, {{"ranks", {1, 2}}}).status == 422);
    CHECK(svc.rate(set_id, {{"ranks", {{vids[0], 2}}}}).status == 422);
    CHECK(svc.rate(set_id, {{"ranks", {{vids[0], 1}}}}).status == 422);
    CHECK(svc.rate(set_id, {{"ratings", {{vids[0], "great"}}}}).status == 422);
    CHECK(svc.rate(set_id, {{"ratings", {{"other", "good"}}}}).status == 422);
    CHECK(svc.rate(set_id, json::object()).status == 422);

    const auto ok = svc.rate(set_id, {{"ranks", {3, 1, 2}}});
    REQUIRE(ok.status == 200);
    CHECK(ok.body["accepted"] == 3);

    const auto pending = svc.state_copy().pending_ids(2);
    CHECK(pending == std::vector<std::string>{ev, vids[1], vids[2]});

    const auto up = svc.update(json::object());
    REQUIRE(up.status == 200);
    CHECK(up.body["consumed"] == 3);
    const auto state = svc.state_copy();
    CHECK(state.consumed(vids[1]));
    CHECK(state.consumed(vids[2]));
    CHECK_FALSE(state.consumed(vids[0]));
}

TEST_CASE("ratings replace ranks and all-good ratings are all consumed") {
    Fixture fx;
    FeedbackService svc(fx.config("allgood"));
    const auto id = fx.id_of("red", "circle");
    correct(svc, id, "a red circle");
    const auto set = only_set(svc, id);
    json good = json::object();
    for (const auto& v : set["variants"]) good[v["augmentation_id"].get<std::string>()] = "good";
    REQUIRE(svc.rate(set["set_id"], {{"ranks", {1, 2, 3}}}).status == 200);
    REQUIRE(svc.rate(set["set_id"], {{"ratings", good}}).status == 200);
    const auto st = svc.state_copy();
    for (const auto& v : st.find_set(set["set_id"])->variants) {
        CHECK_FALSE(v.rank.has_value());
        CHECK(v.rating == std::optional<std::string>("good"));
    }
    const auto up = svc.update(json::object());
    CHECK(up.body["consumed"] == 4);
}

TEST_CASE("an update of approved variants only has no R entry of its own") {
    Fixture fx;
    FeedbackService svc(fx.config("variantsonly"));
    const auto id = fx.id_of("red", "circle");
    correct(svc, id, "a red circle");
    const auto set = only_set(svc, id);
    REQUIRE(svc.update(json::object()).body["consumed"] == 1);
    json good = json::object();
    for (const auto& v : set["variants"]) good[v["augmentation_id"].get<std::string>()] = "good";
    REQUIRE(svc.rate(set["set_id"], {{"ratings", good}}).status == 200);
    const auto up = svc.update(json::object());
    REQUIRE(up.status == 200);
    CHECK(up.body["consumed"] == 3);
    REQUIRE(up.body["r_row"].size() == 2);
    CHECK(up.body["r_row"][0].is_number());
    CHECK(up.body["r_row"][1].is_null());
    const auto m = svc.metrics().body;
    CHECK(m["forgetting"].size() == 1);
    CHECK(m["forgetting"][0].is_number());
}

TEST_CASE("update: 1 correction plus 10 approved variants at batch size 4 is 3 batches") {
    Fixture fx;
    FeedbackService svc(fx.config("batches"));
    const auto id = fx.id_of("blue", "square");
    correct(svc, id, "a blue square");
    const auto set = only_set(svc, id);
    json good = json::object();
    for (const auto& v : set["variants"]) good[v["augmentation_id"].get<std::string>()] = "good";
    REQUIRE(svc.rate(set["set_id"], {{"ratings", good}}).status == 200);

    const auto before = svc.snapshot()->content_hash();
    const auto up = svc.update(json::object());
    REQUIRE(up.status == 200);
    CHECK(up.body["report"]["new_batches"] == 3);
    CHECK(up.body["consumed"] == 11);
    CHECK(up.body["r_row"].size() == 1);
    CHECK(svc.snapshot()->content_hash() != before);
    CHECK(svc.snapshot()->content_hash() == up.body["report"]["checkpoint_hash"]);

    const auto events = svc.state_copy().event_count();
    const auto noop = svc.update(json::object());
    REQUIRE(noop.status == 200);
    CHECK(noop.body["noop"] == true);
    CHECK(noop.body["report"]["new_batches"] == 0);
    CHECK(svc.state_copy().event_count() == events);

    const auto m = svc.metrics().body;
    CHECK(m["updates"] == 1);
    CHECK(m["R"].size() == 1);
}

TEST_CASE("since_event_id restricts an update to later feedback") {
    Fixture fx;
    auto cfg = fx.config("since");
    cfg.text.n_paraphrase = 0;
    FeedbackService svc(cfg);
    const auto first = correct(svc, fx.id_of("red", "circle"), "a red circle")["event_id"].get<std::string>();
    const auto second = correct(svc, fx.id_of("blue", "circle"), "a blue circle")["event_id"].get<std::string>();
    svc.wait_idle();
    const auto up = svc.update({{"since_event_id", first}});
    REQUIRE(up.status == 200);
    CHECK(up.body["consumed"] == 1);
    const auto st = svc.state_copy();
    CHECK(st.consumed(second));
    CHECK_FALSE(st.consumed(first));
}

TEST_CASE("concurrent updates: exactly one 200 and one 409") {
    Fixture fx;
    auto cfg = fx.config("mutex");
    cfg.update.epochs = 40;
    FeedbackService svc(cfg);
    correct(svc, fx.id_of("blue", "square"), "a blue square");
    svc.wait_idle();
    std::latch start(2);
    std::vector<int> statuses(2);
    std::vector<std::thread> threads;
    for (int t = 0; t < 2; ++t)
        threads.emplace_back([&, t] {
            start.arrive_and_wait();
            statuses[static_cast<std::size_t>(t)] = svc.update(json::object()).status;
        });
    for (auto& th : threads) th.join();
    std::sort(statuses.begin(), statuses.end());
    CHECK(statuses == std::vector<int>{200, 409});
}

TEST_CASE("concurrent feedback gets distinct, log-ordered event ids") {
    Fixture fx;
    auto cfg = fx.config("concurrent");
    cfg.text.n_paraphrase = 0;
    FeedbackService svc(cfg);
    const auto id = fx.shapes.images[0].image_id;
    std::vector<std::vector<std::string>> ids(6);
    std::vector<std::thread> threads;
    for (int t = 0; t < 6; ++t)
        threads.emplace_back([&, t] {
            for (int i = 0; i < 10; ++i)
                ids[static_cast<std::size_t>(t)].push_back(
                    correct(svc, id, "caption " + std::to_string(t) + " " + std::to_string(i))["event_id"].get<std::string>());
        });
    for (auto& th : threads) th.join();
    std::set<std::string> all;
    for (const auto& v : ids) {
        CHECK(std::is_sorted(v.begin(), v.end()));
        all.insert(v.begin(), v.end());
    }
    CHECK(all.size() == 60);
    svc.wait_idle();
    const auto events = read_log(cfg.event_log_path());
    for (std::size_t i = 1; i < events.size(); ++i) CHECK(events[i - 1].event_id < events[i].event_id);
    std::size_t corrections = 0;
    for (const auto& e : events) corrections += e.kind == "caption_correction";
    CHECK(corrections == 60);
}

TEST_CASE("bbox feedback yields image variants with remapped boxes and a cutmix variant") {
    Fixture fx;
    FeedbackService svc(fx.config("bbox"));
    const auto id = fx.id_of("red", "circle");
    const auto other = fx.id_of("blue", "square");
    correct(svc, other, "a blue square");
    svc.wait_idle();
    // A small region so the pasted patch fits beside the destination's box.
    const auto r = svc.feedback({{"image_id", id}, {"kind", "bbox_annotation"},
                                 {"payload", {{"x", 0.3}, {"y", 0.3}, {"w", 0.2}, {"h", 0.2}, {"label", "circle"}}}});
    REQUIRE(r.status == 200);
    const auto res = svc.augmentations(id, 10000);
    REQUIRE(res.body["sets"].size() == 1);
    const auto& set = res.body["sets"][0];
    CHECK(set["kind"] == "image");
    REQUIRE(set["variants"].size() == 3);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto& v = set["variants"][i];
        CHECK(v["caption"].is_null());
        for (const auto& box : v["image"]["bboxes"]) CHECK(bbox_from_json(box).inside(v["image"]["width"], v["image"]["height"]));
    }
    const auto& cm = set["variants"][2];
    CHECK(cm["method_tag"] == "cutmix");
    CHECK(cm["caption"] == "a blue square . there is a circle .");

    // Image variants pair with the latest correction of their image.
    correct(svc, id, "a red circle");
    svc.wait_idle();
    json good = json::object();
    for (const auto& v : set["variants"]) good[v["augmentation_id"].get<std::string>()] = "good";
    REQUIRE(svc.rate(set["set_id"], {{"ratings", good}}).status == 200);
    const auto pending = svc.state_copy().pending_ids(2);
    const auto up = svc.update(json::object());
    REQUIRE(up.status == 200);
    CHECK(up.body["consumed"].get<std::size_t>() == pending.size());
}

TEST_CASE("restart replays the log, reloads the latest checkpoint and resumes augmentation") {
    Fixture fx;
    const auto cfg = fx.config("restart");
    std::string hash, model_hash, ev;
    {
        FeedbackService svc(cfg);
        correct(svc, fx.id_of("blue", "square"), "a blue square");
        only_set(svc, fx.id_of("blue", "square"));
        REQUIRE(svc.update(json::object()).status == 200);
        hash = svc.state_hash();
        model_hash = svc.snapshot()->content_hash();
    }
    {
        FeedbackService svc(cfg);
        CHECK(svc.state_hash() == hash);
        CHECK(svc.snapshot()->content_hash() == model_hash);
        CHECK(svc.metrics().body["updates"] == 1);
    }
    // A correction logged without its augmentation set is augmented after restart.
    {
        EventLog log(cfg.event_log_path());
        const auto last = replay_log(cfg.event_log_path()).last_seq();
        log.append(make_event(last + 1, fx.id_of("red", "circle"), "caption_correction", {{"text", "a red circle"}}));
        ev = event_id_for(last + 1);
    }
    FeedbackService svc(cfg);
    svc.wait_idle();
    const auto st = svc.state_copy();
    CHECK(st.find_set("set-" + ev) != nullptr);
    CHECK(st.unaugmented_sources().empty());
}

TEST_CASE("HTTP routes") {
    Fixture fx;
    FeedbackService svc(fx.config("http"));
    httplib::Server server;
    register_routes(server, svc);
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client client("127.0.0.1", port);
    const auto id = fx.id_of("red", "circle");

    auto res = client.Post("/predict", json({{"image_id", id}}).dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(json::parse(res->body)["image_id"] == id);

    res = client.Post("/predict", "", "application/octet-stream");
    CHECK(res->status == 400);
    const auto& img = fx.shapes.images[2];
    const auto ppm = encode_ppm(img.width, img.height, *img.data);
    const std::string ppm_str(ppm.begin(), ppm.end());
    res = client.Post("/predict", ppm_str, "image/x-portable-pixmap");
    CHECK(res->status == 200);
    httplib::MultipartFormDataItems items = {{"image", ppm_str, "x.ppm", "image/x-portable-pixmap"}};
    res = client.Post("/predict", items);
    CHECK(res->status == 200);

    res = client.Post("/feedback", "{bad json", "application/json");
    CHECK(res->status == 400);
    res = client.Post("/feedback",
                      json({{"image_id", id}, {"kind", "caption_correction"}, {"payload", {{"text", "a red circle"}}}}).dump(),
                      "application/json");
    CHECK(res->status == 200);
    res = client.Get("/augmentations?image_id=" + id + "&wait_ms=10000");
    REQUIRE(res->status == 200);
    const auto sets = json::parse(res->body)["sets"];
    REQUIRE(sets.size() == 1);
    res = client.Post("/augmentations/" + sets[0]["set_id"].get<std::string>() + "/ratings",
                      json({{"ranks", {2, 1, 1}}}).dump(), "application/json");
    CHECK(res->status == 422);
    res = client.Post("/augmentations/none/ratings", json({{"ranks", {1}}}).dump(), "application/json");
    CHECK(res->status == 404);
    CHECK(client.Get("/augmentations")->status == 400);
    CHECK(client.Get("/augmentations?image_id=ghost")->status == 404);

    res = client.Post("/update", "{}", "application/json");
    CHECK(res->status == 200);
    CHECK(json::parse(client.Get("/metrics")->body)["updates"] == 1);
    const auto st = json::parse(client.Get("/state")->body);
    CHECK(st["hash"] == svc.state_hash());
    server.stop();
    th.join();
}
