#include "doctest.h"

#include "capfeed/errors.hpp"
#include "capfeed/text_augment.hpp"

#include <random>
#include <set>

using namespace capfeed;
using nlohmann::json;

namespace {

SynonymLexicon animals() {
    return SynonymLexicon::from_json({{"dog", {"hound", "puppy", "dog"}},
                                      {"runs", {"sprints", "jogs"}},
                                      {"park", {"garden", "lawn"}},
                                      {"big", {"large", "huge"}},
                                      {"the", {"this"}}});
}

int diff_positions(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    REQUIRE(a.size() == b.size());
    int d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
}

void check_set_properties(const CaptionRecord& original, const std::vector<CaptionRecord>& out) {
    std::set<std::string> keys;
    for (const auto& c : out) {
        CHECK(normalized_key(c.text) != normalized_key(original.text));
        CHECK(keys.insert(normalized_key(c.text)).second);
        CHECK(c.provenance == Provenance::augmented);
        CHECK(c.parent_id == original.caption_id);
        CHECK(c.method_tag.has_value());
        CHECK(c.image_id == original.image_id);
    }
}

}  // namespace

TEST_CASE("lexicon drops self synonyms") {
    const auto lex = animals();
    CHECK(*lex.synonyms("dog") == std::vector<std::string>{"hound", "puppy"});
    CHECK(lex.synonyms("cat") == nullptr);
    CHECK(stop_words().size() == 25);
}

TEST_CASE("synonym_substitute with nothing substitutable") {
    const auto c = make_caption("c", "i", "a cat sleeps");
    CHECK(synonym_substitute(c, 0.1, 3, animals(), 1).empty());
    // "the" has a lexicon entry but is a stop word.
    CHECK(synonym_substitute(make_caption("c", "i", "the cat"), 0.5, 3, animals(), 1).empty());
}

TEST_CASE("10-token caption at rate 0.1 changes exactly one position") {
    const auto c = make_caption("c", "i", "the big dog runs in the park with a red ball");
    REQUIRE(c.tokens.size() == 11);
    const auto ten = make_caption("c10", "i", "the big dog runs in the park with red ball");
    REQUIRE(ten.tokens.size() == 10);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto out = synonym_substitute(ten, 0.1, 3, animals(), seed);
        CHECK(out.size() == 3);
        for (const auto& o : out) {
            CHECK(diff_positions(o.tokens, ten.tokens) == 1);
            CHECK(o.method_tag == "synonym");
        }
        check_set_properties(ten, out);
    }
}

TEST_CASE("substitution count follows floor(rate * len)") {
    const auto c = make_caption("c", "i", "big dog runs park big dog runs park big dog");
    REQUIRE(c.tokens.size() == 10);
    for (std::uint64_t seed = 0; seed < 10; ++seed)
        for (const auto& o : synonym_substitute(c, 0.35, 3, animals(), seed)) CHECK(diff_positions(o.tokens, c.tokens) == 3);
    // k is capped by the number of substitutable tokens.
    const auto short_c = make_caption("s", "i", "a dog and a cat and a bird");
    for (const auto& o : synonym_substitute(short_c, 1.0, 2, animals(), 4)) CHECK(diff_positions(o.tokens, short_c.tokens) == 1);
}

TEST_CASE("synonym_substitute is deterministic under seed") {
    const auto c = make_caption("c", "i", "a big dog runs in the park");
    const auto a = synonym_substitute(c, 0.3, 3, animals(), 42);
    const auto b = synonym_substitute(c, 0.3, 3, animals(), 42);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].text == b[i].text);
    CHECK_THROWS_AS(synonym_substitute(c, 0.0, 3, animals(), 1), std::invalid_argument);
    CHECK_THROWS_AS(synonym_substitute(c, 0.1, 0, animals(), 1), std::invalid_argument);
}

TEST_CASE("synonym output count is bounded by the distinct variants") {
    // One substitutable token with two synonyms: at most two distinct outputs.
    const auto c = make_caption("c", "i", "a dog");
    const auto out = synonym_substitute(c, 0.1, 3, animals(), 9);
    CHECK(out.size() == 2);
    check_set_properties(c, out);
}

TEST_CASE("back_translate through the stub table") {
    const auto c = make_caption("c", "i", "a dog runs");
    StubTextBackend stub(json{{"a dog runs", "a dog is running"}});
    const auto out = back_translate(c, {"ar"}, stub);
    REQUIRE(out.size() == 1);
    CHECK(out[0].text == "a dog is running");
    CHECK(out[0].method_tag == "backtranslate:ar");

    StubTextBackend identity;
    CHECK(back_translate(c, {"ar", "es"}, identity).empty());

    StubTextBackend per_pivot(json{{"ar:a dog runs", "a dog is running"}, {"es:a dog runs", "the dog is running"}});
    CHECK(back_translate(c, {"ar", "es"}, per_pivot).size() == 2);

    StubTextBackend same(json{{"a dog runs", "A dog is running."}});
    CHECK(back_translate(c, {"ar", "es"}, same).size() == 1);

    StubTextBackend failing(json{{"ar:a dog runs", nullptr}, {"es:a dog runs", "one dog runs"}});
    const auto partial = back_translate(c, {"ar", "es"}, failing);
    REQUIRE(partial.size() == 1);
    CHECK(partial[0].method_tag == "backtranslate:es");

    CHECK_THROWS_AS(back_translate(c, {}, identity), std::invalid_argument);
}

TEST_CASE("paraphrase through the stub table") {
    const auto c = make_caption("c", "i", "a dog runs");
    StubTextBackend echo;
    CHECK(paraphrase(c, 5, echo).empty());
    StubTextBackend five(json{{"paraphrase:a dog runs", {"p one", "p two", "p three", "p four", "p five", "p six"}}});
    const auto out = paraphrase(c, 5, five);
    CHECK(out.size() == 5);
    check_set_properties(c, out);
    StubTextBackend broken(json{{"paraphrase:a dog runs", nullptr}});
    CHECK(paraphrase(c, 5, broken).empty());
    CHECK_THROWS_AS(paraphrase(c, 0, echo), std::invalid_argument);
}

TEST_CASE("augment_caption with injective stubs yields 3 + 2 + 5") {
    const auto c = make_caption("c", "i", "a big dog runs in the park");
    StubTextBackend stub(json{{"ar:a big dog runs in the park", "a large dog is running in a park"},
                              {"es:a big dog runs in the park", "a big dog jogs around the park"},
                              {"paraphrase:a big dog runs in the park",
                               {"one dog running", "a dog sprinting outside", "a huge hound", "dog in a park", "a canine runs"}}});
    TextAugmentConfig cfg;
    cfg.seed = 3;
    const auto set = augment_caption(c, cfg, animals(), stub);
    CHECK(set.variants.size() == 10);
    check_set_properties(c, set.variants);
    // Method order: synonym, back-translation, paraphrase.
    CHECK(set.variants[0].method_tag == "synonym");
    CHECK(set.variants[3].method_tag == "backtranslate:ar");
    CHECK(set.variants[4].method_tag == "backtranslate:es");
    CHECK(set.variants[5].method_tag == "paraphrase");
}

TEST_CASE("augment_caption dedups across methods and respects fan-out bound") {
    const auto c = make_caption("c", "i", "a big dog runs in the park");
    StubTextBackend echo;
    TextAugmentConfig none;
    none.n_synonym = 0;
    CHECK(augment_caption(c, none, animals(), echo).variants.empty());

    std::mt19937_64 rng(17);
    const std::vector<std::string> pool = {"a large dog runs in the park", "a big hound runs in the park", "x y", "x  Y",
                                           "a big dog runs in the park", "A BIG DOG RUNS IN THE PARK!"};
    for (int trial = 0; trial < 50; ++trial) {
        json table = json::object();
        table["ar:" + c.text] = pool[rng() % pool.size()];
        table["es:" + c.text] = pool[rng() % pool.size()];
        json para = json::array();
        for (int i = 0; i < 5; ++i) para.push_back(pool[rng() % pool.size()]);
        table["paraphrase:" + c.text] = para;
        StubTextBackend stub(table);
        TextAugmentConfig cfg;
        cfg.seed = static_cast<std::uint64_t>(trial);
        const auto set = augment_caption(c, cfg, animals(), stub);
        CHECK(set.variants.size() <= 10);
        check_set_properties(c, set.variants);
        const auto again = augment_caption(c, cfg, animals(), stub);
        REQUIRE(again.variants.size() == set.variants.size());
        for (std::size_t i = 0; i < set.variants.size(); ++i) CHECK(again.variants[i].text == set.variants[i].text);
    }
}

TEST_CASE("http backend reports unreachable service as backend error") {
    HttpTextBackend backend("http://127.0.0.1:9", std::chrono::seconds(1));
    CHECK_THROWS_AS(backend.translate("a dog", "en", "es"), BackendError);
    const auto c = make_caption("c", "i", "a dog runs");
    CHECK(back_translate(c, {"es"}, backend).empty());
}
