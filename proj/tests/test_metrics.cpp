#include "doctest.h"

#include "capfeed/metrics.hpp"
#include "capfeed/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <unordered_map>

using namespace capfeed;

namespace {

Tokens toks(const std::string& s) { return tokenize(s); }

// Independent sentence BLEU: n-grams keyed by their space-joined string.
double oracle_bleu(const Tokens& hyp, const std::vector<Tokens>& refs, int max_n) {
    if (hyp.empty()) return 0.0;
    auto grams = [](const Tokens& t, int n) {
        std::unordered_map<std::string, int> m;
        for (int i = 0; i + n <= static_cast<int>(t.size()); ++i) {
            std::string key;
            for (int j = 0; j < n; ++j) key += t[i + j] + " ";
            ++m[key];
        }
        return m;
    };
    double log_p = 0;
    for (int n = 1; n <= max_n; ++n) {
        auto h = grams(hyp, n);
        int matched = 0, total = 0;
        for (auto& [g, c] : h) {
            int best = 0;
            for (const auto& r : refs) {
                auto rg = grams(r, n);
                if (rg.count(g)) best = std::max(best, rg[g]);
            }
            matched += std::min(c, best);
            total += c;
        }
        if (n == 1 && matched == 0) return 0.0;
        log_p += std::log(matched == 0 ? 1.0 / (total + 1) : static_cast<double>(matched) / total);
    }
    int ref_len = static_cast<int>(refs[0].size());
    const int hl = static_cast<int>(hyp.size());
    for (const auto& r : refs) {
        const int rl = static_cast<int>(r.size());
        if (std::abs(rl - hl) < std::abs(ref_len - hl) || (std::abs(rl - hl) == std::abs(ref_len - hl) && rl < ref_len))
            ref_len = rl;
    }
    const double bp = hl >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / hl);
    return bp * std::exp(log_p / max_n);
}

Tokens random_tokens(std::mt19937_64& rng, int max_len) {
    static const std::vector<std::string> words = {"a", "the", "dog", "cat", "red", "sat", "on", "mat"};
    std::uniform_int_distribution<int> len(0, max_len), w(0, static_cast<int>(words.size()) - 1);
    Tokens t(static_cast<std::size_t>(len(rng)));
    for (auto& x : t) x = words[static_cast<std::size_t>(w(rng))];
    return t;
}

}  // namespace

TEST_CASE("bleu identity and disjoint") {
    const std::vector<Tokens> refs = {toks("a red square on a white table")};
    CHECK(bleu(refs[0], refs) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bleu(toks("green circles everywhere"), refs) == 0.0);
    CHECK(bleu({}, refs) == 0.0);
}

TEST_CASE("bleu golden value with brevity penalty") {
    const std::vector<Tokens> refs = {toks("the cat sat down")};
    // p1 = p2 = p3 = 1; the hypothesis has no 4-grams so p4 = (0+1)/(0+1).
    const double expected = std::exp(1.0 - 4.0 / 3.0);
    CHECK(std::abs(bleu(toks("the cat sat"), refs) - expected) < 1e-9);
}

TEST_CASE("bleu smoothing of higher-order zeros") {
    const std::vector<Tokens> refs = {toks("a b c d e")};
    const auto hyp = toks("a x b y c");
    // p1 = 3/5, p2..p4 have zero matches: 1/5, 1/4, 1/3.
    const double expected = std::exp((std::log(0.6) + std::log(0.2) + std::log(0.25) + std::log(1.0 / 3)) / 4);
    CHECK(bleu(hyp, refs) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("bleu matches independent oracle") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        const auto hyp = random_tokens(rng, 8);
        std::vector<Tokens> refs;
        const int n_refs = 1 + trial % 3;
        for (int r = 0; r < n_refs; ++r) refs.push_back(random_tokens(rng, 8));
        const double got = bleu(hyp, refs);
        CHECK(got == doctest::Approx(oracle_bleu(hyp, refs, 4)).epsilon(1e-12));
        CHECK(got >= 0.0);
        CHECK(got <= 1.0 + 1e-12);
        auto perm = refs;
        std::reverse(perm.begin(), perm.end());
        CHECK(bleu(hyp, perm) == doctest::Approx(got).epsilon(1e-12));
    }
}

TEST_CASE("unigram precision never drops when a matching suffix is appended") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        auto ref = random_tokens(rng, 10);
        if (ref.size() < 2) continue;
        auto hyp = random_tokens(rng, 5);
        const std::vector<Tokens> refs = {ref};
        const auto before = modified_precision(hyp, refs, 1);
        if (before.total == 0) continue;
        // Append tokens from the reference that are not yet used up.
        auto ext = hyp;
        ext.push_back(ref.back());
        const auto after = modified_precision(ext, refs, 1);
        const double p0 = static_cast<double>(before.matched) / before.total;
        const double p1 = static_cast<double>(after.matched) / after.total;
        if (after.matched > before.matched) CHECK(p1 >= p0 - 1e-12);
    }
}

TEST_CASE("bleu argument errors") {
    CHECK_THROWS_AS(bleu(toks("a"), std::vector<Tokens>{}), std::invalid_argument);
}

TEST_CASE("corpus bleu pools counts") {
    const std::vector<Tokens> hyps = {toks("the cat sat"), toks("a dog ran")};
    const std::vector<std::vector<Tokens>> refs = {{toks("the cat sat")}, {toks("a dog ran")}};
    CHECK(corpus_bleu(hyps, refs) == doctest::Approx(1.0));
    const std::vector<std::vector<Tokens>> single = {{toks("the cat sat down")}};
    CHECK(corpus_bleu(std::vector<Tokens>{toks("the cat sat")}, single) == doctest::Approx(std::exp(-1.0 / 3)));
    BleuMetric metric;
    CHECK(metric.name() == "bleu4");
}

TEST_CASE("evaluate reports n and zero bleu for an untrained model") {
    auto data = make_shapes_dataset({"circle"}, {"red", "blue"}, 1, 3, "img", {});
    const auto vocab = build_vocab(data.captions, 1);
    CaptionerConfig cfg;
    cfg.max_len = 3;
    Captioner model(cfg, vocab, 1);
    const auto set = make_eval_set(data.images, data.captions);
    const auto report = evaluate(model, set, 3);
    CHECK(report.n == set.size());
    CHECK(report.bleu4 >= 0.0);
    CHECK(report.bleu4 <= 1.0);
    CHECK(report.avg_len <= 3.0);
}

namespace {

class SilentModel final : public CaptionModel {
public:
    const Vocabulary& vocabulary() const override { return vocab_; }
    Generation generate(const ImageRecord& image, const GenerateOptions&) const override {
        return {make_caption("p", image.image_id, "", Provenance::predicted), {}, 0};
    }
    double train_step(std::span<const Instance>, double) override { return 0; }
    std::unique_ptr<CaptionModel> clone() const override { return std::make_unique<SilentModel>(); }
    std::string content_hash() const override { return "silent"; }
    void save(const std::filesystem::path&) const override {}

private:
    Vocabulary vocab_;
};

}  // namespace

TEST_CASE("evaluate of a model emitting empty captions is zero") {
    auto data = make_shapes_dataset({"square"}, {"red", "green", "blue"}, 1, 4, "img", {});
    SilentModel model;
    const auto set = make_eval_set(data.images, data.captions);
    const auto report = evaluate(model, set);
    CHECK(report.bleu4 == 0.0);
    CHECK(report.avg_len == 0.0);
    CHECK(report.n == 3);
}
