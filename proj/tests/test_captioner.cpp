#include "capfeed/captioner.hpp"
#include "capfeed/errors.hpp"
#include "capfeed/synthetic.hpp"

#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

using namespace capfeed;

namespace {

CaptionerConfig mini_config() {
    CaptionerConfig c;
    c.grid_side = 2;
    c.feature_dim = 8;
    c.hidden_dim = 8;
    c.embed_dim = 8;
    c.attention_dim = 8;
    c.conv_channels = {4, 4, 4};
    return c;
}

Vocabulary mini_vocab() { return Vocabulary({"a", "red", "blue", "circle", "square", "big"}); }

ImageRecord noise_image(const std::string& id, int w, int h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> d(0, 255);
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h * 3);
    for (auto& p : px) p = static_cast<std::uint8_t>(d(rng));
    return make_image(id, w, h, std::move(px));
}

std::vector<Instance> mini_batch() {
    return {
        {noise_image("i0", 32, 32, 1), make_caption("c0", "i0", "a red circle"), nullptr},
        {noise_image("i1", 40, 28, 2), make_caption("c1", "i1", "a big blue square zebra"), nullptr},
    };
}

// Central finite differences over every parameter entry; returns the worst
// relative error |analytic - numeric| / max(|analytic|, |numeric|, floor).
double worst_gradient_error(Captioner& model, const std::vector<Instance>& batch) {
    model.compute_gradients(batch);
    const double eps = 1e-6;
    const double floor = 1e-6;
    double worst = 0;
    for (auto& p : model.parameters()) {
        for (Eigen::Index k = 0; k < p.value.size(); ++k) {
            const double orig = p.value.data()[k];
            p.value.data()[k] = orig + eps;
            const double up = model.objective(batch);
            p.value.data()[k] = orig - eps;
            const double down = model.objective(batch);
            p.value.data()[k] = orig;
            const double numeric = (up - down) / (2 * eps);
            const double analytic = p.grad.data()[k];
            const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("encode produces an a x D grid") {
    CaptionerConfig cfg;
    cfg.grid_side = 4;
    cfg.feature_dim = 32;
    Captioner model(cfg, mini_vocab(), 3);
    const auto img = noise_image("x", 64, 64, 5);
    const auto grid = model.encode(img);
    CHECK(grid.positions() == 16);
    CHECK(grid.channels() == 32);
    CHECK(grid.vectors.allFinite());
    const auto again = model.encode(img);
    CHECK(grid.vectors == again.vectors);
}

TEST_CASE("all-zero image with zero conv biases encodes to zeros") {
    Captioner model(mini_config(), mini_vocab(), 3);
    const auto img = make_image("z", 32, 32, std::vector<std::uint8_t>(32 * 32 * 3, 0));
    CHECK(model.encode(img).vectors.isZero(0.0));
}

TEST_CASE("encode rejects a buffer that is not 3-channel") {
    Captioner model(mini_config(), mini_vocab(), 3);
    ImageRecord img;
    img.image_id = "bad";
    img.width = 4;
    img.height = 4;
    img.data = std::make_shared<const std::vector<std::uint8_t>>(4 * 4 * 4, 0);
    CHECK_THROWS_AS(model.encode(img), ShapeError);
}

TEST_CASE("decode_step returns normalized distributions") {
    Captioner model(mini_config(), mini_vocab(), 9);
    const auto grid = model.encode(noise_image("x", 32, 32, 4));
    const auto state = model.initial_state(grid);
    const auto out = model.decode_step(state, grid);
    CHECK(out.distribution.size() == static_cast<Eigen::Index>(model.vocabulary().size()));
    CHECK(std::abs(out.distribution.sum() - 1.0) < 1e-6);
    CHECK(out.distribution.minCoeff() > 0.0);
    CHECK(out.distribution.maxCoeff() < 1.0);
    CHECK(std::abs(out.attention.sum() - 1.0) < 1e-6);

    SUBCASE("zero logits give a uniform distribution") {
        for (auto& p : model.parameters())
            if (p.name.rfind("output.", 0) == 0) p.value.setZero();
        const auto uni = model.decode_step(state, grid);
        const double expected = 1.0 / static_cast<double>(model.vocabulary().size());
        for (Eigen::Index v = 0; v < uni.distribution.size(); ++v) CHECK(uni.distribution(v) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("attention over a single position is exactly one") {
    auto cfg = mini_config();
    cfg.grid_side = 1;
    Captioner model(cfg, mini_vocab(), 2);
    FeatureGrid grid;
    grid.vectors = Eigen::MatrixXd::Random(1, cfg.feature_dim);
    const auto out = model.decode_step(model.initial_state(grid), grid);
    REQUIRE(out.attention.size() == 1);
    CHECK(out.attention(0) == 1.0);
}

TEST_CASE("decode_step rejects mismatched dimensions") {
    Captioner model(mini_config(), mini_vocab(), 2);
    FeatureGrid grid;
    grid.vectors = Eigen::MatrixXd::Random(4, 8);
    DecoderState s = model.initial_state(grid);
    s.hidden.resize(3);
    CHECK_THROWS_AS(model.decode_step(s, grid), ShapeError);
    FeatureGrid wrong;
    wrong.vectors = Eigen::MatrixXd::Random(4, 5);
    CHECK_THROWS_AS(model.decode_step(model.initial_state(grid), wrong), ShapeError);
}

TEST_CASE("attention rows sum to one over random inputs") {
    Captioner model(mini_config(), mini_vocab(), 11);
    std::mt19937_64 rng(17);
    std::normal_distribution<double> d(0, 3);
    for (int trial = 0; trial < 1000; ++trial) {
        FeatureGrid grid;
        grid.vectors.resize(4, 8);
        for (Eigen::Index k = 0; k < grid.vectors.size(); ++k) grid.vectors.data()[k] = d(rng);
        DecoderState s = model.initial_state(grid);
        for (Eigen::Index k = 0; k < s.hidden.size(); ++k) s.hidden(k) = std::tanh(d(rng));
        s.prev_token_id = static_cast<int>(rng() % model.vocabulary().size());
        const auto out = model.decode_step(s, grid);
        REQUIRE(std::abs(out.attention.sum() - 1.0) < 1e-5);
        REQUIRE(out.attention.minCoeff() >= 0.0);
    }
}

TEST_CASE("analytic gradients match central differences") {
    Captioner model(mini_config(), mini_vocab(), 21);
    REQUIRE(model.vocabulary().size() == 10);
    const auto batch = mini_batch();
    const double worst = worst_gradient_error(model, batch);
    MESSAGE("worst relative gradient error: " << worst);
    CHECK(worst <= 1e-3);

    SUBCASE("with the attention penalty enabled") {
        auto cfg = mini_config();
        cfg.attention_reg = 0.7;
        Captioner reg(cfg, mini_vocab(), 21);
        CHECK(worst_gradient_error(reg, batch) <= 1e-3);
    }
}

TEST_CASE("generation contracts") {
    Captioner model(mini_config(), mini_vocab(), 5);
    const auto img = noise_image("g", 32, 32, 8);

    SUBCASE("max_len bounds the caption") {
        GenerateOptions opt;
        opt.max_len = 1;
        const auto gen = model.generate(img, opt);
        CHECK(gen.caption.tokens.size() <= 1);
        CHECK(gen.attention.weights.rows() == static_cast<Eigen::Index>(gen.caption.tokens.size()));
    }
    SUBCASE("beam of one equals greedy") {
        GenerateOptions greedy;
        greedy.max_len = 8;
        GenerateOptions beam = greedy;
        beam.mode = SearchMode::beam;
        beam.beam_size = 1;
        CHECK(model.generate(img, greedy).caption.tokens == model.generate(img, beam).caption.tokens);
    }
    SUBCASE("beam_size below one is rejected") {
        GenerateOptions opt;
        opt.mode = SearchMode::beam;
        opt.beam_size = 0;
        CHECK_THROWS_AS(model.generate(img, opt), std::invalid_argument);
    }
    SUBCASE("output never contains special tokens") {
        GenerateOptions opt;
        opt.mode = SearchMode::beam;
        opt.max_len = 10;
        const auto gen = model.generate(img, opt);
        CHECK(gen.caption.provenance == Provenance::predicted);
        for (const auto& t : gen.caption.tokens) {
            CHECK(t != "<pad>");
            CHECK(t != "<start>");
            CHECK(t != "<unk>");
            CHECK(t != "<end>");
        }
        CHECK(gen.caption.tokens == tokenize(gen.caption.text));
    }
}

TEST_CASE("train_step loss of uniform outputs is ln|V|") {
    Captioner model(mini_config(), mini_vocab(), 5);
    for (auto& p : model.parameters())
        if (p.name.rfind("output.", 0) == 0) p.value.setZero();
    const auto batch = mini_batch();
    const double loss = model.train_step(batch, 0.0);
    CHECK(std::abs(loss - std::log(10.0)) < 1e-5);
}

TEST_CASE("lr = 0 leaves the checkpoint hash unchanged") {
    Captioner model(mini_config(), mini_vocab(), 5);
    const auto before = model.content_hash();
    model.train_step(mini_batch(), 0.0);
    CHECK(model.content_hash() == before);
    model.train_step(mini_batch(), 0.01);
    CHECK(model.content_hash() != before);
}

TEST_CASE("empty batch is an argument error") {
    Captioner model(mini_config(), mini_vocab(), 5);
    CHECK_THROWS_AS(model.train_step({}, 0.1), std::invalid_argument);
}

TEST_CASE("non-finite loss is a numeric error") {
    Captioner model(mini_config(), mini_vocab(), 5);
    model.parameters()[0].value(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(model.train_step(mini_batch(), 0.1), NumericError);
}

TEST_CASE("fixed seed gives an identical loss trajectory") {
    auto run = [] {
        Captioner model(mini_config(), mini_vocab(), 42);
        std::vector<double> losses;
        for (int i = 0; i < 5; ++i) losses.push_back(model.train_step(mini_batch(), 0.05));
        return losses;
    };
    CHECK(run() == run());
}

TEST_CASE("checkpoint round trip preserves hash and generation") {
    Captioner model(mini_config(), mini_vocab(), 5);
    for (int i = 0; i < 3; ++i) model.train_step(mini_batch(), 0.05);
    const auto path = std::filesystem::temp_directory_path() / "capfeed_ckpt_test.bin";
    model.save(path);
    const auto loaded = Captioner::load(path);
    CHECK(loaded.content_hash() == model.content_hash());
    CHECK(loaded.step() == model.step());
    CHECK(loaded.to_bytes() == model.to_bytes());
    const auto img = noise_image("r", 32, 32, 3);
    GenerateOptions opt;
    opt.max_len = 6;
    CHECK(loaded.generate(img, opt).caption.tokens == model.generate(img, opt).caption.tokens);
    std::filesystem::remove(path);

    SUBCASE("corrupted payload is rejected") {
        auto bytes = model.to_bytes();
        bytes.back() ^= 0x5A;
        CHECK_THROWS_AS(Captioner::from_bytes(bytes), ParseError);
    }
}

TEST_CASE("precomputed feature grids bypass the encoder") {
    auto cfg = mini_config();
    Captioner model(cfg, mini_vocab(), 5);
    auto grid = std::make_shared<FeatureGrid>(model.encode(noise_image("f", 32, 32, 1)));
    grid->source_image_id = "f";
    const auto path = std::filesystem::temp_directory_path() / "capfeed_grid_test.json";
    save_feature_grid(path, *grid);
    const auto loaded = load_feature_grid(path);
    CHECK((loaded.vectors - grid->vectors).cwiseAbs().maxCoeff() < 1e-12);
    std::filesystem::remove(path);

    std::vector<Instance> batch = {{ImageRecord{}, make_caption("c", "f", "a red circle"), grid}};
    CHECK(std::isfinite(model.train_step(batch, 0.05)));
}
