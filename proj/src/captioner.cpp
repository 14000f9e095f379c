#include "capfeed/captioner.hpp"

#include "capfeed/errors.hpp"
#include "capfeed/hash.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

namespace capfeed {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace {

constexpr int kConvLayers = 4;

// Parameter slots. Conv layers occupy [0, 2 * kConvLayers).
enum Slot : std::size_t {
    kInitHW = 2 * kConvLayers,
    kInitHB,
    kInitCW,
    kInitCB,
    kAttFeat,
    kAttState,
    kAttBias,
    kAttScore,
    kEmbed,
    kLstmIn,
    kLstmHidden,
    kLstmBias,
    kOutW,
    kOutB,
    kNumSlots
};

std::size_t conv_w(int layer) { return static_cast<std::size_t>(2 * layer); }
std::size_t conv_b(int layer) { return static_cast<std::size_t>(2 * layer + 1); }

VectorXd sigmoid(const VectorXd& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

VectorXd softmax(const VectorXd& x) {
    const double m = x.maxCoeff();
    VectorXd e = (x.array() - m).exp().matrix();
    return e / e.sum();
}

// 3x3, stride 2, zero-pad 1 patch matrix: (C * 9) x (out * out).
MatrixXd im2col(const MatrixXd& input, int size) {
    const int channels = static_cast<int>(input.rows());
    const int out = size / 2;
    MatrixXd cols = MatrixXd::Zero(channels * 9, out * out);
    for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const int row = c * 9 + ky * 3 + kx;
                for (int oy = 0; oy < out; ++oy) {
                    const int iy = 2 * oy + ky - 1;
                    if (iy < 0 || iy >= size) continue;
                    for (int ox = 0; ox < out; ++ox) {
                        const int ix = 2 * ox + kx - 1;
                        if (ix < 0 || ix >= size) continue;
                        cols(row, oy * out + ox) = input(c, iy * size + ix);
                    }
                }
            }
    return cols;
}

MatrixXd col2im(const MatrixXd& cols, int channels, int size) {
    const int out = size / 2;
    MatrixXd input = MatrixXd::Zero(channels, size * size);
    for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const int row = c * 9 + ky * 3 + kx;
                for (int oy = 0; oy < out; ++oy) {
                    const int iy = 2 * oy + ky - 1;
                    if (iy < 0 || iy >= size) continue;
                    for (int ox = 0; ox < out; ++ox) {
                        const int ix = 2 * ox + kx - 1;
                        if (ix < 0 || ix >= size) continue;
                        input(c, iy * size + ix) += cols(row, oy * out + ox);
                    }
                }
            }
    return input;
}

// Bilinear resample to size x size, channels-first, scaled to [0, 1].
MatrixXd image_tensor(const ImageRecord& image, int size) {
    const auto px = image.pixels();
    const auto& rgb = *px;
    MatrixXd t(3, size * size);
    const double sx = static_cast<double>(image.width) / size;
    const double sy = static_cast<double>(image.height) / size;
    auto at = [&](int x, int y, int c) {
        return static_cast<double>(rgb[(static_cast<std::size_t>(y) * image.width + x) * 3 + c]);
    };
    for (int y = 0; y < size; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < size; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * at(x0, y0, c) + wx * at(x1, y0, c)) +
                                 wy * ((1 - wx) * at(x0, y1, c) + wx * at(x1, y1, c));
                t(c, y * size + x) = v / 255.0;
            }
        }
    }
    return t;
}

// Masks tokens generation must never emit.
void mask_specials(VectorXd& log_probs) {
    const double neg = -std::numeric_limits<double>::infinity();
    log_probs(Vocabulary::kPad) = neg;
    log_probs(Vocabulary::kStart) = neg;
    log_probs(Vocabulary::kUnk) = neg;
}

}  // namespace

json CaptionerConfig::to_json() const {
    return {{"grid_side", grid_side},         {"feature_dim", feature_dim}, {"hidden_dim", hidden_dim},
            {"embed_dim", embed_dim},         {"attention_dim", attention_dim},
            {"conv_channels", conv_channels}, {"momentum", momentum},     {"clip_norm", clip_norm},
            {"attention_reg", attention_reg}, {"beam_size", beam_size},   {"max_len", max_len}};
}

CaptionerConfig CaptionerConfig::from_json(const json& j) {
    CaptionerConfig c;
    c.grid_side = j.value("grid_side", c.grid_side);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.attention_dim = j.value("attention_dim", c.attention_dim);
    c.conv_channels = j.value("conv_channels", c.conv_channels);
    c.momentum = j.value("momentum", c.momentum);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.attention_reg = j.value("attention_reg", c.attention_reg);
    c.beam_size = j.value("beam_size", c.beam_size);
    c.max_len = j.value("max_len", c.max_len);
    return c;
}

FeatureGrid load_feature_grid(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    try {
        const json j = json::parse(in);
        FeatureGrid g;
        g.source_image_id = j.at("image_id").get<std::string>();
        const int a = j.at("positions").get<int>();
        const int d = j.at("channels").get<int>();
        const auto data = j.at("data").get<std::vector<double>>();
        if (a < 1 || d < 1 || data.size() != static_cast<std::size_t>(a) * d)
            throw ShapeError(path.string() + ": feature grid data does not match positions x channels");
        g.vectors.resize(a, d);
        for (int i = 0; i < a; ++i)
            for (int k = 0; k < d; ++k) g.vectors(i, k) = data[static_cast<std::size_t>(i) * d + k];
        if (!g.vectors.allFinite()) throw ShapeError(path.string() + ": non-finite feature value");
        return g;
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void save_feature_grid(const std::filesystem::path& path, const FeatureGrid& grid) {
    std::vector<double> data;
    for (int i = 0; i < grid.positions(); ++i)
        for (int k = 0; k < grid.channels(); ++k) data.push_back(grid.vectors(i, k));
    std::ofstream out(path);
    out << json{{"image_id", grid.source_image_id},
                {"positions", grid.positions()},
                {"channels", grid.channels()},
                {"data", data}}
               .dump();
}

struct Captioner::EncoderCache {
    std::vector<MatrixXd> cols;  // per-layer patch matrices
    std::vector<MatrixXd> outs;  // per-layer post-ReLU outputs (C x P)
    std::vector<int> sizes;      // per-layer input side length
};

Captioner::Captioner(CaptionerConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
    if (config_.grid_side < 1 || config_.feature_dim < 1 || config_.hidden_dim < 1 || config_.embed_dim < 1 ||
        config_.attention_dim < 1)
        throw std::invalid_argument("captioner config: dimensions must be >= 1");
    if (config_.conv_channels.size() != kConvLayers - 1)
        throw std::invalid_argument("captioner config: conv_channels needs 3 entries");
    init_parameters(seed);
}

void Captioner::init_parameters(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int D = config_.feature_dim, H = config_.hidden_dim, E = config_.embed_dim, A = config_.attention_dim;
    const int V = static_cast<int>(vocab_.size());

    params_.assign(kNumSlots, Parameter{});
    auto set = [&](std::size_t slot, std::string name, MatrixXd value) {
        params_[slot].name = std::move(name);
        params_[slot].grad = MatrixXd::Zero(value.rows(), value.cols());
        params_[slot].velocity = MatrixXd::Zero(value.rows(), value.cols());
        params_[slot].value = std::move(value);
    };
    auto glorot = [&](int rows, int cols) {
        std::uniform_real_distribution<double> dist(-1.0, 1.0);
        const double limit = std::sqrt(6.0 / (rows + cols));
        MatrixXd m(rows, cols);
        for (int c = 0; c < cols; ++c)
            for (int r = 0; r < rows; ++r) m(r, c) = dist(rng) * limit;
        return m;
    };
    auto he = [&](int rows, int fan_in) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        MatrixXd m(rows, fan_in);
        for (int c = 0; c < fan_in; ++c)
            for (int r = 0; r < rows; ++r) m(r, c) = dist(rng);
        return m;
    };

    std::vector<int> channels = {3};
    channels.insert(channels.end(), config_.conv_channels.begin(), config_.conv_channels.end());
    channels.push_back(D);
    for (int l = 0; l < kConvLayers; ++l) {
        set(conv_w(l), "conv" + std::to_string(l) + ".weight", he(channels[l + 1], channels[l] * 9));
        set(conv_b(l), "conv" + std::to_string(l) + ".bias", MatrixXd::Zero(channels[l + 1], 1));
    }
    set(kInitHW, "init_h.weight", glorot(H, D));
    set(kInitHB, "init_h.bias", MatrixXd::Zero(H, 1));
    set(kInitCW, "init_c.weight", glorot(H, D));
    set(kInitCB, "init_c.bias", MatrixXd::Zero(H, 1));
    set(kAttFeat, "attention.feature", glorot(A, D));
    set(kAttState, "attention.state", glorot(A, H));
    set(kAttBias, "attention.bias", MatrixXd::Zero(A, 1));
    set(kAttScore, "attention.score", glorot(A, 1));
    {
        std::uniform_real_distribution<double> dist(-0.1, 0.1);
        MatrixXd emb(E, V);
        for (int c = 0; c < V; ++c)
            for (int r = 0; r < E; ++r) emb(r, c) = dist(rng);
        set(kEmbed, "embedding", std::move(emb));
    }
    set(kLstmIn, "lstm.input", glorot(4 * H, E + D));
    set(kLstmHidden, "lstm.hidden", glorot(4 * H, H));
    MatrixXd lstm_bias = MatrixXd::Zero(4 * H, 1);
    lstm_bias.block(H, 0, H, 1).setOnes();  // forget gate
    set(kLstmBias, "lstm.bias", std::move(lstm_bias));
    set(kOutW, "output.weight", glorot(V, H + D));
    set(kOutB, "output.bias", MatrixXd::Zero(V, 1));
}

FeatureGrid Captioner::encode(const ImageRecord& image) const { return encode_cached(image, nullptr); }

FeatureGrid Captioner::encode_cached(const ImageRecord& image, EncoderCache* cache) const {
    if (image.width < 1 || image.height < 1) throw ShapeError("encode: image has no pixels");
    const auto px = image.pixels();
    if (px->size() != static_cast<std::size_t>(image.width) * image.height * 3)
        throw ShapeError("encode: image " + image.image_id + " is not a 3-channel H x W array");
    int size = config_.input_size();
    MatrixXd x = image_tensor(image, size);
    for (int l = 0; l < kConvLayers; ++l) {
        MatrixXd cols = im2col(x, size);
        MatrixXd out = P(conv_w(l)) * cols;
        out.colwise() += P(conv_b(l)).col(0);
        out = out.cwiseMax(0.0);
        if (cache) {
            cache->cols.push_back(std::move(cols));
            cache->sizes.push_back(size);
            cache->outs.push_back(out);
        }
        x = std::move(out);
        size /= 2;
    }
    FeatureGrid grid;
    grid.vectors = x.transpose();
    grid.source_image_id = image.image_id;
    return grid;
}

void Captioner::encoder_backward(const EncoderCache& cache, const MatrixXd& d_features,
                                 std::vector<MatrixXd>& grads) const {
    MatrixXd d_out = d_features.transpose();
    for (int l = kConvLayers - 1; l >= 0; --l) {
        const auto ul = static_cast<std::size_t>(l);
        d_out = d_out.cwiseProduct((cache.outs[ul].array() > 0.0).cast<double>().matrix());
        grads[conv_w(l)] += d_out * cache.cols[ul].transpose();
        grads[conv_b(l)] += d_out.rowwise().sum();
        if (l == 0) break;
        const MatrixXd d_cols = P(conv_w(l)).transpose() * d_out;
        d_out = col2im(d_cols, static_cast<int>(cache.outs[ul - 1].rows()), cache.sizes[ul]);
    }
}

DecoderState Captioner::initial_state(const FeatureGrid& features) const {
    if (features.channels() != config_.feature_dim || features.positions() < 1)
        throw ShapeError("initial_state: feature grid does not match config");
    const VectorXd mean = features.vectors.colwise().mean().transpose();
    DecoderState s;
    s.hidden = (P(kInitHW) * mean + P(kInitHB).col(0)).array().tanh().matrix();
    s.cell = (P(kInitCW) * mean + P(kInitCB).col(0)).array().tanh().matrix();
    s.prev_token_id = Vocabulary::kStart;
    return s;
}

StepOutput Captioner::decode_step(const DecoderState& state, const FeatureGrid& features) const {
    const int H = config_.hidden_dim, E = config_.embed_dim, D = config_.feature_dim;
    if (state.hidden.size() != H || state.cell.size() != H)
        throw ShapeError("decode_step: decoder state size does not match hidden_dim");
    if (features.channels() != D || features.positions() < 1)
        throw ShapeError("decode_step: feature grid does not match config");
    if (state.prev_token_id < 0 || static_cast<std::size_t>(state.prev_token_id) >= vocab_.size())
        throw ShapeError("decode_step: previous token id out of vocabulary range");

    const MatrixXd& F = features.vectors;
    const VectorXd s = P(kAttState) * state.hidden + P(kAttBias).col(0);
    MatrixXd u = F * P(kAttFeat).transpose();
    u.rowwise() += s.transpose();
    const VectorXd scores = u.array().tanh().matrix() * P(kAttScore).col(0);
    const VectorXd alpha = softmax(scores);
    const VectorXd z = F.transpose() * alpha;

    VectorXd x(E + D);
    x << P(kEmbed).col(state.prev_token_id), z;
    const VectorXd gates = P(kLstmIn) * x + P(kLstmHidden) * state.hidden + P(kLstmBias).col(0);
    const VectorXd i = sigmoid(gates.segment(0, H));
    const VectorXd f = sigmoid(gates.segment(H, H));
    const VectorXd o = sigmoid(gates.segment(2 * H, H));
    const VectorXd g = gates.segment(3 * H, H).array().tanh().matrix();

    StepOutput out;
    out.state.cell = f.cwiseProduct(state.cell) + i.cwiseProduct(g);
    out.state.hidden = o.cwiseProduct(out.state.cell.array().tanh().matrix());
    VectorXd hz(H + D);
    hz << out.state.hidden, z;
    out.distribution = softmax(P(kOutW) * hz + P(kOutB).col(0));
    out.attention = alpha;
    out.state.prev_token_id = state.prev_token_id;
    return out;
}

Generation Captioner::generate(const ImageRecord& image, const GenerateOptions& options) const {
    return generate(encode(image), image.image_id, options);
}

Generation Captioner::generate(const FeatureGrid& features, const std::string& image_id,
                               const GenerateOptions& options) const {
    if (options.max_len < 1) throw std::invalid_argument("generate: max_len must be >= 1");
    const int beam_size = options.mode == SearchMode::greedy ? 1 : options.beam_size;
    if (beam_size < 1) throw std::invalid_argument("generate: beam_size must be >= 1");

    struct Hypothesis {
        std::vector<int> tokens;
        std::vector<VectorXd> attention;
        DecoderState state;
        double log_prob = 0;
    };
    std::vector<Hypothesis> alive(1);
    alive[0].state = initial_state(features);
    std::vector<Hypothesis> finished;

    for (int t = 0; t < options.max_len && !alive.empty(); ++t) {
        struct Candidate {
            std::size_t beam;
            int token;
            double score;
        };
        std::vector<Candidate> candidates;
        std::vector<StepOutput> steps;
        steps.reserve(alive.size());
        for (std::size_t b = 0; b < alive.size(); ++b) {
            steps.push_back(decode_step(alive[b].state, features));
            VectorXd lp = steps.back().distribution.array().log().matrix();
            mask_specials(lp);
            for (int v = 0; v < lp.size(); ++v)
                if (std::isfinite(lp(v))) candidates.push_back({b, v, alive[b].log_prob + lp(v)});
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
        const std::size_t slots = static_cast<std::size_t>(beam_size) - finished.size();
        std::vector<Hypothesis> next;
        for (std::size_t k = 0; k < candidates.size() && k < slots; ++k) {
            const auto& c = candidates[k];
            Hypothesis h = alive[c.beam];
            h.log_prob = c.score;
            if (c.token == Vocabulary::kEnd) {
                finished.push_back(std::move(h));
                continue;
            }
            h.tokens.push_back(c.token);
            h.attention.push_back(steps[c.beam].attention);
            h.state = steps[c.beam].state;
            h.state.prev_token_id = c.token;
            next.push_back(std::move(h));
        }
        alive = std::move(next);
        if (finished.size() >= static_cast<std::size_t>(beam_size)) break;
    }
    for (auto& h : alive) finished.push_back(std::move(h));

    const Hypothesis* best = &finished.front();
    for (const auto& h : finished)
        if (h.log_prob > best->log_prob) best = &h;

    Generation gen;
    const auto words = vocab_.decode(best->tokens);
    gen.caption = make_caption(image_id + "#pred", image_id, join_tokens(words), Provenance::predicted);
    gen.attention.weights.resize(static_cast<Eigen::Index>(best->attention.size()), features.positions());
    for (std::size_t r = 0; r < best->attention.size(); ++r)
        gen.attention.weights.row(static_cast<Eigen::Index>(r)) = best->attention[r].transpose();
    gen.log_prob = best->log_prob;
    return gen;
}

double Captioner::run_batch(std::span<const Instance> batch, std::vector<MatrixXd>* grads,
                            double* cross_entropy) const {
    if (batch.empty()) throw std::invalid_argument("train_step: batch must be non-empty");
    const int H = config_.hidden_dim, E = config_.embed_dim, D = config_.feature_dim;

    std::size_t total_tokens = 0;
    for (const auto& inst : batch) total_tokens += std::min(inst.caption.tokens.size(), kMaxCaptionTokens) + 1;
    const double token_scale = 1.0 / static_cast<double>(total_tokens);
    const double reg_scale = config_.attention_reg / static_cast<double>(batch.size());

    struct Step {
        int prev = 0;
        int target = 0;
        VectorXd h_prev, c_prev, tanh_u, alpha, z, x, i, f, o, g, c, tanh_c, h, p;
    };

    double ce_sum = 0;
    double reg_sum = 0;
    for (const auto& inst : batch) {
        EncoderCache cache;
        FeatureGrid grid;
        if (inst.features) {
            grid = *inst.features;
            if (grid.channels() != D || grid.positions() != config_.positions())
                throw ShapeError("train_step: precomputed features do not match config");
        } else {
            grid = encode_cached(inst.image, grads ? &cache : nullptr);
        }
        const MatrixXd& F = grid.vectors;
        const int a = static_cast<int>(F.rows());

        std::vector<int> targets = vocab_.encode(inst.caption.tokens);
        if (targets.size() > kMaxCaptionTokens) targets.resize(kMaxCaptionTokens);
        targets.push_back(Vocabulary::kEnd);

        const VectorXd mean = F.colwise().mean().transpose();
        const VectorXd h0 = (P(kInitHW) * mean + P(kInitHB).col(0)).array().tanh().matrix();
        const VectorXd c0 = (P(kInitCW) * mean + P(kInitCB).col(0)).array().tanh().matrix();
        const MatrixXd feat_proj = F * P(kAttFeat).transpose();  // a x A

        std::vector<Step> steps(targets.size());
        VectorXd h = h0, c = c0;
        int prev = Vocabulary::kStart;
        VectorXd alpha_sum = VectorXd::Zero(a);
        for (std::size_t t = 0; t < targets.size(); ++t) {
            Step& st = steps[t];
            st.prev = prev;
            st.target = targets[t];
            st.h_prev = h;
            st.c_prev = c;
            MatrixXd u = feat_proj;
            u.rowwise() += (P(kAttState) * h + P(kAttBias).col(0)).transpose();
            const MatrixXd tanh_u = u.array().tanh().matrix();
            st.alpha = softmax(tanh_u * P(kAttScore).col(0));
            st.z = F.transpose() * st.alpha;
            st.x.resize(E + D);
            st.x << P(kEmbed).col(prev), st.z;
            const VectorXd gates = P(kLstmIn) * st.x + P(kLstmHidden) * h + P(kLstmBias).col(0);
            st.i = sigmoid(gates.segment(0, H));
            st.f = sigmoid(gates.segment(H, H));
            st.o = sigmoid(gates.segment(2 * H, H));
            st.g = gates.segment(3 * H, H).array().tanh().matrix();
            st.c = st.f.cwiseProduct(c) + st.i.cwiseProduct(st.g);
            st.tanh_c = st.c.array().tanh().matrix();
            st.h = st.o.cwiseProduct(st.tanh_c);
            VectorXd hz(H + D);
            hz << st.h, st.z;
            st.p = softmax(P(kOutW) * hz + P(kOutB).col(0));
            const double pt = st.p(st.target);
            ce_sum += -std::log(std::max(pt, std::numeric_limits<double>::min()));
            alpha_sum += st.alpha;
            if (grads) st.tanh_u = tanh_u.reshaped();  // column-major a x A
            h = st.h;
            c = st.c;
            prev = st.target;
        }
        const VectorXd reg_residual = VectorXd::Ones(a) - alpha_sum;
        reg_sum += reg_residual.squaredNorm();

        if (!grads) continue;
        auto& G = *grads;
        MatrixXd dF = MatrixXd::Zero(a, D);
        MatrixXd d_feat_proj = MatrixXd::Zero(a, config_.attention_dim);
        VectorXd dh_next = VectorXd::Zero(H), dc_next = VectorXd::Zero(H);
        // d(reg)/d(alpha_t) is the same for every step.
        const VectorXd d_alpha_reg = -2.0 * reg_scale * reg_residual;
        for (std::size_t tt = steps.size(); tt-- > 0;) {
            const Step& st = steps[tt];
            VectorXd dlogits = st.p;
            dlogits(st.target) -= 1.0;
            dlogits *= token_scale;
            VectorXd hz(H + D);
            hz << st.h, st.z;
            G[kOutW] += dlogits * hz.transpose();
            G[kOutB] += dlogits;
            const VectorXd dhz = P(kOutW).transpose() * dlogits;
            VectorXd dh = dhz.head(H) + dh_next;
            VectorXd dz = dhz.tail(D);

            const VectorXd dc = dc_next + dh.cwiseProduct(st.o).cwiseProduct(
                                              (1.0 - st.tanh_c.array().square()).matrix());
            VectorXd dgates(4 * H);
            dgates.segment(0, H) = dc.cwiseProduct(st.g).cwiseProduct(st.i.cwiseProduct((1.0 - st.i.array()).matrix()));
            dgates.segment(H, H) =
                dc.cwiseProduct(st.c_prev).cwiseProduct(st.f.cwiseProduct((1.0 - st.f.array()).matrix()));
            dgates.segment(2 * H, H) =
                dh.cwiseProduct(st.tanh_c).cwiseProduct(st.o.cwiseProduct((1.0 - st.o.array()).matrix()));
            dgates.segment(3 * H, H) = dc.cwiseProduct(st.i).cwiseProduct((1.0 - st.g.array().square()).matrix());
            dc_next = dc.cwiseProduct(st.f);

            G[kLstmIn] += dgates * st.x.transpose();
            G[kLstmHidden] += dgates * st.h_prev.transpose();
            G[kLstmBias] += dgates;
            const VectorXd dx = P(kLstmIn).transpose() * dgates;
            G[kEmbed].col(st.prev) += dx.head(E);
            dz += dx.tail(D);
            VectorXd dh_prev = P(kLstmHidden).transpose() * dgates;

            // attention
            const Eigen::Map<const MatrixXd> tanh_u(st.tanh_u.data(), a, config_.attention_dim);
            dF += st.alpha * dz.transpose();
            const VectorXd d_alpha = F * dz + d_alpha_reg;
            const VectorXd d_scores = st.alpha.cwiseProduct((d_alpha.array() - st.alpha.dot(d_alpha)).matrix());
            G[kAttScore] += tanh_u.transpose() * d_scores;
            const MatrixXd du =
                (d_scores * P(kAttScore).col(0).transpose()).cwiseProduct((1.0 - tanh_u.array().square()).matrix());
            d_feat_proj += du;
            const VectorXd ds = du.colwise().sum().transpose();
            G[kAttState] += ds * st.h_prev.transpose();
            G[kAttBias] += ds;
            dh_prev += P(kAttState).transpose() * ds;
            dh_next = dh_prev;
        }
        G[kAttFeat] += d_feat_proj.transpose() * F;
        dF += d_feat_proj * P(kAttFeat);

        const VectorXd dpre_h = dh_next.cwiseProduct((1.0 - h0.array().square()).matrix());
        const VectorXd dpre_c = dc_next.cwiseProduct((1.0 - c0.array().square()).matrix());
        G[kInitHW] += dpre_h * mean.transpose();
        G[kInitHB] += dpre_h;
        G[kInitCW] += dpre_c * mean.transpose();
        G[kInitCB] += dpre_c;
        const VectorXd d_mean = P(kInitHW).transpose() * dpre_h + P(kInitCW).transpose() * dpre_c;
        dF.rowwise() += d_mean.transpose() / static_cast<double>(a);

        if (!inst.features) encoder_backward(cache, dF, G);
    }
    const double ce = ce_sum * token_scale;
    if (cross_entropy) *cross_entropy = ce;
    return ce + reg_scale * reg_sum;
}

double Captioner::compute_gradients(std::span<const Instance> batch) {
    std::vector<MatrixXd> grads;
    grads.reserve(params_.size());
    for (const auto& p : params_) grads.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
    const double obj = run_batch(batch, &grads, nullptr);
    for (std::size_t k = 0; k < params_.size(); ++k) params_[k].grad = std::move(grads[k]);
    return obj;
}

double Captioner::objective(std::span<const Instance> batch) const { return run_batch(batch, nullptr, nullptr); }

double Captioner::train_step(std::span<const Instance> batch, double lr) {
    std::vector<MatrixXd> grads;
    grads.reserve(params_.size());
    for (const auto& p : params_) grads.push_back(MatrixXd::Zero(p.value.rows(), p.value.cols()));
    double ce = 0;
    run_batch(batch, &grads, &ce);
    if (!std::isfinite(ce)) {
        std::ostringstream msg;
        msg << "train_step: non-finite loss " << ce << " at step " << step_ << " (batch of " << batch.size()
            << ", lr " << lr << ")";
        throw NumericError(msg.str());
    }
    double norm_sq = 0;
    for (const auto& g : grads) norm_sq += g.squaredNorm();
    const double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm)) throw NumericError("train_step: non-finite gradient norm at step " + std::to_string(step_));
    const double scale = (config_.clip_norm > 0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        p.grad = grads[k] * scale;
        p.velocity = config_.momentum * p.velocity + p.grad;
        if (lr != 0.0) p.value -= lr * p.velocity;
    }
    ++step_;
    return ce;
}

std::unique_ptr<CaptionModel> Captioner::clone() const { return std::make_unique<Captioner>(*this); }

std::string Captioner::content_hash() const {
    Sha256 h;
    h.update(config_.to_json().dump());
    h.update(std::string_view("\0", 1));
    for (const auto& t : vocab_.tokens()) {
        h.update(t);
        h.update(std::string_view("\n", 1));
    }
    for (const auto& p : params_) {
        h.update(p.name);
        const std::int64_t dims[2] = {p.value.rows(), p.value.cols()};
        h.update(std::as_bytes(std::span(dims)));
        h.update(std::as_bytes(std::span(p.value.data(), static_cast<std::size_t>(p.value.size()))));
    }
    return h.hex_digest();
}

}  // namespace capfeed
