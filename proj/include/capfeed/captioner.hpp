#pragma once

#include "capfeed/dataset.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace capfeed {

// a x D grid of encoder features, one row per spatial position.
struct FeatureGrid {
    Eigen::MatrixXd vectors;
    std::string source_image_id;

    int positions() const { return static_cast<int>(vectors.rows()); }
    int channels() const { return static_cast<int>(vectors.cols()); }
};

// Precomputed grids on disk: {"image_id", "positions", "channels", "data": [row-major]}.
FeatureGrid load_feature_grid(const std::filesystem::path& path);
void save_feature_grid(const std::filesystem::path& path, const FeatureGrid& grid);

struct DecoderState {
    Eigen::VectorXd hidden;
    Eigen::VectorXd cell;
    int prev_token_id = Vocabulary::kStart;
};

// One row of attention weights per emitted token.
struct AttentionTrace {
    Eigen::MatrixXd weights;
};

struct CaptionerConfig {
    int grid_side = 4;  // a = grid_side^2 positions
    int feature_dim = 32;
    int hidden_dim = 64;
    int embed_dim = 32;
    int attention_dim = 32;
    std::vector<int> conv_channels = {8, 16, 16};  // last conv layer outputs feature_dim
    double momentum = 0.9;
    double clip_norm = 5.0;
    double attention_reg = 0.0;  // doubly-stochastic attention penalty weight
    int beam_size = 3;
    int max_len = 16;

    int positions() const { return grid_side * grid_side; }
    // Four stride-2 conv layers reduce the input to grid_side.
    int input_size() const { return grid_side * 16; }

    nlohmann::json to_json() const;
    static CaptionerConfig from_json(const nlohmann::json& j);
    bool operator==(const CaptionerConfig&) const = default;
};

struct Instance {
    ImageRecord image;
    CaptionRecord caption;
    // Bypasses the conv stack when set.
    std::shared_ptr<const FeatureGrid> features;
};

enum class SearchMode { greedy, beam };

struct GenerateOptions {
    SearchMode mode = SearchMode::greedy;
    int beam_size = 3;
    int max_len = 16;
};

struct Generation {
    CaptionRecord caption;
    AttentionTrace attention;
    double log_prob = 0;
};

struct StepOutput {
    Eigen::VectorXd distribution;
    DecoderState state;
    Eigen::VectorXd attention;
};

// Interface shared by caption models so the trainer and the service do not
// depend on one architecture.
class CaptionModel {
public:
    virtual ~CaptionModel() = default;
    virtual const Vocabulary& vocabulary() const = 0;
    virtual Generation generate(const ImageRecord& image, const GenerateOptions& options) const = 0;
    virtual double train_step(std::span<const Instance> batch, double lr) = 0;
    virtual std::unique_ptr<CaptionModel> clone() const = 0;
    virtual std::string content_hash() const = 0;
    virtual void save(const std::filesystem::path& path) const = 0;
};

struct Parameter {
    std::string name;
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    Eigen::MatrixXd velocity;
};

// Conv encoder + additive soft attention + LSTM decoder trained with
// teacher-forced cross-entropy and momentum SGD.
class Captioner final : public CaptionModel {
public:
    Captioner(CaptionerConfig config, Vocabulary vocab, std::uint64_t seed);

    static Captioner load(const std::filesystem::path& path);
    static Captioner from_bytes(std::span<const std::uint8_t> bytes);
    std::vector<std::uint8_t> to_bytes() const;
    void save(const std::filesystem::path& path) const override;

    const CaptionerConfig& config() const { return config_; }
    const Vocabulary& vocabulary() const override { return vocab_; }
    std::uint64_t step() const { return step_; }

    FeatureGrid encode(const ImageRecord& image) const;
    DecoderState initial_state(const FeatureGrid& features) const;
    StepOutput decode_step(const DecoderState& state, const FeatureGrid& features) const;

    Generation generate(const ImageRecord& image, const GenerateOptions& options) const override;
    Generation generate(const FeatureGrid& features, const std::string& image_id,
                        const GenerateOptions& options) const;

    // Mean per-token cross-entropy over the batch before the update.
    double train_step(std::span<const Instance> batch, double lr) override;

    // Fills Parameter::grad with the gradient of the training objective and
    // returns the objective (mean token cross-entropy plus the attention
    // penalty, if enabled). Parameters are not modified.
    double compute_gradients(std::span<const Instance> batch);
    double objective(std::span<const Instance> batch) const;

    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }

    std::unique_ptr<CaptionModel> clone() const override;
    std::string content_hash() const override;

private:
    struct EncoderCache;

    void init_parameters(std::uint64_t seed);
    const Eigen::MatrixXd& P(std::size_t index) const { return params_[index].value; }

    FeatureGrid encode_cached(const ImageRecord& image, EncoderCache* cache) const;
    void encoder_backward(const EncoderCache& cache, const Eigen::MatrixXd& d_features,
                          std::vector<Eigen::MatrixXd>& grads) const;
    // Objective over the batch; accumulates parameter gradients when grads != nullptr.
    double run_batch(std::span<const Instance> batch, std::vector<Eigen::MatrixXd>* grads,
                     double* cross_entropy) const;

    CaptionerConfig config_;
    Vocabulary vocab_;
    std::vector<Parameter> params_;
    std::uint64_t step_ = 0;
};

}  // namespace capfeed
