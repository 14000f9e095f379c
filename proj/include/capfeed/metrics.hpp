#pragma once

#include "capfeed/captioner.hpp"

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace capfeed {

using Tokens = std::vector<std::string>;

struct NgramMatch {
    std::size_t matched = 0;  // clipped counts
    std::size_t total = 0;    // n-grams in the hypothesis
};

// Clipped n-gram precision counts of `hypothesis` against `references`.
NgramMatch modified_precision(const Tokens& hypothesis, std::span<const Tokens> references, int n);

// Sentence BLEU with brevity penalty (closest reference length, shorter on
// ties). For n >= 2, a zero match count is smoothed to (0 + 1) / (total + 1).
// An empty hypothesis or zero unigram matches scores 0.
double bleu(const Tokens& hypothesis, std::span<const Tokens> references, int max_n = 4);

// Corpus BLEU: counts and lengths pooled over all pairs, same smoothing.
double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const std::vector<Tokens>> references,
                   int max_n = 4);

// Scorer interface; BLEU is the built-in implementation. Other metrics
// (CIDEr etc.) can be added behind it.
class CaptionMetric {
public:
    virtual ~CaptionMetric() = default;
    virtual std::string name() const = 0;
    virtual double score(std::span<const Tokens> hypotheses, std::span<const std::vector<Tokens>> references) const = 0;
};

class BleuMetric final : public CaptionMetric {
public:
    explicit BleuMetric(int max_n = 4) : max_n_(max_n) {}
    std::string name() const override { return "bleu" + std::to_string(max_n_); }
    double score(std::span<const Tokens> hypotheses, std::span<const std::vector<Tokens>> references) const override {
        return corpus_bleu(hypotheses, references, max_n_);
    }

private:
    int max_n_;
};

struct EvalItem {
    ImageRecord image;
    std::vector<Tokens> references;
};

struct EvalReport {
    double bleu4 = 0;
    double avg_len = 0;
    std::size_t n = 0;

    nlohmann::json to_json() const { return {{"bleu4", bleu4}, {"avg_len", avg_len}, {"n", n}}; }
};

// Greedy generation per image, corpus BLEU-4 and mean caption length.
EvalReport evaluate(const CaptionModel& model, std::span<const EvalItem> eval_set, int max_len = 16);

// One EvalItem per image that has at least one caption.
std::vector<EvalItem> make_eval_set(std::span<const ImageRecord> images, std::span<const CaptionRecord> captions);

}  // namespace capfeed
