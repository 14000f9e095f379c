#include "capfeed/metrics.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace capfeed {
namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> ngram_counts(const Tokens& tokens, int n) {
    std::map<Ngram, std::size_t> counts;
    const auto un = static_cast<std::size_t>(n);
    if (tokens.size() < un) return counts;
    for (std::size_t i = 0; i + un <= tokens.size(); ++i)
        ++counts[Ngram(tokens.begin() + static_cast<std::ptrdiff_t>(i), tokens.begin() + static_cast<std::ptrdiff_t>(i + un))];
    return counts;
}

std::size_t closest_ref_length(std::size_t hyp_len, std::span<const Tokens> references) {
    std::size_t best = references.front().size();
    for (const auto& r : references) {
        const auto d = [&](std::size_t len) { return len > hyp_len ? len - hyp_len : hyp_len - len; };
        if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
    }
    return best;
}

double combine(const std::vector<NgramMatch>& matches, std::size_t hyp_len, std::size_t ref_len) {
    if (hyp_len == 0 || matches.empty() || matches[0].matched == 0) return 0.0;
    double log_sum = 0;
    for (std::size_t k = 0; k < matches.size(); ++k) {
        double p;
        if (k >= 1 && matches[k].matched == 0)
            p = 1.0 / (static_cast<double>(matches[k].total) + 1.0);
        else
            p = static_cast<double>(matches[k].matched) / static_cast<double>(matches[k].total);
        log_sum += std::log(p);
    }
    const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return bp * std::exp(log_sum / static_cast<double>(matches.size()));
}

}  // namespace

NgramMatch modified_precision(const Tokens& hypothesis, std::span<const Tokens> references, int n) {
    NgramMatch m;
    const auto hyp = ngram_counts(hypothesis, n);
    std::map<Ngram, std::size_t> max_ref;
    for (const auto& r : references)
        for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : hyp) {
        m.total += c;
        const auto it = max_ref.find(g);
        if (it != max_ref.end()) m.matched += std::min(c, it->second);
    }
    return m;
}

double bleu(const Tokens& hypothesis, std::span<const Tokens> references, int max_n) {
    if (references.empty()) throw std::invalid_argument("bleu: references must be non-empty");
    if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
    if (hypothesis.empty()) return 0.0;
    std::vector<NgramMatch> matches;
    for (int n = 1; n <= max_n; ++n) matches.push_back(modified_precision(hypothesis, references, n));
    return combine(matches, hypothesis.size(), closest_ref_length(hypothesis.size(), references));
}

double corpus_bleu(std::span<const Tokens> hypotheses, std::span<const std::vector<Tokens>> references, int max_n) {
    if (hypotheses.size() != references.size())
        throw std::invalid_argument("corpus_bleu: hypotheses and references differ in length");
    if (max_n < 1) throw std::invalid_argument("corpus_bleu: max_n must be >= 1");
    std::vector<NgramMatch> pooled(static_cast<std::size_t>(max_n));
    std::size_t hyp_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        if (references[i].empty()) throw std::invalid_argument("corpus_bleu: references must be non-empty");
        hyp_len += hypotheses[i].size();
        ref_len += closest_ref_length(hypotheses[i].size(), references[i]);
        for (int n = 1; n <= max_n; ++n) {
            const auto m = modified_precision(hypotheses[i], references[i], n);
            pooled[static_cast<std::size_t>(n - 1)].matched += m.matched;
            pooled[static_cast<std::size_t>(n - 1)].total += m.total;
        }
    }
    return combine(pooled, hyp_len, ref_len);
}

EvalReport evaluate(const CaptionModel& model, std::span<const EvalItem> eval_set, int max_len) {
    if (eval_set.empty()) throw std::invalid_argument("evaluate: eval_set must be non-empty");
    std::vector<Tokens> hyps;
    std::vector<std::vector<Tokens>> refs;
    GenerateOptions opt;
    opt.max_len = max_len;
    std::size_t total_len = 0;
    for (const auto& item : eval_set) {
        hyps.push_back(model.generate(item.image, opt).caption.tokens);
        total_len += hyps.back().size();
        refs.push_back(item.references);
    }
    EvalReport r;
    r.n = eval_set.size();
    r.bleu4 = corpus_bleu(hyps, refs, 4);
    r.avg_len = static_cast<double>(total_len) / static_cast<double>(r.n);
    return r;
}

std::vector<EvalItem> make_eval_set(std::span<const ImageRecord> images, std::span<const CaptionRecord> captions) {
    const auto grouped = captions_by_image(captions);
    std::vector<EvalItem> out;
    for (const auto& img : images) {
        const auto it = grouped.find(img.image_id);
        if (it == grouped.end()) continue;
        EvalItem item{img, {}};
        for (const auto& c : it->second) item.references.push_back(c.tokens);
        out.push_back(std::move(item));
    }
    return out;
}

}  // namespace capfeed
