#pragma once

#include "capfeed/dataset.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace capfeed {

// Translation and paraphrase provider. Implementations throw BackendError
// when they cannot answer; they must be safe to call from several threads.
class TextBackend {
public:
    virtual ~TextBackend() = default;
    virtual std::string translate(const std::string& text, const std::string& src_lang,
                                  const std::string& dst_lang) = 0;
    virtual std::vector<std::string> paraphrase(const std::string& text, int n) = 0;
};

// Deterministic table-driven backend for offline runs and tests.
//
// The table maps an input string to an output string or list of strings.
// Back-translation looks up "<pivot>:<text>" then "<text>"; paraphrasing
// looks up "paraphrase:<text>" then "<text>" and returns the first n entries.
// A missing entry echoes the input; a null entry raises BackendError.
class StubTextBackend final : public TextBackend {
public:
    StubTextBackend() = default;
    explicit StubTextBackend(nlohmann::json table);
    static StubTextBackend from_file(const std::filesystem::path& path);

    std::string translate(const std::string& text, const std::string& src_lang, const std::string& dst_lang) override;
    std::vector<std::string> paraphrase(const std::string& text, int n) override;

private:
    const nlohmann::json* lookup(const std::string& primary, const std::string& fallback) const;

    nlohmann::json table_ = nlohmann::json::object();
};

// Model-backed backend over HTTP. Translation speaks the LibreTranslate
// protocol (an Argos Translate front end): POST /translate
// {"q","source","target","format"} -> {"translatedText"}. Paraphrasing posts
// {"text","n"} to /paraphrase and expects {"paraphrases": [...]}.
class HttpTextBackend final : public TextBackend {
public:
    explicit HttpTextBackend(std::string base_url, std::chrono::seconds timeout = std::chrono::seconds(30));

    std::string translate(const std::string& text, const std::string& src_lang, const std::string& dst_lang) override;
    std::vector<std::string> paraphrase(const std::string& text, int n) override;

private:
    nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

    std::string base_url_;
    std::chrono::seconds timeout_;
};

class SynonymLexicon {
public:
    SynonymLexicon() = default;
    // JSON object: token -> [synonyms]. Self-synonyms and duplicates are dropped.
    static SynonymLexicon from_json(const nlohmann::json& j);
    static SynonymLexicon from_file(const std::filesystem::path& path);

    void add(const std::string& token, const std::vector<std::string>& synonyms);
    const std::vector<std::string>* synonyms(const std::string& token) const;
    std::size_t size() const { return entries_.size(); }

private:
    std::map<std::string, std::vector<std::string>, std::less<>> entries_;
};

// The fixed 25-word list of tokens that are never substituted.
const std::vector<std::string>& stop_words();
bool is_stop_word(const std::string& token);

// Dedup key: case-folded, punctuation-stripped token sequence.
std::string normalized_key(const std::string& text);

std::vector<CaptionRecord> synonym_substitute(const CaptionRecord& caption, double rate, int n_out,
                                              const SynonymLexicon& lexicon, std::uint64_t seed);
std::vector<CaptionRecord> back_translate(const CaptionRecord& caption, const std::vector<std::string>& pivots,
                                          TextBackend& backend);
std::vector<CaptionRecord> paraphrase(const CaptionRecord& caption, int n, TextBackend& backend);

struct TextAugmentConfig {
    double synonym_rate = 0.1;
    int n_synonym = 3;
    std::vector<std::string> pivots = {"ar", "es"};
    int n_paraphrase = 5;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static TextAugmentConfig from_json(const nlohmann::json& j);
};

struct AugmentationSet {
    CaptionRecord original;
    std::vector<CaptionRecord> variants;
};

// Synonym, back-translation and paraphrase variants, deduplicated globally
// against the input and each other, in that method order.
AugmentationSet augment_caption(const CaptionRecord& caption, const TextAugmentConfig& config,
                                const SynonymLexicon& lexicon, TextBackend& backend);

}  // namespace capfeed
