#include "capfeed/text_augment.hpp"

#include "capfeed/errors.hpp"

#include "httplib.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace capfeed {

using nlohmann::json;

namespace {

constexpr std::string_view kPivotOpen = "\x01";
constexpr std::string_view kPivotClose = "\x02";

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

// Keeps candidates that differ from the input and from every kept text.
class Deduplicator {
public:
    explicit Deduplicator(const std::string& original) { seen_.insert(normalized_key(original)); }
    bool accept(const std::string& text) {
        const auto key = normalized_key(text);
        if (key.empty()) return false;
        return seen_.insert(key).second;
    }

private:
    std::set<std::string> seen_;
};

CaptionRecord variant_of(const CaptionRecord& parent, const std::string& suffix, const std::string& text,
                         const std::string& method) {
    return make_caption(parent.caption_id + "#" + suffix, parent.image_id, text, Provenance::augmented, method,
                        parent.caption_id);
}

}  // namespace

StubTextBackend::StubTextBackend(json table) : table_(std::move(table)) {
    if (!table_.is_object()) throw ParseError("stub backend table must be a JSON object");
}

StubTextBackend StubTextBackend::from_file(const std::filesystem::path& path) {
    return StubTextBackend(read_json_file(path));
}

const json* StubTextBackend::lookup(const std::string& primary, const std::string& fallback) const {
    if (auto it = table_.find(primary); it != table_.end()) return &*it;
    if (auto it = table_.find(fallback); it != table_.end()) return &*it;
    return nullptr;
}

std::string StubTextBackend::translate(const std::string& text, const std::string& src_lang,
                                       const std::string& dst_lang) {
    if (dst_lang != "en") return std::string(kPivotOpen) + dst_lang + std::string(kPivotClose) + text;
    std::string original = text;
    const std::string marker = std::string(kPivotOpen) + src_lang + std::string(kPivotClose);
    if (original.rfind(marker, 0) == 0) original = original.substr(marker.size());
    const json* entry = lookup(src_lang + ":" + original, original);
    if (!entry) return original;
    if (entry->is_null()) throw BackendError("stub backend: translation failure for '" + original + "'");
    if (entry->is_string()) return entry->get<std::string>();
    if (entry->is_array() && !entry->empty() && (*entry)[0].is_string()) return (*entry)[0].get<std::string>();
    throw BackendError("stub backend: unusable entry for '" + original + "'");
}

std::vector<std::string> StubTextBackend::paraphrase(const std::string& text, int n) {
    const json* entry = lookup("paraphrase:" + text, text);
    if (!entry) return std::vector<std::string>(static_cast<std::size_t>(std::max(n, 0)), text);
    if (entry->is_null()) throw BackendError("stub backend: paraphrase failure for '" + text + "'");
    std::vector<std::string> out;
    if (entry->is_string()) {
        out.push_back(entry->get<std::string>());
    } else if (entry->is_array()) {
        for (const auto& v : *entry) {
            if (static_cast<int>(out.size()) >= n) break;
            out.push_back(v.get<std::string>());
        }
    }
    return out;
}

HttpTextBackend::HttpTextBackend(std::string base_url, std::chrono::seconds timeout)
    : base_url_(std::move(base_url)), timeout_(timeout) {}

json HttpTextBackend::post(const std::string& path, const json& body) const {
    // httplib::Client is not shared across threads; one per call.
    httplib::Client client(base_url_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    const auto res = client.Post(path, body.dump(), "application/json");
    if (!res) throw BackendError(base_url_ + path + ": " + httplib::to_string(res.error()));
    if (res->status != 200) throw BackendError(base_url_ + path + ": HTTP " + std::to_string(res->status));
    try {
        return json::parse(res->body);
    } catch (const json::parse_error& e) {
        throw BackendError(base_url_ + path + ": " + e.what());
    }
}

std::string HttpTextBackend::translate(const std::string& text, const std::string& src_lang,
                                       const std::string& dst_lang) {
    const json res = post("/translate", {{"q", text}, {"source", src_lang}, {"target", dst_lang}, {"format", "text"}});
    if (!res.contains("translatedText") || !res["translatedText"].is_string())
        throw BackendError("translate: response lacks translatedText");
    return res["translatedText"].get<std::string>();
}

std::vector<std::string> HttpTextBackend::paraphrase(const std::string& text, int n) {
    const json res = post("/paraphrase", {{"text", text}, {"n", n}});
    if (!res.contains("paraphrases") || !res["paraphrases"].is_array())
        throw BackendError("paraphrase: response lacks paraphrases");
    std::vector<std::string> out;
    for (const auto& p : res["paraphrases"])
        if (p.is_string()) out.push_back(p.get<std::string>());
    return out;
}

SynonymLexicon SynonymLexicon::from_json(const json& j) {
    if (!j.is_object()) throw ParseError("synonym lexicon must be a JSON object");
    SynonymLexicon lex;
    for (const auto& [token, syns] : j.items()) lex.add(token, syns.get<std::vector<std::string>>());
    return lex;
}

SynonymLexicon SynonymLexicon::from_file(const std::filesystem::path& path) { return from_json(read_json_file(path)); }

void SynonymLexicon::add(const std::string& token, const std::vector<std::string>& synonyms) {
    const std::string key = join_tokens(tokenize(token));
    auto& list = entries_[key];
    for (const auto& s : synonyms) {
        const std::string syn = join_tokens(tokenize(s));
        if (syn.empty() || syn == key) continue;
        if (std::find(list.begin(), list.end(), syn) == list.end()) list.push_back(syn);
    }
    if (list.empty()) entries_.erase(key);
}

const std::vector<std::string>* SynonymLexicon::synonyms(const std::string& token) const {
    const auto it = entries_.find(token);
    return it == entries_.end() ? nullptr : &it->second;
}

const std::vector<std::string>& stop_words() {
    static const std::vector<std::string> words = {"a",    "an",   "the", "is",    "are", "of",   "on",
                                                   "in",   "at",   "to",  "and",   "or",  "with", "for",
                                                   "by",   "from", "this", "that", "it",  "its",  "as",
                                                   "be",   "there", "was", "has"};
    return words;
}

bool is_stop_word(const std::string& token) {
    const auto& w = stop_words();
    return std::find(w.begin(), w.end(), token) != w.end();
}

std::string normalized_key(const std::string& text) { return join_tokens(tokenize(text)); }

std::vector<CaptionRecord> synonym_substitute(const CaptionRecord& caption, double rate, int n_out,
                                              const SynonymLexicon& lexicon, std::uint64_t seed) {
    if (!(rate > 0 && rate <= 1)) throw std::invalid_argument("synonym_substitute: rate must be in (0, 1]");
    if (n_out < 1) throw std::invalid_argument("synonym_substitute: n_out must be >= 1");
    const auto& tokens = caption.tokens;
    std::vector<std::size_t> substitutable;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (!is_stop_word(tokens[i]) && lexicon.synonyms(tokens[i])) substitutable.push_back(i);
    if (substitutable.empty()) return {};

    const auto k_rule = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(rate * static_cast<double>(tokens.size()))));
    const std::size_t k = std::min(k_rule, substitutable.size());

    std::mt19937_64 rng(seed);
    Deduplicator dedup(caption.text);
    std::vector<CaptionRecord> out;
    // Draws that duplicate an earlier output are redrawn within a fixed budget.
    const int budget = 10 * n_out;
    for (int attempt = 0; attempt < budget && static_cast<int>(out.size()) < n_out; ++attempt) {
        auto positions = substitutable;
        for (std::size_t j = 0; j < k; ++j) {
            std::uniform_int_distribution<std::size_t> pick(j, positions.size() - 1);
            std::swap(positions[j], positions[pick(rng)]);
        }
        auto replaced = tokens;
        for (std::size_t j = 0; j < k; ++j) {
            const auto& syns = *lexicon.synonyms(tokens[positions[j]]);
            std::uniform_int_distribution<std::size_t> pick(0, syns.size() - 1);
            replaced[positions[j]] = syns[pick(rng)];
        }
        const std::string text = join_tokens(replaced);
        if (dedup.accept(text))
            out.push_back(variant_of(caption, "syn" + std::to_string(out.size()), text, "synonym"));
    }
    return out;
}

std::vector<CaptionRecord> back_translate(const CaptionRecord& caption, const std::vector<std::string>& pivots,
                                          TextBackend& backend) {
    if (pivots.empty()) throw std::invalid_argument("back_translate: pivots must be non-empty");
    Deduplicator dedup(caption.text);
    std::vector<CaptionRecord> out;
    for (const auto& pivot : pivots) {
        std::string back;
        try {
            back = backend.translate(backend.translate(caption.text, "en", pivot), pivot, "en");
        } catch (const BackendError&) {
            continue;
        }
        if (dedup.accept(back)) out.push_back(variant_of(caption, "bt-" + pivot, back, "backtranslate:" + pivot));
    }
    return out;
}

std::vector<CaptionRecord> paraphrase(const CaptionRecord& caption, int n, TextBackend& backend) {
    if (n < 1) throw std::invalid_argument("paraphrase: n must be >= 1");
    std::vector<std::string> candidates;
    try {
        candidates = backend.paraphrase(caption.text, n);
    } catch (const BackendError&) {
        return {};
    }
    Deduplicator dedup(caption.text);
    std::vector<CaptionRecord> out;
    for (const auto& text : candidates) {
        if (static_cast<int>(out.size()) >= n) break;
        if (dedup.accept(text)) out.push_back(variant_of(caption, "para" + std::to_string(out.size()), text, "paraphrase"));
    }
    return out;
}

json TextAugmentConfig::to_json() const {
    return {{"synonym_rate", synonym_rate}, {"n_synonym", n_synonym}, {"pivots", pivots},
            {"n_paraphrase", n_paraphrase}, {"seed", seed}};
}

TextAugmentConfig TextAugmentConfig::from_json(const json& j) {
    TextAugmentConfig c;
    c.synonym_rate = j.value("synonym_rate", c.synonym_rate);
    c.n_synonym = j.value("n_synonym", c.n_synonym);
    c.pivots = j.value("pivots", c.pivots);
    c.n_paraphrase = j.value("n_paraphrase", c.n_paraphrase);
    c.seed = j.value("seed", c.seed);
    return c;
}

AugmentationSet augment_caption(const CaptionRecord& caption, const TextAugmentConfig& config,
                                const SynonymLexicon& lexicon, TextBackend& backend) {
    if (caption.tokens.empty()) throw std::invalid_argument("augment_caption: caption must be non-empty");
    AugmentationSet set{caption, {}};
    std::vector<CaptionRecord> candidates;
    if (config.n_synonym > 0) {
        auto syn = synonym_substitute(caption, config.synonym_rate, config.n_synonym, lexicon, config.seed);
        candidates.insert(candidates.end(), syn.begin(), syn.end());
    }
    if (!config.pivots.empty()) {
        auto bt = back_translate(caption, config.pivots, backend);
        candidates.insert(candidates.end(), bt.begin(), bt.end());
    }
    if (config.n_paraphrase > 0) {
        auto para = paraphrase(caption, config.n_paraphrase, backend);
        candidates.insert(candidates.end(), para.begin(), para.end());
    }
    Deduplicator dedup(caption.text);
    for (auto& c : candidates)
        if (dedup.accept(c.text)) set.variants.push_back(std::move(c));
    return set;
}

}  // namespace capfeed
