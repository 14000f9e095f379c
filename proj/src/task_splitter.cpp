#include "capfeed/task_splitter.hpp"

#include "capfeed/errors.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

namespace capfeed {

using nlohmann::json;

namespace {

const std::vector<std::pair<PosTag, std::vector<std::string>>>& builtin_table() {
    static const std::vector<std::pair<PosTag, std::vector<std::string>>> table = {
        {PosTag::determiner,
         {"a", "an", "the", "this", "that", "these", "those", "some", "each", "every", "his", "her", "their", "its",
          "my", "your", "our", "any", "another", "no"}},
        {PosTag::preposition,
         {"on", "in", "at", "with", "of", "by", "near", "under", "over", "beside", "behind", "next", "to", "from",
          "into", "onto", "across", "through", "for", "about", "around", "along", "above", "below", "inside",
          "outside", "between", "against", "up", "down", "off", "out", "while", "as"}},
        {PosTag::conjunction, {"and", "or", "but", "so", "then"}},
        {PosTag::pronoun,
         {"he", "she", "it", "they", "we", "i", "you", "him", "them", "us", "me", "someone", "something", "there",
          "who", "what", "which", "what's", "it's", "there's"}},
        {PosTag::number,
         {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "several", "many", "few",
          "couple"}},
        {PosTag::adverb, {"very", "quickly", "slowly", "together", "here", "not", "too", "also", "just", "almost"}},
        {PosTag::verb,
         {"is",      "are",     "was",     "were",    "be",      "been",    "being",   "has",     "have",
          "had",     "do",      "does",    "can",     "runs",    "run",     "sits",    "sit",     "stands",
          "stand",   "holds",   "hold",    "looks",   "look",    "walks",   "walk",    "eats",    "eat",
          "plays",   "play",    "lies",    "lie",     "rides",   "ride",    "flies",   "fly",     "shows",
          "show",    "waits",   "wait",    "sleeps",  "sleep",   "jumps",   "jump",    "contains", "contain",
          "appears", "appear",  "seems",   "seem",    "reads",   "read",    "says",    "say",     "goes",
          "go",      "made",    "taken",   "cycles",  "serves",  "swims",   "swim",    "carries", "carry",
          "sprints", "jogs",    "wears",   "wear"}},
        {PosTag::adjective,
         {"red",   "green", "blue",   "yellow", "white",  "black",  "brown", "gray",  "grey",  "orange", "pink",
          "purple", "big",  "small",  "large",  "little", "tall",   "short", "long",  "old",   "young",  "new",
          "wooden", "empty", "full",  "open",   "closed", "dark",   "bright", "huge", "tiny",  "clear",  "blurry",
          "silver", "golden", "round", "plastic", "metal", "hot", "cold", "fresh", "busy", "quiet", "pretty", "cute",
          "heavy"}},
    };
    return table;
}

std::optional<PosTag> parse_tag(const std::string& s) {
    static const std::map<std::string, PosTag> names = {
        {"det", PosTag::determiner}, {"determiner", PosTag::determiner}, {"adj", PosTag::adjective},
        {"adjective", PosTag::adjective}, {"noun", PosTag::noun},      {"verb", PosTag::verb},
        {"adv", PosTag::adverb},      {"adverb", PosTag::adverb},        {"prep", PosTag::preposition},
        {"preposition", PosTag::preposition}, {"pron", PosTag::pronoun}, {"pronoun", PosTag::pronoun},
        {"conj", PosTag::conjunction}, {"conjunction", PosTag::conjunction}, {"num", PosTag::number},
        {"number", PosTag::number},    {"other", PosTag::other}};
    const auto it = names.find(s);
    if (it == names.end()) return std::nullopt;
    return it->second;
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() > suffix.size() + 1 && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool all_digits(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

PosTagger::PosTagger() {
    for (const auto& [tag, words] : builtin_table())
        for (const auto& w : words) table_.emplace(w, tag);
}

PosTagger PosTagger::from_json(const json& j) {
    if (!j.is_object()) throw ParseError("tag lexicon must be a JSON object");
    PosTagger tagger;
    for (const auto& [word, tag] : j.items()) {
        const auto t = tag.is_string() ? parse_tag(tag.get<std::string>()) : std::nullopt;
        if (!t) throw ParseError("tag lexicon: unknown tag for '" + word + "'");
        tagger.table_[word] = *t;
    }
    return tagger;
}

PosTag PosTagger::tag(const std::string& token) const {
    if (const auto it = table_.find(token); it != table_.end()) return it->second;
    if (all_digits(token)) return PosTag::number;
    if (ends_with(token, "ly")) return PosTag::adverb;
    if (ends_with(token, "ing") || ends_with(token, "ed")) return PosTag::verb;
    for (const std::string_view s : {"ous", "ful", "ive", "able", "ible", "ish", "less"})
        if (ends_with(token, s)) return PosTag::adjective;
    return PosTag::noun;
}

std::vector<std::string> extract_noun_phrases(const CaptionRecord& caption, const PosTagger& tagger) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    const auto& tokens = caption.tokens;
    std::size_t i = 0;
    while (i < tokens.size()) {
        std::size_t j = i;
        while (j < tokens.size() && tagger.tag(tokens[j]) == PosTag::adjective) ++j;
        std::size_t k = j;
        while (k < tokens.size() && tagger.tag(tokens[k]) == PosTag::noun) ++k;
        if (k > j) {
            std::string np;
            for (std::size_t t = i; t < k; ++t) np += (t > i ? " " : "") + tokens[t];
            if (seen.insert(np).second) out.push_back(np);
            i = k;
        } else {
            i = std::max(j, i + 1);
        }
    }
    return out;
}

void EmbeddingTable::add(const std::string& token, Eigen::VectorXd v) {
    if (dim_ == 0) dim_ = static_cast<int>(v.size());
    if (v.size() != dim_) throw ShapeError("embedding for '" + token + "' has dimension " + std::to_string(v.size()) +
                                           ", expected " + std::to_string(dim_));
    vectors_[token] = std::move(v);
}

const Eigen::VectorXd* EmbeddingTable::find(const std::string& token) const {
    const auto it = vectors_.find(token);
    return it == vectors_.end() ? nullptr : &it->second;
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    EmbeddingTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string token;
        ls >> token;
        std::vector<double> values;
        std::string field;
        while (ls >> field) {
            try {
                std::size_t used = 0;
                values.push_back(std::stod(field, &used));
                if (used != field.size()) throw std::invalid_argument(field);
            } catch (const std::exception&) {
                throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
            }
        }
        if (line_no == 1 && values.size() == 1 && all_digits(token)) continue;  // "<count> <dim>" header
        if (values.empty()) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": no vector values");
        if (table.dim_ != 0 && static_cast<int>(values.size()) != table.dim_)
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": dimension " + std::to_string(values.size()) +
                             ", expected " + std::to_string(table.dim_));
        table.add(token, Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())));
    }
    return table;
}

PhraseEmbedding embed_phrase(const std::string& phrase, const EmbeddingTable& table) {
    const auto tokens = tokenize(phrase);
    if (tokens.empty()) throw std::invalid_argument("embed_phrase: phrase must be non-empty");
    PhraseEmbedding out{Eigen::VectorXd::Zero(table.dim()), false};
    int found = 0;
    for (const auto& t : tokens)
        if (const auto* v = table.find(t)) {
            out.vector += *v;
            ++found;
        }
    if (found == 0)
        out.oov = true;
    else
        out.vector /= found;
    return out;
}

double inertia(const Eigen::MatrixXd& points, const std::vector<int>& assignments, const Eigen::MatrixXd& centroids) {
    double total = 0;
    for (Eigen::Index i = 0; i < points.rows(); ++i)
        total += (points.row(i) - centroids.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
    return total;
}

namespace {

Eigen::MatrixXd plus_plus_seed(const Eigen::MatrixXd& X, int k, std::mt19937_64& rng) {
    const Eigen::Index n = X.rows();
    Eigen::MatrixXd C(k, X.cols());
    std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
    C.row(0) = X.row(first(rng));
    Eigen::VectorXd d2 = (X.rowwise() - C.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total <= 0) {
            pick = first(rng);
        } else {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng);
            for (pick = 0; pick < n - 1; ++pick) {
                r -= d2[pick];
                if (r < 0) break;
            }
            while (d2[pick] <= 0 && pick > 0) --pick;  // never a zero-weight point
        }
        C.row(c) = X.row(pick);
        d2 = d2.cwiseMin((X.rowwise() - C.row(c)).rowwise().squaredNorm());
    }
    return C;
}

// Nearest-centroid assignment; an empty cluster takes the point farthest from
// its centroid among clusters with more than one member.
void assign(const Eigen::MatrixXd& X, Eigen::MatrixXd& C, std::vector<int>& a) {
    const Eigen::Index n = X.rows();
    const int k = static_cast<int>(C.rows());
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            const double d = (X.row(i) - C.row(c)).squaredNorm();
            if (d < best_d) best_d = d, best = c;
        }
        a[static_cast<std::size_t>(i)] = best;
        ++count[static_cast<std::size_t>(best)];
    }
    for (int c = 0; c < k; ++c) {
        if (count[static_cast<std::size_t>(c)] > 0) continue;
        Eigen::Index far = -1;
        double far_d = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
            const int owner = a[static_cast<std::size_t>(i)];
            if (count[static_cast<std::size_t>(owner)] < 2) continue;
            const double d = (X.row(i) - C.row(owner)).squaredNorm();
            if (d > far_d) far_d = d, far = i;
        }
        if (far < 0) break;
        --count[static_cast<std::size_t>(a[static_cast<std::size_t>(far)])];
        a[static_cast<std::size_t>(far)] = c;
        count[static_cast<std::size_t>(c)] = 1;
        C.row(c) = X.row(far);
    }
}

// Single-point transfers that strictly lower the exact objective (centroid
// movement included), applied after Lloyd converges.
void hartigan(const Eigen::MatrixXd& X, Eigen::MatrixXd& C, std::vector<int>& a, std::vector<double>& history) {
    const int k = static_cast<int>(C.rows());
    std::vector<double> count(static_cast<std::size_t>(k), 0);
    for (const int c : a) ++count[static_cast<std::size_t>(c)];
    bool moved = true;
    for (int sweep = 0; moved && sweep < 100; ++sweep) {
        moved = false;
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            const int from = a[static_cast<std::size_t>(i)];
            const double nf = count[static_cast<std::size_t>(from)];
            if (nf < 2) continue;
            const double removal = nf / (nf - 1) * (X.row(i) - C.row(from)).squaredNorm();
            int best = from;
            double best_delta = -1e-12 * (1 + removal);
            for (int to = 0; to < k; ++to) {
                if (to == from) continue;
                const double nt = count[static_cast<std::size_t>(to)];
                const double delta = nt / (nt + 1) * (X.row(i) - C.row(to)).squaredNorm() - removal;
                if (delta < best_delta) best_delta = delta, best = to;
            }
            if (best == from) continue;
            const double nt = count[static_cast<std::size_t>(best)];
            C.row(from) = (C.row(from) * nf - X.row(i)) / (nf - 1);
            C.row(best) = (C.row(best) * nt + X.row(i)) / (nt + 1);
            --count[static_cast<std::size_t>(from)];
            ++count[static_cast<std::size_t>(best)];
            a[static_cast<std::size_t>(i)] = best;
            moved = true;
        }
        if (moved) history.push_back(inertia(X, a, C));
    }
}

KMeansResult lloyd(const Eigen::MatrixXd& X, Eigen::MatrixXd C, const KMeansOptions& options) {
    KMeansResult r;
    r.assignments.assign(static_cast<std::size_t>(X.rows()), 0);
    assign(X, C, r.assignments);
    r.inertia_history.push_back(inertia(X, r.assignments, C));
    const int k = static_cast<int>(C.rows());
    for (int it = 0; it < options.max_iter; ++it) {
        Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, X.cols());
        std::vector<int> count(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            next.row(r.assignments[static_cast<std::size_t>(i)]) += X.row(i);
            ++count[static_cast<std::size_t>(r.assignments[static_cast<std::size_t>(i)])];
        }
        double shift = 0;
        for (int c = 0; c < k; ++c) {
            if (count[static_cast<std::size_t>(c)] > 0)
                next.row(c) /= count[static_cast<std::size_t>(c)];
            else
                next.row(c) = C.row(c);
            shift = std::max(shift, (next.row(c) - C.row(c)).norm());
        }
        C = std::move(next);
        assign(X, C, r.assignments);
        r.inertia_history.push_back(inertia(X, r.assignments, C));
        r.iterations = it + 1;
        if (shift < options.tol) break;
    }
    hartigan(X, C, r.assignments, r.inertia_history);
    r.centroids = std::move(C);
    r.inertia = r.inertia_history.back();
    return r;
}

}  // namespace

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, const KMeansOptions& options) {
    if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
    if (k > points.rows()) throw std::invalid_argument("kmeans: k exceeds the number of points");
    if (options.max_iter < 1) throw std::invalid_argument("kmeans: max_iter must be >= 1");
    std::mt19937_64 rng(seed);
    KMeansResult best;
    for (int run = 0; run < std::max(1, options.n_init); ++run) {
        auto r = lloyd(points, plus_plus_seed(points, k, rng), options);
        if (run == 0 || r.inertia < best.inertia) best = std::move(r);
    }
    return best;
}

SplitResult assign_splits(std::span<const ImageRecord> images, std::span<const CaptionRecord> captions, int k,
                          std::uint64_t seed, const EmbeddingTable& table, const SplitOptions& options) {
    if (k < 1) throw std::invalid_argument("assign_splits: k must be >= 1");
    std::map<std::string, std::vector<std::vector<std::string>>> nps_by_image;
    std::set<std::string> all_nps;
    for (const auto& c : captions) {
        auto nps = extract_noun_phrases(c, options.tagger);
        all_nps.insert(nps.begin(), nps.end());
        nps_by_image[c.image_id].push_back(std::move(nps));
    }

    SplitResult result;
    std::vector<std::string> embedded;
    std::vector<Eigen::VectorXd> vectors;
    for (const auto& np : all_nps) {
        auto e = embed_phrase(np, table);
        if (e.oov) {
            result.unembedded_nps.push_back(np);
        } else {
            embedded.push_back(np);
            vectors.push_back(std::move(e.vector));
        }
    }

    const int k_eff = std::min<int>(k, static_cast<int>(embedded.size()));
    std::map<std::string, int> cluster_of;
    if (k_eff > 0) {
        Eigen::MatrixXd X(static_cast<Eigen::Index>(vectors.size()), table.dim());
        for (std::size_t i = 0; i < vectors.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = vectors[i].transpose();
        const auto km = kmeans(X, k_eff, seed, options.kmeans);
        for (int c = 0; c < k_eff; ++c) result.clusters.push_back({c, km.centroids.row(c).transpose(), {}});
        for (std::size_t i = 0; i < embedded.size(); ++i) {
            cluster_of[embedded[i]] = km.assignments[i];
            result.clusters[static_cast<std::size_t>(km.assignments[i])].member_nps.push_back(embedded[i]);
        }
    }

    for (int s = 0; s < k; ++s) result.splits.push_back({s, {}, s < k_eff ? s : -1});
    auto smallest_of = [&](const std::vector<int>& candidates) {
        int best = candidates.front();
        for (const int c : candidates)
            if (result.splits[static_cast<std::size_t>(c)].image_ids.size() <
                result.splits[static_cast<std::size_t>(best)].image_ids.size())
                best = c;
        return best;
    };
    std::vector<int> every(static_cast<std::size_t>(k));
    for (int s = 0; s < k; ++s) every[static_cast<std::size_t>(s)] = s;

    std::vector<const ImageRecord*> without_nps;
    for (const auto& img : images) {
        std::vector<int> votes(static_cast<std::size_t>(k), 0);
        int total = 0;
        if (const auto it = nps_by_image.find(img.image_id); it != nps_by_image.end())
            for (const auto& nps : it->second)
                for (const auto& np : nps)
                    if (const auto c = cluster_of.find(np); c != cluster_of.end()) {
                        ++votes[static_cast<std::size_t>(c->second)];
                        ++total;
                    }
        if (total == 0) {
            without_nps.push_back(&img);
            continue;
        }
        const int top = *std::max_element(votes.begin(), votes.end());
        std::vector<int> tied;
        for (int s = 0; s < k; ++s)
            if (votes[static_cast<std::size_t>(s)] == top) tied.push_back(s);
        result.splits[static_cast<std::size_t>(smallest_of(tied))].image_ids.push_back(img.image_id);
    }
    for (const auto* img : without_nps) result.splits[static_cast<std::size_t>(smallest_of(every))].image_ids.push_back(img->image_id);
    return result;
}

json splits_to_json(std::span<const TaskSplit> splits) {
    json j = json::object();
    for (const auto& s : splits) j[std::to_string(s.split_id)] = s.image_ids;
    return j;
}

std::vector<TaskSplit> splits_from_json(const json& j) {
    if (!j.is_object()) throw ParseError("splits file must be a JSON object");
    std::vector<TaskSplit> out;
    try {
        for (const auto& [key, ids] : j.items()) {
            TaskSplit s;
            s.split_id = std::stoi(key);
            s.source_cluster = s.split_id;
            s.image_ids = ids.get<std::vector<std::string>>();
            out.push_back(std::move(s));
        }
    } catch (const std::exception& e) {
        throw ParseError(std::string("splits file: ") + e.what());
    }
    std::sort(out.begin(), out.end(), [](const TaskSplit& a, const TaskSplit& b) { return a.split_id < b.split_id; });
    return out;
}

void save_splits(const std::filesystem::path& path, std::span<const TaskSplit> splits) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << splits_to_json(splits).dump(2) << "\n";
}

std::vector<TaskSplit> load_splits(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    try {
        return splits_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

}  // namespace capfeed
