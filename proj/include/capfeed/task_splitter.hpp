#pragma once

#include "capfeed/dataset.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace capfeed {

enum class PosTag { determiner, adjective, noun, verb, adverb, preposition, pronoun, conjunction, number, other };

// Lexicon lookup with suffix rules as fallback; unknown words are nouns.
class PosTagger {
public:
    PosTagger();  // built-in English table
    static PosTagger from_json(const nlohmann::json& j);  // {"word": "noun" | "adj" | ...}, merged over the table

    PosTag tag(const std::string& token) const;
    void set(const std::string& token, PosTag tag) { table_[token] = tag; }

private:
    std::unordered_map<std::string, PosTag> table_;
};

// Chunks of the form ADJ* NOUN+, determiners dropped, first occurrence order,
// duplicates removed.
std::vector<std::string> extract_noun_phrases(const CaptionRecord& caption, const PosTagger& tagger = PosTagger());

class EmbeddingTable {
public:
    EmbeddingTable() = default;
    explicit EmbeddingTable(int dim) : dim_(dim) {}

    // Word-vector text format, one "token v1 ... vd" per line. A leading
    // "<count> <dim>" header line is skipped. Throws ParseError with the line
    // number on inconsistent dimensions or bad numbers.
    static EmbeddingTable load(const std::filesystem::path& path);

    void add(const std::string& token, Eigen::VectorXd v);
    const Eigen::VectorXd* find(const std::string& token) const;
    int dim() const { return dim_; }
    std::size_t size() const { return vectors_.size(); }

private:
    int dim_ = 0;
    std::unordered_map<std::string, Eigen::VectorXd> vectors_;
};

struct PhraseEmbedding {
    Eigen::VectorXd vector;
    bool oov = false;  // no token of the phrase is in the table
};

PhraseEmbedding embed_phrase(const std::string& phrase, const EmbeddingTable& table);

struct KMeansOptions {
    int max_iter = 300;
    double tol = 1e-4;  // max centroid shift
    int n_init = 20;    // k-means++ restarts, best inertia kept
};

struct KMeansResult {
    std::vector<int> assignments;
    Eigen::MatrixXd centroids;  // k x d
    double inertia = 0;
    std::vector<double> inertia_history;  // after each assignment step of the kept run
    int iterations = 0;
};

// Rows of `points` are the vectors. Throws std::invalid_argument if k < 1,
// k > n or max_iter < 1.
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, const KMeansOptions& options = {});

double inertia(const Eigen::MatrixXd& points, const std::vector<int>& assignments, const Eigen::MatrixXd& centroids);

struct ConceptCluster {
    int cluster_id = 0;
    Eigen::VectorXd centroid;
    std::vector<std::string> member_nps;
};

struct TaskSplit {
    int split_id = 0;
    std::vector<std::string> image_ids;  // in input order
    int source_cluster = 0;
};

struct SplitResult {
    std::vector<TaskSplit> splits;
    std::vector<ConceptCluster> clusters;
    std::vector<std::string> unembedded_nps;  // every token OOV; not clustered
};

struct SplitOptions {
    KMeansOptions kmeans;
    PosTagger tagger;
};

// Each image goes to the cluster holding the plurality of its captions' NPs;
// ties go to the currently smallest split, then the lowest id. Images without
// embeddable NPs are placed last, each into the currently smallest split.
// When there are fewer distinct NPs than k, the remaining splits stay empty.
SplitResult assign_splits(std::span<const ImageRecord> images, std::span<const CaptionRecord> captions, int k,
                          std::uint64_t seed, const EmbeddingTable& table, const SplitOptions& options = {});

// splits.json: {"<split_id>": [image ids]}.
nlohmann::json splits_to_json(std::span<const TaskSplit> splits);
std::vector<TaskSplit> splits_from_json(const nlohmann::json& j);
void save_splits(const std::filesystem::path& path, std::span<const TaskSplit> splits);
std::vector<TaskSplit> load_splits(const std::filesystem::path& path);

}  // namespace capfeed
