#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace capfeed {

inline constexpr std::size_t kMaxCaptionTokens = 50;

struct BBox {
    double x = 0, y = 0, w = 0, h = 0;
    std::string label;

    double area() const { return w * h; }
    bool inside(int width_px, int height_px) const;
    bool operator==(const BBox&) const = default;
};

double iou(const BBox& a, const BBox& b);
double intersection_area(const BBox& a, const BBox& b);

using PixelBuffer = std::shared_ptr<const std::vector<std::uint8_t>>;

// Row-major H x W x 3 image. Pixels are either held in memory or read from
// `path` on demand (lazy mode for full-size datasets).
struct ImageRecord {
    std::string image_id;
    int width = 0;
    int height = 0;
    std::vector<BBox> bboxes;
    std::string split_tag = "train";
    PixelBuffer data;
    std::filesystem::path path;

    PixelBuffer pixels() const;
    bool is_lazy() const { return !data; }
};

// Throws ShapeError if dimensions, pixel buffer or boxes are inconsistent.
void validate(const ImageRecord& image);

ImageRecord make_image(std::string id, int width, int height, std::vector<std::uint8_t> pixels,
                       std::vector<BBox> boxes = {}, std::string split = "train");

enum class Provenance { ground_truth, predicted, corrected, augmented };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

struct CaptionRecord {
    std::string caption_id;
    std::string image_id;
    std::string text;
    std::vector<std::string> tokens;
    Provenance provenance = Provenance::ground_truth;
    std::optional<std::string> method_tag;
    std::optional<std::string> parent_id;
};

// Lowercase, punctuation other than apostrophes becomes whitespace, split on whitespace.
std::vector<std::string> tokenize(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);

// Builds a record whose tokens are tokenize(text), capped at max_tokens. A
// truncated caption has its text rewritten to the kept tokens so the
// text/tokens invariant holds.
CaptionRecord make_caption(std::string caption_id, std::string image_id, std::string_view text,
                           Provenance provenance = Provenance::ground_truth,
                           std::optional<std::string> method_tag = std::nullopt,
                           std::optional<std::string> parent_id = std::nullopt,
                           std::size_t max_tokens = kMaxCaptionTokens);

nlohmann::json to_json(const CaptionRecord& c);
CaptionRecord caption_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BBox& b);
BBox bbox_from_json(const nlohmann::json& j);

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kStart = 1;
    static constexpr int kEnd = 2;
    static constexpr int kUnk = 3;
    static constexpr std::size_t kNumSpecials = 4;

    Vocabulary();
    explicit Vocabulary(std::vector<std::string> id_to_token);

    std::size_t size() const { return id_to_token_.size(); }
    int id(std::string_view token) const;
    const std::string& token(int id) const;
    bool contains(std::string_view token) const;

    std::vector<int> encode(std::span<const std::string> tokens) const;
    std::vector<std::string> decode(std::span<const int> ids) const;

    const std::vector<std::string>& tokens() const { return id_to_token_; }
    bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

private:
    std::vector<std::string> id_to_token_;
    std::map<std::string, int, std::less<>> token_to_id_;
};

// Specials, then every token with frequency >= min_freq ordered by
// (frequency desc, token asc).
Vocabulary build_vocab(std::span<const CaptionRecord> captions, int min_freq);

enum class PixelMode { eager, lazy };

struct LoadOptions {
    PixelMode pixels = PixelMode::eager;
    std::size_t max_tokens = kMaxCaptionTokens;
    // Directory image file names are resolved against; defaults to the
    // annotation file's directory.
    std::optional<std::filesystem::path> image_root;
    // Fraction of VizWiz train images (by sorted id) held out as val.
    double val_fraction = 0.1;
};

struct LoadResult {
    std::vector<ImageRecord> images;
    std::vector<CaptionRecord> captions;
    std::vector<std::string> errors;  // per-record problems, not fatal
};

// COCO caption JSON plus an optional split file. The split file is either a
// flat {"<image_id>": "train|val|test"} map or a Karpathy-style
// {"images": [{"cocoid", "split"}]} file ("restval" counts as train).
LoadResult load_coco(const std::filesystem::path& annotation_file,
                     const std::optional<std::filesystem::path>& split_file = std::nullopt,
                     const LoadOptions& options = {});

// VizWiz caption directory with train.json and val.json. Official val is
// tagged test; the last val_fraction of train (by sorted image id) is tagged val.
LoadResult load_vizwiz(const std::filesystem::path& annotation_dir, const LoadOptions& options = {});

// Natural ordering for ids: all-digit ids compare numerically.
bool image_id_less(std::string_view a, std::string_view b);

// On-disk dataset directory: dataset.json plus images/<id>.ppm.
void save_dataset(const std::filesystem::path& dir, std::span<const ImageRecord> images,
                  std::span<const CaptionRecord> captions);
LoadResult load_dataset(const std::filesystem::path& dir, const LoadOptions& options = {});

// Captions grouped by image id, in input order.
std::map<std::string, std::vector<CaptionRecord>> captions_by_image(std::span<const CaptionRecord> captions);

}  // namespace capfeed
