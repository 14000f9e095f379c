#include "capfeed/dataset.hpp"

#include "capfeed/errors.hpp"
#include "capfeed/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

namespace capfeed {

namespace fs = std::filesystem;
using nlohmann::json;

bool BBox::inside(int width_px, int height_px) const {
    return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= width_px && y + h <= height_px;
}

double intersection_area(const BBox& a, const BBox& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    return ix * iy;
}

double iou(const BBox& a, const BBox& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

PixelBuffer ImageRecord::pixels() const {
    if (data) return data;
    if (path.empty()) throw ShapeError("image " + image_id + " has no pixel data");
    auto decoded = read_image(path);
    if (decoded.width != width || decoded.height != height)
        throw ShapeError("image " + image_id + ": file dimensions differ from record");
    return std::make_shared<const std::vector<std::uint8_t>>(std::move(decoded.rgb));
}

void validate(const ImageRecord& image) {
    if (image.width < 1 || image.height < 1)
        throw ShapeError("image " + image.image_id + ": width and height must be >= 1");
    if (image.data && image.data->size() != static_cast<std::size_t>(image.width) * image.height * 3)
        throw ShapeError("image " + image.image_id + ": pixel buffer is not height x width x 3");
    for (const auto& b : image.bboxes)
        if (!b.inside(image.width, image.height))
            throw ShapeError("image " + image.image_id + ": bbox outside image bounds");
}

ImageRecord make_image(std::string id, int width, int height, std::vector<std::uint8_t> pixels,
                       std::vector<BBox> boxes, std::string split) {
    ImageRecord img;
    img.image_id = std::move(id);
    img.width = width;
    img.height = height;
    img.bboxes = std::move(boxes);
    img.split_tag = std::move(split);
    img.data = std::make_shared<const std::vector<std::uint8_t>>(std::move(pixels));
    validate(img);
    return img;
}

std::string_view to_string(Provenance p) {
    switch (p) {
        case Provenance::ground_truth: return "ground_truth";
        case Provenance::predicted: return "predicted";
        case Provenance::corrected: return "corrected";
        case Provenance::augmented: return "augmented";
    }
    return "ground_truth";
}

Provenance provenance_from_string(std::string_view s) {
    if (s == "ground_truth") return Provenance::ground_truth;
    if (s == "predicted") return Provenance::predicted;
    if (s == "corrected") return Provenance::corrected;
    if (s == "augmented") return Provenance::augmented;
    throw ParseError("unknown provenance '" + std::string(s) + "'");
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (const char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        const bool separator = std::isspace(c) || (c < 0x80 && std::ispunct(c) && c != '\'');
        if (separator) {
            if (!current.empty()) tokens.push_back(std::move(current));
            current.clear();
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::string join_tokens(std::span<const std::string> tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

CaptionRecord make_caption(std::string caption_id, std::string image_id, std::string_view text,
                           Provenance provenance, std::optional<std::string> method_tag,
                           std::optional<std::string> parent_id, std::size_t max_tokens) {
    CaptionRecord c;
    c.caption_id = std::move(caption_id);
    c.image_id = std::move(image_id);
    c.text = std::string(text);
    c.tokens = tokenize(text);
    if (c.tokens.size() > max_tokens) {
        c.tokens.resize(max_tokens);
        c.text = join_tokens(c.tokens);
    }
    c.provenance = provenance;
    c.method_tag = std::move(method_tag);
    c.parent_id = std::move(parent_id);
    if (provenance == Provenance::augmented && (!c.method_tag || !c.parent_id))
        throw std::invalid_argument("augmented caption requires method_tag and parent_id");
    return c;
}

json to_json(const CaptionRecord& c) {
    json j = {{"caption_id", c.caption_id},
              {"image_id", c.image_id},
              {"text", c.text},
              {"tokens", c.tokens},
              {"provenance", to_string(c.provenance)}};
    if (c.method_tag) j["method_tag"] = *c.method_tag;
    if (c.parent_id) j["parent_id"] = *c.parent_id;
    return j;
}

CaptionRecord caption_from_json(const json& j) {
    try {
        std::optional<std::string> method, parent;
        if (j.contains("method_tag") && !j["method_tag"].is_null()) method = j["method_tag"].get<std::string>();
        if (j.contains("parent_id") && !j["parent_id"].is_null()) parent = j["parent_id"].get<std::string>();
        const auto prov = j.contains("provenance") ? provenance_from_string(j["provenance"].get<std::string>())
                                                   : Provenance::ground_truth;
        return make_caption(j.at("caption_id").get<std::string>(), j.at("image_id").get<std::string>(),
                            j.at("text").get<std::string>(), prov, method, parent);
    } catch (const json::exception& e) {
        throw ParseError(std::string("caption record: ") + e.what());
    }
}

json to_json(const BBox& b) {
    json j = {{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}};
    if (!b.label.empty()) j["label"] = b.label;
    return j;
}

BBox bbox_from_json(const json& j) {
    BBox b;
    b.x = j.at("x").get<double>();
    b.y = j.at("y").get<double>();
    b.w = j.at("w").get<double>();
    b.h = j.at("h").get<double>();
    if (j.contains("label") && j["label"].is_string()) b.label = j["label"].get<std::string>();
    return b;
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(std::vector<std::string> id_to_token) {
    static const std::vector<std::string> specials = {"<pad>", "<start>", "<end>", "<unk>"};
    const bool has_specials = id_to_token.size() >= kNumSpecials &&
                              std::equal(specials.begin(), specials.end(), id_to_token.begin());
    if (!has_specials) id_to_token.insert(id_to_token.begin(), specials.begin(), specials.end());
    id_to_token_ = std::move(id_to_token);
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
        if (!token_to_id_.emplace(id_to_token_[i], static_cast<int>(i)).second)
            throw std::invalid_argument("vocabulary: duplicate token '" + id_to_token_[i] + "'");
    }
}

int Vocabulary::id(std::string_view token) const {
    const auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
        throw std::out_of_range("vocabulary id out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return token_to_id_.find(token) != token_to_id_.end(); }

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (const int i : ids) out.push_back(token(i));
    return out;
}

Vocabulary build_vocab(std::span<const CaptionRecord> captions, int min_freq) {
    if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
    std::map<std::string, int> freq;
    for (const auto& c : captions)
        for (const auto& t : c.tokens) ++freq[t];
    std::vector<std::pair<std::string, int>> kept;
    for (const auto& [tok, n] : freq)
        if (n >= min_freq) kept.emplace_back(tok, n);
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size());
    for (auto& [tok, n] : kept) tokens.push_back(tok);
    return Vocabulary(std::move(tokens));
}

bool image_id_less(std::string_view a, std::string_view b) {
    auto all_digits = [](std::string_view s) {
        return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
    };
    if (all_digits(a) && all_digits(b)) {
        auto strip = [](std::string_view s) {
            const auto nz = s.find_first_not_of('0');
            return nz == std::string_view::npos ? std::string_view("0") : s.substr(nz);
        };
        const auto sa = strip(a), sb = strip(b);
        if (sa.size() != sb.size()) return sa.size() < sb.size();
        if (sa != sb) return sa < sb;
    }
    return a < b;
}

std::map<std::string, std::vector<CaptionRecord>> captions_by_image(std::span<const CaptionRecord> captions) {
    std::map<std::string, std::vector<CaptionRecord>> out;
    for (const auto& c : captions) out[c.image_id].push_back(c);
    return out;
}

namespace {

json parse_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::string id_string(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    throw ParseError("id must be a string or integer");
}

// Resolves pixels (eager) or checks the file (lazy). Returns false and
// records an error when the file is missing or unreadable.
bool attach_pixels(ImageRecord& img, const fs::path& file, const LoadOptions& options,
                   std::vector<std::string>& errors) {
    std::error_code ec;
    if (!fs::exists(file, ec)) {
        errors.push_back("image " + img.image_id + ": missing file " + file.string());
        return false;
    }
    img.path = file;
    try {
        if (options.pixels == PixelMode::eager || img.width < 1 || img.height < 1) {
            auto decoded = read_image(file);
            if (img.width >= 1 && (decoded.width != img.width || decoded.height != img.height)) {
                errors.push_back("image " + img.image_id + ": dimensions differ from annotation");
                return false;
            }
            img.width = decoded.width;
            img.height = decoded.height;
            if (options.pixels == PixelMode::eager)
                img.data = std::make_shared<const std::vector<std::uint8_t>>(std::move(decoded.rgb));
        }
    } catch (const std::exception& e) {
        errors.push_back("image " + img.image_id + ": " + e.what());
        return false;
    }
    return true;
}

struct RawImage {
    std::string id;
    std::string file_name;
    int width = 0;
    int height = 0;
};

struct RawCaption {
    std::string caption_id;
    std::string image_id;
    std::string text;
};

void read_coco_style(const json& root, std::vector<RawImage>& images, std::vector<RawCaption>& captions) {
    try {
        for (const auto& im : root.value("images", json::array())) {
            RawImage r;
            r.id = id_string(im.at("id"));
            r.file_name = im.value("file_name", r.id);
            r.width = im.value("width", 0);
            r.height = im.value("height", 0);
            images.push_back(std::move(r));
        }
        std::unordered_map<std::string, int> per_image;
        for (const auto& an : root.value("annotations", json::array())) {
            RawCaption c;
            c.image_id = id_string(an.at("image_id"));
            c.text = an.at("caption").get<std::string>();
            const int idx = per_image[c.image_id]++;
            c.caption_id = an.contains("id") ? id_string(an["id"]) : c.image_id + "-" + std::to_string(idx);
            captions.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("annotation json: ") + e.what());
    }
}

void attach_captions(LoadResult& result, const std::vector<RawCaption>& raw, const std::set<std::string>& dropped,
                     const LoadOptions& options) {
    std::set<std::string> kept;
    for (const auto& img : result.images) kept.insert(img.image_id);
    for (const auto& c : raw) {
        if (kept.count(c.image_id)) {
            result.captions.push_back(make_caption(c.caption_id, c.image_id, c.text, Provenance::ground_truth,
                                                   std::nullopt, std::nullopt, options.max_tokens));
        } else if (!dropped.count(c.image_id)) {
            result.errors.push_back("caption " + c.caption_id + ": unknown image " + c.image_id);
        }
    }
}

std::map<std::string, std::string> read_split_file(const fs::path& path) {
    const json root = parse_json_file(path);
    std::map<std::string, std::string> split;
    try {
        if (root.is_object() && root.contains("images") && root["images"].is_array()) {
            for (const auto& im : root["images"]) {
                const json& idv = im.contains("cocoid") ? im["cocoid"] : im.at("id");
                std::string s = im.at("split").get<std::string>();
                if (s == "restval") s = "train";
                split[id_string(idv)] = s;
            }
        } else if (root.is_object()) {
            for (const auto& [k, v] : root.items()) split[k] = v.get<std::string>();
        } else {
            throw ParseError(path.string() + ": split file must be a JSON object");
        }
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    for (const auto& [id, s] : split)
        if (s != "train" && s != "val" && s != "test")
            throw ParseError(path.string() + ": unknown split '" + s + "' for image " + id);
    return split;
}

}  // namespace

LoadResult load_coco(const fs::path& annotation_file, const std::optional<fs::path>& split_file,
                     const LoadOptions& options) {
    const json root = parse_json_file(annotation_file);
    std::vector<RawImage> raw_images;
    std::vector<RawCaption> raw_captions;
    read_coco_style(root, raw_images, raw_captions);

    std::optional<std::map<std::string, std::string>> split;
    if (split_file) split = read_split_file(*split_file);
    const fs::path image_root = options.image_root.value_or(annotation_file.parent_path());

    LoadResult result;
    std::set<std::string> dropped;
    for (const auto& r : raw_images) {
        ImageRecord img;
        img.image_id = r.id;
        img.width = r.width;
        img.height = r.height;
        if (split) {
            const auto it = split->find(r.id);
            if (it == split->end()) {
                result.errors.push_back("image " + r.id + ": not listed in split file");
                dropped.insert(r.id);
                continue;
            }
            img.split_tag = it->second;
        } else if (r.file_name.find("val2014") != std::string::npos) {
            img.split_tag = "val";
        } else if (r.file_name.find("test") != std::string::npos) {
            img.split_tag = "test";
        }
        if (!attach_pixels(img, image_root / r.file_name, options, result.errors)) {
            dropped.insert(r.id);
            continue;
        }
        result.images.push_back(std::move(img));
    }
    attach_captions(result, raw_captions, dropped, options);
    return result;
}

LoadResult load_vizwiz(const fs::path& annotation_dir, const LoadOptions& options) {
    if (options.val_fraction < 0 || options.val_fraction >= 1)
        throw std::invalid_argument("load_vizwiz: val_fraction must be in [0, 1)");
    const fs::path image_root = options.image_root.value_or(annotation_dir);
    LoadResult result;
    std::set<std::string> dropped;
    std::vector<RawCaption> raw_captions;

    auto load_part = [&](const std::string& official, const std::string& file) {
        const fs::path path = annotation_dir / file;
        std::vector<RawImage> images;
        if (!fs::exists(path)) return images;
        read_coco_style(parse_json_file(path), images, raw_captions);
        std::vector<RawImage> kept;
        for (auto& r : images) {
            fs::path file_path = image_root / official / r.file_name;
            if (!fs::exists(file_path)) file_path = image_root / r.file_name;
            r.file_name = file_path.string();
            kept.push_back(std::move(r));
        }
        return kept;
    };

    auto train = load_part("train", "train.json");
    auto val = load_part("val", "val.json");
    std::stable_sort(train.begin(), train.end(),
                     [](const RawImage& a, const RawImage& b) { return image_id_less(a.id, b.id); });
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(train.size()) * options.val_fraction + 1e-9));
    const std::size_t first_val = train.size() - n_val;

    auto emit = [&](const RawImage& r, const std::string& tag) {
        ImageRecord img;
        img.image_id = r.id;
        img.width = r.width;
        img.height = r.height;
        img.split_tag = tag;
        if (!attach_pixels(img, r.file_name, options, result.errors)) {
            dropped.insert(r.id);
            return;
        }
        result.images.push_back(std::move(img));
    };
    for (std::size_t i = 0; i < train.size(); ++i) emit(train[i], i >= first_val ? "val" : "train");
    for (const auto& r : val) emit(r, "test");
    attach_captions(result, raw_captions, dropped, options);
    return result;
}

namespace {

std::string file_stem_for(const std::string& id) {
    std::string out;
    for (const char c : id) out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_');
    return out + "-" + std::to_string(std::hash<std::string>{}(id) % 100000);
}

}  // namespace

void save_dataset(const fs::path& dir, std::span<const ImageRecord> images, std::span<const CaptionRecord> captions) {
    fs::create_directories(dir / "images");
    json root = {{"v", 1}, {"images", json::array()}, {"captions", json::array()}};
    for (const auto& img : images) {
        const std::string rel = "images/" + file_stem_for(img.image_id) + ".ppm";
        const auto px = img.pixels();
        write_ppm(dir / rel, img.width, img.height, *px);
        json boxes = json::array();
        for (const auto& b : img.bboxes) boxes.push_back(to_json(b));
        root["images"].push_back({{"id", img.image_id},
                                  {"file", rel},
                                  {"width", img.width},
                                  {"height", img.height},
                                  {"split", img.split_tag},
                                  {"bboxes", boxes}});
    }
    for (const auto& c : captions) root["captions"].push_back(to_json(c));
    std::ofstream out(dir / "dataset.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "dataset.json").string());
    out << root.dump(1) << "\n";
}

LoadResult load_dataset(const fs::path& dir, const LoadOptions& options) {
    const json root = parse_json_file(dir / "dataset.json");
    LoadResult result;
    std::set<std::string> dropped;
    try {
        for (const auto& im : root.at("images")) {
            ImageRecord img;
            img.image_id = im.at("id").get<std::string>();
            img.width = im.at("width").get<int>();
            img.height = im.at("height").get<int>();
            img.split_tag = im.value("split", "train");
            for (const auto& b : im.value("bboxes", json::array())) img.bboxes.push_back(bbox_from_json(b));
            if (!attach_pixels(img, dir / im.at("file").get<std::string>(), options, result.errors)) {
                dropped.insert(img.image_id);
                continue;
            }
            validate(img);
            result.images.push_back(std::move(img));
        }
        std::set<std::string> kept;
        for (const auto& img : result.images) kept.insert(img.image_id);
        for (const auto& c : root.at("captions")) {
            auto rec = caption_from_json(c);
            if (kept.count(rec.image_id))
                result.captions.push_back(std::move(rec));
            else if (!dropped.count(rec.image_id))
                result.errors.push_back("caption " + rec.caption_id + ": unknown image " + rec.image_id);
        }
    } catch (const json::exception& e) {
        throw ParseError((dir / "dataset.json").string() + ": " + e.what());
    }
    return result;
}

}  // namespace capfeed
