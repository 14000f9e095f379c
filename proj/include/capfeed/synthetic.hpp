#pragma once

#include "capfeed/dataset.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace capfeed {

// Toy "synthetic shapes" data: one colored shape on a light background with
// a tight labeled bbox and template captions ("a red circle", ...).
inline const std::vector<std::string> kShapeNames = {"circle", "square", "triangle", "star"};
inline const std::vector<std::string> kColorNames = {"red", "green", "blue", "yellow"};

struct ShapeSpec {
    std::string shape;
    std::string color;
};

struct SyntheticOptions {
    int image_size = 64;
    int captions_per_image = 1;  // 1..5 template variants
    std::string split_tag = "train";
};

ImageRecord render_shape_image(const std::string& image_id, const ShapeSpec& spec, std::uint64_t seed,
                               const SyntheticOptions& options = {});

// Caption templates for one image; the first is always "a <color> <shape>".
std::vector<CaptionRecord> shape_captions(const ImageRecord& image, const ShapeSpec& spec, int count);

struct SyntheticDataset {
    std::vector<ImageRecord> images;
    std::vector<CaptionRecord> captions;
    std::vector<ShapeSpec> specs;  // parallel to images
};

// `per_combination` images for every (shape, color) pair, ids "<prefix>-<n>".
SyntheticDataset make_shapes_dataset(const std::vector<std::string>& shapes, const std::vector<std::string>& colors,
                                     int per_combination, std::uint64_t seed, const std::string& id_prefix = "shape",
                                     const SyntheticOptions& options = {});

}  // namespace capfeed
