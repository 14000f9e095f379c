#pragma once

#include "capfeed/dataset.hpp"

#include <cstdint>
#include <string>
#include <utility>

namespace capfeed {

struct CutMixConfig {
    std::string caption_template = "there is a {label} .";
    // A placement is rejected when it overlaps an existing box by more than
    // this fraction (intersection over the smaller of the two areas).
    double max_overlap = 0.3;
    int max_placements = 20;
};

// "{label}" replaced by the label.
std::string instantiate_template(const std::string& tmpl, const std::string& label);

// Pastes the src_box region of `src` into `dst` at a seeded location that
// does not overlap dst's boxes, adds a labeled box there and appends the
// template sentence to the caption. Throws PlacementError when no location
// is found and std::invalid_argument when the box has no label.
std::pair<ImageRecord, CaptionRecord> cutmix_joint(const ImageRecord& src, const BBox& src_box, const ImageRecord& dst,
                                                   const CaptionRecord& dst_caption, std::uint64_t placement_seed,
                                                   const CutMixConfig& config = {});

}  // namespace capfeed
