#include "capfeed/joint_augment.hpp"

#include "capfeed/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>

namespace capfeed {

std::string instantiate_template(const std::string& tmpl, const std::string& label) {
    std::string out = tmpl;
    const std::string key = "{label}";
    for (std::size_t pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + label.size()))
        out.replace(pos, key.size(), label);
    return out;
}

namespace {

struct Patch {
    int w = 0, h = 0;
    std::vector<std::uint8_t> rgb;
};

Patch crop(const ImageRecord& img, const BBox& box) {
    const int x0 = std::clamp(static_cast<int>(std::floor(box.x)), 0, img.width - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(box.y)), 0, img.height - 1);
    const int x1 = std::clamp(static_cast<int>(std::ceil(box.x + box.w)), x0 + 1, img.width);
    const int y1 = std::clamp(static_cast<int>(std::ceil(box.y + box.h)), y0 + 1, img.height);
    const auto px = img.pixels();
    Patch p{x1 - x0, y1 - y0, {}};
    p.rgb.reserve(static_cast<std::size_t>(p.w) * p.h * 3);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            for (int c = 0; c < 3; ++c) p.rgb.push_back((*px)[(static_cast<std::size_t>(y) * img.width + x) * 3 + c]);
    return p;
}

Patch resize(const Patch& p, int w, int h) {
    Patch out{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
    const double sx = static_cast<double>(p.w) / w, sy = static_cast<double>(p.h) / h;
    for (int y = 0; y < h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, p.h - 1.0);
        const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, p.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, p.w - 1.0);
            const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, p.w - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                auto at = [&](int xx, int yy) { return static_cast<double>(p.rgb[(static_cast<std::size_t>(yy) * p.w + xx) * 3 + c]); };
                const double v = (1 - wy) * ((1 - wx) * at(x0, y0) + wx * at(x1, y0)) + wy * ((1 - wx) * at(x0, y1) + wx * at(x1, y1));
                out.rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

double overlap_fraction(const BBox& a, const BBox& b) {
    const double smaller = std::min(a.area(), b.area());
    return smaller > 0 ? intersection_area(a, b) / smaller : 0.0;
}

}  // namespace

std::pair<ImageRecord, CaptionRecord> cutmix_joint(const ImageRecord& src, const BBox& src_box, const ImageRecord& dst,
                                                   const CaptionRecord& dst_caption, std::uint64_t placement_seed,
                                                   const CutMixConfig& config) {
    if (src_box.label.empty()) throw std::invalid_argument("cutmix_joint: source box needs a label");
    if (!src_box.inside(src.width, src.height)) throw std::invalid_argument("cutmix_joint: source box outside image");
    validate(dst);

    Patch patch = crop(src, src_box);
    if (patch.w > dst.width || patch.h > dst.height) {
        // Shrink to at most a quarter of the destination area, keeping aspect.
        const double area_scale = std::sqrt(0.25 * dst.width * dst.height / (static_cast<double>(patch.w) * patch.h));
        const double fit_scale = std::min(static_cast<double>(dst.width) / patch.w, static_cast<double>(dst.height) / patch.h);
        const double s = std::min(area_scale, fit_scale);
        patch = resize(patch, std::max(1, static_cast<int>(std::floor(patch.w * s))),
                       std::max(1, static_cast<int>(std::floor(patch.h * s))));
    }

    std::mt19937_64 rng(placement_seed);
    std::uniform_int_distribution<int> px(0, dst.width - patch.w);
    std::uniform_int_distribution<int> py(0, dst.height - patch.h);
    std::optional<BBox> placed;
    for (int attempt = 0; attempt < config.max_placements && !placed; ++attempt) {
        BBox candidate{static_cast<double>(px(rng)), static_cast<double>(py(rng)), static_cast<double>(patch.w),
                       static_cast<double>(patch.h), src_box.label};
        const bool clear = std::none_of(dst.bboxes.begin(), dst.bboxes.end(), [&](const BBox& b) {
            return overlap_fraction(candidate, b) > config.max_overlap;
        });
        if (clear) placed = candidate;
    }
    if (!placed)
        throw PlacementError("cutmix_joint: no placement without overlap after " + std::to_string(config.max_placements) +
                             " attempts");

    auto pixels = *dst.pixels();
    const int ox = static_cast<int>(placed->x), oy = static_cast<int>(placed->y);
    for (int y = 0; y < patch.h; ++y)
        for (int x = 0; x < patch.w; ++x)
            for (int c = 0; c < 3; ++c)
                pixels[(static_cast<std::size_t>(oy + y) * dst.width + ox + x) * 3 + c] =
                    patch.rgb[(static_cast<std::size_t>(y) * patch.w + x) * 3 + c];
    auto boxes = dst.bboxes;
    boxes.push_back(*placed);
    const std::string tag = "cutmix" + std::to_string(placement_seed);
    auto image = make_image(dst.image_id + "#" + tag, dst.width, dst.height, std::move(pixels), std::move(boxes), dst.split_tag);
    std::string text = dst_caption.text;
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.pop_back();
    if (!text.empty() && text.back() != '.' && text.back() != '!' && text.back() != '?') text += " .";
    text += " " + instantiate_template(config.caption_template, src_box.label);
    auto caption = make_caption(dst_caption.caption_id + "#" + tag, image.image_id, text, Provenance::augmented, "cutmix",
                                dst_caption.caption_id);
    return {std::move(image), std::move(caption)};
}

}  // namespace capfeed
