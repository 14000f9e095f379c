#include "capfeed/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace capfeed {
namespace {

std::array<std::uint8_t, 3> color_rgb(const std::string& color) {
    if (color == "red") return {220, 30, 30};
    if (color == "green") return {30, 170, 40};
    if (color == "blue") return {30, 60, 220};
    if (color == "yellow") return {230, 210, 20};
    if (color == "purple") return {140, 40, 170};
    if (color == "orange") return {240, 130, 20};
    throw std::invalid_argument("unknown color '" + color + "'");
}

bool point_in_polygon(double px, double py, const std::vector<std::array<double, 2>>& poly) {
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a[1] > py) != (b[1] > py) && px < (b[0] - a[0]) * (py - a[1]) / (b[1] - a[1]) + a[0]) inside = !inside;
    }
    return inside;
}

bool in_shape(const std::string& shape, double dx, double dy, double r) {
    if (shape == "circle") return dx * dx + dy * dy <= r * r;
    if (shape == "square") return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
    if (shape == "triangle") return point_in_polygon(dx, dy, {{0, -r}, {-r, r * 0.8}, {r, r * 0.8}});
    if (shape == "star") {
        std::vector<std::array<double, 2>> poly;
        for (int k = 0; k < 10; ++k) {
            const double rad = (k % 2 == 0) ? r : r * 0.42;
            const double ang = -std::numbers::pi / 2 + k * std::numbers::pi / 5;
            poly.push_back({rad * std::cos(ang), rad * std::sin(ang)});
        }
        return point_in_polygon(dx, dy, poly);
    }
    throw std::invalid_argument("unknown shape '" + shape + "'");
}

}  // namespace

ImageRecord render_shape_image(const std::string& image_id, const ShapeSpec& spec, std::uint64_t seed,
                               const SyntheticOptions& options) {
    const int n = options.image_size;
    if (n < 16) throw std::invalid_argument("render_shape_image: image_size must be >= 16");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> radius_dist(0.22 * n, 0.34 * n);
    const double r = radius_dist(rng);
    std::uniform_real_distribution<double> jitter(-0.1 * n, 0.1 * n);
    const double cx = n / 2.0 + jitter(rng);
    const double cy = n / 2.0 + jitter(rng);
    std::uniform_int_distribution<int> noise(-6, 6);
    const auto fg = color_rgb(spec.color);

    std::vector<std::uint8_t> px(static_cast<std::size_t>(n) * n * 3);
    int x0 = n, y0 = n, x1 = -1, y1 = -1;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const bool on = in_shape(spec.shape, x + 0.5 - cx, y + 0.5 - cy, r);
            for (int c = 0; c < 3; ++c) {
                const int base = on ? fg[static_cast<std::size_t>(c)] : 240;
                px[(static_cast<std::size_t>(y) * n + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(base + noise(rng), 0, 255));
            }
            if (on) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
        }
    std::vector<BBox> boxes;
    if (x1 >= x0)
        boxes.push_back({static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0 + 1),
                         static_cast<double>(y1 - y0 + 1), spec.shape});
    return make_image(image_id, n, n, std::move(px), std::move(boxes), options.split_tag);
}

std::vector<CaptionRecord> shape_captions(const ImageRecord& image, const ShapeSpec& spec, int count) {
    const bool large = !image.bboxes.empty() && image.bboxes[0].area() > 0.25 * image.width * image.height;
    const std::string size = large ? "large" : "small";
    const std::vector<std::string> templates = {
        "a " + spec.color + " " + spec.shape,
        "a " + spec.color + " " + spec.shape + " on a white background",
        "there is a " + spec.color + " " + spec.shape,
        "a " + size + " " + spec.color + " " + spec.shape,
        "the " + spec.shape + " is " + spec.color,
    };
    count = std::clamp(count, 1, static_cast<int>(templates.size()));
    std::vector<CaptionRecord> out;
    for (int k = 0; k < count; ++k)
        out.push_back(make_caption(image.image_id + "-c" + std::to_string(k), image.image_id,
                                   templates[static_cast<std::size_t>(k)]));
    return out;
}

SyntheticDataset make_shapes_dataset(const std::vector<std::string>& shapes, const std::vector<std::string>& colors,
                                     int per_combination, std::uint64_t seed, const std::string& id_prefix,
                                     const SyntheticOptions& options) {
    SyntheticDataset ds;
    std::mt19937_64 rng(seed);
    int index = 0;
    for (int rep = 0; rep < per_combination; ++rep)
        for (const auto& shape : shapes)
            for (const auto& color : colors) {
                const ShapeSpec spec{shape, color};
                auto img = render_shape_image(id_prefix + "-" + std::to_string(index++), spec, rng(), options);
                auto caps = shape_captions(img, spec, options.captions_per_image);
                ds.captions.insert(ds.captions.end(), caps.begin(), caps.end());
                ds.images.push_back(std::move(img));
                ds.specs.push_back(spec);
            }
    return ds;
}

}  // namespace capfeed
