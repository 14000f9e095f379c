#include "capfeed/image_augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace capfeed {

std::string Transform::name() const {
    switch (kind) {
        case Kind::rotate: return "rotate";
        case Kind::hflip: return "hflip";
        case Kind::vflip: return "vflip";
        case Kind::blur: return "blur";
        case Kind::optical_distort: return "optical_distort";
        case Kind::grid_distort: return "grid_distort";
    }
    return "unknown";
}

nlohmann::json Transform::to_json() const {
    nlohmann::json j = {{"kind", name()}};
    switch (kind) {
        case Kind::rotate: j["angle_deg"] = angle_deg; break;
        case Kind::blur: j["radius"] = radius; break;
        case Kind::optical_distort: j["k"] = k; break;
        case Kind::grid_distort:
            j["steps"] = steps;
            j["magnitude"] = magnitude;
            break;
        default: break;
    }
    return j;
}

void validate(const Transform& t) {
    switch (t.kind) {
        case Transform::Kind::rotate:
            if (!(t.angle_deg >= -180 && t.angle_deg <= 180))
                throw std::invalid_argument("rotate: angle must be in [-180, 180]");
            break;
        case Transform::Kind::blur:
            if (t.radius < 0 || t.radius > 64) throw std::invalid_argument("blur: radius must be in [0, 64]");
            break;
        case Transform::Kind::optical_distort:
            if (!(std::abs(t.k) <= kMaxOpticalK)) throw std::invalid_argument("optical_distort: |k| exceeds limit");
            break;
        case Transform::Kind::grid_distort:
            if (t.steps < 1 || t.steps > 64) throw std::invalid_argument("grid_distort: steps must be in [1, 64]");
            if (!(t.magnitude >= 0 && t.magnitude <= kMaxGridMagnitude))
                throw std::invalid_argument("grid_distort: magnitude out of range");
            break;
        default: break;
    }
}

namespace {

std::vector<double> random_knots(int steps, double magnitude, double extent, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> stretch(1.0 - magnitude, 1.0 + magnitude);
    std::vector<double> widths(static_cast<std::size_t>(steps));
    for (auto& w : widths) w = stretch(rng);
    double total = 0;
    for (const double w : widths) total += w;
    std::vector<double> knots = {0.0};
    double acc = 0;
    for (const double w : widths) {
        acc += w;
        knots.push_back(extent * acc / total);
    }
    knots.back() = extent;
    return knots;
}

// Piecewise-linear map between two monotone knot sequences, extended
// linearly past the ends.
double piecewise(double v, const std::vector<double>& from, const std::vector<double>& to) {
    const std::size_t n = from.size() - 1;
    std::size_t i = static_cast<std::size_t>(std::upper_bound(from.begin(), from.end(), v) - from.begin());
    i = std::clamp<std::size_t>(i == 0 ? 0 : i - 1, 0, n - 1);
    const double t = (v - from[i]) / (from[i + 1] - from[i]);
    return to[i] + t * (to[i + 1] - to[i]);
}

std::vector<double> uniform_knots(int steps, double extent) {
    std::vector<double> k;
    for (int i = 0; i <= steps; ++i) k.push_back(extent * i / steps);
    return k;
}

std::vector<std::uint8_t> box_blur(const std::vector<std::uint8_t>& px, int w, int h, int r) {
    if (r == 0) return px;
    std::vector<double> tmp(px.size());
    auto idx = [w](int x, int y, int c) { return (static_cast<std::size_t>(y) * w + x) * 3 + c; };
    const double norm = 1.0 / (2 * r + 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0;
                for (int d = -r; d <= r; ++d) s += px[idx(std::clamp(x + d, 0, w - 1), y, c)];
                tmp[idx(x, y, c)] = s * norm;
            }
    std::vector<std::uint8_t> out(px.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0;
                for (int d = -r; d <= r; ++d) s += tmp[idx(x, std::clamp(y + d, 0, h - 1), c)];
                out[idx(x, y, c)] = static_cast<std::uint8_t>(std::clamp(std::lround(s * norm), 0L, 255L));
            }
    return out;
}

}  // namespace

Warp::Warp(const Transform& t, int width, int height, std::uint64_t seed)
    : t_(t), w_(width), h_(height), out_w_(width), out_h_(height) {
    validate(t);
    if (t.kind == Transform::Kind::rotate) {
        const int q = quarter_turns();
        if (q == 1 || q == 3) std::swap(out_w_, out_h_);
        if (q < 0) {
            const double rad = t.angle_deg * std::numbers::pi / 180.0;
            cos_ = std::cos(rad);
            sin_ = std::sin(rad);
            out_w_ = static_cast<int>(std::ceil(std::abs(w_ * cos_) + std::abs(h_ * sin_) - 1e-9));
            out_h_ = static_cast<int>(std::ceil(std::abs(w_ * sin_) + std::abs(h_ * cos_) - 1e-9));
        }
    } else if (t.kind == Transform::Kind::grid_distort) {
        std::mt19937_64 rng(seed);
        grid_x_ = random_knots(t.steps, t.magnitude, w_, rng);
        grid_y_ = random_knots(t.steps, t.magnitude, h_, rng);
    }
}

int Warp::quarter_turns() const {
    const double a = t_.angle_deg;
    if (a == 0) return 0;
    if (a == 90) return 1;
    if (a == 180 || a == -180) return 2;
    if (a == -90) return 3;
    return -1;
}

std::pair<double, double> Warp::to_source(double x, double y) const {
    const double W = w_, H = h_;
    switch (t_.kind) {
        case Transform::Kind::hflip: return {W - x, y};
        case Transform::Kind::vflip: return {x, H - y};
        case Transform::Kind::blur: return {x, y};
        case Transform::Kind::rotate: {
            switch (quarter_turns()) {
                case 0: return {x, y};
                case 1: return {W - y, x};
                case 2: return {W - x, H - y};
                case 3: return {y, H - x};
                default: break;
            }
            const double dx = x - out_w_ / 2.0, dy = y - out_h_ / 2.0;
            return {W / 2.0 + dx * cos_ - dy * sin_, H / 2.0 + dx * sin_ + dy * cos_};
        }
        case Transform::Kind::optical_distort: {
            const double cx = W / 2.0, cy = H / 2.0, R = std::hypot(cx, cy);
            const double dx = x - cx, dy = y - cy;
            const double rho2 = (dx * dx + dy * dy) / (R * R);
            const double s = 1.0 + t_.k * rho2;
            return {cx + dx * s, cy + dy * s};
        }
        case Transform::Kind::grid_distort:
            return {piecewise(x, uniform_knots(t_.steps, W), grid_x_), piecewise(y, uniform_knots(t_.steps, H), grid_y_)};
    }
    return {x, y};
}

std::pair<double, double> Warp::to_output(double x, double y) const {
    const double W = w_, H = h_;
    switch (t_.kind) {
        case Transform::Kind::hflip: return {W - x, y};
        case Transform::Kind::vflip: return {x, H - y};
        case Transform::Kind::blur: return {x, y};
        case Transform::Kind::rotate: {
            switch (quarter_turns()) {
                case 0: return {x, y};
                case 1: return {y, W - x};
                case 2: return {W - x, H - y};
                case 3: return {H - y, x};
                default: break;
            }
            const double dx = x - W / 2.0, dy = y - H / 2.0;
            return {out_w_ / 2.0 + dx * cos_ + dy * sin_, out_h_ / 2.0 - dx * sin_ + dy * cos_};
        }
        case Transform::Kind::optical_distort: {
            const double cx = W / 2.0, cy = H / 2.0, R = std::hypot(cx, cy);
            const double dx = x - cx, dy = y - cy;
            const double s = std::hypot(dx, dy) / R;
            if (s == 0) return {cx, cy};
            const double k = t_.k;
            auto f = [k](double rho) { return rho * (1.0 + k * rho * rho); };
            // f is increasing on [0, rho_max]; solve f(rho) = s by bisection.
            double lo, hi;
            if (k >= 0) {
                lo = 0;
                hi = s;
            } else {
                lo = s;
                hi = 1.0 / std::sqrt(-3.0 * k);
                if (f(hi) < s) lo = hi;
            }
            for (int it = 0; it < 80 && hi - lo > 1e-13; ++it) {
                const double mid = 0.5 * (lo + hi);
                (f(mid) < s ? lo : hi) = mid;
            }
            const double rho = 0.5 * (lo + hi);
            return {cx + dx * rho / s, cy + dy * rho / s};
        }
        case Transform::Kind::grid_distort:
            return {piecewise(x, grid_x_, uniform_knots(t_.steps, W)), piecewise(y, grid_y_, uniform_knots(t_.steps, H))};
    }
    return {x, y};
}

namespace {

using Point = std::pair<double, double>;

// Sutherland-Hodgman clip of a closed polygon against [0, W] x [0, H].
std::vector<Point> clip_polygon(std::vector<Point> poly, double W, double H) {
    auto clip = [&](auto inside, auto cross) {
        std::vector<Point> out;
        for (std::size_t i = 0; i < poly.size(); ++i) {
            const Point& a = poly[i];
            const Point& b = poly[(i + 1) % poly.size()];
            if (inside(a)) {
                out.push_back(a);
                if (!inside(b)) out.push_back(cross(a, b));
            } else if (inside(b)) {
                out.push_back(cross(a, b));
            }
        }
        poly = std::move(out);
    };
    auto at_x = [](double x) {
        return [x](const Point& a, const Point& b) {
            return Point{x, a.second + (b.second - a.second) * (x - a.first) / (b.first - a.first)};
        };
    };
    auto at_y = [](double y) {
        return [y](const Point& a, const Point& b) {
            return Point{a.first + (b.first - a.first) * (y - a.second) / (b.second - a.second), y};
        };
    };
    clip([](const Point& p) { return p.first >= 0; }, at_x(0));
    if (!poly.empty()) clip([W](const Point& p) { return p.first <= W; }, at_x(W));
    if (!poly.empty()) clip([](const Point& p) { return p.second >= 0; }, at_y(0));
    if (!poly.empty()) clip([H](const Point& p) { return p.second <= H; }, at_y(H));
    return poly;
}

}  // namespace

std::optional<BBox> remap_box(const BBox& box, const Warp& warp) {
    if (warp.is_photometric()) return box;
    // The box boundary is walked clockwise: corners only for rigid
    // transforms, 8 samples per edge for distortions. The mapped polygon is
    // clipped to the output before taking its axis-aligned hull, so boundary
    // parts that leave the canvas do not stretch the box along the other axis.
    const int per_edge = warp.is_rigid() ? 2 : 8;
    std::vector<Point> boundary;
    for (int i = 0; i + 1 < per_edge; ++i) {
        const double t = static_cast<double>(i) / (per_edge - 1);
        boundary.emplace_back(box.x + t * box.w, box.y);
    }
    for (int i = 0; i + 1 < per_edge; ++i) {
        const double t = static_cast<double>(i) / (per_edge - 1);
        boundary.emplace_back(box.x + box.w, box.y + t * box.h);
    }
    for (int i = 0; i + 1 < per_edge; ++i) {
        const double t = static_cast<double>(i) / (per_edge - 1);
        boundary.emplace_back(box.x + box.w - t * box.w, box.y + box.h);
    }
    for (int i = 0; i + 1 < per_edge; ++i) {
        const double t = static_cast<double>(i) / (per_edge - 1);
        boundary.emplace_back(box.x, box.y + box.h - t * box.h);
    }
    for (auto& p : boundary) p = warp.to_output(p.first, p.second);
    const auto clipped = clip_polygon(std::move(boundary), warp.out_width(), warp.out_height());
    if (clipped.empty()) return std::nullopt;
    double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
    for (const auto& [px, py] : clipped) {
        x0 = std::min(x0, px);
        y0 = std::min(y0, py);
        x1 = std::max(x1, px);
        y1 = std::max(y1, py);
    }
    // Guards against rounding just outside the canvas.
    x0 = std::clamp(x0, 0.0, static_cast<double>(warp.out_width()));
    x1 = std::clamp(x1, 0.0, static_cast<double>(warp.out_width()));
    y0 = std::clamp(y0, 0.0, static_cast<double>(warp.out_height()));
    y1 = std::clamp(y1, 0.0, static_cast<double>(warp.out_height()));
    BBox out{x0, y0, x1 - x0, y1 - y0, box.label};
    if (out.w <= 0 || out.h <= 0 || out.area() < kMinBoxArea) return std::nullopt;
    return out;
}

ImageRecord apply_transform(const ImageRecord& image, const Transform& t, std::uint64_t seed) {
    validate(image);
    const Warp warp(t, image.width, image.height, seed);
    const auto src = image.pixels();
    std::vector<std::uint8_t> out;
    if (t.kind == Transform::Kind::blur) {
        out = box_blur(*src, image.width, image.height, t.radius);
    } else {
        const int W = warp.out_width(), H = warp.out_height();
        out.assign(static_cast<std::size_t>(W) * H * 3, 0);
        auto at = [&](int x, int y, int c) {
            return static_cast<double>((*src)[(static_cast<std::size_t>(y) * image.width + x) * 3 + c]);
        };
        for (int oy = 0; oy < H; ++oy)
            for (int ox = 0; ox < W; ++ox) {
                const auto [sx, sy] = warp.to_source(ox + 0.5, oy + 0.5);
                const double fx = sx - 0.5, fy = sy - 0.5;
                if (fx < -0.5 || fy < -0.5 || fx > image.width - 0.5 || fy > image.height - 0.5) continue;
                const double cx = std::clamp(fx, 0.0, static_cast<double>(image.width - 1));
                const double cy = std::clamp(fy, 0.0, static_cast<double>(image.height - 1));
                const int x0 = static_cast<int>(cx), y0 = static_cast<int>(cy);
                const int x1 = std::min(x0 + 1, image.width - 1), y1 = std::min(y0 + 1, image.height - 1);
                const double wx = cx - x0, wy = cy - y0;
                for (int c = 0; c < 3; ++c) {
                    const double v = (1 - wy) * ((1 - wx) * at(x0, y0, c) + wx * at(x1, y0, c)) +
                                     wy * ((1 - wx) * at(x0, y1, c) + wx * at(x1, y1, c));
                    out[(static_cast<std::size_t>(oy) * W + ox) * 3 + c] =
                        static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                }
            }
    }
    std::vector<BBox> boxes;
    for (const auto& b : image.bboxes)
        if (auto r = remap_box(b, warp)) boxes.push_back(*r);
    return make_image(image.image_id + "#" + t.name(), warp.out_width(), warp.out_height(), std::move(out),
                      std::move(boxes), image.split_tag);
}

Transform sample_transform(std::mt19937_64& rng, const ImageAugmentConfig& config) {
    std::uniform_int_distribution<int> kind(0, 5);
    switch (kind(rng)) {
        case 0: {
            std::uniform_real_distribution<double> a(-config.max_rotate_deg, config.max_rotate_deg);
            return Transform::rotate(a(rng));
        }
        case 1: return Transform::hflip();
        case 2: return Transform::vflip();
        case 3: {
            std::uniform_int_distribution<int> r(1, std::max(1, config.max_blur_radius));
            return Transform::blur(r(rng));
        }
        case 4: {
            std::uniform_real_distribution<double> k(-config.max_optical_k, config.max_optical_k);
            return Transform::optical(k(rng));
        }
        default: {
            std::uniform_real_distribution<double> m(0.0, config.max_grid_magnitude);
            return Transform::grid(config.grid_steps, m(rng));
        }
    }
}

std::vector<AugmentedImage> augment_image_traced(const ImageRecord& image, int k, std::uint64_t seed,
                                                const ImageAugmentConfig& config) {
    if (k < 1) throw std::invalid_argument("augment_image: k must be >= 1");
    std::mt19937_64 rng(seed);
    std::vector<AugmentedImage> out;
    for (int j = 0; j < k; ++j) {
        const Transform t = sample_transform(rng, config);
        auto img = apply_transform(image, t, rng());
        img.image_id = image.image_id + "#img" + std::to_string(j);
        out.push_back({std::move(img), t});
    }
    return out;
}

std::vector<ImageRecord> augment_image(const ImageRecord& image, int k, std::uint64_t seed,
                                       const ImageAugmentConfig& config) {
    std::vector<ImageRecord> out;
    for (auto& a : augment_image_traced(image, k, seed, config)) out.push_back(std::move(a.image));
    return out;
}

}  // namespace capfeed
