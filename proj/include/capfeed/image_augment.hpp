#pragma once

#include "capfeed/dataset.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace capfeed {

struct Transform {
    enum class Kind { rotate, hflip, vflip, blur, optical_distort, grid_distort };

    Kind kind = Kind::hflip;
    double angle_deg = 0;  // rotate; positive is counter-clockwise
    int radius = 0;        // blur
    double k = 0;          // optical_distort radial coefficient
    int steps = 0;         // grid_distort cells per axis
    double magnitude = 0;  // grid_distort max relative cell stretch

    static Transform rotate(double deg) { return {Kind::rotate, deg, 0, 0, 0, 0}; }
    static Transform hflip() { return {Kind::hflip, 0, 0, 0, 0, 0}; }
    static Transform vflip() { return {Kind::vflip, 0, 0, 0, 0, 0}; }
    static Transform blur(int r) { return {Kind::blur, 0, r, 0, 0, 0}; }
    static Transform optical(double k) { return {Kind::optical_distort, 0, 0, k, 0, 0}; }
    static Transform grid(int steps, double magnitude) { return {Kind::grid_distort, 0, 0, 0, steps, magnitude}; }

    std::string name() const;
    nlohmann::json to_json() const;
};

// Sampling ranges for augment_image and hard validation limits.
struct ImageAugmentConfig {
    double max_rotate_deg = 30;
    int max_blur_radius = 3;
    double max_optical_k = 0.2;
    int grid_steps = 5;
    double max_grid_magnitude = 0.3;
};

inline constexpr double kMaxOpticalK = 0.3;
inline constexpr double kMaxGridMagnitude = 0.5;
inline constexpr double kMinBoxArea = 4.0;

// Throws std::invalid_argument when a parameter is out of range.
void validate(const Transform& t);

// Geometry of one transform applied to a W x H image. Coordinates are
// continuous pixel coordinates (pixel (i, j) covers [i, i+1) x [j, j+1)).
class Warp {
public:
    Warp(const Transform& t, int width, int height, std::uint64_t seed);

    int out_width() const { return out_w_; }
    int out_height() const { return out_h_; }
    bool is_photometric() const { return t_.kind == Transform::Kind::blur; }
    bool is_rigid() const {
        return t_.kind == Transform::Kind::rotate || t_.kind == Transform::Kind::hflip || t_.kind == Transform::Kind::vflip;
    }

    // Output point -> source point (used for resampling).
    std::pair<double, double> to_source(double x, double y) const;
    // Source point -> output point (used for box remapping).
    std::pair<double, double> to_output(double x, double y) const;

private:
    int quarter_turns() const;  // rotations that are multiples of 90 degrees, else -1

    Transform t_;
    int w_, h_, out_w_, out_h_;
    double cos_ = 1, sin_ = 0;
    std::vector<double> grid_x_, grid_y_;  // source-side knots for grid distortion
};

// Applies the transform to pixels and remaps boxes; boxes are clipped to the
// output and dropped when their area falls below kMinBoxArea.
ImageRecord apply_transform(const ImageRecord& image, const Transform& t, std::uint64_t seed);

// Axis-aligned hull of the remapped box, clipped, or nullopt if dropped.
std::optional<BBox> remap_box(const BBox& box, const Warp& warp);

Transform sample_transform(std::mt19937_64& rng, const ImageAugmentConfig& config);

struct AugmentedImage {
    ImageRecord image;
    Transform transform;
};

// augment_image plus the transform behind each output.
std::vector<AugmentedImage> augment_image_traced(const ImageRecord& image, int k, std::uint64_t seed,
                                                const ImageAugmentConfig& config = {});

std::vector<ImageRecord> augment_image(const ImageRecord& image, int k, std::uint64_t seed,
                                       const ImageAugmentConfig& config = {});

}  // namespace capfeed
