#pragma once

#include "capfeed/dataset.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace capfeed {

// Jaccard similarity of the two token sets; 1 when both are empty.
double token_jaccard(std::span<const std::string> a, std::span<const std::string> b);

// The ground-truth caption with the highest token Jaccard similarity to the
// prediction (ties go to the smallest caption id), as a /feedback request
// body of kind caption_correction. Throws std::invalid_argument when
// gt_captions is empty.
nlohmann::json simulate_correction(const ImageRecord& image, const CaptionRecord& predicted,
                                   std::span<const CaptionRecord> gt_captions);

// "good" iff the best Jaccard similarity to a reference is >= threshold.
// Throws std::invalid_argument when threshold is outside [0, 1].
std::string simulate_rating(const CaptionRecord& augmentation, std::span<const CaptionRecord> gt_captions,
                            double threshold);

struct SimOptions {
    int rounds = 0;
    int update_every = 10;  // 0 never updates
    std::uint64_t seed = 7;
    double threshold = 0.5;
    bool use_ranks = false;
    bool post_bboxes = true;
    bool parallel = false;  // issue the predicts of all rounds concurrently first
    int wait_ms = 10000;    // GET /augmentations wait for pending work
    int retries = 3;
    int timeout_s = 900;
};

// One round per image (seeded order, cycling when rounds exceed the image
// count): predict, correct, optionally annotate boxes, fetch augmentations,
// rate every new set; POST /update after every update_every rounds. Each
// call is one transcript entry {round, call, method, path, request, status,
// response, attempts}; network failures are retried and then recorded with
// status null and an error message.
std::vector<nlohmann::json> run_loop(std::span<const ImageRecord> images, std::span<const CaptionRecord> captions,
                                     const std::string& endpoint, const SimOptions& options);

void write_transcript(const std::filesystem::path& path, std::span<const nlohmann::json> transcript);

}  // namespace capfeed
