#pragma once

#include <stdexcept>
#include <string>

namespace capfeed {

// Tensor or record shape does not match what an operation expects.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Loss or parameters became non-finite during training.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input file (JSON, JSONL, image header, checkpoint).
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// CutMix could not find a paste location.
class PlacementError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A text backend (translation / paraphrase) failed to answer.
class BackendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace capfeed
