#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace sare {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An argument is outside its documented domain. `field()` names the offender.
class ParameterError : public Error {
public:
    ParameterError(std::string field, const std::string& what)
        : Error(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Division by a vanishing signal coefficient (alpha_bar[t] == 0).
class SingularityError : public Error {
public:
    using Error::Error;
};

/// Non-finite values produced by a model or encoder.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Failure inside an external backend. `stage()` is one of encode, denoise, decode, caption.
class BackendError : public Error {
public:
    BackendError(std::string stage, const std::string& what, int step = -1)
        : Error("[" + stage + (step >= 0 ? " step " + std::to_string(step) : std::string()) + "] " + what),
          stage_(std::move(stage)), step_(step) {}
    const std::string& stage() const noexcept { return stage_; }
    int step() const noexcept { return step_; }

private:
    std::string stage_;
    int step_;
};

class CaptioningError : public Error {
public:
    CaptioningError(std::string backend_id, std::string image_digest, const std::string& what)
        : Error("captioner '" + backend_id + "' failed on image " + image_digest + ": " + what),
          backend_id_(std::move(backend_id)), image_digest_(std::move(image_digest)) {}
    const std::string& backend_id() const noexcept { return backend_id_; }
    const std::string& image_digest() const noexcept { return image_digest_; }

private:
    std::string backend_id_;
    std::string image_digest_;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

class IngestionError : public Error {
public:
    IngestionError(const std::string& what, std::vector<std::string> unmatched = {})
        : Error(what), unmatched_(std::move(unmatched)) {}
    const std::vector<std::string>& unmatched() const noexcept { return unmatched_; }

private:
    std::vector<std::string> unmatched_;
};

/// A manifest filter matched no entries.
class EmptySelectionError : public Error {
public:
    using Error::Error;
};

/// A metric is not defined for the given input (e.g. AUC with one class).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
};

/// Offline evaluation hit cache misses. `keys()` lists every missing entry.
class CacheMissError : public Error {
public:
    explicit CacheMissError(std::vector<std::string> keys)
        : Error(std::to_string(keys.size()) + " reconstruction(s) missing from cache"), keys_(std::move(keys)) {}
    const std::vector<std::string>& keys() const noexcept { return keys_; }

private:
    std::vector<std::string> keys_;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace sare
