#pragma once

#include <stdexcept>
#include <string>

namespace modalign {

// Every failure raised by the library derives from Error so callers can catch
// the whole family; the concrete type names the contract that was violated.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define MODALIGN_ERROR(Name)                     \
    class Name : public Error {                  \
    public:                                      \
        using Error::Error;                      \
    };

// corpus
MODALIGN_ERROR(MalformedRecord)
MODALIGN_ERROR(UnknownLabel)
MODALIGN_ERROR(BadRatios)
MODALIGN_ERROR(ClassExhausted)
MODALIGN_ERROR(InvalidLabelSpace)

// prompting
MODALIGN_ERROR(MissingExplanation)

// backend
MODALIGN_ERROR(BackendUnavailable)
MODALIGN_ERROR(FormatMismatch)
MODALIGN_ERROR(EmptyCorpus)
MODALIGN_ERROR(InvalidTrainingSpec)

// prefdata
MODALIGN_ERROR(IncompleteSet)
MODALIGN_ERROR(RequestTooLarge)
MODALIGN_ERROR(MixedMethods)

// pipeline
MODALIGN_ERROR(InvalidConfig)
MODALIGN_ERROR(MissingCheckpoint)
MODALIGN_ERROR(NoSuccessfulCell)

// evalkit
MODALIGN_ERROR(EmptyInput)
MODALIGN_ERROR(InvalidBaseline)
MODALIGN_ERROR(IoFailure)
MODALIGN_ERROR(UnknownSample)

// annotation
MODALIGN_ERROR(EmptyBatch)
MODALIGN_ERROR(UnknownAnnotator)
MODALIGN_ERROR(DuplicateVote)
MODALIGN_ERROR(NotAssigned)
MODALIGN_ERROR(UnknownBatch)

#undef MODALIGN_ERROR

/// Raised for a single prompt; `index` is its position in the request.
class GenerationFailed : public Error {
public:
    GenerationFailed(std::size_t index, const std::string& what)
        : Error("generation failed at prompt " + std::to_string(index) + ": " + what), index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

}  // namespace modalign
