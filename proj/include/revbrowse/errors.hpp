#pragma once

#include <stdexcept>
#include <string>

namespace revbrowse {

// Process exit codes shared by the CLI and the error hierarchy.
enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitMissingArtifact = 2,
    kExitRemoteFailure = 3,
    kExitValidation = 4,
};

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const { return kExitValidation; }
};

// Unreadable stream or a corpus whose line failure rate exceeds the format threshold.
class CorpusFormatError : public Error {
  public:
    using Error::Error;
};

// Sequence too short for a leave-one-out split; message names the user.
class SplitError : public Error {
  public:
    using Error::Error;
};

class ValidationError : public Error {
  public:
    using Error::Error;
};

// Artifact exists but was produced under a different config fingerprint.
class StalenessError : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

class MissingArtifactError : public Error {
  public:
    using Error::Error;
    int exit_code() const override { return kExitMissingArtifact; }
};

// Remote client failed after retries; carries how many attempts were made and
// the last backoff delay so callers can report it.
class TransportError : public Error {
  public:
    TransportError(const std::string& msg, int attempts = 0, long last_delay_ms = 0)
        : Error(msg), attempts(attempts), last_delay_ms(last_delay_ms) {}
    int exit_code() const override { return kExitRemoteFailure; }
    int attempts = 0;
    long last_delay_ms = 0;
};

// The configured client cannot do what the operation needs (e.g. no logprobs).
class CapabilityError : public Error {
  public:
    using Error::Error;
    int exit_code() const override { return kExitRemoteFailure; }
};

// No JSON object could be located in a model response; the caller may retry.
class ResponseParseError : public Error {
  public:
    using Error::Error;
};

// A JSON object was found but its keys have the wrong types.
class SchemaError : public Error {
  public:
    using Error::Error;
};

// All retries exhausted while extracting; keeps the last raw response for diagnostics.
class ExtractionFailedError : public Error {
  public:
    ExtractionFailedError(const std::string& msg, std::string last_response)
        : Error(msg), last_raw_response(std::move(last_response)) {}
    int exit_code() const override { return kExitRemoteFailure; }
    std::string last_raw_response;
};

}  // namespace revbrowse
