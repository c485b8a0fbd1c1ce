#pragma once

#include <stdexcept>
#include <string>

namespace evalkit {

// Broad classes used by the CLI exit contract and the HTTP status mapping.
enum class ErrorClass {
  user,         // bad input, bad arguments, bad config
  environment,  // missing model, unreachable service, I/O failure
};

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message,
        ErrorClass cls = ErrorClass::user)
      : std::runtime_error(message), kind_(std::move(kind)), class_(cls) {}

  const std::string& kind() const noexcept { return kind_; }
  ErrorClass error_class() const noexcept { return class_; }

 private:
  std::string kind_;
  ErrorClass class_;
};

#define EVALKIT_DEFINE_ERROR(Name, tag, cls)                        \
  class Name : public Error {                                       \
   public:                                                          \
    explicit Name(const std::string& message)                       \
        : Error(tag, message, ErrorClass::cls) {}                   \
  };

EVALKIT_DEFINE_ERROR(SchemaError, "schema_error", user)
EVALKIT_DEFINE_ERROR(ValidationError, "validation_error", user)
EVALKIT_DEFINE_ERROR(ArgumentError, "argument_error", user)
EVALKIT_DEFINE_ERROR(UnlabeledDataError, "unlabeled_data", user)
EVALKIT_DEFINE_ERROR(LookupError, "lookup_error", user)
EVALKIT_DEFINE_ERROR(TruncationError, "truncation_error", user)
EVALKIT_DEFINE_ERROR(TemplateError, "template_error", user)
EVALKIT_DEFINE_ERROR(ConfigError, "config_error", user)
EVALKIT_DEFINE_ERROR(NotFoundError, "not_found", user)
EVALKIT_DEFINE_ERROR(ReferenceError, "reference_error", user)
EVALKIT_DEFINE_ERROR(IntegrityError, "integrity_error", user)
EVALKIT_DEFINE_ERROR(UnavailableError, "unavailable", environment)
EVALKIT_DEFINE_ERROR(EnvironmentError, "environment_error", environment)
EVALKIT_DEFINE_ERROR(StorageError, "storage_error", environment)

#undef EVALKIT_DEFINE_ERROR

// Raised when training loss becomes non-finite.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& message, long last_good_step)
      : Error("training_error", message, ErrorClass::user),
        last_good_step_(last_good_step) {}
  long last_good_step() const noexcept { return last_good_step_; }

 private:
  long last_good_step_;
};

// Transport or protocol failure talking to a remote judge. `status` is the
// last HTTP status seen, or 0 when no response arrived at all.
class RemoteError : public Error {
 public:
  RemoteError(const std::string& message, int status, int attempts)
      : Error("remote_error", message, ErrorClass::environment),
        status_(status),
        attempts_(attempts) {}
  int status() const noexcept { return status_; }
  int attempts() const noexcept { return attempts_; }

 private:
  int status_;
  int attempts_;
};

}  // namespace evalkit
