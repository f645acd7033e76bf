#pragma once

#include <stdexcept>
#include <string>

namespace salcls {

// Base for all pipeline errors so callers can catch one type at the CLI edge.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct MalformedRecord : Error {
  std::size_t line_no;
  MalformedRecord(std::size_t line, const std::string& why)
      : Error("malformed record at line " + std::to_string(line) + ": " + why),
        line_no(line) {}
};

struct UnknownLabel : Error {
  std::string label;
  explicit UnknownLabel(const std::string& name)
      : Error("unknown label: " + name), label(name) {}
};

struct InvalidSpan : Error {
  std::string doc_id;
  explicit InvalidSpan(const std::string& id, const std::string& why = "")
      : Error("invalid rationale span in doc '" + id + "'" +
              (why.empty() ? "" : ": " + why)),
        doc_id(id) {}
};

struct InvariantViolation : Error {
  std::string doc_id;
  explicit InvariantViolation(const std::string& id, const std::string& why)
      : Error("invariant violation for doc '" + id + "': " + why), doc_id(id) {}
};

struct IoFailure : Error {
  explicit IoFailure(const std::string& msg) : Error("io failure: " + msg) {}
};

struct TemplateMismatch : Error {
  explicit TemplateMismatch(const std::string& msg)
      : Error("template mismatch: " + msg) {}
};

struct OracleUnavailable : Error {
  explicit OracleUnavailable(const std::string& msg)
      : Error("oracle unavailable: " + msg) {}
};

struct UnmappableAnswer : Error {
  std::string raw;
  explicit UnmappableAnswer(const std::string& answer)
      : Error("cannot map oracle answer to a label: \"" + answer + "\""),
        raw(answer) {}
};

struct LengthMismatch : Error {
  explicit LengthMismatch(const std::string& msg)
      : Error("length mismatch: " + msg) {}
};

struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& msg)
      : Error("shape mismatch: " + msg) {}
};

struct SequenceTooLong : Error {
  explicit SequenceTooLong(const std::string& msg)
      : Error("sequence too long: " + msg) {}
};

struct AlignmentFailure : Error {
  std::string doc_id;
  explicit AlignmentFailure(const std::string& id, const std::string& why)
      : Error("alignment failure for doc '" + id + "': " + why), doc_id(id) {}
};

struct EmptyTrainingSet : Error {
  explicit EmptyTrainingSet(const std::string& msg)
      : Error("empty training set: " + msg) {}
};

struct DivergenceDetected : Error {
  explicit DivergenceDetected(const std::string& msg)
      : Error("divergence detected: " + msg) {}
};

struct ManifestMismatch : Error {
  explicit ManifestMismatch(const std::string& msg)
      : Error("manifest mismatch: " + msg) {}
};

struct NoGoldLabels : Error {
  explicit NoGoldLabels(const std::string& msg)
      : Error("no gold labels: " + msg) {}
};

struct NoGoldRationale : Error {
  std::string doc_id;
  explicit NoGoldRationale(const std::string& id)
      : Error("no gold rationale for doc '" + id + "'"), doc_id(id) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg)
      : Error("config error: " + msg) {}
};

}  // namespace salcls
