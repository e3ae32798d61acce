#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace icd {

// Base for everything the harness throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed input document (bad JSON, wrong types).
struct ParseError : Error {
  std::string path;  // JSON-pointer-ish location of the offense
  explicit ParseError(std::string message, std::string path_ = "$")
      : Error(std::move(message)), path(std::move(path_)) {}
};

// Well-formed document that violates an invariant (dangling reference,
// duplicate key, bad bbox). `path` names the offending entity.
struct ValidationError : Error {
  std::string path;
  explicit ValidationError(std::string message, std::string path_ = "$")
      : Error(std::move(message)), path(std::move(path_)) {}
};

struct ConfigError : Error {
  std::string field;
  explicit ConfigError(std::string message, std::string field_ = "")
      : Error(std::move(message)), field(std::move(field_)) {}
};

struct UnknownPage : Error {
  std::string page_id;
  explicit UnknownPage(std::string page)
      : Error("unknown page: " + page), page_id(std::move(page)) {}
};

struct UnknownElement : Error {
  int som_id;
  explicit UnknownElement(int id)
      : Error("no element with som id " + std::to_string(id)), som_id(id) {}
};

}  // namespace icd
