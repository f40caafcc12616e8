#pragma once

#include <stdexcept>
#include <string>

namespace csl {

enum class Errc {
  invalid_config,
  schema,
  precondition,
  degenerate_fold,
  singular_design,
  empty_accepted_set,
  io,
};

// Process exit status for each error category (0 is success).
inline int exit_code(Errc code) {
  switch (code) {
    case Errc::invalid_config:
    case Errc::precondition:
      return 1;
    case Errc::schema:
    case Errc::degenerate_fold:
    case Errc::io:
      return 2;
    case Errc::singular_design:
    case Errc::empty_accepted_set:
      return 3;
  }
  return 3;
}

inline const char* to_string(Errc code) {
  switch (code) {
    case Errc::invalid_config: return "invalid_config";
    case Errc::schema: return "schema";
    case Errc::precondition: return "precondition";
    case Errc::degenerate_fold: return "degenerate_fold";
    case Errc::singular_design: return "singular_design";
    case Errc::empty_accepted_set: return "empty_accepted_set";
    case Errc::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

  // Same error with a context prefix, e.g. "fold 2, learner knn: ...".
  Error with_context(const std::string& context) const {
    return Error(code_, context + ": " + what());
  }

 private:
  Errc code_;
};

inline void require(bool cond, Errc code, const std::string& msg) {
  if (!cond) throw Error(code, msg);
}

}  // namespace csl
