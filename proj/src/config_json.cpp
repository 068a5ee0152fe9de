#include "wiss/config_json.hpp"

#include "wiss/error.hpp"

namespace wiss {

void throw_if_errors(const std::vector<std::string>& errors, const std::string& context) {
  if (errors.empty()) return;
  std::string msg = context + ": " + std::to_string(errors.size()) + " problem(s)";
  for (const auto& e : errors) msg += "\n  " + e;
  throw Error(ErrorCode::kInvalidConfig, msg);
}

}  // namespace wiss
