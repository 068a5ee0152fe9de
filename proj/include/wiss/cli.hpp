#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

namespace wiss::cli {

inline constexpr const char* kOutputRootEnv = "WISS_OUTPUT_ROOT";

// --out, then the config's output entry, then $WISS_OUTPUT_ROOT/<name>, then
// runs/<name>. Relative config outputs resolve against the output root.
std::filesystem::path resolve_output(const std::optional<std::filesystem::path>& flag, const std::string& configured,
                                     const std::string& name);

struct PhantomArgs {
  std::filesystem::path spec;
  std::optional<std::filesystem::path> out;
};

struct RunArgs {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
};

struct EvalArgs {
  std::optional<std::filesystem::path> run;
  std::optional<std::filesystem::path> pred;
  std::optional<std::filesystem::path> gt;
  std::optional<std::filesystem::path> image;
  std::optional<std::filesystem::path> out;
};

struct AblateArgs {
  std::filesystem::path config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
};

struct ReplayArgs {
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> out;
};

// Each command returns a process exit status. Failures print a JSON error
// report to stderr.
int cmd_phantom(const PhantomArgs& args);
int cmd_run(const RunArgs& args);
int cmd_eval(const EvalArgs& args);
int cmd_ablate(const AblateArgs& args);
int cmd_replay(const ReplayArgs& args);

// Variants that throw instead of reporting; used by the commands above.
void phantom_gen(const nlohmann::json& spec, const std::filesystem::path& out);
void run_experiment(const nlohmann::json& config, const std::filesystem::path& base_dir,
                    const std::filesystem::path& out, std::optional<std::uint64_t> seed);
void eval_run(const std::filesystem::path& run_dir, const std::filesystem::path& out);
void eval_labelmaps(const std::filesystem::path& pred, const std::filesystem::path& gt,
                    const std::optional<std::filesystem::path>& image, const std::filesystem::path& out);
void ablate(const nlohmann::json& config, const std::filesystem::path& base_dir, const std::filesystem::path& out,
            std::optional<std::uint64_t> seed);
void replay(const std::filesystem::path& manifest, const std::filesystem::path& out);

}  // namespace wiss::cli
