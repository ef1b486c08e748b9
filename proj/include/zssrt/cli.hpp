#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "zssrt/trainer.hpp"

namespace zssrt::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitMissingDependency = 3,
  kExitDivergence = 4,
};

inline constexpr const char* kStages[] = {"scene", "coarse", "sdm", "fine", "eval"};

enum class FieldChoice { kFine, kCoarse };

struct Options {
  std::filesystem::path run_dir = "run";
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> config;
  std::optional<std::string> profile;
  std::optional<std::uint64_t> seed;
  std::optional<int> scale;
  bool force = false;
  bool ensemble = true;
  FieldChoice field = FieldChoice::kFine;
  bool quiet = false;

  // Scene generation.
  std::uint64_t scene_seed = 7;
  int views = 8;
  int test_views = 4;
  int res = 64;
};

// Run manifest kept in <run>/run.json and rewritten atomically.
struct RunManifest {
  std::string run_id;
  nlohmann::json config = nlohmann::json::object();
  std::string dataset;
  struct Stage {
    bool complete = false;
    double seconds = 0;
    std::vector<std::string> artifacts;
  };
  std::vector<std::pair<std::string, Stage>> stages;

  static RunManifest fresh(const std::string& run_id);
  Stage& stage(const std::string& name);
  const Stage& stage(const std::string& name) const;
  // Clears completion of `name` and every later stage.
  void invalidate_from(const std::string& name);

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& run_dir) const;
  static RunManifest load_or_fresh(const std::filesystem::path& run_dir);
};

// Exclusive per-run-directory lock held for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Writes through a temporary sibling and renames over the target.
void atomic_write(const std::filesystem::path& path, const std::string& content);
void atomic_save(const std::filesystem::path& path, const Checkpoint& ckpt);

// Defaults of the profile < config file < flags, with field bounds taken from
// the dataset. A run directory's config.json is the base once it exists.
TrainConfig resolve_config(const Options& opts, const std::filesystem::path& run_dir);

// losses.csv rows (stage, step, total, mse, perc); replaces rows of `stage`.
void write_losses(const std::filesystem::path& run_dir, const std::string& stage,
                  const std::vector<LossRecord>& records);
std::vector<LossRecord> read_losses(const std::filesystem::path& run_dir);

int cmd_generate(const Options& opts);
int cmd_train_coarse(const Options& opts);
int cmd_train_sdm(const Options& opts);
int cmd_train_fine(const Options& opts);
int cmd_render(const Options& opts);
int cmd_evaluate(const Options& opts);
int cmd_pipeline(const Options& opts);

// Parses argv, dispatches and maps errors to exit codes.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace zssrt::cli
