#include <cerrno>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "zssrt/cli.hpp"
#include "zssrt/errors.hpp"

namespace zssrt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

int stage_rank(const std::string& stage) {
  for (int i = 0; i < int(std::size(kStages)); ++i)
    if (stage == kStages[i]) return i;
  return int(std::size(kStages));
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

RunManifest RunManifest::fresh(const std::string& run_id) {
  RunManifest m;
  m.run_id = run_id;
  for (const char* s : kStages) m.stages.emplace_back(s, Stage{});
  return m;
}

RunManifest::Stage& RunManifest::stage(const std::string& name) {
  for (auto& [n, s] : stages)
    if (n == name) return s;
  throw ConfigError("unknown stage '" + name + "'");
}

const RunManifest::Stage& RunManifest::stage(const std::string& name) const {
  return const_cast<RunManifest*>(this)->stage(name);
}

void RunManifest::invalidate_from(const std::string& name) {
  const int r = stage_rank(name);
  for (auto& [n, s] : stages)
    if (stage_rank(n) >= r) s.complete = false;
}

json RunManifest::to_json() const {
  json j;
  j["run_id"] = run_id;
  j["dataset"] = dataset;
  j["config"] = config;
  json st = json::array();
  for (const auto& [n, s] : stages)
    st.push_back({{"name", n}, {"complete", s.complete}, {"seconds", s.seconds},
                  {"artifacts", s.artifacts}});
  j["stages"] = st;
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m = fresh(j.value("run_id", std::string()));
  m.dataset = j.value("dataset", std::string());
  m.config = j.value("config", json::object());
  if (j.contains("stages"))
    for (const auto& s : j.at("stages")) {
      auto& st = m.stage(s.at("name").get<std::string>());
      st.complete = s.value("complete", false);
      st.seconds = s.value("seconds", 0.0);
      st.artifacts = s.value("artifacts", std::vector<std::string>{});
    }
  return m;
}

void RunManifest::save(const fs::path& run_dir) const {
  atomic_write(run_dir / "run.json", to_json().dump(2) + "\n");
}

RunManifest RunManifest::load_or_fresh(const fs::path& run_dir) {
  const fs::path p = run_dir / "run.json";
  if (fs::exists(p)) return from_json(read_json(p));
  return fresh(fs::absolute(run_dir).lexically_normal().filename().string());
}

// ---------------------------------------------------------------------------
// Lock and atomic writes

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / "run.lock") {
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + run_dir.string() + ": " + ec.message());
  for (int attempt = 0; attempt < 2; ++attempt) {
    if (FILE* f = std::fopen(path_.c_str(), "wx")) {
      std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
      std::fclose(f);
      return;
    }
    if (errno != EEXIST) throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
    // A lock left by a process that no longer exists is taken over.
    long pid = 0;
    if (FILE* f = std::fopen(path_.c_str(), "r")) {
      if (std::fscanf(f, "%ld", &pid) != 1) pid = 0;
      std::fclose(f);
    }
    const bool alive = pid > 0 && (::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM);
    if (alive)
      throw IoError("run directory " + run_dir.string() + " is locked by process " +
                    std::to_string(pid));
    fs::remove(path_, ec);
  }
  throw IoError("cannot acquire lock " + path_.string());
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void atomic_write(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void atomic_save(const fs::path& path, const Checkpoint& ckpt) {
  const fs::path tmp = path.string() + ".tmp";
  ckpt.save(tmp);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Configuration

TrainConfig resolve_config(const Options& opts, const fs::path& run_dir) {
  json stored;
  if (fs::exists(run_dir / "config.json")) stored = read_json(run_dir / "config.json");
  json file;
  if (opts.config) {
    if (!fs::exists(*opts.config))
      throw MissingDependencyError("config file not found: " + opts.config->string(),
                                   opts.config->string());
    file = read_json(*opts.config);
    if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
  }

  auto pick_string = [&](const char* key, std::optional<std::string> flag, std::string dflt) {
    if (flag) return *flag;
    if (file.contains(key)) return file.at(key).get<std::string>();
    if (stored.contains(key)) return stored.at(key).get<std::string>();
    return dflt;
  };
  auto pick_int = [&](const char* key, std::optional<int> flag, int dflt) {
    if (flag) return *flag;
    if (file.contains(key)) return file.at(key).get<int>();
    if (stored.contains(key)) return stored.at(key).get<int>();
    return dflt;
  };

  const std::string profile = pick_string("profile", opts.profile, "desk");
  const int scale = pick_int("scale", opts.scale, 2);
  TrainConfig cfg = TrainConfig::from_profile(profile, scale);
  try {
    // Profile-defining keys in a stored config are kept only while they agree.
    if (!stored.is_null() && stored.value("profile", profile) == profile &&
        stored.value("scale", scale) == scale)
      cfg.merge_json(stored);
    if (!file.is_null()) cfg.merge_json(file);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid configuration value: ") + e.what());
  }
  cfg.profile = profile;
  cfg.scale = scale;
  if (opts.seed) cfg.seed = *opts.seed;
  return cfg;
}

// ---------------------------------------------------------------------------
// Loss log

void write_losses(const fs::path& run_dir, const std::string& stage,
                  const std::vector<LossRecord>& records) {
  std::vector<LossRecord> all;
  for (auto& r : read_losses(run_dir))
    if (r.stage != stage) all.push_back(std::move(r));
  all.insert(all.end(), records.begin(), records.end());
  std::stable_sort(all.begin(), all.end(), [](const LossRecord& a, const LossRecord& b) {
    return stage_rank(a.stage) < stage_rank(b.stage);
  });
  std::string out = "stage,step,total,mse,perc\n";
  char buf[160];
  for (const auto& r : all) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g,%.9g\n", r.stage.c_str(), r.step, r.total,
                  r.mse, r.perc);
    out += buf;
  }
  atomic_write(run_dir / "losses.csv", out);
}

std::vector<LossRecord> read_losses(const fs::path& run_dir) {
  std::vector<LossRecord> out;
  const fs::path p = run_dir / "losses.csv";
  if (!fs::exists(p)) return out;
  std::istringstream in(read_text(p));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    LossRecord r;
    std::string field;
    std::getline(ls, r.stage, ',');
    std::getline(ls, field, ',');
    r.step = std::stoi(field);
    std::getline(ls, field, ',');
    r.total = std::stod(field);
    std::getline(ls, field, ',');
    r.mse = std::stod(field);
    std::getline(ls, field, ',');
    r.perc = std::stod(field);
    out.push_back(r);
  }
  return out;
}

}  // namespace zssrt::cli
