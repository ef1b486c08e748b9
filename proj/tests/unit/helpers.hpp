#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "zssrt/field.hpp"
#include "zssrt/rng.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& tag) {
  static int counter = 0;
  auto p = std::filesystem::temp_directory_path() /
           ("zssrt_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline zssrt::FieldConfig tiny_field_config() {
  zssrt::FieldConfig c;
  c.grid_res = 16;
  c.density_rank = 2;
  c.app_rank = 3;
  c.app_dim = 5;
  c.hidden = 8;
  return c;
}

inline bool close_rel(double a, double b, double rel, double abs_floor = 1e-9) {
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

}  // namespace testutil
