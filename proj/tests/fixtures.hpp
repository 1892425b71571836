#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>

// MNIST directory for data-dependent tests: SAFS_DATA_DIR, else the path
// configured at build time. Empty when neither holds the IDX files.
inline std::optional<std::filesystem::path> mnist_dir() {
  std::filesystem::path p;
  if (const char* env = std::getenv("SAFS_DATA_DIR"))
    p = env;
  else
    p = SAFS_MNIST_DIR;
  if (p.empty() || !std::filesystem::exists(p / "train-images-idx3-ubyte")) return std::nullopt;
  return p;
}
