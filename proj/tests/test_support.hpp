#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

// Scratch directory in the system temp dir, emptied on construction and removed on exit.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& name)
    {
        path = std::filesystem::temp_directory_path() / ("deauville_test_" + name + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& child) const { return path / child; }
};
