#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "cellpheno/image.hpp"
#include "cellpheno/rng.hpp"

namespace testutil {

/// Fresh scratch directory, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& name)
        : path_(std::filesystem::temp_directory_path() /
                ("cellpheno_" + name + "_" + std::to_string(::getpid()))) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline cellpheno::Image random_image(int w, int h, std::uint64_t seed) {
    cellpheno::Rng rng(seed);
    cellpheno::Image img(w, h);
    for (auto& b : img.bytes()) b = static_cast<std::uint8_t>(rng.below(256));
    return img;
}

}  // namespace testutil
