#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cellpheno {

enum class CellType : int { CYT = 0, FIB = 1, HOF = 2, SYN = 3, VAS = 4 };

inline constexpr int kNumClasses = 5;
inline constexpr std::array<CellType, kNumClasses> kAllCellTypes{CellType::CYT, CellType::FIB, CellType::HOF,
                                                                 CellType::SYN, CellType::VAS};

using Posterior = std::array<double, kNumClasses>;

constexpr int index_of(CellType t) { return static_cast<int>(t); }

constexpr std::string_view to_string(CellType t) {
    constexpr std::array<std::string_view, kNumClasses> names{"CYT", "FIB", "HOF", "SYN", "VAS"};
    return names[static_cast<std::size_t>(t)];
}

inline std::optional<CellType> parse_cell_type(std::string_view s) {
    for (auto t : kAllCellTypes)
        if (to_string(t) == s) return t;
    return std::nullopt;
}

inline CellType cell_type_from_index(int i) {
    if (i < 0 || i >= kNumClasses) throw std::out_of_range("cell type index " + std::to_string(i));
    return static_cast<CellType>(i);
}

}  // namespace cellpheno
