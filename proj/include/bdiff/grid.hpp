#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bdiff/errors.hpp"

namespace bdiff {

// Dense row-major H x W grid. Used for label masks, boundary bands, distance
// and weight maps; the network side works on torch tensors instead.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(int height, int width, T fill = T{})
        : height_(height), width_(width) {
        if (height < 0 || width < 0) throw ShapeError("grid dimensions must be non-negative");
        data_.assign(static_cast<std::size_t>(height) * width, fill);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int row, int col) noexcept { return data_[index(row, col)]; }
    const T& operator()(int row, int col) const noexcept { return data_[index(row, col)]; }

    T& at(int row, int col) {
        check(row, col);
        return data_[index(row, col)];
    }
    const T& at(int row, int col) const {
        check(row, col);
        return data_[index(row, col)];
    }

    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    bool same_shape(const Grid& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_;
    }
    template <typename U>
    bool same_shape(const Grid<U>& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    bool operator==(const Grid& other) const = default;

private:
    std::size_t index(int row, int col) const noexcept {
        return static_cast<std::size_t>(row) * width_ + col;
    }
    void check(int row, int col) const {
        if (row < 0 || row >= height_ || col < 0 || col >= width_) {
            throw IndexError("grid index (" + std::to_string(row) + "," + std::to_string(col) +
                             ") outside " + std::to_string(height_) + "x" + std::to_string(width_));
        }
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<T> data_;
};

// Label-space segmentation mask: every value is 0 (background) or 1 (lesion).
using LabelMask = Grid<std::uint8_t>;

inline std::string shape_string(int height, int width) {
    return std::to_string(height) + "x" + std::to_string(width);
}

template <typename A, typename B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* what) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw ShapeError(std::string(what) + ": shape " + shape_string(a.height(), a.width()) +
                         " vs " + shape_string(b.height(), b.width()));
    }
}

// Throws ValidationError if any value is not 0/1.
void require_binary(const LabelMask& mask, const char* what);

}  // namespace bdiff
