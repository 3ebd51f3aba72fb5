#ifndef NRSEG_MASK_HPP
#define NRSEG_MASK_HPP

#include <cstdint>
#include <vector>

#include "nrseg/common.hpp"

namespace nrseg {

// Binary H x W raster over image pixels; values are 0/1.
struct MaskImage {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> data;

    MaskImage() = default;
    MaskImage(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }
    void set(int y, int x, uint8_t v) { data[static_cast<size_t>(y) * w + x] = v; }

    int64_t count() const {
        int64_t c = 0;
        for (uint8_t v : data) c += v;
        return c;
    }
    bool same_dims(const MaskImage& o) const { return h == o.h && w == o.w; }
};

inline MaskImage mask_union(const MaskImage& a, const MaskImage& b) {
    if (!a.same_dims(b)) throw DimensionError("mask_union: dimension mismatch");
    MaskImage out(a.h, a.w);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = (a.data[i] || b.data[i]) ? 1 : 0;
    return out;
}

}  // namespace nrseg

#endif  // NRSEG_MASK_HPP
