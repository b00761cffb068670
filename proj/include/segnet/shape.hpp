#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segnet/common.hpp"

namespace segnet {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

// Singleton-dimension broadcasting: equal rank, each dim equal or 1.
inline bool broadcastable(const Shape& a, const Shape& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i] && a[i] != 1 && b[i] != 1) return false;
    }
    return true;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    if (!broadcastable(a, b)) {
        throw shape_error("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    }
    Shape out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = std::max(a[i], b[i]);
    return out;
}

}  // namespace segnet
