#include "bdiff/grid.hpp"

namespace bdiff {

void require_binary(const LabelMask& mask, const char* what) {
    for (int r = 0; r < mask.height(); ++r) {
        for (int c = 0; c < mask.width(); ++c) {
            const auto v = mask(r, c);
            if (v > 1) {
                throw ValidationError(std::string(what) + ": mask value " + std::to_string(v) +
                                      " at (" + std::to_string(r) + "," + std::to_string(c) +
                                      ") is not binary");
            }
        }
    }
}

}  // namespace bdiff
