#include "dfseg/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace dfseg::kern {

const Ops& ops() {
    static const Ops* selected = [] {
        const char* forced = std::getenv("DFSEG_KERNELS");
        if (forced) {
            if (std::strcmp(forced, "scalar") == 0) return &scalar_ops();
            if (std::strcmp(forced, "avx2") == 0 && avx2_ops()) return avx2_ops();
            if (std::strcmp(forced, "neon") == 0 && neon_ops()) return neon_ops();
        }
        if (const Ops* t = avx2_ops()) return t;
        if (const Ops* t = neon_ops()) return t;
        return &scalar_ops();
    }();
    return *selected;
}

}  // namespace dfseg::kern
