#include "diffstream/kernels.hpp"

#include <cstdlib>

namespace diffstream::kernels {

bool avx2_available() {
#if (defined(__x86_64__) || defined(_M_X64)) && defined(__GNUC__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

namespace {

const KernelTable* pick_initial() {
    if (const char* env = std::getenv("DIFFSTREAM_FORCE_SCALAR"); env && env[0] && env[0] != '0')
        return &scalar_table();
    return avx2_available() ? &avx2_table() : &scalar_table();
}

const KernelTable*& current() {
    static const KernelTable* t = pick_initial();
    return t;
}

}  // namespace

const KernelTable& active() { return *current(); }

void select(const KernelTable& table) { current() = &table; }

}  // namespace diffstream::kernels
