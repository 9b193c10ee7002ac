/* Counter-mode SplitMix64 stream reduced into [0, modulus). */
#ifndef LINLEAK_PRG_H
#define LINLEAK_PRG_H
#include <stdint.h>
#include <stddef.h>

#define LL_GOLDEN 0x9E3779B97F4A7C15ULL

static inline uint64_t ll_mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

static inline void ll_add_stream(uint64_t *restrict out, ptrdiff_t n, uint64_t seed,
                                 uint64_t modulus, int shift, uint64_t offset) {
    uint64_t base = seed + (offset + 1) * LL_GOLDEN;
    for (ptrdiff_t i = 0; i < n; i++) {
        uint64_t r = ll_mix(base + (uint64_t)i * LL_GOLDEN) >> shift;
        r = r >= modulus ? r - modulus : r;
        uint64_t a = out[i] + r;
        out[i] = a >= modulus ? a - modulus : a;
    }
}

static inline void ll_sub_stream(uint64_t *restrict out, ptrdiff_t n, uint64_t seed,
                                 uint64_t modulus, int shift, uint64_t offset) {
    uint64_t base = seed + (offset + 1) * LL_GOLDEN;
    for (ptrdiff_t i = 0; i < n; i++) {
        uint64_t r = ll_mix(base + (uint64_t)i * LL_GOLDEN) >> shift;
        r = r >= modulus ? r - modulus : r;
        uint64_t a = out[i] + (modulus - r);
        out[i] = a >= modulus ? a - modulus : a;
    }
}
#endif
