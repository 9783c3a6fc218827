/* Popcount loops with a hardware-POPCNT variant picked at runtime on x86. */
#ifndef XNOR_FORGE_POPCNT_H
#define XNOR_FORGE_POPCNT_H

#include <stddef.h>
#include <stdint.h>

#if defined(__GNUC__) && (defined(__x86_64__) || defined(__i386__))
#define XF_X86_DISPATCH 1
#endif

#define XF_COUNT_BODY                                   \
    int64_t total = 0;                                  \
    for (ptrdiff_t i = 0; i < n; i++)                   \
        total += __builtin_popcountll(words[i]);        \
    return total;

/* popcount(~(a ^ b)) over nw words, last word masked */
#define XF_MATCH_BODY                                   \
    int64_t p = 0;                                      \
    for (ptrdiff_t w = 0; w < nw - 1; w++)              \
        p += __builtin_popcountll(~(a[w] ^ b[w]));      \
    p += __builtin_popcountll(~(a[nw - 1] ^ b[nw - 1]) & mask); \
    return p;

static int64_t xf_count_generic(const uint64_t *words, ptrdiff_t n) { XF_COUNT_BODY }
static int64_t xf_match_generic(const uint64_t *a, const uint64_t *b, ptrdiff_t nw, uint64_t mask) { XF_MATCH_BODY }

#ifdef XF_X86_DISPATCH
__attribute__((target("popcnt")))
static int64_t xf_count_hw(const uint64_t *words, ptrdiff_t n) { XF_COUNT_BODY }
__attribute__((target("popcnt")))
static int64_t xf_match_hw(const uint64_t *a, const uint64_t *b, ptrdiff_t nw, uint64_t mask) { XF_MATCH_BODY }
#endif

typedef int64_t (*xf_count_fn)(const uint64_t *, ptrdiff_t);
typedef int64_t (*xf_match_fn)(const uint64_t *, const uint64_t *, ptrdiff_t, uint64_t);

static xf_count_fn xf_count = xf_count_generic;
static xf_match_fn xf_match = xf_match_generic;

/* returns 1 when the hardware variant was selected */
static int xf_select(void) {
#ifdef XF_X86_DISPATCH
    __builtin_cpu_init();
    if (__builtin_cpu_supports("popcnt")) {
        xf_count = xf_count_hw;
        xf_match = xf_match_hw;
        return 1;
    }
#endif
    return 0;
}

static void xf_use_generic(void) {
    xf_count = xf_count_generic;
    xf_match = xf_match_generic;
}

#endif
