#include <stdio.h>
#include <string.h>

#include "maskanynet.h"

#define CHECK(call)                                                            \
    do {                                                                       \
        MakStatus s_ = (call);                                                 \
        if (s_ != MAK_STATUS_OK) {                                             \
            fprintf(stderr, "%s failed: %s: %s\n", #call, mak_status_name(s_), \
                    mak_last_error());                                         \
            return 1;                                                          \
        }                                                                      \
    } while (0)

int main(void) {
    enum { C = 3, H = 32, W = 32, N = C * H * W };
    static float pixels[N], restored_pixels[N];
    for (int i = 0; i < N; i++) pixels[i] = (float)(i % 251) / 250.0f;

    MakImage *image = NULL, *masked = NULL, *restored = NULL;
    MakMask *mask = NULL;
    MakReuse *reuse = NULL;
    CHECK(mak_image_new(C, H, W, pixels, &image));
    CHECK(mak_mask_generate("grid", 0.25, 4, H, W, 7, &mask));
    CHECK(mak_apply_mask(image, mask, 0.0f, &masked));
    CHECK(mak_reuse_build(image, mask, &reuse));
    CHECK(mak_reuse_scatter_back(reuse, mask, masked, &restored));
    CHECK(mak_image_read(restored, restored_pixels, N));
    if (memcmp(pixels, restored_pixels, sizeof pixels) != 0) {
        fprintf(stderr, "round trip is not exact\n");
        return 1;
    }

    size_t masked_cells = 0, cells = 0;
    double coverage = 0.0, entropy = 0.0;
    CHECK(mak_mask_stats(mask, &masked_cells, &cells, &coverage));
    CHECK(mak_shannon_entropy(image, &entropy));

    MakMask *bad = NULL;
    MakStatus s = mak_mask_generate("grid", 0.3, 4, H, W, 7, &bad);
    if (s != MAK_STATUS_UNSUPPORTED_RATIO || bad != NULL || mak_last_error() == NULL) {
        fprintf(stderr, "expected an unsupported-ratio failure\n");
        return 1;
    }

    printf("maskanynet %s: %zu/%zu cells, coverage %.2f, entropy %.3f, round trip exact\n",
           mak_version(), masked_cells, cells, coverage, entropy);
    mak_image_free(restored);
    mak_image_free(masked);
    mak_image_free(image);
    mak_reuse_free(reuse);
    mak_mask_free(mask);
    return 0;
}
