#include <stdint.h>
#include <stdio.h>
#include <string.h>

#include "dsmyolo.h"

#define CHECK(cond)                                                    \
    do {                                                               \
        if (!(cond)) {                                                 \
            fprintf(stderr, "failed: %s (%s)\n", #cond, dsm_last_error()); \
            return 1;                                                  \
        }                                                              \
    } while (0)

int main(void) {
    DsmModel *model = NULL;
    CHECK(dsm_model_new("T", 3, 7, &model) == DSM_STATUS_OK);
    uint64_t params = 0;
    CHECK(dsm_model_param_count(model, &params) == DSM_STATUS_OK && params > 0);

    enum { H = 40, W = 64 };
    static float image[3 * H * W];
    for (size_t i = 0; i < 3 * H * W; i++) image[i] = (float)(i % 13) / 13.0f;
    DsmDetection dets[8];
    size_t count = 0;
    CHECK(dsm_model_detect(model, image, H, W, 64, 0.0f, 8, dets, 8, &count) == DSM_STATUS_OK);
    CHECK(count == 8 && dets[0].score >= dets[7].score);

    CHECK(dsm_model_new("nope", 3, 0, NULL) == DSM_STATUS_NULL_POINTER);
    CHECK(strlen(dsm_last_error()) > 0);

    enum { L = 5, D = 2, N = 3 };
    float x[L * D], delta[L * D], a[D * N], b[D * N], p[D * N], q[D], y[L * D];
    for (int i = 0; i < L * D; i++) {
        x[i] = (float)(i % 3) - 1.0f;
        delta[i] = 0.1f;
    }
    for (int i = 0; i < D * N; i++) {
        a[i] = -1.0f;
        b[i] = 1.0f;
        p[i] = 0.5f;
    }
    q[0] = q[1] = 0.0f;
    CHECK(dsm_selective_scan(L, D, N, x, delta, a, b, p, q, 0, DSM_DISCRETIZATION_ZOH, 0, y, NULL) == DSM_STATUS_OK);
    CHECK(y[0] < 0.0f);

    dsm_model_free(model);
    printf("smoke ok params=%llu detections=%zu\n", (unsigned long long)params, count);
    return 0;
}
