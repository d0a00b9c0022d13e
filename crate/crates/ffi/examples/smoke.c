/* Build: cargo build -p malora-ffi --release
 *        cc crates/ffi/examples/smoke.c -Icrates/ffi/include -Ltarget/release -lmalora_ffi -o smoke
 *        LD_LIBRARY_PATH=target/release ./smoke
 */
#include <stdio.h>
#include <stdlib.h>

#include "malora.h"

static int check(MalkStatus s, const char *what) {
    if (s != MALK_STATUS_OK) {
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, malk_last_error());
        return 1;
    }
    return 0;
}

int main(void) {
    size_t d = 0, r_bar = 0;
    if (check(malk_derive_geometry(8, 8, 0.5, &d, &r_bar), "derive_geometry")) return 1;
    printf("malk %s: d=%zu r_bar=%zu\n", malk_version(), d, r_bar);

    const char *cfg = "{\"adapter\": {\"method\": \"malora\", \"r\": 2, \"n_experts\": 4, \"lambda\": 0.5}}";
    enum { M = 6, N = 8, ROWS = 3 };
    double w[M * N], x[ROWS * N], y[ROWS * M];
    for (int i = 0; i < M * N; i++) w[i] = 0.01 * (i % 7) - 0.03;
    for (int i = 0; i < ROWS * N; i++) x[i] = 0.1 * (i % 5);

    MalkLayer *layer = NULL;
    if (check(malk_layer_new(cfg, w, M, N, 42, &layer), "layer_new")) return 1;
    uint64_t count = 0;
    if (check(malk_layer_trainable_count(layer, &count), "trainable_count")) return 1;
    if (check(malk_layer_forward(layer, x, ROWS, y, ROWS * M), "forward")) return 1;
    printf("trainable=%llu y[0]=%.6f\n", (unsigned long long)count, y[0]);

    MalkStatus bad = malk_layer_forward(layer, x, ROWS, y, 1);
    printf("short buffer -> %d (%s)\n", (int)bad, malk_last_error());
    malk_layer_free(layer);
    return bad == MALK_STATUS_BUFFER_TOO_SMALL ? 0 : 1;
}
