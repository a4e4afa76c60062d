#include <stdio.h>
#include <string.h>

#include "fedplane.h"

int main(void) {
    FpPlane *plane = NULL;
    if (fp_plane_open(NULL, &plane) != FP_STATUS_OK) {
        fprintf(stderr, "open: %s\n", fp_last_error());
        return 1;
    }
    FpResponse *resp = NULL;
    if (fp_plane_request(plane, "GET", "/v1/health", NULL, NULL, 0, &resp) != FP_STATUS_OK) {
        fprintf(stderr, "request: %s\n", fp_last_error());
        return 1;
    }
    size_t len = 0;
    const uint8_t *body = fp_response_body(resp, &len);
    printf("%u %.*s\n", fp_response_status(resp), (int)len, (const char *)body);
    fp_response_free(resp);

    if (fp_plane_request(plane, "GET", "/v1/labs", NULL, NULL, 0, &resp) != FP_STATUS_OK) {
        return 1;
    }
    printf("%u\n", fp_response_status(resp));
    fp_response_free(resp);

    if (fp_plane_add_user(plane, "a", "b", "nobody") != FP_STATUS_INVALID_ARGUMENT) {
        return 1;
    }
    printf("%s\n", fp_last_error());
    fp_plane_close(plane);
    printf("version %s\n", fp_version());
    return 0;
}
