#include <stdio.h>
#include <string.h>
#include "wsiseg.h"

int main(void) {
    uint32_t full[] = {0, 16};
    WsisegMask *a = NULL, *b = NULL;
    if (wsiseg_mask_from_rle(4, 4, full, 2, 0, 0, &a) != WSISEG_STATUS_OK) return 1;
    if (wsiseg_mask_from_rle(4, 4, full, 2, 2, 0, &b) != WSISEG_STATUS_OK) return 2;
    double v = 0.0;
    if (wsiseg_mask_iou(a, b, &v) != WSISEG_STATUS_OK) return 3;
    wsiseg_mask_free(a);
    wsiseg_mask_free(b);

    uint32_t bad[] = {3, 3};
    WsisegMask *c = NULL;
    if (wsiseg_mask_from_rle(4, 4, bad, 2, 0, 0, &c) != WSISEG_STATUS_FORMAT) return 4;
    if (strlen(wsiseg_last_error()) == 0) return 5;

    WsisegConfig *cfg = NULL;
    if (wsiseg_config_from_json("{\"tile_size\": 0}", &cfg) != WSISEG_STATUS_CONFIGURATION) return 6;

    printf("iou=%.6f version=%s\n", v, wsiseg_version());
    return 0;
}
