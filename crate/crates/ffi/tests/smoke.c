#include <stdio.h>
#include <math.h>
#include "epochal.h"

int main(void) {
    double pr = 0.0;
    if (epochal_pr_atomic(0.999, 1000, &pr) != EPOCHAL_STATUS_OK) return 1;
    if (fabs(pr - 0.3677) > 1e-3) return 2;

    EpochalRunConfig cfg = {EPOCHAL_PROTOCOL_BILATERAL, 4, 11, 1, 10, 0.2, 1, 40, 100};
    EpochalRun *run = NULL;
    if (epochal_run_protocol(&cfg, &run) != EPOCHAL_STATUS_OK) return 3;
    EpochalClass cls;
    epochal_run_class(run, &cls);
    epochal_run_free(run);
    if (cls == EPOCHAL_CLASS_MIXED) return 4;

    if (epochal_pr_atomic(2.0, 1, &pr) != EPOCHAL_STATUS_INVALID_ARGUMENT) return 5;
    if (epochal_last_error() == NULL) return 6;
    printf("ok %.6f\n", pr);
    return 0;
}
