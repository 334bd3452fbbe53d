#include <math.h>
#include <stdio.h>

#include "hyperconc.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "%s:%d: %s failed\n", __FILE__, __LINE__, #cond); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    const double r = 0.70710678118654752;
    hc_params *p = NULL;
    hc_outcome *o = NULL;
    double ps = 0.0;

    CHECK(hc_params_new_real(0.6, 0.8, r, r, r, r, &p) == HC_STATUS_OK);
    CHECK(hc_scheme1_run(p, 2, 3, &o) == HC_STATUS_OK);
    CHECK(hc_outcome_success_probability(o, &ps) == HC_STATUS_OK);
    CHECK(fabs(ps - 0.25) < 1e-12);
    CHECK(hc_outcome_branch_count(o) > 16);
    hc_outcome_free(o);

    CHECK(hc_scheme1_run(p, 9, 1, &o) == HC_STATUS_INVALID_ARGUMENT);
    CHECK(hc_last_error() != NULL);
    hc_params_free(p);

    printf("ok %s\n", hc_version());
    return 0;
}
