#include <stdio.h>
#include <string.h>

#include "featadv.h"

int main(void) {
    FeatadvConfig *cfg = NULL;
    char *text = NULL;

    if (featadv_config_new(NULL, &cfg) != FEATADV_STATUS_OK) return 1;
    if (featadv_config_set(cfg, "perturb.k=4") != FEATADV_STATUS_OK) return 2;
    if (featadv_config_set(cfg, "perturb.nope=1") != FEATADV_STATUS_CONFIG) return 3;
    if (strstr(featadv_last_error(), "nope") == NULL) return 4;
    if (featadv_config_to_toml(cfg, &text) != FEATADV_STATUS_OK) return 5;
    if (strstr(text, "k = 4") == NULL) return 6;
    featadv_string_free(text);
    featadv_config_free(cfg);

    if (featadv_model_load("/nonexistent/checkpoint.json", NULL) != FEATADV_STATUS_NULL_POINTER) return 7;
    printf("featadv %s\n", featadv_version());
    return 0;
}
