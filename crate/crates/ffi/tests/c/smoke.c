#include <stdio.h>
#include <string.h>
#include "dada.h"

#define CHECK(call)                                                          \
    do {                                                                     \
        DadaStatus s_ = (call);                                              \
        if (s_ != DADA_STATUS_OK) {                                          \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, dada_last_error()); \
            return 1;                                                        \
        }                                                                    \
    } while (0)

int main(void) {
    DadaDataset *ds = NULL;
    DadaConfig *cfg = NULL;
    DadaModel *model = NULL;
    DadaReport *report = NULL;
    CHECK(dada_dataset_generate(
        "{\"kind\":\"two_moons\",\"n_per_domain\":60,\"rotation_deg\":30,\"noise_sd\":0.1}", 1, &ds));
    CHECK(dada_config_from_toml("eta0 = 0.05\nhidden = [8]\npretrain_epochs = 2\nn_alter = 1\n", &cfg));
    CHECK(dada_train(cfg, ds, &model));
    CHECK(dada_evaluate(model, ds, &report));
    double acc = -1.0;
    CHECK(dada_report_metric(report, "acc_target", &acc));
    if (acc < 0.0 || acc > 1.0) return 2;

    double x[4] = {0.0, 0.5, 1.0, -0.2};
    size_t labels[2];
    double dom[2];
    CHECK(dada_model_predict(model, x, 2, 2, labels, dom));
    if (labels[0] > 1 || labels[1] > 1) return 3;

    if (dada_report_metric(report, "nope", &acc) != DADA_STATUS_INVALID) return 4;
    if (strstr(dada_last_error(), "nope") == NULL) return 5;

    char fp[65];
    size_t needed = 0;
    CHECK(dada_dataset_fingerprint(ds, fp, sizeof fp, &needed));
    if (needed != 64 || strlen(fp) != 64) return 6;

    printf("ok %.4f\n", acc);
    dada_report_free(report);
    dada_model_free(model);
    dada_config_free(cfg);
    dada_dataset_free(ds);
    return 0;
}
