/* Minimal C client: load a checkpoint, process a buffer, measure, verify. */
#include <math.h>
#include <stdio.h>

#include "stable_rnn_va.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s CHECKPOINT\n", argv[0]);
        return 2;
    }
    SrvModel *model = NULL;
    if (srv_model_load(argv[1], &model) != SRV_STATUS_OK) {
        fprintf(stderr, "load: %s\n", srv_last_error_message());
        return 1;
    }
    double buf[64];
    for (int i = 0; i < 64; i++) {
        buf[i] = 0.5 * sin(0.1 * i);
    }
    double controls[2] = {0.25, 0.75};
    if (srv_model_process(model, buf, buf, 64, controls, srv_model_control_count(model)) != SRV_STATUS_OK) {
        fprintf(stderr, "process: %s\n", srv_last_error_message());
        return 1;
    }
    double energy = 0.0;
    if (srv_model_measure_noise(model, SRV_SCENARIO_RANDOM, 1, &energy) != SRV_STATUS_OK) {
        fprintf(stderr, "measure: %s\n", srv_last_error_message());
        return 1;
    }
    int passed = 0;
    if (srv_model_verify(model, &passed) != SRV_STATUS_OK) {
        return 1;
    }
    if (srv_model_process(model, buf, buf, 64, controls, 1) != SRV_STATUS_INVALID_ARGUMENT) {
        return 1;
    }
    printf("version %s hidden %zu last %.17g energy %.3f verify %d\n", srv_version(), srv_model_hidden_size(model),
           buf[63], energy, passed);
    srv_model_free(model);
    return 0;
}
