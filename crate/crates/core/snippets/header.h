/* gridforge run header for C and C++ programs. */
#ifndef GRIDFORGE_HEADER_H
#define GRIDFORGE_HEADER_H
#include <stdlib.h>
#include <string.h>

typedef struct {
    const char *app_dir;
    const char *checkpoint_dir;
    const char *output_dir;
    int rank;
    int repetitions;
    const char *master_addr;
    int master_port;
    const char *parameters; /* comma-separated */
} gridforge_header;

static gridforge_header gridforge_parse(int argc, char **argv) {
    gridforge_header h = {".", "./checkpoint", "./output", 0, 1, "127.0.0.1", 0, ""};
    for (int i = 1; i + 1 < argc; i++) {
        const char *k = argv[i], *v = argv[i + 1];
        if (!strcmp(k, "--app_dir")) { h.app_dir = v; i++; }
        else if (!strcmp(k, "--checkpoint_dir")) { h.checkpoint_dir = v; i++; }
        else if (!strcmp(k, "--output_dir")) { h.output_dir = v; i++; }
        else if (!strcmp(k, "--rank")) { h.rank = atoi(v); i++; }
        else if (!strcmp(k, "--repetitions")) { h.repetitions = atoi(v); i++; }
        else if (!strcmp(k, "--master_addr")) { h.master_addr = v; i++; }
        else if (!strcmp(k, "--master_port")) { h.master_port = atoi(v); i++; }
        else if (!strcmp(k, "--parameters")) { h.parameters = v; i++; }
    }
    return h;
}
#endif
