#include <stdlib.h>
#include <string.h>

static char seen[64] = "unset";

__attribute__((constructor)) static void capture(void) {
    const char *v = getenv("LIBCTX_TEST_THREADS");
    if (v) {
        strncpy(seen, v, sizeof seen - 1);
    }
}

const char *env_seen(void) { return seen; }
