/* Unsynchronized file-local state; one instance per namespace. */
static int counter;

int counter_increment(void) { return ++counter; }
int counter_get(void) { return counter; }
