#include <stdio.h>

static void greet(void) {
    printf("hello\n");
}

int main(void) {
    greet();
    return 0;
}
