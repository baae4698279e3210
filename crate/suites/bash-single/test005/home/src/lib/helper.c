#include <ctype.h>

int count_words(const char *text) {
    int words = 0;
    int inside = 0;
    for (; *text; text++) {
        int space = isspace((unsigned char)*text);
        words += !space && !inside;
        inside = !space;
    }
    return words;
}
