#include <string.h>

size_t trimmed_length(const char *text) {
    size_t len = strlen(text);
    while (len > 0 && text[len - 1] == ' ') {
        len--;
    }
    return len;
}

int is_blank(const char *text) {
    while (*text != '\0') {
        if (*text != ' ' && *text != '\t') {
            return 0;
        }
        text++;
    }
    return 1;
}

