#include <stdio.h>
#include "vendor/api.h"

int main(void) {
    printf("%d\n", api_answer());
    return 0;
}
