/* Dense switch: a jump table and an indirect jmp inside the function. */
#include <stdio.h>

static int dispatch(unsigned op, int v) {
    switch (op) {
    case 0: return v + 0xc3;
    case 1: return v - 0xc2;
    case 2: return v ^ 0x1c3;
    case 3: return v * 3;
    case 4: return v | 0xca0;
    case 5: return v & ~0xcb;
    case 6: return -v;
    default: return v;
    }
}

int main(void) {
    int v = 7;
    for (unsigned op = 0; op < 9; op++) {
        v = dispatch(op, v);
        printf("%u:%d\n", op, v);
    }
    return 0;
}
