/* setjmp/longjmp caller: the rewriter must attach its documented warning
 * (an encrypted return address cannot survive a longjmp). */
#include <setjmp.h>
#include <stdio.h>

static jmp_buf env;

static void escape(int code) { longjmp(env, code + 0xc3); }

int main(void) {
    int rc = setjmp(env);
    if (rc == 0) {
        escape(2);
        puts("unreachable");
    }
    printf("rc=%d\n", rc);
    return 0;
}
