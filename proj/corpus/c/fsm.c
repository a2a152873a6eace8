// Pattern-matching state machine over a symbol stream.
unsigned char input[] = "abacabbacabcabcbacababcabcaacbabcabc";
long result;

static long run(unsigned char *p) {
  long state = 0, hits = 0;
  unsigned long ch;
  while (*p) {
    ch = *p;
    if (state == 0) {
      if (ch == 'a') state = 1;
    } else if (state == 1) {
      if (ch == 'b') state = 2;
      else if (ch != 'a') state = 0;
    } else {
      if (ch == 'c') {
        hits++;
        state = 0;
      } else if (ch == 'a') {
        state = 1;
      } else {
        state = 0;
      }
    }
    p++;
  }
  return hits;
}

int main(void) {
  long k = 0, total = 0;
  while (k < 3) {
    total = total * 5 + run(input);
    k++;
  }
  result = total;
  return (int)(total & 0x7f);
}
