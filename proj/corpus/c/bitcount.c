// Weighted population count over a table of words.
unsigned long words[8] = {0x1f, 0x3c05, 0x80, 0x7fff, 0x1234, 0xf0f0, 0x5, 0x2ff};
long result;

static long popcount(unsigned long x) {
  long c = 0;
  while (x) {
    c += x & 1;
    x >>= 1;
  }
  return c;
}

int main(void) {
  long i = 0, total = 0;
  while (i < 8) {
    total += popcount(words[i]) * (i + 1);
    i++;
  }
  result = total;
  return (int)(total & 0x7f);
}
