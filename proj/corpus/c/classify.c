// Bucket a pseudo-random sequence with a branch-heavy decision tree.
long result;

int main(void) {
  long seed = 12345, i = 0, acc = 0, x, b;
  while (i < 40) {
    seed = (seed * 1103515245 + 12345) & 0x7fffffff;
    x = seed & 1023;
    if (x < 500) {
      if (x < 100) b = 0;
      else if (x < 250) b = 1;
      else b = 2;
    } else if (x < 800) {
      if (x & 1) b = 3;
      else b = 4;
    } else if (x > 950) {
      b = 5;
    } else {
      b = 6;
    }
    acc = acc * 3 + b;
    i++;
  }
  result = acc;
  return (int)(acc & 0x7f);
}
