// Bubble sort over a global array, then a rolling checksum.
long data[16] = {93, 12, 57, 4, 88, 31, 70, 15, 66, 2, 49, 81, 23, 38, 99, 7};
long result;

static void sort(long *a, long n) {
  long i, j, t;
  for (i = 0; i < n; i++)
    for (j = 0; j + 1 < n - i; j++)
      if (a[j] > a[j + 1]) {
        t = a[j];
        a[j] = a[j + 1];
        a[j + 1] = t;
      }
}

int main(void) {
  long i, s = 0;
  for (i = 0; i < 1; i++) sort(data, 16);
  for (i = 0; i < 16; i++) s = s * 31 + data[i];
  result = s;
  return (int)(s & 0x7f);
}
