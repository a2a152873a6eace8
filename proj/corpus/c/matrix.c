// 4x4 integer matrix product.
long a[4][4] = {{1, 2, 3, 4}, {5, 6, 7, 8}, {9, 10, 11, 12}, {13, 14, 15, 16}};
long b[4][4] = {{2, 0, 1, 3}, {1, 4, 0, 2}, {0, 1, 5, 1}, {3, 2, 1, 0}};
long c[4][4];
long result;

static void matmul(void) {
  long i, j, k, s;
  long *pa, *pb;
  for (i = 0; i < 4; i++)
    for (j = 0; j < 4; j++) {
      pa = a[i];
      pb = &b[0][j];
      s = 0;
      for (k = 0; k < 4; k++) s += pa[k] * pb[4 * k];
      c[i][j] = s;
    }
}

int main(void) {
  long i, j, s = 0, rep;
  for (rep = 0; rep < 2; rep++) matmul();
  for (i = 0; i < 4; i++)
    for (j = 0; j < 4; j++) s = s * 7 + c[i][j];
  result = s;
  return (int)(s & 0x7f);
}
