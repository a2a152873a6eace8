// Toy Feistel network: four rounds written out over 32-bit halves.
unsigned long blocks[6] = {0x0123456789abcdef, 0xdeadbeefcafef00d, 0x1111222233334444,
                           0x0f0f0f0f12345678, 0x8badf00d00c0ffee, 0x7777777766666666};
unsigned long key = 0x9e3779b97f4a7c15;
long result;

#define F(x, k) (((((x) << 3) ^ ((x) >> 5)) + ((x) ^ (k))) & 0xffffffff)
#define ROUND(k)                  \
  t = r;                          \
  r = (l ^ F(r, (k))) & 0xffffffff; \
  l = t;

int main(void) {
  unsigned long i, l, r, t, k0, k1, k2, k3, acc = 0;
  // Key schedule.
  k0 = key & 0xffffffff;
  k1 = key >> 32;
  k2 = ((k0 << 7) ^ (k1 >> 3) ^ 0x5bd1e995) & 0xffffffff;
  k3 = ((k1 << 11) ^ (k0 >> 5) ^ (k2 * 9)) & 0xffffffff;
  k0 = (k0 ^ (k3 >> 13)) & 0xffffffff;
  k1 = (k1 + (k2 << 2)) & 0xffffffff;
  i = 0;
  do {
    l = blocks[i] >> 32;
    r = blocks[i] & 0xffffffff;
    ROUND(k0) ROUND(k1) ROUND(k2) ROUND(k3)
    acc = acc * 33 + ((l << 32) | r);
    i++;
  } while (i < 6);
  result = (long)acc;
  return (int)(acc & 0x7f);
}
