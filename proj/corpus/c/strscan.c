// Count vowels and word boundaries in a string.
unsigned char text[] = "the quick brown fox jumps over the lazy dog and keeps running";
long result;

static long scan(unsigned char *s) {
  long vowels = 0, words = 0;
  while (*s) {
    unsigned long c = *s;
    if (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u')
      vowels++;
    else if (c == ' ')
      words++;
    s++;
  }
  return vowels * 100 + words;
}

int main(void) {
  long r = 0, k;
  for (k = 0; k < 2; k++) r += scan(text);
  result = r;
  return (int)(r & 0x7f);
}
