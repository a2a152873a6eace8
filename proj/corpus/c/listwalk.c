// Pointer chasing over a statically linked list.
struct node {
  long value;
  struct node *next;
};
struct node n7 = {70, 0};
struct node n6 = {61, &n7};
struct node n5 = {52, &n6};
struct node n4 = {43, &n5};
struct node n3 = {34, &n4};
struct node n2 = {25, &n3};
struct node n1 = {16, &n2};
struct node n0 = {7, &n1};
struct node *head = &n0;
long result;

static long walk(struct node *p, long scale) {
  long s = 0;
  while (p) {
    s = s + p->value * scale;
    p = p->next;
  }
  return s;
}

int main(void) {
  long k = 1, total = 0;
  while (k <= 6) {
    total += walk(head, k);
    k++;
  }
  result = total;
  return (int)(total & 0x7f);
}
