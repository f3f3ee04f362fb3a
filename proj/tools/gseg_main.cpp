#include <cstdio>
int main() { std::puts("gseg placeholder"); return 0; }
