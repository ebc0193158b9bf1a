#include "ebats/ebats.hpp"
int main() { return 0; }
