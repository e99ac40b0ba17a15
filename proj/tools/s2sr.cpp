// Command-line entry point. Subcommands are filled in as the library lands.
#include <cstdio>

int main() {
  std::puts("s2sr: not wired up yet");
  return 1;
}
