#include "recon/tensor.hpp"

#include <cstdlib>

namespace recon {

namespace {

int initial_thread_budget() {
  if (const char* env = std::getenv("RECON_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

}  // namespace

bool& finite_checks() {
  static bool enabled = true;
  return enabled;
}

int& thread_budget() {
  static int budget = initial_thread_budget();
  return budget;
}

}  // namespace recon
